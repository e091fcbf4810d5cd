"""A small reverse-mode autodiff core over 2-D numpy arrays.

Tensors are strictly two-dimensional (scalars are (1,1)); the only
broadcasting anywhere is row-wise bias addition and its column/row scaling
cousins, which keeps every gradient formula short enough to audit by eye.
A Tape records operations in execution order and replays them backward
exactly once. Reduction orders are fixed, so identical inputs give
bit-identical outputs and gradients.

The galr encoder registers one fused operation through `Tape.custom`; all
other layers are composed from the primitives below.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np


class DiffError(ValueError):
    pass


class Tensor:
    """A node in a tape: a 2-D value plus provenance for the backward pass."""

    __slots__ = ("values", "tape", "nid")

    def __init__(self, values: np.ndarray, tape: "Tape", nid: int):
        self.values = values
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, nid={self.nid})"


def _as2d(values, dtype) -> np.ndarray:
    arr = np.asarray(values, dtype=dtype)
    if arr.ndim != 2:
        raise DiffError(f"tensors are strictly 2-D, got shape {arr.shape}")
    return arr


class Tape:
    """Topologically ordered operation record with parameter gradient slots."""

    def __init__(self, dtype=np.float64, check_finite: bool = False):
        self.dtype = np.dtype(dtype)
        self.check_finite = check_finite
        self._parents: list[tuple[tuple[int, Callable], ...]] = []
        self._param_nids: dict[str, int] = {}
        self._param_shapes: dict[str, tuple] = {}
        self._done = False
        self.grads: Optional[dict[str, np.ndarray]] = None

    # -- node creation ------------------------------------------------------

    def _record(self, values: np.ndarray, parents) -> Tensor:
        if self._done:
            raise DiffError("tape already consumed by backward(); build a new tape")
        if self.check_finite and not np.isfinite(values).all():
            raise DiffError("non-finite values in forward pass")
        nid = len(self._parents)
        self._parents.append(tuple(parents))
        return Tensor(values, self, nid)

    def input(self, values) -> Tensor:
        """A constant leaf: participates in forward math, receives no gradient."""
        return self._record(_as2d(values, self.dtype), ())

    def param(self, name: str, values: np.ndarray) -> Tensor:
        """A named leaf whose gradient is collected by backward()."""
        if name in self._param_nids:
            raise DiffError(f"parameter {name!r} registered twice on one tape")
        t = self._record(_as2d(values, self.dtype), ())
        self._param_nids[name] = t.nid
        self._param_shapes[name] = t.values.shape
        return t

    def custom(self, values: np.ndarray, parents: list[tuple[Tensor, Callable]]) -> Tensor:
        """Hook for fused operations: `parents` pairs each input tensor with
        a function mapping the output gradient to that input's gradient."""
        for t, _ in parents:
            self._check_tape(t)
        return self._record(
            _as2d(values, self.dtype), [(t.nid, fn) for t, fn in parents]
        )

    def _check_tape(self, t: Tensor):
        if t.tape is not self:
            raise DiffError("tensor belongs to a different tape")

    # -- backward -----------------------------------------------------------

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Populate and return per-parameter gradients of a scalar loss."""
        self._check_tape(loss)
        if self._done:
            raise DiffError("double backward on one tape")
        if loss.values.shape != (1, 1):
            raise DiffError(f"loss must be a (1,1) scalar, got shape {loss.values.shape}")
        if not np.isfinite(loss.values).all():
            raise DiffError("non-finite loss")
        self._done = True

        grads: list[Optional[np.ndarray]] = [None] * len(self._parents)
        grads[loss.nid] = np.ones((1, 1), dtype=self.dtype)
        for nid in range(loss.nid, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            for pnid, fn in self._parents[nid]:
                contrib = fn(g)
                if grads[pnid] is None:
                    grads[pnid] = contrib
                else:
                    grads[pnid] = grads[pnid] + contrib
        self.grads = {}
        for name, nid in self._param_nids.items():
            g = grads[nid]
            if g is None:
                g = np.zeros(self._param_shapes[name], dtype=self.dtype)
            self.grads[name] = g
        return self.grads


# ---------------------------------------------------------------------------
# shape plumbing


def _need(cond: bool, op: str, *shapes):
    if not cond:
        raise DiffError(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


def _same_tape(op: str, *tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise DiffError(f"{op}: operands live on different tapes")
    return tape


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("matmul", a, b)
    _need(a.shape[1] == b.shape[0], "matmul", a.shape, b.shape)
    av, bv = a.values, b.values
    return tape._record(
        av @ bv,
        [(a.nid, lambda g: g @ bv.T), (b.nid, lambda g: av.T @ g)],
    )


def transpose(a: Tensor) -> Tensor:
    return a.tape._record(a.values.T.copy(), [(a.nid, lambda g: g.T.copy())])


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("add", a, b)
    _need(a.shape == b.shape, "add", a.shape, b.shape)
    return tape._record(
        a.values + b.values, [(a.nid, lambda g: g), (b.nid, lambda g: g)]
    )


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Row-wise bias: x (N,C) + bias (1,C). The one permitted broadcast."""
    tape = _same_tape("add_bias", x, bias)
    _need(bias.shape == (1, x.shape[1]), "add_bias", x.shape, bias.shape)
    return tape._record(
        x.values + bias.values,
        [(x.nid, lambda g: g), (bias.nid, lambda g: g.sum(axis=0, keepdims=True))],
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return a.tape._record(a.values * s, [(a.nid, lambda g: g * s)])


def add_const(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape._record(a.values + c, [(a.nid, lambda g: g)])


def cmul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product of same-shape tensors."""
    tape = _same_tape("cmul", a, b)
    _need(a.shape == b.shape, "cmul", a.shape, b.shape)
    av, bv = a.values, b.values
    return tape._record(
        av * bv, [(a.nid, lambda g: g * bv), (b.nid, lambda g: g * av)]
    )


def col_mul(x: Tensor, g_row: Tensor) -> Tensor:
    """Scale column j of x (N,C) by g_row[0, j] — layer-norm gain and friends."""
    tape = _same_tape("col_mul", x, g_row)
    _need(g_row.shape == (1, x.shape[1]), "col_mul", x.shape, g_row.shape)
    xv, gv = x.values, g_row.values
    return tape._record(
        xv * gv,
        [
            (x.nid, lambda g: g * gv),
            (g_row.nid, lambda g: (g * xv).sum(axis=0, keepdims=True)),
        ],
    )


def row_scale(x: Tensor, s_col: Tensor) -> Tensor:
    """Scale row i of x (N,C) by s_col[i, 0]."""
    tape = _same_tape("row_scale", x, s_col)
    _need(s_col.shape == (x.shape[0], 1), "row_scale", x.shape, s_col.shape)
    xv, sv = x.values, s_col.values
    return tape._record(
        xv * sv,
        [
            (x.nid, lambda g: g * sv),
            (s_col.nid, lambda g: (g * xv).sum(axis=1, keepdims=True)),
        ],
    )


def relu(x: Tensor) -> Tensor:
    mask = x.values > 0
    return x.tape._record(np.where(mask, x.values, 0.0), [(x.nid, lambda g: g * mask)])


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.values)
    return x.tape._record(y, [(x.nid, lambda g: g * (1.0 - y * y))])


def sqrt(x: Tensor) -> Tensor:
    y = np.sqrt(x.values)
    return x.tape._record(y, [(x.nid, lambda g: g * (0.5 / y))])


def softmax_rows(x: Tensor) -> Tensor:
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return y * (g - dot)

    return x.tape._record(y, [(x.nid, grad)])


def layer_norm_rows(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to zero mean / unit variance (no affine)."""
    xv = x.values
    mu = xv.mean(axis=1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = centered * inv

    def grad(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return inv * (g - gm - y * gy)

    return x.tape._record(y, [(x.nid, grad)])


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """y[i] = x[idx[i]]; backward scatter-adds in ascending position order."""
    idx = np.asarray(idx, dtype=np.int64)
    _need(idx.ndim == 1, "gather_rows", idx.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DiffError(f"gather_rows: index out of range for {x.shape[0]} rows")
    xv = x.values

    def grad(g):
        out = np.zeros_like(xv)
        np.add.at(out, idx, g)
        return out

    return x.tape._record(xv[idx], [(x.nid, grad)])


def segment_sum(x: Tensor, seg_ids: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of x into n_segments buckets; seg_ids must be sorted ascending.

    Rows within a segment accumulate in ascending row order (left fold);
    empty segments yield zero rows.
    """
    seg_ids = np.asarray(seg_ids, dtype=np.int64)
    _need(seg_ids.shape == (x.shape[0],), "segment_sum", x.shape, seg_ids.shape)
    if seg_ids.size:
        if (np.diff(seg_ids) < 0).any():
            raise DiffError("segment_sum: seg_ids must be sorted ascending")
        if seg_ids[-1] >= n_segments or seg_ids[0] < 0:
            raise DiffError(f"segment_sum: seg id outside 0..{n_segments - 1}")
    out = np.zeros((n_segments, x.shape[1]), dtype=x.values.dtype)
    np.add.at(out, seg_ids, x.values)
    return x.tape._record(out, [(x.nid, lambda g: g[seg_ids])])


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("concat_cols", a, b)
    _need(a.shape[0] == b.shape[0], "concat_cols", a.shape, b.shape)
    na = a.shape[1]
    return tape._record(
        np.concatenate([a.values, b.values], axis=1),
        [(a.nid, lambda g: g[:, :na]), (b.nid, lambda g: g[:, na:])],
    )


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("concat_rows", a, b)
    _need(a.shape[1] == b.shape[1], "concat_rows", a.shape, b.shape)
    na = a.shape[0]
    return tape._record(
        np.concatenate([a.values, b.values], axis=0),
        [(a.nid, lambda g: g[:na]), (b.nid, lambda g: g[na:])],
    )


def mean_rows(x: Tensor) -> Tensor:
    """Column means: (N,C) -> (1,C)."""
    n = x.shape[0]
    _need(n > 0, "mean_rows", x.shape)
    return x.tape._record(
        x.values.mean(axis=0, keepdims=True),
        [(x.nid, lambda g: np.repeat(g / n, n, axis=0))],
    )


def sum_all(x: Tensor) -> Tensor:
    return x.tape._record(
        x.values.sum().reshape(1, 1),
        [(x.nid, lambda g: np.full_like(x.values, g[0, 0]))],
    )


# ---------------------------------------------------------------------------
# finite differences


def fd_check(build_loss, params: dict[str, np.ndarray], step: float = 1e-6):
    """Compare tape gradients to central differences, coordinate by coordinate.

    `build_loss(tape, params)` must construct the loss tensor on the given
    tape using tape.param(...) for entries of `params` it differentiates.
    Returns (max relative error, worst coordinate label) with the error
    measured as |g - g_fd| / max(1, |g|, |g_fd|).
    """
    if step <= 0:
        raise DiffError(f"step must be positive, got {step}")
    tape = Tape()
    loss = build_loss(tape, params)
    if not np.isfinite(loss.values).all():
        raise DiffError("non-finite loss in fd_check")
    grads = tape.backward(loss)

    def eval_loss():
        t = Tape()
        out = build_loss(t, params)
        if not np.isfinite(out.values).all():
            raise DiffError("non-finite loss in fd_check probe")
        return float(out.values[0, 0])

    worst = (0.0, "")
    for name in sorted(grads):
        p = params[name]
        g = grads[name].reshape(-1)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = eval_loss()
            flat[i] = orig - step
            lo = eval_loss()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            analytic = float(g[i])
            rel = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
            if rel > worst[0]:
                worst = (rel, f"{name}[{i}]")
    return worst


# ---------------------------------------------------------------------------
# adaptive moment optimizer


def adam_init(params: dict[str, np.ndarray]) -> dict:
    return {
        "t": 0,
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def optimizer_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: dict,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    epsilon: float = 1e-8,
) -> dict:
    """One adaptive moment-estimation update, in place; returns the state."""
    if lr <= 0:
        raise DiffError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name in sorted(params):
        g = grads[name]
        m = state["m"][name]
        v = state["v"][name]
        if m.shape != g.shape:
            raise DiffError(f"optimizer state/gradient mismatch for {name!r}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        params[name] -= (lr * m_hat / (np.sqrt(v_hat) + epsilon)).astype(params[name].dtype)
    return state
