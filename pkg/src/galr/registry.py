"""Universal joint registry.

Every hand description maps each of its joints onto one slot of a fixed
24-joint reference hand. Decoders emit all 24 angles; a per-embodiment
selection then picks out the slots that exist on the target hand. The
registry is versioned so that serialized checkpoints can refuse to load
against a reordered table.
"""

REGISTRY_VERSION = "u24.1"

# Five digits x four joints each, plus four auxiliary palm slots. Order is
# load-bearing: checkpoints store decoder weights indexed by these slots.
_DIGITS = ("thumb", "index", "middle", "ring", "little")
_PER_DIGIT = ("yaw", "base_flex", "mid_flex", "tip_flex")

UNIVERSAL_JOINT_NAMES = tuple(
    f"{digit}_{part}" for digit in _DIGITS for part in _PER_DIGIT
) + tuple(f"palm_aux_{i}" for i in range(4))

UNIVERSAL_MODEL_SIZE = len(UNIVERSAL_JOINT_NAMES)

UNIVERSAL_JOINT_INDEX = {name: i for i, name in enumerate(UNIVERSAL_JOINT_NAMES)}

# Semantic part labels carried by surface points. Index 0 is the palm; the
# digits follow in anatomical order.
SEMANTIC_PART_NAMES = ("palm", "thumb", "index", "middle", "ring", "little")
SEMANTIC_PART_INDEX = {name: i for i, name in enumerate(SEMANTIC_PART_NAMES)}


def universal_index(name: str) -> int:
    """Slot index for a universal joint name; raises KeyError with the
    offending name spelled out."""
    try:
        return UNIVERSAL_JOINT_INDEX[name]
    except KeyError:
        raise KeyError(
            f"unknown universal joint name {name!r}; "
            f"registry version {REGISTRY_VERSION} defines {UNIVERSAL_MODEL_SIZE} slots"
        ) from None


def semantic_index(name: str) -> int:
    """Part label index for a semantic part name."""
    try:
        return SEMANTIC_PART_INDEX[name]
    except KeyError:
        raise KeyError(
            f"unknown semantic part {name!r}; expected one of {SEMANTIC_PART_NAMES}"
        ) from None
