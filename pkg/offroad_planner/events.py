"""
Terrain event classes and their empirical label distribution.
"""

import numpy as np

EVENT_CLASSES = (
    "tree",
    "other-obstacles",
    "human",
    "waterhole",
    "mud",
    "jump",
    "traversable-grass",
    "smooth-road",
    "wet-leaves",
)
N_CLASSES = len(EVENT_CLASSES)

TREE, OTHER_OBSTACLES, HUMAN, WATERHOLE, MUD, JUMP, GRASS, SMOOTH_ROAD, WET_LEAVES = range(N_CLASSES)

COLLISION_CLASSES = (TREE, OTHER_OBSTACLES, HUMAN)
BUMPY_CLASSES = (MUD, JUMP, WET_LEAVES, WATERHOLE)

# Annotated sample counts per class of the recorded driving dataset.
LABEL_COUNTS = (586, 1631, 517, 66, 267, 164, 6421, 10632, 698)


def label_frequencies() -> np.ndarray:
    """Default class prior: normalized label counts."""
    counts = np.asarray(LABEL_COUNTS, dtype=np.float64)
    return counts / counts.sum()


def class_index(name: str) -> int:
    """Look up a class index by its label name."""
    try:
        return EVENT_CLASSES.index(name)
    except ValueError:
        raise KeyError(f"Unknown event class '{name}'") from None
