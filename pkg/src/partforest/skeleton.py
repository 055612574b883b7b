"""Joint layouts shared by the generator, the part model and the lifter."""

# 2D joints detected by the part model, in topological order (parents first).
JOINTS_2D = (
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_hip",
    "right_knee",
    "right_ankle",
)

# Tree over JOINTS_2D rooted at the head; -1 marks the root.
PARENTS_2D = (-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 0, 10, 11)

# Mixture sizes: more types for the parts with the most appearance variation.
N_TYPES_2D = (5, 5, 6, 6, 5, 6, 6, 5, 6, 6, 5, 6, 6)

# 3D motion-capture style joints (20 x 3 = 60 values per pose).
JOINTS_3D = (
    "pelvis",
    "thorax",
    "neck",
    "head",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "left_hand",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "right_hand",
    "left_hip",
    "left_knee",
    "left_ankle",
    "left_toe",
    "right_hip",
    "right_knee",
    "right_ankle",
    "right_toe",
)

# Index into JOINTS_3D for every JOINTS_2D entry.
JOINTS_2D_FROM_3D = tuple(JOINTS_3D.index(name) for name in JOINTS_2D)

# Left/right sibling pairs that are prone to double counting.
DOUBLE_COUNT_PAIRS = (
    ("left_elbow", "right_elbow"),
    ("left_wrist", "right_wrist"),
    ("left_knee", "right_knee"),
    ("left_ankle", "right_ankle"),
)

LIMB_JOINTS = tuple(name for pair in DOUBLE_COUNT_PAIRS for name in pair)

N_JOINTS_2D = len(JOINTS_2D)
N_JOINTS_3D = len(JOINTS_3D)


def pair_indices(names=JOINTS_2D, pairs=DOUBLE_COUNT_PAIRS):
    """Map named sibling pairs to index pairs, skipping pairs not in ``names``."""
    out = []
    for a, b in pairs:
        if a in names and b in names:
            out.append((names.index(a), names.index(b)))
    return tuple(out)
