"""Skeleton layout shared by the body model, scene generator, and decoder heads.

Joint ordering: 22 body joints, then 15 left-hand joints, 15 right-hand
joints, and 1 jaw joint (53 articulated joints total), followed by 5
regressed face landmarks that carry no pose parameters. Coordinates use
+x = subject's left, +y = down (toward the feet), +z = toward the camera,
so a person projects upright under a standard pinhole camera.
"""

import numpy as np

NUM_BODY_JOINTS = 22
NUM_HAND_JOINTS = 15
NUM_POSE_JOINTS = NUM_BODY_JOINTS + 2 * NUM_HAND_JOINTS + 1  # 53
NUM_FACE_LANDMARKS = 5
NUM_JOINTS = NUM_POSE_JOINTS + NUM_FACE_LANDMARKS  # 58 regressor rows

NUM_SHAPE_COEFFS = 10
NUM_EXPR_COEFFS = 10
# pose blend corrections exclude the root joint: (53 - 1) rotations x 9
NUM_POSE_BLEND = (NUM_POSE_JOINTS - 1) * 9

_BODY = [
    # name, parent, rest position (x, y, z)
    ("pelvis", -1, (0.0, 0.0, 0.0)),
    ("left_hip", 0, (0.09, 0.06, 0.0)),
    ("right_hip", 0, (-0.09, 0.06, 0.0)),
    ("spine1", 0, (0.0, -0.12, 0.0)),
    ("left_knee", 1, (0.10, 0.50, 0.0)),
    ("right_knee", 2, (-0.10, 0.50, 0.0)),
    ("spine2", 3, (0.0, -0.26, 0.0)),
    ("left_ankle", 4, (0.10, 0.95, 0.0)),
    ("right_ankle", 5, (-0.10, 0.95, 0.0)),
    ("spine3", 6, (0.0, -0.40, 0.0)),
    ("left_foot", 7, (0.11, 1.03, 0.12)),
    ("right_foot", 8, (-0.11, 1.03, 0.12)),
    ("neck", 9, (0.0, -0.53, 0.0)),
    ("left_collar", 9, (0.07, -0.47, 0.0)),
    ("right_collar", 9, (-0.07, -0.47, 0.0)),
    ("head", 12, (0.0, -0.66, 0.0)),
    ("left_shoulder", 13, (0.18, -0.49, 0.0)),
    ("right_shoulder", 14, (-0.18, -0.49, 0.0)),
    ("left_elbow", 16, (0.45, -0.49, 0.0)),
    ("right_elbow", 17, (-0.45, -0.49, 0.0)),
    ("left_wrist", 18, (0.70, -0.49, 0.0)),
    ("right_wrist", 19, (-0.70, -0.49, 0.0)),
]

# fingers in the order index, middle, pinky, ring, thumb; three knuckles
# each, chained from the wrist. Offsets are relative to the wrist.
_FINGERS = [
    ("index", [(0.035, 0.0, 0.030), (0.065, 0.0, 0.030), (0.090, 0.0, 0.030)]),
    ("middle", [(0.038, 0.0, 0.010), (0.070, 0.0, 0.010), (0.096, 0.0, 0.010)]),
    ("pinky", [(0.030, 0.0, -0.030), (0.052, 0.0, -0.030), (0.070, 0.0, -0.030)]),
    ("ring", [(0.035, 0.0, -0.012), (0.062, 0.0, -0.012), (0.085, 0.0, -0.012)]),
    ("thumb", [(0.015, 0.015, 0.040), (0.035, 0.025, 0.052), (0.052, 0.032, 0.060)]),
]

_FACE_LANDMARKS = [
    ("left_eye", (0.032, -0.69, 0.065)),
    ("right_eye", (-0.032, -0.69, 0.065)),
    ("nose", (0.0, -0.655, 0.085)),
    ("left_mouth", (0.022, -0.615, 0.068)),
    ("right_mouth", (-0.022, -0.615, 0.068)),
]

_JAW_REST = (0.0, -0.62, 0.055)


def _build_tables():
    names = [n for n, _, _ in _BODY]
    parents = [p for _, p, _ in _BODY]
    rest = [list(r) for _, _, r in _BODY]

    for side, wrist in (("left", 20), ("right", 21)):
        sign = 1.0 if side == "left" else -1.0
        wx, wy, wz = rest[wrist]
        for finger, offsets in _FINGERS:
            prev = wrist
            for k, (dx, dy, dz) in enumerate(offsets):
                names.append(f"{side}_{finger}{k + 1}")
                parents.append(prev)
                rest.append([wx + sign * dx, wy + dy, wz + dz])
                prev = len(names) - 1

    names.append("jaw")
    parents.append(15)
    rest.append(list(_JAW_REST))

    for name, pos in _FACE_LANDMARKS:
        names.append(name)
        parents.append(-1)  # landmarks are regressed, not articulated
        rest.append(list(pos))

    return names, np.asarray(parents, dtype=np.int64), np.asarray(rest, dtype=np.float64)


JOINT_NAMES, _ALL_PARENTS, REST_JOINTS = _build_tables()
PARENTS = _ALL_PARENTS[:NUM_POSE_JOINTS]

assert len(JOINT_NAMES) == NUM_JOINTS
assert all(PARENTS[1:] < np.arange(1, NUM_POSE_JOINTS))

JAW_JOINT = JOINT_NAMES.index("jaw")
HEAD_JOINT = JOINT_NAMES.index("head")
LHAND_JOINT_RANGE = (22, 37)
RHAND_JOINT_RANGE = (37, 52)

# keypoint subsets used for 2D/3D supervision and evaluation, as indices
# into the NUM_JOINTS regressed joints
BODY_KEYPOINTS = np.array(
    [0, 1, 2, 4, 5, 7, 8, 10, 11, 12, 15, 16, 17, 18, 19, 20, 21], dtype=np.int64
)
LHAND_KEYPOINTS = np.array([24, 27, 30, 33, 36], dtype=np.int64)  # fingertips
RHAND_KEYPOINTS = np.array([39, 42, 45, 48, 51], dtype=np.int64)
FACE_KEYPOINTS = np.array([52, 53, 54, 55, 56, 57], dtype=np.int64)  # jaw + landmarks

KEYPOINT_PARTS = {
    "body": BODY_KEYPOINTS,
    "lhand": LHAND_KEYPOINTS,
    "rhand": RHAND_KEYPOINTS,
    "face": FACE_KEYPOINTS,
}
WHOLEBODY_KEYPOINTS = np.concatenate(list(KEYPOINT_PARTS.values()))
NUM_KEYPOINTS = len(WHOLEBODY_KEYPOINTS)  # 33

# slices of the whole-body keypoint vector per part
_off = 0
KEYPOINT_SLICES = {}
for _part, _idx in KEYPOINT_PARTS.items():
    KEYPOINT_SLICES[_part] = slice(_off, _off + len(_idx))
    _off += len(_idx)
del _off, _part, _idx

PART_NAMES = ("body", "lhand", "rhand", "face")


def _mirror_name(name):
    if name.startswith("left_"):
        return "right_" + name[5:]
    if name.startswith("right_"):
        return "left_" + name[6:]
    return name


# permutation mapping joint j of a mirrored subject to its source joint
FLIP_JOINT_MAP = np.array(
    [JOINT_NAMES.index(_mirror_name(n)) for n in JOINT_NAMES], dtype=np.int64
)

_kp_pos = {j: i for i, j in enumerate(WHOLEBODY_KEYPOINTS)}
FLIP_KEYPOINT_MAP = np.array(
    [_kp_pos[FLIP_JOINT_MAP[j]] for j in WHOLEBODY_KEYPOINTS], dtype=np.int64
)
del _kp_pos


def flip_pose(pose):
    """Mirror a (53, 3) axis-angle pose across the x = 0 plane.

    Left/right joints swap and the y/z axis-angle components negate; the
    x component is preserved (a rotation about the mirror normal flips
    handedness, which the component negation encodes).
    """
    pose = np.asarray(pose)
    flipped = pose[FLIP_JOINT_MAP[:NUM_POSE_JOINTS]].copy()
    flipped[:, 1] *= -1.0
    flipped[:, 2] *= -1.0
    return flipped
