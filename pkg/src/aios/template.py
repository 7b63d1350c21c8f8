"""Procedural generation of the reduced body-model template.

Vertices are distributed along bone segments and joint spheres with
golden-angle spirals (no RNG), so the mesh is a deterministic function of
the vertex budget. Blendshape fields use a seeded generator. The pelvis
row of the joint regressor annihilates every blendshape, which keeps the
rest-pose root at the origin for all shape/expression coefficients and
makes global rotation exactly equivariant.
"""

import os

import numpy as np

from . import skeleton as sk
from .body_model import BodyModel

_GOLDEN = np.pi * (3.0 - np.sqrt(5.0))

# (kind, joint_a, joint_b, base_count, radius); "bone" spans rest positions
# of a->b with skinning blended from a to b, "sphere" rings around a single
# joint. Counts are for the default 400-vertex budget; left-side entries are
# mirrored programmatically.
_CENTER_SEGMENTS = [
    ("sphere", 0, 0, 26, 0.115),
    ("bone", 0, 3, 24, 0.115),
    ("bone", 3, 6, 24, 0.125),
    ("bone", 6, 9, 24, 0.130),
    ("bone", 9, 12, 8, 0.050),
    ("sphere", 15, 15, 54, 0.088),
    ("sphere", 52, 52, 12, 0.032),
]

_LEFT_SEGMENTS = [
    ("bone", 1, 4, 16, 0.072),
    ("bone", 4, 7, 14, 0.055),
    ("bone", 7, 10, 6, 0.042),
    ("bone", 9, 13, 4, 0.050),
    ("bone", 13, 16, 6, 0.055),
    ("bone", 16, 18, 14, 0.048),
    ("bone", 18, 20, 14, 0.042),
    ("sphere", 20, 20, 5, 0.035),
]

_FACE_PATCH_COUNT = 20  # extra vertices around the face landmarks
_FACE_RADIUS = 0.012


def _mirror_joint(j):
    return int(sk.FLIP_JOINT_MAP[j])


def _hand_segments(wrist):
    segs = []
    base = 22 if wrist == 20 else 37
    for finger in range(5):
        f1, f2, f3 = base + 3 * finger, base + 3 * finger + 1, base + 3 * finger + 2
        segs.append(("bone", f1, f2, 2, 0.013))
        segs.append(("bone", f2, f3, 3, 0.012))
    return segs


def _orthonormal_frame(axis):
    axis = axis / max(np.linalg.norm(axis), 1e-9)
    ref = np.array([0.0, 1.0, 0.0]) if abs(axis[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    u = np.cross(axis, ref)
    u /= max(np.linalg.norm(u), 1e-9)
    v = np.cross(axis, u)
    return u, v


def _bone_vertices(pa, pb, count, radius):
    axis = pb - pa
    length = np.linalg.norm(axis)
    if length < 1e-9:
        return _sphere_vertices(pa, count, radius)[0], None
    u, v = _orthonormal_frame(axis)
    pts = np.empty((count, 3))
    ts = np.empty(count)
    for i in range(count):
        t = (i + 0.5) / count
        ang = i * _GOLDEN
        pts[i] = pa + t * axis + radius * (np.cos(ang) * u + np.sin(ang) * v)
        ts[i] = t
    return pts, ts

def _sphere_vertices(center, count, radius):
    pts = np.empty((count, 3))
    for i in range(count):
        z = 1.0 - 2.0 * (i + 0.5) / count
        r_xy = np.sqrt(max(0.0, 1.0 - z * z))
        ang = i * _GOLDEN
        pts[i] = center + radius * np.array([r_xy * np.cos(ang), r_xy * np.sin(ang), z])
    return pts, None


def _blend_ramp(t):
    # 0 at the parent end, 0.5 at the child joint (half parent / half child)
    s = np.clip(t, 0.0, 1.0)
    return 0.5 * s * s * (3.0 - 2.0 * s)


def _segment_list():
    segs = list(_CENTER_SEGMENTS)
    left = list(_LEFT_SEGMENTS) + _hand_segments(20)
    segs += left
    for kind, a, b, count, radius in left:
        segs.append((kind, _mirror_joint(a), _mirror_joint(b), count, radius))
    return segs


def _scaled_counts(segs, n_vertices):
    base_total = sum(c for _, _, _, c, _ in segs) + _FACE_PATCH_COUNT
    scale = n_vertices / base_total
    counts = [max(2, int(round(c * scale))) for _, _, _, c, _ in segs]
    face_count = max(5, int(round(_FACE_PATCH_COUNT * scale)))
    # absorb the rounding residual into the head sphere (largest segment)
    head_idx = max(range(len(segs)), key=lambda i: counts[i])
    residual = n_vertices - sum(counts) - face_count
    counts[head_idx] += residual
    if counts[head_idx] < 4:
        raise ValueError(f"vertex budget {n_vertices} too small for the segment layout")
    return counts, face_count


def build_template(n_vertices=400, seed=0, with_pose_blendshapes=False):
    """Build the reduced body model.

    Args:
        n_vertices: total vertex budget (default 400).
        seed: blendshape field seed.
        with_pose_blendshapes: populate small pose-corrective fields instead
            of zeros.

    Returns:
        a validated BodyModel.
    """
    rest = sk.REST_JOINTS
    segs = _segment_list()
    counts, face_count = _scaled_counts(segs, n_vertices)

    verts = []
    weights = []  # rows of (joint, weight) pairs

    for (kind, a, b, _, radius), count in zip(segs, counts):
        if kind == "sphere":
            pts, _ = _sphere_vertices(rest[a], count, radius)
            for p in pts:
                verts.append(p)
                if a == 52:  # jaw patch blends with the head
                    weights.append([(52, 0.7), (sk.HEAD_JOINT, 0.3)])
                else:
                    weights.append([(a, 1.0)])
        else:
            pts, ts = _bone_vertices(rest[a], rest[b], count, radius)
            for p, t in zip(pts, ts):
                w_child = _blend_ramp(t)
                verts.append(p)
                weights.append([(a, 1.0 - w_child), (b, w_child)])

    # face patch: small rings around each landmark, tangent to the head
    lm_positions = rest[sk.NUM_POSE_JOINTS :]
    per_lm = [face_count // len(lm_positions)] * len(lm_positions)
    for i in range(face_count - sum(per_lm)):
        per_lm[i] += 1
    face_start = len(verts)
    for lm_i, (pos, cnt) in enumerate(zip(lm_positions, per_lm)):
        for i in range(cnt):
            ang = i * _GOLDEN + lm_i
            offset = _FACE_RADIUS * np.array([np.cos(ang), np.sin(ang), 0.25])
            verts.append(pos + offset)
            if lm_i >= 3:  # mouth corners follow the jaw a little
                weights.append([(sk.HEAD_JOINT, 0.65), (52, 0.35)])
            else:
                weights.append([(sk.HEAD_JOINT, 1.0)])

    verts = np.asarray(verts)
    nv = len(verts)
    assert nv == n_vertices, (nv, n_vertices)

    skin = np.zeros((nv, sk.NUM_POSE_JOINTS))
    for row, pairs in enumerate(weights):
        for joint, w in pairs:
            skin[row, joint] += w
    if os.environ.get("AIOS_CORRUPT_SKINNING") == "1":
        skin[0, 0] += 0.05  # negative-control hook for the self-check suite

    regressor = _build_regressor(verts, face_start)

    # root the rest pose at the origin
    root = regressor[0] @ verts
    verts = verts - root

    rng = np.random.default_rng(np.random.PCG64(seed))
    shape_bs = _shape_fields(verts, rng)
    expr_bs = _expression_fields(verts, rng, face_mask=_face_region_mask(skin))
    # zero net blendshape effect at the pelvis keeps the root pinned
    for bs in (shape_bs, expr_bs):
        for k in range(bs.shape[2]):
            bs[:, :, k] -= regressor[0] @ bs[:, :, k]

    pose_bs = np.zeros((nv, 3, sk.NUM_POSE_BLEND))
    if with_pose_blendshapes:
        pose_bs = rng.normal(0.0, 5e-4, size=(nv, 3, sk.NUM_POSE_BLEND))
        for k in range(pose_bs.shape[2]):
            pose_bs[:, :, k] -= regressor[0] @ pose_bs[:, :, k]

    masks = _part_masks(skin)
    model = BodyModel(
        template_vertices=verts,
        shape_blendshapes=shape_bs,
        expression_blendshapes=expr_bs,
        pose_blendshapes=pose_bs,
        kinematic_parents=sk.PARENTS,
        joint_regressor=regressor,
        skinning_weights=skin,
        part_vertex_masks=masks,
    )
    return model.validate()


def _build_regressor(verts, face_start):
    nv = len(verts)
    regressor = np.zeros((sk.NUM_JOINTS, nv))
    for j in range(sk.NUM_JOINTS):
        target = sk.REST_JOINTS[j]
        if j >= sk.NUM_POSE_JOINTS:
            # face landmarks read only the face patch
            cand = np.arange(face_start, nv)
            k = 4
        else:
            cand = np.arange(nv)
            k = 6
        d = np.linalg.norm(verts[cand] - target, axis=1)
        order = np.argsort(d, kind="stable")[:k]
        sigma = 1.5 * max(d[order[0]], 5e-3)
        w = np.exp(-((d[order] / sigma) ** 2))
        regressor[j, cand[order]] = w / w.sum()
    return regressor


def _face_region_mask(skin):
    head = skin[:, sk.HEAD_JOINT] + skin[:, sk.JAW_JOINT]
    return head > 0.5


def _part_masks(skin):
    dominant = skin.argmax(axis=1)
    lhand = (dominant >= sk.LHAND_JOINT_RANGE[0]) & (dominant < sk.LHAND_JOINT_RANGE[1])
    rhand = (dominant >= sk.RHAND_JOINT_RANGE[0]) & (dominant < sk.RHAND_JOINT_RANGE[1])
    face = (dominant == sk.HEAD_JOINT) | (dominant == sk.JAW_JOINT)
    body = ~(lhand | rhand | face)
    return {"body": body, "lhand": lhand, "rhand": rhand, "face": face}


def _shape_fields(verts, rng):
    """Smooth global deformation fields, a few centimetres per unit coefficient."""
    nv = len(verts)
    fields = np.zeros((nv, 3, sk.NUM_SHAPE_COEFFS))
    for k in range(sk.NUM_SHAPE_COEFFS):
        gain = rng.normal(0.0, 0.02, size=3)
        amp = rng.normal(0.0, 0.012, size=3)
        freq = rng.uniform(1.0, 3.0)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
        fields[:, :, k] = verts * gain + amp * np.sin(freq * verts[:, 1:2] + phase)
    # first coefficient: mostly stature
    fields[:, :, 0] += verts * np.array([0.01, 0.05, 0.01])
    return fields


def _expression_fields(verts, rng, face_mask):
    """Deformations confined to the face region, millimetre scale."""
    nv = len(verts)
    fields = np.zeros((nv, 3, sk.NUM_EXPR_COEFFS))
    center = sk.REST_JOINTS[sk.JAW_JOINT]
    envelope = np.exp(-np.sum((verts - center) ** 2, axis=1) / (2 * 0.06**2))
    envelope = envelope * face_mask
    for k in range(sk.NUM_EXPR_COEFFS):
        amp = rng.normal(0.0, 0.006, size=3)
        freq = rng.uniform(20.0, 60.0)
        phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
        wave = np.sin(freq * verts[:, 0:1] + freq * 0.7 * verts[:, 1:2] + phase)
        fields[:, :, k] = envelope[:, None] * amp * wave
    return fields
