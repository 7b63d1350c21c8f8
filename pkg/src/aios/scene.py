"""Deterministic multi-person synthetic scenes with complete ground truth.

Each scene is a noise background with per-person colored Gaussian splats at
the visible 2D keypoints, plus the parameters, 3D/2D keypoints, visibility
flags, and normalized part boxes needed for supervision. Generation is a
pure function of (config, seed): arithmetic runs in fixed order so scenes
are bit-identical across runs.
"""

from dataclasses import dataclass, field, replace

import numpy as np
import torch

from . import skeleton as sk
from .body_model import CameraModel, ParamSet, project
from .errors import SceneGenerationError


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 64
    focal: float = 100.0
    min_persons: int = 1
    max_persons: int = 3
    z_near: float = 3.5
    z_far: float = 9.0
    pose_std: float = 0.22
    hand_pose_std: float = 0.2
    jaw_pose_std: float = 0.1
    shape_std: float = 1.0
    expr_std: float = 1.0
    overlap_bias: bool = False
    box_pad: float = 0.05
    min_box: float = 0.01
    splat_sigma: float = 1.6
    background_level: float = 0.3
    occlusion_radius: float = 0.22
    # augmentation stubs beyond horizontal flip; kept off
    color_jitter: bool = False
    random_resize: bool = False
    instance_crop: bool = False

    @property
    def principal_point(self):
        return np.array([(self.width - 1) / 2.0, (self.height - 1) / 2.0])

    @property
    def frame_max(self):
        # rightmost/bottom pixel centers in normalized units
        return np.array([(self.width - 1) / self.width, (self.height - 1) / self.height])


@dataclass
class CameraIntrinsics:
    focal: float
    principal_point: np.ndarray


@dataclass
class PersonGT:
    params: ParamSet
    translation: np.ndarray  # (3,)
    keypoints3d: np.ndarray  # (K, 3), model frame (pelvis near origin)
    keypoints2d: np.ndarray  # (K, 2) pixels
    visibility: np.ndarray  # (K,) bool
    boxes: np.ndarray  # (4, 4) normalized cxcywh, parts in PART_NAMES order
    box_valid: np.ndarray  # (4,) bool


@dataclass
class SceneGroundTruth:
    image: np.ndarray  # (H, W, 3) floats in [0, 1]
    persons: list
    camera: CameraIntrinsics
    config: SceneConfig = field(repr=False, default=None)


def derive_boxes(keypoints2d, visibility, width, height, box_pad=0.05, min_box=0.01):
    """Tight, padded, clamped part boxes from visible keypoints.

    Returns (boxes (4, 4) normalized cxcywh in PART_NAMES order, valid (4,)).
    Parts with no visible keypoint are flagged invalid and zero-filled.
    """
    keypoints2d = np.asarray(keypoints2d, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=bool)
    xmax_n = (width - 1) / width
    ymax_n = (height - 1) / height
    boxes = np.zeros((4, 4))
    valid = np.zeros(4, dtype=bool)
    for i, part in enumerate(sk.PART_NAMES):
        sl = sk.KEYPOINT_SLICES[part]
        pts = keypoints2d[sl][visibility[sl]]
        if len(pts) == 0:
            continue
        x1, y1 = pts.min(axis=0)
        x2, y2 = pts.max(axis=0)
        w, h = x2 - x1, y2 - y1
        x1, x2 = x1 - box_pad * w, x2 + box_pad * w
        y1, y2 = y1 - box_pad * h, y2 + box_pad * h
        # normalize and clamp to the pixel-center frame
        x1, x2 = np.clip([x1 / width, x2 / width], 0.0, xmax_n)
        y1, y2 = np.clip([y1 / height, y2 / height], 0.0, ymax_n)
        w, h = max(x2 - x1, min_box), max(y2 - y1, min_box)
        cx = np.clip((x1 + x2) / 2, w / 2, max(xmax_n - w / 2, w / 2))
        cy = np.clip((y1 + y2) / 2, h / 2, max(ymax_n - h / 2, h / 2))
        boxes[i] = (cx, cy, w, h)
        valid[i] = True
    return boxes, valid


def _person_color(index):
    hue = index * 2.0 * np.pi * 0.618
    return 0.55 + 0.45 * np.cos(hue + np.array([0.0, -2.0944, 2.0944]))


_PART_TINTS = {
    "body": np.array([1.0, 1.0, 1.0]),
    "lhand": np.array([1.0, 0.45, 0.45]),
    "rhand": np.array([0.45, 0.45, 1.0]),
    "face": np.array([1.0, 1.0, 0.35]),
}


def _splat(image, u, v, color, sigma):
    h, w = image.shape[:2]
    r = int(np.ceil(3.0 * sigma))
    j0, j1 = max(0, int(np.floor(u)) - r), min(w - 1, int(np.ceil(u)) + r)
    i0, i1 = max(0, int(np.floor(v)) - r), min(h - 1, int(np.ceil(v)) + r)
    if j1 < j0 or i1 < i0:
        return
    jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
    g = np.exp(-((jj - u) ** 2 + (ii - v) ** 2) / (2.0 * sigma * sigma))
    image[i0 : i1 + 1, j0 : j1 + 1] += g[..., None] * color


def _keypoint_part(k):
    for part, sl in sk.KEYPOINT_SLICES.items():
        if sl.start <= k < sl.stop:
            return part
    raise IndexError(k)


_KEYPOINT_TINTS = np.stack(
    [_PART_TINTS[_keypoint_part(k)] for k in range(sk.NUM_KEYPOINTS)]
)


def _sample_person(cfg, rng, model, target_uv, z):
    pose = np.zeros((sk.NUM_POSE_JOINTS, 3))
    pose[0] = rng.normal(0.0, 0.25, 3)  # global orientation
    pose[1:22] = rng.normal(0.0, cfg.pose_std, (21, 3))
    pose[22:52] = rng.normal(0.0, cfg.hand_pose_std, (30, 3))
    pose[52] = rng.normal(0.0, cfg.jaw_pose_std, 3)
    beta = rng.normal(0.0, cfg.shape_std, sk.NUM_SHAPE_COEFFS)
    psi = rng.normal(0.0, cfg.expr_std, sk.NUM_EXPR_COEFFS)
    params = ParamSet.from_pose(pose, beta, psi)

    _, joints = model.forward_params(params)
    kp3d = model.keypoints(joints).numpy()

    pp = cfg.principal_point
    tx = (target_uv[0] - pp[0]) * z / cfg.focal
    ty = (target_uv[1] - pp[1]) * z / cfg.focal
    translation = np.array([tx, ty, z])
    cam = CameraModel(cfg.focal, pp, torch.as_tensor(translation))
    kp2d = project(torch.as_tensor(kp3d), cam).numpy()
    return PersonGT(
        params=params,
        translation=translation,
        keypoints3d=kp3d,
        keypoints2d=kp2d,
        visibility=np.zeros(sk.NUM_KEYPOINTS, dtype=bool),
        boxes=np.zeros((4, 4)),
        box_valid=np.zeros(4, dtype=bool),
    )


def _compute_visibility(cfg, persons):
    """In-frame test plus occlusion by nearer persons' body discs."""
    centers = [p.keypoints2d[0] for p in persons]  # projected pelvis
    radii = [cfg.focal * cfg.occlusion_radius / p.translation[2] for p in persons]
    for i, person in enumerate(persons):
        kp = person.keypoints2d
        vis = (
            (kp[:, 0] >= 0.0)
            & (kp[:, 0] <= cfg.width - 1)
            & (kp[:, 1] >= 0.0)
            & (kp[:, 1] <= cfg.height - 1)
        )
        for j, other in enumerate(persons):
            if j == i or other.translation[2] >= person.translation[2]:
                continue
            d = np.linalg.norm(kp - centers[j], axis=1)
            vis &= d > radii[j]
        person.visibility = vis


def _render(cfg, rng, persons):
    image = rng.uniform(0.0, cfg.background_level, (cfg.height, cfg.width, 3))
    for idx, person in enumerate(persons):
        base = _person_color(idx)
        # splat size tracks apparent person size: sigma config value at mid depth
        sigma = float(
            np.clip(cfg.splat_sigma * cfg.focal * 0.0625 / person.translation[2], 0.8, 3.5)
        )
        colors = 0.65 * base + 0.35 * _KEYPOINT_TINTS
        for k in np.flatnonzero(person.visibility):
            u, v = person.keypoints2d[k]
            _splat(image, u, v, colors[k], sigma)
    np.clip(image, 0.0, 1.0, out=image)
    return image


def generate_scene(config, seed, model):
    """Generate one scene; deterministic for fixed (config, seed, model).

    Retries internally (up to 10 attempts) when no sampled person keeps a
    body keypoint inside the frame.
    """
    rng = np.random.default_rng(np.random.PCG64(int(seed)))
    for _ in range(10):
        n = int(rng.integers(config.min_persons, config.max_persons + 1))
        persons = []
        base_uv = None
        for i in range(n):
            z = rng.uniform(config.z_near, config.z_far)
            if config.overlap_bias and base_uv is not None:
                u = base_uv[0] + rng.normal(0.0, 0.10 * config.width)
                v = base_uv[1] + rng.normal(0.0, 0.06 * config.height)
                u = float(np.clip(u, 0.1 * config.width, 0.9 * config.width))
                v = float(np.clip(v, 0.25 * config.height, 0.65 * config.height))
            else:
                u = rng.uniform(0.15 * config.width, 0.85 * config.width)
                v = rng.uniform(0.30 * config.height, 0.60 * config.height)
            if i == 0:
                base_uv = (u, v)
            persons.append(_sample_person(config, rng, model, (u, v), z))

        _compute_visibility(config, persons)
        body_sl = sk.KEYPOINT_SLICES["body"]
        kept = []
        for p in persons:
            kp = p.keypoints2d[body_sl]
            in_frame = (
                (kp[:, 0] >= 0.0)
                & (kp[:, 0] <= config.width - 1)
                & (kp[:, 1] >= 0.0)
                & (kp[:, 1] <= config.height - 1)
            )
            if in_frame.any():
                kept.append(p)
        if not kept:
            continue
        _compute_visibility(config, kept)
        for p in kept:
            p.boxes, p.box_valid = derive_boxes(
                p.keypoints2d, p.visibility, config.width, config.height,
                config.box_pad, config.min_box,
            )
        image = _render(config, rng, kept)
        return SceneGroundTruth(
            image=image,
            persons=kept,
            camera=CameraIntrinsics(config.focal, config.principal_point),
            config=config,
        )
    raise SceneGenerationError(f"no visible persons after 10 attempts (seed={seed})")


def horizontal_flip(scene):
    """Mirror a scene about the vertical axis.

    Pixel x-coordinates map to (W - 1 - x); left/right keypoints, part
    boxes, and pose parameter blocks swap; axis-angle y/z components negate.
    An exact involution.
    """
    cfg = scene.config
    W = scene.image.shape[1]
    image = np.flip(scene.image, axis=1).copy()
    xmax_n = (W - 1) / W

    persons = []
    for p in scene.persons:
        kmap = sk.FLIP_KEYPOINT_MAP
        kp2d = p.keypoints2d[kmap].copy()
        kp2d[:, 0] = (W - 1) - kp2d[:, 0]
        kp3d = p.keypoints3d[kmap].copy()
        kp3d[:, 0] *= -1.0
        vis = p.visibility[kmap].copy()
        translation = p.translation.copy()
        translation[0] *= -1.0

        pose = sk.flip_pose(p.params.full_pose().numpy())
        params = ParamSet.from_pose(pose, p.params.beta.numpy(), p.params.psi.numpy())

        part_map = [0, 2, 1, 3]  # body, rhand<->lhand, face
        boxes = p.boxes[part_map].copy()
        valid = p.box_valid[part_map].copy()
        boxes[valid, 0] = xmax_n - boxes[valid, 0]
        persons.append(
            PersonGT(params, translation, kp3d, kp2d, vis, boxes, valid)
        )

    pp = scene.camera.principal_point.copy()
    pp[0] = (W - 1) - pp[0]
    return SceneGroundTruth(
        image=image,
        persons=persons,
        camera=CameraIntrinsics(scene.camera.focal, pp),
        config=cfg if cfg is None else replace(cfg),
    )
