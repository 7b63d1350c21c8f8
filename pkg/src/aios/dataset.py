"""Dataset container: a directory of binary scene records plus a manifest.

Record layout (all little-endian, float32 row-major after the header):

    magic "AIOSSC01" | u32 H | u32 W | u32 P | u32 K
    image (H*W*3) | intrinsics [focal, cx, cy]
    P person blocks, each:
        pose (53*3) | beta (10) | psi (10) | translation (3)
        | keypoints3d (K*3) | keypoints2d (K*2) | visibility (K)
        | boxes (4*4, cxcywh normalized) | box_valid (4)
"""

import json
import struct
from collections import Counter
from pathlib import Path

import numpy as np

from . import skeleton as sk
from .body_model import ParamSet
from .errors import CheckpointError
from .scene import CameraIntrinsics, PersonGT, SceneConfig, SceneGroundTruth

_SC_MAGIC = b"AIOSSC01"

RECORD_FIELDS = [
    "image[H*W*3]",
    "intrinsics[focal,cx,cy]",
    "per-person: pose[53*3], beta[10], psi[10], translation[3], "
    "keypoints3d[K*3], keypoints2d[K*2], visibility[K], boxes[4*4 cxcywh], box_valid[4]",
]


def scene_file_name(index):
    return f"scene_{index:05d}.bin"


def write_scene(path, scene):
    h, w = scene.image.shape[:2]
    k = sk.NUM_KEYPOINTS
    parts = [
        _SC_MAGIC,
        struct.pack("<IIII", h, w, len(scene.persons), k),
        _f32(scene.image),
        _f32([scene.camera.focal, *scene.camera.principal_point]),
    ]
    for p in scene.persons:
        parts += [
            _f32(p.params.full_pose().numpy()),
            _f32(p.params.beta.numpy()),
            _f32(p.params.psi.numpy()),
            _f32(p.translation),
            _f32(p.keypoints3d),
            _f32(p.keypoints2d),
            _f32(p.visibility.astype(np.float32)),
            _f32(p.boxes),
            _f32(p.box_valid.astype(np.float32)),
        ]
    Path(path).write_bytes(b"".join(parts))


def _f32(arr):
    return np.ascontiguousarray(np.asarray(arr), dtype="<f4").tobytes()


class _Reader:
    def __init__(self, data, offset):
        self.data = data
        self.offset = offset

    def take(self, shape):
        count = int(np.prod(shape))
        arr = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.offset)
        self.offset += count * 4
        return arr.reshape(shape).astype(np.float64)


def read_scene(path):
    data = Path(path).read_bytes()
    if data[:8] != _SC_MAGIC:
        raise CheckpointError(f"bad scene magic in {path}")
    h, w, n_persons, k = struct.unpack("<IIII", data[8:24])
    r = _Reader(data, 24)
    image = r.take((h, w, 3))
    intr = r.take((3,))
    persons = []
    for _ in range(n_persons):
        pose = r.take((sk.NUM_POSE_JOINTS, 3))
        beta = r.take((sk.NUM_SHAPE_COEFFS,))
        psi = r.take((sk.NUM_EXPR_COEFFS,))
        translation = r.take((3,))
        kp3d = r.take((k, 3))
        kp2d = r.take((k, 2))
        vis = r.take((k,)) > 0.5
        boxes = r.take((4, 4))
        box_valid = r.take((4,)) > 0.5
        persons.append(
            PersonGT(
                params=ParamSet.from_pose(pose, beta, psi),
                translation=translation,
                keypoints3d=kp3d,
                keypoints2d=kp2d,
                visibility=vis,
                boxes=boxes,
                box_valid=box_valid,
            )
        )
    if r.offset != len(data):
        raise CheckpointError(f"scene record {path} has trailing bytes")
    return SceneGroundTruth(
        image=image,
        persons=persons,
        camera=CameraIntrinsics(float(intr[0]), intr[1:3]),
    )


def write_dataset(out_dir, scenes, config_echo, model=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, scene in enumerate(scenes):
        write_scene(out / scene_file_name(i), scene)
    if model is not None:
        model.save(out / "model.bin")
    manifest = {
        "format": "AIOSSC01",
        "version": 1,
        "num_scenes": len(scenes),
        "num_keypoints": sk.NUM_KEYPOINTS,
        "record_fields": RECORD_FIELDS,
        "person_count_histogram": dict(
            sorted(Counter(len(s.persons) for s in scenes).items())
        ),
        "config": config_echo,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(dataset_dir):
    """Load every scene plus the manifest; returns (scenes, manifest)."""
    root = Path(dataset_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    scenes = [
        read_scene(root / scene_file_name(i)) for i in range(manifest["num_scenes"])
    ]
    cfg_echo = manifest.get("config", {})
    scene_cfg = scene_config_from_echo(cfg_echo)
    for s in scenes:
        s.config = scene_cfg
    return scenes, manifest


def scene_config_from_echo(cfg_echo):
    kwargs = {}
    for key, value in cfg_echo.items():
        if key.startswith("scene."):
            kwargs[key.split(".", 1)[1]] = value
    return SceneConfig(**kwargs) if kwargs else SceneConfig()
