"""Run configuration: a flat registry of dotted keys with documented defaults.

Config files are JSON, either flat ({"model.dim": 64}) or nested
({"model": {"dim": 64}}). Unknown keys are rejected; every run echoes its
resolved config into the output directory.
"""

import json
from pathlib import Path

from .errors import ConfigError

# key -> (default, type, help)
CONFIG_SPEC = {
    # model
    "model.dim": (64, int, "token embedding width D"),
    "model.heads": (4, int, "attention heads"),
    "model.enc_layers": (3, int, "encoder layers"),
    "model.ffn_dim": (256, int, "feed-forward hidden width"),
    "model.m_h": (60, int, "candidate tokens kept after the encoder"),
    "model.m_b": (24, int, "candidates kept after the body-location stage"),
    "model.j_lh": (5, int, "left-hand joint tokens"),
    "model.j_rh": (5, int, "right-hand joint tokens"),
    "model.j_f": (6, int, "face joint tokens"),
    "model.sampling_points": (4, int, "deformable sampling points per level"),
    "model.variant": ("full", str, "decoder variant: full | naive"),
    "model.backbone_channels": ([16, 32, 64], list, "conv backbone channels per level"),
    "model.max_tokens": (8192, int, "encoder token budget"),
    "model.seed": (0, int, "weight initialization seed"),
    # template
    "template.n_v": (400, int, "template vertex budget"),
    "template.seed": (0, int, "blendshape field seed"),
    "template.pose_blendshapes": (False, bool, "enable pose-corrective blendshapes"),
    # scenes
    "scene.width": (64, int, "image width"),
    "scene.height": (64, int, "image height"),
    "scene.focal": (100.0, float, "shared focal length, pixels"),
    "scene.min_persons": (1, int, "minimum persons per scene"),
    "scene.max_persons": (3, int, "maximum persons per scene"),
    "scene.z_near": (3.5, float, "nearest person depth, meters"),
    "scene.z_far": (9.0, float, "farthest person depth, meters"),
    "scene.pose_std": (0.22, float, "body pose noise, radians"),
    "scene.hand_pose_std": (0.2, float, "hand pose noise, radians"),
    "scene.jaw_pose_std": (0.1, float, "jaw pose noise, radians"),
    "scene.shape_std": (1.0, float, "shape coefficient spread"),
    "scene.expr_std": (1.0, float, "expression coefficient spread"),
    "scene.overlap_bias": (False, bool, "bias person placement toward overlap"),
    "scene.box_pad": (0.05, float, "part-box padding fraction"),
    "scene.min_box": (0.01, float, "minimum normalized box extent"),
    "scene.splat_sigma": (1.6, float, "splat size at mid depth, pixels"),
    "scene.background_level": (0.3, float, "background noise amplitude"),
    "scene.occlusion_radius": (0.22, float, "occluder body-disc radius, meters"),
    "scene.color_jitter": (False, bool, "augmentation stub, unused"),
    "scene.random_resize": (False, bool, "augmentation stub, unused"),
    "scene.instance_crop": (False, bool, "augmentation stub, unused"),
    # loss
    "loss.scheme": ("s23", str, "parameter supervision: s23 | all | s3only"),
    "loss.cls": (2.0, float, "classification focal weight"),
    "loss.box_l1": (5.0, float, "box L1 weight"),
    "loss.giou": (2.0, float, "box GIoU weight"),
    "loss.j2d_l1": (10.0, float, "2D joint L1 weight"),
    "loss.oks_body": (4.0, float, "body OKS weight"),
    "loss.oks_face": (0.5, float, "face OKS weight"),
    "loss.oks_hand": (0.5, float, "hand OKS weight"),
    "loss.param_pose": (1.0, float, "pose parameter L1 weight"),
    "loss.param_shape": (0.01, float, "shape parameter L1 weight"),
    "loss.param_expr": (0.01, float, "expression parameter L1 weight"),
    "loss.kp3d_body": (1.0, float, "body 3D keypoint weight"),
    "loss.kp3d_part": (0.5, float, "face/hand 3D keypoint weight"),
    "loss.kp2d_body": (1.0, float, "body 2D reprojection weight"),
    "loss.kp2d_part": (0.5, float, "face/hand 2D reprojection weight"),
    "loss.match_cls": (2.0, float, "matching classification cost weight"),
    "loss.match_l1": (5.0, float, "matching box L1 cost weight"),
    "loss.match_giou": (2.0, float, "matching GIoU cost weight"),
    "loss.oks_k": (0.1, float, "uniform per-joint OKS constant"),
    # training
    "train.iters": (2000, int, "optimizer iterations"),
    "train.batch": (4, int, "scenes per batch"),
    "train.lr": (1e-4, float, "Adam learning rate"),
    "train.lr_drop_frac": (0.8, float, "fraction of iters before the lr drop"),
    "train.lr_drop_factor": (0.1, float, "lr multiplier after the drop"),
    "train.seed": (0, int, "training seed (model init unless model.seed set)"),
    "train.dtype": ("float32", str, "network dtype during training: float32 | float64"),
    "train.flip_prob": (0.0, float, "horizontal-flip augmentation probability"),
    "train.log_every": (10, int, "loss log cadence, iterations"),
    # data generation
    "data.num_scenes": (32, int, "scenes to generate"),
    "data.seed": (7, int, "scene generation base seed"),
    # evaluation
    "eval.threshold": (0.5, float, "detection score threshold"),
    "eval.match_threshold": (0.05, float, "instance-match distance, image-width fraction"),
}

THRESHOLD_PRESETS = {"agora-0.5": 0.5, "agora-0.3": 0.3}


class RunConfig:
    def __init__(self, values=None):
        self._values = {k: default for k, (default, _, _) in CONFIG_SPEC.items()}
        if values:
            self.update(values)

    def update(self, values):
        for key, value in _flatten(values).items():
            if key not in CONFIG_SPEC:
                raise ConfigError(f"unknown config key {key!r}")
            self._values[key] = _coerce(key, value)
        return self

    def __getitem__(self, key):
        if key not in self._values:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def __contains__(self, key):
        return key in self._values

    def as_dict(self):
        return dict(self._values)

    @classmethod
    def load(cls, path):
        return cls(json.loads(Path(path).read_text()))

    def echo(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps(self._values, indent=2, sort_keys=True) + "\n"
        )


def _flatten(values, prefix=""):
    flat = {}
    for key, value in values.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(_flatten(value, prefix=f"{full}."))
        else:
            flat[full] = value
    return flat


def _coerce(key, value):
    _, typ, _ = CONFIG_SPEC[key]
    if typ is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if typ is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return [int(v) for v in value]
    try:
        out = typ(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot coerce {value!r} to {typ.__name__}") from exc
    if typ is int and isinstance(value, float) and value != out:
        raise ConfigError(f"{key}: expected an integer, got {value!r}")
    return out


def scene_config(cfg):
    from .scene import SceneConfig

    return SceneConfig(
        **{k.split(".", 1)[1]: v for k, v in cfg.as_dict().items() if k.startswith("scene.")}
    )


def loss_weights(cfg):
    keys = (
        "cls", "box_l1", "giou", "j2d_l1", "oks_body", "oks_face", "oks_hand",
        "param_pose", "param_shape", "param_expr",
        "kp3d_body", "kp3d_part", "kp2d_body", "kp2d_part",
    )
    return {k: cfg[f"loss.{k}"] for k in keys}


def match_weights(cfg):
    return {"cls": cfg["loss.match_cls"], "l1": cfg["loss.match_l1"], "giou": cfg["loss.match_giou"]}
