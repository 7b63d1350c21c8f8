"""Full detector: feature pipeline plus progressive decoder."""

import numpy as np
import torch
from torch import nn

from .decoder import ProgressiveDecoder, StageOutput
from .errors import ConfigError
from .features import FeaturePipeline

DTYPE = torch.float64


class AiosModel(nn.Module):
    """End-to-end multi-person whole-body estimator.

    ``forward`` returns a dict of StageOutput keyed by stage: "enc" for the
    encoder candidate proposals, then "s1"/"s2"/"s3" (full variant) or
    "s1"/"wb" (naive variant); the last key is the final prediction.
    """

    def __init__(self, dim=64, heads=4, enc_layers=3, ffn_dim=256, m_h=60, m_b=24,
                 j_lh=5, j_rh=5, j_f=6, sampling_points=4, variant="full",
                 scheme="s23", backbone_channels=(16, 32, 64), max_tokens=8192):
        super().__init__()
        if m_b > m_h:
            raise ConfigError(f"m_b={m_b} must not exceed m_h={m_h}")
        self.variant = variant
        self.scheme = scheme
        self.pipeline = FeaturePipeline(
            dim=dim, heads=heads, enc_layers=enc_layers, ffn_dim=ffn_dim,
            m_h=m_h, backbone_channels=backbone_channels, max_tokens=max_tokens,
        )
        self.decoder = ProgressiveDecoder(
            dim=dim, heads=heads, ffn_dim=ffn_dim, variant=variant, m_b=m_b,
            j_lh=j_lh, j_rh=j_rh, j_f=j_f, n_levels=len(backbone_channels),
            n_points=sampling_points, scheme=scheme,
        )
        self.to(DTYPE)

    @property
    def final_stage(self):
        return "s3" if self.variant == "full" else "wb"

    def forward(self, images):
        """images (B, 3, H, W) -> dict stage -> StageOutput."""
        encoded, candidates = self.pipeline(images)
        outputs = {
            "enc": StageOutput(
                "enc", candidates.scores, {"body": candidates.queries}, {}, None
            )
        }
        outputs.update(self.decoder(candidates, encoded))
        return outputs


_MODEL_KEYS = (
    "dim", "heads", "enc_layers", "ffn_dim", "m_h", "m_b",
    "j_lh", "j_rh", "j_f", "sampling_points", "variant", "max_tokens",
)


def build_model(cfg, seed=None):
    """Construct an AiosModel from a flat config mapping (``model.*`` keys)."""
    kwargs = {k: cfg[f"model.{k}"] for k in _MODEL_KEYS}
    kwargs["scheme"] = cfg["loss.scheme"]
    kwargs["backbone_channels"] = tuple(cfg["model.backbone_channels"])
    if seed is None:
        seed = cfg["model.seed"]
    with torch.random.fork_rng():
        torch.manual_seed(int(seed))
        model = AiosModel(**kwargs)
    return model


def images_to_tensor(scenes, dtype=DTYPE):
    """Stack scene images into a (B, 3, H, W) tensor."""
    arr = np.stack([s.image for s in scenes]).transpose(0, 3, 1, 2)
    return torch.as_tensor(arr, dtype=dtype)
