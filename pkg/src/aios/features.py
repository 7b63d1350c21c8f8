"""Image -> multi-scale features -> encoded tokens -> candidate human tokens.

A small strided conv net replaces a heavyweight backbone; its levels are
flattened into anchor-carrying tokens, refined by a pre-norm transformer
encoder, and filtered to the top-scoring candidates with sigmoid-bounded
initial box queries.
"""

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigError

DTYPE = torch.float64


def inverse_sigmoid(x, eps=1e-6):
    x = x.clamp(eps, 1.0 - eps)
    return torch.log(x / (1.0 - x))


def sine_box_embedding(boxes, dim):
    """Sinusoidal embedding of (..., 4) normalized boxes into (..., dim)."""
    assert dim % 8 == 0, "embedding dim must be divisible by 8"
    n_per = dim // 4
    device = boxes.device
    half = n_per // 2
    freq = 10000.0 ** (-torch.arange(half, dtype=boxes.dtype, device=device) / half)
    args = boxes.unsqueeze(-1) * freq * (2.0 * math.pi)  # (..., 4, half)
    emb = torch.cat([args.sin(), args.cos()], dim=-1)  # (..., 4, n_per)
    return emb.flatten(-2)


@dataclass
class ImageTokens:
    content: torch.Tensor  # (B, M, D)
    positions: torch.Tensor  # (M, 4) normalized cxcywh anchors
    level_index: torch.Tensor  # (M,)
    spatial_shapes: list  # [(H_l, W_l)]
    level_start: list  # flat offsets per level


@dataclass
class CandidateSet:
    tokens: torch.Tensor  # (B, M_h, D)
    queries: torch.Tensor  # (B, M_h, 4)
    scores: torch.Tensor  # (B, M_h) logits, non-increasing


class ConvBackbone(nn.Module):
    """Four strided conv blocks producing levels at strides 4/8/16."""

    def __init__(self, dim, channels=(16, 32, 64)):
        super().__init__()
        c1, c2, c3 = channels
        self.stem = nn.Sequential(
            nn.Conv2d(3, c1, 3, stride=2, padding=1), nn.GELU(),
            nn.Conv2d(c1, c1, 3, stride=2, padding=1), nn.GELU(),
        )
        self.block3 = nn.Sequential(nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.GELU())
        self.block4 = nn.Sequential(nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.GELU())
        self.proj = nn.ModuleList([nn.Conv2d(c, dim, 1) for c in channels])
        self.strides = (4, 8, 16)

    def forward(self, images):
        if images.shape[-1] % self.strides[-1] or images.shape[-2] % self.strides[-1]:
            raise ConfigError(
                f"image dims {tuple(images.shape[-2:])} not divisible by stride {self.strides[-1]}"
            )
        l0 = self.stem(images)
        l1 = self.block3(l0)
        l2 = self.block4(l1)
        return [p(x) for p, x in zip(self.proj, (l0, l1, l2))]


def flatten_pyramid(levels):
    """Levels [(B, D, H_l, W_l)] -> ImageTokens with per-level anchors."""
    contents, anchors, level_idx, shapes, starts = [], [], [], [], []
    offset = 0
    for li, feat in enumerate(levels):
        b, d, h, w = feat.shape
        contents.append(feat.flatten(2).transpose(1, 2))  # (B, H*W, D)
        ys, xs = torch.meshgrid(
            torch.arange(h, dtype=feat.dtype), torch.arange(w, dtype=feat.dtype), indexing="ij"
        )
        cx = (xs.flatten() + 0.5) / w
        cy = (ys.flatten() + 0.5) / h
        ww = torch.full_like(cx, 1.0 / w)
        hh = torch.full_like(cy, 1.0 / h)
        anchors.append(torch.stack([cx, cy, ww, hh], dim=-1))
        level_idx.append(torch.full((h * w,), li, dtype=torch.int64))
        shapes.append((h, w))
        starts.append(offset)
        offset += h * w
    return ImageTokens(
        content=torch.cat(contents, dim=1),
        positions=torch.cat(anchors, dim=0),
        level_index=torch.cat(level_idx, dim=0),
        spatial_shapes=shapes,
        level_start=starts,
    )


def unflatten_pyramid(tokens):
    """Inverse of flatten_pyramid for the content tensor."""
    levels = []
    for (h, w), start in zip(tokens.spatial_shapes, tokens.level_start):
        chunk = tokens.content[:, start : start + h * w]
        levels.append(chunk.transpose(1, 2).reshape(chunk.shape[0], -1, h, w))
    return levels


class MultiHeadSelfAttention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        assert dim % heads == 0
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.wq = nn.Linear(dim, dim)
        self.wk = nn.Linear(dim, dim)
        self.wv = nn.Linear(dim, dim)
        self.wo = nn.Linear(dim, dim)

    def forward(self, x, pos=None, mask=None):
        # mask: (N, N) bool, True = attention allowed
        b, n, d = x.shape
        qk_in = x if pos is None else x + pos
        q = self._split(self.wq(qk_in))
        k = self._split(self.wk(qk_in))
        v = self._split(self.wv(x))
        scores = (q @ k.transpose(-2, -1)) * self.scale
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, n, d)
        return self.wo(out)

    def _split(self, t):
        b, n, _ = t.shape
        return t.reshape(b, n, self.heads, -1).transpose(1, 2)


class FeedForward(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    """Pre-norm self-attention + feed-forward block."""

    def __init__(self, dim, heads, ffn_dim):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))
        return x + self.ffn(self.ln2(x))


class MLP(nn.Module):
    def __init__(self, dims, zero_last=False):
        super().__init__()
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.GELU()]
        layers = layers[:-1]
        self.net = nn.Sequential(*layers)
        if zero_last:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, x):
        return self.net(x)


CLS_PRIOR_BIAS = -4.595  # log(0.01 / 0.99): start detection scores near 0.01


class FeaturePipeline(nn.Module):
    def __init__(self, dim=64, heads=4, enc_layers=3, ffn_dim=256, m_h=60,
                 backbone_channels=(16, 32, 64), max_tokens=8192):
        super().__init__()
        self.dim = dim
        self.m_h = m_h
        self.max_tokens = max_tokens
        self.backbone = ConvBackbone(dim, backbone_channels)
        self.encoder = nn.ModuleList(EncoderLayer(dim, heads, ffn_dim) for _ in range(enc_layers))
        self.cls_head = nn.Linear(dim, 1)
        nn.init.constant_(self.cls_head.bias, CLS_PRIOR_BIAS)
        self.box_head = MLP([dim, dim, 4], zero_last=True)

    def extract_multiscale(self, images):
        return self.backbone(images)

    def encode(self, tokens: ImageTokens) -> ImageTokens:
        if tokens.content.shape[1] > self.max_tokens:
            raise ConfigError(
                f"{tokens.content.shape[1]} tokens exceed the configured limit {self.max_tokens}"
            )
        pe = sine_box_embedding(tokens.positions, self.dim)
        content = tokens.content + pe
        for layer in self.encoder:
            content = layer(content)
        return ImageTokens(
            content=content,
            positions=tokens.positions,
            level_index=tokens.level_index,
            spatial_shapes=tokens.spatial_shapes,
            level_start=tokens.level_start,
        )

    def select_candidates(self, encoded: ImageTokens) -> CandidateSet:
        b, m, _ = encoded.content.shape
        if m < self.m_h:
            raise ConfigError(f"cannot retain {self.m_h} of {m} tokens")
        logits = self.cls_head(encoded.content).squeeze(-1)  # (B, M)
        boxes = torch.sigmoid(
            inverse_sigmoid(encoded.positions) + self.box_head(encoded.content)
        )
        # stable descending sort: ties keep the lower flat token index
        order = torch.argsort(logits, dim=1, descending=True, stable=True)[:, : self.m_h]
        gather = lambda t: torch.gather(t, 1, order.unsqueeze(-1).expand(-1, -1, t.shape[-1]))
        return CandidateSet(
            tokens=gather(encoded.content),
            queries=gather(boxes),
            scores=torch.gather(logits, 1, order),
        )

    def forward(self, images):
        levels = self.extract_multiscale(images)
        tokens = flatten_pyramid(levels)
        encoded = self.encode(tokens)
        return encoded, self.select_candidates(encoded)
