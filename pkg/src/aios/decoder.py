"""Progressive decoder: token layouts, masked attention, deformable
cross-attention, and the staged refinement pipeline.

The full variant runs body-location (2 layers) -> body-refinement
(2 layers, body joint tokens + hand/face location tokens) -> whole-body
refinement (2 layers, hand/face joint tokens). The naive variant replaces
the last two stages with four layers over location tokens only.
"""

import math
from dataclasses import dataclass
from enum import IntEnum
from functools import lru_cache

import torch
from torch import nn

from .errors import ConfigError, StageError
from .features import (
    CLS_PRIOR_BIAS,
    MLP,
    CandidateSet,
    FeedForward,
    ImageTokens,
    MultiHeadSelfAttention,
    inverse_sigmoid,
    sine_box_embedding,
    unflatten_pyramid,
)

PART_ORDER = ("body", "lhand", "rhand", "face")


class TokenKind(IntEnum):
    BODY_LOC = 0
    PART_LOC = 1
    JOINT = 2


@dataclass(frozen=True)
class Block:
    name: str
    kind: TokenKind
    count: int
    parent: str  # block the tokens expand from ("" for the root block)
    part: str


@dataclass(frozen=True)
class TokenLayout:
    stage: str
    blocks: tuple

    @property
    def tokens_per_candidate(self):
        return sum(b.count for b in self.blocks)

    def slices(self):
        out, off = {}, 0
        for b in self.blocks:
            out[b.name] = slice(off, off + b.count)
            off += b.count
        return out

    def kinds(self):
        return torch.tensor(
            [int(b.kind) for b in self.blocks for _ in range(b.count)], dtype=torch.int64
        )

    def loc_blocks(self):
        return [b for b in self.blocks if b.kind != TokenKind.JOINT]

    def joint_blocks(self):
        return [b for b in self.blocks if b.kind == TokenKind.JOINT]

    def block(self, name):
        for b in self.blocks:
            if b.name == name:
                return b
        raise KeyError(name)


def make_layout(stage, variant="full", j_lh=5, j_rh=5, j_f=6, j_body=17):
    """Token layout for a decoder stage.

    Stage keys: "s1" (body location), "s2"/"s3" (full variant), "wb"
    (naive whole-body).
    """
    bl = Block("body_loc", TokenKind.BODY_LOC, 1, "", "body")
    bj = Block("body_joints", TokenKind.JOINT, j_body, "body_loc", "body")
    lhl = Block("lhand_loc", TokenKind.PART_LOC, 1, "body_loc", "lhand")
    rhl = Block("rhand_loc", TokenKind.PART_LOC, 1, "body_loc", "rhand")
    fl = Block("face_loc", TokenKind.PART_LOC, 1, "body_loc", "face")
    lhj = Block("lhand_joints", TokenKind.JOINT, j_lh, "lhand_loc", "lhand")
    rhj = Block("rhand_joints", TokenKind.JOINT, j_rh, "rhand_loc", "rhand")
    fj = Block("face_joints", TokenKind.JOINT, j_f, "face_loc", "face")
    if stage == "s1":
        return TokenLayout("s1", (bl,))
    if stage == "wb":
        if variant != "naive":
            raise ConfigError("stage 'wb' exists only in the naive variant")
        return TokenLayout("wb", (bl, lhl, rhl, fl))
    if stage == "s2":
        return TokenLayout("s2", (bl, bj, lhl, rhl, fl))
    if stage == "s3":
        return TokenLayout("s3", (bl, bj, lhl, lhj, rhl, rhj, fl, fj))
    raise ConfigError(f"unknown stage {stage!r}")


@lru_cache(maxsize=64)
def _mask_cached(blocks, num_candidates):
    kinds = torch.tensor(
        [int(b.kind) for b in blocks for _ in range(b.count)], dtype=torch.int64
    )
    t = len(kinds)
    kinds = kinds.repeat(num_candidates)
    cand = torch.arange(num_candidates).repeat_interleave(t)
    same = cand[:, None] == cand[None, :]
    ki = kinds[:, None]
    kj = kinds[None, :]
    # body location tokens see every location token; hand/face location
    # tokens additionally see every body location token; joint tokens stay
    # within their own candidate
    allow = same
    allow = allow | ((ki == int(TokenKind.BODY_LOC)) & (kj != int(TokenKind.JOINT)))
    allow = allow | ((ki == int(TokenKind.PART_LOC)) & (kj == int(TokenKind.BODY_LOC)))
    return allow


def build_attention_mask(layout, num_candidates):
    """Boolean (N, N) mask, True where attention is allowed."""
    return _mask_cached(layout.blocks, num_candidates)


@lru_cache(maxsize=64)
def _global_loc_bias(blocks, num_candidates):
    """Additive (-inf/0) mask for the cross-candidate location-key scores.

    Rows are a candidate's T tokens, columns the Nc*L location tokens of all
    candidates; a candidate's own columns are disabled (its own block is
    handled by the dense intra-candidate term).
    """
    kinds = torch.tensor([int(b.kind) for b in blocks for _ in range(b.count)])
    loc_kinds = kinds[kinds != int(TokenKind.JOINT)]
    t, l = len(kinds), len(loc_kinds)
    qk = kinds[:, None]
    kk = loc_kinds[None, :].repeat(1, num_candidates)
    allow = ((qk == int(TokenKind.BODY_LOC)) & (kk != int(TokenKind.JOINT))) | (
        (qk == int(TokenKind.PART_LOC)) & (kk == int(TokenKind.BODY_LOC))
    )
    allow = allow[None].repeat(num_candidates, 1, 1)  # (Nc, T, Nc*L)
    own = torch.arange(num_candidates).repeat_interleave(l)
    for n in range(num_candidates):
        allow[n, :, own == n] = False
    bias = torch.zeros(num_candidates, t, num_candidates * l, dtype=torch.float64)
    bias.masked_fill_(~allow, float("-inf"))
    return bias


def structured_self_attention(attn, x, pos, layout, num_candidates):
    """Masked self-attention via the stage mask's block structure.

    Numerically identical to dense attention under build_attention_mask:
    each query's softmax spans its own candidate's tokens plus the allowed
    location tokens of the other candidates.
    """
    b, n, d = x.shape
    t = layout.tokens_per_candidate
    nc = num_candidates
    heads = attn.heads
    dh = d // heads
    qk_in = x if pos is None else x + pos
    q = attn.wq(qk_in).reshape(b, nc, t, heads, dh).permute(0, 1, 3, 2, 4)
    k = attn.wk(qk_in).reshape(b, nc, t, heads, dh).permute(0, 1, 3, 2, 4)
    v = attn.wv(x).reshape(b, nc, t, heads, dh).permute(0, 1, 3, 2, 4)

    kinds = layout.kinds()
    loc_idx = torch.nonzero(kinds != int(TokenKind.JOINT)).squeeze(-1)
    l = len(loc_idx)
    k_loc = k[:, :, :, loc_idx].permute(0, 2, 1, 3, 4).reshape(b, heads, nc * l, dh)
    v_loc = v[:, :, :, loc_idx].permute(0, 2, 1, 3, 4).reshape(b, heads, nc * l, dh)

    scores_own = torch.einsum("bnhtd,bnhsd->bnhts", q, k) * attn.scale
    scores_glob = torch.einsum("bnhtd,bhgd->bnhtg", q, k_loc) * attn.scale
    bias = _global_loc_bias(layout.blocks, nc).to(x.dtype)
    scores_glob = scores_glob + bias[None, :, None]

    joint = torch.cat([scores_own, scores_glob], dim=-1)
    weights = torch.softmax(joint, dim=-1)
    w_own, w_glob = weights[..., :t], weights[..., t:]
    out = torch.einsum("bnhts,bnhsd->bnhtd", w_own, v) + torch.einsum(
        "bnhtg,bhgd->bnhtd", w_glob, v_loc
    )
    out = out.permute(0, 1, 3, 2, 4).reshape(b, n, d)
    return attn.wo(out)


def bilinear_sample(grid, xy):
    """Sample (B, D, H, W) features at normalized (B, Q, 2) points.

    Grid node centers sit at ((j + 0.5)/W, (i + 0.5)/H); out-of-range points
    replicate the border.
    """
    b, d, h, w = grid.shape
    q = xy.shape[1]
    x = xy[..., 0] * w - 0.5
    y = xy[..., 1] * h - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx = x - x0
    wy = y - y0
    x0l = x0.long().clamp(0, w - 1)
    x1l = (x0.long() + 1).clamp(0, w - 1)
    y0l = y0.long().clamp(0, h - 1)
    y1l = (y0.long() + 1).clamp(0, h - 1)
    # one gather for all four corners
    idx = torch.stack(
        [y0l * w + x0l, y0l * w + x1l, y1l * w + x0l, y1l * w + x1l], dim=1
    )  # (B, 4, Q)
    flat = grid.flatten(2)  # (B, D, H*W)
    corners = flat.gather(2, idx.reshape(b, 1, 4 * q).expand(-1, d, -1))
    corners = corners.reshape(b, d, 4, q)
    weights = torch.stack(
        [(1 - wx) * (1 - wy), wx * (1 - wy), (1 - wx) * wy, wx * wy], dim=1
    ).unsqueeze(1)  # (B, 1, 4, Q)
    return (corners * weights).sum(dim=2).transpose(1, 2)


def deformable_sample(image: ImageTokens, locations, weights, content=None):
    """Weighted multi-level bilinear sampling.

    Args:
        image: token pyramid metadata (content used unless ``content`` given).
        locations: (B, Q, L, S, 2) normalized sample points.
        weights: (B, Q, L, S), expected to sum to 1 over (L, S).

    Returns:
        (B, Q, D) combined features.
    """
    src = image.content if content is None else content
    levels = unflatten_pyramid(
        ImageTokens(src, image.positions, image.level_index, image.spatial_shapes, image.level_start)
    )
    b, q = locations.shape[:2]
    out = 0.0
    for li, grid in enumerate(levels):
        s = locations.shape[3]
        sampled = bilinear_sample(grid, locations[:, :, li].reshape(b, q * s, 2))
        sampled = sampled.reshape(b, q, s, -1)
        out = out + (weights[:, :, li].unsqueeze(-1) * sampled).sum(dim=2)
    return out


class DeformableCrossAttention(nn.Module):
    """Box-conditioned sparse cross-attention into the feature pyramid.

    Each token predicts S offsets and weights per level; offsets are scaled
    by its query's (w, h) so larger boxes sample wider. Sample points are
    clamped to the unit square.
    """

    def __init__(self, dim, n_levels=3, n_points=4):
        super().__init__()
        self.n_levels = n_levels
        self.n_points = n_points
        self.offset_head = nn.Linear(dim, n_levels * n_points * 2)
        self.weight_head = nn.Linear(dim, n_levels * n_points)
        self.value_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)
        self._reset()

    def _reset(self):
        nn.init.zeros_(self.offset_head.weight)
        angles = torch.arange(self.n_points, dtype=torch.float64) * (2 * math.pi / self.n_points)
        ring = torch.stack([angles.cos(), angles.sin()], dim=-1)
        ring = ring * (torch.arange(1, self.n_points + 1, dtype=torch.float64).reshape(-1, 1) * 0.5 / self.n_points)
        with torch.no_grad():
            self.offset_head.bias.copy_(ring.repeat(self.n_levels, 1).flatten())
        nn.init.zeros_(self.weight_head.weight)
        nn.init.zeros_(self.weight_head.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.out_proj.weight)
        nn.init.zeros_(self.out_proj.bias)

    def forward(self, tokens, queries, image: ImageTokens):
        b, n, _ = tokens.shape
        l, s = self.n_levels, self.n_points
        offsets = self.offset_head(tokens).reshape(b, n, l, s, 2)
        ref = queries[..., :2].reshape(b, n, 1, 1, 2)
        wh = queries[..., 2:4].reshape(b, n, 1, 1, 2)
        locations = (ref + offsets * wh).clamp(0.0, 1.0)
        weights = torch.softmax(self.weight_head(tokens).reshape(b, n, l * s), dim=-1)
        weights = weights.reshape(b, n, l, s)
        value = self.value_proj(image.content)
        out = deformable_sample(image, locations, weights, content=value)
        return self.out_proj(out)


class DecoderLayer(nn.Module):
    """Pre-norm: masked self-attention, deformable cross-attention, FFN."""

    def __init__(self, dim, heads, ffn_dim, n_levels, n_points):
        super().__init__()
        self.ln_sa = nn.LayerNorm(dim)
        self.self_attn = MultiHeadSelfAttention(dim, heads)
        self.ln_ca = nn.LayerNorm(dim)
        self.cross_attn = DeformableCrossAttention(dim, n_levels, n_points)
        self.ln_ffn = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim)
        self.pos_mlp = MLP([dim, dim, dim])

    def forward(self, tokens, queries, image, layout, num_candidates):
        dim = tokens.shape[-1]
        pos = self.pos_mlp(sine_box_embedding(queries, dim))
        attended = structured_self_attention(
            self.self_attn, self.ln_sa(tokens), pos, layout, num_candidates
        )
        tokens = tokens + attended
        tokens = tokens + self.cross_attn(self.ln_ca(tokens), queries, image)
        tokens = tokens + self.ffn(self.ln_ffn(tokens))
        return tokens


class DecoderStage(nn.Module):
    """A stack of decoder layers with per-block query refinement heads.

    Location queries refine all four box coordinates; joint queries refine
    (x, y, s) with the scale duplicated into both box extents. Refinement is
    additive in inverse-sigmoid space, so zeroed heads leave queries intact.
    """

    def __init__(self, layout, dim, heads, ffn_dim, n_layers, n_levels, n_points):
        super().__init__()
        self.layout = layout
        self.layers = nn.ModuleList(
            DecoderLayer(dim, heads, ffn_dim, n_levels, n_points) for _ in range(n_layers)
        )
        self.box_refine = nn.ModuleDict(
            {b.name: MLP([dim, dim, 4], zero_last=True) for b in layout.loc_blocks()}
        )
        self.joint_refine = nn.ModuleDict(
            {b.name: MLP([dim, dim, 3], zero_last=True) for b in layout.joint_blocks()}
        )
        self.cls_head = nn.Linear(dim, 1)
        nn.init.constant_(self.cls_head.bias, CLS_PRIOR_BIAS)

    def _refine(self, tokens, queries):
        slices = self.layout.slices()
        parts = []
        for block in self.layout.blocks:
            sl = slices[block.name]
            t = tokens[:, :, sl]
            q = queries[:, :, sl]
            if block.kind == TokenKind.JOINT:
                delta = self.joint_refine[block.name](t)
                xys = torch.sigmoid(inverse_sigmoid(q[..., :3]) + delta)
                parts.append(torch.cat([xys, xys[..., 2:3]], dim=-1))
            else:
                delta = self.box_refine[block.name](t)
                parts.append(torch.sigmoid(inverse_sigmoid(q) + delta))
        return torch.cat(parts, dim=2)

    def forward(self, tokens, queries, image):
        """tokens (B, Nc, T, D), queries (B, Nc, T, 4) -> refined pair + scores."""
        b, nc, t, d = tokens.shape
        if t != self.layout.tokens_per_candidate:
            raise StageError(
                f"stage {self.layout.stage}: got {t} tokens/candidate, "
                f"expected {self.layout.tokens_per_candidate}"
            )
        flat_t = tokens.reshape(b, nc * t, d)
        flat_q = queries.reshape(b, nc * t, 4)
        for layer in self.layers:
            flat_t = layer(flat_t, flat_q, image, self.layout, nc)
            flat_q = self._refine(
                flat_t.reshape(b, nc, t, d), flat_q.reshape(b, nc, t, 4)
            ).reshape(b, nc * t, 4)
        tokens = flat_t.reshape(b, nc, t, d)
        queries = flat_q.reshape(b, nc, t, 4)
        bl = self.layout.slices()["body_loc"]
        scores = self.cls_head(tokens[:, :, bl.start]).squeeze(-1)
        return tokens, queries, scores


def expand_tokens(tokens, queries, from_layout, to_layout, embeddings):
    """Grow a token set to the next stage's layout.

    Blocks already present keep their content and queries. New tokens are
    their parent block's content plus a learnable embedding; new location
    queries copy the parent box; new joint queries start at the parent box
    center with scale min(w, h) / 4.
    """
    from_names = {b.name for b in from_layout.blocks}
    new_names = {b.name for b in to_layout.blocks}
    if not from_names <= new_names:
        raise StageError(f"cannot expand layout {from_layout.stage} to {to_layout.stage}")
    src = from_layout.slices()
    out_t, out_q = [], []
    for block in to_layout.blocks:
        if block.name in from_names:
            sl = src[block.name]
            out_t.append(tokens[:, :, sl])
            out_q.append(queries[:, :, sl])
            continue
        psl = src[block.parent]
        if psl.stop - psl.start != 1:
            raise StageError(f"parent block {block.parent} must be a single token")
        parent_t = tokens[:, :, psl]
        parent_q = queries[:, :, psl]
        emb = embeddings[block.name]
        out_t.append(parent_t + emb.reshape(1, 1, block.count, -1))
        if block.kind == TokenKind.JOINT:
            center = parent_q[..., :2]
            scale = parent_q[..., 2:4].min(dim=-1, keepdim=True).values / 4.0
            q = torch.cat([center, scale, scale], dim=-1)
        else:
            q = parent_q
        out_q.append(q.expand(-1, -1, block.count, 4))
    return torch.cat(out_t, dim=2), torch.cat(out_q, dim=2)


_SOFTPLUS_SHIFT = math.log(math.exp(5.5) - 1.0)  # raw 0 -> depth 6.0


class SmplxHeads(nn.Module):
    """Parameter regression heads for one stage.

    ``pooled[part]`` selects whether the head reads the location token alone
    or concatenated with the mean of that part's joint tokens.
    """

    _SIZES = {
        "body": {"pose_body": 66, "betas": 10, "cam": 3},
        "lhand": {"pose_lhand": 45},
        "rhand": {"pose_rhand": 45},
        "face": {"pose_jaw": 3, "expr": 10},
    }

    def __init__(self, dim, parts, pooled):
        super().__init__()
        self.parts = tuple(parts)
        self.pooled = dict(pooled)
        self.trunks = nn.ModuleDict()
        self.heads = nn.ModuleDict()
        for part in self.parts:
            in_dim = dim * 2 if self.pooled[part] else dim
            self.trunks[part] = nn.Sequential(
                nn.Linear(in_dim, dim), nn.GELU(), nn.Linear(dim, dim), nn.GELU()
            )
            for name, size in self._SIZES[part].items():
                head = nn.Linear(dim, size)
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)
                self.heads[name] = head

    def forward(self, features, parts=None):
        """features: dict part -> (B, Nc, in_dim); returns raw param dict."""
        active = self.parts if parts is None else tuple(p for p in self.parts if p in parts)
        out = {}
        for part in active:
            latent = self.trunks[part](features[part])
            for name in self._SIZES[part]:
                val = self.heads[name](latent)
                if name == "cam":
                    tz = 0.5 + nn.functional.softplus(val[..., 2:3] + _SOFTPLUS_SHIFT)
                    val = torch.cat([val[..., :2], tz], dim=-1)
                out[name] = val
        b, nc = next(iter(out.values())).shape[:2]
        for name in ("pose_body", "pose_lhand", "pose_rhand", "pose_jaw"):
            if name in out:
                out[name] = out[name].reshape(b, nc, -1, 3)
        return out


@dataclass
class StageOutput:
    stage: str
    scores: torch.Tensor  # (B, Nc) logits
    boxes: dict  # part -> (B, Nc, 4) cxcywh in (0, 1)
    joints2d: dict  # part -> (B, Nc, J, 2) in (0, 1)
    params: dict = None  # populated per the supervision plan

    @property
    def num_candidates(self):
        return self.scores.shape[1]


def supervision_plan(variant, scheme):
    """Map stage key -> parameter supervision ("none" | "body" | "full")."""
    if scheme not in ("s23", "all", "s3only"):
        raise ConfigError(f"unknown scheme {scheme!r}")
    if variant == "full":
        middle, final = ["s2"], "s3"
        stages = ["s1", "s2", "s3"]
    elif variant == "naive":
        middle, final = [], "wb"
        stages = ["s1", "wb"]
    else:
        raise ConfigError(f"unknown variant {variant!r}")
    plan = {"enc": "none", **{s: "none" for s in stages}}
    plan[final] = "full"
    if scheme == "s23":
        for s in middle:
            plan[s] = "body"
    elif scheme == "all":
        plan["s1"] = "body"
        for s in middle:
            plan[s] = "full"
    return plan


class ProgressiveDecoder(nn.Module):
    def __init__(self, dim=64, heads=4, ffn_dim=256, variant="full", m_b=24,
                 j_lh=5, j_rh=5, j_f=6, n_levels=3, n_points=4, scheme="s23"):
        super().__init__()
        if variant not in ("full", "naive"):
            raise ConfigError(f"unknown variant {variant!r}")
        self.variant = variant
        self.m_b = m_b
        self.plan = supervision_plan(variant, scheme)

        counts = dict(j_lh=j_lh, j_rh=j_rh, j_f=j_f)
        self.layout_s1 = make_layout("s1", variant, **counts)
        common = dict(dim=dim, heads=heads, ffn_dim=ffn_dim, n_levels=n_levels, n_points=n_points)
        self.stage1 = DecoderStage(self.layout_s1, n_layers=2, **common)
        if variant == "full":
            self.layout_s2 = make_layout("s2", variant, **counts)
            self.layout_s3 = make_layout("s3", variant, **counts)
            self.stage2 = DecoderStage(self.layout_s2, n_layers=2, **common)
            self.stage3 = DecoderStage(self.layout_s3, n_layers=2, **common)
            new_blocks = [b for b in self.layout_s3.blocks if b.name != "body_loc"]
        else:
            self.layout_wb = make_layout("wb", variant, **counts)
            self.stage_wb = DecoderStage(self.layout_wb, n_layers=4, **common)
            new_blocks = [b for b in self.layout_wb.blocks if b.name != "body_loc"]
        self.embeddings = nn.ParameterDict(
            {b.name: nn.Parameter(torch.randn(b.count, dim) * 0.5) for b in new_blocks}
        )

        # heads exist for every stage regardless of scheme; the plan decides
        # which stages actually emit parameters
        self.heads_s1 = SmplxHeads(dim, ["body"], {"body": False})
        if variant == "full":
            self.heads_s2 = SmplxHeads(
                dim, PART_ORDER, {"body": True, "lhand": False, "rhand": False, "face": False}
            )
            self.heads_s3 = SmplxHeads(dim, PART_ORDER, {p: True for p in PART_ORDER})
        else:
            self.heads_wb = SmplxHeads(dim, PART_ORDER, {p: False for p in PART_ORDER})

    def _part_features(self, tokens, layout):
        """Location token, optionally concatenated with mean joint tokens."""
        slices = layout.slices()
        joint_of = {b.part: b.name for b in layout.joint_blocks()}
        feats = {}
        for block in layout.loc_blocks():
            loc = tokens[:, :, slices[block.name].start]
            if block.part in joint_of:
                pooled = tokens[:, :, slices[joint_of[block.part]]].mean(dim=2)
                feats[block.part] = torch.cat([loc, pooled], dim=-1)
            else:
                feats[block.part] = loc
        return feats

    def _stage_output(self, key, layout, tokens, queries, scores, heads):
        slices = layout.slices()
        boxes = {b.part: queries[:, :, slices[b.name].start] for b in layout.loc_blocks()}
        joints2d = {
            b.part: queries[:, :, slices[b.name], :2] for b in layout.joint_blocks()
        }
        params = None
        if self.plan[key] != "none":
            feats = self._part_features(tokens, layout)
            parts = ("body",) if self.plan[key] == "body" else None
            params = heads(feats, parts=parts)
        return StageOutput(key, scores, boxes, joints2d, params)

    def forward(self, candidates: CandidateSet, image: ImageTokens):
        if self.m_b > candidates.tokens.shape[1]:
            raise ConfigError(f"m_b={self.m_b} exceeds candidate count {candidates.tokens.shape[1]}")
        outputs = {}
        tokens = candidates.tokens.unsqueeze(2)  # (B, Mh, 1, D)
        queries = candidates.queries.unsqueeze(2)
        tokens, queries, scores = self.stage1(tokens, queries, image)
        outputs["s1"] = self._stage_output_s1(tokens, queries, scores)

        # keep the top m_b candidates by score
        order = torch.argsort(scores, dim=1, descending=True, stable=True)[:, : self.m_b]
        tokens = _gather_candidates(tokens, order)
        queries = _gather_candidates(queries, order)

        if self.variant == "full":
            tokens, queries = expand_tokens(tokens, queries, self.layout_s1, self.layout_s2, self.embeddings)
            tokens, queries, scores = self.stage2(tokens, queries, image)
            outputs["s2"] = self._stage_output("s2", self.layout_s2, tokens, queries, scores, self.heads_s2)
            tokens, queries = expand_tokens(tokens, queries, self.layout_s2, self.layout_s3, self.embeddings)
            tokens, queries, scores = self.stage3(tokens, queries, image)
            outputs["s3"] = self._stage_output("s3", self.layout_s3, tokens, queries, scores, self.heads_s3)
        else:
            tokens, queries = expand_tokens(tokens, queries, self.layout_s1, self.layout_wb, self.embeddings)
            tokens, queries, scores = self.stage_wb(tokens, queries, image)
            outputs["wb"] = self._stage_output("wb", self.layout_wb, tokens, queries, scores, self.heads_wb)
        return outputs

    def _stage_output_s1(self, tokens, queries, scores):
        boxes = {"body": queries[:, :, 0]}
        params = None
        if self.plan["s1"] != "none":
            params = self.heads_s1({"body": tokens[:, :, 0]})
        return StageOutput("s1", scores, boxes, {}, params)


def _gather_candidates(t, order):
    idx = order.reshape(*order.shape, 1, 1).expand(-1, -1, *t.shape[2:])
    return torch.gather(t, 1, idx)
