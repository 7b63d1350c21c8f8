"""Bipartite matching and the stage-weighted loss suite.

Per stage, candidates are matched to ground-truth persons by a Hungarian
assignment over classification/L1/GIoU costs on the stage's own body boxes.
Matched candidates receive box, 2D-joint, and (per the supervision scheme)
parameter/keypoint losses; unmatched candidates contribute classification
only. Reductions are mean-over-instances and mean-over-elements; the total
is a transparent weighted sum of the reported per-term scalars.
"""

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from . import skeleton as sk
from .body_model import project_batch
from .errors import DegenerateBoxError

DTYPE = torch.float64

DEFAULT_WEIGHTS = {
    "cls": 2.0,
    "box_l1": 5.0,
    "giou": 2.0,
    "j2d_l1": 10.0,
    "oks_body": 4.0,
    "oks_face": 0.5,
    "oks_hand": 0.5,
    "param_pose": 1.0,
    "param_shape": 0.01,
    "param_expr": 0.01,
    "kp3d_body": 1.0,
    "kp3d_part": 0.5,
    "kp2d_body": 1.0,
    "kp2d_part": 0.5,
}

DEFAULT_MATCH_WEIGHTS = {"cls": 2.0, "l1": 5.0, "giou": 2.0}


def box_cxcywh_to_xyxy(box):
    cx, cy, w, h = box.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], dim=-1)


def giou(box_a, box_b):
    """Generalized IoU of paired (..., 4) cxcywh boxes; range (-1, 1]."""
    box_a = torch.as_tensor(box_a, dtype=DTYPE)
    box_b = torch.as_tensor(box_b, dtype=DTYPE)
    if (box_a[..., 2:] <= 0).any() or (box_b[..., 2:] <= 0).any():
        raise DegenerateBoxError("boxes must have positive width and height")
    a = box_cxcywh_to_xyxy(box_a)
    b = box_cxcywh_to_xyxy(box_b)
    area_a = box_a[..., 2] * box_a[..., 3]
    area_b = box_b[..., 2] * box_b[..., 3]
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    iou = inter / union
    hull_lt = torch.minimum(a[..., :2], b[..., :2])
    hull_rb = torch.maximum(a[..., 2:], b[..., 2:])
    hull = (hull_rb - hull_lt).prod(-1)
    return iou - (hull - union) / hull


def giou_matrix(boxes_a, boxes_b):
    """(N, 4) x (M, 4) -> (N, M) pairwise GIoU."""
    return giou(boxes_a[:, None, :].expand(-1, boxes_b.shape[0], -1), boxes_b[None])


def focal_loss(logits, labels, alpha=0.25, gamma=2.0, num_pos=None):
    """Binary focal loss, summed then normalized by the positive count.

    ``labels`` are {0, 1}. With gamma=0 and alpha=0.5 this reduces to
    0.5 x binary cross-entropy under the same normalization.
    """
    logits = torch.as_tensor(logits, dtype=DTYPE)
    labels = torch.as_tensor(labels, dtype=DTYPE)
    p = torch.sigmoid(logits)
    ce = torch.nn.functional.binary_cross_entropy_with_logits(logits, labels, reduction="none")
    p_t = p * labels + (1 - p) * (1 - labels)
    alpha_t = alpha * labels + (1 - alpha) * (1 - labels)
    loss = alpha_t * (1 - p_t) ** gamma * ce
    if num_pos is None:
        num_pos = labels.sum().item()
    return loss.sum() / max(float(num_pos), 1.0)


def oks_loss(pred_joints, gt_joints, visibility, area, k=0.1):
    """1 - mean object-keypoint-similarity over visible joints.

    ``area`` is the instance box area in the same (normalized) units as the
    joint coordinates. Returns 0 when nothing is visible.
    """
    pred_joints = torch.as_tensor(pred_joints, dtype=DTYPE)
    gt_joints = torch.as_tensor(gt_joints, dtype=DTYPE)
    vis = torch.as_tensor(visibility, dtype=torch.bool)
    if not vis.any():
        return torch.zeros((), dtype=DTYPE)
    if not area > 0:
        raise DegenerateBoxError("oks area must be positive")
    d2 = ((pred_joints - gt_joints) ** 2).sum(-1)
    sim = torch.exp(-d2 / (2.0 * area * k * k))
    return 1.0 - sim[vis].mean()


def hungarian_match(scores, boxes, gt_boxes, weights=None):
    """Optimal candidate->person assignment.

    cost = w_cls * (-sigmoid(score)) + w_l1 * |box - gt|_1 + w_giou * (1 - GIoU)

    Returns (candidate_indices, gt_indices) as int64 arrays; empty when
    there is no ground truth.
    """
    weights = DEFAULT_MATCH_WEIGHTS if weights is None else weights
    n_gt = len(gt_boxes)
    if n_gt == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    scores = torch.as_tensor(scores, dtype=DTYPE)
    boxes = torch.as_tensor(boxes, dtype=DTYPE)
    gt_boxes = torch.as_tensor(gt_boxes, dtype=DTYPE)
    with torch.no_grad():
        cost_cls = -torch.sigmoid(scores)[:, None]
        cost_l1 = torch.cdist(boxes, gt_boxes, p=1)
        cost_giou = 1.0 - giou_matrix(boxes, gt_boxes)
        cost = (
            weights["cls"] * cost_cls
            + weights["l1"] * cost_l1
            + weights["giou"] * cost_giou
        )
    rows, cols = linear_sum_assignment(cost.numpy())
    return rows.astype(np.int64), cols.astype(np.int64)


# -- SMPL-X losses -----------------------------------------------------------


def smplx_components(pred, gt, model, focal, principal_point, image_size, parts):
    """Parameter / 3D-keypoint / 2D-keypoint losses for matched pairs.

    Args:
        pred: dict of stacked predictions over P matched pairs (pose_body
            (P, 22, 3), betas, cam, optionally hand/jaw/expr tensors).
        gt: dict with pose (P, 53, 3), betas, expr, kp3d (P, K, 3),
            kp2d_norm (P, K, 2), vis (P, K).
        parts: keypoint parts to supervise ("body" only at body stages).

    Returns:
        dict of scalar tensors: param_pose/param_shape[/param_expr],
        kp3d_<part>, kp2d_<part>, plus "kp2d_skipped" count for degenerate
        cameras.
    """
    out = {}
    full = "pose_lhand" in pred

    pose_pred = [pred["pose_body"].reshape(-1, 66)]
    pose_gt = [gt["pose"][:, :22].reshape(-1, 66)]
    if full:
        pose_pred += [
            pred["pose_lhand"].reshape(-1, 45),
            pred["pose_rhand"].reshape(-1, 45),
            pred["pose_jaw"].reshape(-1, 3),
        ]
        pose_gt += [
            gt["pose"][:, 22:37].reshape(-1, 45),
            gt["pose"][:, 37:52].reshape(-1, 45),
            gt["pose"][:, 52:53].reshape(-1, 3),
        ]
    out["param_pose"] = (torch.cat(pose_pred, 1) - torch.cat(pose_gt, 1)).abs().mean()
    out["param_shape"] = (pred["betas"] - gt["betas"]).abs().mean()
    if full:
        out["param_expr"] = (pred["expr"] - gt["expr"]).abs().mean()

    # regress keypoints from the predicted parameters
    p = pred["pose_body"].shape[0]
    zeros = torch.zeros((p, 15, 3), dtype=DTYPE)
    pose_full = torch.cat(
        [
            pred["pose_body"],
            pred.get("pose_lhand", zeros),
            pred.get("pose_rhand", zeros),
            pred.get("pose_jaw", zeros[:, :1]),
        ],
        dim=1,
    )
    expr = pred.get("expr", torch.zeros((p, sk.NUM_EXPR_COEFFS), dtype=DTYPE))
    _, joints = model.forward(pose_full, pred["betas"], expr)
    kp_pred = model.keypoints(joints)  # (P, K, 3)

    kp_pred_c = kp_pred - kp_pred[:, :1]
    kp_gt_c = gt["kp3d"] - gt["kp3d"][:, :1]
    for part in parts:
        sl = sk.KEYPOINT_SLICES[part]
        out[f"kp3d_{part}"] = (kp_pred_c[:, sl] - kp_gt_c[:, sl]).abs().mean()

    wh = torch.tensor(image_size, dtype=DTYPE)
    kp2d_px, valid = project_batch(kp_pred, pred["cam"], focal, principal_point)
    kp2d_norm = kp2d_px / wh
    out["kp2d_skipped"] = int((~valid).sum().item())
    for part in parts:
        sl = sk.KEYPOINT_SLICES[part]
        mask = gt["vis"][:, sl] & valid[:, None]
        if mask.any():
            diff = (kp2d_norm[:, sl] - gt["kp2d_norm"][:, sl]).abs().sum(-1)
            out[f"kp2d_{part}"] = diff[mask].mean() / 2.0  # mean over x/y too
    return out


def smplx_loss(pred_params, pred_cam, gt_person, model, focal, principal_point, image_size):
    """Single matched-pair loss components (full parameter set)."""
    pred = {k: v[None] if v.dim() in (1, 2) else v for k, v in pred_params.items()}
    pred = {k: torch.as_tensor(v, dtype=DTYPE) for k, v in pred.items()}
    pred["cam"] = torch.as_tensor(pred_cam, dtype=DTYPE).reshape(1, 3)
    gt = {
        "pose": torch.as_tensor(gt_person.params.full_pose(), dtype=DTYPE)[None],
        "betas": torch.as_tensor(gt_person.params.beta, dtype=DTYPE)[None],
        "expr": torch.as_tensor(gt_person.params.psi, dtype=DTYPE)[None],
        "kp3d": torch.as_tensor(gt_person.keypoints3d, dtype=DTYPE)[None],
        "kp2d_norm": torch.as_tensor(
            gt_person.keypoints2d / np.asarray(image_size), dtype=DTYPE
        )[None],
        "vis": torch.as_tensor(gt_person.visibility, dtype=torch.bool)[None],
    }
    comps = smplx_components(
        pred, gt, model, focal, principal_point, image_size, parts=sk.PART_NAMES
    )
    n_pose = 159
    param = (comps["param_pose"] * n_pose + comps["param_shape"] * 10 + comps["param_expr"] * 10) / 179
    return {
        "param": param,
        "kp3d": sum(comps[f"kp3d_{p}"] for p in sk.PART_NAMES) / 4.0,
        "kp2d": sum(comps.get(f"kp2d_{p}", torch.zeros((), dtype=DTYPE)) for p in sk.PART_NAMES) / 4.0,
        "components": comps,
    }


# -- total loss ---------------------------------------------------------------


@dataclass
class LossReport:
    """Per-stage, per-term scalars plus the weighted total."""

    stages: dict = field(default_factory=dict)  # stage -> {term: float}
    weights: dict = field(default_factory=dict)  # term -> weight
    total: float = 0.0
    kp2d_skipped: int = 0

    def weighted_sum(self):
        return sum(
            self.weights[_term_weight_name(term)] * value
            for terms in self.stages.values()
            for term, value in terms.items()
        )

    def flat(self):
        out = {f"{stage}.{term}": value for stage, terms in self.stages.items() for term, value in terms.items()}
        out["total"] = self.total
        return out


def _term_weight_name(term):
    """Map a report term like "box_l1_lhand" to its weight-table key."""
    if term.startswith("box_l1"):
        return "box_l1"
    if term.startswith("giou"):
        return "giou"
    if term.startswith("j2d_l1"):
        return "j2d_l1"
    if term.startswith("oks"):
        part = term.split("_", 1)[1]
        return "oks_hand" if part in ("lhand", "rhand") else f"oks_{part}"
    if term.startswith("kp3d") or term.startswith("kp2d"):
        prefix, part = term.split("_", 1)
        return f"{prefix}_body" if part == "body" else f"{prefix}_part"
    return term


def targets_from_scene(scene):
    """Ground-truth tensors for one scene, in loss-ready form."""
    h, w = scene.image.shape[:2]
    persons = scene.persons
    size = np.array([w, h], dtype=np.float64)
    return {
        "boxes": torch.as_tensor(np.stack([p.boxes for p in persons]), dtype=DTYPE),
        "box_valid": torch.as_tensor(np.stack([p.box_valid for p in persons])),
        "kp2d_norm": torch.as_tensor(
            np.stack([p.keypoints2d / size for p in persons]), dtype=DTYPE
        ),
        "vis": torch.as_tensor(np.stack([p.visibility for p in persons])),
        "kp3d": torch.as_tensor(np.stack([p.keypoints3d for p in persons]), dtype=DTYPE),
        "pose": torch.as_tensor(
            np.stack([p.params.full_pose().numpy() for p in persons]), dtype=DTYPE
        ),
        "betas": torch.as_tensor(np.stack([p.params.beta.numpy() for p in persons]), dtype=DTYPE),
        "expr": torch.as_tensor(np.stack([p.params.psi.numpy() for p in persons]), dtype=DTYPE),
        "focal": scene.camera.focal,
        "principal_point": scene.camera.principal_point,
        "image_size": (w, h),
    }


def total_loss(stage_outputs, targets, model, plan, weights=None, match_weights=None, oks_k=0.1):
    """Weighted multi-stage loss.

    Args:
        stage_outputs: dict stage -> StageOutput (batched).
        targets: list of per-scene target dicts (``targets_from_scene``).
        model: BodyModel for keypoint regression.
        plan: stage -> "none" | "body" | "full" parameter supervision.

    Returns:
        (total tensor, LossReport).
    """
    weights = dict(DEFAULT_WEIGHTS if weights is None else weights)
    report = LossReport(weights=weights)
    total = torch.zeros((), dtype=DTYPE)

    for stage_key, out in stage_outputs.items():
        terms = _stage_terms(
            out, targets, model, plan.get(stage_key, "none"),
            match_weights=match_weights, oks_k=oks_k,
        )
        report.kp2d_skipped += terms.pop("kp2d_skipped", 0)
        report.stages[stage_key] = {}
        for term, value in terms.items():
            w = weights[_term_weight_name(term)]
            total = total + w * value
            report.stages[stage_key][term] = float(value.detach())
    report.total = float(total.detach())
    return total, report


def _stage_terms(out, targets, model, param_plan, match_weights, oks_k):
    batch = len(targets)
    n_cand = out.num_candidates
    labels = torch.zeros((batch, n_cand), dtype=DTYPE)

    # loss arithmetic runs in float64; stage outputs are small, so upcasting
    # here is cheap even when the network itself trains in float32
    scores = out.scores.double()
    boxes = {k: v.double() for k, v in out.boxes.items()}
    joints2d = {k: v.double() for k, v in out.joints2d.items()}

    matched = []  # (scene index, candidate rows, gt rows)
    for b, tgt in enumerate(targets):
        rows, cols = hungarian_match(
            scores[b].detach(), boxes["body"][b].detach(),
            tgt["boxes"][:, 0], match_weights,
        )
        labels[b, rows] = 1.0
        matched.append((b, rows, cols))

    terms = {"cls": focal_loss(scores, labels)}

    # box terms per part present at this stage
    for part_i, part in enumerate(sk.PART_NAMES):
        if part not in boxes:
            continue
        preds, gts = [], []
        for b, rows, cols in matched:
            valid = targets[b]["box_valid"][cols, part_i].numpy().astype(bool)
            preds.append(boxes[part][b][rows[valid]])
            gts.append(targets[b]["boxes"][cols[valid], part_i])
        preds = torch.cat(preds) if preds else torch.zeros(0, 4, dtype=DTYPE)
        if len(preds):
            gts = torch.cat(gts)
            terms[f"box_l1_{part}"] = (preds - gts).abs().mean()
            terms[f"giou_{part}"] = (1.0 - giou(preds, gts)).mean()

    # 2D joint terms
    for part, joints in joints2d.items():
        sl = sk.KEYPOINT_SLICES[part]
        part_i = sk.PART_NAMES.index(part)
        l1_vals, oks_vals = [], []
        for b, rows, cols in matched:
            tgt = targets[b]
            for r, c in zip(rows, cols):
                vis = tgt["vis"][c, sl]
                if not vis.any():
                    continue
                pred = joints[b, r]
                gt = tgt["kp2d_norm"][c, sl]
                l1_vals.append((pred[vis] - gt[vis]).abs().mean())
                if tgt["box_valid"][c, part_i]:
                    area = float(tgt["boxes"][c, part_i, 2] * tgt["boxes"][c, part_i, 3])
                    oks_vals.append(oks_loss(pred, gt, vis, area, k=oks_k))
        if l1_vals:
            terms[f"j2d_l1_{part}"] = torch.stack(l1_vals).mean()
        if oks_vals:
            terms[f"oks_{part}"] = torch.stack(oks_vals).mean()

    # SMPL-X terms
    if param_plan != "none" and out.params is not None:
        pred, gt = _gather_param_pairs(out, targets, matched)
        if pred is not None:
            parts = ("body",) if param_plan == "body" else sk.PART_NAMES
            tgt0 = targets[0]
            comps = smplx_components(
                pred, gt, model, tgt0["focal"], tgt0["principal_point"],
                tgt0["image_size"], parts,
            )
            terms["kp2d_skipped"] = comps.pop("kp2d_skipped")
            terms.update(comps)
    return terms


def _gather_param_pairs(out, targets, matched):
    pred = {k: [] for k in out.params}
    gt = {k: [] for k in ("pose", "betas", "expr", "kp3d", "kp2d_norm", "vis")}
    for b, rows, cols in matched:
        if len(rows) == 0:
            continue
        for k in pred:
            pred[k].append(out.params[k][b, rows].double())
        tgt = targets[b]
        for k in gt:
            gt[k].append(tgt[k][cols])
    if not any(len(v) for v in pred.values()):
        return None, None
    return (
        {k: torch.cat(v) for k, v in pred.items()},
        {k: torch.cat(v) for k, v in gt.items()},
    )
