"""Evaluation: detection matching, per-part reconstruction errors, and
F1-normalized aggregates.

Instance matching is greedy on mean visible body-keypoint 2D distance
(in image-width fractions); matched pairs feed vertex/joint errors with and
without Procrustes alignment, reported in millimeters.
"""

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from . import skeleton as sk
from .errors import AlignmentError

PARTS = ("all", "body", "face", "lhand", "rhand")


def procrustes_align(points, target):
    """Similarity transform (s, R, t) minimizing ||s R p + t - q||^2.

    Args:
        points, target: (K, 3) arrays, K >= 3; target must span at least a
        plane (rank >= 2), else AlignmentError.
    """
    p = np.asarray(points, dtype=np.float64)
    q = np.asarray(target, dtype=np.float64)
    if p.shape != q.shape or p.shape[0] < 3 or p.shape[1] != 3:
        raise AlignmentError(f"need matching (K>=3, 3) point sets, got {p.shape} vs {q.shape}")
    mu_p = p.mean(axis=0)
    mu_q = q.mean(axis=0)
    x = p - mu_p
    y = q - mu_q
    var_p = (x**2).sum() / len(p)
    if var_p < 1e-18:
        raise AlignmentError("source points are coincident")
    cov = y.T @ x / len(p)
    u, d, vt = np.linalg.svd(cov)
    if d[1] < 1e-12 * max(d[0], 1e-300):
        raise AlignmentError("rank-degenerate configuration")
    sign = np.sign(np.linalg.det(u @ vt))
    s_diag = np.ones(3)
    s_diag[2] = sign
    rot = u @ np.diag(s_diag) @ vt
    scale = (d * s_diag).sum() / var_p
    trans = mu_q - scale * rot @ mu_p
    return scale, rot, trans


def apply_similarity(scale, rot, trans, points):
    return scale * points @ rot.T + trans


@dataclass
class PredictedPerson:
    """One detection: score plus everything needed for evaluation."""

    score: float
    joints2d: np.ndarray  # (17, 2) body keypoints, pixels
    params: object = None  # ParamSet
    translation: np.ndarray = None
    candidate_index: int = -1


def instance_match(pred_persons, gt_persons, threshold, image_width):
    """Greedy detection matching on mean visible body-keypoint distance.

    A pair is a true positive iff its mean distance (as a fraction of image
    width) is below ``threshold``. Returns (pairs, n_fp, n_fn) where pairs
    are (pred_index, gt_index, distance).
    """
    body_sl = sk.KEYPOINT_SLICES["body"]
    cands = []
    for i, pred in enumerate(pred_persons):
        pj = np.asarray(pred.joints2d, dtype=np.float64)
        for j, gt in enumerate(gt_persons):
            vis = gt.visibility[body_sl]
            if not vis.any():
                continue
            gj = gt.keypoints2d[body_sl]
            d = np.linalg.norm(pj[vis] - gj[vis], axis=1).mean() / image_width
            if d < threshold:
                cands.append((d, i, j))
    cands.sort(key=lambda t: (t[0], t[1], t[2]))
    used_pred, used_gt, pairs = set(), set(), []
    for d, i, j in cands:
        if i in used_pred or j in used_gt:
            continue
        used_pred.add(i)
        used_gt.add(j)
        pairs.append((i, j, d))
    n_fp = len(pred_persons) - len(pairs)
    n_fn = len(gt_persons) - len(pairs)
    return pairs, n_fp, n_fn


def _part_error(diff_norm, masks):
    return {part: float(diff_norm[mask].mean()) if mask.any() else 0.0 for part, mask in masks.items()}


def pair_errors(pv, gv, pk, gk, p_pelvis, g_pelvis, vmasks, kmasks, pelvis_align=True):
    """Errors for one matched pair from raw vertex/keypoint arrays (meters)."""
    pvi, gvi, pki, gki = pv, gv, pk, gk
    if pelvis_align:
        pvi, pki = pv - p_pelvis, pk - p_pelvis
        gvi, gki = gv - g_pelvis, gk - g_pelvis
    ve = np.linalg.norm(pvi - gvi, axis=1)
    ke = np.linalg.norm(pki - gki, axis=1)
    s, r, t = procrustes_align(pv, gv)
    pa_ve = np.linalg.norm(apply_similarity(s, r, t, pv) - gv, axis=1)
    s, r, t = procrustes_align(pk, gk)
    pa_ke = np.linalg.norm(apply_similarity(s, r, t, pk) - gk, axis=1)
    return {
        "mve": _part_error(ve, vmasks),
        "mpjpe": _part_error(ke, kmasks),
        "pa_pve": _part_error(pa_ve, vmasks),
        "pa_mpjpe": _part_error(pa_ke, kmasks),
    }


def model_masks(model):
    vmasks = {p: model.part_vertex_masks[p].numpy() for p in sk.PART_NAMES}
    vmasks["all"] = np.ones(model.n_vertices, dtype=bool)
    kmasks = {"all": np.ones(sk.NUM_KEYPOINTS, dtype=bool)}
    for p, sl in sk.KEYPOINT_SLICES.items():
        m = np.zeros(sk.NUM_KEYPOINTS, dtype=bool)
        m[sl] = True
        kmasks[p] = m
    return vmasks, kmasks


def compute_errors(pred_params_list, gt_params_list, model, pelvis_align=True):
    """Per-part vertex/keypoint errors for matched pairs, in millimeters.

    MVE/MPJPE are pelvis-aligned (configurable); PA variants align the full
    vertex (resp. keypoint) set with a similarity transform before reading
    off part errors.
    """
    sums = {m: {p: 0.0 for p in PARTS} for m in ("mve", "mpjpe", "pa_pve", "pa_mpjpe")}
    n = len(pred_params_list)
    if n == 0:
        return sums, 0

    def stack(params_list):
        pose = torch.stack([p.full_pose() for p in params_list])
        beta = torch.stack([p.beta for p in params_list])
        psi = torch.stack([p.psi for p in params_list])
        return pose, beta, psi

    with torch.no_grad():
        pv, pj = model.forward(*stack(pred_params_list))
        gv, gj = model.forward(*stack(gt_params_list))
    pv, gv = pv.numpy(), gv.numpy()
    pk = model.keypoints(pj).numpy()
    gk = model.keypoints(gj).numpy()
    pj0 = pj[:, :1].numpy()
    gj0 = gj[:, :1].numpy()
    vmasks, kmasks = model_masks(model)

    for i in range(n):
        per_metric = pair_errors(
            pv[i], gv[i], pk[i], gk[i], pj0[i], gj0[i], vmasks, kmasks, pelvis_align
        )
        for m, errs in per_metric.items():
            for part in PARTS:
                sums[m][part] += errs[part]
    return sums, n


@dataclass
class MetricReport:
    f_score: float
    precision: float
    recall: float
    mve: dict
    mpjpe: dict
    pa_pve: dict
    pa_mpjpe: dict
    nmve: float
    nmje: float

    def flat(self):
        out = {"f_score": self.f_score, "precision": self.precision, "recall": self.recall}
        for name in ("mve", "mpjpe", "pa_pve", "pa_mpjpe"):
            for part, value in getattr(self, name).items():
                out[f"{name}_{part}"] = value
        out["nmve"] = self.nmve
        out["nmje"] = self.nmje
        return out

    def to_text(self):
        return "".join(f"{k} {v:.6g}\n" for k, v in self.flat().items())

    def to_json(self):
        return json.dumps(self.flat(), indent=2, sort_keys=True) + "\n"


def fscore(precision, recall):
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def aggregate(mve, mpjpe, precision, recall, pa_pve=None, pa_mpjpe=None):
    """Assemble a MetricReport; NMVE = MVE/F1, NMJE = MPJPE/F1 (mm).

    ``mve``/``mpjpe`` may be scalars (treated as the "all" part) or per-part
    dicts. F1 = 0 yields infinity for the normalized metrics.
    """
    def as_dict(x):
        if isinstance(x, dict):
            return {p: float(x.get(p, 0.0)) for p in PARTS}
        return {p: (float(x) if p == "all" else 0.0) for p in PARTS}

    mve = as_dict(mve)
    mpjpe = as_dict(mpjpe)
    f1 = fscore(precision, recall)
    nmve = mve["all"] / f1 if f1 > 0 else float("inf")
    nmje = mpjpe["all"] / f1 if f1 > 0 else float("inf")
    return MetricReport(
        f_score=f1,
        precision=precision,
        recall=recall,
        mve=mve,
        mpjpe=mpjpe,
        pa_pve=as_dict(pa_pve or {}),
        pa_mpjpe=as_dict(pa_mpjpe or {}),
        nmve=nmve,
        nmje=nmje,
    )


@dataclass
class EvalAccumulator:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    error_sums: dict = field(
        default_factory=lambda: {m: {p: 0.0 for p in PARTS} for m in ("mve", "mpjpe", "pa_pve", "pa_mpjpe")}
    )
    n_pairs: int = 0
    dist_sum: float = 0.0

    def add_scene(self, pairs, n_fp, n_fn, sums, n):
        self.tp += len(pairs)
        self.fp += n_fp
        self.fn += n_fn
        self.dist_sum += sum(d for _, _, d in pairs)
        for m in self.error_sums:
            for p in PARTS:
                self.error_sums[m][p] += sums[m][p]
        self.n_pairs += n

    def report(self):
        precision = self.tp / (self.tp + self.fp) if (self.tp + self.fp) else 0.0
        recall = self.tp / (self.tp + self.fn) if (self.tp + self.fn) else 0.0
        scale = 1000.0 / self.n_pairs if self.n_pairs else 0.0  # meters -> mm, mean
        errs = {
            m: {p: self.error_sums[m][p] * scale for p in PARTS} for m in self.error_sums
        }
        return aggregate(
            errs["mve"], errs["mpjpe"], precision, recall,
            pa_pve=errs["pa_pve"], pa_mpjpe=errs["pa_mpjpe"],
        )

    @property
    def mean_joint2d_frac(self):
        return self.dist_sum / self.tp if self.tp else float("inf")
