"""Command implementations behind the CLI: data generation, training,
evaluation, and overlay rendering. Every command is deterministic given
(config, seed, inputs); scenes are processed serially in index order.
"""

import json
from pathlib import Path

import numpy as np
import torch

from . import skeleton as sk
from .body_model import BodyModel, CameraModel, ParamSet, project
from .checkpoint import load_checkpoint, restore_model, restore_optimizer, save_checkpoint
from .config import RunConfig, loss_weights, match_weights, scene_config
from .dataset import read_dataset, read_scene, write_dataset
from .errors import AiosError, ConfigError
from .losses import targets_from_scene, total_loss
from .metrics import EvalAccumulator, PredictedPerson, compute_errors, instance_match
from .model import build_model, images_to_tensor
from .scene import generate_scene, horizontal_flip
from .template import build_template


def body_model_from_config(cfg):
    return build_template(
        n_vertices=cfg["template.n_v"],
        seed=cfg["template.seed"],
        with_pose_blendshapes=cfg["template.pose_blendshapes"],
    )


def cmd_datagen(cfg, out_dir):
    """Generate cfg[data.num_scenes] scenes plus manifest and model container."""
    model = body_model_from_config(cfg)
    scfg = scene_config(cfg)
    base = cfg["data.seed"]
    scenes = [generate_scene(scfg, base + i, model) for i in range(cfg["data.num_scenes"])]
    manifest = write_dataset(out_dir, scenes, cfg.as_dict(), model=model)
    cfg.echo(out_dir)
    return manifest


def _load_training_inputs(cfg, dataset_dir):
    scenes, manifest = read_dataset(dataset_dir)
    # the dataset defines its own scene/template settings
    data_cfg = RunConfig(manifest.get("config", {}))
    merged = RunConfig(cfg.as_dict())
    merged.update({k: v for k, v in data_cfg.as_dict().items()
                   if k.startswith(("scene.", "template.", "data."))})
    model_path = Path(dataset_dir) / "model.bin"
    if model_path.exists():
        body = BodyModel.load(model_path)
    else:
        body = body_model_from_config(merged)
    return scenes, merged, body


def cmd_train(cfg, dataset_dir, out_dir, resume=None, progress=None):
    """Optimize the detector on a dataset; writes checkpoint + loss log.

    Aborts with a diagnostic dump when any loss term goes non-finite.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes, cfg, body = _load_training_inputs(cfg, dataset_dir)
    cfg.echo(out)

    seed = cfg["model.seed"] if cfg["model.seed"] else cfg["train.seed"]
    model = build_model(cfg, seed=seed)
    dtype = {"float32": torch.float32, "float64": torch.float64}.get(cfg["train.dtype"])
    if dtype is None:
        raise ConfigError(f"train.dtype must be float32 or float64, got {cfg['train.dtype']!r}")
    model.to(dtype)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg["train.lr"])
    start_iter = 0
    if resume is not None:
        tensors, start_iter, _ = load_checkpoint(resume)
        restore_model(model, tensors)
        restore_optimizer(optimizer, model, tensors)

    weights = loss_weights(cfg)
    mweights = match_weights(cfg)
    plan = model.decoder.plan
    batch = cfg["train.batch"]
    iters = cfg["train.iters"]
    drop_at = int(cfg["train.lr_drop_frac"] * iters)
    flip_prob = cfg["train.flip_prob"]
    flip_rng = np.random.default_rng(np.random.PCG64(cfg["train.seed"] + 1))

    targets_cache = [targets_from_scene(s) for s in scenes]
    log_lines = []
    log_path = out / "loss_log.txt"

    model.train()
    for it in range(start_iter, iters):
        lr = cfg["train.lr"] * (cfg["train.lr_drop_factor"] if it >= drop_at else 1.0)
        for group in optimizer.param_groups:
            group["lr"] = lr
        idx = [(it * batch + j) % len(scenes) for j in range(batch)]
        batch_scenes = [scenes[i] for i in idx]
        batch_targets = [targets_cache[i] for i in idx]
        if flip_prob > 0.0:
            flip = flip_rng.uniform(size=len(idx)) < flip_prob
            batch_scenes = [
                horizontal_flip(s) if f else s for s, f in zip(batch_scenes, flip)
            ]
            batch_targets = [
                targets_from_scene(s) if f else t
                for s, t, f in zip(batch_scenes, batch_targets, flip)
            ]

        outputs = model(images_to_tensor(batch_scenes, dtype=dtype))
        loss, report = total_loss(
            outputs, batch_targets, body, plan, weights=weights,
            match_weights=mweights, oks_k=cfg["loss.oks_k"],
        )
        bad = [k for k, v in report.flat().items() if not np.isfinite(v)]
        if bad:
            dump = out / "nan_dump.txt"
            dump.write_text(
                f"iteration {it}\nnon-finite terms: {bad}\n"
                + json.dumps(report.flat(), indent=2, default=float)
            )
            raise AiosError(f"non-finite loss at iteration {it}: {bad} (dump: {dump})")

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if it % cfg["train.log_every"] == 0 or it == iters - 1:
            flat = " ".join(f"{k}={v:.6f}" for k, v in sorted(report.flat().items()))
            log_lines.append(f"iter={it} lr={lr:.2e} {flat}")
            if progress:
                progress(it, report)

    log_path.write_text("\n".join(log_lines) + "\n")
    ckpt_path = out / "checkpoint.bin"
    save_checkpoint(ckpt_path, model, cfg.as_dict(), iteration=iters, optimizer=optimizer)
    return ckpt_path, log_path


def load_model_for_eval(checkpoint_path):
    tensors, _, cfg_echo = load_checkpoint(checkpoint_path)
    cfg = RunConfig(cfg_echo)
    model = build_model(cfg)
    restore_model(model, tensors)
    model.eval()
    body = body_model_from_config(cfg)
    return model, body, cfg


def predict_scene(model, body, scene, threshold):
    """Run inference on one scene; returns detections above threshold."""
    with torch.no_grad():
        outputs = model(images_to_tensor([scene]))
    final = outputs[model.final_stage]
    h, w = scene.image.shape[:2]
    scores = torch.sigmoid(final.scores[0]).numpy()
    keep = np.flatnonzero(scores >= threshold)
    preds = []
    for i in keep:
        params = final.params
        pset = ParamSet(
            theta_body=params["pose_body"][0, i],
            theta_lhand=params["pose_lhand"][0, i],
            theta_rhand=params["pose_rhand"][0, i],
            theta_jaw=params["pose_jaw"][0, i],
            beta=params["betas"][0, i],
            psi=params["expr"][0, i],
        )
        if "body" in final.joints2d:
            j2d = final.joints2d["body"][0, i].numpy() * np.array([w, h])
        else:  # naive variant: project the predicted mesh keypoints instead
            cam = CameraModel(
                scene.camera.focal, scene.camera.principal_point, params["cam"][0, i]
            )
            with torch.no_grad():
                _, joints = body.forward_params(pset)
            kp = body.keypoints(joints)
            j2d = project(kp[sk.KEYPOINT_SLICES["body"]], cam).numpy()
        preds.append(
            PredictedPerson(
                score=float(scores[i]),
                joints2d=j2d,
                params=pset,
                translation=params["cam"][0, i].numpy(),
                candidate_index=int(i),
            )
        )
    return preds, final


def evaluate_dataset(model, body, scenes, threshold, match_threshold=0.05):
    """Inference + instance matching + error accumulation over scenes."""
    acc = EvalAccumulator()
    for scene in scenes:
        preds, _ = predict_scene(model, body, scene, threshold)
        w = scene.image.shape[1]
        pairs, n_fp, n_fn = instance_match(preds, scene.persons, match_threshold, w)
        pred_params = [preds[i].params for i, _, _ in pairs]
        gt_params = [scene.persons[j].params for _, j, _ in pairs]
        sums, n = compute_errors(pred_params, gt_params, body)
        acc.add_scene(pairs, n_fp, n_fn, sums, n)
    return acc


def cmd_eval(checkpoint_path, dataset_dir, threshold, out_dir, match_threshold=None):
    model, body, cfg = load_model_for_eval(checkpoint_path)
    scenes, _ = read_dataset(dataset_dir)
    if match_threshold is None:
        match_threshold = cfg["eval.match_threshold"]
    acc = evaluate_dataset(model, body, scenes, threshold, match_threshold)
    report = acc.report()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.to_text())
    (out / "report.json").write_text(report.to_json())
    cfg.echo(out)
    return report, acc


def cmd_render(checkpoint_path, scene_path, out_image, threshold=0.5):
    from .render import render_overlay

    model, body, cfg = load_model_for_eval(checkpoint_path)
    scene = read_scene(scene_path)
    scene.config = scene_config(cfg)
    preds, final = predict_scene(model, body, scene, threshold)
    render_overlay(scene, preds, final, body, out_image)
    return out_image


def cmd_check(verbose=True):
    from .checks import run_checks

    results = run_checks()
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.name:<{width}}  {status}  {r.detail}")
    table = "\n".join(lines)
    if verbose:
        print(table)
    ok = all(r.passed for r in results)
    if verbose:
        print(f"\n{sum(r.passed for r in results)}/{len(results)} checks passed")
    return ok, results
