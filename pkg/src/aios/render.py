"""Offline overlay rendering of predictions onto a scene image."""

import numpy as np
import torch
from PIL import Image, ImageDraw

from . import skeleton as sk
from .body_model import CameraModel, project

_SCALE = 4  # nearest-neighbor upscale for visibility
_PART_COLORS = {
    "body": (80, 220, 80),
    "lhand": (240, 90, 90),
    "rhand": (90, 120, 240),
    "face": (235, 220, 80),
}


def _draw_box(draw, box, size, color):
    w, h = size
    cx, cy, bw, bh = box
    x1, y1 = (cx - bw / 2) * w * _SCALE, (cy - bh / 2) * h * _SCALE
    x2, y2 = (cx + bw / 2) * w * _SCALE, (cy + bh / 2) * h * _SCALE
    draw.rectangle([x1, y1, x2, y2], outline=color)


def render_overlay(scene, preds, final, body, out_path):
    """Draw predicted boxes, 2D joints, and projected mesh keypoints.

    Output is a deterministic PNG: same checkpoint and scene give identical
    bytes.
    """
    h, w = scene.image.shape[:2]
    base = (np.clip(scene.image, 0.0, 1.0) * 255).astype(np.uint8)
    img = Image.fromarray(base).resize((w * _SCALE, h * _SCALE), Image.NEAREST)
    img = img.convert("RGB")
    draw = ImageDraw.Draw(img)

    for pred in preds:
        i = pred.candidate_index
        for part, color in _PART_COLORS.items():
            if part in final.boxes:
                _draw_box(draw, final.boxes[part][0, i].numpy(), (w, h), color)
            if part in final.joints2d:
                pts = final.joints2d[part][0, i].numpy() * np.array([w, h]) * _SCALE
                for x, y in pts:
                    draw.ellipse([x - 2, y - 2, x + 2, y + 2], fill=color)

    # projected mesh keypoints per detection
    for pred in preds:
        cam = CameraModel(scene.camera.focal, scene.camera.principal_point,
                          torch.as_tensor(pred.translation))
        with torch.no_grad():
            _, joints = body.forward_params(pred.params)
        kp = body.keypoints(joints)
        try:
            px = project(kp, cam).numpy() * _SCALE
        except Exception:
            continue
        for x, y in px:
            draw.line([x - 2, y, x + 2, y], fill=(255, 255, 255))
            draw.line([x, y - 2, x, y + 2], fill=(255, 255, 255))

    legend = [f"detections: {len(preds)}"] + [
        f"{part}" for part in _PART_COLORS
    ]
    y0 = 2
    for i, (text, color) in enumerate(
        zip(legend, [(255, 255, 255)] + list(_PART_COLORS.values()))
    ):
        draw.text((3, y0 + i * 10), text, fill=color)
    img.save(out_path, format="PNG")
    return out_path
