"""Reduced parametric whole-body model.

Maps pose/shape/expression parameters to mesh vertices and regressed 3D
joints through blendshapes and linear blend skinning, plus a per-person
pinhole projection. All tensors are float64; every operation is a pure,
differentiable function of its inputs.
"""

import struct
from dataclasses import dataclass

import numpy as np
import torch

from . import skeleton as sk
from .errors import CheckpointError, InvalidParameterError, ProjectionError

DTYPE = torch.float64

_BM_MAGIC = b"AIOSBM01"


def _to_tensor(x):
    return torch.as_tensor(x, dtype=DTYPE)


def _wrap_axis_angle(aa):
    """Rescale axis-angle rows so their norms fall in [0, 2*pi)."""
    aa = _to_tensor(aa).reshape(-1, 3).clone()
    norms = aa.norm(dim=-1)
    big = norms >= 2.0 * np.pi
    if big.any():
        wrapped = torch.remainder(norms[big], 2.0 * np.pi)
        aa[big] *= (wrapped / norms[big]).unsqueeze(-1)
    return aa


@dataclass
class ParamSet:
    """Per-person pose, shape, and expression parameters.

    Axis-angle blocks: body (22, 3), left hand (15, 3), right hand (15, 3),
    jaw (1, 3); shape and expression are 10 coefficients each.
    """

    theta_body: torch.Tensor
    theta_lhand: torch.Tensor
    theta_rhand: torch.Tensor
    theta_jaw: torch.Tensor
    beta: torch.Tensor
    psi: torch.Tensor

    def __post_init__(self):
        shapes = {
            "theta_body": (22, 3),
            "theta_lhand": (15, 3),
            "theta_rhand": (15, 3),
            "theta_jaw": (1, 3),
            "beta": (10,),
            "psi": (10,),
        }
        for name, shape in shapes.items():
            val = _to_tensor(getattr(self, name))
            if tuple(val.shape) != shape:
                raise InvalidParameterError(f"{name} must have shape {shape}, got {tuple(val.shape)}")
            if not torch.isfinite(val).all():
                raise InvalidParameterError(f"{name} contains non-finite entries")
            if name.startswith("theta"):
                val = _wrap_axis_angle(val).reshape(shape)
            setattr(self, name, val)

    @classmethod
    def zeros(cls):
        return cls(
            theta_body=torch.zeros(22, 3, dtype=DTYPE),
            theta_lhand=torch.zeros(15, 3, dtype=DTYPE),
            theta_rhand=torch.zeros(15, 3, dtype=DTYPE),
            theta_jaw=torch.zeros(1, 3, dtype=DTYPE),
            beta=torch.zeros(10, dtype=DTYPE),
            psi=torch.zeros(10, dtype=DTYPE),
        )

    @classmethod
    def from_pose(cls, pose, beta=None, psi=None):
        pose = _to_tensor(pose).reshape(sk.NUM_POSE_JOINTS, 3)
        return cls(
            theta_body=pose[:22],
            theta_lhand=pose[22:37],
            theta_rhand=pose[37:52],
            theta_jaw=pose[52:53],
            beta=torch.zeros(10, dtype=DTYPE) if beta is None else _to_tensor(beta),
            psi=torch.zeros(10, dtype=DTYPE) if psi is None else _to_tensor(psi),
        )

    def full_pose(self):
        """Concatenated (53, 3) axis-angle pose."""
        return torch.cat([self.theta_body, self.theta_lhand, self.theta_rhand, self.theta_jaw], dim=0)


@dataclass
class CameraModel:
    """Pinhole camera with shared intrinsics and a per-person translation."""

    focal: float
    principal_point: np.ndarray
    translation: torch.Tensor

    def __post_init__(self):
        if not self.focal > 0:
            raise InvalidParameterError("focal length must be positive")
        self.principal_point = np.asarray(self.principal_point, dtype=np.float64).reshape(2)
        self.translation = _to_tensor(self.translation).reshape(3)


def rodrigues(axis_angle):
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3).

    Uses the closed form for angles >= 1e-8 and second-order Taylor factors
    below that, which keeps the map differentiable through zero.
    """
    v = _to_tensor(axis_angle)
    if not torch.isfinite(v).all():
        raise InvalidParameterError("axis-angle input contains non-finite entries")
    batch = v.shape[:-1]
    theta2 = (v * v).sum(-1)
    small = theta2 < 1e-16
    # sanitize before sqrt/division so the unselected branch stays finite
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(theta2_safe)
    sin_factor = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    cos_factor = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2_safe)

    zeros = torch.zeros_like(theta2)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    K = torch.stack(
        [zeros, -z, y, z, zeros, -x, -y, x, zeros], dim=-1
    ).reshape(*batch, 3, 3)
    eye = torch.eye(3, dtype=DTYPE).expand(*batch, 3, 3)
    return eye + sin_factor[..., None, None] * K + cos_factor[..., None, None] * (K @ K)


def project(points3d, camera):
    """Pinhole projection of (..., K, 3) points to (..., K, 2) pixels.

    Points are shifted by the camera translation first. Raises if any
    shifted point sits at or behind the near plane (z <= 1e-4).
    """
    pts = _to_tensor(points3d) + camera.translation
    z = pts[..., 2:3]
    if not (z > 1e-4).all().item():
        raise ProjectionError("point at or behind the camera plane")
    pp = torch.as_tensor(camera.principal_point, dtype=DTYPE)
    return camera.focal * pts[..., :2] / z + pp


def project_batch(points3d, translations, focal, principal_point, eps=1e-4):
    """Projection used inside losses: (B, K, 3) + (B, 3) -> (B, K, 2), valid mask.

    Degenerate rows (any z <= eps) are flagged invalid instead of raising so
    training can skip them.
    """
    pts = points3d + translations[:, None, :]
    z = pts[..., 2:3]
    valid = (z.squeeze(-1) > eps).all(dim=-1)
    z_safe = z.clamp_min(eps)
    pp = torch.as_tensor(principal_point, dtype=points3d.dtype)
    return focal * pts[..., :2] / z_safe + pp, valid


class BodyModel:
    """Template mesh, blendshapes, kinematic tree, and regressors.

    ``joint_regressor`` has ``n_joints`` rows: the first 53 correspond to the
    articulated skeleton (and define the rest-pose joints used by skinning),
    the remainder are regressed landmarks.
    """

    def __init__(
        self,
        template_vertices,
        shape_blendshapes,
        expression_blendshapes,
        pose_blendshapes,
        kinematic_parents,
        joint_regressor,
        skinning_weights,
        part_vertex_masks,
    ):
        self.template_vertices = _to_tensor(template_vertices)
        self.shape_blendshapes = _to_tensor(shape_blendshapes)
        self.expression_blendshapes = _to_tensor(expression_blendshapes)
        self.pose_blendshapes = _to_tensor(pose_blendshapes)
        self.kinematic_parents = torch.as_tensor(kinematic_parents, dtype=torch.int64)
        self.joint_regressor = _to_tensor(joint_regressor)
        self.skinning_weights = _to_tensor(skinning_weights)
        self.part_vertex_masks = {
            part: torch.as_tensor(mask, dtype=torch.bool) for part, mask in part_vertex_masks.items()
        }
        self._has_pose_blend = bool((self.pose_blendshapes != 0).any())

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_joints(self):
        return self.joint_regressor.shape[0]

    def validate(self, atol=1e-6):
        nv, nj = self.n_vertices, self.n_joints
        if self.template_vertices.shape != (nv, 3):
            raise InvalidParameterError("template_vertices shape mismatch")
        if self.shape_blendshapes.shape != (nv, 3, sk.NUM_SHAPE_COEFFS):
            raise InvalidParameterError("shape_blendshapes shape mismatch")
        if self.expression_blendshapes.shape != (nv, 3, sk.NUM_EXPR_COEFFS):
            raise InvalidParameterError("expression_blendshapes shape mismatch")
        if self.pose_blendshapes.shape != (nv, 3, sk.NUM_POSE_BLEND):
            raise InvalidParameterError("pose_blendshapes shape mismatch")
        parents = self.kinematic_parents
        if parents.shape != (sk.NUM_POSE_JOINTS,) or parents[0] != -1:
            raise InvalidParameterError("kinematic_parents must be 53 entries rooted at joint 0")
        idx = torch.arange(1, sk.NUM_POSE_JOINTS)
        if not (parents[1:] >= 0).all() or not (parents[1:] < idx).all():
            raise InvalidParameterError("kinematic_parents must satisfy parent < child")
        if (self.joint_regressor < 0).any():
            raise InvalidParameterError("joint_regressor must be nonnegative")
        if not torch.allclose(
            self.joint_regressor.sum(dim=1), torch.ones(nj, dtype=DTYPE), atol=atol
        ):
            raise InvalidParameterError("joint_regressor rows must sum to 1")
        if (self.skinning_weights < 0).any():
            raise InvalidParameterError("skinning_weights must be nonnegative")
        if not torch.allclose(
            self.skinning_weights.sum(dim=1), torch.ones(nv, dtype=DTYPE), atol=atol
        ):
            raise InvalidParameterError("skinning_weights rows must sum to 1")
        return self

    def forward(self, pose, betas, expr):
        """Batched LBS forward pass.

        Args:
            pose: (B, 53, 3) axis-angle.
            betas: (B, 10) shape coefficients.
            expr: (B, 10) expression coefficients.

        Returns:
            vertices (B, n_vertices, 3) and joints3d (B, n_joints, 3), with
            joints3d regressed from the posed vertices.
        """
        pose = _to_tensor(pose)
        betas = _to_tensor(betas)
        expr = _to_tensor(expr)
        if pose.dim() == 2:
            pose, betas, expr = pose[None], betas[None], expr[None]
        if not (torch.isfinite(pose).all() and torch.isfinite(betas).all() and torch.isfinite(expr).all()):
            raise InvalidParameterError("non-finite parameters")
        B = pose.shape[0]

        v_shaped = (
            self.template_vertices
            + torch.einsum("vcs,bs->bvc", self.shape_blendshapes, betas)
            + torch.einsum("vcs,bs->bvc", self.expression_blendshapes, expr)
        )
        rots = rodrigues(pose)  # (B, 53, 3, 3)
        if self._has_pose_blend:
            eye = torch.eye(3, dtype=DTYPE)
            feat = (rots[:, 1:] - eye).reshape(B, -1)
            v_shaped = v_shaped + torch.einsum("vcp,bp->bvc", self.pose_blendshapes, feat)

        rest_joints = torch.einsum("jv,bvc->bjc", self.joint_regressor[: sk.NUM_POSE_JOINTS], v_shaped)

        g_rot = [rots[:, 0]]
        g_t = [rest_joints[:, 0]]
        parents = self.kinematic_parents.tolist()
        for k in range(1, sk.NUM_POSE_JOINTS):
            p = parents[k]
            offset = rest_joints[:, k] - rest_joints[:, p]
            g_rot.append(g_rot[p] @ rots[:, k])
            g_t.append(g_t[p] + (g_rot[p] @ offset.unsqueeze(-1)).squeeze(-1))
        g_rot = torch.stack(g_rot, dim=1)  # (B, 53, 3, 3)
        g_t = torch.stack(g_t, dim=1)  # (B, 53, 3)

        # shift so each transform rotates about its rest joint
        a_t = g_t - (g_rot @ rest_joints.unsqueeze(-1)).squeeze(-1)

        rot_v = torch.einsum("vk,bkij->bvij", self.skinning_weights, g_rot)
        t_v = torch.einsum("vk,bkc->bvc", self.skinning_weights, a_t)
        vertices = (rot_v @ v_shaped.unsqueeze(-1)).squeeze(-1) + t_v
        joints3d = torch.einsum("jv,bvc->bjc", self.joint_regressor, vertices)
        return vertices, joints3d

    def forward_params(self, params: ParamSet):
        """Single-person forward; returns (n_vertices, 3), (n_joints, 3)."""
        verts, joints = self.forward(
            params.full_pose()[None], params.beta[None], params.psi[None]
        )
        return verts[0], joints[0]

    def keypoints(self, joints3d):
        """Select the whole-body keypoint set from regressed joints."""
        idx = torch.as_tensor(sk.WHOLEBODY_KEYPOINTS)
        return joints3d[..., idx, :]

    # -- serialization ------------------------------------------------------

    def save(self, path):
        """Write the documented binary container (magic, dims, f64 arrays)."""
        arrays = self._field_arrays()
        with open(path, "wb") as f:
            f.write(_BM_MAGIC)
            f.write(struct.pack("<II", self.n_vertices, self.n_joints))
            for arr in arrays:
                f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def _field_arrays(self):
        return [
            self.template_vertices.numpy(),
            self.shape_blendshapes.numpy(),
            self.expression_blendshapes.numpy(),
            self.pose_blendshapes.numpy(),
            self.kinematic_parents.numpy().astype(np.float64),
            self.joint_regressor.numpy(),
            self.skinning_weights.numpy(),
            np.stack([self.part_vertex_masks[p].numpy().astype(np.float64) for p in sk.PART_NAMES]),
        ]

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            data = f.read()
        if data[:8] != _BM_MAGIC:
            raise CheckpointError(f"bad body-model magic in {path}")
        nv, nj = struct.unpack("<II", data[8:16])
        shapes = [
            (nv, 3),
            (nv, 3, sk.NUM_SHAPE_COEFFS),
            (nv, 3, sk.NUM_EXPR_COEFFS),
            (nv, 3, sk.NUM_POSE_BLEND),
            (sk.NUM_POSE_JOINTS,),
            (nj, nv),
            (nv, sk.NUM_POSE_JOINTS),
            (4, nv),
        ]
        offset = 16
        arrays = []
        for shape in shapes:
            count = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
            arrays.append(arr.copy())
            offset += count * 8
        if offset != len(data):
            raise CheckpointError("body-model container has trailing bytes")
        masks = {p: arrays[7][i] > 0.5 for i, p in enumerate(sk.PART_NAMES)}
        model = cls(
            template_vertices=arrays[0],
            shape_blendshapes=arrays[1],
            expression_blendshapes=arrays[2],
            pose_blendshapes=arrays[3],
            kinematic_parents=arrays[4].astype(np.int64),
            joint_regressor=arrays[5],
            skinning_weights=arrays[6],
            part_vertex_masks=masks,
        )
        return model.validate()
