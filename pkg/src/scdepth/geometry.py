"""Pinhole camera model, rigid poses and differentiable view warping.

Conventions used throughout the package:

* pixel centres sit at integer coordinates, the image domain is
  ``[0, W-1] x [0, H-1]``;
* camera frame is x right, y down, z forward;
* a pose ``P_ab`` maps points of frame ``a`` into frame ``b``:
  ``p_b = R @ p_a + t``.

Grids are ``torch.float64`` tensors of shape ``(H, W)`` (scalar) or
``(C, H, W)`` (multi-channel).  Point grids are ``(H, W, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np
import torch
from scipy.spatial.transform import Rotation

DTYPE = torch.float64

# minimum admissible projected depth (metres)
EPS_Z = 1e-6

# slack (pixels) on the image-domain test so round-off at the border does not
# flip validity
BOUND_TOL = 1e-9


class DomainError(ValueError):
    """Raised when an input lies outside an operation's mathematical domain."""


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"invalid grid size {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} grid"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def crop(self, x0: int, y0: int, width: int, height: int) -> "CameraIntrinsics":
        """Intrinsics of the sub-window starting at pixel ``(x0, y0)``."""
        return CameraIntrinsics(self.fx, self.fy, self.cx - x0, self.cy - y0, width, height)


@dataclass(frozen=True, eq=False)
class PoseSE3:
    """Rigid transform ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose contains non-finite entries")
        if np.abs(R.T @ R - np.eye(3)).max() >= 1e-9 or np.linalg.det(R) <= 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_vector(cls, xi) -> "PoseSE3":
        """Build from ``(wx, wy, wz, tx, ty, tz)``: axis-angle rotation, then translation."""
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        R = Rotation.from_rotvec(xi[:3]).as_matrix()
        return cls(_reorthonormalize(R), xi[3:])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([Rotation.from_matrix(self.rotation).as_rotvec(), self.translation])

    def inverse(self) -> "PoseSE3":
        Rt = self.rotation.T
        return PoseSE3(Rt, -Rt @ self.translation)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """``self ∘ other``: apply ``other`` first."""
        R = self.rotation @ other.rotation
        return PoseSE3(_reorthonormalize(R), self.rotation @ other.translation + self.translation)

    def perturbed(self, delta) -> "PoseSE3":
        """Local update ``R <- exp(w) R``, ``t <- t + v`` for ``delta = (w, v)``."""
        delta = np.asarray(delta, dtype=np.float64).reshape(6)
        dR = Rotation.from_rotvec(delta[:3]).as_matrix()
        return PoseSE3(_reorthonormalize(dR @ self.rotation), self.translation + delta[3:])

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.from_numpy(self.rotation.copy()), torch.from_numpy(self.translation.copy())

    def __repr__(self):
        v = self.to_vector()
        return f"PoseSE3(rotvec={v[:3].tolist()}, t={v[3:].tolist()})"


def _reorthonormalize(R: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def skew(w: torch.Tensor) -> torch.Tensor:
    zero = torch.zeros((), dtype=w.dtype)
    return torch.stack(
        [
            torch.stack([zero, -w[2], w[1]]),
            torch.stack([w[2], zero, -w[0]]),
            torch.stack([-w[1], w[0], zero]),
        ]
    )


def perturb_pose(rotation: torch.Tensor, translation: torch.Tensor, delta: torch.Tensor):
    """Differentiable counterpart of :meth:`PoseSE3.perturbed`."""
    dR = torch.linalg.matrix_exp(skew(delta[:3]))
    return dR @ rotation, translation + delta[3:]


def invert_pose(rotation: torch.Tensor, translation: torch.Tensor):
    Rt = rotation.transpose(0, 1)
    return Rt, -(Rt @ translation)


PoseLike = Union[PoseSE3, tuple]


def _pose_tensors(pose: PoseLike):
    if isinstance(pose, PoseSE3):
        return pose.tensors()
    R, t = pose
    return as_tensor(R), as_tensor(t)


class FlowField(NamedTuple):
    """Warp targets for every source pixel.

    ``x``/``y`` are target pixel coordinates, ``valid`` is a {0,1} grid and
    ``depth`` is the depth of the transformed point in the target frame.
    """

    x: torch.Tensor
    y: torch.Tensor
    valid: torch.Tensor
    depth: torch.Tensor


def pixel_grid(height: int, width: int) -> tuple[torch.Tensor, torch.Tensor]:
    v, u = torch.meshgrid(
        torch.arange(height, dtype=DTYPE), torch.arange(width, dtype=DTYPE), indexing="ij"
    )
    return u, v


def backproject(depth, K: CameraIntrinsics) -> torch.Tensor:
    """Lift a depth grid to camera-frame points, shape ``(H, W, 3)``."""
    depth = as_tensor(depth)
    bad = ~(depth > 0)
    if bool(bad.any()):
        r, c = (int(i) for i in torch.nonzero(bad)[0])
        raise DomainError(f"non-positive depth {float(depth[r, c])!r} at pixel (x={c}, y={r})")
    u, v = pixel_grid(*depth.shape)
    x = (u - K.cx) / K.fx * depth
    y = (v - K.cy) / K.fy * depth
    return torch.stack([x, y, depth], dim=-1)


def transform_points(points: torch.Tensor, pose: PoseLike) -> torch.Tensor:
    R, t = _pose_tensors(pose)
    return points @ R.transpose(0, 1) + t


def project(points, K: CameraIntrinsics):
    """Perspective projection of an ``(H, W, 3)`` point grid.

    Returns ``(x, y, depth, ok)`` where ``ok`` marks points with
    ``z > EPS_Z``.  Rejected points get the sentinel coordinate -1, which
    lies outside the image.
    """
    points = as_tensor(points)
    z = points[..., 2]
    ok = z > EPS_Z
    safe_z = torch.where(ok, z, torch.ones_like(z))
    sentinel = torch.full_like(z, -1.0)
    x = torch.where(ok, K.fx * points[..., 0] / safe_z + K.cx, sentinel)
    y = torch.where(ok, K.fy * points[..., 1] / safe_z + K.cy, sentinel)
    return x, y, z, ok


def in_bounds(x: torch.Tensor, y: torch.Tensor, height: int, width: int) -> torch.Tensor:
    t = BOUND_TOL
    return (x >= -t) & (x <= width - 1 + t) & (y >= -t) & (y <= height - 1 + t)


def compute_warp(depth_a, pose_ab: PoseLike, K: CameraIntrinsics) -> FlowField:
    """Where each pixel of view ``a`` lands in view ``b``."""
    points = transform_points(backproject(depth_a, K), pose_ab)
    x, y, z, ok = project(points, K)
    valid = ok & in_bounds(x, y, K.height, K.width)
    return FlowField(x, y, valid.to(DTYPE), z)


def bilinear_sample(grid, coords, y=None) -> torch.Tensor:
    """Sample ``grid`` (``(H, W)`` or ``(C, H, W)``) at real pixel coordinates.

    ``coords`` is a :class:`FlowField` or the x-coordinate tensor (with
    ``y`` given separately).  Samples outside ``[0, W-1] x [0, H-1]`` are 0.
    The interpolation cell is chosen by ``floor``, so at exactly integer
    coordinates the coordinate derivative is that of the cell to the right.
    """
    if isinstance(coords, FlowField):
        x, y = coords.x, coords.y
    else:
        x = coords
    grid = as_tensor(grid)
    x = as_tensor(x)
    y = as_tensor(y)
    squeeze = grid.dim() == 2
    if squeeze:
        grid = grid.unsqueeze(0)
    C, H, W = grid.shape
    inside = in_bounds(x, y, H, W)
    # keep out-of-range coordinates away from the index arithmetic
    xs = torch.where(inside, x, torch.zeros_like(x))
    ys = torch.where(inside, y, torch.zeros_like(y))
    x0 = torch.floor(xs).clamp(0, W - 1)
    y0 = torch.floor(ys).clamp(0, H - 1)
    wx = xs - x0
    wy = ys - y0
    ix0 = x0.long()
    iy0 = y0.long()
    ix1 = (ix0 + 1).clamp(max=W - 1)
    iy1 = (iy0 + 1).clamp(max=H - 1)
    flat = grid.reshape(C, H * W)

    def tap(iy, ix):
        idx = (iy * W + ix).reshape(-1)
        return flat[:, idx].reshape(C, *x.shape)

    out = (
        tap(iy0, ix0) * ((1 - wx) * (1 - wy))
        + tap(iy0, ix1) * (wx * (1 - wy))
        + tap(iy1, ix0) * ((1 - wx) * wy)
        + tap(iy1, ix1) * (wx * wy)
    )
    out = torch.where(inside, out, torch.zeros_like(out))
    return out[0] if squeeze else out
