"""Analytic two-view scenes with exact ground truth.

Scenes are built from textured planes (optionally bounded) and one
oriented box that may move rigidly between the two frames.  Every pixel is
ray cast against the analytic surfaces, so depth, normals, occlusion and the
dynamic mask are exact.  Colours are supersampled to keep the procedural
texture band-limited at the pixel scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, PoseSE3

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class Texture:
    """Value-noise texture evaluated in the surface's own 3D frame."""

    cell: float = 0.8  # lattice spacing of the coarsest octave, metres
    octaves: int = 3
    base: tuple = (0.5, 0.5, 0.5)
    contrast: float = 0.8
    seed: int = 0


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    texture: Texture = Texture()
    # half extents along the plane's in-plane axes; None for an infinite plane
    extent: tuple | None = None


@dataclass(frozen=True)
class Box:
    center: tuple
    half_size: tuple
    rotvec: tuple = (0.0, 0.0, 0.0)
    # rigid motion between frame a and frame b, expressed in frame-a coordinates
    displacement: PoseSE3 = field(default_factory=PoseSE3.identity)
    texture: Texture = Texture()

    def pose_a(self) -> PoseSE3:
        return PoseSE3.from_vector(np.concatenate([self.rotvec, self.center]))

    def pose_b(self) -> PoseSE3:
        return self.displacement.compose(self.pose_a())


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 48
    intrinsics: CameraIntrinsics | None = None
    planes: tuple = ()
    box: Box | None = None
    camera_motion: PoseSE3 = field(default_factory=PoseSE3.identity)
    noise: float = 0.0
    seed: int = 0
    supersample: int = 3
    # Gaussian prefilter width in pixels (0: plain box average over the pixel)
    blur: float = 0.7

    def __post_init__(self):
        if self.blur < 0:
            raise ValueError("blur must be non-negative")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not self.planes and self.box is None:
            raise ValueError("scene has no surfaces")
        if self.supersample < 1 or self.supersample % 2 == 0:
            raise ValueError("supersample must be odd and >= 1")
        K = self.camera()
        if K.width != self.width or K.height != self.height:
            raise ValueError("intrinsics do not match the scene size")

    def camera(self) -> CameraIntrinsics:
        if self.intrinsics is not None:
            return self.intrinsics
        f = 0.875 * self.width
        return CameraIntrinsics(f, f, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)


@dataclass(frozen=True)
class PseudoDepthConfig:
    gain: float = 0.5
    exponent: float = 1.0
    offset: float = 0.0
    radius: int = 0
    tau_check: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if not (self.gain > 0 and self.exponent > 0):
            raise ValueError("gain and exponent must be positive")
        if self.offset < 0:
            raise ValueError("offset must be non-negative")
        if self.radius < 0:
            raise ValueError("radius must be non-negative")


@dataclass
class SceneSample:
    """Two rendered views with ground truth.

    Images are ``(3, H, W)`` in [0, 1]; depths ``(H, W)``; ``normals_a`` is
    ``(H, W, 3)``; ``pose`` maps frame-a points into frame b.
    """

    image_a: np.ndarray
    image_b: np.ndarray
    depth_a: np.ndarray
    depth_b: np.ndarray
    pose: PoseSE3
    intrinsics: CameraIntrinsics
    dynamic_a: np.ndarray
    dynamic_b: np.ndarray
    pseudo_a: np.ndarray
    pseudo_b: np.ndarray
    normals_a: np.ndarray

    def crop(self, x0: int, y0: int, width: int, height: int) -> "SceneSample":
        sl = (slice(y0, y0 + height), slice(x0, x0 + width))
        return SceneSample(
            self.image_a[(slice(None),) + sl].copy(),
            self.image_b[(slice(None),) + sl].copy(),
            self.depth_a[sl].copy(),
            self.depth_b[sl].copy(),
            self.pose,
            self.intrinsics.crop(x0, y0, width, height),
            self.dynamic_a[sl].copy(),
            self.dynamic_b[sl].copy(),
            self.pseudo_a[sl].copy(),
            self.pseudo_b[sl].copy(),
            self.normals_a[sl].copy(),
        )


class PseudoDepthAuditError(RuntimeError):
    pass


# ---------------------------------------------------------------- texture ---

def _hash3(i: np.ndarray, j: np.ndarray, k: np.ndarray, seed: int) -> np.ndarray:
    """Integer lattice hash to [0, 1) (splitmix64 finaliser)."""
    with np.errstate(over="ignore"):
        h = (
            i.astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
            ^ j.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
            ^ k.astype(np.uint64) * np.uint64(0x165667B19E3779F9)
            ^ np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x27D4EB2F165667C5)
        ) & _MASK64
        h ^= h >> np.uint64(30)
        h = (h * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        h ^= h >> np.uint64(27)
        h = (h * np.uint64(0x94D049BB133111EB)) & _MASK64
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(p: np.ndarray, seed: int) -> np.ndarray:
    """Smooth trilinear value noise on the unit lattice, ``p`` is ``(..., 3)``."""
    base = np.floor(p)
    f = p - base
    w = f * f * f * (f * (f * 6 - 15) + 10)
    b = base.astype(np.int64)
    out = np.zeros(p.shape[:-1])
    for dx in (0, 1):
        wx = w[..., 0] if dx else 1 - w[..., 0]
        for dy in (0, 1):
            wy = w[..., 1] if dy else 1 - w[..., 1]
            for dz in (0, 1):
                wz = w[..., 2] if dz else 1 - w[..., 2]
                out += wx * wy * wz * _hash3(b[..., 0] + dx, b[..., 1] + dy, b[..., 2] + dz, seed)
    return out


def texture_color(tex: Texture, p: np.ndarray) -> np.ndarray:
    """RGB in [0, 1] at surface-frame points ``p`` ``(N, 3)`` -> ``(N, 3)``."""
    out = np.empty(p.shape[:-1] + (3,))
    norm = sum(0.5**o for o in range(tex.octaves))
    for c in range(3):
        acc = np.zeros(p.shape[:-1])
        for o in range(tex.octaves):
            acc += 0.5**o * value_noise(p * (2**o / tex.cell), tex.seed * 7919 + c * 104729 + o)
        out[..., c] = np.clip(tex.base[c] + tex.contrast * (acc / norm - 0.5), 0.0, 1.0)
    return out


# -------------------------------------------------------------- ray casting ---

def _plane_axes(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    helper = np.array([0.0, 1.0, 0.0]) if abs(normal[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, normal)
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(normal, e1)


def _intersect_plane(plane: Plane, origin, dirs):
    n = np.asarray(plane.normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    p0 = np.asarray(plane.point, dtype=np.float64)
    denom = dirs @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        s = ((p0 - origin) @ n) / denom
    hit = np.isfinite(s) & (s > 1e-9)
    pts = origin + s[:, None] * dirs
    if plane.extent is not None:
        e1, e2 = _plane_axes(n)
        rel = pts - p0
        hit &= (np.abs(rel @ e1) <= plane.extent[0]) & (np.abs(rel @ e2) <= plane.extent[1])
    s = np.where(hit, s, np.inf)
    normals = np.broadcast_to(n, dirs.shape)
    return s, pts, normals


def _intersect_box(box: Box, pose: PoseSE3, origin, dirs):
    R, c = pose.rotation, pose.translation
    o_l = R.T @ (origin - c)
    d_l = dirs @ R
    half = np.asarray(box.half_size, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o_l) / d_l
        t2 = (half - o_l) / d_l
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    tmin = np.where(np.isnan(tmin), -np.inf, tmin)
    tmax = np.where(np.isnan(tmax), np.inf, tmax)
    near = tmin.max(axis=1)
    far = tmax.min(axis=1)
    axis = tmin.argmax(axis=1)
    hit = (near <= far) & (near > 1e-9)
    s = np.where(hit, near, np.inf)
    local = o_l + np.where(hit, near, 0.0)[:, None] * d_l
    n_l = np.zeros_like(local)
    idx = np.arange(len(local))
    n_l[idx, axis] = np.sign(local[idx, axis])
    return s, local, n_l @ R.T


def _cast(cfg: SceneConfig, box_pose: PoseSE3 | None, origin, dirs):
    """Nearest hit per ray: (depth parameter, colour, normal, box-hit flag)."""
    n = len(dirs)
    best = np.full(n, np.inf)
    color = np.zeros((n, 3))
    normal = np.zeros((n, 3))
    on_box = np.zeros(n, dtype=bool)
    for plane in cfg.planes:
        s, pts, nrm = _intersect_plane(plane, origin, dirs)
        take = s < best
        if take.any():
            best[take] = s[take]
            color[take] = texture_color(plane.texture, pts[take])
            normal[take] = nrm[take]
            on_box[take] = False
    if cfg.box is not None:
        s, local, nrm = _intersect_box(cfg.box, box_pose, origin, dirs)
        take = s < best
        if take.any():
            best[take] = s[take]
            color[take] = texture_color(cfg.box.texture, local[take])
            normal[take] = nrm[take]
            on_box[take] = True
    return best, color, normal, on_box


def _antialiased_color(cfg: SceneConfig, box_pose, origin, R) -> np.ndarray:
    """Supersampled colour with a Gaussian prefilter, ``(H*W, 3)``.

    The subpixel grid extends past the image border so the filter sees real
    content there as well.
    """
    K = cfg.camera()
    ss = cfg.supersample
    margin = int(np.ceil(3 * cfg.blur)) if cfg.blur > 0 else 0
    n_v = (cfg.height + 2 * margin) * ss
    n_u = (cfg.width + 2 * margin) * ss
    sub = (np.arange(ss) + 0.5) / ss - 0.5
    us = (np.arange(cfg.width + 2 * margin) - margin)[:, None] + sub[None, :]
    vs = (np.arange(cfg.height + 2 * margin) - margin)[:, None] + sub[None, :]
    vv, uu = np.meshgrid(vs.reshape(-1), us.reshape(-1), indexing="ij")
    d = np.stack([(uu - K.cx) / K.fx, (vv - K.cy) / K.fy, np.ones_like(uu)], -1).reshape(-1, 3) @ R.T
    depth, col, _, _ = _cast(cfg, box_pose, origin, d)
    # rays beyond the image border may legitimately miss; give them neutral grey
    col[~np.isfinite(depth)] = 0.5
    img = col.reshape(n_v, n_u, 3)
    if cfg.blur > 0:
        img = ndimage.gaussian_filter(img, sigma=(cfg.blur * ss, cfg.blur * ss, 0), mode="nearest")
    else:
        img = img.reshape(n_v // ss, ss, n_u // ss, ss, 3).mean(axis=(1, 3))
        return img[margin:margin + cfg.height, margin:margin + cfg.width].reshape(-1, 3)
    c = ss // 2
    img = img[c::ss, c::ss][margin:margin + cfg.height, margin:margin + cfg.width]
    return img.reshape(-1, 3)


def _render_view(cfg: SceneConfig, cam_to_a: PoseSE3, box_pose, rng, view: str):
    K = cfg.camera()
    H, W = cfg.height, cfg.width
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    origin = cam_to_a.translation
    R = cam_to_a.rotation

    def rays(du, dv):
        d = np.stack([(u + du - K.cx) / K.fx, (v + dv - K.cy) / K.fy, np.ones_like(u)], -1)
        return d.reshape(-1, 3) @ R.T

    dirs = rays(0.0, 0.0)
    depth, _, normal, on_box = _cast(cfg, box_pose, origin, dirs)
    missed = ~np.isfinite(depth)
    if missed.any():
        r, c = divmod(int(np.flatnonzero(missed)[0]), W)
        raise ValueError(f"ray misses all surfaces at pixel (x={c}, y={r}) of view {view}")
    color = _antialiased_color(cfg, box_pose, origin, R)
    if cfg.noise > 0:
        color = np.clip(color + rng.normal(0.0, cfg.noise, color.shape), 0.0, 1.0)
    # normals in this camera's frame, facing the camera
    normal_cam = normal @ R
    view_dir = dirs @ R
    flip = (normal_cam * view_dir).sum(-1) > 0
    normal_cam[flip] *= -1
    return (
        color.reshape(H, W, 3).transpose(2, 0, 1).copy(),
        depth.reshape(H, W),
        normal_cam.reshape(H, W, 3),
        on_box.reshape(H, W).astype(np.float64),
    )


def render_scene(cfg: SceneConfig, pseudo: PseudoDepthConfig = PseudoDepthConfig()) -> SceneSample:
    """Render both views; raises ``ValueError`` if any pixel ray hits nothing."""
    seq = np.random.SeedSequence(cfg.seed)
    rng_a, rng_b = (np.random.default_rng(s) for s in seq.spawn(2))
    box_a = cfg.box.pose_a() if cfg.box is not None else None
    box_b = cfg.box.pose_b() if cfg.box is not None else None
    img_a, depth_a, normals_a, dyn_a = _render_view(cfg, PoseSE3.identity(), box_a, rng_a, "a")
    # camera b expressed in frame a
    cam_b = cfg.camera_motion.inverse()
    img_b, depth_b, _, dyn_b = _render_view(cfg, cam_b, box_b, rng_b, "b")
    return SceneSample(
        image_a=img_a,
        image_b=img_b,
        depth_a=depth_a,
        depth_b=depth_b,
        pose=cfg.camera_motion,
        intrinsics=cfg.camera(),
        dynamic_a=dyn_a,
        dynamic_b=dyn_b,
        pseudo_a=make_pseudo_depth(depth_a, pseudo),
        pseudo_b=make_pseudo_depth(depth_b, replace(pseudo, seed=pseudo.seed + 1)),
        normals_a=normals_a,
    )


# ------------------------------------------------------------ pseudo-depth ---

def make_pseudo_depth(gt_depth, cfg: PseudoDepthConfig = PseudoDepthConfig()) -> np.ndarray:
    """Monotone distortion ``gain * d**exponent + offset``, optionally box-smoothed.

    Smoothing is audited over every pixel pair whose ground-truth ratio is at
    least ``1 + tau_check``; any flipped ordinal raises
    :class:`PseudoDepthAuditError`.
    """
    gt = np.asarray(gt_depth, dtype=np.float64)
    if np.any(~(gt > 0)):
        raise ValueError("ground-truth depth must be positive")
    pd = cfg.gain * gt**cfg.exponent + cfg.offset
    if cfg.radius > 0:
        pd = ndimage.uniform_filter(pd, size=2 * cfg.radius + 1, mode="nearest")
        flipped = ordinal_violations(gt, pd, cfg.tau_check)
        if flipped:
            raise PseudoDepthAuditError(
                f"smoothing radius {cfg.radius} flips confident ordinals at {flipped} pixels; "
                "use a smaller radius"
            )
    return pd


def ordinal_violations(gt: np.ndarray, pd: np.ndarray, tau: float) -> int:
    """Number of pixels ``i`` having some ``j`` with ``gt_j >= (1+tau) gt_i`` but ``pd_j <= pd_i``.

    Exact over all pairs: after sorting by ``gt``, the farther partners of
    ``i`` form a suffix, so one suffix minimum of ``pd`` settles each pixel.
    """
    g = np.asarray(gt, dtype=np.float64).reshape(-1)
    p = np.asarray(pd, dtype=np.float64).reshape(-1)
    order = np.argsort(g, kind="stable")
    gs, ps = g[order], p[order]
    suffix_min = np.minimum.accumulate(ps[::-1])[::-1]
    start = np.searchsorted(gs, (1 + tau) * gs, side="left")
    has = start < gs.size
    bad = np.zeros(gs.size, bool)
    bad[has] = suffix_min[start[has]] <= ps[has]
    return int(bad.sum())


def ordinal_audit(gt: np.ndarray, pd: np.ndarray, tau: float, n_pairs: int, seed: int) -> int:
    """Count sampled pairs with GT ratio >= 1+tau whose ordering differs in ``pd``."""
    g = gt.reshape(-1)
    p = pd.reshape(-1)
    rng = np.random.default_rng(seed)
    i = rng.integers(0, g.size, size=n_pairs)
    j = rng.integers(0, g.size, size=n_pairs)
    ratio = np.maximum(g[i] / g[j], g[j] / g[i])
    conf = ratio >= 1 + tau
    return int(np.sum(np.sign(g[i] - g[j])[conf] != np.sign(p[i] - p[j])[conf]))


# ----------------------------------------------------------------- presets ---

GROUND = Plane((0.0, 1.5, 0.0), (0.0, -1.0, 0.0), Texture(cell=0.8, base=(0.45, 0.42, 0.38), seed=11))
WALL = Plane((0.0, 0.0, 12.0), (0.0, 0.0, -1.0), Texture(cell=1.6, base=(0.55, 0.5, 0.6), seed=23))
BOX_TEXTURE = Texture(cell=0.6, base=(0.6, 0.4, 0.35), contrast=0.9, seed=37)


def default_camera_motion() -> PoseSE3:
    # camera b sits 0.5 m forward and 0.2 m right of camera a
    return PoseSE3(np.eye(3), -np.array([0.2, 0.0, 0.5]))


def default_scene(width: int = 64, height: int = 48, seed: int = 0, noise: float = 0.01,
                  dynamic: bool = True, box_speed: float = 0.4) -> SceneConfig:
    """Ground plane, back wall and a textured box moving laterally."""
    displacement = PoseSE3(np.eye(3), [-box_speed, 0.0, 0.0]) if dynamic else PoseSE3.identity()
    box = Box(center=(0.4, 0.8, 6.0), half_size=(0.7, 0.7, 0.7), displacement=displacement,
              texture=BOX_TEXTURE)
    return SceneConfig(width=width, height=height, planes=(GROUND, WALL), box=box,
                       camera_motion=default_camera_motion(), noise=noise, seed=seed)


def two_plane_scene(width: int = 64, height: int = 48, seed: int = 0, noise: float = 0.01) -> SceneConfig:
    """Back wall plus a nearer bounded panel, both fronto-parallel and static."""
    wall = Plane((0.0, 0.0, 10.0), (0.0, 0.0, -1.0), WALL.texture)
    panel = Plane((-0.9, 0.2, 5.0), (0.0, 0.0, -1.0), Texture(cell=0.6, base=(0.4, 0.55, 0.45), seed=41),
                  extent=(1.3, 1.1))
    return SceneConfig(width=width, height=height, planes=(wall, panel),
                       camera_motion=default_camera_motion(), noise=noise, seed=seed)


def static_scene(width: int = 64, height: int = 48, seed: int = 0, noise: float = 0.01) -> SceneConfig:
    """Ground plane and back wall only; every pixel is rigid and unoccluded."""
    return SceneConfig(width=width, height=height, planes=(GROUND, WALL),
                       camera_motion=default_camera_motion(), noise=noise, seed=seed)


def _crease(depth: np.ndarray, tol: float) -> np.ndarray:
    # inverse depth is affine in pixel coordinates on a plane, so its second
    # differences vanish everywhere except at creases and occlusion edges
    inv = 1.0 / depth
    p = np.pad(inv, 1, mode="edge")
    ddx = np.abs(p[1:-1, 2:] + p[1:-1, :-2] - 2 * inv)
    ddy = np.abs(p[2:, 1:-1] + p[:-2, 1:-1] - 2 * inv)
    bad = (np.maximum(ddx, ddy) / inv) > tol
    return ndimage.binary_dilation(bad, np.ones((3, 3), bool))


def occlusion_mask(cfg: SceneConfig, sample: SceneSample, rel_tol: float = 1e-3) -> np.ndarray:
    """1 on pixels of view ``a`` whose GT correspondence in view ``b`` is unreliable.

    A pixel is flagged when its surface point is hidden or out of frame in
    view ``b`` (exact ray cast), or when it sits next to a depth crease or
    discontinuity in view ``a`` or around its warp target in view ``b``.
    """
    H, W = cfg.height, cfg.width
    K = sample.intrinsics
    v, u = np.mgrid[0:H, 0:W].astype(np.float64)
    d = sample.depth_a
    pts = np.stack([(u - K.cx) / K.fx * d, (v - K.cy) / K.fy * d, d], -1).reshape(-1, 3)
    box_a = cfg.box.pose_a() if cfg.box is not None else None
    box_b = cfg.box.pose_b() if cfg.box is not None else None
    dyn = sample.dynamic_a.reshape(-1) > 0
    if dyn.any():
        motion = box_b.compose(box_a.inverse())
        pts[dyn] = motion.apply(pts[dyn])
    cam_b = cfg.camera_motion.inverse()
    dirs = pts - cam_b.translation
    hit, _, _, _ = _cast(cfg, box_b, cam_b.translation, dirs)
    hidden = hit < 1 - 1e-6
    in_b = cfg.camera_motion.apply(pts)
    x = K.fx * in_b[:, 0] / in_b[:, 2] + K.cx
    y = K.fy * in_b[:, 1] / in_b[:, 2] + K.cy
    outside = (in_b[:, 2] <= 0) | (x < 0) | (x > W - 1) | (y < 0) | (y > H - 1)
    crease_b = _crease(sample.depth_b, rel_tol)
    xi = np.clip(np.rint(x), 0, W - 1).astype(int)
    yi = np.clip(np.rint(y), 0, H - 1).astype(int)
    flagged = hidden | outside | crease_b[yi, xi] | _crease(d, rel_tol).reshape(-1)
    return flagged.reshape(H, W).astype(np.float64)


PRESETS = {
    "default": lambda **kw: default_scene(dynamic=True, **kw),
    "static": static_scene,
    "two_plane": two_plane_scene,
}
