"""Pseudo-depth driven refinement losses.

Dynamic region refinement ranks pixels by the self-discovered mask, pairs
likely-dynamic pixels with static ones and applies a confident ranking loss
whose ordinal labels come from pseudo-depth.  Local structure refinement
matches surface normals against pseudo-depth normals and constrains the
relative normal angle of pixel pairs straddling image edges.
"""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .geometry import DTYPE, CameraIntrinsics, DomainError, as_tensor, backproject


class EmptyPairSetWarning(UserWarning):
    pass


class Provenance(enum.IntEnum):
    DYNAMIC_STATIC = 0
    GLOBAL_RANDOM = 1
    EDGE_GUIDED = 2


@dataclass
class PointPairSet:
    """Pairs of flat (row-major) pixel indices.

    ``provenance`` holds one :class:`Provenance` code per pair.
    """

    idx0: np.ndarray
    idx1: np.ndarray
    provenance: np.ndarray
    labels: np.ndarray | None = None
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.idx0 = np.asarray(self.idx0, dtype=np.int64).reshape(-1)
        self.idx1 = np.asarray(self.idx1, dtype=np.int64).reshape(-1)
        self.provenance = np.asarray(self.provenance, dtype=np.int8).reshape(-1)
        if not (len(self.idx0) == len(self.idx1) == len(self.provenance)):
            raise ValueError("pair arrays must have equal length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int8).reshape(-1)
            if len(self.labels) != len(self.idx0):
                raise ValueError("labels must match the number of pairs")

    def __len__(self):
        return len(self.idx0)

    @classmethod
    def empty(cls, provenance: Provenance, flag: str | None = None) -> "PointPairSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros(0, dtype=np.int8), flags=[flag] if flag else [])

    def select(self, keep: np.ndarray) -> "PointPairSet":
        labels = None if self.labels is None else self.labels[keep]
        return PointPairSet(self.idx0[keep], self.idx1[keep], self.provenance[keep], labels, list(self.flags))

    def of(self, provenance: Provenance) -> "PointPairSet":
        return self.select(self.provenance == int(provenance))

    def check_range(self, n_pixels: int) -> None:
        for arr in (self.idx0, self.idx1):
            if len(arr) and (arr.min() < 0 or arr.max() >= n_pixels):
                raise IndexError("pair index out of range")


@dataclass(frozen=True)
class RankingConfig:
    tau: float = 0.15
    dynamic_fraction: float = 0.2
    # None: one pair per dynamic pixel / as many global pairs as dynamic ones
    pairs_dynamic: int | None = None
    pairs_global: int | None = None
    seed: int = 0
    log_depth: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not 0 < self.dynamic_fraction < 1:
            raise ValueError("dynamic_fraction must lie in (0, 1)")
        for n in (self.pairs_dynamic, self.pairs_global):
            if n is not None and n < 0:
                raise ValueError("pair counts must be non-negative")


@dataclass(frozen=True)
class EdgeSamplingConfig:
    n_pairs: int = 512
    edge_percentile: float = 90.0
    offset_min: float = 2.0
    offset_max: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 0:
            raise ValueError("n_pairs must be non-negative")
        if not 0 < self.offset_min <= self.offset_max:
            raise ValueError("need 0 < offset_min <= offset_max")


@dataclass(frozen=True)
class TotalWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.1
    delta: float = 0.1
    epsilon: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.delta, self.epsilon) < 0:
            raise ValueError("loss weights must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return {
            "weighted_photometric": self.alpha,
            "geometry": self.beta,
            "normal": self.gamma,
            "cdr": self.delta,
            "ern": self.epsilon,
        }


def dynamic_split(M_s, fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Flat indices of the lowest-``fraction`` mask pixels and of the rest."""
    m = np.asarray(M_s.detach() if isinstance(M_s, torch.Tensor) else M_s, dtype=np.float64).reshape(-1)
    n = m.size
    k = int(round(fraction * n))
    if k < 1 or k >= n:
        raise ValueError(f"{n} pixels cannot host both a dynamic and a static set at fraction {fraction}")
    order = np.argsort(m, kind="stable")
    return order[:k], order[k:]


def dynamic_focused_sampling(M_s, cfg: RankingConfig = RankingConfig()) -> PointPairSet:
    """Dynamic-static pairs plus uniformly random global pairs."""
    dynamic, static = dynamic_split(M_s, cfg.dynamic_fraction)
    n = dynamic.size + static.size
    rng = np.random.default_rng(cfg.seed)
    n_dyn = dynamic.size if cfg.pairs_dynamic is None else cfg.pairs_dynamic
    n_glob = n_dyn if cfg.pairs_global is None else cfg.pairs_global
    if n_dyn <= dynamic.size:
        anchors = rng.permutation(dynamic)[:n_dyn]
    else:
        anchors = rng.choice(dynamic, size=n_dyn, replace=True)
    partners = static[rng.integers(0, static.size, size=n_dyn)]
    g0 = rng.integers(0, n, size=n_glob)
    g1 = rng.integers(0, n, size=n_glob)
    return PointPairSet(
        np.concatenate([anchors, g0]),
        np.concatenate([partners, g1]),
        np.concatenate(
            [np.full(n_dyn, Provenance.DYNAMIC_STATIC), np.full(n_glob, Provenance.GLOBAL_RANDOM)]
        ),
    )


def ordinal_labels(pd0, pd1, tau: float) -> np.ndarray:
    """Vectorised ordinal rule: +1 if ``pd0/pd1 >= 1+tau``, -1 if ``<= 1/(1+tau)``, else 0."""
    pd0 = np.asarray(pd0, dtype=np.float64)
    pd1 = np.asarray(pd1, dtype=np.float64)
    if np.any(~(pd0 > 0)) or np.any(~(pd1 > 0)):
        raise DomainError("pseudo-depth values must be positive")
    ratio = pd0 / pd1
    out = np.zeros(ratio.shape, dtype=np.int8)
    out[ratio >= 1 + tau] = 1
    out[ratio <= 1 / (1 + tau)] = -1
    return out


def ordinal_label(pd0: float, pd1: float, tau: float = 0.15) -> int:
    return int(ordinal_labels(pd0, pd1, tau))


def ranking_loss_original(p0, p1, label) -> torch.Tensor:
    """Ranking loss with the squared penalty for ``label == 0``."""
    p0, p1 = as_tensor(p0), as_tensor(p1)
    label = as_tensor(label)
    diff = p0 - p1
    soft = torch.logaddexp(torch.zeros_like(diff), -label * diff)
    return torch.where(label != 0, soft, diff * diff)


def confident_pairs(PD, pairs: PointPairSet, tau: float) -> PointPairSet:
    """Label ``pairs`` from pseudo-depth and keep only ``label != 0``."""
    pd = np.asarray(PD.detach() if isinstance(PD, torch.Tensor) else PD, dtype=np.float64).reshape(-1)
    pairs.check_range(pd.size)
    labels = ordinal_labels(pd[pairs.idx0], pd[pairs.idx1], tau)
    out = PointPairSet(pairs.idx0, pairs.idx1, pairs.provenance, labels, list(pairs.flags))
    return out.select(labels != 0)


def cdr_loss(D_a, PD_a, pairs: PointPairSet, cfg: RankingConfig = RankingConfig()) -> torch.Tensor:
    """Mean softplus ranking loss over pairs whose pseudo-depth ordinal is confident.

    Labels already attached to ``pairs`` are reused as-is.
    """
    D_a = as_tensor(D_a)
    omega = pairs.select(pairs.labels != 0) if pairs.labels is not None else confident_pairs(PD_a, pairs, cfg.tau)
    if len(omega) == 0:
        warnings.warn("no confident pairs; ranking loss is 0", EmptyPairSetWarning, stacklevel=2)
        return D_a.sum() * 0.0
    flat = D_a.reshape(-1)
    if cfg.log_depth:
        flat = torch.log(flat)
    p0 = flat[torch.from_numpy(omega.idx0)]
    p1 = flat[torch.from_numpy(omega.idx1)]
    label = torch.from_numpy(omega.labels.astype(np.float64))
    return torch.logaddexp(torch.zeros_like(p0), -label * (p0 - p1)).mean()


def _central_diff(P: torch.Tensor, dim: int) -> torch.Tensor:
    # central differences inside, one-sided at the borders
    n = P.shape[dim]
    if n < 2:
        return torch.zeros_like(P)
    first = P.narrow(dim, 1, 1) - P.narrow(dim, 0, 1)
    last = P.narrow(dim, n - 1, 1) - P.narrow(dim, n - 2, 1)
    if n == 2:
        return torch.cat([first, last], dim)
    mid = (P.narrow(dim, 2, n - 2) - P.narrow(dim, 0, n - 2)) / 2
    return torch.cat([first, mid, last], dim)


def normals_from_depth(D, K: CameraIntrinsics, eps: float = 1e-12):
    """Unit normals ``(H, W, 3)`` facing the camera, plus a degeneracy flag grid.

    Degenerate pixels (zero cross product) get the negated viewing direction.
    """
    P = backproject(D, K)
    tx = _central_diff(P, 1)
    ty = _central_diff(P, 0)
    c = torch.linalg.cross(tx, ty, dim=-1)
    norm2 = (c * c).sum(-1, keepdim=True)
    degenerate = norm2 <= eps * eps
    view = P / P.norm(dim=-1, keepdim=True)
    safe = torch.where(degenerate, torch.ones_like(norm2), norm2)
    n = c / torch.sqrt(safe)
    facing = torch.where((n * P).sum(-1, keepdim=True) > 0, -1.0, 1.0).to(DTYPE)
    n = torch.where(degenerate, -view, n * facing)
    return n, degenerate[..., 0]


def normal_matching_loss(n, n_star) -> torch.Tensor:
    n, n_star = as_tensor(n), as_tensor(n_star)
    return (n - n_star).abs().sum(-1).mean()


def grayscale(image) -> np.ndarray:
    img = np.asarray(image.detach() if isinstance(image, torch.Tensor) else image, dtype=np.float64)
    return img.mean(0) if img.ndim == 3 else img


def edge_guided_sampling(I_a, n_pairs: int | None = None, seed: int | None = None,
                         cfg: EdgeSamplingConfig = EdgeSamplingConfig()) -> PointPairSet:
    """Pairs straddling image edges along the local gradient direction.

    Edge pixels are those whose Sobel magnitude reaches the configured
    percentile (and is non-zero).  Each sampled edge pixel ``p`` yields the
    pair ``p -/+ o * g/|g|`` with ``o ~ U[offset_min, offset_max]``, rounded to
    the pixel grid and clamped to the image.
    """
    n_pairs = cfg.n_pairs if n_pairs is None else n_pairs
    seed = cfg.seed if seed is None else seed
    if n_pairs < 0:
        raise ValueError("n_pairs must be non-negative")
    gray = grayscale(I_a)
    H, W = gray.shape
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    threshold = np.percentile(mag, cfg.edge_percentile)
    edges = np.flatnonzero((mag >= threshold) & (mag > 1e-12))
    if edges.size == 0:
        warnings.warn("no edge pixels; edge-guided pair set is empty", EmptyPairSetWarning, stacklevel=2)
        return PointPairSet.empty(Provenance.EDGE_GUIDED, "no_edges")
    rng = np.random.default_rng(seed)
    picks = edges[rng.integers(0, edges.size, size=n_pairs)]
    offsets = rng.uniform(cfg.offset_min, cfg.offset_max, size=n_pairs)
    r, c = np.divmod(picks, W)
    dx = gx.reshape(-1)[picks] / mag.reshape(-1)[picks]
    dy = gy.reshape(-1)[picks] / mag.reshape(-1)[picks]
    ca = np.clip(np.rint(c - offsets * dx), 0, W - 1).astype(np.int64)
    ra = np.clip(np.rint(r - offsets * dy), 0, H - 1).astype(np.int64)
    cb = np.clip(np.rint(c + offsets * dx), 0, W - 1).astype(np.int64)
    rb = np.clip(np.rint(r + offsets * dy), 0, H - 1).astype(np.int64)
    a = ra * W + ca
    b = rb * W + cb
    keep = a != b
    return PointPairSet(a[keep], b[keep], np.full(int(keep.sum()), Provenance.EDGE_GUIDED))


def ern_loss(n, n_star, pairs: PointPairSet) -> torch.Tensor:
    """Mean ``|n_A.n_B - n*_A.n*_B|`` over the pairs."""
    n, n_star = as_tensor(n), as_tensor(n_star)
    if len(pairs) == 0:
        warnings.warn("empty pair set; relative normal loss is 0", EmptyPairSetWarning, stacklevel=2)
        return n.sum() * 0.0
    flat = n.reshape(-1, 3)
    flat_star = n_star.reshape(-1, 3)
    pairs.check_range(flat.shape[0])
    a = torch.from_numpy(pairs.idx0)
    b = torch.from_numpy(pairs.idx1)
    dot = (flat[a] * flat[b]).sum(-1)
    dot_star = (flat_star[a] * flat_star[b]).sum(-1)
    return (dot - dot_star).abs().mean()


def total_loss(sample, weights: TotalWeights = TotalWeights(), cfg=None, *, depth_a=None,
               depth_b=None, pose=None):
    """Full objective (``L_S`` replaced by the normal matching loss)."""
    from .objective import evaluate_report

    return evaluate_report(sample, weights.as_dict(), cfg, depth_a=depth_a, depth_b=depth_b, pose=pose)
