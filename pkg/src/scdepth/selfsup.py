"""Baseline self-supervised objective: photometric, geometry consistency,
self-discovered mask, edge-aware smoothness and minimum reprojection."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .geometry import DTYPE, as_tensor, bilinear_sample, compute_warp


class EmptyValidSetError(ValueError):
    pass


@dataclass(frozen=True)
class PhotometricConfig:
    lam: float = 0.15
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2
    window: int = 3

    def __post_init__(self):
        if not 0 <= self.lam <= 1:
            raise ValueError(f"lam must lie in [0, 1], got {self.lam}")
        if self.ssim_c1 <= 0 or self.ssim_c2 <= 0:
            raise ValueError("SSIM constants must be positive")
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError(f"SSIM window must be odd and >= 3, got {self.window}")


@dataclass(frozen=True)
class SelfSupWeights:
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")

    def as_dict(self) -> dict[str, float]:
        return {"weighted_photometric": self.alpha, "geometry": self.beta, "smoothness": self.gamma}


@dataclass
class LossReport:
    """Loss value, its per-term breakdown and gradients.

    ``total == sum(weights[k] * per_term[k])``; terms with weight 0 are
    reported for inspection only.
    """

    total: float
    per_term: dict[str, float]
    weights: dict[str, float]
    grad_depth_a: torch.Tensor | None = None
    grad_depth_b: torch.Tensor | None = None
    grad_pose: torch.Tensor | None = None
    flags: list[str] = field(default_factory=list)

    def weighted_sum(self) -> float:
        return sum(self.weights.get(k, 0.0) * v for k, v in self.per_term.items())


def _channels(x: torch.Tensor) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == 2 else x


def _box_mean(x: torch.Tensor, window: int) -> torch.Tensor:
    pad = window // 2
    x = F.pad(x.unsqueeze(0), (pad, pad, pad, pad), mode="reflect")
    return F.avg_pool2d(x, window, stride=1)[0]


def ssim_map(x, y, cfg: PhotometricConfig = PhotometricConfig()) -> torch.Tensor:
    """Per-pixel SSIM from box-filter statistics; same shape as the inputs.

    Borders use reflection padding so the output keeps the input size.
    """
    x, y = as_tensor(x), as_tensor(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    squeeze = x.dim() == 2
    x, y = _channels(x), _channels(y)
    w = cfg.window
    mu_x = _box_mean(x, w)
    mu_y = _box_mean(y, w)
    sigma_x = _box_mean(x * x, w) - mu_x * mu_x
    sigma_y = _box_mean(y * y, w) - mu_y * mu_y
    sigma_xy = _box_mean(x * y, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + cfg.ssim_c1) * (2 * sigma_xy + cfg.ssim_c2)
    den = (mu_x * mu_x + mu_y * mu_y + cfg.ssim_c1) * (sigma_x + sigma_y + cfg.ssim_c2)
    out = num / den
    return out[0] if squeeze else out


def photometric_map(I_a, I_syn, cfg: PhotometricConfig = PhotometricConfig()) -> torch.Tensor:
    """Per-pixel ``lam*L1 + (1-lam)*(1-SSIM)/2``, channel-averaged, shape ``(H, W)``."""
    I_a, I_syn = _channels(as_tensor(I_a)), _channels(as_tensor(I_syn))
    l1 = (I_a - I_syn).abs().mean(0)
    dssim = ((1 - ssim_map(I_a, I_syn, cfg)) / 2).mean(0)
    return cfg.lam * l1 + (1 - cfg.lam) * dssim


def fill_invalid(I_syn, I_a, V) -> torch.Tensor:
    """Replace invalid synthesized pixels by the target's own values.

    Keeps out-of-view samples from polluting the SSIM windows of their
    valid neighbours.
    """
    V = as_tensor(V) > 0
    I_syn, I_a = as_tensor(I_syn), as_tensor(I_a)
    return torch.where(V, I_syn, I_a)


def masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    mask = as_tensor(mask)
    count = mask.sum()
    if float(count) == 0:
        raise EmptyValidSetError("empty valid set")
    return (values * mask).sum() / count


def photometric_loss(I_a, I_syn, V, cfg: PhotometricConfig = PhotometricConfig()):
    """Mean photometric error over valid pixels, plus the per-pixel map."""
    lp = photometric_map(I_a, I_syn, cfg)
    return masked_mean(lp, V), lp


def inconsistency(d_comp: torch.Tensor, d_interp: torch.Tensor, V) -> torch.Tensor:
    V = as_tensor(V) > 0
    denom = torch.where(V, d_comp + d_interp, torch.ones_like(d_comp))
    diff = (d_comp - d_interp).abs() / denom
    return torch.where(V, diff, torch.zeros_like(diff))


def depth_inconsistency(D_a, D_b, P_ab, K):
    """``|d_comp - d_interp| / (d_comp + d_interp)`` on valid pixels, 0 elsewhere.

    ``d_comp`` is the depth of each pixel of ``a`` after transforming into
    frame ``b``; ``d_interp`` is ``D_b`` sampled at the warp target.
    Returns ``(D_diff, V)``.
    """
    flow = compute_warp(D_a, P_ab, K)
    d_interp = bilinear_sample(as_tensor(D_b), flow)
    return inconsistency(flow.depth, d_interp, flow.valid), flow.valid


def self_mask(D_diff) -> torch.Tensor:
    return 1 - as_tensor(D_diff)


def geometry_loss(D_diff, V) -> torch.Tensor:
    return masked_mean(as_tensor(D_diff), V)


def weighted_photometric(lp_map, M_s, V) -> torch.Tensor:
    return masked_mean(as_tensor(M_s) * as_tensor(lp_map), V)


def _image_gradients(img: torch.Tensor):
    img = _channels(img)
    gx = (img[:, :, 1:] - img[:, :, :-1]).abs().mean(0)
    gy = (img[:, 1:, :] - img[:, :-1, :]).abs().mean(0)
    return gx, gy


def smoothness_loss(D_a, I_a) -> torch.Tensor:
    """Edge-aware smoothness, summed (not averaged) over pixels.

    Forward differences; the last column/row has no forward neighbour and
    contributes nothing in that direction.
    """
    D_a, I_a = as_tensor(D_a), as_tensor(I_a)
    gx_i, gy_i = _image_gradients(I_a)
    gx_d = D_a[:, 1:] - D_a[:, :-1]
    gy_d = D_a[1:, :] - D_a[:-1, :]
    return (torch.exp(-gx_i) * gx_d).pow(2).sum() + (torch.exp(-gy_i) * gy_d).pow(2).sum()


def min_reprojection_automask(
    I_a, reprojection_maps, raw_sources, cfg: PhotometricConfig = PhotometricConfig(), valids=None
):
    """Per-pixel minimum reprojection error and the stationary-pixel automask.

    ``reprojection_maps`` holds one per-pixel photometric map per warped
    source; ``raw_sources`` the unwarped source images.  A pixel is kept
    (automask 1) iff its best warped error is strictly below the best error
    against the raw sources.  Pixels invalid in a source (``valids``) never
    select that source.
    """
    if len(reprojection_maps) == 0 or len(raw_sources) == 0:
        raise ValueError("at least one source is required")
    maps = torch.stack([as_tensor(m) for m in reprojection_maps])
    if valids is not None:
        v = torch.stack([as_tensor(m) for m in valids]) > 0
        maps = torch.where(v, maps, torch.full_like(maps, float("inf")))
    best = maps.min(0).values
    identity = torch.stack([photometric_map(I_a, src, cfg) for src in raw_sources]).min(0).values
    automask = (best < identity).to(DTYPE)
    return best, automask


def total_selfsup(sample, weights: SelfSupWeights = SelfSupWeights(), cfg=None, *, depth_a=None,
                  depth_b=None, pose=None) -> LossReport:
    """Weighted self-supervised total on a :class:`~scdepth.synthetic.SceneSample`.

    Depths and pose default to the sample's ground truth.
    """
    from .objective import evaluate_report

    return evaluate_report(sample, weights.as_dict(), cfg, depth_a=depth_a, depth_b=depth_b, pose=pose)
