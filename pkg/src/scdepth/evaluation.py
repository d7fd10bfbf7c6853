"""Median-scaled depth metrics and full/dynamic/static region reports."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

# predictions are floored here before taking logs
MIN_DEPTH = 1e-3
LOW_CONFIDENCE_COUNT = 10


class EmptyRegionError(ValueError):
    pass


@dataclass
class MetricReport:
    abs_rel: float
    sq_rel: float
    rms: float
    rms_log: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int
    scale_applied: float
    min_depth_floor: float = MIN_DEPTH
    flags: list[str] = field(default_factory=list)

    @classmethod
    def empty(cls, scale: float = float("nan")) -> "MetricReport":
        nan = float("nan")
        return cls(nan, nan, nan, nan, nan, nan, nan, 0, scale, flags=["empty"])

    def as_dict(self) -> dict:
        return asdict(self)


def _valid_mask(gt, valid, cap):
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.ones(gt.shape, bool) if valid is None else np.asarray(valid) > 0
    mask &= gt > 0
    if cap is not None:
        mask &= gt <= cap
    return mask


def median_scale(pred, gt, valid=None) -> float:
    """``median(gt) / median(pred)`` over the valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.ones(gt.shape, bool) if valid is None else np.asarray(valid) > 0
    if not mask.any():
        raise EmptyRegionError("median scaling needs at least one valid pixel")
    p, g = pred[mask], gt[mask]
    if (p <= 0).any() or (g <= 0).any():
        raise ValueError("depths must be positive on the valid set")
    # np.median averages the two central order statistics for even counts
    return float(np.median(g) / np.median(p))


def _metrics(p: np.ndarray, g: np.ndarray, scale: float) -> MetricReport:
    if p.size == 0:
        return MetricReport.empty(scale)
    p_log = np.maximum(p, MIN_DEPTH)
    diff = p - g
    ratio = np.maximum(p_log / g, g / p_log)
    report = MetricReport(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rms=float(np.sqrt(np.mean(diff**2))),
        rms_log=float(np.sqrt(np.mean((np.log(p_log) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        n_valid=int(p.size),
        scale_applied=scale,
    )
    if p.size < LOW_CONFIDENCE_COUNT:
        report.flags.append("low_confidence")
    return report


def depth_metrics(pred, gt, valid=None, cap: float | None = None, median_scaling: bool = True) -> MetricReport:
    """Standard depth errors on pixels with ``0 < gt <= cap``.

    Raises:
        EmptyRegionError: when no pixel survives the mask and cap.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mask = _valid_mask(gt, valid, cap)
    if not mask.any():
        raise EmptyRegionError("no valid pixels after capping")
    scale = median_scale(pred, gt, mask) if median_scaling else 1.0
    return _metrics(pred[mask] * scale, gt[mask], scale)


def region_metrics(pred, gt, dynamic_mask=None, valid=None, cap: float | None = None,
                   median_scaling: bool = True) -> dict[str, MetricReport]:
    """Full, dynamic and static reports sharing one global median scale."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = _valid_mask(gt, valid, cap)
    if not mask.any():
        raise EmptyRegionError("no valid pixels after capping")
    scale = median_scale(pred, gt, mask) if median_scaling else 1.0
    scaled = pred * scale
    out = {"full": _metrics(scaled[mask], gt[mask], scale)}
    if dynamic_mask is None:
        return out
    dyn = np.asarray(dynamic_mask)
    if not np.isin(dyn, (0, 1)).all():
        raise ValueError("dynamic mask must be binary")
    dyn = dyn > 0
    for name, region in (("dynamic", mask & dyn), ("static", mask & ~dyn)):
        out[name] = _metrics(scaled[region], gt[region], scale)
    return out


METRIC_KEYS = ("abs_rel", "sq_rel", "rms", "rms_log", "delta1", "delta2", "delta3", "n_valid", "scale_applied")


def format_report(reports: dict[str, MetricReport], prefix: str = "") -> str:
    """Line-oriented ``region.key=value`` text."""
    lines = []
    for region, rep in reports.items():
        for k in METRIC_KEYS:
            v = getattr(rep, k)
            lines.append(f"{prefix}{region}.{k}={v!r}" if isinstance(v, float) else f"{prefix}{region}.{k}={v}")
        lines.append(f"{prefix}{region}.flags={','.join(rep.flags) or 'none'}")
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#") and "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out
