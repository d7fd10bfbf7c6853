"""Combined two-view objective with frozen sampling decisions and autograd gradients.

Every term is evaluated in both warping directions (``a -> b`` with
``P_ab`` and ``b -> a`` with its inverse) and averaged, so both depth maps
are constrained.  Discrete choices made at an evaluation point (validity
mask, automask, the self-discovered mask used for ranking, sampled pairs)
are collected in :class:`Decisions`.  They can be passed back in to hold
them fixed, which is what finite-difference checks need.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .geometry import (
    DTYPE,
    CameraIntrinsics,
    PoseSE3,
    as_tensor,
    bilinear_sample,
    compute_warp,
    invert_pose,
    perturb_pose,
)
from .priors import (
    EdgeSamplingConfig,
    EmptyPairSetWarning,
    PointPairSet,
    RankingConfig,
    cdr_loss,
    confident_pairs,
    dynamic_focused_sampling,
    edge_guided_sampling,
    ern_loss,
    normal_matching_loss,
    normals_from_depth,
)
from .selfsup import (
    LossReport,
    PhotometricConfig,
    fill_invalid,
    inconsistency,
    masked_mean,
    photometric_map,
    smoothness_loss,
)

TERMS = ("photometric", "weighted_photometric", "geometry", "smoothness", "normal", "cdr", "ern")
PRIOR_TERMS = ("normal", "cdr", "ern")

BASELINE_WEIGHTS = {"weighted_photometric": 1.0, "geometry": 0.5, "smoothness": 0.1}
FULL_WEIGHTS = {"weighted_photometric": 1.0, "geometry": 0.5, "normal": 0.1, "cdr": 0.1, "ern": 0.1}


def ablation_weights(baseline: bool = False, no_drr: bool = False, no_lsr: bool = False,
                     base: dict[str, float] | None = None) -> dict[str, float]:
    """Term weights for the named ablation.

    ``no_lsr`` drops both structure terms and restores the smoothness term
    they replace.
    """
    if baseline:
        return dict(BASELINE_WEIGHTS)
    w = dict(FULL_WEIGHTS if base is None else base)
    if no_drr:
        w["cdr"] = 0.0
    if no_lsr:
        w["normal"] = 0.0
        w["ern"] = 0.0
        w["smoothness"] = BASELINE_WEIGHTS["smoothness"]
    return w


class GradientError(FloatingPointError):
    """Raised when a gradient is not finite; the message names the term."""


@dataclass(frozen=True)
class ObjectiveConfig:
    photometric: PhotometricConfig = PhotometricConfig()
    ranking: RankingConfig = RankingConfig()
    edge: EdgeSamplingConfig = EdgeSamplingConfig()
    bidirectional: bool = True
    automask: bool = True
    detach_mask: bool = True
    detach_computed_depth: bool = False
    seed: int = 0


@dataclass
class ViewDecisions:
    valid: torch.Tensor
    automask: torch.Tensor
    mask: torch.Tensor
    drr_pairs: PointPairSet | None
    edge_pairs: PointPairSet | None
    flags: list[str] = field(default_factory=list)


@dataclass
class Decisions:
    """Per-direction frozen choices; ``views[0]`` is ``a -> b``."""

    views: list[ViewDecisions]


@dataclass
class _View:
    image: torch.Tensor
    pseudo: torch.Tensor | None
    normals_star: torch.Tensor | None


class Objective:
    """Loss evaluator bound to one two-view sample and a weight map."""

    def __init__(self, sample, weights: dict[str, float], cfg: ObjectiveConfig | None = None):
        self.cfg = cfg or ObjectiveConfig()
        unknown = set(weights) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms: {sorted(unknown)}")
        if any(w < 0 for w in weights.values()):
            raise ValueError("loss weights must be non-negative")
        self.weights = {k: float(weights.get(k, 0.0)) for k in TERMS}
        self.K: CameraIntrinsics = sample.intrinsics
        self.pose0: PoseSE3 = sample.pose
        self.views = [
            self._view(sample.image_a, getattr(sample, "pseudo_a", None)),
            self._view(sample.image_b, getattr(sample, "pseudo_b", None)),
        ]
        pc = self.cfg.photometric
        # error against the unwarped source, constant in every variable
        self.identity_maps = [
            photometric_map(self.views[0].image, self.views[1].image, pc),
            photometric_map(self.views[1].image, self.views[0].image, pc),
        ]

    def _view(self, image, pseudo) -> _View:
        image = as_tensor(image)
        if pseudo is None:
            return _View(image, None, None)
        pseudo = as_tensor(pseudo)
        n_star, _ = normals_from_depth(pseudo, self.K)
        return _View(image, pseudo, n_star)

    @property
    def directions(self) -> tuple[int, ...]:
        return (0, 1) if self.cfg.bidirectional else (0,)

    def _needs_priors(self) -> bool:
        return any(self.weights[k] > 0 for k in PRIOR_TERMS)

    def terms(self, depth_a, depth_b, rotation, translation, decisions: Decisions | None = None,
              seed: int | None = None) -> tuple[dict[str, torch.Tensor], Decisions]:
        """Per-term values (direction-averaged) and the decisions used."""
        seed = self.cfg.seed if seed is None else seed
        depths = (depth_a, depth_b)
        poses = ((rotation, translation), invert_pose(rotation, translation))
        acc: dict[str, list[torch.Tensor]] = {k: [] for k in TERMS}
        made = []
        for i in self.directions:
            j = 1 - i
            dec = None if decisions is None else decisions.views[i]
            vals, dec = self._direction(i, depths[i], depths[j], poses[i], dec, seed * 2 + i)
            made.append(dec)
            for k, v in vals.items():
                acc[k].append(v)
        out = {k: torch.stack(v).mean() for k, v in acc.items() if v}
        return out, Decisions(made) if decisions is None else decisions

    def _direction(self, i, D_t, D_s, pose, dec: ViewDecisions | None, seed: int):
        cfg = self.cfg
        tgt, src = self.views[i], self.views[1 - i]
        flow = compute_warp(D_t, pose, self.K)
        d_interp = bilinear_sample(D_s, flow)
        d_comp = flow.depth.detach() if cfg.detach_computed_depth else flow.depth
        if dec is None:
            valid = flow.valid > 0
        else:
            valid = dec.valid
        D_diff = inconsistency(d_comp, d_interp, valid)
        mask_live = 1 - D_diff
        I_syn = fill_invalid(bilinear_sample(src.image, flow), tgt.image, valid)
        lp = photometric_map(tgt.image, I_syn, cfg.photometric)

        if dec is None:
            if cfg.automask:
                automask = (lp.detach() < self.identity_maps[i]) & valid
            else:
                automask = valid.clone()
            M_s = mask_live.detach()
            dec = ViewDecisions(valid, automask, M_s, None, None)
            if self._needs_priors() and tgt.pseudo is not None:
                rank_cfg = replace(cfg.ranking, seed=cfg.ranking.seed + seed)
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", EmptyPairSetWarning)
                    pairs = dynamic_focused_sampling(M_s, rank_cfg)
                    dec.drr_pairs = confident_pairs(tgt.pseudo, pairs, cfg.ranking.tau)
                    dec.edge_pairs = edge_guided_sampling(
                        tgt.image, seed=cfg.edge.seed + seed, cfg=cfg.edge
                    )
                dec.flags.extend(str(w.message) for w in caught)

        weight = dec.mask if cfg.detach_mask else mask_live
        photo_set = dec.automask.to(DTYPE)
        vals = {
            "photometric": masked_mean(lp, photo_set),
            "weighted_photometric": masked_mean(weight * lp, photo_set),
            "geometry": masked_mean(D_diff, valid.to(DTYPE)),
            "smoothness": smoothness_loss(D_t, tgt.image),
        }
        if tgt.pseudo is not None and self._needs_priors():
            n, _ = normals_from_depth(D_t, self.K)
            vals["normal"] = normal_matching_loss(n, tgt.normals_star)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", EmptyPairSetWarning)
                vals["cdr"] = cdr_loss(D_t, tgt.pseudo, dec.drr_pairs, cfg.ranking)
                vals["ern"] = ern_loss(n, tgt.normals_star, dec.edge_pairs)
        return vals, dec

    def total(self, terms: dict[str, torch.Tensor]) -> torch.Tensor:
        out = None
        for k in TERMS:
            w = self.weights[k]
            if w == 0 or k not in terms:
                continue
            out = w * terms[k] if out is None else out + w * terms[k]
        if out is None:
            raise ValueError("no active loss term")
        return out

    def evaluate(self, depth_a, depth_b, pose_delta=None, decisions: Decisions | None = None,
                 seed: int | None = None, pose: PoseSE3 | None = None,
                 gradients: bool = True) -> tuple[LossReport, Decisions]:
        """Loss report with gradients w.r.t. both depth maps and a local pose update.

        The pose is ``pose`` (default: the sample's) perturbed by
        ``pose_delta`` = (axis-angle, translation); the pose gradient is taken
        at that delta.
        """
        pose = self.pose0 if pose is None else pose
        R0, t0 = pose.tensors()
        D_a = as_tensor(depth_a).detach().clone().requires_grad_(gradients)
        D_b = as_tensor(depth_b).detach().clone().requires_grad_(gradients)
        delta = torch.zeros(6, dtype=DTYPE) if pose_delta is None else as_tensor(pose_delta).detach().clone()
        delta.requires_grad_(gradients)
        R, t = perturb_pose(R0, t0, delta)
        terms, decisions = self.terms(D_a, D_b, R, t, decisions, seed)
        total = self.total(terms)
        per_term = {k: float(v.detach()) for k, v in terms.items()}
        flags = [f for v in decisions.views for f in v.flags]
        report = LossReport(float(total.detach()), per_term, {k: self.weights[k] for k in per_term}, flags=flags)
        if gradients:
            ga, gb, gp = torch.autograd.grad(total, (D_a, D_b, delta), allow_unused=True)
            ga = torch.zeros_like(D_a) if ga is None else ga
            gb = torch.zeros_like(D_b) if gb is None else gb
            gp = torch.zeros_like(delta) if gp is None else gp
            if not all(bool(torch.isfinite(g).all()) for g in (ga, gb, gp)):
                raise GradientError(self._blame(depth_a, depth_b, delta.detach(), pose, decisions, seed))
            report.grad_depth_a, report.grad_depth_b, report.grad_pose = ga, gb, gp
        return report, decisions

    def _blame(self, depth_a, depth_b, delta, pose, decisions, seed) -> str:
        R0, t0 = pose.tensors()
        bad = []
        for name in TERMS:
            if self.weights[name] == 0:
                continue
            D_a = as_tensor(depth_a).detach().clone().requires_grad_(True)
            D_b = as_tensor(depth_b).detach().clone().requires_grad_(True)
            d = delta.clone().requires_grad_(True)
            R, t = perturb_pose(R0, t0, d)
            terms, _ = self.terms(D_a, D_b, R, t, decisions, seed)
            if name not in terms:
                continue
            grads = torch.autograd.grad(terms[name], (D_a, D_b, d), allow_unused=True)
            if any(g is not None and not bool(torch.isfinite(g).all()) for g in grads):
                bad.append(name)
        return f"non-finite gradient in term(s): {', '.join(bad) or 'unknown'}"


def evaluate_report(sample, weights: dict[str, float], cfg: ObjectiveConfig | None = None, *,
                    depth_a=None, depth_b=None, pose: PoseSE3 | None = None) -> LossReport:
    """One-shot evaluation; depths and pose default to the sample's ground truth."""
    obj = Objective(sample, weights, cfg)
    depth_a = sample.depth_a if depth_a is None else depth_a
    depth_b = sample.depth_b if depth_b is None else depth_b
    report, _ = obj.evaluate(depth_a, depth_b, pose=pose)
    return report


__all__ = [
    "TERMS",
    "BASELINE_WEIGHTS",
    "FULL_WEIGHTS",
    "ablation_weights",
    "GradientError",
    "ObjectiveConfig",
    "Decisions",
    "ViewDecisions",
    "Objective",
    "evaluate_report",
]
