"""Gradient checking and direct depth-field optimisation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .geometry import DTYPE, PoseSE3, as_tensor, perturb_pose
from .objective import Objective, ObjectiveConfig
from .selfsup import LossReport


class DivergenceError(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"optimisation diverged at iteration {iteration} (loss={loss!r})")
        self.iteration = iteration
        self.loss = loss


@dataclass
class DepthField:
    """Per-pixel inverse-depth variables with depth bounds ``[d_min, d_max]``."""

    inv: torch.Tensor
    d_min: float = 0.1
    d_max: float = 100.0

    def __post_init__(self):
        if not 0 < self.d_min < self.d_max:
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        self.inv = as_tensor(self.inv).detach().clone()
        if not bool(torch.isfinite(self.inv).all()):
            raise ValueError("inverse-depth variables must be finite")

    @classmethod
    def from_depth(cls, depth, d_min: float = 0.1, d_max: float = 100.0) -> "DepthField":
        return cls(1.0 / as_tensor(depth), d_min, d_max)

    def realize(self, inv: torch.Tensor | None = None) -> torch.Tensor:
        inv = self.inv if inv is None else inv
        return 1.0 / inv.clamp(1.0 / self.d_max, 1.0 / self.d_min)

    @property
    def depth(self) -> torch.Tensor:
        return self.realize()

    def clamped(self) -> "DepthField":
        return DepthField(self.inv.clamp(1.0 / self.d_max, 1.0 / self.d_min), self.d_min, self.d_max)


@dataclass(frozen=True)
class OptimizerConfig:
    method: str = "adam"
    learning_rate: float = 1e-2
    pose_learning_rate: float = 1e-3
    max_iters: int = 500
    convergence_tol: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    optimize_pose: bool = True

    def __post_init__(self):
        if self.method not in ("adam", "gradient_descent"):
            raise ValueError(f"unknown optimiser {self.method!r}")
        if self.learning_rate <= 0 or self.pose_learning_rate < 0:
            raise ValueError("learning rates must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.convergence_tol < 0:
            raise ValueError("convergence_tol must be non-negative")


def loss_with_gradients(sample, depth_a: DepthField, depth_b: DepthField, pose: PoseSE3,
                        weights: dict[str, float], cfg: ObjectiveConfig | None = None,
                        decisions=None, seed: int | None = None, objective: Objective | None = None):
    """Loss report with gradients w.r.t. the inverse-depth variables and the pose update.

    Returns ``(report, decisions)``.  Sampling decisions are recomputed unless
    passed in.
    """
    obj = objective or Objective(sample, weights, cfg)
    x_a = depth_a.inv.clone().requires_grad_(True)
    x_b = depth_b.inv.clone().requires_grad_(True)
    D_a = depth_a.realize(x_a)
    D_b = depth_b.realize(x_b)
    report, decisions = obj.evaluate(D_a.detach(), D_b.detach(), decisions=decisions, seed=seed, pose=pose)
    # chain rule through the inverse-depth parametrisation
    (g_a,) = torch.autograd.grad(D_a, x_a, report.grad_depth_a)
    (g_b,) = torch.autograd.grad(D_b, x_b, report.grad_depth_b)
    report.grad_depth_a, report.grad_depth_b = g_a, g_b
    return report, decisions


@dataclass
class FiniteDiffResult:
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray
    worst_index: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def finite_diff_check(loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]], x,
                      step: float = 1e-5, indices=None,
                      value_fn: Callable[[np.ndarray], float] | None = None) -> FiniteDiffResult:
    """Compare ``loss_fn``'s analytic gradient with central differences.

    ``loss_fn(x)`` returns ``(value, gradient)`` for a flat float64 vector;
    ``value_fn``, if given, is a cheaper value-only version used for the
    difference quotients.  The relative error per entry is
    ``|a - n| / max(|a|, |n|, 1e-12)``.
    """
    value_fn = value_fn or (lambda z: loss_fn(z)[0])
    x = np.array(x, dtype=np.float64).reshape(-1)
    _, g = loss_fn(x)
    analytic = np.asarray(g, dtype=np.float64).reshape(-1)
    idx = np.arange(x.size) if indices is None else np.asarray(indices)
    numeric = np.empty(idx.size)
    for k, i in enumerate(idx):
        xp = x.copy()
        xp[i] += step
        xm = x.copy()
        xm[i] -= step
        numeric[k] = (value_fn(xp) - value_fn(xm)) / (2 * step)
    a = analytic[idx]
    rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
    worst = int(np.argmax(rel)) if rel.size else 0
    return FiniteDiffResult(float(rel.max()) if rel.size else 0.0, a, numeric, int(idx[worst]) if rel.size else -1)


def check_objective_gradients(sample, weights: dict[str, float], cfg: ObjectiveConfig | None = None,
                              step: float = 1e-5, seed: int | None = None, pose_delta=None,
                              fault: float = 0.0) -> FiniteDiffResult:
    """Finite-difference check of one weighted objective on ``sample``.

    Variables are every pixel of both depth maps followed by the six pose
    update parameters.  Decisions are frozen at the evaluation point.
    ``fault`` adds a relative error to the analytic gradient (test hook).
    """
    obj = Objective(sample, weights, cfg)
    D_a0 = as_tensor(sample.depth_a)
    D_b0 = as_tensor(sample.depth_b)
    delta0 = np.zeros(6) if pose_delta is None else np.asarray(pose_delta, dtype=np.float64)
    _, decisions = obj.evaluate(D_a0, D_b0, delta0, seed=seed, gradients=False)
    n_a, n_b = D_a0.numel(), D_b0.numel()

    def split(x):
        x = torch.from_numpy(x)
        return x[:n_a].reshape(D_a0.shape), x[n_a:n_a + n_b].reshape(D_b0.shape), x[n_a + n_b:]

    def fn(x):
        da, db, dp = split(x)
        rep, _ = obj.evaluate(da, db, dp, decisions=decisions, seed=seed)
        g = torch.cat([rep.grad_depth_a.reshape(-1), rep.grad_depth_b.reshape(-1), rep.grad_pose])
        return rep.total, g.numpy() * (1.0 + fault)

    def value(x):
        da, db, dp = split(x)
        with torch.no_grad():
            R0, t0 = obj.pose0.tensors()
            R, t = perturb_pose(R0, t0, dp)
            terms, _ = obj.terms(da, db, R, t, decisions, seed)
            return float(obj.total(terms))

    x0 = np.concatenate([D_a0.numpy().reshape(-1), D_b0.numpy().reshape(-1), delta0])
    return finite_diff_check(fn, x0, step, value_fn=value)


@dataclass
class OptimizationResult:
    depth_a: torch.Tensor
    depth_b: torch.Tensor
    pose: PoseSE3
    history: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False


def optimize_depth(sample, init_a: DepthField, init_b: DepthField, init_pose: PoseSE3,
                   weights: dict[str, float], cfg: OptimizerConfig = OptimizerConfig(),
                   objective_cfg: ObjectiveConfig | None = None,
                   callback: Callable[[int, LossReport, torch.Tensor, torch.Tensor], None] | None = None
                   ) -> OptimizationResult:
    """First-order fitting of both inverse-depth fields and the relative pose.

    Adam redraws the samplers each iteration (seed ``cfg.seed + it``).
    Gradient descent freezes the decisions made at the initial point, so it
    minimises one fixed smooth function; backtracking then keeps the loss
    history nonincreasing.
    """
    obj = Objective(sample, weights, objective_cfg)
    a, b, pose = init_a.clamped(), init_b.clamped(), init_pose
    lo, hi = 1.0 / a.d_max, 1.0 / a.d_min
    history: list[float] = []
    m = [torch.zeros_like(a.inv), torch.zeros_like(b.inv), torch.zeros(6, dtype=DTYPE)]
    v = [torch.zeros_like(a.inv), torch.zeros_like(b.inv), torch.zeros(6, dtype=DTYPE)]
    converged = False
    it = 0
    report, frozen = loss_with_gradients(sample, a, b, pose, weights, seed=cfg.seed, objective=obj)
    for it in range(cfg.max_iters):
        _check(it, report.total)
        history.append(report.total)
        if callback is not None:
            callback(it, report, a.depth, b.depth)
        grads = [report.grad_depth_a, report.grad_depth_b, report.grad_pose]
        if not cfg.optimize_pose:
            grads[2] = torch.zeros_like(grads[2])
        if cfg.method == "adam":
            steps = []
            for k, g in enumerate(grads):
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * g * g
                mh = m[k] / (1 - cfg.beta1 ** (it + 1))
                vh = v[k] / (1 - cfg.beta2 ** (it + 1))
                lr = cfg.learning_rate if k < 2 else cfg.pose_learning_rate
                steps.append(lr * mh / (vh.sqrt() + cfg.eps))
            a = DepthField((a.inv - steps[0]).clamp(lo, hi), a.d_min, a.d_max)
            b = DepthField((b.inv - steps[1]).clamp(lo, hi), b.d_min, b.d_max)
            pose = pose.perturbed((-steps[2]).numpy())
            report, _ = loss_with_gradients(sample, a, b, pose, weights, seed=cfg.seed + it + 1, objective=obj)
        else:
            report, a, b, pose, accepted = _backtrack(obj, sample, weights, cfg, a, b, pose, grads,
                                                      report, lo, hi, frozen)
            if not accepted:
                converged = True
                break
        prev = history[-1]
        if cfg.convergence_tol > 0 and abs(prev - report.total) <= cfg.convergence_tol * max(abs(prev), 1e-30):
            converged = True
            history.append(report.total)
            break
    else:
        _check(cfg.max_iters, report.total)
    return OptimizationResult(a.depth, b.depth, pose, history, it + 1, converged)


def _check(it: int, loss: float) -> None:
    if not math.isfinite(loss) or loss > 1e6:
        raise DivergenceError(it, loss)


def _backtrack(obj, sample, weights, cfg, a, b, pose, grads, report, lo, hi, frozen, shrink=0.5, tries=40):
    lr = cfg.learning_rate
    plr = cfg.pose_learning_rate
    for _ in range(tries):
        na = DepthField((a.inv - lr * grads[0]).clamp(lo, hi), a.d_min, a.d_max)
        nb = DepthField((b.inv - lr * grads[1]).clamp(lo, hi), b.d_min, b.d_max)
        npose = pose.perturbed((-plr * grads[2]).numpy())
        new, _ = loss_with_gradients(sample, na, nb, npose, weights, decisions=frozen, objective=obj)
        if math.isfinite(new.total) and new.total <= report.total:
            return new, na, nb, npose, True
        lr *= shrink
        plr *= shrink
    return report, a, b, pose, False


__all__ = [
    "DepthField",
    "OptimizerConfig",
    "OptimizationResult",
    "FiniteDiffResult",
    "DivergenceError",
    "loss_with_gradients",
    "finite_diff_check",
    "check_objective_gradients",
    "optimize_depth",
]
