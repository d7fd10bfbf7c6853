import numpy as np
import pytest
import torch

from conftest import random_sample
from scdepth import objective as objective_mod
from scdepth.geometry import compute_warp
from scdepth.grad import (
    DepthField,
    DivergenceError,
    OptimizerConfig,
    check_objective_gradients,
    finite_diff_check,
    loss_with_gradients,
    optimize_depth,
)
from scdepth.objective import FULL_WEIGHTS, GradientError, Objective, ObjectiveConfig, ablation_weights


def test_finite_diff_quadratic():
    res = finite_diff_check(lambda x: (float(x[0] ** 2), 2 * x), [3.0], step=1e-5)
    assert abs(res.numeric[0] - 6.0) < 1e-8
    assert res.passed(1e-8)


def test_finite_diff_linear_is_exact():
    c = np.array([0.5, -2.0, 3.25])
    res = finite_diff_check(lambda x: (float(c @ x), c), np.array([1.0, 2.0, -1.0]))
    assert res.max_rel_error < 1e-9


def test_finite_diff_detects_wrong_gradient():
    res = finite_diff_check(lambda x: (float(x @ x), 2.1 * x), np.array([1.0, -2.0]))
    assert not res.passed(1e-4)


def test_depth_field_parametrisation():
    f = DepthField.from_depth(np.array([[2.0, 4.0]]))
    assert np.allclose(f.depth.numpy(), [[2.0, 4.0]])
    g = DepthField(torch.tensor([[100.0, 1e-6]], dtype=torch.float64)).clamped()
    assert np.allclose(g.depth.numpy(), [[0.1, 100.0]])
    with pytest.raises(ValueError):
        DepthField(torch.tensor([[np.nan]]))


def test_optimizer_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(method="sgd")
    with pytest.raises(ValueError):
        OptimizerConfig(learning_rate=0)
    with pytest.raises(ValueError):
        OptimizerConfig(max_iters=0)


@pytest.mark.parametrize("seed", [11, 12])
def test_full_objective_matches_finite_differences(seed):
    s = random_sample(seed, 6, 6)
    res = check_objective_gradients(s, {**FULL_WEIGHTS, "smoothness": 0.1}, step=1e-5, seed=0)
    assert res.passed(1e-4), res.max_rel_error


def test_gradient_wrt_inverse_depth_chain_rule():
    s = random_sample(3, 6, 6)
    w = ablation_weights(baseline=True)
    a, b = DepthField.from_depth(s.depth_a), DepthField.from_depth(s.depth_b)
    rep, dec = loss_with_gradients(s, a, b, s.pose, w, seed=0)
    obj = Objective(s, w)
    direct, _ = obj.evaluate(s.depth_a, s.depth_b, decisions=dec, seed=0)
    # dL/dx = dL/dD * dD/dx with D = 1/x
    want = -direct.grad_depth_a * torch.as_tensor(s.depth_a) ** 2
    assert torch.allclose(rep.grad_depth_a, want, rtol=1e-10, atol=1e-14)


def test_invalid_pixel_has_exactly_zero_gradient():
    s = random_sample(4, 8, 8)
    cfg = ObjectiveConfig(bidirectional=False)
    w = {"photometric": 1.0, "geometry": 0.5}
    far = np.array(s.depth_a)
    far[0, 0] = 0.05  # a near point swings far outside view b
    flow = compute_warp(far, s.pose, s.intrinsics)
    assert not bool(flow.valid[0, 0])
    rep, _ = Objective(s, w, cfg).evaluate(far, s.depth_b)
    assert rep.grad_depth_a[0, 0].item() == 0.0


def test_pose_gradient_step_reduces_loss(static_sample):
    _, s = static_sample
    obj = Objective(s, ablation_weights(baseline=True))
    delta = np.array([0.004, -0.003, 0.002, 0.03, -0.02, 0.02])
    rep, dec = obj.evaluate(s.depth_a, s.depth_b, delta, seed=0)
    g = rep.grad_pose.numpy()
    step = delta - 1e-4 * g / np.linalg.norm(g)
    after, _ = obj.evaluate(s.depth_a, s.depth_b, step, decisions=dec, seed=0, gradients=False)
    assert after.total < rep.total


def test_ground_truth_is_stationary_under_gradient_descent(static_sample):
    _, s = static_sample
    res = optimize_depth(
        s, DepthField.from_depth(s.depth_a), DepthField.from_depth(s.depth_b), s.pose,
        ablation_weights(), OptimizerConfig(method="gradient_descent", learning_rate=1e-4, max_iters=10),
    )
    h = res.history
    assert abs(h[-1] - h[0]) / h[0] < 1e-3


def test_gradient_descent_monotone_from_scaled_depth(static_sample):
    _, s = static_sample
    absrel = []

    def track(it, rep, da, db):
        absrel.append(float((np.abs(da.numpy() - s.depth_a) / s.depth_a).mean()))

    res = optimize_depth(
        s, DepthField.from_depth(s.depth_a * 1.3), DepthField.from_depth(s.depth_b * 1.3), s.pose,
        ablation_weights(baseline=True),
        OptimizerConfig(method="gradient_descent", learning_rate=1e-2, max_iters=30), callback=track,
    )
    assert (np.diff(res.history) <= 0).all()
    assert absrel[-1] < absrel[0]


def test_adam_is_deterministic():
    s = random_sample(5, 8, 8)
    init = DepthField.from_depth(np.full((8, 8), 3.0))

    def run():
        return optimize_depth(s, init, init, s.pose, FULL_WEIGHTS, OptimizerConfig(max_iters=5, seed=2))

    r1, r2 = run(), run()
    assert r1.history == r2.history
    assert torch.equal(r1.depth_a, r2.depth_a)


def test_divergence_reports_iteration():
    s = random_sample(6, 8, 8)
    init = DepthField.from_depth(s.depth_a)
    with pytest.raises(DivergenceError) as info:
        optimize_depth(s, init, init, s.pose, {"smoothness": 1e9}, OptimizerConfig(max_iters=3))
    assert info.value.iteration == 0
    assert "iteration 0" in str(info.value)


def test_non_finite_gradient_names_term(monkeypatch):
    s = random_sample(7, 6, 6)

    def broken(depth, image):
        return torch.sqrt(depth - depth).sum()

    monkeypatch.setattr(objective_mod, "smoothness_loss", broken)
    obj = Objective(s, {"geometry": 1.0, "smoothness": 1.0})
    with pytest.raises(GradientError, match="smoothness"):
        obj.evaluate(s.depth_a, s.depth_b)


def test_constant_scene_has_zero_photometric_depth_gradient():
    s = random_sample(8, 8, 8)
    flat = np.full((3, 8, 8), 0.4)
    s = type(s)(**{**s.__dict__, "image_a": flat, "image_b": flat})
    rep, _ = Objective(s, {"photometric": 1.0}, ObjectiveConfig(automask=False)).evaluate(s.depth_a, s.depth_b)
    # bilinear weights sum to one only up to rounding
    assert rep.total < 1e-12
    assert rep.grad_depth_a.abs().max() < 1e-12
    assert rep.grad_depth_b.abs().max() < 1e-12
