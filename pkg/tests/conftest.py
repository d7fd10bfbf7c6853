import numpy as np
import pytest
import torch
from scipy import ndimage

from scdepth.geometry import CameraIntrinsics, PoseSE3
from scdepth.synthetic import SceneSample

torch.set_num_threads(1)


def random_sample(seed: int, height: int = 8, width: int = 8) -> SceneSample:
    """Small random two-view sample: smooth random images, random depths and pose."""
    rng = np.random.default_rng(seed)
    K = CameraIntrinsics(8.0, 8.0, (width - 1) / 2, (height - 1) / 2, width, height)

    def image():
        noise = ndimage.gaussian_filter(rng.uniform(0, 1, (3, height, width)), (0, 0.8, 0.8))
        return np.clip(noise * 2 - 0.5, 0, 1)

    pose = PoseSE3.from_vector(np.r_[rng.normal(0, 0.02, 3), rng.normal(0, 0.08, 3)])
    zeros = np.zeros((height, width))
    return SceneSample(
        image_a=image(),
        image_b=image(),
        depth_a=rng.uniform(2, 4, (height, width)),
        depth_b=rng.uniform(2, 4, (height, width)),
        pose=pose,
        intrinsics=K,
        dynamic_a=zeros,
        dynamic_b=zeros,
        pseudo_a=rng.uniform(1, 5, (height, width)),
        pseudo_b=rng.uniform(1, 5, (height, width)),
        normals_a=np.zeros((height, width, 3)),
    )


@pytest.fixture(scope="session")
def static_sample():
    from scdepth.synthetic import render_scene, static_scene

    cfg = static_scene()
    return cfg, render_scene(cfg)


@pytest.fixture(scope="session")
def dynamic_sample():
    from scdepth.synthetic import default_scene, render_scene

    cfg = default_scene()
    return cfg, render_scene(cfg)


@pytest.fixture
def record_criterion(request):
    """Log one PASS/FAIL line for the acceptance summary, then assert."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        log = request.config.stash.setdefault(_ACCEPTANCE, {})
        log[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        print(log[number])
        assert ok, f"criterion {number} failed: {detail}"

    return record


_ACCEPTANCE = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = config.stash.get(_ACCEPTANCE, {})
    if log:
        terminalreporter.section("acceptance criteria")
        for k in sorted(log):
            terminalreporter.write_line(log[k])
