"""Command-line entry point: synth, inspect-loss, gradcheck, train, eval."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .evaluation import EmptyRegionError, format_report, region_metrics
from .geometry import CameraIntrinsics, PoseSE3
from .grad import DepthField, DivergenceError, OptimizerConfig, check_objective_gradients, optimize_depth
from .gridio import GridFormatError, read_grid, write_grid
from .objective import BASELINE_WEIGHTS, TERMS, Objective, ablation_weights
from .priors import normal_matching_loss, normals_from_depth
from .synthetic import PRESETS, PseudoDepthAuditError, SceneSample, render_scene

EXIT_USAGE = 2
EXIT_FAILED = 1
EXIT_DIVERGED = 3

# grid files of a scene directory: name -> (attribute, channels-first layout)
SCENE_FILES = {
    "image_a": ("image_a", True),
    "image_b": ("image_b", True),
    "depth_a": ("depth_a", False),
    "depth_b": ("depth_b", False),
    "dynamic_a": ("dynamic_a", False),
    "dynamic_b": ("dynamic_b", False),
    "pseudo_a": ("pseudo_a", False),
    "pseudo_b": ("pseudo_b", False),
    "normals_a": ("normals_a", False),
}
GRID_SUFFIX = ".scdg"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_FAILED):
        super().__init__(message)
        self.code = code


def _fmt(x: float) -> str:
    return repr(float(x))


def _config(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


# ------------------------------------------------------------------ scene io ---

def save_scene(sample: SceneSample, out: Path, seed: int, preset: str, png: bool = False) -> None:
    out.mkdir(parents=True, exist_ok=True)
    lines = ["format=scdepth-scene", "version=1", f"seed={seed}", f"preset={preset}"]
    K = sample.intrinsics
    lines += [f"width={K.width}", f"height={K.height}", f"fx={_fmt(K.fx)}", f"fy={_fmt(K.fy)}",
              f"cx={_fmt(K.cx)}", f"cy={_fmt(K.cy)}"]
    lines.append("rotation=" + " ".join(_fmt(v) for v in sample.pose.rotation.reshape(-1)))
    lines.append("translation=" + " ".join(_fmt(v) for v in sample.pose.translation))
    for name, (attr, cf) in SCENE_FILES.items():
        fname = name + GRID_SUFFIX
        write_grid(out / fname, getattr(sample, attr), channels_first=cf)
        lines.append(f"file.{name}={fname}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    if png:
        for name in ("depth_a", "depth_b", "pseudo_a"):
            export_png(getattr(sample, name), out / f"{name}.png")


def _read_manifest(scene: Path) -> dict[str, str]:
    path = scene / "manifest.txt"
    if not path.is_file():
        raise CliError(f"missing scene file: {path}")
    out = {}
    for line in path.read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


def load_scene(scene) -> SceneSample:
    scene = Path(scene)
    m = _read_manifest(scene)
    try:
        K = CameraIntrinsics(float(m["fx"]), float(m["fy"]), float(m["cx"]), float(m["cy"]),
                             int(m["width"]), int(m["height"]))
        R = np.array([float(v) for v in m["rotation"].split()]).reshape(3, 3)
        t = np.array([float(v) for v in m["translation"].split()])
    except KeyError as exc:
        raise CliError(f"{scene / 'manifest.txt'}: missing key {exc.args[0]}") from None
    grids = {}
    for name, (attr, cf) in SCENE_FILES.items():
        fname = m.get(f"file.{name}")
        if fname is None:
            if name in ("pseudo_b", "dynamic_b", "normals_a", "dynamic_a"):
                grids[attr] = None
                continue
            raise CliError(f"{scene / 'manifest.txt'}: no entry for {name}")
        path = scene / fname
        if not path.is_file():
            raise CliError(f"missing scene file: {path}")
        grids[attr] = read_grid(path, channels_first=cf)
    H, W = K.height, K.width
    if grids["dynamic_a"] is None:
        grids["dynamic_a"] = np.zeros((H, W))
    if grids["dynamic_b"] is None:
        grids["dynamic_b"] = np.zeros((H, W))
    if grids["normals_a"] is None:
        grids["normals_a"] = np.zeros((H, W, 3))
    return SceneSample(pose=PoseSE3(R, t), intrinsics=K, **grids)


def export_png(grid, path: Path) -> None:
    """16-bit min-max normalised PNG plus a ``.range.txt`` sidecar."""
    from PIL import Image

    g = np.asarray(grid, dtype=np.float64)
    lo, hi = float(g.min()), float(g.max())
    scaled = np.zeros_like(g) if hi == lo else (g - lo) / (hi - lo)
    Image.fromarray(np.round(scaled * 65535).astype(np.uint16)).save(path)
    path.with_suffix(".range.txt").write_text(f"min={_fmt(lo)}\nmax={_fmt(hi)}\n")


def _depth_arg(value: str, fallback: np.ndarray, label: str) -> np.ndarray:
    if value == "gt":
        return fallback
    path = Path(value)
    if not path.is_file():
        raise CliError(f"missing {label} file: {path}")
    return read_grid(path)


# ---------------------------------------------------------------- commands ---

def cmd_synth(args) -> int:
    cfg = _config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    sc = cfg.scene
    preset = args.preset or sc.preset
    if preset not in PRESETS:
        raise CliError(f"unknown preset {preset!r}", EXIT_USAGE)
    scene_cfg = PRESETS[preset](width=sc.width, height=sc.height, seed=seed, noise=sc.noise)
    scene_cfg = dataclasses.replace(scene_cfg, supersample=sc.supersample, blur=sc.blur)
    sample = render_scene(scene_cfg, dataclasses.replace(cfg.pseudo, seed=cfg.pseudo.seed + seed))
    save_scene(sample, Path(args.out), seed, preset, png=args.png)
    print(f"wrote {len(SCENE_FILES)} grids and manifest.txt to {args.out}")
    return 0


def _weights_for(cfg: RunConfig, ablate: str) -> dict[str, float]:
    if ablate == "baseline":
        return dict(BASELINE_WEIGHTS)
    return ablation_weights(no_drr=ablate == "no-drr", no_lsr=ablate == "no-lsr", base=cfg.weights)


def cmd_inspect_loss(args) -> int:
    cfg = _config(args.config)
    sample = load_scene(args.scene)
    D_a = _depth_arg(args.depth_a, sample.depth_a, "depth")
    D_b = _depth_arg(args.depth_b, sample.depth_b, "depth")
    weights = _weights_for(cfg, args.ablate)
    obj = Objective(sample, weights, cfg.objective_config())
    report, decisions = obj.evaluate(D_a, D_b, gradients=False)
    print(f"ablate={args.ablate}")
    for k in TERMS:
        if k in report.per_term:
            print(f"term.{k}={_fmt(report.per_term[k])}")
    for k in TERMS:
        print(f"weight.{k}={_fmt(obj.weights[k])}")
    print(f"total={_fmt(report.total)}")
    for flag in report.flags:
        print(f"flag={flag}")
    if args.maps:
        _write_maps(obj, sample, D_a, D_b, Path(args.maps))
    return 0


def _write_maps(obj: Objective, sample, D_a, D_b, out: Path) -> None:
    from .geometry import as_tensor, bilinear_sample, compute_warp
    from .selfsup import fill_invalid, inconsistency, photometric_map

    out.mkdir(parents=True, exist_ok=True)
    flow = compute_warp(D_a, sample.pose, sample.intrinsics)
    I_syn = fill_invalid(bilinear_sample(as_tensor(sample.image_b), flow), sample.image_a, flow.valid)
    lp = photometric_map(sample.image_a, I_syn, obj.cfg.photometric)
    dd = inconsistency(flow.depth, bilinear_sample(as_tensor(D_b), flow), flow.valid)
    write_grid(out / ("photometric_a" + GRID_SUFFIX), lp.numpy())
    write_grid(out / ("depth_inconsistency_a" + GRID_SUFFIX), dd.numpy())
    write_grid(out / ("valid_a" + GRID_SUFFIX), flow.valid.numpy())


def cmd_gradcheck(args) -> int:
    cfg = _config(args.config)
    sample = load_scene(args.scene)
    H, W = sample.depth_a.shape
    size = min(args.crop, H, W)
    y0, x0 = (H - size) // 2, (W - size) // 2
    sample = sample.crop(x0, y0, size, size)
    # move off ground truth, where the L1 normal terms sit on their kink
    rng = np.random.default_rng(cfg.seed)
    sample = dataclasses.replace(
        sample,
        depth_a=sample.depth_a * rng.uniform(0.9, 1.1, sample.depth_a.shape),
        depth_b=sample.depth_b * rng.uniform(0.9, 1.1, sample.depth_b.shape),
    )
    delta = rng.normal(0.0, 1e-3, 6)
    terms = list(TERMS) + ["total"]
    failed = []
    ocfg = cfg.objective_config()
    for term in terms:
        weights = dict(cfg.weights) if term == "total" else {term: 1.0}
        res = check_objective_gradients(sample, weights, ocfg, step=args.step, seed=cfg.seed,
                                        pose_delta=delta, fault=args.inject_fault)
        ok = res.max_rel_error < args.tol
        print(f"{term}.max_rel_error={res.max_rel_error:.3e} {'pass' if ok else 'FAIL'}")
        if not ok:
            failed.append(term)
    print(f"result={'pass' if not failed else 'fail'}")
    return 0 if not failed else EXIT_FAILED


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    opt = cfg.optimizer
    if args.iters is not None:
        opt = dataclasses.replace(opt, max_iters=args.iters)
    if args.lr is not None:
        opt = dataclasses.replace(opt, learning_rate=args.lr)
    if sum([args.baseline, args.no_drr or args.no_lsr]) > 1:
        raise CliError("--baseline cannot be combined with --no-drr/--no-lsr", EXIT_USAGE)
    sample = load_scene(args.scene)
    if args.baseline:
        weights = dict(BASELINE_WEIGHTS)
    else:
        weights = ablation_weights(no_drr=args.no_drr, no_lsr=args.no_lsr, base=cfg.weights)
    init = np.full(sample.depth_a.shape, cfg.train.init_depth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        res = optimize_depth(sample, DepthField.from_depth(init), DepthField.from_depth(init), sample.pose,
                             weights, opt, cfg.objective_config())
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    D_a = res.depth_a.numpy()
    D_b = res.depth_b.numpy()
    write_grid(out / ("depth_a" + GRID_SUFFIX), D_a)
    write_grid(out / ("depth_b" + GRID_SUFFIX), D_b)
    (out / "history.txt").write_text(
        "".join(f"iter={i} loss={_fmt(v)}\n" for i, v in enumerate(res.history))
    )
    reports = region_metrics(D_a, sample.depth_a, sample.dynamic_a, cap=cfg.eval.cap)
    text = format_report(reports)
    n_pred, _ = normals_from_depth(D_a, sample.intrinsics)
    text += f"normal_error={_fmt(normal_matching_loss(n_pred, sample.normals_a))}\n"
    text += "pose.vector=" + " ".join(_fmt(v) for v in res.pose.to_vector()) + "\n"
    text += "weights=" + ",".join(f"{k}:{_fmt(v)}" for k, v in sorted(weights.items())) + "\n"
    (out / "metrics.txt").write_text(text)
    print(text, end="")
    return 0


def cmd_eval(args) -> int:
    pred = _depth_arg(args.pred, None, "prediction")
    gt = _depth_arg(args.gt, None, "ground-truth")
    mask = None
    if args.mask:
        mask = _depth_arg(args.mask, None, "mask")
    else:
        print("notice=no dynamic mask given; full-image report only")
    valid = _depth_arg(args.valid, None, "valid-mask") if args.valid else None
    try:
        reports = region_metrics(pred, gt, mask, valid=valid, cap=args.cap)
    except EmptyRegionError as exc:
        raise CliError(str(exc)) from None
    text = format_report(reports)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


# ------------------------------------------------------------------ parser ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scdepth", description=__doc__)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=1,
                        help="torch intra-op threads (results do not depend on it)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic two-view scene")
    p.add_argument("--config", help="run configuration file")
    p.add_argument("--out", required=True, help="output scene directory")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--preset", choices=sorted(PRESETS), help="overrides [scene] preset")
    p.add_argument("--png", action="store_true", help="also write 16-bit PNG previews of depth grids")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect-loss", help="print every loss term and the weighted total")
    p.add_argument("scene", help="scene directory")
    p.add_argument("--config")
    p.add_argument("--depth-a", default="gt", help="grid file or 'gt'")
    p.add_argument("--depth-b", default="gt", help="grid file or 'gt'")
    p.add_argument("--ablate", choices=["none", "no-drr", "no-lsr", "baseline"], default="none")
    p.add_argument("--maps", help="directory for per-pixel loss maps")
    p.set_defaults(func=cmd_inspect_loss)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss term")
    p.add_argument("scene", help="scene directory")
    p.add_argument("--config")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--crop", type=int, default=8, help="side of the central crop checked")
    p.add_argument("--inject-fault", type=float, default=0.0,
                   help="relative error added to analytic gradients (harness self-test)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="fit depth fields and pose directly")
    p.add_argument("scene", help="scene directory")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--baseline", action="store_true", help="photometric + geometry + smoothness only")
    p.add_argument("--no-drr", action="store_true", help="drop the confident ranking term")
    p.add_argument("--no-lsr", action="store_true", help="drop the normal terms, restore smoothness")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="median-scaled depth metrics")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mask", help="dynamic-region mask grid")
    p.add_argument("--valid", help="validity mask grid")
    p.add_argument("--cap", type=float, default=80.0)
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except (CliError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, GridFormatError, FileNotFoundError, PseudoDepthAuditError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
