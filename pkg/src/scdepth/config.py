"""Plain-text run configuration.

Grammar (one statement per line)::

    # comment            full-line comment; '#' after a value also starts one
    [section]            opens a section; sections do not nest
    key = value          assignment inside the current section

Values are parsed according to the type of the field's default (int,
float, bool as true/false/1/0, or a bare string).  Unknown sections and
keys are rejected with the offending line number.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .grad import OptimizerConfig
from .objective import FULL_WEIGHTS, TERMS, ObjectiveConfig
from .priors import EdgeSamplingConfig, RankingConfig
from .selfsup import PhotometricConfig
from .synthetic import PRESETS, PseudoDepthConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSection:
    preset: str = "default"
    width: int = 64
    height: int = 48
    noise: float = 0.01
    supersample: int = 3
    blur: float = 0.7

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown scene preset {self.preset!r}; choose from {sorted(PRESETS)}")


@dataclass(frozen=True)
class ObjectiveSection:
    bidirectional: bool = True
    automask: bool = True
    detach_mask: bool = True
    detach_computed_depth: bool = False


@dataclass(frozen=True)
class TrainSection:
    init_depth: float = 5.0


@dataclass(frozen=True)
class EvalSection:
    cap: float = 80.0


def _default_weights() -> dict[str, float]:
    return {k: FULL_WEIGHTS.get(k, 0.0) for k in TERMS}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    scene: SceneSection = SceneSection()
    pseudo: PseudoDepthConfig = PseudoDepthConfig()
    photometric: PhotometricConfig = PhotometricConfig()
    ranking: RankingConfig = RankingConfig()
    edge: EdgeSamplingConfig = EdgeSamplingConfig()
    objective: ObjectiveSection = ObjectiveSection()
    optimizer: OptimizerConfig = OptimizerConfig()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()
    weights: dict[str, float] = field(default_factory=_default_weights)

    def objective_config(self, seed: int | None = None) -> ObjectiveConfig:
        seed = self.seed if seed is None else seed
        return ObjectiveConfig(
            photometric=self.photometric,
            ranking=self.ranking,
            edge=self.edge,
            seed=seed,
            **dataclasses.asdict(self.objective),
        )

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self, seed=seed, optimizer=dataclasses.replace(self.optimizer, seed=seed)
        )


SECTIONS = ("scene", "pseudo", "photometric", "ranking", "edge", "objective", "optimizer", "train", "eval")
TOP_LEVEL = ("seed",)


def _parse_value(raw: str, default, where: str):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            if default is None and raw.lower() == "none":
                return None
            return int(raw) if default is None and raw.lstrip("-").isdigit() else float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    base = RunConfig()
    values: dict[str, dict] = {s: {} for s in SECTIONS}
    values["weights"] = {}
    top: dict = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in values:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if section is None:
            if key not in TOP_LEVEL:
                raise ConfigError(f"{where}: unknown key {key!r}")
            top[key] = _parse_value(raw, getattr(base, key), where)
            continue
        if section == "weights":
            if key not in TERMS:
                raise ConfigError(f"{where}: unknown key {key!r} in [weights]")
            values["weights"][key] = _parse_value(raw, 0.0, where)
            continue
        defaults = {f.name: getattr(getattr(base, section), f.name) for f in fields(getattr(base, section))}
        if key not in defaults:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        values[section][key] = _parse_value(raw, defaults[key], where)

    kwargs = dict(top)
    for s in SECTIONS:
        try:
            kwargs[s] = dataclasses.replace(getattr(base, s), **values[s])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{source}: invalid [{s}] section: {exc}") from None
    weights = _default_weights()
    weights.update(values["weights"])
    if any(w < 0 for w in weights.values()):
        raise ConfigError(f"{source}: loss weights must be non-negative")
    kwargs["weights"] = weights
    cfg = RunConfig(**kwargs)
    if "seed" in top and "seed" not in values["optimizer"]:
        cfg = dataclasses.replace(cfg, optimizer=dataclasses.replace(cfg.optimizer, seed=cfg.seed))
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"missing config file: {path}")
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: RunConfig) -> str:
    """Render ``cfg`` in the grammar accepted by :func:`parse_config`."""
    lines = [f"seed = {cfg.seed}"]
    for s in SECTIONS:
        lines.append(f"\n[{s}]")
        sec = getattr(cfg, s)
        for f in fields(sec):
            v = getattr(sec, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
    lines.append("\n[weights]")
    lines.extend(f"{k} = {v}" for k, v in cfg.weights.items())
    return "\n".join(lines) + "\n"
