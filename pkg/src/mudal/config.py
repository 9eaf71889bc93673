"""Experiment configuration: a strict key-value text format with sections
[dataset], [method], [train], [budget], [output]. Unknown sections or keys are
rejected outright so typos cannot silently fall back to defaults."""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields as dc_fields

from .data import RotatingSpec
from .training import TrainConfig, VARIANTS
from .strategies import STRATEGIES

ASSIGNMENT_MODES = ("cal_optimal", "separate", "joint", "paper_literal")


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to CLI exit code 2)."""


@dataclass(frozen=True)
class IdxDatasetSpec:
    """Rotating domains built from an IDX image/label file pair."""

    images: str
    labels: str
    n_domains: int
    train_per_domain: int
    test_per_domain: int
    total_range_deg: float = 180.0
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: RotatingSpec | IdxDatasetSpec
    variant: str = "cal"
    strategy: str = "grads"
    assignment: str = "cal_optimal"
    train: TrainConfig = field(default_factory=TrainConfig)
    m0: int = 60
    m: int = 60
    rounds: int = 5
    seeds: tuple[int, ...] = (1, 2, 3)
    out_dir: str = "mudal_out"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.assignment not in ASSIGNMENT_MODES:
            raise ConfigError(f"unknown assignment mode {self.assignment!r}")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        n = self.dataset.n_domains
        if self.assignment in ("cal_optimal", "separate", "paper_literal"):
            if self.m0 < n or self.m < n:
                raise ConfigError(f"m0 and m must be >= n_domains ({n}) for {self.assignment}")
        if self.assignment == "separate" and self.m % n != 0:
            raise ConfigError(f"separate assignment needs n_domains ({n}) to divide m ({self.m})")
        if self.strategy == "grads" and self.variant == "vanilla":
            raise ConfigError("the grads strategy needs a discriminator; "
                              "pair it with the cal, cal_alpha, or cal_fa variant")
        if not self.seeds:
            raise ConfigError("need at least one seed")


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    parts = [p.strip() for p in s.split(",") if p.strip()]
    if not parts:
        raise ConfigError(f"expected comma-separated integers, got {s!r}")
    return tuple(int(p) for p in parts)


_DATASET_ROTATING = {
    "kind": (str, "rotating"),
    "n_domains": (int, 6),
    "train_per_domain": (int, 400),
    "test_per_domain": (int, 160),
    "n_classes": (int, 4),
    "total_range_deg": (float, 90.0),
    "base_shape": (str, "gaussian_blobs"),
    "noise": (float, 0.15),
    "seed": (int, 0),
}

_DATASET_IDX = {
    "kind": (str, "idx"),
    "images": (str, None),
    "labels": (str, None),
    "n_domains": (int, 6),
    "train_per_domain": (int, 400),
    "test_per_domain": (int, 160),
    "total_range_deg": (float, 180.0),
    "seed": (int, 0),
}

_METHOD = {
    "variant": (str, "cal"),
    "strategy": (str, "grads"),
    "assignment": (str, "cal_optimal"),
}

_TRAIN = {
    "lambda_d": (float, 1.0),
    "epochs": (int, 30),
    "batch_size": (int, 16),
    "lr": (float, 2e-3),
    "lr_alpha": (float, 0.05),
    "temperature": (float, 0.5),
    "extra_disc_step": (_parse_bool, False),
    "onehot_codes": (_parse_bool, True),
    "disc_line_search": (_parse_bool, False),
    "latent_dim": (int, 16),
    "encoder_hidden": (_parse_int_tuple, (32,)),
    "classifier_hidden": (_parse_int_tuple, (32,)),
    "disc_hidden": (_parse_int_tuple, (32, 32)),
    "warm_start": (_parse_bool, False),
}

_BUDGET = {
    "m0": (int, 60),
    "m": (int, 60),
    "rounds": (int, 5),
}

_OUTPUT = {
    "dir": (str, "mudal_out"),
    "seeds": (_parse_int_tuple, (1, 2, 3)),
}

_SECTIONS = ("dataset", "method", "train", "budget", "output")


def _read_section(cp: configparser.ConfigParser, name: str, schema: dict) -> dict:
    out = {}
    raw = dict(cp[name]) if cp.has_section(name) else {}
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in section [{name}]")
    for key, (conv, default) in schema.items():
        if key in raw:
            try:
                out[key] = conv(raw[key])
            except ConfigError:
                raise
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad value for [{name}] {key}: {exc}") from exc
        elif default is None:
            raise ConfigError(f"missing required key {key!r} in section [{name}]")
        else:
            out[key] = default
    return out


def parse_config_text(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"could not parse config: {exc}") from exc
    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
    if not cp.has_section("dataset"):
        raise ConfigError("missing required section [dataset]")

    kind = cp["dataset"].get("kind", "rotating").strip()
    if kind == "rotating":
        d = _read_section(cp, "dataset", _DATASET_ROTATING)
        d.pop("kind")
        dataset = RotatingSpec(**d)
    elif kind == "idx":
        d = _read_section(cp, "dataset", _DATASET_IDX)
        d.pop("kind")
        dataset = IdxDatasetSpec(**d)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")

    method = _read_section(cp, "method", _METHOD)
    train_kw = _read_section(cp, "train", _TRAIN)
    budget = _read_section(cp, "budget", _BUDGET)
    output = _read_section(cp, "output", _OUTPUT)

    try:
        train = TrainConfig(variant=method["variant"], **train_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return ExperimentConfig(
        dataset=dataset,
        variant=method["variant"],
        strategy=method["strategy"],
        assignment=method["assignment"],
        train=train,
        m0=budget["m0"],
        m=budget["m"],
        rounds=budget["rounds"],
        seeds=output["seeds"],
        out_dir=output["dir"],
    )


def parse_config(path) -> ExperimentConfig:
    with open(path, "r") as f:
        return parse_config_text(f.read())


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_to_text(cfg: ExperimentConfig) -> str:
    """Serialize a config with every value resolved; parsing it back yields an
    equal ExperimentConfig."""
    buf = io.StringIO()
    buf.write("[dataset]\n")
    if isinstance(cfg.dataset, RotatingSpec):
        buf.write("kind = rotating\n")
        for f in dc_fields(RotatingSpec):
            buf.write(f"{f.name} = {_fmt(getattr(cfg.dataset, f.name))}\n")
    else:
        buf.write("kind = idx\n")
        for f in dc_fields(IdxDatasetSpec):
            buf.write(f"{f.name} = {_fmt(getattr(cfg.dataset, f.name))}\n")
    buf.write("\n[method]\n")
    buf.write(f"variant = {cfg.variant}\n")
    buf.write(f"strategy = {cfg.strategy}\n")
    buf.write(f"assignment = {cfg.assignment}\n")
    buf.write("\n[train]\n")
    for key in _TRAIN:
        buf.write(f"{key} = {_fmt(getattr(cfg.train, key))}\n")
    buf.write("\n[budget]\n")
    buf.write(f"m0 = {cfg.m0}\nm = {cfg.m}\nrounds = {cfg.rounds}\n")
    buf.write("\n[output]\n")
    buf.write(f"dir = {cfg.out_dir}\nseeds = {_fmt(cfg.seeds)}\n")
    return buf.getvalue()
