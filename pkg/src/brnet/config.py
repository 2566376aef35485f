"""Experiment configuration files.

An INI-style file with up to three sections; every key is optional::

    [data]
    n_per_group = 512
    resolution = 32, 32
    group1_range = 1, 4
    group2_range = 3, 6
    noise_std = 0.01
    blob_std = 4
    independent_blobs = false
    seed = 0

    [train]
    variant = br_net          ; vanilla | br_net | multi_task | adv_mse | zafar
    lambda = 1.0
    eps_std = 1e-8
    batch_size = 64
    iterations = 5000
    lr_c = 0.001
    lr_bp = 0.001
    lr_adv = 0.001
    conditioning = all        ; or a comma-separated list of class labels
    lambda_warmup = 0         ; fraction of iterations, e.g. 0.1
    log_every = 25
    seed = 0

    [experiment]
    variants = vanilla, br_net, multi_task, adv_mse, zafar
    n_seeds = 5
    out = results

Command-line flags override file values.
"""
from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Union

from .errors import ConfigError, ContractViolation
from .losses import VARIANTS, LossVariant, canonical_variant
from .synthdata import SyntheticConfig
from .training import TrainConfig


@dataclass(frozen=True)
class ExperimentConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    variants: tuple[str, ...] = VARIANTS
    n_seeds: int = 5
    out_dir: str = "results"

    def validate(self) -> "ExperimentConfig":
        self.data.validate()
        try:
            self.train.validate()
        except ContractViolation as exc:
            raise ConfigError("train", str(exc)) from exc
        if not self.variants:
            raise ConfigError("experiment.variants", "must name at least one variant")
        if self.n_seeds < 1:
            raise ConfigError("experiment.n_seeds", "must be >= 1")
        return self

    def as_dict(self) -> dict:
        d = asdict(self)
        d["train"]["conditioning"] = self.train.conditioning
        return d

    def hash(self) -> str:
        """Short digest of the canonical JSON form, excluding the output location."""
        d = self.as_dict()
        d.pop("out_dir")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _floats(n: int) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        parts = [p.strip() for p in s.split(",")]
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated numbers")
        return tuple(float(p) for p in parts)
    return parse


def _ints(n: int) -> Callable[[str], tuple]:
    def parse(s: str) -> tuple:
        parts = [p.strip() for p in s.split(",")]
        if len(parts) != n:
            raise ValueError(f"expected {n} comma-separated integers")
        return tuple(int(p) for p in parts)
    return parse


def _bool(s: str) -> bool:
    key = s.strip().lower()
    if key in ("1", "true", "yes", "on"):
        return True
    if key in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{s!r} is not a boolean")


def parse_conditioning(s: str):
    s = s.strip().lower()
    if s == "all":
        return "all"
    return tuple(sorted({int(p) for p in s.split(",") if p.strip()}))


def _variants(s: str) -> tuple[str, ...]:
    return tuple(canonical_variant(p) for p in s.split(",") if p.strip())


DATA_KEYS = {
    "n_per_group": int,
    "resolution": _ints(2),
    "group1_range": _floats(2),
    "group2_range": _floats(2),
    "noise_std": float,
    "blob_std": float,
    "independent_blobs": _bool,
    "seed": int,
}
TRAIN_KEYS = {
    "variant": canonical_variant,
    "lambda": float,
    "eps_std": float,
    "batch_size": int,
    "iterations": int,
    "lr_c": float,
    "lr_bp": float,
    "lr_adv": float,
    "conditioning": parse_conditioning,
    "lambda_warmup": float,
    "log_every": int,
    "seed": int,
}
EXPERIMENT_KEYS = {"variants": _variants, "n_seeds": int, "out": str}
SECTIONS = {"data": DATA_KEYS, "train": TRAIN_KEYS, "experiment": EXPERIMENT_KEYS}


def _parse_section(parser: configparser.ConfigParser, section: str) -> dict:
    if not parser.has_section(section):
        return {}
    keys = SECTIONS[section]
    out = {}
    for key, raw in parser.items(section):
        if key not in keys:
            raise ConfigError(f"{section}.{key}", "unknown key")
        try:
            out[key] = keys[key](raw)
        except (ValueError, ContractViolation) as exc:
            raise ConfigError(f"{section}.{key}", str(exc)) from exc
    return out


def apply_train_overrides(cfg: TrainConfig, values: dict) -> TrainConfig:
    """Merge parsed ``[train]`` style values into ``cfg``."""
    values = dict(values)
    variant = cfg.variant
    vkw = {}
    if "variant" in values:
        vkw["name"] = values.pop("variant")
    if "lambda" in values:
        vkw["lam"] = values.pop("lambda")
    if "eps_std" in values:
        vkw["eps_std"] = values.pop("eps_std")
    try:
        if vkw:
            variant = LossVariant(**{**asdict(variant), **vkw})
        return replace(cfg, variant=variant, **values)
    except ContractViolation as exc:
        raise ConfigError("train", str(exc)) from exc


def parse_config(text: str, source: str = "<string>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError("config", str(exc)) from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, "unknown section")
    data = _parse_section(parser, "data")
    train = _parse_section(parser, "train")
    exp = _parse_section(parser, "experiment")
    cfg = ExperimentConfig(
        data=replace(SyntheticConfig(), **data),
        train=apply_train_overrides(TrainConfig(), train),
        variants=exp.get("variants", VARIANTS),
        n_seeds=exp.get("n_seeds", 5),
        out_dir=exp.get("out", "results"),
    )
    return cfg.validate()


def load_config(path: Optional[Union[str, Path]]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig().validate()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {p}: {exc.strerror}") from exc
    return parse_config(text, str(p))
