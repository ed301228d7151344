"""Experiment configuration: TOML in, validated dataclasses out.

Parsing is strict. Unknown keys and out-of-range values raise
:class:`ConfigError` naming the offending ``section.key``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError
from .federation import CW_MODES, KINDS, AlgorithmKind

OUTPUT_ROOT_ENV = "CWFEDAVG_OUTPUT_ROOT"


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "synthetic"
    classes: int = 10
    dim: int = 20
    per_class: int = 200
    separation: float = 3.0
    images: Optional[str] = None
    labels: Optional[str] = None
    limit: Optional[int] = None


@dataclass(frozen=True)
class PartitionSpec:
    kind: str = "pathological"
    classes_per_client: int = 2
    beta: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec
    algorithm: AlgorithmKind
    partition: PartitionSpec = PartitionSpec()
    clients: int = 20
    rounds: int = 100
    seed: int = 0
    lr: float = 0.001
    batch_size: int = 10
    local_epochs: int = 1
    hidden: tuple[int, ...] = (64,)
    finetune_epochs: int = 1
    shared_init: bool = False
    trace_batches: bool = False
    participation: float = 1.0
    output_dir: str = "runs/experiment"
    # directory that relative dataset paths are resolved against
    base_dir: str = field(default=".", compare=False)

    @property
    def lam(self) -> float:
        return self.algorithm.lam

    @property
    def num_classes(self) -> int:
        return 10 if self.dataset.kind == "mnist" else self.dataset.classes

    def architecture(self, input_dim: int) -> list[int]:
        return [input_dim, *self.hidden, self.num_classes]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict[str, Any]:
        """Canonical echo of the run-defining fields (no output location)."""
        d = dataclasses.asdict(self)
        d.pop("output_dir")
        d.pop("base_dir")
        d["hidden"] = list(self.hidden)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


_TOP = {"seed", "clients", "rounds", "output_dir", "dataset", "partition", "algorithm", "training", "flags"}
_SECTIONS = {
    "dataset": {"kind", "classes", "dim", "per_class", "separation", "images", "labels", "limit"},
    "partition": {"kind", "classes_per_client", "beta"},
    "algorithm": {"kind", "mode", "lambda", "mu"},
    "training": {"lr", "batch_size", "local_epochs", "hidden", "finetune_epochs", "shared_init"},
    "flags": {"trace_batches", "participation"},
}


def _need(cond: bool, name: str, constraint: str, value: Any) -> None:
    if not cond:
        raise ConfigError(f"{name}: must be {constraint} (got {value!r})")


def _typed(section: dict, key: str, kind, name: str, default=None):
    if key not in section:
        return default
    v = section[key]
    if kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if kind is int and isinstance(v, bool):
        raise ConfigError(f"{name}: expected integer, got boolean")
    if not isinstance(v, kind):
        raise ConfigError(f"{name}: expected {kind.__name__}, got {type(v).__name__}")
    return v


def config_from_dict(raw: dict[str, Any], *, base_dir: str = ".", default_name: str = "experiment") -> ExperimentConfig:
    unknown = set(raw) - _TOP
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(sorted(unknown))}")
    for sec, allowed in _SECTIONS.items():
        body = raw.get(sec, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{sec}: expected a table")
        extra = set(body) - allowed
        if extra:
            raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(f'{sec}.{k}' for k in sorted(extra))}")

    if "dataset" not in raw:
        raise ConfigError("dataset: required section missing")
    if "algorithm" not in raw:
        raise ConfigError("algorithm: required section missing")

    ds_raw = raw["dataset"]
    ds_kind = _typed(ds_raw, "kind", str, "dataset.kind")
    _need(ds_kind in ("synthetic", "mnist"), "dataset.kind", "'synthetic' or 'mnist'", ds_kind)
    if ds_kind == "synthetic":
        ds = DatasetSpec(
            kind="synthetic",
            classes=_typed(ds_raw, "classes", int, "dataset.classes", 10),
            dim=_typed(ds_raw, "dim", int, "dataset.dim", 20),
            per_class=_typed(ds_raw, "per_class", int, "dataset.per_class", 200),
            separation=_typed(ds_raw, "separation", float, "dataset.separation", 3.0),
        )
        _need(ds.classes >= 2, "dataset.classes", ">= 2", ds.classes)
        _need(ds.dim >= 1, "dataset.dim", ">= 1", ds.dim)
        _need(ds.per_class >= 1, "dataset.per_class", ">= 1", ds.per_class)
        _need(ds.separation > 0, "dataset.separation", "> 0", ds.separation)
    else:
        for key in ("images", "labels"):
            if key not in ds_raw:
                raise ConfigError(f"dataset.{key}: required for mnist datasets")
        ds = DatasetSpec(
            kind="mnist",
            images=_typed(ds_raw, "images", str, "dataset.images"),
            labels=_typed(ds_raw, "labels", str, "dataset.labels"),
            limit=_typed(ds_raw, "limit", int, "dataset.limit"),
        )
        if ds.limit is not None:
            _need(ds.limit >= 1, "dataset.limit", ">= 1", ds.limit)

    p_raw = raw.get("partition", {})
    p_kind = _typed(p_raw, "kind", str, "partition.kind", "pathological")
    _need(p_kind in ("pathological", "dirichlet"), "partition.kind", "'pathological' or 'dirichlet'", p_kind)
    part = PartitionSpec(
        kind=p_kind,
        classes_per_client=_typed(p_raw, "classes_per_client", int, "partition.classes_per_client", 2),
        beta=_typed(p_raw, "beta", float, "partition.beta", 0.1),
    )
    _need(part.classes_per_client >= 1, "partition.classes_per_client", ">= 1", part.classes_per_client)
    _need(part.beta > 0, "partition.beta", "> 0", part.beta)

    a_raw = raw["algorithm"]
    a_kind = _typed(a_raw, "kind", str, "algorithm.kind")
    _need(a_kind in KINDS, "algorithm.kind", f"one of {', '.join(KINDS)}", a_kind)
    mode = _typed(a_raw, "mode", str, "algorithm.mode")
    if a_kind == "cwfedavg":
        _need(mode in CW_MODES, "algorithm.mode", f"one of {', '.join(CW_MODES)}", mode)
    elif mode is not None:
        raise ConfigError(f"algorithm.mode: only valid for cwfedavg (algorithm is {a_kind})")
    lam = _typed(a_raw, "lambda", float, "algorithm.lambda", 0.0)
    mu = _typed(a_raw, "mu", float, "algorithm.mu", 0.001 if a_kind == "fedprox" else 0.0)
    _need(lam >= 0, "algorithm.lambda", ">= 0", lam)
    _need(mu >= 0, "algorithm.mu", ">= 0", mu)
    algorithm = AlgorithmKind(a_kind, mode, lam, mu)

    t_raw = raw.get("training", {})
    hidden = t_raw.get("hidden", [64])
    if not isinstance(hidden, list) or not all(isinstance(h, int) and not isinstance(h, bool) and h >= 1 for h in hidden):
        raise ConfigError(f"training.hidden: must be a list of positive integers (got {hidden!r})")
    f_raw = raw.get("flags", {})

    default_out = os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), default_name)
    cfg = ExperimentConfig(
        dataset=ds,
        algorithm=algorithm,
        partition=part,
        clients=_typed(raw, "clients", int, "clients", 20),
        rounds=_typed(raw, "rounds", int, "rounds", 100),
        seed=_typed(raw, "seed", int, "seed", 0),
        lr=_typed(t_raw, "lr", float, "training.lr", 0.001),
        batch_size=_typed(t_raw, "batch_size", int, "training.batch_size", 10),
        local_epochs=_typed(t_raw, "local_epochs", int, "training.local_epochs", 1),
        hidden=tuple(hidden),
        finetune_epochs=_typed(t_raw, "finetune_epochs", int, "training.finetune_epochs", 1),
        shared_init=_typed(t_raw, "shared_init", bool, "training.shared_init", False),
        trace_batches=_typed(f_raw, "trace_batches", bool, "flags.trace_batches", False),
        participation=_typed(f_raw, "participation", float, "flags.participation", 1.0),
        output_dir=_typed(raw, "output_dir", str, "output_dir", default_out),
        base_dir=base_dir,
    )
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    _need(cfg.clients >= 1, "clients", ">= 1", cfg.clients)
    _need(cfg.rounds >= 1, "rounds", ">= 1", cfg.rounds)
    _need(cfg.seed >= 0, "seed", ">= 0", cfg.seed)
    _need(cfg.lr > 0, "training.lr", "> 0", cfg.lr)
    _need(cfg.batch_size >= 1, "training.batch_size", ">= 1", cfg.batch_size)
    _need(cfg.local_epochs >= 1, "training.local_epochs", ">= 1", cfg.local_epochs)
    _need(cfg.finetune_epochs >= 0, "training.finetune_epochs", ">= 0", cfg.finetune_epochs)
    _need(0 < cfg.participation <= 1, "flags.participation", "in (0, 1]", cfg.participation)
    if cfg.partition.kind == "pathological":
        _need(
            cfg.partition.classes_per_client <= cfg.num_classes,
            "partition.classes_per_client",
            f"<= number of classes ({cfg.num_classes})",
            cfg.partition.classes_per_client,
        )


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    return config_from_dict(raw, base_dir=str(path.parent), default_name=path.stem)
