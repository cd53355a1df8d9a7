"""TOML run configuration.

Sections: [system], [network], [training], [certification], [noise_partition].
Unknown sections or keys are rejected, and so are values of the wrong type.
A parsed config serializes back to TOML (``dumps``) and re-parses to an equal
object.

A custom system is declared with ``name = "custom"`` and the keys ``matrix``,
``offset``, ``terms`` (tables with target/source/kind/weight),
``state_space`` ({lower, upper}), ``initial_set``, ``safe_set`` and optionally
``unsafe_set``; sets use the forms accepted by ``nbf.sets.from_config``.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from nbf.dynamics import BENCHMARKS, DynamicsModel, Term
from nbf.noise import DiagonalGaussian
from nbf.partition import BnBConfig
from nbf.relaxation import MODES, Hyperrectangle
from nbf.certifier import CertifyConfig
from nbf.sets import from_config as set_from_config
from nbf.trainer import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class SystemSection:
    name: str = ""
    horizon: int = 10
    noise_variance: Optional[list[float]] = None
    noise_std: Optional[list[float]] = None
    noise_mean: Optional[list[float]] = None
    # custom systems only
    matrix: Optional[list[list[float]]] = None
    offset: Optional[list[float]] = None
    terms: Optional[list[dict]] = None
    state_space: Optional[dict] = None
    initial_set: Any = None
    safe_set: Any = None
    unsafe_set: Any = None


@dataclass
class NetworkSection:
    hidden: list[int] = field(default_factory=lambda: [128, 128, 128])


@dataclass
class TrainingSection:
    m: int = 250
    l: int = 500
    eps: float = 1e-5
    epochs: int = 150
    iters_per_epoch: int = 400
    kappa0: float = 1.0
    kappa_decay: float = 0.97
    learning_rate: float = 1e-3
    lr_decay: float = 0.97
    margin_nonneg: float = 0.0
    margin_unsafe: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0


@dataclass
class CertificationSection:
    t_gap: float = 1e-3
    max_regions: int = 200_000
    max_iterations: int = 40
    initial_grid: Any = 4
    mode: str = "crown"
    split_mode: str = "all"
    split_batch: int = 512


@dataclass
class NoisePartitionSection:
    cells: Any = 32


@dataclass
class RunConfig:
    system: SystemSection = field(default_factory=SystemSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    certification: CertificationSection = field(default_factory=CertificationSection)
    noise_partition: NoisePartitionSection = field(default_factory=NoisePartitionSection)

    # -- derived objects -------------------------------------------------

    def dynamics(self) -> DynamicsModel:
        return build_system(self.system)

    def train_config(self, seed: Optional[int] = None) -> TrainConfig:
        t = self.training
        return _wrap("training", lambda: TrainConfig(
            m=t.m, l=t.l, eps=t.eps, H=self.system.horizon, epochs=t.epochs,
            iters_per_epoch=t.iters_per_epoch, kappa0=t.kappa0, kappa_decay=t.kappa_decay,
            learning_rate=t.learning_rate, lr_decay=t.lr_decay, margin_nonneg=t.margin_nonneg,
            margin_unsafe=t.margin_unsafe, hidden=tuple(self.network.hidden),
            seed=t.seed if seed is None else seed))

    def certify_config(self, t_gap: Optional[float] = None, mode: Optional[str] = None) -> CertifyConfig:
        c = self.certification
        bnb = _wrap("certification", lambda: BnBConfig(
            t_gap=c.t_gap if t_gap is None else t_gap, max_regions=c.max_regions,
            max_iterations=c.max_iterations, initial_grid=c.initial_grid,
            split_mode=c.split_mode, split_batch=c.split_batch))
        return CertifyConfig(bnb=bnb, mode=c.mode if mode is None else mode,
                             noise_cells=self.noise_partition.cells)

    def to_dict(self) -> dict:
        return {name: {k: v for k, v in dataclasses.asdict(getattr(self, name)).items() if v is not None}
                for name in _SECTIONS}


_SECTIONS = {
    "system": SystemSection,
    "network": NetworkSection,
    "training": TrainingSection,
    "certification": CertificationSection,
    "noise_partition": NoisePartitionSection,
}

_INT_FIELDS = {"horizon", "m", "l", "epochs", "iters_per_epoch", "seed", "checkpoint_every",
               "max_regions", "max_iterations", "split_batch"}
_FLOAT_FIELDS = {"eps", "kappa0", "kappa_decay", "learning_rate", "lr_decay", "margin_nonneg", "margin_unsafe", "t_gap"}
_STR_FIELDS = {"name", "mode", "split_mode"}
_CUSTOM_FIELDS = ("matrix", "offset", "terms", "state_space", "initial_set", "safe_set", "unsafe_set")


def _wrap(section: str, build):
    try:
        return build()
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from exc


def _check_value(path: str, key: str, value):
    if key in _INT_FIELDS and (isinstance(value, bool) or not isinstance(value, int)):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if key in _FLOAT_FIELDS and (isinstance(value, bool) or not isinstance(value, (int, float))):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    if key in _STR_FIELDS and not isinstance(value, str):
        raise ConfigError(f"{path}: expected a string, got {value!r}")
    if key in _FLOAT_FIELDS:
        return float(value)
    return value


def _counts(path: str, value, allow_list: bool = True):
    if isinstance(value, bool):
        raise ConfigError(f"{path}: expected a positive integer or list of integers")
    if isinstance(value, int):
        if value < 1:
            raise ConfigError(f"{path}: must be positive")
        return value
    if allow_list and isinstance(value, list) and value and all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in value):
        return list(value)
    raise ConfigError(f"{path}: expected a positive integer or list of positive integers")


def from_dict(data: dict) -> RunConfig:
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section [{sorted(unknown)[0]}]")
    cfg = RunConfig()
    for name, cls in _SECTIONS.items():
        raw = data.get(name, {})
        if not isinstance(raw, dict):
            raise ConfigError(f"[{name}] must be a table")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in known:
                raise ConfigError(f"{name}.{key}: unknown key")
        values = {k: _check_value(f"{name}.{k}", k, v) for k, v in raw.items()}
        setattr(cfg, name, cls(**values))

    s = cfg.system
    if not s.name:
        raise ConfigError("system.name: missing (one of " + ", ".join(sorted(BENCHMARKS)) + ", custom)")
    if s.name != "custom" and s.name not in BENCHMARKS:
        raise ConfigError(f"system.name: unknown system {s.name!r}")
    if s.name != "custom":
        for key in _CUSTOM_FIELDS:
            if getattr(s, key) is not None:
                raise ConfigError(f"system.{key}: only allowed for custom systems")
    if s.horizon < 1:
        raise ConfigError("system.horizon: must be at least 1")
    if s.noise_variance is not None and s.noise_std is not None:
        raise ConfigError("system.noise_std: give either noise_variance or noise_std, not both")
    if not cfg.network.hidden or not all(isinstance(h, int) and not isinstance(h, bool) and h > 0
                                         for h in cfg.network.hidden):
        raise ConfigError("network.hidden: expected a non-empty list of positive integers")
    if cfg.certification.mode not in MODES:
        raise ConfigError(f"certification.mode: expected one of {MODES}")
    cfg.certification.initial_grid = _counts("certification.initial_grid", cfg.certification.initial_grid)
    cfg.noise_partition.cells = _counts("noise_partition.cells", cfg.noise_partition.cells)
    # validate everything that can be validated without running
    cfg.train_config()
    cfg.certify_config()
    cfg.dynamics()
    return cfg


def loads(text: str) -> RunConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc
    return from_dict(data)


def load(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def _noise(s: SystemSection, default: DiagonalGaussian) -> DiagonalGaussian:
    n = default.dim
    mean = default.mean if s.noise_mean is None else np.asarray(s.noise_mean, dtype=np.float64)
    if s.noise_std is not None:
        var = np.asarray(s.noise_std, dtype=np.float64) ** 2
    elif s.noise_variance is not None:
        var = np.asarray(s.noise_variance, dtype=np.float64)
    else:
        var = default.variance
    if mean.shape != (n,) or var.shape != (n,):
        raise ConfigError(f"system.noise: expected {n} entries for this system")
    try:
        return DiagonalGaussian(mean, var)
    except ValueError as exc:
        raise ConfigError(f"system.noise: {exc}") from exc


def build_system(s: SystemSection) -> DynamicsModel:
    if s.name != "custom":
        dyn = BENCHMARKS[s.name]()
        dyn.noise = _noise(s, dyn.noise)
        return dyn
    for key in ("matrix", "offset", "state_space", "initial_set", "safe_set"):
        if getattr(s, key) is None:
            raise ConfigError(f"system.{key}: required for custom systems")
    try:
        matrix = np.asarray(s.matrix, dtype=np.float64)
        n = matrix.shape[0]
        X = Hyperrectangle(s.state_space["lower"], s.state_space["upper"])
        terms = [Term(int(t["target"]), int(t["source"]), str(t["kind"]), float(t["weight"]))
                 for t in (s.terms or [])]
        noise = _noise(s, DiagonalGaussian(np.zeros(n), np.zeros(n)))
        kwargs = {}
        if s.unsafe_set is not None:
            kwargs["unsafe_set"] = set_from_config(s.unsafe_set, n)
        return DynamicsModel(
            name="custom", matrix=matrix, offset=np.asarray(s.offset, dtype=np.float64),
            terms=terms, state_space=X, initial_set=set_from_config(s.initial_set, n),
            safe_set=set_from_config(s.safe_set, n), noise=noise, **kwargs)
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"system: invalid custom system ({exc})") from exc
