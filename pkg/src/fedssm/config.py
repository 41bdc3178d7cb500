"""Run configuration: a flat ``key = value`` text format with typed validation.

Lines starting with ``#`` are comments. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import enum
import hashlib
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .local_adam import Hyperparams
from .sparsification import SsmVariant


class AlgorithmKind(str, enum.Enum):
    VANILLA_FEDADAM = "fedadam"
    FEDADAM_TOP = "fedadam_top"
    FEDADAM_SSM = "fedadam_ssm"
    FEDSGD = "fedsgd"
    SPARSE_FEDSGD = "sparse_fedsgd"

    @property
    def uses_adam(self) -> bool:
        return self in (AlgorithmKind.VANILLA_FEDADAM, AlgorithmKind.FEDADAM_TOP, AlgorithmKind.FEDADAM_SSM)


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


@dataclass
class RunConfig:
    algorithm: AlgorithmKind = AlgorithmKind.FEDADAM_SSM
    variant: SsmVariant = SsmVariant.SSM
    hidden: tuple[int, ...] = (16,)

    dataset: str = "synthetic"
    synthetic_n: int = 2000
    synthetic_n_test: int = 500
    synthetic_d_in: int = 2
    synthetic_classes: int = 2
    separation: float = 4.0
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    clients: int = 20
    iid: bool = False
    theta: float = 0.1

    eta: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-6
    local_epochs: int = 30
    rounds: int = 100
    alpha: Optional[float] = 0.05
    k: Optional[int] = None
    q: int = 32
    batch_size: int = 32
    clip: float = math.inf

    seed: int = 0
    eval_interval: int = 1
    workers: int = 1
    target_accuracy: float = 0.9

    probe_deviation: bool = False
    probe_gradnorm: bool = False
    histogram_round: int = -1
    histogram_bins: int = 40
    rho: Optional[float] = None
    rho_pairs: int = 1000

    def hyperparams(self) -> Hyperparams:
        return Hyperparams(
            eta=self.eta,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            local_epochs=self.local_epochs,
            rounds=self.rounds,
            alpha=self.alpha,
            k=self.k,
            q=self.q,
            clip=self.clip,
            batch_size=self.batch_size,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def validate(self) -> "RunConfig":
        problems = []

        def need(cond, msg):
            if not cond:
                problems.append(msg)

        need(self.dataset in ("synthetic", "idx"), "dataset must be 'synthetic' or 'idx'")
        if self.dataset == "idx":
            need(all([self.train_images, self.train_labels]), "idx dataset needs train_images and train_labels")
        else:
            need(not any([self.train_images, self.train_labels, self.test_images, self.test_labels]),
                 "idx paths must be empty for the synthetic dataset (exactly one source)")
            need(self.synthetic_n >= self.synthetic_classes >= 2, "synthetic_n >= synthetic_classes >= 2 required")
            need(self.synthetic_n_test >= 1, "synthetic_n_test must be >= 1")
            need(self.synthetic_d_in >= 1, "synthetic_d_in must be >= 1")
            need(self.separation > 0, "separation must be > 0")
        need(all(h >= 1 for h in self.hidden), "hidden widths must be >= 1")
        need(self.clients >= 1, "clients must be >= 1")
        need(self.theta > 0, "theta must be > 0")
        need(self.eta >= 0, "eta must be >= 0")
        need(0 <= self.beta1 < 1, "beta1 must lie in [0, 1)")
        need(0 <= self.beta2 < 1, "beta2 must lie in [0, 1)")
        need(self.eps > 0, "eps must be > 0")
        need(self.local_epochs >= 0, "local_epochs must be >= 0")
        need(self.rounds >= 0, "rounds must be >= 0")
        if self.k is not None:
            need(self.k >= 1, "k must be >= 1")
        elif self.alpha is not None:
            need(self.alpha > 0, "k must be >= 1 (alpha must be > 0)")
            need(self.alpha <= 1, "alpha must be <= 1")
        need(self.q >= 1, "q must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.clip > 0, "clip must be > 0")
        need(self.eval_interval >= 1, "eval_interval must be >= 1")
        need(self.workers >= 1, "workers must be >= 1")
        need(0 <= self.target_accuracy <= 1, "target_accuracy must lie in [0, 1]")
        need(self.histogram_bins >= 2, "histogram_bins must be >= 2")
        if self.rho is not None:
            need(self.rho > 0, "rho must be > 0")
        need(self.rho_pairs >= 1, "rho_pairs must be >= 1")
        if self.probe_deviation:
            need(self.algorithm.uses_adam, "probe_deviation requires an Adam-based algorithm")
            need(not math.isinf(self.clip), "probe_deviation requires clipping (finite clip)")
        if problems:
            raise ConfigError(problems)
        return self

    # -- text form -------------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_format(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        problems = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                problems.append(f"line {lineno}: expected 'key = value'")
                continue
            key, _, value = (part.strip() for part in line.partition("="))
            if key not in known:
                problems.append(f"line {lineno}: unknown key '{key}'")
                continue
            if key in values:
                problems.append(f"line {lineno}: duplicate key '{key}'")
                continue
            try:
                values[key] = _parse(known[key], value)
            except ValueError as exc:
                problems.append(f"line {lineno}: {key}: {exc}")
        if problems:
            raise ConfigError(problems)
        return cls(**values).validate()

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(f: dataclasses.Field, text: str):
    kind = _FIELD_TYPES[f.name]
    optional = "Optional" in kind
    if optional and text.lower() == "none":
        return None
    if "AlgorithmKind" in kind:
        return AlgorithmKind(text)
    if "SsmVariant" in kind:
        return SsmVariant(text)
    if kind.startswith("tuple"):
        return tuple(int(p) for p in text.split(",") if p.strip()) if text.strip() else ()
    if "bool" in kind:
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if "int" in kind:
        return int(text)
    if "float" in kind:
        return float(text)
    return text


# -- sweeps -------------------------------------------------------------------

SWEEP_PREFIX = "sweep."
DEFAULT_SWEEP_CAP = 256


@dataclass
class SweepSpec:
    """A base config plus swept axes; the grid is their cartesian product.

    Text form: the ordinary config keys, plus ``sweep.<field> = a, b, c`` lines
    and an optional ``sweep_cap = n``. Axes vary in the order they are listed,
    the last one fastest.
    """

    base: RunConfig
    axes: list[tuple[str, list]] = field(default_factory=list)
    cap: int = DEFAULT_SWEEP_CAP

    @property
    def size(self) -> int:
        return math.prod(len(v) for _, v in self.axes) if self.axes else 1

    def points(self) -> list[tuple[dict, "RunConfig | ConfigError"]]:
        if self.size > self.cap:
            raise ConfigError([f"sweep has {self.size} grid points, cap is {self.cap}"])
        grid = [{}]
        for name, values in self.axes:
            grid = [{**g, name: v} for g in grid for v in values]
        out = []
        for g in grid:
            try:
                out.append((g, self.base.replace(**g).validate()))
            except ConfigError as exc:
                # an invalid point is recorded as a failure; the rest still run
                out.append((g, exc))
        return out

    @classmethod
    def from_text(cls, text: str) -> "SweepSpec":
        known = {f.name: f for f in fields(RunConfig)}
        base_lines = []
        axes: list[tuple[str, list]] = []
        cap = DEFAULT_SWEEP_CAP
        problems = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            key = line.partition("=")[0].strip()
            if key == "sweep_cap":
                try:
                    cap = int(line.partition("=")[2])
                except ValueError:
                    problems.append(f"line {lineno}: sweep_cap must be an integer")
                continue
            if not key.startswith(SWEEP_PREFIX):
                base_lines.append(raw)
                continue
            name = key[len(SWEEP_PREFIX):]
            if name not in known:
                problems.append(f"line {lineno}: unknown sweep axis '{name}'")
                continue
            if any(name == a for a, _ in axes):
                problems.append(f"line {lineno}: duplicate sweep axis '{name}'")
                continue
            raw_values = [v.strip() for v in line.partition("=")[2].split(";" if name == "hidden" else ",")]
            try:
                values = [_parse(known[name], v) for v in raw_values if v]
            except ValueError as exc:
                problems.append(f"line {lineno}: {name}: {exc}")
                continue
            if not values:
                problems.append(f"line {lineno}: sweep axis '{name}' has no values")
                continue
            axes.append((name, values))
        if cap < 1:
            problems.append("sweep_cap must be >= 1")
        if problems:
            raise ConfigError(problems)
        spec = cls(RunConfig.from_text("\n".join(base_lines)), axes, cap)
        if spec.size > cap:
            raise ConfigError([f"sweep has {spec.size} grid points, cap is {cap}"])
        return spec

    @classmethod
    def load(cls, path: str | Path) -> "SweepSpec":
        return cls.from_text(Path(path).read_text())
