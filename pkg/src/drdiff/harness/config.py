"""Run configuration: INI-style sections with typed, documented defaults.

A config file looks like::

    [run]
    seed = 0

    [model]
    d = 32
    n_experts = 4

    [diffusion]
    schedule = cosine
    lambda_sas = 0.5, 0.5, 0.5

Any key can be overridden from the command line with ``--set section.key=value``.
Lists are comma separated. Every value is validated against the preconditions
of the modules that will consume it before a run starts, so a bad config
fails fast with :class:`ConfigError` instead of midway through training.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from ..denoiser import ModelConfig, OptimConfig
from ..diffusion import SCHEDULE_KINDS, default_anchor_timesteps, make_schedule
from ..hsa import HSAConfig
from ..sampler import make_grid

ABLATE_TOGGLES = ("full", "no_hsa", "no_des", "no_both", "steps=1024", "steps=2048", "steps=4096",
                  "window=256", "window=512", "window=1024")
SWEEP_STEPS = (512, 1024, 2048, 4096, 8192)
SWEEP_LAMBDAS = (0.0, 0.1, 0.3, 0.5, 0.7, 1.0)
BENCH_LENGTHS = (128, 256, 384, 512, 1024, 2048, 3072, 4096, 5120, 6144, 8192,
                 9000, 12000, 16384, 24576)

RUN_ID_EXCLUDE = ("train.steps", "train.resume", "train.checkpoint_every")


class ConfigError(ValueError):
    """Invalid configuration; reported before any work starts."""


@dataclass
class RunSection:
    seed: int = 0


@dataclass
class ModelSection:
    vocab: int = 256
    d: int = 32
    layers: int = 2
    heads: int = 2
    d_ff: int = 64
    n_experts: int = 4
    k: int = 2
    capacities: list[float] = field(default_factory=list)  # empty: alternating 1.0 / 0.5
    hybrid: bool = True
    fixed_window: int = 0


@dataclass
class HSASection:
    n1: int = 512
    n2: int = 4096
    n3: int = 8192
    w4k: int = 256
    w8k: int = 512
    stride_s: int = 4
    w16k: int = 1024
    s_meta: int = 8
    rho: float = 0.05
    anchor_cap: int = 512


@dataclass
class DiffusionSection:
    schedule: str = "sqrt"
    T: int = 2048
    anchor_timesteps: list[int] = field(default_factory=list)  # empty: T/4, T/2, 3T/4
    lambda_sas: list[float] = field(default_factory=lambda: [0.5])  # one value broadcasts
    lambda_aux: float = 0.01
    segment_count: int = 0  # 0: max(1, n // 8)


@dataclass
class TrainSection:
    steps: int = 200
    n: int = 64
    batch_size: int = 4
    lr: float = 1e-4
    warmup: int = 5000
    weight_decay: float = 0.01
    clip: float = 1.0
    corpus: str = ""
    vocab_file: str = ""
    resume: str = ""
    checkpoint_every: int = 0


@dataclass
class SampleSection:
    checkpoint: str = ""
    steps: int = 50
    order: int = 2
    spacing: str = "uniform"
    count: int = 4
    n: int = 64
    guidance_eta: float = 0.0


@dataclass
class BenchSection:
    lengths: list[int] = field(default_factory=lambda: list(BENCH_LENGTHS))
    time_lengths: list[int] = field(default_factory=lambda: [512, 1024, 2048, 4096])
    dense_time_max: int = 4096
    d: int = 32
    heads: int = 2
    reps: int = 5


@dataclass
class AblateSection:
    toggles: list[str] = field(default_factory=lambda: list(ABLATE_TOGGLES))
    train_steps: int = 30
    eval_n: int = 8192
    lr: float = 3e-3
    warmup: int = 0


@dataclass
class SweepSection:
    kinds: list[str] = field(default_factory=lambda: list(SCHEDULE_KINDS))
    steps: list[int] = field(default_factory=lambda: list(SWEEP_STEPS))
    lambdas: list[float] = field(default_factory=lambda: list(SWEEP_LAMBDAS))
    train_steps: int = 10
    sampler_steps: int = 16
    oracle_trajectories: int = 2000
    seeds: int = 5
    lr: float = 3e-3
    warmup: int = 0


@dataclass
class ParamsSection:
    expert_counts: list[int] = field(default_factory=lambda: [2, 4, 8])
    capacity: float = 1.0


@dataclass
class MaskSection:
    n: int = 1024
    layer: int = 0


SECTIONS: dict[str, type] = {
    "run": RunSection,
    "model": ModelSection,
    "hsa": HSASection,
    "diffusion": DiffusionSection,
    "train": TrainSection,
    "sample": SampleSection,
    "bench": BenchSection,
    "ablate": AblateSection,
    "sweep": SweepSection,
    "mask": MaskSection,
    "params": ParamsSection,
}


def _parse_scalar(kind, text: str):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


def _parse(hint, text: str):
    if typing.get_origin(hint) is list:
        (inner,) = typing.get_args(hint)
        return [_parse_scalar(inner, part) for part in text.split(",") if part.strip()]
    return _parse_scalar(hint, text)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    """All sections of a run. Attribute access mirrors the file: ``cfg.model.d``."""

    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    hsa: HSASection = field(default_factory=HSASection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    train: TrainSection = field(default_factory=TrainSection)
    sample: SampleSection = field(default_factory=SampleSection)
    bench: BenchSection = field(default_factory=BenchSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    mask: MaskSection = field(default_factory=MaskSection)
    params: ParamsSection = field(default_factory=ParamsSection)

    def set(self, dotted: str, text: str) -> None:
        section, _, key = dotted.partition(".")
        if section not in SECTIONS or not key:
            raise ConfigError(f"unknown config key {dotted!r}; expected section.key with section in {sorted(SECTIONS)}")
        obj = getattr(self, section)
        hints = typing.get_type_hints(type(obj))
        if key not in hints:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        try:
            setattr(obj, key, _parse(hints[key], text))
        except ValueError as exc:
            raise ConfigError(f"bad value for {dotted}: {exc}") from None

    def to_ini(self) -> str:
        out = io.StringIO()
        for name in SECTIONS:
            out.write(f"[{name}]\n")
            obj = getattr(self, name)
            for f in fields(obj):
                out.write(f"{f.name} = {_format(getattr(obj, f.name))}\n")
            out.write("\n")
        return out.getvalue()

    def run_id(self) -> str:
        """Short stable digest of the configuration.

        Keys that only control how far or from where a run proceeds are left
        out, so a resumed run keeps the id of the run it continues.
        """
        kept = []
        for name in SECTIONS:
            obj = getattr(self, name)
            kept += [f"{name}.{f.name}={_format(getattr(obj, f.name))}" for f in fields(obj)
                     if f"{name}.{f.name}" not in RUN_ID_EXCLUDE]
        return hashlib.sha256("\n".join(kept).encode()).hexdigest()[:12]

    # typed views for the library modules

    def hsa_config(self) -> HSAConfig:
        h = self.hsa
        return HSAConfig(n1=h.n1, n2=h.n2, n3=h.n3, w4k=h.w4k, w8k=h.w8k, stride_s=h.stride_s,
                         layers_L=max(12, self.model.layers), w16k=h.w16k, s_meta=h.s_meta,
                         rho=h.rho, anchor_cap=h.anchor_cap)

    def model_config(self, vocab: int | None = None) -> ModelConfig:
        m = self.model
        return ModelConfig(vocab=vocab or m.vocab, d=m.d, layers=m.layers, heads=m.heads, d_ff=m.d_ff,
                           n_experts=m.n_experts, k=m.k, capacities=tuple(m.capacities) or None,
                           hsa=self.hsa_config(), hybrid=m.hybrid, fixed_window=m.fixed_window)

    def optim_config(self) -> OptimConfig:
        t = self.train
        return OptimConfig(lr=t.lr, warmup=t.warmup, weight_decay=t.weight_decay, clip=t.clip)

    def anchor_timesteps(self, T: int | None = None) -> list[int]:
        T = self.diffusion.T if T is None else T
        return list(self.diffusion.anchor_timesteps) or default_anchor_timesteps(T)

    def lambdas(self, count: int) -> list[float]:
        lam = list(self.diffusion.lambda_sas)
        return lam * count if len(lam) == 1 else lam

    def validate(self) -> "RunConfig":
        """Check every section against the consuming modules; raise :class:`ConfigError`."""
        try:
            self._validate()
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        return self

    def _validate(self) -> None:
        mc = self.model_config()
        if not 1 <= self.model.vocab <= 256:
            raise ConfigError("model.vocab must lie in [1, 256]")
        if self.model.layers < 1 or self.model.d_ff < 1:
            raise ConfigError("model.layers and model.d_ff must be >= 1")
        dif = self.diffusion
        if dif.schedule not in SCHEDULE_KINDS:
            raise ConfigError(f"diffusion.schedule must be one of {SCHEDULE_KINDS}")
        make_schedule(dif.schedule, dif.T)
        self._check_anchors(dif.T)
        if dif.lambda_aux < 0:
            raise ConfigError("diffusion.lambda_aux must be >= 0")
        t = self.train
        for name in ("steps", "checkpoint_every"):
            if getattr(t, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if t.n < 1 or t.batch_size < 1:
            raise ConfigError("train.n and train.batch_size must be >= 1")
        if dif.segment_count and not 1 <= dif.segment_count <= t.n:
            raise ConfigError("diffusion.segment_count must lie in [1, train.n]")
        if t.lr < 0 or t.warmup < 0 or t.weight_decay < 0 or t.clip < 0:
            raise ConfigError("optimizer settings must be non-negative")
        for path_key in ("corpus", "vocab_file", "resume"):
            path = getattr(t, path_key)
            if path and not Path(path).is_file():
                raise ConfigError(f"train.{path_key}: no such file {path!r}")
        if t.vocab_file and not t.corpus:
            raise ConfigError("train.vocab_file needs train.corpus")
        s = self.sample
        if s.order not in (1, 2):
            raise ConfigError("sample.order must be 1 or 2")
        if s.spacing not in ("uniform", "log_alpha_bar"):
            raise ConfigError("sample.spacing must be uniform or log_alpha_bar")
        if s.count < 1 or s.n < 1 or s.guidance_eta < 0:
            raise ConfigError("sample.count and sample.n must be >= 1, guidance_eta >= 0")
        if not 1 <= s.steps <= dif.T:
            raise ConfigError("sample.steps must lie in [1, diffusion.T]")
        if s.checkpoint and not Path(s.checkpoint).is_file():
            raise ConfigError(f"sample.checkpoint: no such file {s.checkpoint!r}")
        b = self.bench
        if not b.lengths or min(b.lengths) < 1 or min(b.time_lengths, default=1) < 1:
            raise ConfigError("bench lengths must be positive and non-empty")
        if b.reps < 1 or b.d % b.heads:
            raise ConfigError("bench.reps must be >= 1 and bench.heads must divide bench.d")
        a = self.ablate
        for tog in a.toggles:
            parse_toggle(tog)
        if a.train_steps < 0 or a.eval_n < 1:
            raise ConfigError("ablate.train_steps must be >= 0 and ablate.eval_n >= 1")
        w = self.sweep
        for kind in w.kinds:
            if kind not in SCHEDULE_KINDS:
                raise ConfigError(f"sweep.kinds: unknown schedule {kind!r}")
        if not w.kinds or not w.steps or not w.lambdas:
            raise ConfigError("sweep grid axes must be non-empty")
        for T in w.steps:
            make_schedule("linear", T)
            if self.diffusion.anchor_timesteps:
                self._check_anchors(T)
            if w.sampler_steps > T:
                raise ConfigError("sweep.sampler_steps must not exceed any sweep step count")
        if any(lam < 0 for lam in w.lambdas):
            raise ConfigError("sweep.lambdas must be non-negative")
        if w.seeds < 2 or w.oracle_trajectories < 2 or w.sampler_steps < 1:
            raise ConfigError("sweep.seeds and sweep.oracle_trajectories must be >= 2")
        if not 0 <= self.mask.layer < mc.hsa.layers_L or self.mask.n < 1:
            raise ConfigError("mask.n must be >= 1 and mask.layer within the layer range")
        pr = self.params
        if not pr.expert_counts or min(pr.expert_counts) < self.model.k:
            raise ConfigError("params.expert_counts must be non-empty and each count >= model.k")
        if pr.capacity <= 0:
            raise ConfigError("params.capacity must be positive")
        make_grid(dif.T, s.steps, "uniform")

    def _check_anchors(self, T: int) -> None:
        ts = self.anchor_timesteps(T)
        if any(not 0 < t < T for t in ts):
            raise ConfigError(f"anchor timesteps {ts} must lie strictly inside (0, {T})")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigError("anchor timesteps must be strictly increasing")
        lam = self.lambdas(len(ts))
        if len(lam) != len(ts):
            raise ConfigError("diffusion.lambda_sas needs one value or one per anchor timestep")
        if any(v < 0 for v in lam):
            raise ConfigError("diffusion.lambda_sas must be non-negative")


def parse_toggle(tog: str) -> tuple[str, int | None]:
    """``"window=512"`` -> ``("window", 512)``; ``"no_hsa"`` -> ``("no_hsa", None)``."""
    name, eq, value = tog.partition("=")
    if not eq:
        if name in ("full", "no_hsa", "no_des", "no_both"):
            return name, None
    elif name in ("steps", "window"):
        try:
            v = int(value)
        except ValueError:
            v = 0
        if v >= 1:
            return name, v
    raise ConfigError(f"unknown ablation toggle {tog!r}")


def load_config(path: str | Path | None = None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    """Read ``path`` (optional), apply ``section.key=value`` overrides and validate."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(f"{section}.{key}", value)
    for item in overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        cfg.set(key.strip(), value)
    return cfg.validate()
