"""Experiment configuration: INI files with a fixed schema.

Every value a run depends on lives in the file, so a config plus its seed
determines all outputs.  Presets ship as ``l3d/presets/<name>.ini``.
Floats are written with ``repr`` so they round-trip exactly.

Schema (section: keys)::

    experiment: name, seed
    task:       kind, sparsity, lo, hi, a_lo, a_hi, group_size
    model:      layer_dims, activations, biases, tied
    toy:        n_data, epochs, batch_size, lr, beta1, beta2, eps,
                weight_decay, mirror_init
    l3d:        n_v, rank, k, epochs, batch_size, lr, lr_decay,
                decay_every, n_data, divergence, beta1, beta2, adam_eps,
                weight_decay, loss_eps
    sweep:      n_v, rank                  (comma-separated lists)
    analysis:   n_inputs, delta_lo, delta_hi, delta_count, magnitude,
                n_refs, n_per_group
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .decomposition import DecompositionConfig
from .errors import ConfigError
from .models import TASK_KINDS, MlpSpec, ToyTrainConfig, make_task

PRESETS = ("tms", "tmcs", "highrank", "square")


@dataclass
class TaskConfig:
    kind: str = "tms"
    sparsity: float = 0.05
    lo: float = 0.0
    hi: float = 1.0
    a_lo: float = 0.0
    a_hi: float = 3.0
    group_size: int = 1


@dataclass
class AnalysisConfig:
    n_inputs: int = 1000
    delta_lo: float = -1.0
    delta_hi: float = 1.0
    delta_count: int = 21
    magnitude: float = 0.3
    n_refs: int = 10
    n_per_group: int = 100

    def deltas(self):
        return np.linspace(self.delta_lo, self.delta_hi, self.delta_count)


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    task: TaskConfig
    model: MlpSpec
    toy: ToyTrainConfig
    l3d: DecompositionConfig
    sweep_n_v: tuple = ()
    sweep_rank: tuple = ()
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def validate(self):
        if self.task.kind not in TASK_KINDS:
            raise ConfigError(f"unknown task kind {self.task.kind!r}")
        if self.model.n_in * self.model.n_out == 0:
            raise ConfigError("model extents must be positive")
        self.l3d.validate()
        if self.toy.epochs < 1 or self.toy.batch_size < 1 or self.toy.n_data < 1:
            raise ConfigError("toy epochs, batch_size and n_data must be positive")
        if self.analysis.delta_count < 1 or self.analysis.n_inputs < 1:
            raise ConfigError("analysis needs at least one delta and one input")
        return self

    def with_seed(self, seed):
        return replace(self, seed=int(seed))

    def make_task(self, rng):
        """The task this config describes; linear tasks draw ``A`` from ``rng``."""
        t, m = self.task, self.model
        return make_task(t.kind, rng, n_in=m.n_in, n_out=m.n_out, sparsity=t.sparsity, lo=t.lo, hi=t.hi,
                         group_size=t.group_size, a_range=(t.a_lo, t.a_hi))

    # -- serialization -------------------------------------------------------

    def to_ini(self):
        """Canonical text form; equal configs give equal text."""
        m = self.model
        sections = {
            "experiment": {"name": self.name, "seed": self.seed},
            "task": _dc_items(self.task),
            "model": {
                "layer_dims": list(m.layer_dims),
                "activations": list(m.activations),
                "biases": list(m.biases),
                "tied": m.tied,
            },
            "toy": _dc_items(self.toy),
            "l3d": _dc_items(self.l3d),
            "sweep": {"n_v": list(self.sweep_n_v), "rank": list(self.sweep_rank)},
            "analysis": _dc_items(self.analysis),
        }
        lines = []
        for sec, items in sections.items():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {_fmt(v)}" for k, v in items.items())
            lines.append("")
        return "\n".join(lines)

    def hash(self):
        return hashlib.sha256(self.to_ini().encode()).hexdigest()[:16]


def _dc_items(obj):
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


# ---------------------------------------------------------------------------
# parsing


def _parse_bool(s):
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _split(s):
    return [t.strip() for t in s.split(",") if t.strip()]


def _coerce(text, like):
    if isinstance(like, bool):
        return _parse_bool(text)
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text.strip()


def _fill(cls, section, items, defaults=None):
    base = defaults if defaults is not None else cls()
    known = {f.name for f in fields(cls)}
    kw = {}
    for key, text in items.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        try:
            kw[key] = _coerce(text, getattr(base, key))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    return replace(base, **kw)


def _parser_for(source):
    parser = configparser.ConfigParser(interpolation=None)
    path = Path(str(source))
    try:
        if path.is_file():
            parser.read_string(path.read_text(), str(path))
        elif str(source) in PRESETS:
            text = resources.files("l3d").joinpath("presets").joinpath(f"{source}.ini").read_text()
            parser.read_string(text, f"preset:{source}")
        else:
            raise ConfigError(f"{source!r} is neither a config file nor a preset ({', '.join(PRESETS)})")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {source}: {exc}") from None
    return parser


def apply_overrides(parser, overrides):
    """``overrides``: iterable of ``section.key=value`` strings."""
    for item in overrides:
        lhs, sep, value = item.partition("=")
        sec, dot, key = lhs.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if not parser.has_section(sec):
            parser.add_section(sec)
        parser.set(sec, key, value.strip())


def load_config(source, overrides=()):
    parser = _parser_for(source)
    apply_overrides(parser, overrides)
    known = {"experiment", "task", "model", "toy", "l3d", "sweep", "analysis"}
    for sec in parser.sections():
        if sec not in known:
            raise ConfigError(f"unknown section [{sec}]")
    get = lambda sec: dict(parser.items(sec)) if parser.has_section(sec) else {}

    exp = get("experiment")
    unknown = set(exp) - {"name", "seed"}
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [experiment]")
    task = _fill(TaskConfig, "task", get("task"))

    model_items = get("model")
    unknown = set(model_items) - {"layer_dims", "activations", "biases", "tied"}
    if unknown or not {"layer_dims", "activations", "biases"} <= set(model_items):
        raise ConfigError("[model] needs exactly layer_dims, activations, biases and optionally tied")
    try:
        model = MlpSpec(
            tuple(int(x) for x in _split(model_items["layer_dims"])),
            tuple(_split(model_items["activations"])),
            tuple(_parse_bool(x) for x in _split(model_items["biases"])),
            _parse_bool(model_items.get("tied", "false")),
        )
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}") from None

    toy = _fill(ToyTrainConfig, "toy", get("toy"))
    l3d_items = get("l3d")
    rank_text = l3d_items.pop("rank", None)
    l3d = _fill(DecompositionConfig, "l3d", l3d_items)
    if rank_text is not None:
        try:
            l3d = replace(l3d, rank=int(rank_text))
        except ValueError:
            raise ConfigError(f"[l3d] rank must be an integer, got {rank_text!r}") from None

    sweep = get("sweep")
    unknown = set(sweep) - {"n_v", "rank"}
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [sweep]")
    try:
        sweep_n_v = tuple(int(x) for x in _split(sweep.get("n_v", "")))
        sweep_rank = tuple(int(x) for x in _split(sweep.get("rank", "")))
        seed = int(exp.get("seed", "0"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    analysis = _fill(AnalysisConfig, "analysis", get("analysis"))
    cfg = ExperimentConfig(
        name=exp.get("name", task.kind),
        seed=seed,
        task=task,
        model=model,
        toy=toy,
        l3d=l3d,
        sweep_n_v=sweep_n_v,
        sweep_rank=sweep_rank,
        analysis=analysis,
    )
    return cfg.validate()
