"""Structured run configuration.

One YAML (or JSON, which YAML parses) document with the named blocks
``env``, ``loop``, ``learner``, ``mpc``, ``solvers`` and ``experiment``.
Unknown blocks or keys are errors. Any key can be overridden from the
environment as ``LCSREDUCE_<BLOCK>__<KEY>=<yaml value>``, e.g.
``LCSREDUCE_LOOP__ITERATIONS=3``.
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .env import EnvConfig
from .errors import ConfigError
from .learner import ViolationHyper
from .loop import LoopConfig
from .solvers import NLP_MAX_INNER, NLP_MAX_OUTER, NLP_TOL, QP_TOL

ENV_PREFIX = "LCSREDUCE_"

# dims of the synthetic cases: (n, m, R_full, lam_dim)
CASES = {
    "case1": (6, 2, 8, 3),
    "case2": (10, 3, 12, 3),
    "case3": (20, 3, 15, 1),
    "case4": (20, 3, 15, 2),
    "case5": (20, 3, 15, 3),
    "case6": (20, 3, 15, 5),
    "case7": (30, 3, 15, 3),
}

ABLATION_AXES = {"T": "T", "R_new": "R_new", "R_buffer": "R_buffer", "eta": "eta"}


@dataclass(frozen=True)
class MpcSettings:
    method: str = "active-set"
    max_hops: int = 30

    def __post_init__(self):
        if self.method not in ("active-set", "transcription"):
            raise ValueError(f"method must be 'active-set' or 'transcription', got {self.method!r}")
        if self.max_hops < 0:
            raise ValueError("max_hops must be non-negative")


@dataclass(frozen=True)
class SolverSettings:
    qp_tol: float = QP_TOL
    nlp_tol: float = NLP_TOL
    nlp_max_inner: int = NLP_MAX_INNER
    nlp_max_outer: int = NLP_MAX_OUTER

    def __post_init__(self):
        if min(self.qp_tol, self.nlp_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if min(self.nlp_max_inner, self.nlp_max_outer) < 1:
            raise ValueError("iteration limits must be positive")


@dataclass(frozen=True)
class ExperimentSpec:
    """What to run: a named case or custom dims, seeds, and an optional ablation axis."""

    case: str | None = "case1"
    seeds: tuple = (0,)
    deterministic: bool = True
    parallel: int = 1
    min_success: float = 0.7
    axis: str | None = None
    grid: tuple = ()

    def __post_init__(self):
        if self.case is not None and self.case not in CASES:
            raise ValueError(f"unknown case {self.case!r}; expected one of {sorted(CASES)}")
        seeds = tuple(int(s) for s in (self.seeds if isinstance(self.seeds, (list, tuple))
                                       else (self.seeds,)))
        if not seeds:
            raise ValueError("seeds must be nonempty")
        object.__setattr__(self, "seeds", seeds)
        object.__setattr__(self, "grid", tuple(self.grid))
        if self.parallel < 1:
            raise ValueError("parallel must be at least 1")
        if not 0 < self.min_success <= 1:
            raise ValueError("min_success must be in (0, 1]")
        if self.axis is not None:
            if self.axis not in ABLATION_AXES:
                raise ValueError(f"unknown ablation axis {self.axis!r}; expected one of "
                                 f"{sorted(ABLATION_AXES)}")
            if not self.grid:
                raise ValueError("ablation grid must be nonempty")


@dataclass(frozen=True)
class Config:
    env: EnvConfig = field(default_factory=EnvConfig)
    loop: LoopConfig = field(default_factory=LoopConfig)
    learner: ViolationHyper = field(default_factory=ViolationHyper)
    mpc: MpcSettings = field(default_factory=MpcSettings)
    solvers: SolverSettings = field(default_factory=SolverSettings)
    experiment: ExperimentSpec = field(default_factory=ExperimentSpec)

    def loop_config(self, seed=None, **overrides):
        """The loop settings with planner and solver options folded in."""
        opts = {"max_hops": self.mpc.max_hops, "tol": self.solvers.nlp_tol,
                "max_iter": self.solvers.nlp_max_inner, "max_outer": self.solvers.nlp_max_outer}
        if seed is not None:
            overrides["seed"] = seed
        return dataclasses.replace(self.loop, planner=self.mpc.method, planner_options=opts,
                                   **overrides)

    def env_config(self, seed=None):
        return self.env if seed is None else dataclasses.replace(self.env, seed=seed)

    def hyper(self):
        return dataclasses.replace(self.learner, qp_tol=self.solvers.qp_tol)

    def to_dict(self):
        out = {}
        for name in _BLOCKS:
            body = dataclasses.asdict(getattr(self, name))
            out[name] = _plain({k: v for k, v in body.items() if k in _field_names(name)})
        return out


_BLOCKS = {"env": EnvConfig, "loop": LoopConfig, "learner": ViolationHyper,
           "mpc": MpcSettings, "solvers": SolverSettings, "experiment": ExperimentSpec}
# set from the mpc/solvers blocks, never directly
_HIDDEN = {"loop": {"planner", "planner_options"}}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _field_names(block):
    names = {f.name for f in dataclasses.fields(_BLOCKS[block])}
    return names - _HIDDEN.get(block, set())


def _env_overrides(environ):
    doc = {}
    for key, raw in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):]
        if "__" not in rest:
            raise ConfigError(f"{key}: expected {ENV_PREFIX}<BLOCK>__<KEY>")
        block, name = rest.split("__", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{key}: cannot parse value {raw!r}: {exc}") from exc
        doc.setdefault(block.lower(), {})[name] = value
    return doc


def _match_key(block, name):
    names = _field_names(block)
    if name in names:
        return name
    # environment variables arrive upper-cased
    lowered = {n.lower(): n for n in names}
    if name.lower() in lowered:
        return lowered[name.lower()]
    raise ConfigError(f"{block}.{name}: unknown key; allowed keys are {sorted(names)}")


def config_from_dict(doc, environ=None) -> Config:
    """Build a :class:`Config` from a parsed document plus environment overrides.

    When ``experiment.case`` names a preset, its dims fill ``env.n``,
    ``env.m``, ``env.R_full`` and ``loop.lam_dim`` unless set explicitly.
    """
    doc = {} if doc is None else doc
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a mapping of blocks")
    merged = {}
    for source in (doc, _env_overrides(os.environ if environ is None else environ)):
        for block, body in source.items():
            if block not in _BLOCKS:
                raise ConfigError(f"{block}: unknown block; allowed blocks are {sorted(_BLOCKS)}")
            if body is None:
                body = {}
            if not isinstance(body, dict):
                raise ConfigError(f"{block}: block must be a mapping")
            for name, value in body.items():
                merged.setdefault(block, {})[_match_key(block, str(name))] = value

    exp = merged.get("experiment", {})
    case = exp.get("case", ExperimentSpec.case)
    if case is not None and case in CASES:
        n, m, R_full, lam_dim = CASES[case]
        for key, val in (("n", n), ("m", m), ("R_full", R_full)):
            merged.setdefault("env", {}).setdefault(key, val)
        merged.setdefault("loop", {}).setdefault("lam_dim", lam_dim)

    built = {}
    for block, cls in _BLOCKS.items():
        body = merged.get(block, {})
        if block == "loop" and isinstance(body.get("eta"), list):
            body = dict(body, eta=tuple(body["eta"]))
        try:
            built[block] = cls(**body)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{block}: {exc}") from exc
    return Config(**built)


def load_config(path=None, environ=None) -> Config:
    """Parse a config file; ``None`` gives the defaults plus environment overrides."""
    if path is None:
        return config_from_dict({}, environ)
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror or exc}") from exc
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: {getattr(exc, 'problem', None) or exc}") from exc
    try:
        return config_from_dict(doc, environ)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def dump_config(cfg: Config, path):
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
