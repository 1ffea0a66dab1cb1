"""Synthetic full-order hybrid systems used as the ground-truth environment."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import GenerationExhausted, InvalidParams, LcsReduceError, SchemaError
from .lcs import (EXPLOSION_BOUND, MODE_THRESHOLD, LcsParams, count_distinct_modes,
                  lcs_step, mode_signature)

log = logging.getLogger(__name__)

ENV_SCHEMA = "lcsreduce.env/1"
SCREEN_HORIZON = 20
SCREEN_BOUND = 1e4
MAX_ATTEMPTS = 100


def make_rng(*key):
    """Counter-based generator (Philox) keyed by a tuple of non-negative ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


@dataclass(frozen=True)
class EnvConfig:
    """Recipe for a random full-order LCS.

    Attributes
    ----------
    n, m, R_full : int
        State, input and multiplier dimensions.
    scale : float
        Half-width of the uniform draw for every block except ``A``.
    a_scale : float
        Half-width for ``A`` before spectral rescaling.
    spectral_radius : float or None
        ``A`` is shrunk so its spectral radius does not exceed this value.
    """

    n: int = 6
    m: int = 2
    R_full: int = 8
    scale: float = 1.0
    a_scale: float = 0.5
    spectral_radius: float | None = 1.0
    seed: int = 0
    x0_range: float = 4.0
    u_range: float = 10.0

    def __post_init__(self):
        if min(self.n, self.m, self.R_full) < 1:
            raise ValueError("n, m and R_full must be at least 1")
        if self.scale < 0 or self.a_scale < 0:
            raise ValueError("matrix scales must be non-negative")
        if self.x0_range <= 0 or self.u_range <= 0:
            raise ValueError("sampling ranges must be positive")
        if self.spectral_radius is not None and self.spectral_radius <= 0:
            raise ValueError("spectral_radius must be positive")


def sample_x0(cfg: EnvConfig, rng) -> np.ndarray:
    return rng.uniform(-cfg.x0_range, cfg.x0_range, size=cfg.n)


def random_policy(cfg: EnvConfig, rng) -> np.ndarray:
    return rng.uniform(-cfg.u_range, cfg.u_range, size=cfg.m)


class Environment:
    """Stateless dynamics ``theta_f`` plus an append-only log of mode signatures."""

    def __init__(self, theta: LcsParams, cfg: EnvConfig | None = None,
                 threshold: float = MODE_THRESHOLD):
        self.theta = theta
        self.cfg = cfg if cfg is not None else EnvConfig(n=theta.n, m=theta.m, R_full=theta.r)
        self.threshold = threshold
        self.steps = 0
        self._log: list[int] = []

    @property
    def signatures(self):
        return tuple(self._log)

    def clone(self):
        """Fresh handle sharing ``theta`` with an empty log."""
        return Environment(self.theta, self.cfg, self.threshold)

    def merge_log(self, other: "Environment"):
        self._log.extend(other._log)
        self.steps += other.steps

    def distinct_modes(self):
        return len(set(self._log))

    def step(self, x, u, lam0=None):
        x_next, lam = lcs_step(self.theta, x, u, lam0=lam0)
        self._log.append(mode_signature(lam, self.threshold))
        self.steps += 1
        return x_next, lam

    def to_dict(self):
        return {"schema": ENV_SCHEMA, "config": asdict(self.cfg), "threshold": self.threshold,
                "theta": self.theta.to_dict()}

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict) or doc.get("schema") != ENV_SCHEMA:
            got = doc.get("schema") if isinstance(doc, dict) else type(doc).__name__
            raise SchemaError(f"expected schema {ENV_SCHEMA!r}, got {got!r}")
        try:
            cfg = EnvConfig(**doc["config"])
            threshold = float(doc.get("threshold", MODE_THRESHOLD))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed environment document: {exc}") from exc
        theta = LcsParams.from_dict(doc["theta"])
        if theta.dims != (cfg.n, cfg.m, cfg.R_full):
            raise SchemaError(f"matrix dims {theta.dims} disagree with config "
                              f"{(cfg.n, cfg.m, cfg.R_full)}")
        return cls(theta, cfg, threshold)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)

    def signatures_to_csv(self, path):
        width = max(1, (self.theta.r + 3) // 4)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "signature"])
            for i, sig in enumerate(self._log):
                w.writerow([i, f"{sig:0{width}x}"])


def env_step(env: Environment, x, u):
    """One step of the full-order system; the signature is logged on ``env``."""
    return env.step(x, u)


def _draw_params(cfg: EnvConfig, rng):
    n, m, r = cfg.n, cfg.m, cfg.R_full
    s = cfg.scale
    A = rng.uniform(-cfg.a_scale, cfg.a_scale, size=(n, n))
    rho = float(np.max(np.abs(np.linalg.eigvals(A)))) if n else 0.0
    if cfg.spectral_radius is not None and rho > cfg.spectral_radius:
        log.debug("rescaling A from spectral radius %.3f to %.3f", rho, cfg.spectral_radius)
        A = A * (cfg.spectral_radius / rho)
    blocks = {"A": A}
    for name, shape in (("B", (n, m)), ("C", (n, r)), ("d", (n,)), ("D", (r, n)),
                        ("E", (r, m)), ("G", (r, r)), ("H", (r, r)), ("c", (r,))):
        blocks[name] = rng.uniform(-s, s, size=shape)
    return LcsParams(**blocks)


def _screen(theta: LcsParams, cfg: EnvConfig, rng) -> bool:
    x = sample_x0(cfg, rng)
    lam = None
    for _ in range(SCREEN_HORIZON):
        try:
            x, lam = lcs_step(theta, x, random_policy(cfg, rng), lam0=lam)
        except LcsReduceError:
            return False
        if not np.all(np.isfinite(x)) or np.linalg.norm(x) > SCREEN_BOUND:
            return False
    return True


def generate_full_lcs(cfg: EnvConfig, max_attempts: int = MAX_ATTEMPTS) -> Environment:
    """Draw a random full-order LCS passing a short random-policy screening rollout.

    Attempt ``k`` uses the Philox stream keyed by ``(seed, k)``, so the result
    is a pure function of ``cfg``.

    Raises
    ------
    InvalidParams
        If the draw cannot satisfy the definiteness invariant (e.g. ``scale=0``).
    GenerationExhausted
        If every attempt fails screening.
    """
    last_invalid = None
    for attempt in range(max_attempts):
        rng = make_rng(cfg.seed, attempt)
        try:
            theta = _draw_params(cfg, rng)
        except InvalidParams as exc:
            last_invalid = exc
            if cfg.scale == 0:
                raise
            continue
        if _screen(theta, cfg, rng):
            if attempt:
                log.info("environment accepted on attempt %d", attempt)
            return Environment(theta, cfg)
    if last_invalid is not None:
        raise GenerationExhausted(f"no valid draw in {max_attempts} attempts: {last_invalid}")
    raise GenerationExhausted(f"all {max_attempts} draws failed the stability screen; "
                              "consider a smaller matrix scale")


def random_rollout(env: Environment, x0, horizon, rng, bound=EXPLOSION_BOUND):
    """Roll the environment under the uniform random policy.

    Returns ``(states, inputs, lams)``; stops early (truncating the arrays)
    if the state norm exceeds ``bound``.
    """
    cfg = env.cfg
    states = [np.asarray(x0, dtype=float)]
    inputs, lams = [], []
    lam = None
    for _ in range(horizon):
        u = random_policy(cfg, rng)
        x, lam = env.step(states[-1], u, lam0=lam)
        inputs.append(u)
        lams.append(lam)
        states.append(x)
        if np.linalg.norm(x) > bound:
            break
    return np.array(states), np.array(inputs).reshape(-1, cfg.m), np.array(lams).reshape(-1, env.theta.r)


def random_policy_modes(env: Environment, n_rollouts, horizon, rng):
    """Distinct full-order modes visited by ``n_rollouts`` random-policy rollouts."""
    probe = env.clone()
    for _ in range(n_rollouts):
        random_rollout(probe, sample_x0(env.cfg, rng), horizon, rng)
    return probe.distinct_modes()


__all__ = ["EnvConfig", "Environment", "env_step", "generate_full_lcs", "make_rng",
           "random_policy", "random_policy_modes", "random_rollout", "sample_x0",
           "count_distinct_modes"]
