"""Linear complementarity systems: parameters, simulation, and mode bookkeeping.

An LCS evolves as::

    x_next = A x + B u + C lam + d
    0 <= lam  _|_  D x + E u + F lam + c >= 0

with ``F = G G' + H - H'`` so that ``F + F'`` is positive definite and
``lam`` is unique for every ``(x, u)``.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidParams, NoConvergence, SchemaError, SimulationError, StateExplosion
from .solvers import LCP_MAX_ITER, LCP_TOL, lcp_kernel

THETA_SCHEMA = "lcsreduce.theta/1"
MODE_THRESHOLD = 1e-6
EXPLOSION_BOUND = 1e6

# order of the flat parameter vector used by the learner and serializer
PARAM_NAMES = ("A", "B", "C", "d", "D", "E", "G", "H", "c")


def make_f(G, H):
    """Return ``G G' + H - H'``."""
    G = np.atleast_2d(np.asarray(G, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if G.shape != H.shape or G.shape[0] != G.shape[1]:
        raise ValueError("G and H must be square with equal shape")
    return G @ G.T + H - H.T


@dataclass(frozen=True, eq=False)
class LcsParams:
    """Immutable LCS parameter set ``(A, B, C, d, D, E, G, H, c)``.

    ``F`` and ``gamma`` (the smallest eigenvalue of ``F + F'``) are derived
    on construction. Arrays are made read-only.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    d: np.ndarray
    D: np.ndarray
    E: np.ndarray
    G: np.ndarray
    H: np.ndarray
    c: np.ndarray
    F: np.ndarray = field(init=False, repr=False)
    gamma: float = field(init=False, repr=False)
    lcp_step: float = field(init=False, repr=False)

    def __post_init__(self):
        mats = {}
        for name in PARAM_NAMES:
            v = np.array(getattr(self, name), dtype=float)
            v = np.atleast_1d(v) if name in ("d", "c") else np.atleast_2d(v)
            mats[name] = v
        n = mats["A"].shape[0]
        m = mats["B"].shape[1]
        r = mats["G"].shape[0]
        expected = {"A": (n, n), "B": (n, m), "C": (n, r), "d": (n,), "D": (r, n),
                    "E": (r, m), "G": (r, r), "H": (r, r), "c": (r,)}
        for name, shape in expected.items():
            if mats[name].shape != shape:
                raise InvalidParams(f"{name} has shape {mats[name].shape}, expected {shape}")
        if n < 1 or m < 1 or r < 1:
            raise InvalidParams("dimensions must be positive")
        for name, v in mats.items():
            if not np.all(np.isfinite(v)):
                raise InvalidParams(f"{name} has non-finite entries")
            v.setflags(write=False)
            object.__setattr__(self, name, v)
        F = make_f(mats["G"], mats["H"])
        gamma = float(np.linalg.eigvalsh(F + F.T)[0])
        if not gamma > 1e-10:
            raise InvalidParams(f"F + F' is not positive definite (min eig {gamma:.3g}); "
                                "G must be full rank")
        F.setflags(write=False)
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "lcp_step", 0.5 / np.linalg.norm(F, 2))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def r(self):
        return self.G.shape[0]

    @property
    def dims(self):
        return self.n, self.m, self.r

    def replace(self, **changes):
        kw = {name: getattr(self, name) for name in PARAM_NAMES}
        kw.update(changes)
        return LcsParams(**kw)

    def to_vector(self):
        return np.concatenate([getattr(self, name).ravel() for name in PARAM_NAMES])

    @staticmethod
    def shapes(n, m, r):
        return {"A": (n, n), "B": (n, m), "C": (n, r), "d": (n,), "D": (r, n),
                "E": (r, m), "G": (r, r), "H": (r, r), "c": (r,)}

    @classmethod
    def from_vector(cls, vec, n, m, r):
        vec = np.asarray(vec, dtype=float).ravel()
        total = sum(int(np.prod(s)) for s in cls.shapes(n, m, r).values())
        if vec.size != total:
            raise InvalidParams(f"parameter vector has {vec.size} entries, expected {total}")
        kw, i = {}, 0
        for name, shape in cls.shapes(n, m, r).items():
            size = int(np.prod(shape))
            kw[name] = vec[i:i + size].reshape(shape)
            i += size
        return cls(**kw)

    def allclose(self, other, atol=0.0):
        return all(np.allclose(getattr(self, k), getattr(other, k), rtol=0.0, atol=atol)
                   for k in PARAM_NAMES)

    # -- serialization -----------------------------------------------------

    def to_dict(self):
        blocks = {}
        for name in PARAM_NAMES:
            v = getattr(self, name)
            blocks[name] = {"shape": list(v.shape), "data": v.ravel().tolist()}
        return {"schema": THETA_SCHEMA,
                "dims": {"n": self.n, "m": self.m, "r": self.r},
                "blocks": blocks}

    @classmethod
    def from_dict(cls, doc):
        try:
            if doc.get("schema") != THETA_SCHEMA:
                raise SchemaError(f"expected schema {THETA_SCHEMA!r}, got {doc.get('schema')!r}")
            dims = doc["dims"]
            n, m, r = int(dims["n"]), int(dims["m"]), int(dims["r"])
            shapes = cls.shapes(n, m, r)
            kw = {}
            for name in PARAM_NAMES:
                block = doc["blocks"][name]
                if tuple(block["shape"]) != shapes[name]:
                    raise SchemaError(f"block {name} has shape {block['shape']}, "
                                      f"expected {list(shapes[name])}")
                kw[name] = np.asarray(block["data"], dtype=float).reshape(shapes[name])
        except SchemaError:
            raise
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise SchemaError(f"malformed parameter document: {exc}") from exc
        try:
            return cls(**kw)
        except InvalidParams as exc:
            raise SchemaError(str(exc)) from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path):
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)


def mode_signature(lam, threshold=MODE_THRESHOLD):
    """Bitmask with bit ``i`` set iff ``lam[i] > threshold``."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    bits = np.asarray(lam, dtype=float).ravel() > threshold
    return int(np.dot(bits, 1 << np.arange(bits.size, dtype=np.int64))) if bits.size else 0


def signature_string(sig, r):
    """Render a signature as ``r`` characters, index 0 first (``'101'``)."""
    return "".join("1" if (sig >> i) & 1 else "0" for i in range(r))


def _num(v):
    # shortest round-tripping text for a float
    return repr(float(v))


@dataclass
class Trajectory:
    """States ``x_0..x_T``, inputs, multipliers and per-step signatures."""

    states: np.ndarray
    inputs: np.ndarray
    lams: np.ndarray
    signatures: list

    def __post_init__(self):
        if not (len(self.states) == len(self.inputs) + 1 == len(self.lams) + 1
                == len(self.signatures) + 1):
            raise ValueError("inconsistent trajectory lengths")

    @property
    def horizon(self):
        return len(self.inputs)

    def to_csv(self, path):
        n = self.states.shape[1]
        m = self.inputs.shape[1]
        r = self.lams.shape[1]
        header = (["t"] + [f"x{i}" for i in range(n)] + [f"u{i}" for i in range(m)]
                  + [f"lam{i}" for i in range(r)] + ["signature"])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t in range(self.horizon):
                w.writerow([t, *map(_num, self.states[t]), *map(_num, self.inputs[t]),
                            *map(_num, self.lams[t]), signature_string(self.signatures[t], r)])
            w.writerow([self.horizon, *map(_num, self.states[-1])] + [""] * (m + r + 1))

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        n = sum(h.startswith("x") for h in header)
        m = sum(h.startswith("u") for h in header)
        r = sum(h.startswith("lam") for h in header)
        states = np.array([[float(v) for v in row[1:1 + n]] for row in body])
        inputs = np.array([[float(v) for v in row[1 + n:1 + n + m]] for row in body[:-1]])
        lams = np.array([[float(v) for v in row[1 + n + m:1 + n + m + r]] for row in body[:-1]])
        sigs = [int(row[-1][::-1], 2) for row in body[:-1]]
        return cls(states, inputs.reshape(-1, m), lams.reshape(-1, r), sigs)


def lcs_step(theta: LcsParams, x, u, lam0=None, tol=LCP_TOL, max_iter=LCP_MAX_ITER):
    """Advance one step; returns ``(x_next, lam)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (theta.n,) or u.shape != (theta.m,):
        raise ValueError(f"expected x{(theta.n,)} and u{(theta.m,)}, got {x.shape} and {u.shape}")
    q = theta.D @ x + theta.E @ u + theta.c
    lam = lcp_kernel(theta.F, q, tol=tol, max_iter=max_iter, lam0=lam0, step=theta.lcp_step)
    return theta.A @ x + theta.B @ u + theta.C @ lam + theta.d, lam


def lcs_rollout(theta: LcsParams, x0, u_seq, tol=LCP_TOL, threshold=MODE_THRESHOLD,
                bound=EXPLOSION_BOUND) -> Trajectory:
    """Open-loop rollout under ``u_seq``.

    Raises
    ------
    StateExplosion
        If some state norm exceeds ``bound``.
    SimulationError
        If an LCP solve fails; ``index`` carries the step.
    """
    u_seq = np.atleast_2d(np.asarray(u_seq, dtype=float))
    if u_seq.shape[0] == 0:
        raise ValueError("u_seq must be nonempty")
    T = u_seq.shape[0]
    states = np.empty((T + 1, theta.n))
    lams = np.empty((T, theta.r))
    states[0] = x0
    sigs = []
    for t in range(T):
        try:
            states[t + 1], lams[t] = lcs_step(theta, states[t], u_seq[t], tol=tol)
        except NoConvergence as exc:
            raise SimulationError(str(exc), t) from exc
        sigs.append(mode_signature(lams[t], threshold))
        if np.linalg.norm(states[t + 1]) > bound:
            raise StateExplosion(f"|x| exceeded {bound:g} at step {t + 1}", index=t + 1)
    return Trajectory(states, u_seq.copy(), lams, sigs)


def count_distinct_modes(items, threshold=MODE_THRESHOLD):
    """Number of distinct signatures over trajectories or multiplier arrays.

    ``items`` may mix :class:`Trajectory` objects (their stored signatures are
    used) and ``(T, r)`` arrays of multipliers.
    """
    seen = set()
    for item in items:
        if isinstance(item, Trajectory):
            seen.update(item.signatures)
        else:
            for lam in np.atleast_2d(item):
                seen.add(mode_signature(lam, threshold))
    return len(seen)
