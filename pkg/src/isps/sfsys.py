"""Strict-feedback plants and the two case studies (magnetic levitation, two-link arm).

A :class:`StrictFeedbackSystem` stacks ``h`` blocks of dimension ``n``::

    d/dt xi_i = f_i(xi_1..xi_i) + b_i * xi_{i+1}     (i < h)
    d/dt xi_h = f_h(xi_1..xi_h) + G(xi) @ v

where the drifts ``f_i`` are black boxes (used for data generation and
simulation only) and ``b_i`` / ``G`` are known. ``G`` is either a constant
scalar or a state-dependent invertible n x n map.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Drift = Callable[[np.ndarray], np.ndarray]
InputGain = Callable[[np.ndarray], np.ndarray]

# numerically singular inertia matrices are rejected above this condition number
SINGULAR_COND = 1e12


class SingularInputGainError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by per-coordinate bounds."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lower)
        hi = tuple(float(v) for v in self.upper)
        if len(lo) != len(hi) or not lo:
            raise ValueError("lower and upper must be non-empty and of equal length")
        for k, (a, b) in enumerate(zip(lo, hi)):
            if not a < b:
                raise ValueError(f"box coordinate {k}: lower {a} must be < upper {b}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.array(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.array(self.upper)

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lo - tol) and np.all(x <= self.hi + tol))

    def sub(self, stop: int) -> "Box":
        """Leading ``stop`` coordinates."""
        return Box(self.lower[:stop], self.upper[:stop])

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return self.lo + rng.random((count, self.dim)) * self.width


@dataclass(frozen=True)
class StrictFeedbackSystem:
    h: int
    n: int
    drift_oracles: tuple[Drift, ...]
    gains: tuple[float, ...]  # b_1..b_{h-1}
    input_gain: float | InputGain  # b_h or G(xi)
    domain: Box
    name: str = "custom"
    # physical floors applied during simulation (e.g. flux^2 >= 0)
    state_floor: tuple[float, ...] | None = None
    # training samples below these values are rejected
    sample_floor: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.h < 1 or self.n < 1:
            raise ValueError("h and n must be >= 1")
        if len(self.drift_oracles) != self.h:
            raise ValueError(f"need {self.h} drift oracles, got {len(self.drift_oracles)}")
        if len(self.gains) != self.h - 1:
            raise ValueError(f"need {self.h - 1} gains b_1..b_(h-1), got {len(self.gains)}")
        object.__setattr__(self, "gains", tuple(float(b) for b in self.gains))
        if any(b == 0 for b in self.gains):
            raise ValueError("all gains b_i must be nonzero")
        if not callable(self.input_gain):
            b = float(self.input_gain)
            if b == 0:
                raise ValueError("constant input gain b_h must be nonzero")
            object.__setattr__(self, "input_gain", b)
        if self.domain.dim != self.h * self.n:
            raise ValueError(f"domain has {self.domain.dim} coordinates, expected {self.h * self.n}")

    @property
    def dim(self) -> int:
        return self.h * self.n

    def block(self, x: np.ndarray, i: int) -> np.ndarray:
        """State block ``xi_i`` (1-based)."""
        return x[(i - 1) * self.n:i * self.n]

    def nu(self, x: np.ndarray, i: int) -> np.ndarray:
        """Concatenation ``xi_1..xi_i``."""
        return x[:i * self.n]

    def b(self, i: int) -> float:
        """Known gain b_i for 1 <= i < h; b_0 = 0 by convention."""
        if i == 0:
            return 0.0
        return self.gains[i - 1]

    def drift(self, i: int, nu_i: np.ndarray) -> np.ndarray:
        return np.asarray(self.drift_oracles[i - 1](np.asarray(nu_i, dtype=float)), dtype=float).reshape(self.n)

    def input_matrix(self, x: np.ndarray) -> np.ndarray:
        if callable(self.input_gain):
            return np.asarray(self.input_gain(x), dtype=float).reshape(self.n, self.n)
        return self.input_gain * np.eye(self.n)

    def apply_input_inverse(self, x: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Solve ``G(x) v = w`` for the input ``v``."""
        if not callable(self.input_gain):
            return np.asarray(w, dtype=float) / self.input_gain
        G = self.input_matrix(x)
        if self.n == 1:
            if G[0, 0] == 0 or not np.isfinite(G[0, 0]):
                raise SingularInputGainError(f"input gain is singular at {x}")
            return np.asarray(w, dtype=float) / G[0, 0]
        if _cond(G) > SINGULAR_COND:
            raise SingularInputGainError(f"input gain is numerically singular at {x}")
        return np.linalg.solve(G, w)

    def rhs(self, x, v) -> np.ndarray:
        """Assembled true dynamics."""
        x = np.asarray(x, dtype=float)
        v = np.asarray(v, dtype=float).reshape(self.n)
        out = np.empty(self.dim)
        for i in range(1, self.h + 1):
            d = self.drift(i, self.nu(x, i))
            if i < self.h:
                d = d + self.b(i) * self.block(x, i + 1)
            else:
                d = d + self.input_matrix(x) @ v
            out[(i - 1) * self.n:i * self.n] = d
        return out

    def apply_floor(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        if self.state_floor is None:
            return x, False
        fl = np.asarray(self.state_floor)
        hit = x < fl
        if np.any(hit):
            return np.where(hit, fl, x), True
        return x, False

    def admissible(self, x: np.ndarray) -> bool:
        if self.sample_floor is None:
            return True
        return bool(np.all(np.asarray(x) >= np.asarray(self.sample_floor)))

    def check_input_gain(self, per_dim: int = 5) -> float:
        """Smallest singular value of G over a grid of the domain (floors applied)."""
        from .gpreg import uniform_grid

        grid = uniform_grid(self.domain.lower, self.domain.upper, per_dim)
        smin = np.inf
        for x in grid:
            x, _ = self.apply_floor(x)
            smin = min(smin, float(np.linalg.svd(self.input_matrix(x), compute_uv=False).min()))
        if not smin > 0:
            raise SingularInputGainError("input gain is singular somewhere on the domain")
        return smin


# --- magnetic levitation -----------------------------------------------------

@dataclass(frozen=True)
class MaglevParams:
    """Ball mass M, gravity g, coil resistance R, coil constant alpha.

    Defaults are chosen for this repository (the case study fixes
    only the kernels); M = 1 puts the levitation flux 2*alpha*M*g inside the state box.
    """

    M: float = 1.0
    g: float = 9.81
    R: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        for k in ("M", "g", "R", "alpha"):
            if not getattr(self, k) > 0:
                raise ValueError(f"maglev parameter {k} must be positive")


MAGLEV_DOMAIN = Box((0.0, -6.0, 0.0), (4.0, 6.0, 18.0))
MAGLEV_STATE_FLOOR = 1e-9
MAGLEV_SAMPLE_FLOOR = 1e-6


def maglev_rhs(params: MaglevParams, state, v) -> np.ndarray:
    x1, x2, x3 = (float(s) for s in state)
    if x3 < 0:
        raise ValueError(f"maglev flux state must be >= 0, got {x3}")
    v = float(np.asarray(v).reshape(-1)[0])
    return np.array([
        x2 / params.M,
        x3 / (2 * params.alpha) - params.M * params.g,
        -(2 * params.R / params.alpha) * (1 - x1) * x3 + 2 * np.sqrt(x3) * v,
    ])


def maglev_system(params: MaglevParams | None = None, domain: Box = MAGLEV_DOMAIN) -> StrictFeedbackSystem:
    p = params or MaglevParams()
    k3 = 2 * p.R / p.alpha
    drifts = (
        lambda nu: np.zeros(1),
        lambda nu: np.array([-p.M * p.g]),
        lambda nu: np.array([-k3 * (1 - nu[0]) * nu[2]]),
    )

    def gain(x):
        if x[2] < 0:
            raise SingularInputGainError(f"flux state {x[2]} < 0")
        return np.array([[2 * np.sqrt(x[2])]])

    return StrictFeedbackSystem(
        h=3, n=1, drift_oracles=drifts, gains=(1 / p.M, 1 / (2 * p.alpha)), input_gain=gain,
        domain=domain, name="maglev",
        state_floor=(-np.inf, -np.inf, MAGLEV_STATE_FLOOR),
        sample_floor=(-np.inf, -np.inf, MAGLEV_SAMPLE_FLOOR),
    )


# --- two-link manipulator ----------------------------------------------------

@dataclass(frozen=True)
class TwoLinkParams:
    """Link mass m, link length l, gravity a_g (repository defaults)."""

    m: float = 1.0
    l: float = 1.0
    a_g: float = 9.81

    def __post_init__(self):
        for k in ("m", "l", "a_g"):
            if not getattr(self, k) > 0:
                raise ValueError(f"two-link parameter {k} must be positive")


TWOLINK_DOMAIN = Box((-3.0, -3.0, -0.1, -0.1), (3.0, 3.0, 0.1, 0.1))


def twolink_matrices(params: TwoLinkParams, q, qd):
    """Inertia M(q), velocity terms H(q, qd) and gravity c(q)."""
    t1, t2 = q
    w1, w2 = qd
    ml2 = params.m * params.l**2
    c2 = np.cos(t2)
    M = ml2 * np.array([[5 / 3 + c2, 1 / 3 + c2 / 2], [1 / 3 + c2 / 2, 1 / 3]])
    H = ml2 * np.sin(t2) * np.array([-0.5 * w2**2 - w1 * w2, 0.5 * w1**2])
    c = params.m * params.a_g * params.l * np.array([
        1.5 * np.cos(t1) + 0.5 * np.cos(t1 + t2),
        0.5 * np.cos(t1 + t2),
    ])
    return M, H, c


def _cond(G: np.ndarray) -> float:
    """2-norm condition number; closed form for 2x2 (this sits on the control path)."""
    if G.shape != (2, 2):
        return float(np.linalg.cond(G))
    fro2 = float(np.sum(G * G))
    det = abs(G[0, 0] * G[1, 1] - G[0, 1] * G[1, 0])
    if det == 0 or not np.isfinite(fro2):
        return np.inf
    s1sq = 0.5 * (fro2 + np.sqrt(max(fro2 * fro2 - 4 * det * det, 0.0)))
    return float(s1sq / det)


def _cond_sym2(M: np.ndarray) -> float:
    """2-norm condition number of a symmetric 2x2 matrix from its eigenvalues."""
    a, b, d = M[0, 0], M[0, 1], M[1, 1]
    mid, rad = 0.5 * (a + d), np.hypot(0.5 * (a - d), b)
    lo, hi = abs(mid - rad), abs(mid + rad)
    lo, hi = min(lo, hi), max(lo, hi)
    return np.inf if lo == 0 else hi / lo


def _checked_inertia(M: np.ndarray) -> np.ndarray:
    if _cond_sym2(M) > SINGULAR_COND:
        raise SingularInputGainError("inertia matrix is numerically singular")
    return M


def twolink_rhs(params: TwoLinkParams, state, torque) -> np.ndarray:
    s = np.asarray(state, dtype=float)
    tau = np.asarray(torque, dtype=float).reshape(2)
    M, H, c = twolink_matrices(params, s[:2], s[2:])
    M = _checked_inertia(M)
    acc = np.linalg.solve(M, -H - c) + np.linalg.solve(M, tau)
    return np.concatenate([s[2:], acc])


def twolink_system(params: TwoLinkParams | None = None, domain: Box = TWOLINK_DOMAIN) -> StrictFeedbackSystem:
    p = params or TwoLinkParams()

    def f2(nu):
        M, H, c = twolink_matrices(p, nu[:2], nu[2:])
        return np.linalg.solve(_checked_inertia(M), -H - c)

    def gain(x):
        M, _, _ = twolink_matrices(p, x[:2], x[2:])
        return np.linalg.inv(_checked_inertia(M))

    return StrictFeedbackSystem(
        h=2, n=2, drift_oracles=(lambda nu: np.zeros(2), f2), gains=(1.0,), input_gain=gain,
        domain=domain, name="twolink",
    )


def as_strict_feedback(plant, params=None, domain: Box | None = None) -> StrictFeedbackSystem:
    """Map a plant onto the strict-feedback template.

    ``plant`` is ``"maglev"``, ``"twolink"``, a parameter object of either, an
    existing :class:`StrictFeedbackSystem`, or a dict describing a user system
    with keys ``h, n, drifts, gains, input_gain, lower, upper``.
    """
    if isinstance(plant, StrictFeedbackSystem):
        return plant
    if isinstance(plant, MaglevParams):
        plant, params = "maglev", plant
    elif isinstance(plant, TwoLinkParams):
        plant, params = "twolink", plant
    if plant == "maglev":
        return maglev_system(params, domain or MAGLEV_DOMAIN)
    if plant == "twolink":
        return twolink_system(params, domain or TWOLINK_DOMAIN)
    if isinstance(plant, dict):
        missing = {"h", "n", "drifts", "gains", "input_gain", "lower", "upper"} - set(plant)
        if missing:
            raise ValueError(f"user system is missing {sorted(missing)}")
        gains: Sequence = plant["gains"]
        if any(not isinstance(b, (int, float)) for b in gains):
            raise ValueError("user system gains b_i must be known real constants")
        return StrictFeedbackSystem(
            h=int(plant["h"]), n=int(plant["n"]), drift_oracles=tuple(plant["drifts"]), gains=tuple(gains),
            input_gain=plant["input_gain"], domain=Box(tuple(plant["lower"]), tuple(plant["upper"])),
            name=plant.get("name", "custom"),
        )
    raise ValueError(f"cannot express plant {plant!r} in strict-feedback form")
