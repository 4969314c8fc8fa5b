"""Incremental-stability certificate for the closed loop and its numerical checks.

With ``V(z, z') = ||z - z'||^2`` in transformed coordinates the closed loop
satisfies ``dV/dt <= -k V + ||du||^2 + c_tilde``, which yields

    d(t) <= 6 exp(-k t) d0^2 + 3 / (e k) * ||du||^2 + c,   c = 3 c_tilde / (e k)

for the metric ``d(x, x') = ||phi(x) - phi(x')||_2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .backstep import BacksteppingController, GainConditionError, transform, verify_gains
from .bounds import ErrorBound
from .simkit import TrajectoryPair


@dataclass(frozen=True)
class IspsCertificate:
    gains: tuple[float, ...]
    lipschitz: np.ndarray
    k_per_subsystem: tuple[float, ...]
    k: float
    c_tilde: float
    c: float
    probability: float
    bound_kind: str = ""

    def beta(self, r, s):
        return 6.0 * np.exp(-self.k * np.asarray(s)) * np.asarray(r) ** 2

    def gamma(self, r):
        return 3.0 / (math.e * self.k) * np.asarray(r) ** 2

    def to_dict(self) -> dict:
        return {
            "gains": list(self.gains),
            "lipschitz": np.asarray(self.lipschitz).tolist(),
            "k_per_subsystem": list(self.k_per_subsystem),
            "k": self.k,
            "c_tilde": self.c_tilde,
            "c": self.c,
            "probability": self.probability,
            "bound_kind": self.bound_kind,
        }


def decay_rates(gains: Sequence[float], L: np.ndarray) -> tuple[float, ...]:
    h = len(gains)
    L = np.asarray(L, dtype=float).reshape(max(h - 1, 0), max(h - 1, 0))
    ks = []
    for i in range(1, h + 1):
        s = float(np.sum(L[i - 2, :i - 1])) if i >= 2 else 0.0
        if i == h:
            ks.append(2 * gains[i - 1] - 3 - 2 * s)
        else:
            ks.append(2 * gains[i - 1] - 2 - 2 * s)
    return tuple(ks)


def residual_offset(L: np.ndarray, bound_values: Sequence[float]) -> float:
    """c_tilde = 2 sum_k e_k^2 + 2 sum_{k>=2} sum_{j<k} L[k-1, j] e_j^2 with e = eta * rho_bar."""
    e2 = np.asarray(bound_values, dtype=float) ** 2
    h = len(e2)
    L = np.asarray(L, dtype=float).reshape(max(h - 1, 0), max(h - 1, 0))
    total = 2.0 * float(np.sum(e2))
    for k in range(2, h + 1):
        total += 2.0 * float(np.sum(L[k - 2, :k - 1] * e2[:k - 1]))
    return total


def build_certificate(gains: Sequence[float], L, bound: ErrorBound) -> IspsCertificate:
    gains = tuple(float(g) for g in gains)
    h = len(gains)
    if len(bound.values) != h:
        raise ValueError(f"bound covers {len(bound.values)} subsystems, controller has {h}")
    L = np.array(L, dtype=float).reshape(max(h - 1, 0), max(h - 1, 0))
    verify_gains(gains, L)
    ks = decay_rates(gains, L)
    k = min(ks)
    if not k > 0:
        raise GainConditionError(f"decay rate k = {k} is not positive")
    c_tilde = residual_offset(L, bound.values)
    c = 3.0 * c_tilde / (math.e * k)
    L.setflags(write=False)
    return IspsCertificate(gains, L, ks, k, c_tilde, c, bound.probability, bound.kind)


def closeness(ctrl: BacksteppingController, x, x_prime) -> float:
    """d(x, x') = ||phi(x) - phi(x')||_2."""
    return float(np.linalg.norm(transform(ctrl, x) - transform(ctrl, x_prime)))


def closeness_bound(cert: IspsCertificate, d0: float, delta_u_sup: float, t) -> np.ndarray | float:
    if d0 < 0 or delta_u_sup < 0 or np.any(np.asarray(t) < 0):
        raise ValueError("d0, delta_u_sup and t must be nonnegative")
    out = cert.beta(d0, t) + cert.gamma(delta_u_sup) + cert.c
    return float(out) if np.ndim(out) == 0 else out


def _transformed(ctrl, states) -> np.ndarray:
    return np.array([transform(ctrl, x) for x in states])


@dataclass
class VerificationReport:
    times: np.ndarray
    closeness: np.ndarray
    bound: np.ndarray
    max_violation: float  # max(d - bound); positive means the bound broke
    violations: int
    first_violation_time: float | None
    final_closeness: float
    initial_closeness: float
    delta_u_sup: float

    def summary(self) -> dict:
        return {
            "max_violation": self.max_violation,
            "violations": self.violations,
            "first_violation_time": self.first_violation_time,
            "final_closeness": self.final_closeness,
            "initial_closeness": self.initial_closeness,
            "delta_u_sup": self.delta_u_sup,
        }


def input_gap(pair: TrajectoryPair) -> np.ndarray:
    """Euclidean ||u_hat(t) - u_hat'(t)|| along the grid."""
    return np.linalg.norm(pair.u_hat - pair.u_hat_prime, axis=1)


def verify_bound(cert: IspsCertificate, ctrl: BacksteppingController, pair: TrajectoryPair,
                 zeta: tuple[np.ndarray, np.ndarray] | None = None) -> VerificationReport:
    z, zp = zeta if zeta is not None else (_transformed(ctrl, pair.x), _transformed(ctrl, pair.x_prime))
    d = np.linalg.norm(z - zp, axis=1)
    du = float(np.max(input_gap(pair)))
    t = pair.times - pair.times[0]
    bound = closeness_bound(cert, float(d[0]), du, t)
    excess = d - bound
    bad = np.flatnonzero(excess > 0)
    return VerificationReport(
        times=pair.times, closeness=d, bound=np.asarray(bound), max_violation=float(np.max(excess)),
        violations=int(bad.size), first_violation_time=float(pair.times[bad[0]]) if bad.size else None,
        final_closeness=float(d[-1]), initial_closeness=float(d[0]), delta_u_sup=du,
    )


def lyapunov_values(ctrl: BacksteppingController, pair: TrajectoryPair,
                    zeta: tuple[np.ndarray, np.ndarray] | None = None) -> np.ndarray:
    z, zp = zeta if zeta is not None else (_transformed(ctrl, pair.x), _transformed(ctrl, pair.x_prime))
    return np.sum((z - zp) ** 2, axis=1)


def lyapunov_residual(cert: IspsCertificate, ctrl: BacksteppingController, pair: TrajectoryPair,
                      zeta: tuple[np.ndarray, np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
    """r(t) = dV/dt + k V - ||du||^2 - c_tilde along the pair; returns (r, V).

    dV/dt is a second-order finite difference on the time grid.
    """
    V = lyapunov_values(ctrl, pair, zeta)
    Vdot = np.gradient(V, pair.times, edge_order=2)
    r = Vdot + cert.k * V - input_gap(pair) ** 2 - cert.c_tilde
    return r, V


def residual_pass_fraction(r: np.ndarray, V: np.ndarray, rel_tol: float = 1e-6) -> float:
    return float(np.mean(r <= rel_tol * np.maximum(1.0, V)))
