"""Fixed-step simulation and training-data generation."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .backstep import BacksteppingController, control_law
from .gpreg import Dataset
from .sfsys import Box, StrictFeedbackSystem


class SimulationError(RuntimeError):
    def __init__(self, message: str, time: float):
        super().__init__(f"{message} at t={time:.6g}")
        self.time = time


@dataclass(frozen=True)
class SimConfig:
    t_end: float = 10.0
    dt: float = 1e-3
    method: str = "rk4"
    seed: int = 0
    clamp_to_domain: bool = False
    # scenarios that deliberately start outside the training box (and are labelled so)
    allow_initial_outside: bool = False

    def __post_init__(self):
        if not 0 < self.dt < self.t_end:
            raise ValueError(f"need 0 < dt < t_end, got dt={self.dt}, t_end={self.t_end}")
        if self.method not in ("rk4", "euler"):
            raise ValueError(f"unknown integration method {self.method!r}")

    @property
    def steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass(frozen=True)
class DataGenConfig:
    samples: int = 200
    noise_std: float = 0.01
    derivative_mode: str = "exact"  # or "finite-difference"
    sampling_time: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.derivative_mode not in ("exact", "finite-difference"):
            raise ValueError(f"unknown derivative mode {self.derivative_mode!r}")
        if self.derivative_mode == "finite-difference" and not self.sampling_time > 0:
            raise ValueError("sampling_time must be positive in finite-difference mode")


class PiecewiseConstant:
    """u(t) = values[k] for times[k] <= t < times[k+1]; constant before/after."""

    def __init__(self, times: Sequence[float], values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        if self.times.ndim != 1 or len(self.times) != len(self.values):
            raise ValueError("need one value row per breakpoint")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("breakpoints must be strictly increasing")

    @classmethod
    def constant(cls, value) -> "PiecewiseConstant":
        return cls([0.0], [np.atleast_1d(np.asarray(value, dtype=float))])

    def __call__(self, t: float) -> np.ndarray:
        k = max(int(np.searchsorted(self.times, t, side="right")) - 1, 0)
        return self.values[k]

    def sup_distance(self, other: "PiecewiseConstant") -> float:
        """sup_t ||self(t) - other(t)||_inf over all breakpoints of either signal."""
        pts = np.union1d(self.times, other.times)
        return float(max(np.max(np.abs(self(t) - other(t))) for t in pts))


def as_signal(u) -> PiecewiseConstant:
    if isinstance(u, PiecewiseConstant):
        return u
    if callable(u):
        raise TypeError("pass a PiecewiseConstant or a constant vector")
    return PiecewiseConstant.constant(u)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (T, d)
    inputs: np.ndarray  # plant input v, (T, n)
    u_hat: np.ndarray  # external input, (T, n)
    clamp_events: int = 0
    domain_exits: int = 0


@dataclass
class TrajectoryPair:
    times: np.ndarray
    x: np.ndarray
    x_prime: np.ndarray
    u_hat: np.ndarray
    u_hat_prime: np.ndarray
    first: Trajectory | None = None
    second: Trajectory | None = None

    def __post_init__(self):
        T = len(self.times)
        if not (len(self.x) == len(self.x_prime) == len(self.u_hat) == len(self.u_hat_prime) == T):
            raise ValueError("trajectory pair arrays must have equal lengths")
        if T > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("times must be strictly increasing")


def _rk4(f, t, x, dt):
    k1 = f(t, x)
    k2 = f(t + dt / 2, x + dt / 2 * k1)
    k3 = f(t + dt / 2, x + dt / 2 * k2)
    k4 = f(t + dt, x + dt * k3)
    return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def integrate_field(field: Callable[[float, np.ndarray], np.ndarray], x0, t_end: float, dt: float,
                    method: str = "rk4") -> tuple[np.ndarray, np.ndarray]:
    """Plain fixed-step integration of ``x' = field(t, x)``; returns (times, states)."""
    steps = int(round(t_end / dt))
    x = np.asarray(x0, dtype=float).copy()
    times = np.arange(steps + 1) * dt
    out = np.empty((steps + 1, x.size))
    out[0] = x
    for k in range(steps):
        if method == "rk4":
            x = _rk4(field, times[k], x, dt)
        else:
            x = x + dt * field(times[k], x)
        out[k + 1] = x
    return times, out


def integrate(system: StrictFeedbackSystem, controller: BacksteppingController | None, x0, u_hat,
              cfg: SimConfig) -> Trajectory:
    """Integrate the true plant, open loop (``u_hat`` is the plant input) or closed loop.

    Each RK substep re-evaluates the control law. Physical floors of the plant
    are always enforced; the domain box only when ``cfg.clamp_to_domain``.
    Both count as clamp events. Leaving the domain box is counted either way.
    """
    sig = as_signal(u_hat)
    x = np.asarray(x0, dtype=float).copy()
    if x.shape != (system.dim,):
        raise ValueError(f"x0 must have shape ({system.dim},)")
    if not cfg.allow_initial_outside and not system.domain.contains(x, tol=1e-12):
        raise ValueError(f"initial state {x} is outside the domain")
    dom = system.domain

    def plant_input(t, state):
        if controller is None:
            return sig(t)
        return control_law(controller, state, sig(t))

    def field(t, state):
        state, _ = system.apply_floor(state)
        return system.rhs(state, plant_input(t, state))

    steps = cfg.steps
    times = np.arange(steps + 1) * cfg.dt
    states = np.empty((steps + 1, system.dim))
    inputs = np.empty((steps + 1, system.n))
    uhats = np.empty((steps + 1, system.n))
    clamps = exits = 0
    for k in range(steps + 1):
        t = times[k]
        states[k] = x
        uhats[k] = sig(t)
        try:
            inputs[k] = plant_input(t, x)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SimulationError(f"control evaluation failed ({exc})", t) from exc
        if k == steps:
            break
        try:
            if cfg.method == "rk4":
                x = _rk4(field, t, x, cfg.dt)
            else:
                x = x + cfg.dt * field(t, x)
        except (np.linalg.LinAlgError, ValueError) as exc:
            raise SimulationError(f"dynamics evaluation failed ({exc})", t) from exc
        if not np.all(np.isfinite(x)):
            raise SimulationError("non-finite state", times[k + 1])
        x, hit = system.apply_floor(x)
        clamps += hit
        if not dom.contains(x):
            exits += 1
            if cfg.clamp_to_domain:
                x = np.clip(x, dom.lo, dom.hi)
                clamps += 1
    return Trajectory(times, states, inputs, uhats, clamps, exits)


def simulate_pair(system: StrictFeedbackSystem, controller: BacksteppingController | None, x0, x0_prime,
                  u_hat, u_hat_prime, cfg: SimConfig) -> TrajectoryPair:
    a = integrate(system, controller, x0, u_hat, cfg)
    b = integrate(system, controller, x0_prime, u_hat_prime, cfg)
    return TrajectoryPair(a.times, a.states, b.states, a.u_hat, b.u_hat, a, b)


def generate_dataset(system: StrictFeedbackSystem, i: int, cfg: DataGenConfig, domain: Box | None = None) -> Dataset:
    """Noisy samples of the unknown drift f_i over the (sub)domain.

    States are drawn uniformly in the box (inadmissible ones redrawn). The
    derivative of xi_i is read from the true plant with v = 0, either exactly
    or by one RK4 step of length ``sampling_time``; the known term
    b_i xi_{i+1} is subtracted and Gaussian noise added.
    """
    if not 1 <= i <= system.h:
        raise ValueError(f"subsystem index must be in 1..{system.h}")
    domain = domain or system.domain
    rng = np.random.default_rng([cfg.seed, i])
    n = system.n
    zero = np.zeros(n)
    states = np.empty((cfg.samples, system.dim))
    filled = 0
    while filled < cfg.samples:
        cand = domain.sample(rng, cfg.samples - filled)
        ok = [c for c in cand if system.admissible(c)]
        states[filled:filled + len(ok)] = ok
        filled += len(ok)
    targets = np.empty((cfg.samples, n))
    for r, x in enumerate(states):
        if cfg.derivative_mode == "exact":
            xdot = system.rhs(x, zero)
        else:
            tau = cfg.sampling_time
            xdot = (_rk4(lambda t, s: system.rhs(system.apply_floor(s)[0], zero), 0.0, x, tau) - x) / tau
        y = xdot[(i - 1) * n:i * n]
        if i < system.h:
            y = y - system.b(i) * x[i * n:(i + 1) * n]
        targets[r] = y
    if cfg.noise_std > 0:
        targets = targets + cfg.noise_std * rng.standard_normal(targets.shape)
    # Dataset requires a positive noise level for the GP; keep a tiny floor
    return Dataset(states[:, :i * n], targets, max(cfg.noise_std, 1e-12))


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Header ``t,x1..xd,u1..un,uhat1..uhatn``; floats as ``repr``."""
    d, n = traj.states.shape[1], traj.inputs.shape[1]
    header = ["t"] + [f"x{k + 1}" for k in range(d)] + [f"u{k + 1}" for k in range(n)] + \
        [f"uhat{k + 1}" for k in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for t, x, u, uh in zip(traj.times, traj.states, traj.inputs, traj.u_hat):
            w.writerow([repr(float(t))] + [repr(float(v)) for v in (*x, *u, *uh)])


def read_trajectory_csv(path) -> Trajectory:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    arr = np.array([[float(v) for v in r] for r in rows[1:]])
    d = sum(1 for h in header if h.startswith("x"))
    n = sum(1 for h in header if h.startswith("uhat"))
    return Trajectory(arr[:, 0], arr[:, 1:1 + d], arr[:, 1 + d:1 + d + n], arr[:, 1 + d + n:])
