"""Backstepping controller built on learned GP means.

Stage ``i`` uses the bracket

    Q_i = mu_i + b_{i-1} (xi_{i-1} - psi_{i-2}) + lam_i (xi_i - psi_{i-1})
          - sum_{j<i} d psi_{i-1}/d xi_j (mu_j + b_j xi_{j+1})

with ``psi_i = -Q_i / b_i`` for ``i < h`` and ``v = G(xi)^{-1} (-Q_h + u_hat)``
for the last stage (``psi_{-1} = psi_0 = b_0 = xi_0 = 0``).

The partial derivatives of ``psi_{i-1}`` come either from exact chain-rule
propagation through the GP mean Jacobians/Hessians (``"analytic"``, needs
h <= 3) or from nested central differences (``"finite-difference"``).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .gpreg import GpModel, load_model, uniform_grid
from .sfsys import StrictFeedbackSystem

ANALYTIC = "analytic"
FINITE_DIFFERENCE = "finite-difference"
FD_REL_STEP = 1e-5


class GainConditionError(ValueError):
    pass


class GainSelectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class Jet:
    """psi_i with its Jacobian (n, i*n) and, if computed, Hessian (n, i*n, i*n)."""

    value: np.ndarray
    jac: np.ndarray
    hess: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class BacksteppingController:
    """Gains, Lipschitz matrix and learned means for a strict-feedback plant.

    Only the known parts of ``system`` (gains b_i, input map G, domain) are
    used; the drift oracles are never called here.
    """

    system: StrictFeedbackSystem
    models: tuple[GpModel, ...]
    gains: tuple[float, ...]
    lipschitz: np.ndarray | None = None  # (h-1, h-1), entry [j-1, k-1] bounds d psi_j / d xi_k
    derivative_mode: str = ANALYTIC
    safety: float = 1.2
    model_paths: tuple[str, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        s = self.system
        if len(self.models) != s.h:
            raise ValueError(f"need {s.h} GP models, got {len(self.models)}")
        for i, m in enumerate(self.models, start=1):
            if m.input_dim != i * s.n or m.output_dim != s.n:
                raise ValueError(f"model {i} maps R^{m.input_dim} -> R^{m.output_dim}, expected "
                                 f"R^{i * s.n} -> R^{s.n}")
        object.__setattr__(self, "gains", tuple(float(g) for g in self.gains))
        if len(self.gains) != s.h:
            raise ValueError(f"need {s.h} gains, got {len(self.gains)}")
        if self.derivative_mode not in (ANALYTIC, FINITE_DIFFERENCE):
            raise ValueError(f"unknown derivative mode {self.derivative_mode!r}")
        if self.lipschitz is not None:
            L = np.array(self.lipschitz, dtype=float).reshape(s.h - 1, s.h - 1)
            L.setflags(write=False)
            object.__setattr__(self, "lipschitz", L)

    @property
    def h(self) -> int:
        return self.system.h

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def mode(self) -> str:
        # exact propagation needs Hessians of psi_{h-2}; only available for psi_1
        if self.derivative_mode == ANALYTIC and self.h <= 3:
            return ANALYTIC
        return FINITE_DIFFERENCE

    def with_gains(self, gains, lipschitz=None) -> "BacksteppingController":
        return replace(self, gains=tuple(gains), lipschitz=lipschitz)

    def fd_steps(self) -> np.ndarray:
        return FD_REL_STEP * self.system.domain.width


# --- shared pieces -----------------------------------------------------------

def _block(ctrl, x, i):
    n = ctrl.n
    return x[(i - 1) * n:i * n]


def _drive(ctrl: BacksteppingController, x: np.ndarray, i: int, means: list[np.ndarray]) -> np.ndarray:
    """Stacked model velocities (mu_j + b_j xi_{j+1}) for j < i."""
    s = ctrl.system
    return np.concatenate([means[j - 1] + s.b(j) * _block(ctrl, x, j + 1) for j in range(1, i)]) \
        if i > 1 else np.zeros(0)


def _bracket(ctrl, x, i, mu_i, psi_prev, psi_prev2, jac_prev, drive):
    s = ctrl.system
    Q = mu_i + ctrl.gains[i - 1] * (_block(ctrl, x, i) - psi_prev)
    if i >= 2:
        Q = Q + s.b(i - 1) * (_block(ctrl, x, i - 1) - psi_prev2)
        Q = Q - jac_prev @ drive
    return Q


# --- analytic recursion ------------------------------------------------------

def _analytic_jets(ctrl: BacksteppingController, x: np.ndarray, upto: int):
    """Jets of psi_1..psi_upto and the GP means/Jacobians used on the way."""
    s, n = ctrl.system, ctrl.n
    means, mjacs, jets = [], [], []
    need_hess_1 = upto >= 2
    for i in range(1, upto + 2):
        if i > s.h or i * n > x.size:
            break
        order = 2 if (i == 1 and need_hess_1) else 1
        mu, mj, mh = ctrl.models[i - 1].mean_jet(x[:i * n], order=order)
        means.append(mu)
        mjacs.append(mj)
        if i > upto:
            break
        dim = i * n
        lam = ctrl.gains[i - 1]
        b_i = s.b(i)
        eye_blk = np.zeros((n, dim))
        eye_blk[:, (i - 1) * n:] = np.eye(n)
        if i == 1:
            Q = mu + lam * x[:n]
            dQ = mj + lam * eye_blk
            hess = -mh / b_i if mh is not None else None
            jets.append(Jet(-Q / b_i, -dQ / b_i, hess))
            continue
        prev = jets[i - 2]
        prev2_val = jets[i - 3].value if i >= 3 else np.zeros(n)
        drive = _drive(ctrl, x, i, means)
        Q = _bracket(ctrl, x, i, mu, prev.value, prev2_val, prev.jac, drive)
        # d(drive)/d nu_i: block j -> [grad mu_j, 0...] + b_j E_{j+1}
        dF = np.zeros(((i - 1) * n, dim))
        for j in range(1, i):
            rows = slice((j - 1) * n, j * n)
            dF[rows, :j * n] += mjacs[j - 1]
            dF[rows, j * n:(j + 1) * n] += s.b(j) * np.eye(n)
        pad_prev = np.zeros((n, dim))
        pad_prev[:, :(i - 1) * n] = prev.jac
        dQ = mj + lam * (eye_blk - pad_prev)
        e_prev = np.zeros((n, dim))
        e_prev[:, (i - 2) * n:(i - 1) * n] = np.eye(n)
        pad_prev2 = np.zeros((n, dim))
        if i >= 3:
            pad_prev2[:, :(i - 2) * n] = jets[i - 3].jac
        dQ = dQ + s.b(i - 1) * (e_prev - pad_prev2)
        if prev.hess is None:
            raise NotImplementedError("analytic mode needs the Hessian of psi_{i-1}")
        dS = np.zeros((n, dim))
        dS[:, :(i - 1) * n] = np.einsum("acd,c->ad", prev.hess, drive)
        dS += prev.jac @ dF
        dQ = dQ - dS
        jets.append(Jet(-Q / b_i, -dQ / b_i))
    return jets, means


# --- finite-difference recursion ---------------------------------------------

def _fd_psi(ctrl: BacksteppingController, nu: np.ndarray, i: int) -> np.ndarray:
    """psi_i at ``nu = xi_1..xi_i`` with nested central differences."""
    if i == 0:
        return np.zeros(ctrl.n)
    s, n = ctrl.system, ctrl.n
    x = nu
    means = [ctrl.models[j - 1].mean_jet(x[:j * n], order=0)[0] for j in range(1, i + 1)]
    if i == 1:
        Q = means[0] + ctrl.gains[0] * x[:n]
        return -Q / s.b(1)
    prev = _fd_psi(ctrl, x[:(i - 1) * n], i - 1)
    prev2 = _fd_psi(ctrl, x[:(i - 2) * n], i - 2)
    jac_prev = _fd_jac(ctrl, x[:(i - 1) * n], i - 1)
    Q = _bracket(ctrl, x, i, means[i - 1], prev, prev2, jac_prev, _drive(ctrl, x, i, means))
    return -Q / s.b(i)


def _fd_jac(ctrl: BacksteppingController, nu: np.ndarray, i: int) -> np.ndarray:
    steps = ctrl.fd_steps()[:i * ctrl.n]
    J = np.zeros((ctrl.n, i * ctrl.n))
    for d in range(i * ctrl.n):
        e = np.zeros(i * ctrl.n)
        e[d] = steps[d]
        J[:, d] = (_fd_psi(ctrl, nu + e, i) - _fd_psi(ctrl, nu - e, i)) / (2 * steps[d])
    return J


# --- public operations -------------------------------------------------------

def psi_jet(ctrl: BacksteppingController, i: int, state) -> Jet:
    """psi_i and its Jacobian w.r.t. ``xi_1..xi_i`` (``state`` may be longer)."""
    if not 1 <= i <= ctrl.h - 1:
        raise ValueError(f"virtual control index must be in 1..{ctrl.h - 1}, got {i}")
    x = np.asarray(state, dtype=float)
    nu = x[:i * ctrl.n]
    if nu.shape != (i * ctrl.n,):
        raise ValueError(f"state must have at least {i * ctrl.n} entries")
    if ctrl.mode == ANALYTIC:
        jets, _ = _analytic_jets(ctrl, nu, i)
        return jets[-1]
    return Jet(_fd_psi(ctrl, nu, i), _fd_jac(ctrl, nu, i))


def virtual_control(ctrl: BacksteppingController, i: int, state) -> np.ndarray:
    return psi_jet(ctrl, i, state).value


def control_law(ctrl: BacksteppingController, state, u_hat) -> np.ndarray:
    """Plant input v for the measured state and external input ``u_hat``."""
    s, n, h = ctrl.system, ctrl.n, ctrl.h
    x = np.asarray(state, dtype=float)
    if x.shape != (s.dim,):
        raise ValueError(f"state must have shape ({s.dim},)")
    u_hat = np.asarray(u_hat, dtype=float).reshape(n)
    if h == 1:
        mu = ctrl.models[0].mean_jet(x, order=0)[0]
        w = -mu - ctrl.gains[0] * x + u_hat
        return s.apply_input_inverse(x, w)
    if ctrl.mode == ANALYTIC:
        jets, means = _analytic_jets(ctrl, x, h - 1)
        mu_h = means[h - 1]
        prev, prev_jac = jets[-1].value, jets[-1].jac
        prev2 = jets[-2].value if h >= 3 else np.zeros(n)
    else:
        means = [ctrl.models[j - 1].mean_jet(x[:j * n], order=0)[0] for j in range(1, h + 1)]
        mu_h = means[-1]
        prev = _fd_psi(ctrl, x[:(h - 1) * n], h - 1)
        prev_jac = _fd_jac(ctrl, x[:(h - 1) * n], h - 1)
        prev2 = _fd_psi(ctrl, x[:(h - 2) * n], h - 2)
    Q = _bracket(ctrl, x, h, mu_h, prev, prev2, prev_jac, _drive(ctrl, x, h, means))
    return s.apply_input_inverse(x, -Q + u_hat)


def transform(ctrl: BacksteppingController, state) -> np.ndarray:
    """zeta = [xi_1, xi_2 - psi_1, ..., xi_h - psi_{h-1}]."""
    x = np.asarray(state, dtype=float)
    n = ctrl.n
    z = x.copy()
    if ctrl.h == 1:
        return z
    if ctrl.mode == ANALYTIC:
        jets, _ = _analytic_jets(ctrl, x[:(ctrl.h - 1) * n], ctrl.h - 1)
        psis = [j.value for j in jets]
    else:
        psis = [_fd_psi(ctrl, x[:k * n], k) for k in range(1, ctrl.h)]
    for k in range(2, ctrl.h + 1):
        z[(k - 1) * n:k * n] = x[(k - 1) * n:k * n] - psis[k - 2]
    return z


def inverse_transform(ctrl: BacksteppingController, zeta) -> np.ndarray:
    """Recover xi from zeta block by block (xi_k = zeta_k + psi_{k-1})."""
    z = np.asarray(zeta, dtype=float)
    n = ctrl.n
    x = z.copy()
    for k in range(2, ctrl.h + 1):
        x[(k - 1) * n:k * n] = z[(k - 1) * n:k * n] + virtual_control(ctrl, k - 1, x[:(k - 1) * n])
    return x


def _block_inf_norm(J: np.ndarray) -> float:
    return float(np.max(np.sum(np.abs(J), axis=1)))


def estimate_lipschitz(ctrl: BacksteppingController, grid_per_dim: int = 25, safety: float | None = None, *,
                       stages: Sequence[int] | None = None, raw: bool = False) -> np.ndarray:
    """Grid maximum of the induced inf-norm of each block d psi_j / d xi_k, times ``safety``.

    Returns an (h-1, h-1) lower-triangular matrix. ``stages`` restricts the
    work to the listed j (other rows stay zero).
    """
    if grid_per_dim < 3:
        raise ValueError("grid_per_dim must be >= 3")
    safety = ctrl.safety if safety is None else float(safety)
    if safety < 1:
        raise ValueError("safety factor must be >= 1")
    h, n = ctrl.h, ctrl.n
    L = np.zeros((max(h - 1, 0), max(h - 1, 0)))
    dom = ctrl.system.domain
    for j in (stages if stages is not None else range(1, h)):
        grid = uniform_grid(dom.lower[:j * n], dom.upper[:j * n], grid_per_dim)
        for pt in grid:
            J = psi_jet(ctrl, j, pt).jac
            for k in range(1, j + 1):
                L[j - 1, k - 1] = max(L[j - 1, k - 1], _block_inf_norm(J[:, (k - 1) * n:k * n]))
    return L if raw else L * safety


def gain_floors(L: np.ndarray, h: int) -> np.ndarray:
    """Strict lower bounds on each gain implied by the Lipschitz matrix."""
    floors = np.empty(h)
    for i in range(1, h + 1):
        base = 1.5 if i == h else 1.0
        floors[i - 1] = base + (float(np.sum(L[i - 2, :i - 1])) if i >= 2 else 0.0)
    return floors


def verify_gains(gains: Sequence[float], L: np.ndarray) -> None:
    """Raise :class:`GainConditionError` naming the first violated inequality."""
    h = len(gains)
    L = np.asarray(L, dtype=float).reshape(max(h - 1, 0), max(h - 1, 0))
    floors = gain_floors(L, h)
    for i, (lam, fl) in enumerate(zip(gains, floors), start=1):
        if not lam > fl:
            kind = "lambda_h > 1.5 + sum_j L_(h-1,j)" if i == h else (
                "lambda_1 > 1" if i == 1 else f"lambda_{i} > 1 + sum_j L_({i - 1},j)")
            raise GainConditionError(f"gain condition {kind} violated at stage {i}: {lam} <= {fl}")


def select_gains(L: np.ndarray, margin: float, h: int | None = None,
                 fixed: Sequence[float] = ()) -> np.ndarray:
    """Smallest admissible gains plus ``margin``; a prefix may be given in ``fixed``."""
    if not margin > 0:
        raise ValueError("margin must be positive")
    L = np.asarray(L, dtype=float)
    h = L.shape[0] + 1 if h is None else h
    if np.any(L < 0):
        raise ValueError("Lipschitz entries must be nonnegative")
    lam = gain_floors(L, h) + margin
    lam[:len(fixed)] = fixed
    return lam


def synthesize_gains(system: StrictFeedbackSystem, models: Sequence[GpModel], margin: float = 0.5, *,
                     fixed: Sequence[float] = (), grid_per_dim: int = 25, safety: float = 1.2,
                     derivative_mode: str = ANALYTIC, max_passes: int = 10) -> BacksteppingController:
    """Stage-by-stage gain selection with Lipschitz re-estimation.

    psi_j depends only on lambda_1..lambda_j, so each pass fixes one more
    stage; passes repeat until gains and estimates agree or ``max_passes``
    runs out. Fixed gains are checked against the estimates, not altered.
    """
    h = system.h
    lam = np.ones(h) * 2.0
    if len(fixed) > h:
        raise ValueError(f"{len(fixed)} fixed gains given for {h} stages")
    lam[:len(fixed)] = fixed
    ctrl = BacksteppingController(system, tuple(models), tuple(lam), None, derivative_mode, safety)
    L = np.zeros((h - 1, h - 1))
    for _ in range(max_passes):
        prev = lam.copy()
        for i in range(1, h + 1):
            if i >= 2:
                L[i - 2] = estimate_lipschitz(ctrl, grid_per_dim, safety, stages=[i - 1])[i - 2]
            if i > len(fixed):
                lam[i - 1] = select_gains(L, margin, h)[i - 1]
            ctrl = ctrl.with_gains(lam)
        if np.array_equal(prev, lam) or len(fixed) == h:
            break
    else:
        raise GainSelectionError(f"gain selection did not settle after {max_passes} passes")
    verify_gains(lam, L)
    return ctrl.with_gains(lam, L)


# --- persistence -------------------------------------------------------------

def controller_to_dict(ctrl: BacksteppingController) -> dict:
    return {
        "gains": list(ctrl.gains),
        "lipschitz": None if ctrl.lipschitz is None else ctrl.lipschitz.tolist(),
        "safety": ctrl.safety,
        "derivative_mode": ctrl.derivative_mode,
        "models": list(ctrl.model_paths) if ctrl.model_paths else None,
    }


def save_controller(ctrl: BacksteppingController, path, model_paths: Sequence[str] | None = None) -> None:
    d = controller_to_dict(ctrl)
    if model_paths is not None:
        d["models"] = list(model_paths)
    Path(path).write_text(json.dumps(d, indent=2))


def load_controller(path, system: StrictFeedbackSystem) -> BacksteppingController:
    path = Path(path)
    d = json.loads(path.read_text())
    paths = tuple(d["models"])
    models = tuple(load_model(path.parent / p) for p in paths)
    return BacksteppingController(system, models, tuple(d["gains"]), d["lipschitz"], d["derivative_mode"],
                                  d["safety"], model_paths=paths)
