"""Exact Gaussian-process regression with a squared-exponential kernel.

One independent GP per output dimension, zero prior mean, Cholesky-factored
Gram matrices. Besides the posterior mean and variance this module provides
analytic first and second derivatives of the posterior mean (the controller
needs them), marginal-likelihood hyperparameter fitting, and the domain-wide
maximum of the posterior standard deviation.
"""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist

log = logging.getLogger(__name__)

# pre-clamp variances more negative than this trigger a conditioning warning
NEGATIVE_VARIANCE_WARN = 1e-8


class FactorizationError(LinAlgError):
    """Cholesky factorization of K + noise^2 I failed for one output dimension."""

    def __init__(self, output_dim: int, reason: str):
        super().__init__(f"Cholesky factorization failed for output dimension {output_dim}: {reason}")
        self.output_dim = output_dim


class HyperparameterWarning(UserWarning):
    """The marginal-likelihood optimizer did not report convergence."""


@dataclass(frozen=True)
class SeKernelParams:
    """Squared-exponential kernel ``signal_std**2 * exp(-0.5 * sum(((x-y)/l)**2))``.

    ``signal_std`` is a standard deviation, so ``k(x, x) = signal_std**2``.
    """

    signal_std: float
    length_scales: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "signal_std", float(self.signal_std))
        object.__setattr__(self, "length_scales", tuple(float(v) for v in self.length_scales))
        if not self.signal_std > 0:
            raise ValueError(f"signal_std must be positive, got {self.signal_std}")
        if len(self.length_scales) == 0:
            raise ValueError("length_scales must not be empty")
        if not all(v > 0 for v in self.length_scales):
            raise ValueError(f"length scales must be positive, got {self.length_scales}")

    @property
    def dim(self) -> int:
        return len(self.length_scales)

    def to_dict(self) -> dict:
        return {"signal_std": self.signal_std, "length_scales": list(self.length_scales)}

    @classmethod
    def from_dict(cls, d: dict) -> "SeKernelParams":
        return cls(d["signal_std"], tuple(d["length_scales"]))


@dataclass(frozen=True)
class Dataset:
    """Training pairs for one subsystem: ``inputs`` (N, q), ``targets`` (N, n)."""

    inputs: np.ndarray
    targets: np.ndarray
    noise_std: float

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=float)
        y = np.asarray(self.targets, dtype=float)
        if x.ndim != 2 or y.ndim != 2:
            raise ValueError("inputs and targets must be 2-D arrays (N, dim)")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"inputs have {x.shape[0]} rows but targets have {y.shape[0]}")
        if not self.noise_std > 0:
            raise ValueError(f"noise_std must be positive, got {self.noise_std}")
        x.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "noise_std", float(self.noise_std))

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.targets.shape[1]

    def check_inside(self, lower, upper, tol: float = 0.0) -> None:
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        bad = np.any((self.inputs < lower - tol) | (self.inputs > upper + tol), axis=1)
        if np.any(bad):
            raise ValueError(f"{int(bad.sum())} dataset inputs lie outside the domain box")

    @classmethod
    def empty(cls, input_dim: int, output_dim: int, noise_std: float) -> "Dataset":
        return cls(np.zeros((0, input_dim)), np.zeros((0, output_dim)), noise_std)


def write_dataset_csv(dataset: Dataset, path) -> None:
    """Write ``x1..xq,y1..yn`` with a header row; floats use ``repr`` so reads are exact."""
    q, n = dataset.input_dim, dataset.output_dim
    header = [f"x{j + 1}" for j in range(q)] + [f"y{j + 1}" for j in range(n)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for xi, yi in zip(dataset.inputs, dataset.targets):
            w.writerow([repr(float(v)) for v in xi] + [repr(float(v)) for v in yi])


def read_dataset_csv(path, noise_std: float) -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    q = sum(1 for h in header if h.startswith("x"))
    n = sum(1 for h in header if h.startswith("y"))
    if q + n != len(header):
        raise ValueError(f"{path}: unexpected header {header}")
    arr = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), q + n)
    return Dataset(arr[:, :q], arr[:, q:], noise_std)


def _check_dims(params: SeKernelParams, *points: np.ndarray) -> None:
    for p in points:
        if p.shape[-1] != params.dim:
            raise ValueError(f"point dimension {p.shape[-1]} does not match kernel dimension {params.dim}")


def kernel_eval(params: SeKernelParams, x, y) -> float:
    """Kernel value for a single pair of points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_dims(params, x, y)
    ls = np.asarray(params.length_scales)
    return float(params.signal_std**2 * np.exp(-0.5 * np.sum(((x - y) / ls) ** 2)))


def gram(params: SeKernelParams, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Cross-covariance matrix between row sets ``X`` (A, q) and ``Y`` (B, q)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    _check_dims(params, X, Y)
    ls = np.asarray(params.length_scales)
    Xs, Ys = X / ls, Y / ls
    # cdist sums explicit differences, so the diagonal stays exact (no |a|^2+|b|^2-2ab round-off)
    d2 = cdist(Xs, Ys, "sqeuclidean")
    return params.signal_std**2 * np.exp(-0.5 * d2)


@dataclass(frozen=True, eq=False)
class GpModel:
    """Fitted posterior for one subsystem. Immutable; build it with :func:`fit`."""

    kernels: tuple[SeKernelParams, ...]
    data: Dataset
    chol: tuple[np.ndarray, ...]
    alpha: np.ndarray  # (n, N)
    _ls: np.ndarray = field(repr=False)

    @property
    def input_dim(self) -> int:
        return self.data.input_dim

    @property
    def output_dim(self) -> int:
        return len(self.kernels)

    @property
    def noise_std(self) -> float:
        return self.data.noise_std

    def mean_jet(self, query, order: int = 1):
        """Posterior mean at one point with its Jacobian (order >= 1) and Hessian (order 2).

        Returns ``(mean (n,), jac (n, q) or None, hess (n, q, q) or None)``; a single
        pass over the training set serves all three.
        """
        q = np.asarray(query, dtype=float)
        n, dim = self.output_dim, self.input_dim
        if q.shape != (dim,):
            raise ValueError(f"query must have shape ({dim},), got {q.shape}")
        mean = np.zeros(n)
        jac = np.zeros((n, dim)) if order >= 1 else None
        hess = np.zeros((n, dim, dim)) if order >= 2 else None
        if self.data.size == 0:
            return mean, jac, hess
        X = self.data.inputs
        diff = X - q  # (N, q): x_m - query
        for j, kp in enumerate(self.kernels):
            ls2 = self._ls[j] ** 2
            scaled = diff / ls2
            kv = kp.signal_std**2 * np.exp(-0.5 * np.sum(diff * scaled, axis=1))
            w = self.alpha[j] * kv
            mean[j] = np.sum(w)
            if order >= 1:
                jac[j] = w @ scaled
            if order >= 2:
                hess[j] = scaled.T @ (w[:, None] * scaled) - np.diag(np.sum(w) / ls2)
        return mean, jac, hess


def fit(dataset: Dataset, kernels: Sequence[SeKernelParams] | SeKernelParams) -> GpModel:
    """Factorize ``K + noise^2 I`` per output dimension and cache the weights."""
    if isinstance(kernels, SeKernelParams):
        kernels = [kernels] * dataset.output_dim
    kernels = tuple(kernels)
    if len(kernels) != dataset.output_dim:
        raise ValueError(f"need {dataset.output_dim} kernels (one per output), got {len(kernels)}")
    for kp in kernels:
        if kp.dim != dataset.input_dim:
            raise ValueError(f"kernel dimension {kp.dim} does not match input dimension {dataset.input_dim}")
    N = dataset.size
    noise2 = dataset.noise_std**2
    chols: list[np.ndarray] = []
    alphas = np.zeros((len(kernels), N))
    shared: dict[SeKernelParams, np.ndarray] = {}
    for j, kp in enumerate(kernels):
        y = dataset.targets[:, j]
        if not np.all(np.isfinite(y)):
            raise FactorizationError(j, "non-finite targets")
        if kp in shared:
            L = shared[kp]
        else:
            K = gram(kp, dataset.inputs, dataset.inputs) + noise2 * np.eye(N)
            try:
                L = cholesky(K, lower=True) if N else np.zeros((0, 0))
            except (LinAlgError, ValueError) as exc:
                raise FactorizationError(j, str(exc)) from exc
            L.setflags(write=False)
            shared[kp] = L
        chols.append(L)
        if N:
            alphas[j] = cho_solve((L, True), y)
    alphas.setflags(write=False)
    ls = np.array([kp.length_scales for kp in kernels], dtype=float)
    return GpModel(kernels, dataset, tuple(chols), alphas, ls)


def _as_queries(model: GpModel, query) -> tuple[np.ndarray, bool]:
    Q = np.asarray(query, dtype=float)
    single = Q.ndim == 1
    Q = np.atleast_2d(Q)
    if Q.shape[1] != model.input_dim:
        raise ValueError(f"query dimension {Q.shape[1]} does not match model input dimension {model.input_dim}")
    return Q, single


def posterior_mean(model: GpModel, query) -> np.ndarray:
    """Posterior mean; ``query`` is one point (q,) or a batch (Q, q)."""
    Q, single = _as_queries(model, query)
    out = np.zeros((Q.shape[0], model.output_dim))
    if model.data.size:
        for j, kp in enumerate(model.kernels):
            out[:, j] = gram(kp, Q, model.data.inputs) @ model.alpha[j]
    return out[0] if single else out


def posterior_var(model: GpModel, query, *, return_raw: bool = False) -> np.ndarray:
    """Posterior variance per output dimension, clamped to ``[0, k(q, q)]``.

    With ``return_raw=True`` the unclamped values are returned as well.
    """
    Q, single = _as_queries(model, query)
    raw = np.zeros((Q.shape[0], model.output_dim))
    prior = np.zeros_like(raw)
    for j, kp in enumerate(model.kernels):
        prior[:, j] = kp.signal_std**2
        raw[:, j] = prior[:, j]
        if model.data.size:
            v = solve_triangular(model.chol[j], gram(kp, model.data.inputs, Q), lower=True)
            raw[:, j] -= np.sum(v * v, axis=0)
    worst = raw.min() if raw.size else 0.0
    if worst < -NEGATIVE_VARIANCE_WARN:
        warnings.warn(
            f"posterior variance {worst:.3e} < 0 before clamping; Gram matrix is ill-conditioned",
            RuntimeWarning,
            stacklevel=2,
        )
    var = np.clip(raw, 0.0, prior)
    if single:
        var, raw = var[0], raw[0]
    return (var, raw) if return_raw else var


def mean_gradient(model: GpModel, query) -> np.ndarray:
    """Jacobian of the posterior mean, shape (n, q)."""
    return model.mean_jet(query, order=1)[1]


def mean_hessian(model: GpModel, query) -> np.ndarray:
    """Second derivatives of the posterior mean, shape (n, q, q)."""
    return model.mean_jet(query, order=2)[2]


# --- hyperparameters ---------------------------------------------------------

def log_marginal_likelihood(dataset: Dataset, params: SeKernelParams, output: int = 0,
                            *, with_grad: bool = False):
    """Log evidence of one output column; gradient is w.r.t. log(signal_std), log(l)."""
    X = dataset.inputs
    y = dataset.targets[:, output]
    N = dataset.size
    Kf = gram(params, X, X)
    K = Kf + dataset.noise_std**2 * np.eye(N)
    L = cholesky(K, lower=True)
    a = cho_solve((L, True), y)
    lml = -0.5 * y @ a - np.sum(np.log(np.diag(L))) - 0.5 * N * np.log(2 * np.pi)
    if not with_grad:
        return lml
    W = np.outer(a, a) - cho_solve((L, True), np.eye(N))
    grad = np.empty(1 + params.dim)
    grad[0] = 0.5 * np.sum(W * (2.0 * Kf))
    for d, l in enumerate(params.length_scales):
        D = (X[:, None, d] - X[None, :, d]) ** 2
        grad[1 + d] = 0.5 * np.sum(W * (Kf * D / l**2))
    return lml, grad


def fit_hyperparameters(dataset: Dataset, init: SeKernelParams, output: int = 0, *,
                        n_starts: int = 3,
                        log_bounds: tuple[tuple[float, float], tuple[float, float]] = ((-9.0, 14.0), (-7.0, 16.0)),
                        scaled_start: bool = False) -> SeKernelParams:
    """Maximize the log marginal likelihood with L-BFGS-B on log-parameters.

    The noise level is held at ``dataset.noise_std``. Starts are ``init`` and
    ``n_starts - 1`` fixed perturbations of it, so the result is deterministic.
    ``scaled_start`` adds one start at (target spread, input ranges), which
    helps when ``init`` is far off in scale. It is off by default: on
    noise-only targets it tends to win with a small spurious signal, while
    the near-zero-signal optimum found from ``init`` is the useful model.
    A start that fails to converge still competes; if the winner did not
    converge a :class:`HyperparameterWarning` is emitted.
    """
    if dataset.size < 5:
        raise ValueError(f"need at least 5 samples to fit hyperparameters, got {dataset.size}")
    q = dataset.input_dim
    theta0 = np.log(np.r_[init.signal_std, init.length_scales])
    sb, lb = log_bounds
    bounds = [sb] + [lb] * q
    theta0 = np.clip(theta0, [b[0] for b in bounds], [b[1] for b in bounds])
    shifts = [np.zeros(q + 1), np.r_[0.5, np.full(q, -0.7)], np.r_[-0.5, np.full(q, 0.7)]]
    while len(shifts) < n_starts:
        k = len(shifts)
        shifts.append(np.r_[0.0, np.full(q, 0.35 * (-1) ** k * k)])

    y = dataset.targets[:, output]
    scaled = np.log(np.r_[max(float(np.std(y)), dataset.noise_std),
                          np.maximum(np.ptp(dataset.inputs, axis=0), 1e-3)])

    def neg_lml(theta):
        p = SeKernelParams(np.exp(theta[0]), tuple(np.exp(theta[1:])))
        try:
            lml, g = log_marginal_likelihood(dataset, p, output, with_grad=True)
        except LinAlgError:
            return None
        return -lml, -g

    def objective(theta, anchor, anchor_value):
        out = neg_lml(theta)
        if out is None:
            # numerically singular Gram matrix: penalize, with a slope back towards the start
            d = theta - anchor
            return anchor_value + 1e6 * (1.0 + d @ d), 2e6 * d
        return out

    first = neg_lml(theta0)
    if first is None:
        raise FactorizationError(output, "Gram matrix is singular at the initial hyperparameters")
    best = (first[0], theta0, True)
    for start in [theta0 + s for s in shifts[:n_starts]] + ([scaled] if scaled_start else []):
        start = np.clip(start, [b[0] for b in bounds], [b[1] for b in bounds])
        at_start = neg_lml(start)
        if at_start is None:
            continue
        f_start = at_start[0]
        res = minimize(objective, start, args=(start, f_start), jac=True, method="L-BFGS-B", bounds=bounds)
        if res.fun < best[0]:
            best = (float(res.fun), res.x, bool(res.success))
    if not best[2]:
        warnings.warn("L-BFGS-B did not converge; returning best parameters found", HyperparameterWarning,
                      stacklevel=2)
    theta = best[1]
    return SeKernelParams(float(np.exp(theta[0])), tuple(float(v) for v in np.exp(theta[1:])))


# --- domain maximum of the posterior standard deviation ----------------------

def uniform_grid(lower, upper, per_dim: int) -> np.ndarray:
    axes = [np.linspace(lo, hi, per_dim) for lo, hi in zip(lower, upper)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))


def max_std_over_domain(model: GpModel, lower, upper, grid_per_dim: int = 25, *,
                        refine: bool = True, chunk: int = 4096):
    """Largest posterior standard deviation over a box, per output dimension.

    Grid search followed by bounded local ascent from the best grid point.
    Returns ``(rho_bar (n,), inf-norm)``.
    """
    if grid_per_dim < 2:
        raise ValueError("grid_per_dim must be >= 2")
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    n = model.output_dim
    if model.data.size == 0:
        rho = np.array([kp.signal_std for kp in model.kernels])
        return rho, float(np.max(rho))
    grid = uniform_grid(lower, upper, grid_per_dim)
    best_var = np.full(n, -np.inf)
    best_pt = np.zeros((n, len(lower)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for start in range(0, grid.shape[0], chunk):
            pts = grid[start:start + chunk]
            v = posterior_var(model, pts)
            idx = np.argmax(v, axis=0)
            for j in range(n):
                if v[idx[j], j] > best_var[j]:
                    best_var[j] = v[idx[j], j]
                    best_pt[j] = pts[idx[j]]
        if refine:
            span = np.where(upper > lower, upper - lower, 1.0)
            for j in range(n):
                def neg(z, j=j):
                    return -posterior_var(model, lower + z * span)[j]
                z0 = (best_pt[j] - lower) / span
                res = minimize(neg, z0, method="L-BFGS-B", bounds=[(0.0, 1.0)] * len(lower),
                               options={"maxiter": 200})
                if -res.fun > best_var[j]:
                    best_var[j] = -res.fun
    rho = np.sqrt(np.maximum(best_var, 0.0))
    return rho, float(np.max(rho))


# --- persistence -------------------------------------------------------------

def model_to_dict(model: GpModel) -> dict:
    return {
        "kernels": [kp.to_dict() for kp in model.kernels],
        "noise_std": model.noise_std,
        "inputs": model.data.inputs.tolist(),
        "targets": model.data.targets.tolist(),
    }


def model_from_dict(d: dict) -> GpModel:
    q = len(d["kernels"][0]["length_scales"])
    n = len(d["kernels"])
    x = np.array(d["inputs"], dtype=float).reshape(-1, q)
    y = np.array(d["targets"], dtype=float).reshape(-1, n)
    return fit(Dataset(x, y, d["noise_std"]), [SeKernelParams.from_dict(k) for k in d["kernels"]])


def save_model(model: GpModel, path) -> None:
    import json

    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> GpModel:
    import json

    return model_from_dict(json.loads(Path(path).read_text()))
