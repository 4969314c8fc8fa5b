"""Model-error bounds for the learned drifts and their Monte-Carlo check.

All vector norms here are infinity norms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import cho_solve
from scipy.stats import beta as beta_dist

from .gpreg import GpModel, SeKernelParams, posterior_mean
from .sfsys import Box

PROBABILISTIC = "probabilistic"
DETERMINISTIC = "deterministic"


class RadicandError(ValueError):
    """B^2 - y^T (K + s^2 I)^{-1} y + N < 0: the RKHS bound B is too small."""

    def __init__(self, output_dim: int, value: float):
        super().__init__(f"negative radicand {value:.6g} in the deterministic bound for output dimension "
                         f"{output_dim}; the RKHS bound B is too small for this data")
        self.output_dim = output_dim


@dataclass(frozen=True)
class ErrorBound:
    """Per-subsystem model-error bound ``||f_i - mu_i|| <= eta_norm[i] * rho_bar_norm[i]``."""

    kind: str
    eta_norm: tuple[float, ...]
    rho_bar_norm: tuple[float, ...]
    epsilon: float = 0.0
    interval: "ProbabilityInterval | None" = None
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in (PROBABILISTIC, DETERMINISTIC):
            raise ValueError(f"unknown bound kind {self.kind!r}")
        object.__setattr__(self, "eta_norm", tuple(float(v) for v in self.eta_norm))
        object.__setattr__(self, "rho_bar_norm", tuple(float(v) for v in self.rho_bar_norm))
        if len(self.eta_norm) != len(self.rho_bar_norm):
            raise ValueError("eta_norm and rho_bar_norm need one entry per subsystem")
        if any(v < 0 for v in self.eta_norm + self.rho_bar_norm):
            raise ValueError("bound entries must be nonnegative")
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.kind == DETERMINISTIC and self.epsilon != 0:
            raise ValueError("deterministic bounds carry epsilon = 0")

    @property
    def values(self) -> tuple[float, ...]:
        return tuple(e * r for e, r in zip(self.eta_norm, self.rho_bar_norm))

    @property
    def probability(self) -> float:
        return 1.0 - self.epsilon

    @classmethod
    def from_thresholds(cls, thresholds: Sequence[float], rho_bar_norm: Sequence[float], epsilon: float,
                        interval=None, seed=None) -> "ErrorBound":
        """Probabilistic bound whose products are preset thresholds (eta derived from them)."""
        eta = [t / r if r > 0 else 0.0 for t, r in zip(thresholds, rho_bar_norm)]
        return cls(PROBABILISTIC, tuple(eta), tuple(rho_bar_norm), epsilon, interval, seed)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "eta_norm": list(self.eta_norm),
            "rho_bar_norm": list(self.rho_bar_norm),
            "product": list(self.values),
            "epsilon": self.epsilon,
            "interval": None if self.interval is None else self.interval.to_dict(),
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ProbabilityInterval:
    lower: float
    upper: float
    confidence: float
    realizations: int
    successes: int = field(default=0)

    def __post_init__(self):
        if not (0 <= self.lower <= self.upper <= 1):
            raise ValueError(f"invalid interval [{self.lower}, {self.upper}]")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")

    def contains(self, p: float) -> bool:
        return self.lower <= p <= self.upper

    @property
    def width(self) -> float:
        return self.upper - self.lower

    def to_dict(self) -> dict:
        return {"lower": self.lower, "upper": self.upper, "confidence": self.confidence,
                "realizations": self.realizations, "successes": self.successes}


def probabilistic_eta(B, sigma: float, gamma_info, epsilon: float, n: int, h: int):
    """eta_j = B_j + sigma * sqrt(2 (gamma_j + 1 + ln(1/eps_nh))) with eps_nh = eps / (n h).

    ``epsilon`` may equal ``n * h`` (eps_nh = 1) to reproduce the degenerate
    zero-log case; otherwise it must lie in (0, 1). Returns (eta, ||eta||_inf).
    """
    B = np.atleast_1d(np.asarray(B, dtype=float))
    g = np.atleast_1d(np.asarray(gamma_info, dtype=float))
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if not (0 < epsilon < 1 or epsilon == n * h):
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    if np.any(B < 0) or np.any(g < 0):
        raise ValueError("B and gamma must be nonnegative")
    eps_nh = epsilon / (n * h)
    eta = B + sigma * np.sqrt(2.0 * (g + 1.0 + math.log(1.0 / eps_nh)))
    return eta, float(np.max(eta))


def kernel_gradient_norm(kernel: SeKernelParams) -> float:
    """sup over pairs of ||d k(x, x') / d x||_inf for the SE kernel.

    Along coordinate j the derivative is signal^2 * (r / l_j^2) * exp(-r^2 / (2 l_j^2)),
    maximal at r = l_j with value signal^2 * exp(-1/2) / l_j.
    """
    return kernel.signal_std**2 * math.exp(-0.5) / min(kernel.length_scales)


def rkhs_bound_from_lipschitz(L: float, kernel: SeKernelParams, domain: Box | None = None) -> float:
    """B = L / sqrt(2 ||dk/dx||) for a function with |f(x) - f(x')| <= L sqrt(||x - x'||).

    ``domain`` is accepted for interface symmetry; the SE gradient maximum is
    attained at separation l_j, which any box wider than l_j contains.
    ``L = 0`` (a constant-free, identically zero drift) gives ``B = 0``.
    """
    if not L >= 0:
        raise ValueError("the Hoelder-type constant must be nonnegative")
    return L / math.sqrt(2.0 * kernel_gradient_norm(kernel))


def estimate_holder_constant(fn: Callable[[np.ndarray], np.ndarray], domain: Box, samples: int = 20000,
                             seed: int = 0) -> np.ndarray:
    """Empirical sup of |f_j(x) - f_j(x')| / sqrt(||x - x'||_inf) over random pairs, per output."""
    rng = np.random.default_rng(seed)
    a = domain.sample(rng, samples)
    b = domain.sample(rng, samples)
    # half the pairs are short-range so the local behaviour is probed too
    half = samples // 2
    b[:half] = np.clip(a[:half] + (b[:half] - a[:half]) * 0.02, domain.lo, domain.hi)
    fa = np.array([fn(x) for x in a])
    fb = np.array([fn(x) for x in b])
    dist = np.max(np.abs(a - b), axis=1)
    ok = dist > 0
    ratio = np.abs(fa[ok] - fb[ok]) / np.sqrt(dist[ok])[:, None]
    return ratio.max(axis=0)


def estimate_sup_norm(fn: Callable[[np.ndarray], np.ndarray], domain: Box, samples: int = 20000,
                      seed: int = 0) -> np.ndarray:
    """Empirical max of |f_j(x)| over uniform samples, per output."""
    pts = domain.sample(np.random.default_rng(seed), samples)
    return np.max(np.abs(np.array([np.atleast_1d(fn(x)) for x in pts])), axis=0)


def rkhs_norm_floor(sup_abs: float, kernel: SeKernelParams) -> float:
    """Lower bound sup|f| / signal_std on the RKHS norm (reproducing property).

    No valid bound B can be smaller; in particular the Hoelder route returns
    zero for a constant drift although its RKHS norm is not zero.
    """
    return float(sup_abs) / kernel.signal_std


def deterministic_eta(model: GpModel, B):
    """eta~_j = sqrt(B_j^2 - y_j^T (K_j + s^2 I)^{-1} y_j + N), reusing the model's factors."""
    B = np.broadcast_to(np.asarray(B, dtype=float), (model.output_dim,))
    N = model.data.size
    eta = np.empty(model.output_dim)
    for j in range(model.output_dim):
        quad = 0.0
        if N:
            y = model.data.targets[:, j]
            quad = float(y @ cho_solve((model.chol[j], True), y))
        rad = B[j] ** 2 - quad + N
        if rad < 0:
            raise RadicandError(j, rad)
        eta[j] = math.sqrt(rad)
    return eta, float(np.max(eta))


def clopper_pearson(successes: int, trials: int, confidence: float) -> tuple[float, float]:
    """Exact two-sided binomial interval."""
    if trials < 1 or not 0 <= successes <= trials:
        raise ValueError("need 0 <= successes <= trials and trials >= 1")
    a = 1.0 - confidence
    lo = 0.0 if successes == 0 else float(beta_dist.ppf(a / 2, successes, trials - successes + 1))
    hi = 1.0 if successes == trials else float(beta_dist.isf(a / 2, successes + 1, trials - successes))
    return lo, hi


def monte_carlo_interval(success: Callable[[np.ndarray], np.ndarray], domain: Box, samples: int,
                         confidence: float, seed: int, chunk: int = 8192) -> ProbabilityInterval:
    """Uniform sampling in ``domain``; ``success`` maps a batch (m, d) to booleans.

    Chunk c draws from its own stream ``default_rng([seed, c])``, so the
    sample set depends only on the seed and chunk size.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    hits = 0
    for c, start in enumerate(range(0, samples, chunk)):
        m = min(chunk, samples - start)
        pts = domain.sample(np.random.default_rng([seed, c]), m)
        hits += int(np.count_nonzero(success(pts)))
    lo, hi = clopper_pearson(hits, samples, confidence)
    return ProbabilityInterval(lo, hi, confidence, samples, hits)


def model_errors(model: GpModel, truth: Callable[[np.ndarray], np.ndarray], pts: np.ndarray) -> np.ndarray:
    """||f(x) - mu(x)||_inf for each row of ``pts``."""
    mu = posterior_mean(model, pts)
    f = np.array([truth(p) for p in pts]).reshape(mu.shape)
    return np.max(np.abs(f - mu), axis=1)


def estimate_bound_probability(model: GpModel, truth: Callable[[np.ndarray], np.ndarray], threshold: float,
                               domain: Box, samples: int = 100000, confidence: float = 1 - 1e-10,
                               rng_seed: int = 0) -> ProbabilityInterval:
    """Interval for P(||f(x) - mu(x)|| <= threshold) with x uniform on ``domain``."""
    if samples < 1000:
        raise ValueError("use at least 1000 samples")
    return monte_carlo_interval(lambda pts: model_errors(model, truth, pts) <= threshold, domain, samples,
                                confidence, rng_seed)


def _joint_ratios(models: Sequence[GpModel], truths: Sequence[Callable], scales: Sequence[float],
                  pts: np.ndarray) -> np.ndarray:
    """max_i ||f_i - mu_i|| / scale_i per row of full-state points."""
    out = np.zeros(len(pts))
    for m, f, s in zip(models, truths, scales):
        err = model_errors(m, f, pts[:, :m.input_dim])
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(err == 0, 0.0, err / s) if s > 0 else np.where(err == 0, 0.0, np.inf)
        out = np.maximum(out, r)
    return out


def estimate_joint_probability(models: Sequence[GpModel], truths: Sequence[Callable], thresholds: Sequence[float],
                               domain: Box, samples: int = 100000, confidence: float = 1 - 1e-10,
                               rng_seed: int = 0) -> ProbabilityInterval:
    """Interval for P(||f_i(x) - mu_i(x)|| <= t_i for every subsystem i), x uniform on the full box."""
    if samples < 1000:
        raise ValueError("use at least 1000 samples")
    if len(models) != len(truths) or len(models) != len(thresholds):
        raise ValueError("need one model, oracle and threshold per subsystem")
    return monte_carlo_interval(lambda pts: _joint_ratios(models, truths, thresholds, pts) <= 1.0, domain,
                                samples, confidence, rng_seed)


def calibrate_eta(models: Sequence[GpModel], truths: Sequence[Callable], rho_bar_norm: Sequence[float],
                  domain: Box, target: float, samples: int = 100000, confidence: float = 1 - 1e-10,
                  rng_seed: int = 0, chunk: int = 8192) -> tuple[float, ProbabilityInterval]:
    """Smallest common eta whose thresholds eta * rho_bar_i pass with interval lower bound >= target.

    Uses the same per-chunk sample streams as :func:`monte_carlo_interval`, so
    re-evaluating the returned thresholds reproduces the returned interval.
    """
    if not 0 < target < 1:
        raise ValueError("target probability must lie in (0, 1)")
    if samples < 1000:
        raise ValueError("use at least 1000 samples")
    ratios = []
    for c, start in enumerate(range(0, samples, chunk)):
        pts = domain.sample(np.random.default_rng([rng_seed, c]), min(chunk, samples - start))
        ratios.append(_joint_ratios(models, truths, rho_bar_norm, pts))
    r = np.sort(np.concatenate(ratios))
    if clopper_pearson(samples, samples, confidence)[0] < target:
        raise ValueError(f"{samples} samples cannot certify probability {target} at confidence {confidence}")
    # lower bound grows with the success count; bisect on the count
    lo, hi = 1, samples
    while lo < hi:
        mid = (lo + hi) // 2
        if clopper_pearson(mid, samples, confidence)[0] >= target:
            hi = mid
        else:
            lo = mid + 1
    eta = float(r[lo - 1])
    # ties above the cut still count as successes at this eta
    hits = int(np.count_nonzero(r <= eta))
    if not np.isfinite(eta):
        raise ValueError("model error is unbounded relative to a zero rho_bar")
    lo_p, hi_p = clopper_pearson(hits, samples, confidence)
    return eta, ProbabilityInterval(lo_p, hi_p, confidence, samples, hits)
