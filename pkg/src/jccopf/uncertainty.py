"""Gaussian forecast-error model, reproducible sampling and the normal quantile."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import erfc

JITTER = 1e-12

# Acklam's rational approximation coefficients
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


class ModelError(ValueError):
    """Raised for invalid forecast models (non-PSD covariance, bad shapes)."""


def normal_cdf(x):
    return 0.5 * erfc(-np.asarray(x, dtype=float) / math.sqrt(2.0))


def normal_quantile(p):
    """Inverse standard-normal CDF, accurate to ~1e-15 relative.

    A rational first guess is polished with one Halley step on the CDF.
    Accepts scalars or arrays; returns the same kind.
    """
    p_arr = np.asarray(p, dtype=float)
    if np.any(~((p_arr > 0) & (p_arr < 1))):
        raise ValueError("normal_quantile needs 0 < p < 1")
    q = np.empty_like(p_arr)
    lo = p_arr < _P_LOW
    hi = p_arr > 1 - _P_LOW
    mid = ~(lo | hi)

    if np.any(lo):
        t = np.sqrt(-2 * np.log(p_arr[lo]))
        q[lo] = _ratio_tail(t)
    if np.any(hi):
        t = np.sqrt(-2 * np.log1p(-p_arr[hi]))
        q[hi] = -_ratio_tail(t)
    if np.any(mid):
        u = p_arr[mid] - 0.5
        r = u * u
        num = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * u
        den = ((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1
        q[mid] = num / den

    # Halley step; upper tail is refined through its complement to avoid cancellation
    upper = p_arr > 0.5
    err = np.where(upper, (1.0 - p_arr) - 0.5 * erfc(q / math.sqrt(2.0)), normal_cdf(q) - p_arr)
    u = err * math.sqrt(2 * math.pi) * np.exp(0.5 * q * q)
    q = q - u / (1 + 0.5 * q * u)
    return float(q) if q.ndim == 0 else q


def _ratio_tail(t: np.ndarray) -> np.ndarray:
    num = ((((_C[0] * t + _C[1]) * t + _C[2]) * t + _C[3]) * t + _C[4]) * t + _C[5]
    den = (((_D[0] * t + _D[1]) * t + _D[2]) * t + _D[3]) * t + 1
    return num / den


def rng_stream(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, stream...)``; streams never overlap."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


def cholesky_factor(sigma: np.ndarray) -> np.ndarray:
    """Lower factor L with L L^T = sigma; zero-variance rows stay exactly zero."""
    sigma = np.asarray(sigma, dtype=float)
    n = sigma.shape[0]
    if sigma.shape != (n, n):
        raise ModelError(f"covariance must be square, got {sigma.shape}")
    if not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12 * max(1.0, np.abs(sigma).max(initial=0))):
        raise ModelError("covariance is not symmetric")
    d = np.diag(sigma)
    if np.any(d < 0):
        k = int(np.argmax(d < 0))
        raise ModelError(f"covariance is not PSD: leading minor of order {k + 1} is negative")
    live = np.flatnonzero(d > 0)
    dead = np.flatnonzero(d == 0)
    if dead.size and np.any(sigma[dead] != 0):
        k = int(dead[np.argmax(np.any(sigma[dead] != 0, axis=1))])
        raise ModelError(f"covariance is not PSD: zero variance at node {k + 1} with nonzero covariance "
                         f"(leading minor of order {k + 2} fails)")
    L = np.zeros((n, n))
    if live.size == 0:
        return L
    sub = sigma[np.ix_(live, live)]
    try:
        Ls = np.linalg.cholesky(sub)
    except np.linalg.LinAlgError:
        try:
            Ls = np.linalg.cholesky(sub + JITTER * np.eye(live.size))
        except np.linalg.LinAlgError:
            raise ModelError(f"covariance is not PSD: {_first_bad_minor(sigma)}") from None
    L[np.ix_(live, live)] = Ls
    return L


def _first_bad_minor(sigma: np.ndarray) -> str:
    for k in range(1, sigma.shape[0] + 1):
        lam = np.linalg.eigvalsh(sigma[:k, :k]).min()
        if lam < -JITTER:
            return f"leading minor of order {k} has eigenvalue {lam:.3e}"
    return "Cholesky failed after diagonal jitter"


@dataclass(frozen=True)
class ForecastModel:
    """Available solar ``p_av ~ N(mu, sigma)`` in per-unit."""

    mu: np.ndarray
    sigma: np.ndarray
    seed: int = 0
    _chol: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=float)
        if sigma.shape != (mu.size, mu.size):
            raise ModelError(f"sigma shape {sigma.shape} does not match mu length {mu.size}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        object.__setattr__(self, "_chol", cholesky_factor(sigma))

    @property
    def n(self) -> int:
        return self.mu.size

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.diag(self.sigma))

    @property
    def cholesky(self) -> np.ndarray:
        return self._chol


@dataclass(frozen=True)
class ScenarioSet:
    samples: np.ndarray
    z: np.ndarray
    seed: int
    stream: tuple[int, ...]

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]


def sample(model: ForecastModel, count: int, stream: Sequence[int] = (0,)) -> ScenarioSet:
    """Draw ``count`` i.i.d. realizations of available solar."""
    if count < 1:
        raise ValueError("sample count must be >= 1")
    rng = rng_stream(model.seed, *stream)
    z = rng.standard_normal((count, model.n))
    samples = model.mu + z @ model.cholesky.T
    return ScenarioSet(samples=samples, z=z, seed=model.seed, stream=tuple(stream))


def load_forecast(path: str | Path) -> ForecastModel:
    doc = json.loads(Path(path).read_text())
    return ForecastModel(mu=np.array(doc["mu"]), sigma=np.array(doc["sigma"]), seed=int(doc.get("seed", 0)))


def save_forecast(model: ForecastModel, path: str | Path) -> None:
    doc = {"mu": model.mu.tolist(), "sigma": model.sigma.tolist(), "seed": model.seed}
    Path(path).write_text(json.dumps(doc))


def write_scenarios(scen: ScenarioSet, path: str | Path) -> None:
    n = scen.samples.shape[1]
    header = ",".join(f"node_{i + 1}" for i in range(n))
    np.savetxt(path, scen.samples, delimiter=",", header=header, comments="", fmt="%.12g")


def read_scenarios(path: str | Path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=1))
