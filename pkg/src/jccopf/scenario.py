"""Synthetic feeder data: diurnal solar and load at five-minute resolution.

Stands in for measured irradiance and load data. Per-day amplitudes are
jittered, the forecast covariance scales with the solar level, and forecast
errors are correlated with ``rho ** hops`` between PV nodes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from jccopf.feeder import FeederModel, feeder_from_dict
from jccopf.uncertainty import ForecastModel, rng_stream

STEPS_PER_DAY = 288
DEFAULT_PV_NODES = tuple(range(29, 37))
_STREAM_DAYS = 101
_STREAM_REALIZE = 102


def bundled_feeder() -> FeederModel:
    """The shipped 37-node synthetic radial feeder (slack plus 36 nodes)."""
    text = resources.files("jccopf").joinpath("data/feeder37.json").read_text()
    return feeder_from_dict(json.loads(text))


def solar_shape(steps: int = STEPS_PER_DAY, sunrise: float = 5.5, sunset: float = 18.5) -> np.ndarray:
    """Clear-sky bell, ``sin^2`` between sunrise and sunset; peaks at noon by default."""
    hours = np.arange(steps) * 24.0 / steps
    phase = np.clip((hours - sunrise) / (sunset - sunrise), 0.0, 1.0)
    return np.sin(np.pi * phase) ** 2


def load_shape(steps: int = STEPS_PER_DAY) -> np.ndarray:
    hours = np.arange(steps) * 24.0 / steps
    morning = 0.25 * np.exp(-0.5 * ((hours - 7.5) / 1.5) ** 2)
    evening = 0.45 * np.exp(-0.5 * ((hours - 19.0) / 2.0) ** 2)
    return 0.55 + morning + evening


@dataclass(frozen=True)
class DayProfile:
    """Shape and rating parameters of the synthetic week (all powers per-unit on ``kva_base``)."""

    n_nodes: int = 36
    pv_nodes: tuple[int, ...] = DEFAULT_PV_NODES
    pv_rating: float = 0.2
    kva_base: float = 1000.0
    load_peak: tuple[float, ...] | None = None
    power_factor: float = 0.95
    forecast_sd: float = 0.08
    neighbor_corr: float = 0.9
    solar_jitter: tuple[float, float] = (0.85, 1.05)
    load_jitter: tuple[float, float] = (0.9, 1.1)
    shift_kw: float = 1.0
    steps: int = STEPS_PER_DAY
    solar: np.ndarray = field(default=None, repr=False, compare=False)
    load: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.solar is None:
            object.__setattr__(self, "solar", solar_shape(self.steps))
        if self.load is None:
            object.__setattr__(self, "load", load_shape(self.steps))
        if self.load_peak is None:
            # deterministic spread of peak loads, 20-50 kW
            k = np.arange(1, self.n_nodes + 1)
            peaks = 0.02 + 0.03 * (0.5 + 0.5 * np.sin(1.7 * k + 0.3))
            object.__setattr__(self, "load_peak", tuple(float(p) for p in peaks))
        if np.any(np.asarray(self.solar) < 0) or np.any(np.asarray(self.load) < 0):
            raise ValueError("profile shapes must be nonnegative")


@dataclass(frozen=True)
class DaySeries:
    """Forecast means and loads for consecutive days; row ``t`` is one five-minute step."""

    mu: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    scale: np.ndarray
    corr: np.ndarray
    steps_per_day: int
    seed: int

    @property
    def n_steps(self) -> int:
        return self.mu.shape[0]

    @property
    def n_days(self) -> int:
        return self.n_steps // self.steps_per_day

    def covariance(self, t: int) -> np.ndarray:
        return self.scale[t] ** 2 * self.corr

    def forecast(self, t: int, seed: int | None = None) -> ForecastModel:
        return ForecastModel(mu=self.mu[t], sigma=self.covariance(t), seed=self.seed if seed is None else seed)

    def days(self, start: int, stop: int) -> "DaySeries":
        sl = slice(start * self.steps_per_day, stop * self.steps_per_day)
        return DaySeries(self.mu[sl], self.p_load[sl], self.q_load[sl], self.scale[sl], self.corr,
                         self.steps_per_day, self.seed)

    def realize(self, seed: int | None = None) -> np.ndarray:
        """One realized available-solar trajectory (forecast plus correlated error)."""
        rng = rng_stream(self.seed if seed is None else seed, _STREAM_REALIZE)
        L = _corr_factor(self.corr)
        z = rng.standard_normal(self.mu.shape)
        return self.mu + self.scale[:, None] * (z @ L.T)


def _corr_factor(corr: np.ndarray) -> np.ndarray:
    live = np.flatnonzero(np.diag(corr) > 0)
    L = np.zeros_like(corr)
    L[np.ix_(live, live)] = np.linalg.cholesky(corr[np.ix_(live, live)])
    return L


def correlation_matrix(model: FeederModel, pv_nodes: Sequence[int], rho: float) -> np.ndarray:
    """``rho ** hops`` among PV nodes, zero elsewhere (positive definite on a tree)."""
    n = model.n_nodes
    C = np.zeros((n, n))
    idx = np.asarray(pv_nodes, dtype=int) - 1
    if model.parents is not None:
        hops = model.hop_distance()[np.ix_(idx, idx)]
    else:
        hops = np.abs(idx[:, None] - idx[None, :])
    C[np.ix_(idx, idx)] = rho ** hops
    return C


def generate_days(profile: DayProfile, n_days: int, seed: int, model: FeederModel | None = None) -> DaySeries:
    """Forecast means, loads and covariance scales for ``n_days`` synthetic days."""
    if n_days < 1:
        raise ValueError("n_days must be >= 1")
    model = bundled_feeder() if model is None else model
    n = profile.n_nodes
    if n != model.n_nodes:
        raise ValueError(f"profile has {n} nodes, feeder has {model.n_nodes}")
    rng = rng_stream(seed, _STREAM_DAYS)
    pv = np.asarray(profile.pv_nodes, dtype=int) - 1
    peaks = np.asarray(profile.load_peak, dtype=float)
    tan_phi = np.tan(np.arccos(profile.power_factor))
    solar = np.asarray(profile.solar, float)
    load = np.asarray(profile.load, float)
    shift = profile.shift_kw / profile.kva_base

    mu, pl, ql, sc = [], [], [], []
    for _ in range(n_days):
        a_sun = rng.uniform(*profile.solar_jitter)
        a_load = rng.uniform(*profile.load_jitter, size=n)
        offsets = rng.uniform(-shift, shift, size=pv.size)
        m = np.zeros((profile.steps, n))
        level = a_sun * solar
        m[:, pv] = profile.pv_rating * level[:, None] + np.where(level[:, None] > 0, offsets[None, :], 0.0)
        m = np.maximum(m, 0.0)
        p = load[:, None] * (peaks * a_load)[None, :]
        mu.append(m)
        pl.append(p)
        ql.append(p * tan_phi)
        sc.append(profile.forecast_sd * profile.pv_rating * level)
    return DaySeries(mu=np.vstack(mu), p_load=np.vstack(pl), q_load=np.vstack(ql), scale=np.concatenate(sc),
                     corr=correlation_matrix(model, profile.pv_nodes, profile.neighbor_corr),
                     steps_per_day=profile.steps, seed=int(seed))


def noon_window(steps_per_day: int = STEPS_PER_DAY, start_hour: float = 11.0, end_hour: float = 15.0) -> np.ndarray:
    hours = np.arange(steps_per_day) * 24.0 / steps_per_day
    return np.flatnonzero((hours >= start_hour) & (hours < end_hour))


def write_series(series: DaySeries, path: str | Path) -> None:
    """Per-step CSV: ``t, node, mu_pav, p_load, q_load``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "node", "mu_pav", "p_load", "q_load"])
        for t in range(series.n_steps):
            for k in range(series.mu.shape[1]):
                wr.writerow([t, k + 1, f"{series.mu[t, k]:.12g}", f"{series.p_load[t, k]:.12g}",
                             f"{series.q_load[t, k]:.12g}"])


def write_covariance(series: DaySeries, path: str | Path) -> None:
    """Shared covariance: ``Sigma_t = scale[t]**2 * corr``."""
    doc = {"scale": [float(f"{s:.12g}") for s in series.scale], "corr": series.corr.tolist(),
           "steps_per_day": series.steps_per_day, "seed": series.seed}
    Path(path).write_text(json.dumps(doc))


def read_series(csv_path: str | Path, cov_path: str | Path) -> DaySeries:
    rows = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    T = int(rows[:, 0].max()) + 1
    n = int(rows[:, 1].max())
    mu = np.zeros((T, n))
    pl = np.zeros((T, n))
    ql = np.zeros((T, n))
    t = rows[:, 0].astype(int)
    k = rows[:, 1].astype(int) - 1
    mu[t, k] = rows[:, 2]
    pl[t, k] = rows[:, 3]
    ql[t, k] = rows[:, 4]
    cov = json.loads(Path(cov_path).read_text())
    return DaySeries(mu=mu, p_load=pl, q_load=ql, scale=np.asarray(cov["scale"], float),
                     corr=np.asarray(cov["corr"], float), steps_per_day=int(cov["steps_per_day"]),
                     seed=int(cov["seed"]))
