"""Linear estimator for a small parameter shift from binned waiting-time data.

Gains are built for a declared probing time ``T``: expected counts per bin are
``nbar[m, m', i] = T * r_m * (bin-averaged w_mm') * dtau`` and the estimate is

    dtheta = sum g * n + sum C + sum_m count_gain_m * N_m + sum_m count_offset_m

with all constants folded into the offsets so that expected data at ``theta0``
gives exactly zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateInformation, GridMismatchError, ModelError
from .fisher import InformationTerms, ObserverMask, _density, default_grid, information_terms
from .lindblad import TauGrid
from .model import ParameterizedModel
from .trajectory import IntervalHistogram, batch_simulate

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GainTables:
    """Per-bin gains ``g[m, m', i]`` (theta per count), offsets and count gains for probing time ``T``."""

    grid: TauGrid
    g: np.ndarray
    offsets: np.ndarray
    count_gains: np.ndarray
    count_offsets: np.ndarray
    fisher_total_per_time: float
    T: float
    theta0: float = 0.0
    delta_max: float = float("inf")

    @property
    def n_channels(self) -> int:
        return self.g.shape[0]

    @property
    def crb_variance(self) -> float:
        return 1.0 / (self.fisher_total_per_time * self.T)


def _gains_from_terms(terms: InformationTerms, T: float, probe=None) -> GainTables:
    f = terms.poisson_term() + terms.count_term()
    if not (np.isfinite(f) and f > 0):
        raise DegenerateInformation(f"Fisher information {f:g} at theta={terms.theta:g}; no estimator exists")
    F = f * T
    dtau = terms.grid.dtau
    nbar = T * terms.density * dtau
    dnbar = T * terms.d_density * dtau
    inc = terms.included
    g = np.zeros_like(nbar)
    g[inc] = dnbar[inc] / nbar[inc] / F
    offsets = -np.sum(g * nbar, axis=2)
    M = len(terms.rates)
    count_gains = np.zeros(M)
    for m, st in enumerate(terms.stats):
        if st is None:
            continue
        N = T * terms.rates[m]
        V = T * st.variance_rate
        count_gains[m] = T * terms.d_rates[m] * (1.0 / V - 1.0 / N) / F
    count_offsets = -count_gains * T * terms.rates
    gains = GainTables(terms.grid, g, offsets, count_gains, count_offsets, f, float(T), terms.theta)
    if probe is not None:
        gains = _with_validity(gains, terms, probe)
    return gains


def _expected_data(density, rates, grid: TauGrid, T: float):
    return T * density * grid.dtau, T * rates


def _with_validity(gains: GainTables, terms: InformationTerms, probe) -> GainTables:
    """Attach ``delta_max = 0.5 * |first order| / |second order|`` from the response at ``theta0 +- step``."""
    step, (dens_minus, r_minus), (dens_plus, r_plus) = probe
    s_plus = _linear_response(gains, *_expected_data(dens_plus, r_plus, gains.grid, gains.T))
    s_minus = _linear_response(gains, *_expected_data(dens_minus, r_minus, gains.grid, gains.T))
    first = (s_plus - s_minus) / (2 * step)
    second = (s_plus + s_minus) / (2 * step ** 2)
    delta_max = 0.5 * abs(first) / abs(second) if second != 0 else float("inf")
    return GainTables(gains.grid, gains.g, gains.offsets, gains.count_gains, gains.count_offsets,
                      gains.fisher_total_per_time, gains.T, gains.theta0, float(delta_max))


def build_gains(pm: ParameterizedModel, grid: TauGrid | None, T: float, mask: ObserverMask | None = None,
                probe_validity: bool = True) -> GainTables:
    """Optimal gains at ``pm.theta0`` for a record of duration ``T``.

    ``g = F^-1 d(nbar)/nbar`` on bins above the density floor (0 elsewhere) and
    count gains ``F^-1 dN (1/V - 1/N)`` with ``F`` the total information for ``T``.
    """
    if not (np.isfinite(T) and T > 0):
        raise ModelError(f"T must be positive, got {T}", "T")
    base = pm.at()
    if mask is None:
        mask = ObserverMask.full(base.n_channels)
    if grid is None:
        grid = default_grid(pm, pm.theta0, mask)
    terms = information_terms(pm, grid, mask)
    f = terms.poisson_term() + terms.count_term()
    probe = None
    if probe_validity and np.isfinite(f) and f > 0:
        # probe at the scale of the achievable precision, one standard deviation at this T
        step = max(1.0 / np.sqrt(f * T), 10 * pm.fd_step)
        try:
            probe = (step, _density(mask.apply(pm.at(pm.theta0 - step)), grid),
                     _density(mask.apply(pm.at(pm.theta0 + step)), grid))
        except Exception as exc:      # a probe outside the ergodic region only loses the validity range
            log.warning("validity probe failed: %s", exc)
    return _gains_from_terms(terms, T, probe)


def _linear_response(gains: GainTables, counts: np.ndarray, totals: np.ndarray) -> float:
    return float(np.sum(gains.g * counts) + np.sum(gains.offsets)
                 + np.dot(gains.count_gains, totals) + np.sum(gains.count_offsets))


def estimate(gains: GainTables, hist: IntervalHistogram, counts=None) -> float:
    """Estimated shift ``theta - theta0`` from one histogram; ``counts`` defaults to ``hist.totals``."""
    if hist.grid != gains.grid:
        raise GridMismatchError(f"histogram grid {hist.grid} differs from gain grid {gains.grid}", "grid")
    if hist.counts.shape != gains.g.shape:
        raise GridMismatchError(f"histogram shape {hist.counts.shape} differs from gains {gains.g.shape}", "grid")
    totals = np.asarray(hist.totals if counts is None else counts, dtype=float)
    if np.isfinite(hist.duration) and not np.isclose(hist.duration, gains.T, rtol=1e-9):
        log.warning("record duration %g differs from the gains' probing time %g", hist.duration, gains.T)
    return _linear_response(gains, hist.counts, totals)


def in_validity_range(gains: GainTables, dtheta: float) -> bool:
    return abs(dtheta) <= gains.delta_max


@dataclass(frozen=True)
class CampaignRow:
    T: float
    n_runs: int
    delta: float
    mean: float
    var_emp: float
    var_crb: float

    @property
    def ratio(self) -> float:
        return self.var_emp / self.var_crb

    @property
    def standard_error(self) -> float:
        return float(np.sqrt(self.var_emp / self.n_runs)) if self.n_runs > 1 else float("nan")


@dataclass(frozen=True)
class CampaignResult:
    rows: tuple[CampaignRow, ...]
    slope: float
    fisher_total_per_time: float


def variance_slope(T_values: Sequence[float], variances: Sequence[float]) -> float:
    """Least-squares slope of ``log var`` against ``log T``; NaN with fewer than two usable points."""
    T = np.asarray(T_values, dtype=float)
    v = np.asarray(variances, dtype=float)
    ok = np.isfinite(v) & (v > 0)
    if ok.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log(T[ok]), np.log(v[ok]), 1)[0])


def crb_campaign(pm: ParameterizedModel, grid: TauGrid | None, mask: ObserverMask | None,
                 T_list: Sequence[float], n_runs: int, seed: int, jobs: int = 1,
                 delta_scale: float = 0.2) -> CampaignResult:
    """Monte Carlo check of the Cramer-Rao bound.

    At each ``T`` records are simulated at ``theta0 + delta`` with
    ``delta = delta_scale / sqrt(F T)`` and estimated with gains built at
    ``theta0``. Rows carry the empirical and bound variances; ``var_emp`` is NaN
    for a single run. Run seeds differ between probing times.
    """
    base = pm.at()
    if mask is None:
        mask = ObserverMask.full(base.n_channels)
    if grid is None:
        grid = default_grid(pm, pm.theta0, mask)
    terms = information_terms(pm, grid, mask)
    rows = []
    f = float("nan")
    for k, T in enumerate(T_list):
        gains = _gains_from_terms(terms, T)
        f = gains.fisher_total_per_time
        delta = delta_scale / np.sqrt(f * T)
        hists = batch_simulate(pm, pm.theta0 + delta, T, n_runs, seed + 1_000_003 * k, grid, jobs, mask=mask)
        est = np.array([estimate(gains, h) for h in hists])
        mean = float(est.mean()) if est.size else float("nan")
        var = float(est.var(ddof=1)) if est.size > 1 else float("nan")
        rows.append(CampaignRow(float(T), int(n_runs), float(delta), mean, var, gains.crb_variance))
    slope = variance_slope([r.T for r in rows], [r.var_emp for r in rows])
    return CampaignResult(tuple(rows), slope, f)
