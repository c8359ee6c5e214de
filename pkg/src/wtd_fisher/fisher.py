"""Fisher information per unit time for multi-channel photon counting.

All quantities are rates: multiply by the probing time ``T`` to obtain the
Fisher information of a record. Derivatives are central differences with the
model family's ``fd_step``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import partial
from typing import Sequence

import numpy as np

from ._parallel import ordered_map
from .errors import ComputationError, DegenerateInformation, ModelError, NonFiniteDerivative
from .lindblad import (
    ChannelCountStats,
    TauGrid,
    auto_grid,
    channel_count_stats,
    detected_rates,
    steady_state,
    waiting_time_distributions,
)
from .model import OpenSystemModel, ParameterizedModel

log = logging.getLogger(__name__)

FLOOR_DENSITY = 1e-12


@dataclass(frozen=True)
class ObserverMask:
    """Which detected channels an observer records; unobserved ones get efficiency 0."""

    observed: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "observed", tuple(bool(x) for x in self.observed))
        if not any(self.observed):
            raise ModelError("observer mask must observe at least one channel", "mask")

    @classmethod
    def full(cls, n_channels: int) -> "ObserverMask":
        return cls((True,) * n_channels)

    @classmethod
    def only(cls, n_channels: int, *channels: int) -> "ObserverMask":
        for c in channels:
            if not (0 <= c < n_channels):
                raise ModelError(f"channel {c} outside [0, {n_channels})", "mask")
        return cls(tuple(i in channels for i in range(n_channels)))

    @classmethod
    def parse(cls, spec: str, n_channels: int) -> "ObserverMask":
        """``all``, ``alice`` (channel 0), ``bob`` (channel 1) or ``custom:0,2,...``."""
        spec = spec.strip().lower()
        if spec == "all":
            return cls.full(n_channels)
        if spec == "alice":
            return cls.only(n_channels, 0)
        if spec == "bob":
            return cls.only(n_channels, 1)
        if spec.startswith("custom:"):
            try:
                chans = [int(x) for x in spec[len("custom:"):].split(",") if x.strip()]
            except ValueError:
                raise ModelError(f"bad channel list in {spec!r}", "mask") from None
            return cls.only(n_channels, *chans)
        raise ModelError(f"unknown mask {spec!r}; use all|alice|bob|custom:i,j,...", "mask")

    def apply(self, model: OpenSystemModel) -> OpenSystemModel:
        if len(self.observed) != model.n_channels:
            raise ModelError(f"mask has {len(self.observed)} entries for {model.n_channels} channels", "mask")
        etas = [ch.efficiency if obs else 0.0 for ch, obs in zip(model.detected, self.observed)]
        return model.with_efficiencies(etas)


@dataclass(frozen=True)
class ChannelInfo:
    rate: float
    fano_inverse: float
    dr_dtheta: float
    observed: bool = True


@dataclass(frozen=True)
class FisherReport:
    """Fisher information per unit time at ``theta``.

    ``f_renewal_per_time`` is a diagnostic: the information carried by the
    sequence of interval types and durations alone (the Poisson term minus
    ``sum_m (dr_m)^2 / r_m``).
    """

    theta: float
    f_poisson_per_time: float
    f_count_per_time: float
    f_total_per_time: float
    crb_variance_time_product: float
    per_channel: tuple[ChannelInfo, ...]
    f_renewal_per_time: float = float("nan")

    def __post_init__(self):
        if self.f_total_per_time != self.f_poisson_per_time + self.f_count_per_time:
            raise ValueError("f_total_per_time must equal f_poisson_per_time + f_count_per_time")

    @property
    def rates(self) -> np.ndarray:
        return np.array([c.rate for c in self.per_channel])


@dataclass(frozen=True, eq=False)
class InformationTerms:
    """Expected binned interval densities and their theta-derivatives at one point.

    ``density[m, m', i]`` is ``r_m`` times the bin-averaged ``w_mm'`` (units rate^2);
    ``included`` marks the bins above the density floor.
    """

    theta: float
    grid: TauGrid
    density: np.ndarray
    d_density: np.ndarray
    rates: np.ndarray
    d_rates: np.ndarray
    observed: np.ndarray
    stats: tuple[ChannelCountStats | None, ...]
    included: np.ndarray = field(repr=False)
    density_minus: np.ndarray = field(repr=False, default=None)
    density_plus: np.ndarray = field(repr=False, default=None)

    def poisson_term(self) -> float:
        inc = self.included
        return float(np.sum(self.d_density[inc] ** 2 / self.density[inc]) * self.grid.dtau)

    def count_term(self) -> float:
        total = 0.0
        for m, st in enumerate(self.stats):
            if st is None:
                continue
            v = st.variance_rate
            total += (1.0 / v - 1.0 / self.rates[m]) * self.d_rates[m] ** 2
        return float(total)

    def rate_term(self) -> float:
        obs = self.observed & (self.rates > 0)
        return float(np.sum(self.d_rates[obs] ** 2 / self.rates[obs]))


def _density(model: OpenSystemModel, grid: TauGrid):
    table = waiting_time_distributions(model, grid)
    return table.channel_rates[:, None, None] * table.densities(), table.channel_rates


def default_grid(pm: ParameterizedModel, theta: float | None = None, mask: ObserverMask | None = None,
                 n_bins: int | None = None) -> TauGrid:
    """A grid whose tail condition holds at ``theta`` and at both finite-difference neighbours."""
    theta = pm.theta0 if theta is None else theta
    models = []
    for t in (theta - pm.fd_step, theta, theta + pm.fd_step):
        model = pm.at(t)
        models.append(mask.apply(model) if mask is not None else model)
    for model in models:
        steady_state(model)        # a dark or non-unique steady state is reported as such, not as a tail
    return auto_grid(models, n_bins=n_bins)


def information_terms(pm: ParameterizedModel, grid: TauGrid | None = None,
                      mask: ObserverMask | None = None) -> InformationTerms:
    """Evaluate densities, rates, their derivatives and count statistics at ``pm.theta0``."""
    theta, h = pm.theta0, pm.fd_step
    base = pm.at(theta)
    if mask is None:
        mask = ObserverMask.full(base.n_channels)
    if grid is None:
        grid = default_grid(pm, theta, mask)
    m_minus, m0, m_plus = (mask.apply(pm.at(t)) for t in (theta - h, theta, theta + h))
    n_minus, r_minus = _density(m_minus, grid)
    n0, r0 = _density(m0, grid)
    n_plus, r_plus = _density(m_plus, grid)
    dn = (n_plus - n_minus) / (2 * h)
    dr = (r_plus - r_minus) / (2 * h)
    if not (np.all(np.isfinite(dn)) and np.all(np.isfinite(dr))):
        raise NonFiniteDerivative(f"non-finite finite-difference derivative at theta={theta:g}")
    observed = np.array(mask.observed) & (m0.efficiencies > 0)
    peak = float(n0.max())
    included = n0 > FLOOR_DENSITY * peak if peak > 0 else np.zeros_like(n0, dtype=bool)
    stats = tuple(channel_count_stats(m0, m) if observed[m] and r0[m] > 0 else None
                  for m in range(m0.n_channels))
    return InformationTerms(theta, grid, n0, dn, r0, dr, observed, stats, included, n_minus, n_plus)


def _report(terms: InformationTerms) -> FisherReport:
    fp = terms.poisson_term()
    fn = terms.count_term()
    total = fp + fn
    if not np.isfinite(total):
        raise DegenerateInformation(f"non-finite Fisher information at theta={terms.theta:g}")
    if total < 0 and -total > 1e-8 * max(fp, abs(fn)) + 1e-15:
        raise DegenerateInformation(f"negative Fisher information {total:g} at theta={terms.theta:g}")
    channels = tuple(
        ChannelInfo(float(terms.rates[m]), st.fano_inverse if st is not None else float("nan"),
                    float(terms.d_rates[m]), bool(terms.observed[m]))
        for m, st in enumerate(terms.stats))
    crb = 1.0 / total if total > 0 else float("inf")
    return FisherReport(terms.theta, fp, fn, total, crb, channels, fp - terms.rate_term())


def expected_interval_density(pm: ParameterizedModel, theta: float, grid: TauGrid,
                              mask: ObserverMask | None = None, binned: bool = False) -> np.ndarray:
    """``r_m w_mm'(tau)`` on the grid (per unit time).

    Point values at bin centers by default; ``binned=True`` gives bin averages,
    the form used inside the Fisher sums.
    """
    model = pm.at(theta)
    if mask is not None:
        model = mask.apply(model)
    table = waiting_time_distributions(model, grid)
    w = table.densities() if binned else table.values
    return table.channel_rates[:, None, None] * w


def fisher_poisson(pm: ParameterizedModel, grid: TauGrid | None = None, mask: ObserverMask | None = None) -> float:
    """Information of the binned interval counts treated as independent Poisson variables."""
    return information_terms(pm, grid, mask).poisson_term()


def fisher_count_correction(pm: ParameterizedModel, grid: TauGrid | None = None,
                            mask: ObserverMask | None = None) -> float:
    """``sum_m (1/v_m - 1/r_m) (dr_m/dtheta)^2`` over observed channels."""
    return information_terms(pm, grid, mask).count_term()


def fisher_total(pm: ParameterizedModel, grid: TauGrid | None = None, mask: ObserverMask | None = None) -> FisherReport:
    return _report(information_terms(pm, grid, mask))


def total_count_sensitivity(pm: ParameterizedModel) -> float:
    """``(d sum_m r_m / dtheta)^2 / sum_m v_m``: information in the total photon count only."""
    h = pm.fd_step
    model = pm.at()
    total_plus = detected_rates(pm.at(pm.theta0 + h)).sum()
    total_minus = detected_rates(pm.at(pm.theta0 - h)).sum()
    d_total = (total_plus - total_minus) / (2 * h)
    if not np.isfinite(d_total):
        raise NonFiniteDerivative(f"non-finite rate derivative at theta={pm.theta0:g}")
    v = sum(channel_count_stats(model, m).variance_rate
            for m in range(model.n_channels) if model.detected[m].efficiency > 0
            and np.any(model.detected[m].operator))
    return float(d_total ** 2 / v)


@dataclass(frozen=True)
class SweepRow:
    theta: float
    report: FisherReport | None
    tc_sensitivity: float | None
    diagnostic: str = ""

    @property
    def ok(self) -> bool:
        return self.report is not None


def _sweep_point(theta, pm, grid, mask, n_bins):
    point = pm.recentered(theta)
    try:
        g = grid if grid is not None else default_grid(point, theta, mask, n_bins)
        report = fisher_total(point, g, mask)
        tc = total_count_sensitivity(point)
    except ComputationError as exc:
        log.warning("sweep point theta=%g skipped: %s", theta, exc)
        return SweepRow(theta, None, None, f"{type(exc).__name__}: {exc}")
    return SweepRow(theta, report, tc)


def sweep(pm: ParameterizedModel, theta_values: Sequence[float], grid: TauGrid | None = None,
          mask: ObserverMask | None = None, jobs: int = 1, n_bins: int | None = None) -> list[SweepRow]:
    """Fisher reports over ``theta_values``, in input order.

    Points where the model is not ergodic (or the tail check fails) become rows
    with ``report=None`` and a diagnostic message.
    """
    fn = partial(_sweep_point, pm=pm, grid=grid, mask=mask, n_bins=n_bins)
    return ordered_map(fn, [float(t) for t in theta_values], jobs)
