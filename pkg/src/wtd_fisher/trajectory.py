"""Monte Carlo wave-function simulation of photon-counting records.

The no-jump evolution over one step ``dt`` uses the exact propagator
``exp(-i H_eff dt)``; a jump happens when the squared norm of the unnormalized
state falls below a uniform threshold, with the jump time located inside the
step by log-linear interpolation. Detected-channel jumps reset the emitter to
the channel's final state and are recorded with probability ``eta``; undetected
jumps apply the operator and are never recorded.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import numba
import numpy as np
import scipy.linalg

from ._parallel import ordered_map
from .errors import ModelError, StepSizeError
from .lindblad import TauGrid, rate_scale, steady_state, jump_rate_observables, vec
from .model import OpenSystemModel, ParameterizedModel

BURN_IN_WAITS = 20.0
DT_SCALE = 0.01
MAX_JUMP_PROBABILITY = 0.1

_OK, _NEED_UNIFORMS, _NEED_EVENTS = 0, 1, 2


@numba.njit(cache=True, nogil=True)
def _mcwf_kernel(prop, ops, detected, final_state, efficiency, psi0, dt, t_burn, t_end,
                 uniforms, out_t, out_ch):
    dim = psi0.shape[0]
    n_ops = ops.shape[0]
    psi = psi0.copy()
    new = np.empty(dim, dtype=np.complex128)
    jpsi = np.empty(dim, dtype=np.complex128)
    weights = np.empty(n_ops)
    n_u = uniforms.shape[0]
    iu = 0
    n_ev = 0
    t0 = 0.0        # time of the last jump
    k = 0           # whole steps since the last jump
    norm0 = 1.0
    thr = uniforms[iu]
    iu += 1
    while True:
        n1 = 0.0
        for a in range(dim):
            s = 0j
            for b in range(dim):
                s += prop[a, b] * psi[b]
            new[a] = s
            n1 += s.real * s.real + s.imag * s.imag
        if n1 > thr:
            for a in range(dim):
                psi[a] = new[a]
            norm0 = n1
            k += 1
            if t0 + k * dt > t_end:
                return _OK, n_ev, iu
            continue
        # jump inside this step
        if n1 > 0.0:
            f = (np.log(norm0) - np.log(thr)) / (np.log(norm0) - np.log(n1))
        else:
            f = 1.0
        t_jump = t0 + (k + f) * dt
        if t_jump > t_end:
            return _OK, n_ev, iu
        for a in range(dim):
            psi[a] = (1.0 - f) * psi[a] + f * new[a]
        total = 0.0
        for j in range(n_ops):
            w = 0.0
            for a in range(dim):
                s = 0j
                for b in range(dim):
                    s += ops[j, a, b] * psi[b]
                w += s.real * s.real + s.imag * s.imag
            weights[j] = w
            total += w
        if iu + 3 > n_u:
            return _NEED_UNIFORMS, n_ev, iu
        u = uniforms[iu] * total
        iu += 1
        chosen = n_ops - 1
        acc = 0.0
        for j in range(n_ops):
            acc += weights[j]
            if u < acc:
                chosen = j
                break
        if detected[chosen]:
            coin = uniforms[iu]
            iu += 1
            if coin < efficiency[chosen] and t_jump >= t_burn:
                if n_ev >= out_t.shape[0]:
                    return _NEED_EVENTS, n_ev, iu
                out_t[n_ev] = t_jump - t_burn
                out_ch[n_ev] = chosen
                n_ev += 1
            for a in range(dim):
                psi[a] = 0.0
            psi[final_state[chosen]] = 1.0
        else:
            nrm = 0.0
            for a in range(dim):
                s = 0j
                for b in range(dim):
                    s += ops[chosen, a, b] * psi[b]
                jpsi[a] = s
                nrm += s.real * s.real + s.imag * s.imag
            nrm = np.sqrt(nrm)
            for a in range(dim):
                psi[a] = jpsi[a] / nrm
        t0 = t_jump
        k = 0
        norm0 = 1.0
        thr = uniforms[iu]
        iu += 1


@dataclass(frozen=True, eq=False)
class DetectionRecord:
    """Detected events ``(times[k], channels[k])`` during ``[0, duration]``."""

    times: np.ndarray
    channels: np.ndarray
    duration: float
    seed: int
    model_fingerprint: str
    n_channels: int

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        c = np.asarray(self.channels, dtype=np.int64)
        if t.shape != c.shape:
            raise ModelError("times and channels must have equal length")
        if t.size and (np.any(np.diff(t) <= 0) or t[0] < 0 or t[-1] > self.duration):
            raise ModelError("event times must be strictly increasing within [0, duration]")
        if c.size and (c.min() < 0 or c.max() >= self.n_channels):
            raise ModelError("event channel outside the detected channels")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "channels", c)

    def __len__(self):
        return self.times.size

    def counts(self) -> np.ndarray:
        return np.bincount(self.channels, minlength=self.n_channels)


@dataclass(frozen=True, eq=False)
class IntervalHistogram:
    """Binned waiting times ``counts[m, m', i]``; ``totals[m]`` is the number of events in channel ``m``."""

    grid: TauGrid
    counts: np.ndarray
    overflow: np.ndarray
    totals: np.ndarray
    duration: float = float("nan")

    def intervals_from(self) -> np.ndarray:
        return self.counts.sum(axis=(1, 2)) + self.overflow.sum(axis=1)


def default_dt(model: OpenSystemModel) -> float:
    return DT_SCALE / rate_scale(model)


def _max_jump_rate(model: OpenSystemModel) -> float:
    total = sum(C.conj().T @ C for C in model.jump_operators())
    return float(np.max(np.linalg.eigvalsh(total)))


def simulate_record(model: OpenSystemModel, T: float, seed: int, dt: float | None = None) -> DetectionRecord:
    """One detection record of duration ``T`` after a burn-in of 20 mean waiting times.

    The emitter starts in a detected channel's final state drawn in proportion
    to the steady-state jump rates. Deterministic given ``seed``.
    """
    if not (np.isfinite(T) and T > 0):
        raise ModelError(f"T must be positive, got {T}", "T")
    model.check_observable()
    dt = default_dt(model) if dt is None else float(dt)
    if dt * _max_jump_rate(model) > MAX_JUMP_PROBABILITY:
        raise StepSizeError(f"dt={dt:g} gives jump probability {dt * _max_jump_rate(model):.3g} per step "
                            f"(> {MAX_JUMP_PROBABILITY}); use a smaller dt")
    rho = steady_state(model)
    physical = np.real(jump_rate_observables(model) @ vec(rho))
    detected_rate = float(np.sum(physical * model.efficiencies))
    t_burn = BURN_IN_WAITS / detected_rate

    H = model.hamiltonian
    ops = model.jump_operators()
    H_eff = H - 0.5j * sum(C.conj().T @ C for C in ops)
    prop = scipy.linalg.expm(-1j * H_eff * dt)
    ops_arr = np.array(ops, dtype=complex)
    M = model.n_channels
    n_ops = len(ops)
    detected = np.zeros(n_ops, dtype=np.bool_)
    detected[:M] = True
    final = np.zeros(n_ops, dtype=np.int64)
    final[:M] = [ch.final_state for ch in model.detected]
    eff = np.zeros(n_ops)
    eff[:M] = model.efficiencies

    rng = np.random.default_rng(seed)
    start = rng.choice(M, p=physical / physical.sum())
    psi0 = np.zeros(model.dim, dtype=complex)
    psi0[model.detected[start].final_state] = 1.0
    t_end = t_burn + T
    all_jumps = float(np.real(np.trace(sum(C.conj().T @ C for C in ops) @ rho)))
    expected = all_jumps * t_end
    n_u = int(3 * (1.2 * expected + 10 * np.sqrt(expected) + 100))
    n_ev = int(1.2 * detected_rate * T + 10 * np.sqrt(detected_rate * T) + 100)
    # the uniform stream is a fixed function of the seed; growing the buffer only extends it
    stream_seed = rng.integers(2 ** 63)
    while True:
        uniforms = np.random.default_rng(stream_seed).random(n_u)
        out_t = np.empty(n_ev)
        out_ch = np.empty(n_ev, dtype=np.int64)
        status, count, _ = _mcwf_kernel(prop, ops_arr, detected, final, eff, psi0, dt, t_burn, t_end,
                                        uniforms, out_t, out_ch)
        if status == _OK:
            break
        if status == _NEED_UNIFORMS:
            n_u *= 2
        else:
            n_ev *= 2
    return DetectionRecord(out_t[:count].copy(), out_ch[:count].copy(), float(T), int(seed),
                           model.fingerprint(), M)


def sort_intervals(record: DetectionRecord, grid: TauGrid) -> IntervalHistogram:
    """Histogram consecutive event pairs ``(m at t_k, m' at t_k+1)`` by ``t_k+1 - t_k``."""
    M = record.n_channels
    counts = np.zeros((M, M, grid.n_bins), dtype=np.int64)
    overflow = np.zeros((M, M), dtype=np.int64)
    if len(record) >= 2:
        tau = np.diff(record.times)
        m = record.channels[:-1]
        mp = record.channels[1:]
        idx = np.floor(tau / grid.dtau).astype(np.int64)
        inside = idx < grid.n_bins
        np.add.at(counts, (m[inside], mp[inside], idx[inside]), 1)
        np.add.at(overflow, (m[~inside], mp[~inside]), 1)
    return IntervalHistogram(grid, counts, overflow, record.counts(), record.duration)


def run_seed(seed: int, index: int) -> int:
    """64-bit seed of run ``index``; depends only on ``(seed, index)``."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1, np.uint64)[0])


def _simulate_one(index, model, T, seed, dt):
    return simulate_record(model, T, run_seed(seed, index), dt)


def batch_records(pm: ParameterizedModel, theta_true: float, T: float, n_runs: int, seed: int,
                  jobs: int = 1, dt: float | None = None, mask=None) -> list[DetectionRecord]:
    """``n_runs`` records at ``theta_true``; run ``i`` uses ``run_seed(seed, i)``.

    ``mask`` (an ObserverMask) zeroes the efficiency of unobserved channels.
    """
    if n_runs < 0:
        raise ModelError(f"n_runs must be non-negative, got {n_runs}", "n_runs")
    if n_runs == 0:
        return []
    model = pm.at(theta_true)
    if mask is not None:
        model = mask.apply(model)
    fn = partial(_simulate_one, model=model, T=T, seed=seed, dt=dt)
    return ordered_map(fn, range(n_runs), jobs)


def batch_simulate(pm: ParameterizedModel, theta_true: float, T: float, n_runs: int, seed: int,
                   grid: TauGrid, jobs: int = 1, dt: float | None = None, mask=None) -> list[IntervalHistogram]:
    """``n_runs`` independent records at ``theta_true``, reduced to histograms (totals hold N_m)."""
    records = batch_records(pm, theta_true, T, n_runs, seed, jobs, dt, mask)
    return [sort_intervals(r, grid) for r in records]
