"""Master-equation numerics on column-stacked density matrices.

``vec(A rho B) = (B^T kron A) vec(rho)``. Propagation uses one matrix exponential
per bin width, applied bin by bin; bin integrals of the no-detection state are
obtained from the same stepping with the exact integral propagator (Van Loan
block exponential), so binned probabilities carry no quadrature error.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np
import scipy.linalg

from .errors import ErgodicityError, ModelError, TailError
from .model import OpenSystemModel

TAIL_EPSILON = 1e-8
TAIL_EPSILON_MOMENTS = 1e-10
DEFAULT_BINS = 2000
DTAU_SCALE = 0.05
_BLOCK = 64
DARK_RATE = 1e-12
_KERNEL_RTOL = 1e-9
_MAX_DOUBLINGS = 16


def vec(rho: np.ndarray) -> np.ndarray:
    return np.asarray(rho).reshape(-1, order="F")


def unvec(v: np.ndarray, dim: int | None = None) -> np.ndarray:
    dim = dim or int(round(np.sqrt(v.shape[0])))
    return np.asarray(v).reshape((dim, dim) + v.shape[1:], order="F")


def _spre(A):
    return np.kron(np.eye(A.shape[0]), A)


def _spost(A):
    return np.kron(A.T, np.eye(A.shape[0]))


def _sandwich(C):
    # C rho C^dagger
    return np.kron(C.conj(), C)


def _anticomm(A):
    return _spre(A) + _spost(A)


def _generator(model: OpenSystemModel, feed_weights) -> np.ndarray:
    H = model.hamiltonian
    L = -1j * (_spre(H) - _spost(H))
    for ch, weight in zip(model.detected, feed_weights):
        C = ch.operator
        if weight:
            L += weight * _sandwich(C)
        L -= 0.5 * _anticomm(C.conj().T @ C)
    for d in model.undetected:
        C = d.operator
        L += _sandwich(C) - 0.5 * _anticomm(C.conj().T @ C)
    return L


def liouvillian(model: OpenSystemModel) -> np.ndarray:
    """Full master-equation generator; detection efficiencies play no role."""
    return _generator(model, [1.0] * model.n_channels)


def no_detected_jump_generator(model: OpenSystemModel) -> np.ndarray:
    """Generator of the state conditioned on no detection.

    Detected channels keep a feeding term weighted by ``1 - eta``; undetected
    dissipators keep their full feeding term.
    """
    return _generator(model, [1.0 - ch.efficiency for ch in model.detected])


def jump_rate_observables(model: OpenSystemModel) -> np.ndarray:
    """Rows ``o_m`` with ``o_m . vec(rho) = Tr(C_m^dag C_m rho)`` (physical rate, no efficiency)."""
    return np.array([vec((ch.operator.conj().T @ ch.operator).T) for ch in model.detected])


def _trace_row(dim):
    return vec(np.eye(dim))


def steady_state(model: OpenSystemModel) -> np.ndarray:
    """Unique trace-one kernel element of the Liouvillian.

    Raises ErgodicityError if the kernel is not one-dimensional or if the steady
    state emits no photons into the detected channels.
    """
    L = liouvillian(model)
    d = model.dim
    sv = scipy.linalg.svdvals(L)
    null_dim = int(np.sum(sv <= _KERNEL_RTOL * max(1.0, sv[0])))
    if null_dim != 1:
        raise ErgodicityError(f"Liouvillian kernel has dimension {null_dim}; steady state is not unique")
    A = np.vstack([L, _trace_row(d)[None, :]])
    b = np.zeros(d * d + 1, dtype=complex)
    b[-1] = 1.0
    x, *_ = np.linalg.lstsq(A, b, rcond=None)
    rho = unvec(x, d)
    rho = 0.5 * (rho + rho.conj().T)
    evals, evecs = np.linalg.eigh(rho)
    if np.any(evals < -1e-10):
        evals = np.clip(evals, 0.0, None)
        rho = (evecs * evals) @ evecs.conj().T
    rho = rho / np.trace(rho).real
    total = float(np.real(jump_rate_observables(model) @ vec(rho)).sum())
    if total < DARK_RATE:
        raise ErgodicityError(f"dark steady state: total emission rate {total:.3e} into detected channels")
    return rho


def detected_rates(model: OpenSystemModel, rho_st: np.ndarray | None = None) -> np.ndarray:
    """``eta_m Tr(C_m^dag C_m rho_st)`` per detected channel."""
    if rho_st is None:
        rho_st = steady_state(model)
    return model.efficiencies * np.real(jump_rate_observables(model) @ vec(rho_st))


@dataclass(frozen=True)
class TauGrid:
    """Uniform waiting-time bins ``[i, i+1) * dtau`` on ``[0, tau_max)``."""

    tau_max: float
    n_bins: int = DEFAULT_BINS

    def __post_init__(self):
        if isinstance(self.n_bins, bool) or int(self.n_bins) != self.n_bins or self.n_bins < 1:
            raise ModelError(f"n_bins must be a positive integer, got {self.n_bins}", "n_bins")
        if not (np.isfinite(self.tau_max) and self.tau_max > 0):
            raise ModelError(f"tau_max must be positive, got {self.tau_max}", "tau_max")
        object.__setattr__(self, "n_bins", int(self.n_bins))
        object.__setattr__(self, "tau_max", float(self.tau_max))

    @property
    def dtau(self) -> float:
        return self.tau_max / self.n_bins

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_bins) + 0.5) * self.dtau

    @property
    def edges(self) -> np.ndarray:
        return np.arange(self.n_bins + 1) * self.dtau


def _initial_states(model: OpenSystemModel) -> np.ndarray:
    d = model.dim
    cols = []
    for ch in model.detected:
        rho = np.zeros((d, d), dtype=complex)
        rho[ch.final_state, ch.final_state] = 1.0
        cols.append(vec(rho))
    return np.array(cols).T


def survival(model: OpenSystemModel, tau: float) -> np.ndarray:
    """No-detection probability ``Tr rho~|_m(tau)`` for each post-jump state ``m``."""
    P = scipy.linalg.expm(no_detected_jump_generator(model) * tau)
    return np.real(_trace_row(model.dim) @ (P @ _initial_states(model)))


def rate_scale(model: OpenSystemModel) -> float:
    """Fastest rate in the model: total jump rate, Rabi frequencies or detuning spread."""
    total = sum(C.conj().T @ C for C in model.jump_operators())
    gamma = float(np.max(np.linalg.eigvalsh(total)))
    H = model.hamiltonian
    off = H - np.diag(np.diag(H))
    rabi = 2.0 * float(np.max(np.abs(off)))
    diag = np.real(np.diag(H))
    return max(gamma, rabi, float(diag.max() - diag.min()), 1e-12)


def auto_grid(model: OpenSystemModel | list[OpenSystemModel], n_bins: int | None = None,
              tail_epsilon: float = TAIL_EPSILON, start: float = 10.0) -> TauGrid:
    """Double ``tau_max`` from ``start`` until every survival probability is below ``tail_epsilon``.

    Channels with zero efficiency are ignored (nothing is recorded after them).
    A list of models yields one grid that suits all of them. Without ``n_bins``
    the grid has ``DEFAULT_BINS`` bins, or more if needed to keep the bin width
    below ``DTAU_SCALE / rate_scale``.
    """
    models = model if isinstance(model, (list, tuple)) else [model]
    tau = float(start)
    for _ in range(_MAX_DOUBLINGS):
        if all(_max_tail(m, tau) <= tail_epsilon for m in models):
            if n_bins is None:
                dtau_max = DTAU_SCALE / max(rate_scale(m) for m in models)
                n_bins = max(DEFAULT_BINS, int(np.ceil(tau / dtau_max)))
            return TauGrid(tau, n_bins)
        tau *= 2
    raise TailError(f"survival exceeds {tail_epsilon:g} even at tau_max={tau / 2:g}; "
                    "the emitter may be (nearly) dark")


def _max_tail(model, tau):
    s = survival(model, tau)
    observed = model.efficiencies > 0
    return float(np.max(s[observed])) if np.any(observed) else 0.0


@dataclass(frozen=True, eq=False)
class WtdTable:
    """Waiting-time densities ``values[m, m', i] = w_mm'(tau_i)`` at bin centers.

    ``bin_mass[m, m', i]`` is the exact integral of ``w_mm'`` over bin ``i`` (None
    when the table was read back from CSV). ``channel_rates`` are detected rates.
    """

    grid: TauGrid
    values: np.ndarray
    channel_rates: np.ndarray
    survival_tail: np.ndarray
    bin_mass: np.ndarray | None = None
    efficiencies: np.ndarray | None = None

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]

    def normalization(self) -> np.ndarray:
        """Per-row ``sum_m' int w_mm' dtau + tail``; 1 up to rounding."""
        mass = self.bin_mass if self.bin_mass is not None else self.values * self.grid.dtau
        return mass.sum(axis=(1, 2)) + self.survival_tail

    def densities(self) -> np.ndarray:
        """Bin-averaged densities (``bin_mass / dtau``), falling back to center values."""
        if self.bin_mass is None:
            return self.values
        return self.bin_mass / self.grid.dtau


def _integral_propagator(Lt: np.ndarray, dt: float) -> np.ndarray:
    n = Lt.shape[0]
    block = np.zeros((2 * n, 2 * n), dtype=complex)
    block[:n, :n] = Lt
    block[:n, n:] = np.eye(n)
    return scipy.linalg.expm(block * dt)[:n, n:]


def _propagate(Lt: np.ndarray, rho0: np.ndarray, grid: TauGrid):
    """States at bin centers, bin-integrated states, and the state at tau_max.

    ``rho0`` is (d^2, k); returned stacks are (d^2, n_bins, k).
    """
    dt = grid.dtau
    P = scipy.linalg.expm(Lt * dt)
    P_half = scipy.linalg.expm(Lt * (dt / 2))
    Q = _integral_propagator(Lt, dt)
    D, k = rho0.shape
    n = grid.n_bins + 1
    # powers P^0 .. P^(B-1) advance a block of bins in one product
    powers = np.empty((_BLOCK, D, D), dtype=complex)
    powers[0] = np.eye(D)
    for j in range(1, _BLOCK):
        powers[j] = P @ powers[j - 1]
    P_block = P @ powers[-1]
    stacked = powers.reshape(_BLOCK * D, D)
    edges = np.empty((n, D, k), dtype=complex)
    start = rho0
    for i0 in range(0, n, _BLOCK):
        j = min(_BLOCK, n - i0)
        edges[i0:i0 + j] = (stacked[:j * D] @ start).reshape(j, D, k)
        start = P_block @ start
    left = edges[:-1].transpose(1, 0, 2).reshape(D, -1)
    centers = (P_half @ left).reshape(D, n - 1, k)
    integrals = (Q @ left).reshape(D, n - 1, k)
    return centers, integrals, edges[-1]


def waiting_time_distributions(model: OpenSystemModel, grid: TauGrid | None = None,
                               tail_epsilon: float = TAIL_EPSILON) -> WtdTable:
    """Waiting-time distributions between detected events for every channel pair.

    ``w_mm'(tau) = eta_m' Tr(C_m'^dag C_m' rho~|_m(tau))`` with ``rho~|_m(0) = |phi_m><phi_m|``.
    """
    model.check_observable()
    rho_st = steady_state(model)
    if grid is None:
        grid = auto_grid(model, tail_epsilon=tail_epsilon)
    Lt = no_detected_jump_generator(model)
    centers, integrals, last = _propagate(Lt, _initial_states(model), grid)
    obs = model.efficiencies[:, None] * jump_rate_observables(model)        # (m', d^2)
    # centers: (bins, d^2, m) -> values (m, m', bins)
    D, n, k = centers.shape
    # (m', n, m) -> (m, m', n)
    values = np.real(obs @ centers.reshape(D, -1)).reshape(-1, n, k).transpose(2, 0, 1)
    mass = np.real(obs @ integrals.reshape(D, -1)).reshape(-1, n, k).transpose(2, 0, 1)
    values = np.clip(values, 0.0, None)
    mass = np.clip(mass, 0.0, None)
    tail = np.real(_trace_row(model.dim) @ last)
    observed = model.efficiencies > 0
    worst = float(np.max(tail[observed]))
    if worst > tail_epsilon:
        raise TailError(f"survival {worst:.3e} at tau_max={grid.tau_max:g} exceeds {tail_epsilon:g}; "
                        "increase tau_max")
    return WtdTable(grid, values, detected_rates(model, rho_st), tail, mass, model.efficiencies)


@dataclass(frozen=True)
class ChannelCountStats:
    """Count statistics of one channel observed alone.

    ``fano = Var(tau)/mean(tau)^2 = V_m / N_m``; ``moment_error`` bounds the
    truncation error of the second moment (tail mass times ``tau_max**2``).
    """

    mean_rate: float
    tau_mean: float
    tau_var: float
    fano_inverse: float
    moment_error: float = 0.0

    @property
    def fano(self) -> float:
        return 1.0 / self.fano_inverse

    @property
    def variance_rate(self) -> float:
        """``V_m / T``."""
        return self.fano * self.mean_rate


def single_channel_model(model: OpenSystemModel, m: int) -> OpenSystemModel:
    etas = np.zeros(model.n_channels)
    etas[m] = model.detected[m].efficiency
    return model.with_efficiencies(etas)


def channel_count_stats(model: OpenSystemModel, m: int, grid: TauGrid | None = None,
                        tail_epsilon: float = TAIL_EPSILON_MOMENTS, method: str = "exact") -> ChannelCountStats:
    """Waiting-time moments of channel ``m`` with all other channels unobserved.

    ``method="exact"`` uses ``int tau^k exp(Lt tau) dtau = k! (-Lt)^-(k+1)``, so the
    moments carry no discretization error. ``method="grid"`` sums bin-center
    values on ``grid`` (automatic if None) and reports the truncated tail in
    ``moment_error``; it is kept as a cross-check.
    """
    if not (0 <= m < model.n_channels):
        raise ModelError(f"channel index {m} outside [0, {model.n_channels})")
    if model.detected[m].efficiency <= 0:
        raise ModelError(f"channel {m} has zero efficiency")
    if method not in ("exact", "grid"):
        raise ModelError(f"unknown moment method {method!r}")
    single = single_channel_model(model, m)
    if method == "exact":
        rate = float(detected_rates(single)[m])
        A = -no_detected_jump_generator(single)
        rho0 = _initial_states(single)[:, m]
        obs = single.efficiencies[m] * jump_rate_observables(single)[m]
        try:
            x1 = np.linalg.solve(A, rho0)
            x2 = np.linalg.solve(A, x1)
            x3 = np.linalg.solve(A, x2)
        except np.linalg.LinAlgError:
            raise TailError(f"no-detection generator of channel {m} is singular; waiting times do not end") from None
        t0, t1, t2 = (float(np.real(obs @ x)) for x in (x1, x2, 2.0 * x3))
        if abs(t0 - 1.0) > 1e-8:
            raise TailError(f"waiting-time distribution of channel {m} has mass {t0:.12g}, not 1")
        var = t2 - t1 * t1
        if not var > 0:
            raise TailError(f"non-positive waiting-time variance {var:g} for channel {m}")
        return ChannelCountStats(rate, t1, var, t1 * t1 / var, 0.0)
    if grid is None:
        grid = auto_grid(single, tail_epsilon=tail_epsilon)
    table = waiting_time_distributions(single, grid, tail_epsilon)
    w = table.values[m, m]
    tau = grid.centers
    dt = grid.dtau
    t1 = float(np.sum(tau * w) * dt)
    t2 = float(np.sum(tau * tau * w) * dt)
    var = t2 - t1 * t1
    if not var > 0:
        raise TailError(f"non-positive waiting-time variance {var:g} for channel {m}")
    tail = float(table.survival_tail[m])
    return ChannelCountStats(float(table.channel_rates[m]), t1, var, t1 * t1 / var, tail * grid.tau_max ** 2)
