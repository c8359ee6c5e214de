"""Parameterized open-system models: Hamiltonian plus detected and undetected jump channels.

Rates are in units of a reference decay rate (Gamma_0 for the Lambda system) and
times in units of its inverse. Basis index ``k`` is the physical level ``|k>``.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Any, Callable, Sequence

import numpy as np
import yaml

from .errors import ModelError

HERMITIAN_ATOL = 1e-12
_RANK_RTOL = 1e-12


def _frozen(a, dtype=complex) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def _check_square(op: np.ndarray, what: str) -> None:
    if op.ndim != 2 or op.shape[0] != op.shape[1]:
        raise ModelError(f"operator must be a square matrix, got shape {op.shape}", what)
    if op.shape[0] < 2:
        raise ModelError("dimension must be at least 2", what)
    if not np.all(np.isfinite(op)):
        raise ModelError("operator has non-finite entries", what)


def is_rank_one_onto(op: np.ndarray, final_state: int) -> bool:
    """True if every column of ``op`` is proportional to the basis vector ``e_final_state``.

    A zero operator (a channel that never fires) passes.
    """
    scale = np.max(np.abs(op))
    if scale == 0.0:
        return True
    others = np.delete(op, final_state, axis=0)
    return bool(np.all(np.abs(others) <= _RANK_RTOL * scale))


@dataclass(frozen=True, eq=False)
class DetectedChannel:
    """Jump ``C = |phi><v|`` that leaves the emitter in basis state ``final_state``."""

    operator: np.ndarray
    final_state: int
    efficiency: float = 1.0
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "operator", _frozen(self.operator))
        _check_square(self.operator, "operator")
        dim = self.operator.shape[0]
        if not (0 <= int(self.final_state) < dim) or int(self.final_state) != self.final_state:
            raise ModelError(f"final state index {self.final_state} outside [0, {dim})", "final_state")
        object.__setattr__(self, "final_state", int(self.final_state))
        eff = float(self.efficiency)
        if not (0.0 <= eff <= 1.0):
            raise ModelError(f"efficiency {eff} outside [0, 1]", "efficiency")
        object.__setattr__(self, "efficiency", eff)
        if not is_rank_one_onto(self.operator, self.final_state):
            raise ModelError("detected channel not rank-1 onto final state", "operator")


@dataclass(frozen=True, eq=False)
class UndetectedDissipator:
    operator: np.ndarray
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "operator", _frozen(self.operator))
        _check_square(self.operator, "operator")
        if not np.any(self.operator):
            raise ModelError("undetected dissipator operator is zero", "operator")


@dataclass(frozen=True, eq=False)
class OpenSystemModel:
    hamiltonian: np.ndarray
    detected: tuple[DetectedChannel, ...]
    undetected: tuple[UndetectedDissipator, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hamiltonian", _frozen(self.hamiltonian))
        object.__setattr__(self, "detected", tuple(self.detected))
        object.__setattr__(self, "undetected", tuple(self.undetected))
        H = self.hamiltonian
        _check_square(H, "hamiltonian")
        if np.max(np.abs(H - H.conj().T)) > HERMITIAN_ATOL:
            raise ModelError("Hamiltonian is not Hermitian", "hamiltonian")
        if not self.detected:
            raise ModelError("at least one detected channel is required", "detected")
        for i, ch in enumerate(self.detected):
            if ch.operator.shape != H.shape:
                raise ModelError(f"operator dimension {ch.operator.shape[0]} != {self.dim}", f"detected[{i}].operator")
        for i, d in enumerate(self.undetected):
            if d.operator.shape != H.shape:
                raise ModelError(f"operator dimension {d.operator.shape[0]} != {self.dim}", f"undetected[{i}].operator")

    @property
    def dim(self) -> int:
        return self.hamiltonian.shape[0]

    @property
    def n_channels(self) -> int:
        return len(self.detected)

    @property
    def efficiencies(self) -> np.ndarray:
        return np.array([ch.efficiency for ch in self.detected])

    def check_observable(self) -> None:
        if not np.any(self.efficiencies > 0):
            raise ModelError("no detected channel has efficiency > 0", "detected")

    def with_efficiencies(self, etas: Sequence[float]) -> "OpenSystemModel":
        if len(etas) != self.n_channels:
            raise ModelError(f"expected {self.n_channels} efficiencies, got {len(etas)}")
        detected = tuple(replace(ch, efficiency=float(e)) for ch, e in zip(self.detected, etas))
        return replace(self, detected=detected)

    def jump_operators(self) -> list[np.ndarray]:
        """Detected channels first, then undetected dissipators."""
        return [ch.operator for ch in self.detected] + [d.operator for d in self.undetected]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.hamiltonian).tobytes())
        for ch in self.detected:
            h.update(np.ascontiguousarray(ch.operator).tobytes())
            h.update(f"{ch.final_state}:{ch.efficiency!r}".encode())
        for d in self.undetected:
            h.update(b"U")
            h.update(np.ascontiguousarray(d.operator).tobytes())
        return h.hexdigest()[:16]

    def same_as(self, other: "OpenSystemModel") -> bool:
        """Entrywise equality of all operators and channel metadata."""
        if self.hamiltonian.shape != other.hamiltonian.shape:
            return False
        if len(self.detected) != len(other.detected) or len(self.undetected) != len(other.undetected):
            return False
        if not np.array_equal(self.hamiltonian, other.hamiltonian):
            return False
        for a, b in zip(self.detected, other.detected):
            if not (np.array_equal(a.operator, b.operator) and a.final_state == b.final_state
                    and a.efficiency == b.efficiency and a.label == b.label):
                return False
        for a, b in zip(self.undetected, other.undetected):
            if not (np.array_equal(a.operator, b.operator) and a.label == b.label):
                return False
        return True


def default_fd_step(theta0: float) -> float:
    return 1e-4 * max(1.0, abs(theta0))


@dataclass(frozen=True)
class ParameterizedModel:
    """A family of models indexed by one real parameter ``theta``.

    ``builder`` must be a pure function; ``fd_step`` is the half-width of the
    central differences used for every ``d/dtheta``.
    """

    builder: Callable[[float], OpenSystemModel]
    theta0: float
    fd_step: float | None = None
    parameter: str = "theta"

    def __post_init__(self):
        object.__setattr__(self, "theta0", float(self.theta0))
        if self.fd_step is None:
            object.__setattr__(self, "fd_step", default_fd_step(self.theta0))
        if not (np.isfinite(self.fd_step) and self.fd_step > 0):
            raise ModelError(f"fd_step must be positive, got {self.fd_step}", "sweep.fd_step")

    def at(self, theta: float | None = None) -> OpenSystemModel:
        return self.builder(self.theta0 if theta is None else float(theta))

    def recentered(self, theta: float) -> "ParameterizedModel":
        """Same family expanded around ``theta`` (the fd_step is kept)."""
        return replace(self, theta0=float(theta))


# ---------------------------------------------------------------- constructors

def _basis_op(dim, i, j, amp=1.0) -> np.ndarray:
    op = np.zeros((dim, dim), dtype=complex)
    op[i, j] = amp
    return op


def build_lambda_system(omega0, omega1, delta0=0.0, delta1=0.0, gamma0=1.0, gamma1=1.0,
                        gamma_deph=0.0, eta0=1.0, eta1=1.0) -> OpenSystemModel:
    """Laser-driven Lambda atom in the basis (|0>, |1>, |2>), |2> excited.

    Rotating-wave Hamiltonian with diagonal (delta0, delta1, 0) and couplings
    Omega/2; decay channels sqrt(gamma0)|0><2| and sqrt(gamma1)|1><2|. Ground
    state dephasing sqrt(gamma_deph)(|0><0| - |1><1| + |2><2|) is undetected.
    """
    for name, val in (("gamma0", gamma0), ("gamma1", gamma1), ("gamma_deph", gamma_deph)):
        if not np.isfinite(val) or val < 0:
            raise ModelError(f"rate must be non-negative, got {val}", f"lambda_system.{name}")
    if gamma0 <= 0:
        raise ModelError("gamma0 must be positive", "lambda_system.gamma0")
    for name, val in (("eta0", eta0), ("eta1", eta1)):
        if not (0.0 <= val <= 1.0):
            raise ModelError(f"efficiency {val} outside [0, 1]", f"lambda_system.{name}")
    H = np.array([[delta0, 0.0, omega0 / 2],
                  [0.0, delta1, omega1 / 2],
                  [omega0 / 2, omega1 / 2, 0.0]], dtype=complex)
    detected = (
        DetectedChannel(_basis_op(3, 0, 2, np.sqrt(gamma0)), 0, eta0, "2->0"),
        DetectedChannel(_basis_op(3, 1, 2, np.sqrt(gamma1)), 1, eta1, "2->1"),
    )
    undetected = ()
    if gamma_deph > 0:
        undetected = (UndetectedDissipator(np.sqrt(gamma_deph) * np.diag([1.0, -1.0, 1.0]).astype(complex),
                                           "dephasing"),)
    model = OpenSystemModel(H, detected, undetected)
    model.check_observable()
    return model


def build_two_level(omega, delta=0.0, gamma=1.0, eta=1.0) -> OpenSystemModel:
    """Driven two-level emitter, basis (|g>, |e>).

    H = [[0, Omega/2], [Omega/2, -delta]] (laser detuning delta = omega_L - omega_eg,
    energies measured from |g>), single detected channel sqrt(gamma)|g><e|.
    """
    if not np.isfinite(gamma) or gamma <= 0:
        raise ModelError(f"gamma must be positive, got {gamma}", "gamma")
    if not (0.0 <= eta <= 1.0):
        raise ModelError(f"efficiency {eta} outside [0, 1]", "eta")
    H = np.array([[0.0, omega / 2], [omega / 2, -delta]], dtype=complex)
    ch = DetectedChannel(_basis_op(2, 0, 1, np.sqrt(gamma)), 0, eta, "e->g")
    model = OpenSystemModel(H, (ch,))
    model.check_observable()
    return model


def _lambda_at(theta, parameter, fixed):
    return build_lambda_system(**{**fixed, parameter: theta})


def _two_level_at(theta, parameter, fixed):
    return build_two_level(**{**fixed, parameter: theta})


def lambda_family(parameter: str, theta0: float, fd_step: float | None = None, **fixed) -> ParameterizedModel:
    """Lambda system with one keyword argument of :func:`build_lambda_system` swept."""
    return ParameterizedModel(partial(_lambda_at, parameter=parameter, fixed=fixed), theta0, fd_step, parameter)


def two_level_family(parameter: str, theta0: float, fd_step: float | None = None, **fixed) -> ParameterizedModel:
    return ParameterizedModel(partial(_two_level_at, parameter=parameter, fixed=fixed), theta0, fd_step, parameter)


# ---------------------------------------------------------------- config files

LAMBDA_KEYS = ("omega0", "omega1", "delta0", "delta1", "gamma0", "gamma1", "gamma_deph", "eta0", "eta1")
_LAMBDA_REQUIRED = ("omega0", "omega1", "gamma0", "gamma1")
_TOP_KEYS = {"dim", "hamiltonian", "lambda_system", "detected", "undetected", "sweep", "units"}


def _matrix(node, path, dim) -> np.ndarray:
    if not isinstance(node, dict) or "real" not in node:
        raise ModelError("expected a mapping with 'real' (and optional 'imag')", path)
    try:
        re = np.array(node["real"], dtype=float)
        im = np.array(node.get("imag", np.zeros_like(re)), dtype=float)
    except (TypeError, ValueError) as exc:
        raise ModelError(f"not a numeric matrix ({exc})", path) from None
    for part, arr in (("real", re), ("imag", im)):
        if arr.shape != (dim, dim):
            raise ModelError(f"expected {dim}x{dim} array, got shape {arr.shape}", f"{path}.{part}")
    return re + 1j * im


def _number(node, path) -> float:
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ModelError(f"expected a number, got {node!r}", path)
    return float(node)


def _model_from_config(cfg: dict) -> OpenSystemModel:
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise ModelError(f"unknown keys {sorted(unknown)}", "<root>")
    if "lambda_system" in cfg:
        for key in ("hamiltonian", "detected", "undetected"):
            if key in cfg:
                raise ModelError("must be absent when 'lambda_system' is given", key)
        ls = cfg["lambda_system"]
        if not isinstance(ls, dict):
            raise ModelError("expected a mapping", "lambda_system")
        bad = set(ls) - set(LAMBDA_KEYS)
        if bad:
            raise ModelError(f"unknown keys {sorted(bad)}", "lambda_system")
        for key in _LAMBDA_REQUIRED:
            if key not in ls:
                raise ModelError("missing field", f"lambda_system.{key}")
        if "dim" in cfg and cfg["dim"] != 3:
            raise ModelError("a Lambda system has dim 3", "dim")
        kwargs = {k: _number(v, f"lambda_system.{k}") for k, v in ls.items()}
        return build_lambda_system(**kwargs)

    if "dim" not in cfg:
        raise ModelError("missing field", "dim")
    dim = cfg["dim"]
    if isinstance(dim, bool) or not isinstance(dim, int) or dim < 2:
        raise ModelError(f"expected an integer >= 2, got {dim!r}", "dim")
    if "hamiltonian" not in cfg:
        raise ModelError("missing field (or give 'lambda_system')", "hamiltonian")
    H = _matrix(cfg["hamiltonian"], "hamiltonian", dim)
    if np.max(np.abs(H - H.conj().T)) > HERMITIAN_ATOL:
        raise ModelError("Hamiltonian is not Hermitian", "hamiltonian")
    det_nodes = cfg.get("detected")
    if not isinstance(det_nodes, list) or not det_nodes:
        raise ModelError("expected a non-empty list", "detected")
    detected = []
    for i, node in enumerate(det_nodes):
        p = f"detected[{i}]"
        if not isinstance(node, dict):
            raise ModelError("expected a mapping", p)
        for key in ("operator", "final_state"):
            if key not in node:
                raise ModelError("missing field", f"{p}.{key}")
        op = _matrix(node["operator"], f"{p}.operator", dim)
        fs = node["final_state"]
        if isinstance(fs, bool) or not isinstance(fs, int) or not (0 <= fs < dim):
            raise ModelError(f"final state index {fs!r} outside [0, {dim})", f"{p}.final_state")
        eff = _number(node.get("efficiency", 1.0), f"{p}.efficiency")
        if not (0.0 <= eff <= 1.0):
            raise ModelError(f"efficiency {eff} outside [0, 1]", f"{p}.efficiency")
        if not is_rank_one_onto(op, fs):
            raise ModelError("detected channel not rank-1 onto final state", f"{p}.operator")
        detected.append(DetectedChannel(op, fs, eff, str(node.get("label", f"c{i}"))))
    undetected = []
    for i, node in enumerate(cfg.get("undetected") or []):
        p = f"undetected[{i}]"
        if not isinstance(node, dict) or "operator" not in node:
            raise ModelError("missing field", f"{p}.operator")
        op = _matrix(node["operator"], f"{p}.operator", dim)
        try:
            undetected.append(UndetectedDissipator(op, str(node.get("label", f"u{i}"))))
        except ModelError as exc:
            raise ModelError(exc.message, f"{p}.operator") from None
    model = OpenSystemModel(H, tuple(detected), tuple(undetected))
    model.check_observable()
    return model


def _resolve_parameter(cfg: dict, name: str) -> tuple:
    if "." not in name and "lambda_system" in cfg and name in LAMBDA_KEYS:
        return ("lambda_system", name)
    keys = []
    for part in name.split("."):
        keys.append(int(part) if part.lstrip("-").isdigit() else part)
    node = cfg
    try:
        for k in keys:
            node = node[k]
    except (KeyError, IndexError, TypeError):
        if len(keys) == 2 and keys[0] == "lambda_system" and keys[1] in LAMBDA_KEYS:
            return tuple(keys)  # optional key, defaults apply until swept
        raise ModelError(f"parameter {name!r} does not name a field of this config", "sweep.parameter") from None
    if isinstance(node, bool) or not isinstance(node, (int, float)):
        raise ModelError(f"parameter {name!r} does not name a scalar", "sweep.parameter")
    return tuple(keys)


def _set_path(cfg: dict, keys: tuple, value: float) -> None:
    node = cfg
    for k in keys[:-1]:
        node = node[k]
    node[keys[-1]] = value
    # keep Hermiticity when an off-diagonal Hamiltonian entry is swept
    if len(keys) == 4 and keys[0] == "hamiltonian" and keys[2] != keys[3]:
        sign = -1.0 if keys[1] == "imag" else 1.0
        cfg["hamiltonian"][keys[1]][keys[3]][keys[2]] = sign * value


@dataclass(frozen=True)
class ConfigBuilder:
    """Picklable builder substituting ``theta`` at ``path`` inside a config document."""

    config: dict = field(repr=False)
    path: tuple | None = None

    def __call__(self, theta: float) -> OpenSystemModel:
        cfg = copy.deepcopy(self.config)
        cfg.pop("sweep", None)
        if self.path is not None:
            _set_path(cfg, self.path, float(theta))
        return _model_from_config(cfg)


def load_model(config_text: str) -> ParameterizedModel:
    """Parse a YAML/JSON model config into a :class:`ParameterizedModel`.

    The model is built and validated eagerly at ``theta0``. Without a ``sweep``
    section the builder ignores theta and ``theta0`` is 0.
    """
    try:
        cfg = yaml.safe_load(config_text)
    except yaml.YAMLError as exc:
        raise ModelError(f"cannot parse config: {exc}") from None
    if not isinstance(cfg, dict):
        raise ModelError("config must be a mapping", "<root>")
    sweep = cfg.get("sweep")
    path, theta0, fd_step, name = None, 0.0, None, "theta"
    if sweep is not None:
        if not isinstance(sweep, dict):
            raise ModelError("expected a mapping", "sweep")
        for key in ("parameter", "theta0"):
            if key not in sweep:
                raise ModelError("missing field", f"sweep.{key}")
        name = str(sweep["parameter"])
        theta0 = _number(sweep["theta0"], "sweep.theta0")
        if sweep.get("fd_step") is not None:
            fd_step = _number(sweep["fd_step"], "sweep.fd_step")
        body = {k: v for k, v in cfg.items() if k != "sweep"}
        path = _resolve_parameter(body, name)
    builder = ConfigBuilder(cfg, path)
    pm = ParameterizedModel(builder, theta0, fd_step, name)
    pm.at()
    return pm


def _matrix_node(op: np.ndarray) -> dict:
    return {"real": np.real(op).tolist(), "imag": np.imag(op).tolist()}


def render_model(model: OpenSystemModel, parameter: str = "hamiltonian.real.0.0",
                 theta0: float | None = None, fd_step: float | None = None) -> str:
    """Serialize ``model`` as an explicit-matrix config that :func:`load_model` reads back.

    ``parameter`` must be a dotted path into the rendered document; ``theta0``
    defaults to the value currently stored there, so ``load_model(...).at()``
    reproduces ``model`` exactly.
    """
    cfg: dict[str, Any] = {
        "dim": model.dim,
        "hamiltonian": _matrix_node(model.hamiltonian),
        "detected": [{"operator": _matrix_node(ch.operator), "final_state": ch.final_state,
                      "efficiency": ch.efficiency, "label": ch.label} for ch in model.detected],
        "undetected": [{"operator": _matrix_node(d.operator), "label": d.label} for d in model.undetected],
    }
    path = _resolve_parameter(cfg, parameter)
    if theta0 is None:
        node = cfg
        for k in path:
            node = node[k]
        theta0 = float(node)
    sweep: dict[str, Any] = {"parameter": parameter, "theta0": float(theta0)}
    if fd_step is not None:
        sweep["fd_step"] = float(fd_step)
    cfg["sweep"] = sweep
    return yaml.safe_dump(cfg, sort_keys=False)
