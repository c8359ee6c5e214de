import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wtd_fisher.errors import ModelError
from wtd_fisher.model import (
    DetectedChannel,
    OpenSystemModel,
    ParameterizedModel,
    build_lambda_system,
    build_two_level,
    is_rank_one_onto,
    lambda_family,
    load_model,
    render_model,
    two_level_family,
)

from conftest import corpus

LAMBDA_YAML = """
lambda_system:
  omega0: 5.0
  omega1: 2.0
  gamma0: 1.0
  gamma1: 1.0
  gamma_deph: 0.1
sweep:
  parameter: delta1
  theta0: 1.5
"""


def test_lambda_hamiltonian_and_channels():
    m = build_lambda_system(5.0, 2.0, delta0=0.3, delta1=1.5, gamma0=1.0, gamma1=0.5, gamma_deph=0.1)
    H = m.hamiltonian
    assert np.allclose(np.diag(H), [0.3, 1.5, 0.0])
    assert H[0, 2] == H[2, 0] == 2.5
    assert H[1, 2] == H[2, 1] == 1.0
    assert m.n_channels == 2 and [c.final_state for c in m.detected] == [0, 1]
    assert np.isclose(abs(m.detected[1].operator[1, 2]) ** 2, 0.5)
    assert len(m.undetected) == 1
    assert build_lambda_system(5.0, 2.0).undetected == ()


def test_two_level_structure():
    m = build_two_level(2.0, 0.5, gamma=3.0, eta=0.4)
    assert np.allclose(m.hamiltonian, [[0, 1.0], [1.0, -0.5]])
    assert np.isclose(abs(m.detected[0].operator[0, 1]) ** 2, 3.0)
    assert m.efficiencies.tolist() == [0.4]


def test_rank_one_check():
    op = np.zeros((3, 3))
    op[0, 2] = 1.0
    assert is_rank_one_onto(op, 0)
    assert not is_rank_one_onto(op, 1)
    op[1, 1] = 0.5
    assert not is_rank_one_onto(op, 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 4), st.integers(0, 3), st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_rank_one_accepts_any_row(dim, target, row):
    target = target % dim
    op = np.zeros((dim, dim))
    op[target, :] = row[:dim]
    assert is_rank_one_onto(op, target)


def test_detected_channel_rejects_non_rank_one():
    with pytest.raises(ModelError):
        DetectedChannel(np.eye(2), 0)


def test_efficiency_bounds():
    with pytest.raises(ModelError):
        build_two_level(1.0, eta=1.5)


def test_non_hermitian_hamiltonian_rejected():
    C = np.zeros((2, 2))
    C[0, 1] = 1
    with pytest.raises(ModelError):
        OpenSystemModel(np.array([[0, 1.0], [0, 0]]), (DetectedChannel(C, 0),))


def test_fingerprint_tracks_content():
    a = build_lambda_system(5, 2, delta1=1.0)
    b = build_lambda_system(5, 2, delta1=1.0)
    c = build_lambda_system(5, 2, delta1=1.0 + 1e-9)
    assert a.fingerprint() == b.fingerprint() and a.same_as(b)
    assert a.fingerprint() != c.fingerprint()
    assert a.fingerprint() != a.with_efficiencies([1.0, 0.5]).fingerprint()


def test_parameterized_family():
    pm = lambda_family("delta1", 1.5, omega0=5, omega1=2)
    assert pm.fd_step == pytest.approx(1.5e-4)
    assert pm.at().hamiltonian[1, 1] == 1.5
    assert pm.at(0.2).hamiltonian[1, 1] == 0.2
    assert pm.recentered(0.7).theta0 == 0.7
    with pytest.raises(ModelError):
        ParameterizedModel(pm.builder, 0.0, fd_step=0.0)
    tl = two_level_family("omega", 1.0)
    assert tl.at(2.0).hamiltonian[0, 1] == 1.0


def test_load_lambda_config():
    pm = load_model(LAMBDA_YAML)
    assert pm.theta0 == 1.5 and pm.parameter == "delta1"
    ref = build_lambda_system(5.0, 2.0, delta1=1.5, gamma_deph=0.1)
    assert pm.at().same_as(ref)
    assert pm.at(0.5).same_as(build_lambda_system(5.0, 2.0, delta1=0.5, gamma_deph=0.1))


def test_load_json_config():
    cfg = {"lambda_system": {"omega0": 5, "omega1": 2, "gamma0": 1, "gamma1": 1}}
    pm = load_model(json.dumps(cfg))
    assert pm.theta0 == 0.0
    assert pm.at(3.0).same_as(pm.at(0.0))      # no sweep section: theta is ignored


@pytest.mark.parametrize("text, path", [
    ("lambda_system: {omega0: 5, omega1: 2, gamma0: 1}", "lambda_system.gamma1"),
    ("lambda_system: {omega0: 5, omega1: 2, gamma0: 1, gamma1: 1, bogus: 1}", "lambda_system"),
    ("dim: 2\nhamiltonian: {real: [[0, 1], [1, 0]]}\ndetected: []", "detected"),
    ("dim: 2\nhamiltonian: {real: [[0, 1], [0, 0]]}\ndetected: [{operator: {real: [[0, 1], [0, 0]]}, "
     "final_state: 0}]", "hamiltonian"),
    ("dim: 2\nhamiltonian: {real: [[0, 1], [1, 0]]}\ndetected: [{operator: {real: [[1, 0], [0, 1]]}, "
     "final_state: 0}]", "detected[0].operator"),
    ("dim: 2\nhamiltonian: {real: [[0, 1], [1, 0]]}\ndetected: [{operator: {real: [[0, 1], [0, 0]]}, "
     "final_state: 5}]", "detected[0].final_state"),
    ("dim: 2\nhamiltonian: {real: [[0, 1], [1, 0]]}\ndetected: [{operator: {real: [[0, 1], [0, 0]]}, "
     "final_state: 0, efficiency: 2}]", "detected[0].efficiency"),
    (LAMBDA_YAML.replace("parameter: delta1", "parameter: nothing.here"), "sweep.parameter"),
    ("- 1\n- 2", "<root>"),
])
def test_config_errors_name_the_field(text, path):
    with pytest.raises(ModelError) as info:
        load_model(text)
    assert info.value.path == path
    assert str(info.value).startswith(path)


def test_sweeping_off_diagonal_keeps_hermiticity():
    text = """
dim: 2
hamiltonian: {real: [[0, 1.5], [1.5, 0]]}
detected: [{operator: {real: [[0, 1], [0, 0]]}, final_state: 0}]
sweep: {parameter: hamiltonian.real.0.1, theta0: 1.5}
"""
    pm = load_model(text)
    assert np.allclose(pm.at(0.7).hamiltonian, [[0, 0.7], [0.7, 0]])


@pytest.mark.parametrize("name", list(corpus()))
def test_render_round_trip(name):
    model = corpus()[name]
    pm = load_model(render_model(model))
    assert pm.at().same_as(model)
