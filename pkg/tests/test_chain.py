import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from misync.chain import (
    ChainParams,
    InitialStateSpec,
    basis_state,
    build_classical_noise_generator,
    build_hamiltonian,
    build_measurement,
    build_model,
    realize_initial_state,
)
from misync.dfs import overlaps
from misync.errors import ConfigError
from misync.linalg import PureEnsemble, as_density, purity

PAULI = {
    "I": np.eye(2, dtype=complex),
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
}


def naive_string(ops: dict, n: int) -> np.ndarray:
    """Kronecker product of a Pauli string given as {site: letter}, sites 0-based."""
    out = np.array([[1.0 + 0j]])
    for j in range(n):
        out = np.kron(out, PAULI[ops.get(j, "I")])
    return out


def naive_hamiltonian(n, J, h):
    H = np.zeros((2**n, 2**n), dtype=complex)
    for j in range(n - 1):
        H += J / 2 * (naive_string({j: "X", j + 1: "X"}, n) + naive_string({j: "Y", j + 1: "Y"}, n))
    for j in range(n):
        H += h * naive_string({j: "Z"}, n)
    return H


@pytest.mark.parametrize("n", range(1, 7))
def test_hamiltonian_matches_naive_pauli_sum(n):
    params = ChainParams(N=n, J=0.8, h=1.3)
    assert np.max(np.abs(build_hamiltonian(params) - naive_hamiltonian(n, 0.8, 1.3))) <= 1e-12


def test_single_site_is_field_only():
    np.testing.assert_allclose(build_hamiltonian(ChainParams(N=1, h=0.4)), 0.4 * PAULI["Z"])


def test_two_site_spectrum_without_field():
    # hopping splits the single-excitation pair into -J, +J; polarised states stay at 0
    vals = np.linalg.eigvalsh(build_hamiltonian(ChainParams(N=2, J=1.0, h=0.0)))
    np.testing.assert_allclose(vals, [-1, 0, 0, 1], atol=1e-12)


def test_hamiltonian_conserves_magnetization():
    model = build_model(ChainParams(N=8, gamma=1.0, measured_site=3))
    m = model.magnetization
    assert np.max(np.abs(model.H @ m - m @ model.H)) <= 1e-10


@pytest.mark.parametrize("n", range(2, 7))
def test_zero_field_spectrum_symmetric(n):
    vals = np.linalg.eigvalsh(build_hamiltonian(ChainParams(N=n, h=0.0)))
    np.testing.assert_allclose(np.sort(vals), np.sort(-vals), atol=1e-10)


def test_measurement_operator():
    assert not np.any(build_measurement(ChainParams(N=3, gamma=0.0, measured_site=2)))
    np.testing.assert_allclose(build_measurement(ChainParams(N=2, gamma=1.0, measured_site=1)), np.diag([1, 1, -1, -1]))
    L = build_measurement(ChainParams(N=5, gamma=0.3, measured_site=4))
    assert np.count_nonzero(L - np.diag(np.diag(L))) == 0
    np.testing.assert_allclose(np.abs(np.diag(L)), np.sqrt(0.3))
    np.testing.assert_allclose(L @ L, 0.3 * np.eye(32), atol=1e-14)


def test_classical_noise_generator():
    params = ChainParams(N=3, gamma=0.5, measured_site=2)
    G = build_classical_noise_generator(params)
    np.testing.assert_array_equal(G, build_measurement(params))
    np.testing.assert_allclose(G, G.conj().T)
    H = build_hamiltonian(params)
    assert np.max(np.abs(G @ H - H @ G)) > 0.1


@pytest.mark.parametrize(
    "kwargs",
    [dict(N=0), dict(N=11), dict(N=3, gamma=-0.1), dict(N=3, measured_site=4), dict(N=3, measured_site=0)],
)
def test_chain_params_validation(kwargs):
    with pytest.raises(ConfigError):
        ChainParams(**kwargs)


def test_basis_state_convention():
    # '0' is spin up (sigma^z = +1); site 1 is the most significant bit
    model = build_model(ChainParams(N=3))
    v = basis_state("011")
    assert [np.vdot(v, z @ v).real for z in model.site_z] == [1, -1, -1]
    with pytest.raises(ConfigError):
        basis_state("012")


# ---------------------------------------------------------------- initial states


@pytest.fixture(scope="module")
def model8():
    return build_model(ChainParams(N=8, gamma=0.7 / np.pi, measured_site=3))


def test_mixture_overlaps(model8):
    dec = model8.dfs()
    state = realize_initial_state(InitialStateSpec("mixture", [("q1", 0.4), ("p", 0.6)]), dec, model8)
    assert isinstance(state, PureEnsemble)
    ov = overlaps(state, dec)
    np.testing.assert_allclose(ov, [0.4, 0, 0, 0, 0, 0, 0.6], atol=1e-10)


def test_superposition_of_both_dfs(model8):
    dec = model8.dfs()
    a = 1 / np.sqrt(2)
    state = realize_initial_state(InitialStateSpec("superposition", [("q1", a), ("q2", a)]), dec, model8)
    assert purity(state) == pytest.approx(1.0, abs=1e-12)
    ov = overlaps(state, dec)
    assert ov[0] == pytest.approx(0.5, abs=1e-10) and ov[1] == pytest.approx(0.5, abs=1e-10)
    assert ov[-1] == pytest.approx(0.0, abs=1e-10)


def test_spin_flip_maps_first_dfs_into_second(model8):
    dec = model8.dfs()
    flipped = realize_initial_state(InitialStateSpec("superposition", [("flip:q1", 1.0)]), dec, model8)
    assert overlaps(flipped, dec)[1] == pytest.approx(1.0, abs=1e-10)


def test_all_weight_in_one_dfs(model8):
    dec = model8.dfs()
    state = realize_initial_state(InitialStateSpec("mixture", [("q2", 1.0)]), dec, model8)
    ov = overlaps(state, dec)
    assert ov[1] == pytest.approx(1.0) and ov[-1] == pytest.approx(0.0, abs=1e-12)


def test_mode_labels_on_multi_frequency_dfs():
    model = build_model(ChainParams(N=9, gamma=0.1, measured_site=5))
    dec = model.dfs()
    with pytest.raises(ConfigError, match="modes"):
        realize_initial_state(InitialStateSpec("superposition", [("q1", 1.0)]), dec, model)
    with pytest.raises(ConfigError):
        realize_initial_state(InitialStateSpec("superposition", [("q1@7", 1.0)]), dec, model)
    a = 1 / np.sqrt(2)
    state = realize_initial_state(
        InitialStateSpec("superposition", [("q1@sqrt(5)", a), ("q2@1", a)]), dec, model
    )
    ov = overlaps(state, dec)
    assert ov[0] == pytest.approx(0.5, abs=1e-10) and ov[1] == pytest.approx(0.5, abs=1e-10)
    # the selected mode oscillates at exactly its Bohr frequency
    sub = dec.subspace("q1")
    amp = sub.basis.conj().T @ state
    present = np.flatnonzero(np.abs(amp) > 1e-9)
    assert len(present) == 2
    assert abs(sub.energies[present[1]] - sub.energies[present[0]]) == pytest.approx(np.sqrt(5), abs=1e-9)


@pytest.mark.parametrize(
    "kind, terms",
    [
        ("mixture", [("q1", 0.5), ("p", 0.6)]),
        ("mixture", [("q1", -0.1), ("p", 1.1)]),
        ("superposition", [("q1", 1.0), ("q2", 1.0)]),
        ("potion", [("q1", 1.0)]),
        ("mixture", []),
    ],
)
def test_invalid_specs(kind, terms):
    with pytest.raises(ConfigError):
        InitialStateSpec(kind, terms)


def test_unknown_label(model8):
    with pytest.raises(ConfigError):
        realize_initial_state(InitialStateSpec("mixture", [("q7", 1.0)]), model8.dfs(), model8)


@settings(max_examples=25, deadline=None)
@given(w=st.floats(0.0, 1.0))
def test_mixture_weights_reproduced(model8, w):
    dec = model8.dfs()
    terms = [(label, v) for label, v in (("q1", w), ("p", 1 - w)) if v > 0]
    state = realize_initial_state(InitialStateSpec("mixture", terms), dec, model8)
    rho = as_density(state)
    assert np.real(np.trace(rho @ dec.subspace("q1").projector)) == pytest.approx(w, abs=1e-10)
    assert np.real(np.trace(rho @ dec.complement_projector)) == pytest.approx(1 - w, abs=1e-10)
