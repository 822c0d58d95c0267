import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.services.hilbert import (
    SIGMA_MINUS, SIGMA_PLUS, SIGMA_Z,
    DensityState, FockOscillator, Ladder, OperatorMatrix, Qubit,
    build_space, edge_mask, embed, embed_product, expectation, identity, ladder_ops,
    oscillator_ops, partial_trace, product_state, rung_projector, thermal_qubit,
)


def test_layout_dimensions_follow_factor_order():
    layout = build_space([Qubit(), Qubit(), Ladder(n_min=-3, n_max=4)])
    assert layout.dims == (2, 2, 8)
    assert layout.dim == 32
    assert layout.ladder_index() == 2


@pytest.mark.parametrize("n_min,n_max", [(2, 1), (0, 5), (-5, 0), (1, 6)])
def test_ladder_window_must_straddle_zero(n_min, n_max):
    with pytest.raises(ValueError):
        Ladder(n_min=n_min, n_max=n_max)


def test_embed_uses_row_major_tensor_order():
    layout = build_space([Qubit(), Qubit()])
    first = embed(SIGMA_Z, 0, layout).to_dense()
    second = embed(SIGMA_Z, 1, layout).to_dense()
    assert_allclose(first, np.kron(SIGMA_Z, np.eye(2)))
    assert_allclose(second, np.kron(np.eye(2), SIGMA_Z))


def test_embed_rejects_wrong_local_shape():
    layout = build_space([Qubit(), Ladder(n_min=-2, n_max=2)])
    with pytest.raises(ValueError):
        embed(np.eye(3), 0, layout)


def test_embed_product_matches_kron():
    layout = build_space([Qubit(), Qubit()])
    op = embed_product({0: SIGMA_PLUS, 1: SIGMA_MINUS}, layout)
    assert_allclose(op.to_dense(), np.kron(SIGMA_PLUS, SIGMA_MINUS))


def test_qubit_basis_has_excited_state_first():
    # sigma^+ raises the ground state (index 1) to the excited state (index 0)
    ground = np.array([0, 1], dtype=complex)
    assert_allclose(SIGMA_PLUS @ ground, [1, 0])
    assert_allclose(SIGMA_Z @ np.array([1, 0]), [1, 0])


def test_ladder_lowering_moves_down_one_rung():
    ladder = Ladder(n_min=-2, n_max=2, quantum=0.5)
    layout = build_space([ladder])
    W, A = ladder_ops(layout, 0)
    assert_allclose(W.entries.diagonal().real, [-1.0, -0.5, 0.0, 0.5, 1.0])
    ket = np.zeros(5, dtype=complex)
    ket[ladder.index(1)] = 1
    assert_allclose(A.entries @ ket, np.eye(5)[ladder.index(0)])
    # the lowest rung is annihilated at the truncation edge
    assert_allclose(A.entries @ np.eye(5)[0], np.zeros(5))
    assert W.hermitian and not A.hermitian


def test_ladder_ops_reject_non_ladder_factor():
    layout = build_space([Qubit(), Ladder(n_min=-1, n_max=1)])
    with pytest.raises(ValueError):
        ladder_ops(layout, 0)


def test_oscillator_number_operator():
    layout = build_space([FockOscillator(n_max=4)])
    a, n = oscillator_ops(layout, 0)
    assert_allclose((a.dag() @ a).to_dense(), n.to_dense(), atol=1e-12)


def test_operator_flagged_hermitian_must_be_hermitian():
    layout = build_space([Qubit()])
    with pytest.raises(ValueError):
        OperatorMatrix(layout=layout, entries=SIGMA_PLUS, hermitian=True)
    assert OperatorMatrix.from_matrix(layout, SIGMA_Z).hermitian


def test_operators_on_different_layouts_do_not_mix():
    a = identity(build_space([Qubit()]))
    b = identity(build_space([Qubit(), Qubit()]))
    with pytest.raises(ValueError):
        a + b


def test_density_state_validation():
    layout = build_space([Qubit()])
    with pytest.raises(ValueError):
        DensityState(layout=layout, matrix=np.diag([0.7, 0.7]))
    with pytest.raises(ValueError):
        DensityState(layout=layout, matrix=np.array([[0.5, 0.1], [0.3, 0.5]]))
    assert not DensityState(layout=layout, matrix=np.diag([1.2, -0.2])).check_positive()


def test_thermal_qubit_bias_and_extreme_temperatures():
    rho = thermal_qubit(2.0)
    layout = build_space([Qubit()])
    z = expectation(DensityState(layout=layout, matrix=rho), OperatorMatrix.from_matrix(layout, SIGMA_Z))
    assert_allclose(z, -np.tanh(1.0))
    cold = thermal_qubit(5000.0)
    assert np.all(np.isfinite(cold))
    assert_allclose(np.diag(cold).real, [0.0, 1.0])


def test_partial_trace_recovers_local_states():
    ladder = Ladder(n_min=-1, n_max=1)
    layout = build_space([Qubit(), Qubit(), ladder])
    local = [thermal_qubit(3.0), thermal_qubit(1.0), rung_projector(ladder, 0)]
    state = product_state(layout, local)
    assert_allclose(partial_trace(state, [1]).matrix, local[1], atol=1e-14)
    assert_allclose(partial_trace(state, [0, 2]).matrix, np.kron(local[0], local[2]), atol=1e-14)
    with pytest.raises(ValueError):
        partial_trace(state, [])


def test_edge_mask_marks_outer_rungs():
    layout = build_space([Qubit(), Ladder(n_min=-5, n_max=5)])
    mask = edge_mask(layout, 1, 2)
    # two rungs on each side, times two qubit states
    assert mask.sum() == 8
    assert not mask[5] and mask[0] and mask[10]


def test_ladder_commutator_and_lower_edge():
    ladder = Ladder(n_min=-3, n_max=3, quantum=0.7)
    layout = build_space([Qubit(), ladder])
    W, A = ladder_ops(layout, 1)
    # [W, A] = -E_v A
    assert (W.commutator(A) + 0.7 * A).max_abs() < 1e-12
    bottom = embed(rung_projector(ladder, -3), 1, layout)
    assert_allclose((A.dag() @ A).to_dense(), (identity(layout) - bottom).to_dense(), atol=1e-14)


def test_embedding_composes_and_commutes_across_factors():
    layout = build_space([Qubit(), Qubit(), Ladder(n_min=-2, n_max=2)])
    same = embed(SIGMA_PLUS, 0, layout) @ embed(SIGMA_MINUS, 0, layout)
    assert_allclose(same.to_dense(), embed(SIGMA_PLUS @ SIGMA_MINUS, 0, layout).to_dense())
    first, second = embed(SIGMA_PLUS, 0, layout), embed(SIGMA_Z, 1, layout)
    assert first.commutator(second).max_abs() == 0.0
    assert_allclose((first @ second).to_dense(), embed_product({0: SIGMA_PLUS, 1: SIGMA_Z}, layout).to_dense())


def test_partial_trace_of_everything_and_of_a_bell_pair():
    layout = build_space([Qubit(), Qubit()])
    psi = np.zeros(4, dtype=complex)
    psi[[0, 3]] = 1 / np.sqrt(2)
    bell = DensityState(layout=layout, matrix=np.outer(psi, psi.conj()))
    assert_allclose(partial_trace(bell, [0, 1]).matrix, bell.matrix)
    assert_allclose(partial_trace(bell, [0]).matrix, np.eye(2) / 2, atol=1e-15)
    assert_allclose(partial_trace(bell, [1]).matrix, np.eye(2) / 2, atol=1e-15)


def test_thermal_qubit_bias_at_reference_temperature():
    layout = build_space([Qubit()])
    z = expectation(DensityState(layout=layout, matrix=thermal_qubit(3.0)), OperatorMatrix.from_matrix(layout, SIGMA_Z))
    assert z == pytest.approx(-0.905148, abs=1e-6)
