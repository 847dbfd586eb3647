import math

import numpy as np
import pytest
from scipy import sparse

from ctbn_meanfield.model import (
    ComponentEvidence,
    ConditionalRateMatrix,
    CtbnModel,
    Evidence,
    StateSpace,
    StateSpaceTooLargeError,
    amalgamate,
    build_ising_chain,
    conditional_rate,
    evidence_from_dict,
    evidence_to_dict,
    model_from_dict,
    model_to_dict,
    validate_model,
)


def two_state_model(rows):
    space = StateSpace([2])
    return CtbnModel(space, [ConditionalRateMatrix(0, (), np.array([rows]))])


def test_state_space_indexing_roundtrip():
    space = StateSpace([2, 3, 2])
    assert space.joint_size == 12
    for idx in range(space.joint_size):
        assert space.joint_index(space.joint_state(idx)) == idx
    # Component 0 is most significant.
    assert space.joint_index((1, 0, 0)) == 6
    assert space.joint_index((0, 0, 1)) == 1


def test_state_space_rejects_degenerate():
    with pytest.raises(ValueError):
        StateSpace([2, 1])
    with pytest.raises(ValueError):
        StateSpace([])


def test_validate_clean_model():
    model = two_state_model([[-1.0, 1.0], [2.0, -2.0]])
    assert validate_model(model) == []


def test_validate_bad_row_sum():
    model = two_state_model([[-1.0, 0.5], [2.0, -2.0]])
    violations = validate_model(model)
    assert len(violations) == 1
    assert "row 0 sums to" in violations[0]


def test_validate_negative_offdiagonal():
    model = two_state_model([[0.1, -0.1], [2.0, -2.0]])
    violations = validate_model(model)
    assert any("negative off-diagonal" in v for v in violations)


def test_validate_missing_instantiation():
    space = StateSpace([2, 2])
    a = np.array([[[-1.0, 1.0], [1.0, -1.0]]])
    table = np.full((2, 2, 2), np.nan)
    table[0] = [[-1.0, 1.0], [1.0, -1.0]]
    model = CtbnModel(
        space,
        [
            ConditionalRateMatrix(0, (), a),
            ConditionalRateMatrix(1, (0,), table),
        ],
    )
    violations = validate_model(model)
    assert any("missing" in v for v in violations)


def test_single_component_amalgamation_is_identity():
    rows = [[-1.5, 1.5], [0.7, -0.7]]
    model = two_state_model(rows)
    joint = amalgamate(model)
    assert np.allclose(joint.dense(), rows)


def test_ising_two_component_amalgamation_entry():
    beta, tau = 1.0, 1.0
    model = build_ising_chain(2, beta, tau)
    joint = amalgamate(model).dense()
    # From (-, +) to (+, +): component 0 flips to + while its neighbor is +.
    r, c = 0b01, 0b11
    assert joint[r, c] == pytest.approx(tau / (1 + math.exp(-2 * beta)))
    # From (-, -) to (+, -): neighbor is -, so the flip is uphill.
    assert joint[0b00, 0b10] == pytest.approx(tau / (1 + math.exp(2 * beta)))


def test_amalgamation_zero_when_two_components_differ():
    model = build_ising_chain(3, 0.7, 1.3)
    joint = amalgamate(model).dense()
    space = model.state_space
    for r in range(space.joint_size):
        for c in range(space.joint_size):
            differ = sum(
                a != b for a, b in zip(space.joint_state(r), space.joint_state(c))
            )
            if differ >= 2:
                assert joint[r, c] == 0.0


def test_amalgamation_rows_sum_to_zero():
    model = build_ising_chain(4, 0.5, 2.0)
    joint = amalgamate(model)
    sums = np.asarray(joint.matrix.sum(axis=1)).ravel()
    assert np.max(np.abs(sums)) < 1e-10


def test_amalgamation_permutation_equivariance():
    rng = np.random.default_rng(7)
    a = rng.uniform(0.2, 2.0, size=(1, 2, 2))
    a[0, 0, 0] = -a[0, 0, 1]
    a[0, 1, 1] = -a[0, 1, 0]
    b = rng.uniform(0.2, 2.0, size=(2, 2, 2))
    b[:, 0, 0] = -b[:, 0, 1]
    b[:, 1, 1] = -b[:, 1, 0]
    space = StateSpace([2, 2])
    model = CtbnModel(
        space,
        [ConditionalRateMatrix(0, (), a), ConditionalRateMatrix(1, (0,), b)],
    )
    swapped = CtbnModel(
        space,
        [ConditionalRateMatrix(0, (1,), b), ConditionalRateMatrix(1, (), a)],
    )
    q = amalgamate(model).dense()
    q_sw = amalgamate(swapped).dense()
    perm = [space.joint_index((s1, s0)) for s0, s1 in map(space.joint_state, range(4))]
    assert np.allclose(q_sw[np.ix_(perm, perm)], q)


def test_ising_beta_zero_is_kronecker_sum():
    d, tau = 3, 1.7
    model = build_ising_chain(d, 0.0, tau)
    joint = amalgamate(model).dense()
    q1 = np.array([[-tau / 2, tau / 2], [tau / 2, -tau / 2]])
    expected = np.zeros((2**d, 2**d))
    for i in range(d):
        factors = [np.eye(2)] * d
        factors[i] = q1
        term = factors[0]
        for f in factors[1:]:
            term = np.kron(term, f)
        expected += term
    assert np.allclose(joint, expected)


def test_ising_rates():
    beta, tau = 0.8, 2.0
    model = build_ising_chain(3, beta, tau)
    # Edge component: one neighbor at -1, flip to +1.
    assert conditional_rate(model, 0, 0, 1, (0,)) == pytest.approx(
        tau / (1 + math.exp(2 * beta))
    )
    # Middle component: both neighbors +1, flip to +1.
    assert conditional_rate(model, 1, 0, 1, (1, 1)) == pytest.approx(
        tau / (1 + math.exp(-4 * beta))
    )
    # beta = 0 gives tau/2 everywhere.
    flat = build_ising_chain(4, 0.0, tau)
    for i in range(4):
        n_par = len(flat.parents(i))
        for u_idx in range(2**n_par):
            u = flat.parent_instantiation(i, u_idx)
            assert conditional_rate(flat, i, 0, 1, u) == pytest.approx(tau / 2)


def test_conditional_rate_diagonal_and_arity():
    model = build_ising_chain(2, 0.0, 2.0)
    assert conditional_rate(model, 0, 0, 1, (1,)) == pytest.approx(1.0)
    assert conditional_rate(model, 0, 0, 0, (1,)) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        conditional_rate(model, 0, 0, 1, (1, 0))
    with pytest.raises(ValueError):
        conditional_rate(model, 0, 0, 3, (1,))


def test_joint_size_cap():
    model = build_ising_chain(13, 0.5, 1.0)
    with pytest.raises(StateSpaceTooLargeError):
        amalgamate(model)
    amalgamate(model, max_joint_size=2**13)


def test_children_are_transpose_of_parents():
    model = build_ising_chain(5, 1.0, 1.0)
    for i in range(5):
        for j in model.children[i]:
            assert i in model.parents(j)
    for j in range(5):
        for p in model.parents(j):
            assert j in model.children[p]


def test_self_parent_rejected():
    with pytest.raises(ValueError):
        ConditionalRateMatrix(0, (0,), np.zeros((2, 2, 2)))


def test_model_roundtrip_exact():
    model = build_ising_chain(3, 0.77, 1.31)
    data = model_to_dict(model)
    back = model_from_dict(data)
    for crm_a, crm_b in zip(model.rate_matrices, back.rate_matrices):
        assert crm_a.parents == crm_b.parents
        assert np.array_equal(crm_a.table, crm_b.table)
    # Through JSON text as well.
    import json

    again = model_from_dict(json.loads(json.dumps(data)))
    for crm_a, crm_b in zip(model.rate_matrices, again.rate_matrices):
        assert np.array_equal(crm_a.table, crm_b.table)


def test_evidence_roundtrip_and_validation():
    model = build_ising_chain(2, 1.0, 1.0)
    ev = Evidence(
        1.0,
        [
            ComponentEvidence(0, 1),
            ComponentEvidence(np.array([0.25, 0.75]), None, None),
        ],
    )
    assert ev.validate(model) == []
    data = evidence_to_dict(ev, model)
    back = evidence_from_dict(data, model)
    assert back.components[0].start == 0
    assert back.components[0].end == 1
    assert np.array_equal(np.asarray(back.components[1].start), [0.25, 0.75])
    assert back.components[1].end is None

    bad = Evidence(1.0, [ComponentEvidence(0, 1), ComponentEvidence(np.array([0.5, 0.4]))])
    assert any("sum to 1" in v for v in bad.validate(model))


def test_trajectory_evidence_lookup():
    ev = ComponentEvidence(0, None, trajectory=[(0.0, 0), (0.4, 1), (0.9, 0)])
    assert ev.trajectory_state(0.0) == 0
    assert ev.trajectory_state(0.4) == 1
    assert ev.trajectory_state(0.89) == 1
    assert ev.trajectory_state(0.95) == 0


def test_averaging_tables_shapes():
    model = build_ising_chain(3, 1.0, 1.0)
    t = model.tables(1)
    assert t.flat.shape == (4, 4)
    assert t.flat_diag.shape == (4, 2)
    assert len(t.cond) == 2
    assert t.cond[0].shape == (2, 4, 2)
    assert t.cond_diag[0].shape == (2, 2, 2)
    assert not t.has_zero_rate
