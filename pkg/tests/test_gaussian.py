import itertools

import numpy as np
import pytest

from diqkd_forge import gaussian as gs

KINDS = ["D", "PS", "S", "TMS", "BS"]


def random_params(kind, rng, scale=2.0):
    return tuple(rng.uniform(-scale, scale, gs.N_PARAMS[gs.GateKind(kind)]))


def random_state(rng, n, n_gates=5):
    state = gs.vacuum(n)
    for _ in range(n_gates):
        kind = str(rng.choice(KINDS if n > 1 else KINDS[:3]))
        arity = 2 if kind in ("TMS", "BS") else 1
        modes = tuple(int(m) for m in rng.choice(n, arity, replace=False))
        state = gs.apply_gate(state, kind, random_params(kind, rng, 1.0), modes)
    return state


@pytest.mark.parametrize("kind", KINDS)
def test_symplectic_identity(kind):
    rng = np.random.default_rng(1)
    omega = gs.symplectic_form(3)
    for _ in range(50):
        modes = (0, 2) if kind in ("TMS", "BS") else (1,)
        op = gs.gate_symplectic(kind, random_params(kind, rng), modes, 3)
        assert np.max(np.abs(op.M.T @ omega @ op.M - omega)) < 1e-12


def test_apply_op_keeps_sigma_physical():
    rng = np.random.default_rng(2)
    omega = gs.symplectic_form(2)
    state = gs.vacuum(2)
    for _ in range(20):
        kind = str(rng.choice(KINDS))
        modes = (0, 1) if kind in ("TMS", "BS") else (int(rng.integers(2)),)
        state = gs.apply_op(state, gs.gate_symplectic(kind, random_params(kind, rng, 1.0), modes, 2))
        sigma = state.branches[0][1].sigma
        assert np.allclose(sigma, sigma.T, atol=1e-12)
        assert np.linalg.eigvalsh(sigma + 0.25j * omega).min() > -1e-9


def test_coherent_state_no_click():
    state = gs.apply_gate(gs.vacuum(1), "D", (0.6, -0.3), (0,))
    det = gs.DetectorModel(0.7)
    assert gs.no_click_probability(state, 0, det) == pytest.approx(np.exp(-0.7 * 0.45), abs=1e-12)


def test_dark_counts_scale_no_click():
    state = gs.apply_gate(gs.vacuum(1), "S", (0.4, 0.2), (0,))
    clean = gs.no_click_probability(state, 0, gs.DetectorModel(0.9))
    dark = gs.no_click_probability(state, 0, gs.DetectorModel(0.9, 1e-3))
    assert dark == pytest.approx(clean * (1 - 1e-3), rel=1e-12)


def test_gates_invert():
    rng = np.random.default_rng(3)
    base = random_state(rng, 2)
    ref = base.branches[0][1]
    cases = {
        "S": lambda p: (-p[0], p[1]),
        "TMS": lambda p: (-p[0], p[1]),
        "BS": lambda p: (-p[0],),
        "PS": lambda p: (-p[0],),
        "D": lambda p: (-p[0], -p[1]),
    }
    for kind, inverse in cases.items():
        modes = (0, 1) if kind in ("TMS", "BS") else (1,)
        params = random_params(kind, rng, 1.0)
        state = gs.apply_gate(gs.apply_gate(base, kind, params, modes), kind, inverse(params), modes)
        got = state.branches[0][1]
        assert np.max(np.abs(got.mu - ref.mu)) < 1e-10
        assert np.max(np.abs(got.sigma - ref.sigma)) < 1e-10


@pytest.mark.parametrize("eta,dark", [(1.0, 0.0), (0.8, 0.0), (0.6, 1e-3)])
def test_outcomes_normalized(eta, dark):
    rng = np.random.default_rng(4)
    det = gs.DetectorModel(eta, dark)
    for n in (1, 2, 3):
        for _ in range(10):
            probs = gs.outcome_probabilities(random_state(rng, n), det)
            assert len(probs) == 2**n
            assert abs(sum(probs.values()) - 1.0) < 1e-10
            assert min(probs.values()) >= 0.0


def test_heralded_outcomes_normalized():
    rng = np.random.default_rng(5)
    det = gs.DetectorModel(0.8)
    for _ in range(10):
        state = gs.apply_gate(random_state(rng, 3), "TMS", (0.7, 0.3), (0, 2))
        cond, _ = gs.condition_click(state, 2, det)
        assert abs(sum(gs.outcome_probabilities(cond, det).values()) - 1.0) < 1e-10


def test_click_no_click_complementary():
    rng = np.random.default_rng(6)
    for eta, dark in [(1.0, 0.0), (0.7, 0.0), (0.9, 1e-2)]:
        det = gs.DetectorModel(eta, dark)
        for _ in range(10):
            state = gs.apply_gate(random_state(rng, 2), "TMS", (0.5, 0.0), (0, 1))
            _, p0 = gs.condition_no_click(state, 1, det)
            _, p1 = gs.condition_click(state, 1, det)
            assert abs(p0 + p1 - 1.0) < 1e-10


def test_quasi_mixture_weights_sum_to_one():
    rng = np.random.default_rng(7)
    det = gs.DetectorModel(0.9)
    for _ in range(10):
        state = random_state(rng, 4, 8)
        state = gs.apply_gate(state, "TMS", (0.6, 0.1), (0, 2))
        state = gs.apply_gate(state, "TMS", (0.6, 0.1), (1, 3))
        state, _ = gs.condition_click(state, 3, det)
        state, _ = gs.condition_click(state, 2, det)
        weights = state.weights
        assert weights.size == 4
        assert abs(weights.sum() - 1.0) < 1e-10


def test_explicit_branches_match_lazy_mixture():
    rng = np.random.default_rng(8)
    det = gs.DetectorModel(0.75)
    state = gs.apply_gate(random_state(rng, 3), "TMS", (0.8, 0.0), (1, 2))
    cond, _ = gs.condition_click(state, 2, det)
    eager = gs.QuasiMixture.from_branches(cond.branches)
    lazy = gs.outcome_probabilities(cond, det)
    explicit = gs.outcome_probabilities(eager, det)
    for key in lazy:
        assert abs(lazy[key] - explicit[key]) < 1e-12


def test_empty_subset_expectation_is_one():
    rng = np.random.default_rng(9)
    expect = gs.subset_expectations(random_state(rng, 2), gs.DetectorModel(0.8))
    assert expect[(0, 0)] == 1.0


def test_inclusion_exclusion_matches_products():
    # independent modes: pattern probabilities factorize
    state = gs.apply_gate(gs.vacuum(2), "D", (0.5, 0.0), (0,))
    state = gs.apply_gate(state, "D", (0.0, 0.8), (1,))
    probs = gs.outcome_probabilities(state, gs.DetectorModel())
    q = [np.exp(-0.25), np.exp(-0.64)]
    for bits in itertools.product((0, 1), repeat=2):
        want = np.prod([1 - q[i] if b else q[i] for i, b in enumerate(bits)])
        assert probs[bits] == pytest.approx(want, abs=1e-12)


def test_vacuum_click_herald_is_impossible():
    with pytest.raises(gs.HeraldImpossibleError):
        gs.condition_click(gs.vacuum(2), 1, gs.DetectorModel())


def test_detector_ranges():
    with pytest.raises(ValueError):
        gs.DetectorModel(1.2)
    with pytest.raises(ValueError):
        gs.DetectorModel(0.9, -0.1)


def test_bad_gate_modes():
    with pytest.raises(ValueError):
        gs.apply_gate(gs.vacuum(2), "BS", (0.3,), (0, 0))
    with pytest.raises(ValueError):
        gs.apply_gate(gs.vacuum(2), "S", (0.3, 0.0), (2,))
