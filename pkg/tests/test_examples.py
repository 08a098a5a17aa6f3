"""Small worked cases with closed-form answers."""

import numpy as np
import pytest

from diqkd_forge import circuit as cm
from diqkd_forge import gaussian as gs
from diqkd_forge import metrics as mx
from diqkd_forge.fock import apply_gate_fock, fock_vacuum, oracle_outcome_probabilities


def single(state):
    (w, g), = state.branches
    return g


def test_vacuum_moments():
    g = single(gs.vacuum(1))
    assert np.array_equal(g.mu, [0.0, 0.0])
    assert np.allclose(g.sigma, 0.25 * np.eye(2))
    assert np.trace(single(gs.vacuum(3)).sigma) == pytest.approx(1.5)
    omega = gs.symplectic_form(2)
    assert np.linalg.eigvalsh(single(gs.vacuum(2)).sigma + 0.25j * omega).min() >= -1e-12


def test_identity_gates():
    assert np.array_equal(gs.gate_symplectic("PS", (0.0,), (0,), 1).M, np.eye(2))
    assert np.array_equal(gs.gate_symplectic("S", (0.0, 0.7), (0,), 1).M, np.eye(2))


def test_two_mode_squeezer_matrix():
    M = gs.gate_symplectic("TMS", (0.5, 0.0), (0, 1), 2).M
    assert np.allclose(np.diag(M), np.cosh(0.5))
    assert np.allclose(np.abs(M[:2, 2:]), np.sinh(0.5) * np.eye(2))


def test_displacement_on_vacuum():
    g = single(gs.apply_gate(gs.vacuum(1), "D", (1.0, 0.0), (0,)))
    assert np.allclose(g.mu, [1.0, 0.0])
    assert np.allclose(g.sigma, 0.25 * np.eye(2))


def test_beamsplitter_swaps_at_quarter_turn():
    state = gs.apply_gate(gs.vacuum(2), "D", (0.7, -0.2), (0,))
    g = single(gs.apply_gate(state, "BS", (np.pi / 2,), (0, 1)))
    assert np.allclose(np.abs(g.mu[2:]), [0.7, 0.2], atol=1e-12)
    assert np.allclose(g.mu[:2], 0.0, atol=1e-12)


def test_tmsv_marginal_is_thermal():
    state = gs.apply_gate(gs.vacuum(2), "TMS", (0.5, 0.0), (0, 1))
    g = single(gs.trace_out(state, 1))
    assert np.allclose(g.sigma, np.cosh(1.0) / 4 * np.eye(2), atol=1e-12)


def test_product_marginal_unchanged():
    state = gs.apply_gate(gs.vacuum(2), "D", (0.3, 0.4), (0,))
    g = single(gs.trace_out(state, 1))
    assert np.allclose(g.mu, [0.3, 0.4])


def test_no_click_closed_forms():
    vac = gs.vacuum(1)
    assert gs.no_click_probability(vac, 0, gs.DetectorModel()) == 1.0
    coh = gs.apply_gate(vac, "D", (1.0, 0.0), (0,))
    assert gs.no_click_probability(coh, 0, gs.DetectorModel()) == pytest.approx(0.3678794, abs=1e-7)
    assert gs.no_click_probability(coh, 0, gs.DetectorModel(0.5)) == pytest.approx(0.6065307, abs=1e-7)
    tmsv = gs.apply_gate(gs.vacuum(2), "TMS", (0.5, 0.0), (0, 1))
    assert gs.no_click_probability(tmsv, 1, gs.DetectorModel()) == pytest.approx(0.7864477, abs=1e-7)


def test_conditioning_closed_forms():
    vac = gs.vacuum(2)
    rest, p = gs.condition_no_click(vac, 1, gs.DetectorModel())
    assert p == pytest.approx(1.0)
    coh = gs.apply_gate(vac, "D", (1.0, 0.0), (0,))
    rest, p = gs.condition_no_click(coh, 1, gs.DetectorModel())
    assert p == pytest.approx(1.0)
    assert np.allclose(single(rest).mu, [1.0, 0.0])
    flipped = gs.apply_gate(vac, "D", (1.0, 0.0), (1,))
    _, p_click = gs.condition_click(flipped, 1, gs.DetectorModel())
    assert p_click == pytest.approx(0.6321206, abs=1e-7)


def test_pattern_closed_forms():
    probs = gs.outcome_probabilities(gs.vacuum(2), gs.DetectorModel(0.6))
    assert probs[(0, 0)] == 1.0 and probs[(1, 1)] == 0.0
    coh = gs.apply_gate(gs.vacuum(1), "D", (1.0, 0.0), (0,))
    assert gs.outcome_probabilities(coh, gs.DetectorModel())[(1,)] == pytest.approx(0.6321206, abs=1e-7)
    dark = gs.outcome_probabilities(gs.vacuum(2), gs.DetectorModel(1.0, 1e-3))
    assert dark[(0, 0)] == pytest.approx(0.998001, abs=1e-12)


def test_fock_closed_forms():
    state = apply_gate_fock(fock_vacuum(2, 40), "TMS", (0.5, 0.0), (0, 1))
    probs = np.abs(state.amplitudes) ** 2
    n = np.arange(6)
    want = np.tanh(0.5) ** (2 * n) / np.cosh(0.5) ** 2
    assert np.allclose(np.diag(probs)[:6], want, atol=1e-10)
    out, _ = oracle_outcome_probabilities(state, gs.DetectorModel(), modes=[1])
    assert out[(0,)] == pytest.approx(0.7864477, abs=1e-7)
    coh = apply_gate_fock(fock_vacuum(1, 40), "D", (1.0, 0.0), (0,))
    out, _ = oracle_outcome_probabilities(coh, gs.DetectorModel(0.5))
    assert out[(0,)] == pytest.approx(0.6065307, abs=1e-7)
    assert np.allclose(apply_gate_fock(coh, "S", (0.0, 0.3), (0,)).amplitudes, coh.amplitudes)


def behavior_with_correlators(E00, E01, E10, E11):
    E = [[E00, E01, 1.0], [E10, E11, 0.0]]
    p = np.zeros((2, 2, 2, 3))
    for x in range(2):
        for y in range(3):
            same = (1 + E[x][y]) / 4
            p[0, 0, x, y] = p[1, 1, x, y] = same
            p[0, 1, x, y] = p[1, 0, x, y] = 0.5 - same
    return mx.BehaviorTable(p)


def test_chsh_examples():
    assert mx.chsh_score(behavior_with_correlators(1, 1, 1, 1)) == pytest.approx(2.0)
    s = 1 / np.sqrt(2)
    assert mx.chsh_score(behavior_with_correlators(s, s, s, -s)) == pytest.approx(2.8284271, abs=1e-7)


def test_algebraic_maximum_is_rejected_as_unphysical():
    with pytest.raises(mx.InvalidBehaviorError):
        mx.key_rate(behavior_with_correlators(1, 1, 1, -1))
    assert mx.chsh_score(behavior_with_correlators(1, 1, 1, -1)) == pytest.approx(4.0)


def test_eve_information_examples():
    for p in (0.0, 0.2, 0.5):
        assert mx.eve_information(2 * np.sqrt(2), p) == pytest.approx(0.0, abs=1e-12)
    assert mx.eve_information(2 + 1e-12, 0.0) == pytest.approx(1.0, abs=1e-5)
    assert mx.eve_information(2.5, 0.0) == pytest.approx(0.5435644, abs=1e-7)
    with pytest.raises(ValueError):
        mx.eve_information(2.0)


def test_conditional_entropy_examples():
    correlated = np.array([[0.5, 0.0], [0.0, 0.5]])
    assert mx.conditional_entropy(correlated, 0.0) == pytest.approx(0.0, abs=1e-12)
    assert mx.conditional_entropy(np.full((2, 2), 0.25), 0.3) == pytest.approx(1.0)
    assert mx.conditional_entropy(correlated, 0.1) == pytest.approx(0.4689956, abs=1e-7)
    with pytest.raises(mx.InvalidBehaviorError):
        mx.conditional_entropy(np.array([[0.6, -0.1], [0.0, 0.5]]))


def test_local_behavior_has_no_key():
    empty = cm.empty_circuit(2)
    b = cm.evaluate(empty, gs.DetectorModel(), np.zeros(empty.n_params))
    assert np.allclose(b.p[0, 0], 1.0)
    assert mx.key_rate(behavior_with_correlators(0, 0, 0, 0)).extended_rate <= 0.0


def test_preset_shapes():
    fig2, fig3, ref = (cm.preset(n) for n in ("discovered_fig2", "robust_fig3", "reference_fig1"))
    assert fig2.n_modes == 3 and fig2.heralding == ((2, "click"),)
    assert fig3.n_modes == 2 and fig3.heralding == ()
    assert ref.m_signal == 4 and len(ref.binning["bob"]) == 4


def test_simplify_examples():
    c = cm.empty_circuit(2).with_gate("prep", cm.Gate("BS", (0, 1)))
    assert cm.simplify(c).preparation == ()
    c = cm.empty_circuit(2)
    c = c.with_gate("prep", cm.Gate("TMS", (0, 1))).with_gate("prep", cm.Gate("TMS", (0, 1)))
    assert len(cm.simplify(c).preparation) == 1
