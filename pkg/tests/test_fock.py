import math

import numpy as np
import pytest

from diqkd_forge import gaussian as gs
from diqkd_forge.fock import TruncationError, apply_gate_fock, fock_vacuum, run_oracle_circuit
from diqkd_forge.oracle_check import compare_case, random_case


def test_coherent_state_is_poissonian():
    state = apply_gate_fock(fock_vacuum(1, 30), "D", (0.8, 0.6), (0,))
    dist = state.photon_distribution(0)
    want = [math.exp(-1.0) / math.factorial(n) for n in range(10)]
    assert np.allclose(dist[:10], want, atol=1e-10)


def test_gates_preserve_norm():
    state = fock_vacuum(2, 40)
    for kind, params, modes in [("TMS", (0.4, 0.3), (0, 1)), ("BS", (0.7,), (0, 1)),
                                ("S", (0.3, -1.0), (1,)), ("PS", (2.0,), (0,))]:
        state = apply_gate_fock(state, kind, params, modes)
        assert abs(state.norm - 1.0) < 1e-10


def test_truncation_is_detected():
    with pytest.raises(TruncationError):
        apply_gate_fock(fock_vacuum(1, 5), "D", (2.0, 0.0), (0,))


def test_thermal_marginal_click_probability():
    r = 0.6
    det = gs.DetectorModel(0.8)
    probs, _ = run_oracle_circuit(2, [("TMS", (r, 0.0), (0, 1))], det)
    nbar = math.sinh(r) ** 2
    p_nc = 1.0 / (1.0 + 0.8 * nbar)
    assert probs[(0, 0)] + probs[(0, 1)] == pytest.approx(p_nc, abs=1e-10)


def test_random_circuits_agree_with_gaussian_engine():
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 15:
        try:
            res = compare_case(*random_case(rng))
        except TruncationError:
            continue
        if res["status"] != "ok":
            continue
        assert res["diff"] < 1e-6
        assert res["herald_diff"] < 1e-6
        checked += 1
