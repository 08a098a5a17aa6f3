import numpy as np
import pytest

from diqkd_forge import circuit as cm
from diqkd_forge import gaussian as gs
from diqkd_forge import golden
from diqkd_forge import optimize as opt

FAST = opt.OptimizationSettings(max_iterations=300, restarts=2)


def test_nelder_mead_quadratic():
    res = opt.nelder_mead(lambda x: -(x[0] - 3.0) ** 2, [0.25])
    assert res.converged
    assert res.x[0] == pytest.approx(3.0, abs=1e-4)
    assert res.fun == pytest.approx(0.0, abs=1e-9)


def test_nelder_mead_rosenbrock():
    def rosen(x):
        return (1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2

    settings = opt.OptimizationSettings(ftol=1e-14, iterations_per_dim=2000)
    res = opt.nelder_mead(rosen, [-1.2, 1.0], settings, maximize=False)
    assert np.allclose(res.x, [1.0, 1.0], atol=1e-3)


def test_nelder_mead_flat_dummy():
    res = opt.nelder_mead(lambda x: -1.0, [0.5, 0.5])
    assert res.fun == -1.0
    assert np.allclose(res.x, [0.5, 0.5])


def test_nelder_mead_nan_becomes_dummy():
    res = opt.nelder_mead(lambda x: np.nan if x[0] > 1 else -(x[0] - 0.8) ** 2, [0.25])
    assert np.isfinite(res.fun)
    assert res.x[0] == pytest.approx(0.8, abs=1e-4)


def test_settings_validation():
    with pytest.raises(ValueError):
        opt.OptimizationSettings(contraction=1.5)
    with pytest.raises(ValueError):
        opt.OptimizationSettings(flip="eve")
    assert opt.OptimizationSettings(max_iterations=10).iteration_cap(5) == 10


def test_loss_step_rule():
    assert opt.loss_step(0.46) == pytest.approx(0.02)
    assert opt.loss_step(0.05) == pytest.approx(0.002)
    assert opt.loss_step(3e-4) == pytest.approx(1e-3)
    assert opt.loss_step(0.0) == pytest.approx(1e-3)


def test_optimizer_is_deterministic():
    c = cm.preset("robust_fig3")
    det = gs.DetectorModel(1.0)
    a = opt.optimize_circuit(c, det, settings=FAST, rng=5)
    b = opt.optimize_circuit(c, det, settings=FAST, rng=5)
    assert np.array_equal(a.phi, b.phi)
    assert a.objective == b.objective


def test_result_recheck_and_report():
    c = cm.preset("robust_fig3")
    res = opt.optimize_circuit(c, gs.DetectorModel(0.95), settings=FAST, rng=1)
    assert res.recheck()
    assert res.report().extended_rate == pytest.approx(res.objective, abs=1e-12)
    assert 0.0 <= res.report().noise_p <= 0.5


def test_warm_start_keeps_golden_optimum():
    c = cm.preset("robust_fig3")
    row = golden.load_table("robust")[0]
    settings = opt.OptimizationSettings(max_iterations=400, flip="bob")
    res = opt.optimize_circuit(c, gs.DetectorModel(1.0), warm=row.phi, settings=settings, rng=0)
    assert res.objective >= row.key_rate - 1e-9


def test_empty_circuit_has_no_key():
    c = cm.empty_circuit(2)
    res = opt.optimize_circuit(c, gs.DetectorModel(1.0), settings=FAST, rng=0)
    assert res.objective <= 0.0


def test_herald_impossible_scores_dummy():
    c = cm.empty_circuit(3)
    objective = opt.KeyRateObjective(c, gs.DetectorModel(1.0))
    assert objective(np.zeros(c.n_params + 1)) == -1.0


def test_transfer_parameters_marks_new_slots():
    old = cm.preset("robust_fig3")
    new = old.with_gate("bob:1", cm.Gate("S", (1,)))
    phi = np.arange(old.n_params + 1, dtype=float)
    out, fresh = opt.transfer_parameters(old, new, phi)
    assert out.size == new.n_params + 1
    assert fresh.sum() == 2
    assert np.array_equal(out[~fresh], phi)


def test_binning_candidates():
    assert len(opt.binning_candidates(1)) == 1
    cands = opt.binning_candidates(2)
    assert len(cands) == 16
    assert len({(c["alice"], c["bob"]) for c in cands}) == 16


def test_sweep_above_every_rate_is_empty():
    c = cm.preset("robust_fig3")
    sched = opt.efficiency_sweep(c, threshold=2.0, settings=FAST, rng=0)
    assert sched.rows == []
    assert sched.eta_min is None
    assert "below" in sched.diagnostic


def test_short_sweep_is_monotone_and_serializes():
    c = cm.preset("robust_fig3")
    start = golden.load_table("robust")[0].phi
    sched = opt.efficiency_sweep(c, threshold=0.3, settings=FAST, rng=0, start=start)
    losses = [r.loss for r in sched.rows]
    assert len(losses) >= 2
    assert np.all(np.diff(losses) > 0)
    assert np.all(np.diff(sched.envelope()) <= 0)
    assert all(r.rate >= 0.3 for r in sched.rows)
    lines = sched.to_csv().splitlines()
    assert lines[0].startswith("loss,efficiency,key_rate,noise_p,param_1")
    assert len(lines) == len(sched.rows) + 1
    assert sched.rate_at(losses[0]) == pytest.approx(sched.rows[0].rate)


def test_sweep_step_budget():
    c = cm.preset("robust_fig3")
    start = golden.load_table("robust")[0].phi
    sched = opt.efficiency_sweep(c, threshold=1e-4, settings=FAST, rng=0, start=start, max_steps=1)
    assert sched.budget_exhausted
    assert len(sched.rows) == 2
