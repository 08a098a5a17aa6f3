"""Derivative-free parameter optimization and detector-efficiency sweeps.

The objective is the extended key rate of a circuit with its free slots bound
to ``phi[:-1]``; the last coordinate is the noisy-preprocessing flip
probability.  Points where the herald cannot fire or the simulation is
ill-conditioned score the dummy value.
"""

from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import circuit as cm
from . import gaussian as gs
from .metrics import InvalidBehaviorError, key_rate

log = logging.getLogger(__name__)

SAMPLING_BOXES = {
    "squeezing": (-1.5, 1.5),
    "angle": (-math.pi, math.pi),
    "displacement": (-1.5, 1.5),
    "noise": (0.0, 0.45),
}
RECHECK_TOL = 1e-12
MONOTONE_SLACK = 1e-6


@dataclass(frozen=True)
class OptimizationSettings:
    reflection: float = 1.0
    expansion: float = 2.0
    contraction: float = 0.5
    shrink: float = 0.5
    ftol: float = 1e-10
    iterations_per_dim: int = 500
    max_iterations: int | None = None
    initial_step: float = 0.1
    restarts: int = 8
    perturbation: float = 0.2
    dummy: float = -1.0
    flip: str = "alice"
    two_phase: bool = True
    jobs: int = 1

    def __post_init__(self):
        if not (self.reflection > 0 and self.expansion > max(1.0, self.reflection)):
            raise ValueError("need reflection > 0 and expansion > max(1, reflection)")
        if not (0 < self.contraction < 1 and 0 < self.shrink < 1):
            raise ValueError("contraction and shrink coefficients must lie in (0, 1)")
        if self.restarts < 1 or self.iterations_per_dim < 1:
            raise ValueError("restarts and iterations_per_dim must be positive")
        if self.flip not in ("alice", "bob"):
            raise ValueError(f"flip must be 'alice' or 'bob', got {self.flip!r}")

    def iteration_cap(self, dim: int) -> int:
        cap = self.iterations_per_dim * max(dim, 1)
        return cap if self.max_iterations is None else min(cap, self.max_iterations)


@dataclass
class NelderMeadResult:
    x: np.ndarray
    fun: float
    iterations: int
    evaluations: int
    converged: bool


def nelder_mead(objective: Callable, x0, settings: OptimizationSettings | None = None,
                maximize: bool = True) -> NelderMeadResult:
    """Simplex search; maximizes ``objective`` unless ``maximize`` is False.

    NaN from the objective is replaced by the dummy value.  ``fun`` is
    reported in the caller's sign convention.
    """
    s = settings or OptimizationSettings()
    x0 = np.asarray(x0, dtype=float).ravel()
    if not np.all(np.isfinite(x0)):
        raise ValueError("starting point must be finite")
    sign = -1.0 if maximize else 1.0
    evals = 0

    def f(x):
        nonlocal evals
        evals += 1
        val = float(objective(x))
        if math.isnan(val):
            log.warning("objective returned NaN at %s; using dummy value", x)
            val = s.dummy
        return sign * val

    n = x0.size
    simplex = np.empty((n + 1, n))
    simplex[0] = x0
    for i in range(n):
        vertex = x0.copy()
        vertex[i] += s.initial_step if vertex[i] == 0 else s.initial_step * max(abs(vertex[i]), 1.0)
        simplex[i + 1] = vertex
    values = np.array([f(v) for v in simplex])

    cap = s.iteration_cap(n)
    it = 0
    converged = False
    while it < cap:
        order = np.argsort(values, kind="stable")
        simplex, values = simplex[order], values[order]
        if values[-1] - values[0] < s.ftol:
            # a simplex straddling the optimum symmetrically has zero spread
            xm = simplex.mean(axis=0)
            fm = f(xm)
            if fm >= values[0] - s.ftol:
                converged = True
                break
            simplex[-1], values[-1] = xm, fm
            continue
        it += 1
        centroid = simplex[:-1].mean(axis=0)
        xr = centroid + s.reflection * (centroid - simplex[-1])
        fr = f(xr)
        if fr < values[0]:
            xe = centroid + s.expansion * (xr - centroid)
            fe = f(xe)
            if fe < fr:
                simplex[-1], values[-1] = xe, fe
            else:
                simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-2]:
            simplex[-1], values[-1] = xr, fr
            continue
        if fr < values[-1]:
            xc = centroid + s.contraction * (xr - centroid)
            fc = f(xc)
            if fc <= fr:
                simplex[-1], values[-1] = xc, fc
                continue
        else:
            xc = centroid + s.contraction * (simplex[-1] - centroid)
            fc = f(xc)
            if fc < values[-1]:
                simplex[-1], values[-1] = xc, fc
                continue
        simplex[1:] = simplex[0] + s.shrink * (simplex[1:] - simplex[0])
        values[1:] = [f(v) for v in simplex[1:]]

    best = int(np.argmin(values))
    return NelderMeadResult(simplex[best].copy(), sign * float(values[best]), it, evals, converged)


# -- circuit objective ------------------------------------------------------


class KeyRateObjective:
    """phi -> extended key rate; phi[-1] is the flip probability."""

    def __init__(self, circuit: cm.CircuitSpec, det: gs.DetectorModel, dummy: float = -1.0,
                 flip: str = "bob"):
        self.circuit = circuit
        self.det = det
        self.dummy = dummy
        self.flip = flip

    def report(self, phi):
        phi = np.asarray(phi, dtype=float)
        return key_rate(cm.evaluate(self.circuit, self.det, phi[:-1]), phi[-1], flip=self.flip)

    def __call__(self, phi) -> float:
        try:
            return self.report(phi).extended_rate
        except (gs.SimulationError, InvalidBehaviorError, np.linalg.LinAlgError):
            return self.dummy


@dataclass
class OptimizedCircuit:
    circuit: cm.CircuitSpec
    phi: np.ndarray
    objective: float
    efficiency: float
    dark_count: float = 0.0
    trace: list = field(default_factory=list)
    flip: str = "bob"

    @property
    def noise_p(self) -> float:
        return float(self.phi[-1])

    def detector(self) -> gs.DetectorModel:
        return gs.DetectorModel(self.efficiency, self.dark_count)

    def report(self):
        return KeyRateObjective(self.circuit, self.detector(), flip=self.flip).report(self.phi)

    def recheck(self, tol: float = RECHECK_TOL) -> bool:
        """Re-evaluate the stored optimum and compare with the stored objective."""
        value = KeyRateObjective(self.circuit, self.detector(), flip=self.flip)(self.phi)
        return abs(value - self.objective) <= tol * max(1.0, abs(self.objective))


def random_start(circuit: cm.CircuitSpec, rng: np.random.Generator) -> np.ndarray:
    kinds = circuit.slot_kinds() + ["noise"]
    return np.array([rng.uniform(*SAMPLING_BOXES[k]) for k in kinds])


def transfer_parameters(old: cm.CircuitSpec, new: cm.CircuitSpec, phi):
    """Carry an optimum of ``old`` over to ``new``; slots of added gates start at 0.

    Gates are matched greedily, location by location, in order.  Returns the
    new coordinate vector and a mask of the added slots.
    """
    phi = np.asarray(phi, dtype=float)
    old_seq, new_seq = old.gate_sequence(), new.gate_sequence()
    old_slots = {}
    pos = 0
    for i, (loc, gate) in enumerate(old_seq):
        old_slots[i] = phi[pos:pos + gate.n_free]
        pos += gate.n_free
    out, fresh = [], []
    cursor = {}
    for loc, gate in new_seq:
        candidates = [i for i, (l, _) in enumerate(old_seq) if l == loc and i >= cursor.get(loc, 0)]
        match = next((i for i in candidates if old_seq[i][1] == gate), None)
        if match is not None:
            out.extend(old_slots[match])
            fresh.extend([False] * gate.n_free)
            cursor[loc] = match + 1
        else:
            out.extend([0.0] * gate.n_free)
            fresh.extend([True] * gate.n_free)
    out.append(phi[-1])
    fresh.append(False)
    return np.asarray(out), np.asarray(fresh)


class _FixedNoise:
    def __init__(self, objective, p):
        self.objective, self.p = objective, p

    def __call__(self, x):
        return self.objective(np.append(x, self.p))


def _run_start(args):
    objective, x0, settings, fresh_start = args
    if not (fresh_start and settings.two_phase) or x0.size < 2:
        return nelder_mead(objective, x0, settings)
    # with p free from the outset most random starts drift to the flat p = 1/2 plateau
    first = nelder_mead(_FixedNoise(objective, x0[-1]), x0[:-1], settings)
    second = nelder_mead(objective, np.append(first.x, x0[-1]), settings)
    second.iterations += first.iterations
    second.evaluations += first.evaluations
    return second


def _starts(circuit, rng, settings, warm, fresh):
    dim = circuit.n_params + 1
    if warm is None:
        return [(random_start(circuit, rng), True) for _ in range(settings.restarts)]
    warm = np.asarray(warm, dtype=float)
    if warm.shape != (dim,):
        raise ValueError(f"warm start needs {dim} coordinates, got {warm.size}")
    fresh = np.zeros(dim, dtype=bool) if fresh is None else np.asarray(fresh, dtype=bool)
    u = rng.uniform(0.0, 1.0, dim)
    perturbed = np.where(fresh, 0.0, warm + settings.perturbation * u)
    return [(warm.copy(), False), (random_start(circuit, rng), True), (perturbed, False)]


def optimize_circuit(circuit: cm.CircuitSpec, det: gs.DetectorModel, warm=None,
                     settings: OptimizationSettings | None = None, rng=None,
                     fresh=None) -> OptimizedCircuit:
    """Maximize the extended key rate over free slots and the flip probability.

    Without ``warm`` the search runs ``settings.restarts`` simplex searches
    from random starts.  With ``warm`` (a full coordinate vector) it uses the
    warm point, one random start and a perturbed copy in which the slots
    flagged by ``fresh`` stay at 0.
    """
    settings = settings or OptimizationSettings()
    rng = np.random.default_rng(rng)
    objective = KeyRateObjective(circuit, det, settings.dummy, settings.flip)
    starts = _starts(circuit, rng, settings, warm, fresh)
    jobs = [(objective, x0, settings, is_random) for x0, is_random in starts]
    if settings.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=settings.jobs) as pool:
            results = list(pool.map(_run_start, jobs))
    else:
        results = [_run_start(j) for j in jobs]
    trace = [
        {"start": k, "objective": r.fun, "iterations": r.iterations,
         "evaluations": r.evaluations, "converged": r.converged}
        for k, r in enumerate(results)
    ]
    # ties go to the earliest start so the merge does not depend on scheduling
    best = max(range(len(results)), key=lambda k: (results[k].fun, -k))
    phi = results[best].x.copy()
    value = objective(phi)
    if value <= settings.dummy:
        log.info("all starts hit the dummy objective for %s", circuit.name or "circuit")
    return OptimizedCircuit(circuit, phi, value, det.efficiency, det.dark_count, trace, settings.flip)


# -- binning search ---------------------------------------------------------


def binning_candidates(party_size: int) -> list[dict]:
    """All ways of assigning the all-off and all-on patterns of each party a bit."""
    base = cm.default_binning(party_size)
    if party_size == 1:
        return [base]
    ends = (0, 2**party_size - 1)
    out = []
    for a_bits, b_bits in itertools.product(itertools.product((0, 1), repeat=2), repeat=2):
        table = {}
        for party, bits in (("alice", a_bits), ("bob", b_bits)):
            row = list(base[party])
            for idx, bit in zip(ends, bits):
                row[idx] = bit
            table[party] = tuple(row)
        out.append(table)
    return out


def optimize_binning(circuit: cm.CircuitSpec, det: gs.DetectorModel,
                     settings: OptimizationSettings | None = None, rng=None,
                     screen_restarts: int = 2) -> OptimizedCircuit:
    """Screen every binning with a few starts, then fully optimize the best one."""
    settings = settings or OptimizationSettings()
    rng = np.random.default_rng(rng)
    screen = replace(settings, restarts=screen_restarts)
    scored = []
    for k, table in enumerate(binning_candidates(circuit.party_size)):
        cand = replace(circuit, binning=table)
        res = optimize_circuit(cand, det, settings=screen, rng=rng)
        scored.append((res.objective, -k, res))
        log.debug("binning %s -> %.6g", table, res.objective)
    _, _, best = max(scored, key=lambda t: (t[0], t[1]))
    full = optimize_circuit(best.circuit, det, settings=settings, rng=rng)
    return full if full.objective >= best.objective else best


# -- efficiency sweep -------------------------------------------------------


def loss_step(rate: float, floor: float = 1e-3) -> float:
    """Step in loss: two units of the decade below the current rate, at least ``floor``."""
    if not rate > 0:
        return floor
    return max(2.0 * 10.0 ** (math.floor(math.log10(rate)) - 1), floor)


@dataclass
class SweepRow:
    loss: float
    rate: float
    noise_p: float
    phi: np.ndarray

    @property
    def efficiency(self) -> float:
        return 1.0 - self.loss


@dataclass
class SweepSchedule:
    threshold: float
    rows: list = field(default_factory=list)
    diagnostic: str = ""
    budget_exhausted: bool = False

    @property
    def eta_min(self) -> float | None:
        return self.rows[-1].efficiency if self.rows else None

    def envelope(self) -> np.ndarray:
        rates = np.array([r.rate for r in self.rows])
        return np.minimum.accumulate(rates) if rates.size else rates

    def rate_at(self, loss: float) -> float:
        """Log-linear interpolation of the rate curve; nan outside the swept range."""
        losses = np.array([r.loss for r in self.rows])
        rates = np.array([r.rate for r in self.rows])
        if rates.size == 0 or loss < losses[0] or loss > losses[-1]:
            return float("nan")
        return float(np.exp(np.interp(loss, losses, np.log(np.maximum(rates, 1e-300)))))

    def to_csv(self) -> str:
        k = len(self.rows[0].phi) - 1 if self.rows else 0
        header = ["loss", "efficiency", "key_rate", "noise_p"] + [f"param_{i + 1}" for i in range(k)]
        lines = [",".join(header)]
        for r in self.rows:
            vals = [r.loss, r.efficiency, r.rate, r.noise_p] + list(r.phi[:-1])
            lines.append(",".join(f"{v:.17g}" for v in vals))
        return "\n".join(lines) + "\n"


def efficiency_sweep(circuit: cm.CircuitSpec, threshold: float = 1e-4, dark_count: float = 0.0,
                     settings: OptimizationSettings | None = None, rng=None, start=None,
                     max_loss: float = 0.999, step_floor: float = 1e-3,
                     start_result: OptimizedCircuit | None = None,
                     max_steps: int | None = None) -> SweepSchedule:
    """Lower the efficiency step by step, re-optimizing from the previous optimum.

    ``start`` warm-starts the unit-efficiency optimization; ``start_result``
    skips it altogether.  Only rows at or above ``threshold`` are kept.
    ``max_steps`` bounds the number of re-optimizations.
    """
    settings = settings or OptimizationSettings()
    rng = np.random.default_rng(rng)
    if start_result is None:
        det = gs.DetectorModel(1.0, dark_count)
        start_result = optimize_circuit(circuit, det, warm=start, settings=settings, rng=rng)
    schedule = SweepSchedule(threshold)
    first = start_result.report()
    loss = 1.0 - start_result.efficiency
    if first.rate < threshold:
        schedule.diagnostic = f"rate {first.rate:.6g} at efficiency {start_result.efficiency} is below {threshold}"
        return schedule
    schedule.rows.append(SweepRow(loss, first.rate, first.noise_p, start_result.phi.copy()))
    phi, rate = start_result.phi, first.rate
    while True:
        if max_steps is not None and len(schedule.rows) > max_steps:
            schedule.diagnostic = f"stopped after {max_steps} steps"
            schedule.budget_exhausted = True
            break
        loss = round(loss + loss_step(rate, step_floor), 12)
        if loss > max_loss:
            schedule.diagnostic = "reached the maximum loss"
            break
        det = gs.DetectorModel(1.0 - loss, dark_count)
        res = optimize_circuit(circuit, det, warm=phi, settings=settings, rng=rng)
        rep = res.report()
        log.info("loss %.4f rate %.6g", loss, rep.rate)
        if rep.rate < threshold:
            schedule.diagnostic = f"rate fell below {threshold} at loss {loss:.6g}"
            break
        if rep.rate > rate + MONOTONE_SLACK:
            log.warning("rate rose from %.6g to %.6g at loss %.6g", rate, rep.rate, loss)
        schedule.rows.append(SweepRow(loss, rep.rate, rep.noise_p, res.phi.copy()))
        phi, rate = res.phi, rep.rate
    return schedule
