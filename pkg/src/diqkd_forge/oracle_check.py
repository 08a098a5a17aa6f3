"""Randomized agreement check between the Gaussian engine and the Fock simulator."""

from __future__ import annotations

import time

import numpy as np

from . import gaussian as gs
from .fock import TruncationError, run_oracle_circuit

KINDS_1 = ("D", "PS", "S")
KINDS_2 = ("D", "PS", "S", "TMS", "BS")


def random_gate(rng: np.random.Generator, n_modes: int, modes=None, max_r: float = 1.0,
                max_alpha: float = 1.0):
    """(kind, params, modes) with |r| <= max_r and |alpha| <= max_alpha."""
    pool = list(range(n_modes)) if modes is None else list(modes)
    kind = str(rng.choice(KINDS_2 if len(pool) > 1 else KINDS_1))
    if kind in ("TMS", "BS"):
        target = tuple(int(m) for m in rng.choice(pool, 2, replace=False))
    else:
        target = (int(rng.choice(pool)),)
    angle = float(rng.uniform(-np.pi, np.pi))
    if kind == "D":
        a = max_alpha * np.sqrt(rng.uniform()) * np.exp(1j * rng.uniform(-np.pi, np.pi))
        params = (float(a.real), float(a.imag))
    elif kind in ("S", "TMS"):
        params = (float(rng.uniform(-max_r, max_r)), angle)
    else:
        params = (angle,)
    return kind, params, target


def random_case(rng: np.random.Generator, max_modes: int = 3, max_gates: int = 6):
    n = int(rng.integers(1, max_modes + 1))
    n_gates = int(rng.integers(1, max_gates + 1))
    herald = n >= 2 and bool(rng.integers(2))
    eta = float(rng.choice([1.0, 0.8]))
    if herald:
        # the first gate loads the herald mode so the click is not impossible
        partner = int(rng.integers(n - 1))
        pre = [("TMS", (float(rng.uniform(0.3, 1.0)), float(rng.uniform(-np.pi, np.pi))),
                (partner, n - 1))]
        n_pre = int(rng.integers(0, n_gates))
        pre += [random_gate(rng, n) for _ in range(n_pre)]
        post = [random_gate(rng, n, modes=range(n - 1)) for _ in range(n_gates - 1 - n_pre)]
    else:
        pre, post = [random_gate(rng, n) for _ in range(n_gates)], []
    return n, pre, post, herald, gs.DetectorModel(eta)


def gaussian_probabilities(n, pre, post, herald, det):
    state = gs.vacuum(n)
    for kind, params, modes in pre:
        state = gs.apply_gate(state, kind, params, modes)
    p_herald = 1.0
    if herald:
        state, p_herald = gs.condition_click(state, n - 1, det)
    for kind, params, modes in post:
        state = gs.apply_gate(state, kind, params, modes)
    return gs.outcome_probabilities(state, det), p_herald


def compare_case(n, pre, post, herald, det) -> dict:
    try:
        ours, p_ours = gaussian_probabilities(n, pre, post, herald, det)
    except gs.HeraldImpossibleError:
        return {"status": "herald-impossible"}
    heralds = [(n - 1, True)] if herald else []
    ref, p_ref = run_oracle_circuit(n, pre + post, det, heralds)
    diff = max(abs(ours[k] - ref[k]) for k in ours)
    return {"status": "ok", "diff": diff, "herald_diff": abs(p_ours - p_ref), "n_modes": n}


def run_checks(count: int = 200, seed: int = 0, max_modes: int = 3, max_gates: int = 6) -> dict:
    """Compare ``count`` random circuits; cases the oracle cannot truncate are redrawn."""
    rng = np.random.default_rng(seed)
    t0 = time.perf_counter()
    diffs, redrawn, impossible = [], 0, 0
    while len(diffs) < count:
        case = random_case(rng, max_modes, max_gates)
        try:
            res = compare_case(*case)
        except TruncationError:
            redrawn += 1
            continue
        if res["status"] != "ok":
            impossible += 1
            continue
        diffs.append(res["diff"])
    return {
        "count": len(diffs),
        "max_diff": float(max(diffs)) if diffs else 0.0,
        "mean_diff": float(np.mean(diffs)) if diffs else 0.0,
        "redrawn_truncation": redrawn,
        "redrawn_herald_impossible": impossible,
        "seconds": time.perf_counter() - t0,
    }
