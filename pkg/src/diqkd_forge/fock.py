"""Truncated Fock-space simulator used as an independent check of the Gaussian code.

Gates are applied as ``exp(G)`` of their generators built from truncated
ladder operators.  The generator lives on a slightly larger (padded) space
and the result is projected back onto the cutoff, so amplitude pushed past
the cutoff shows up as a loss of norm, which is checked after every gate.

Heralding is deferred: the herald modes stay in the pure state and their
POVM elements enter the final outcome probabilities.  This is exact because
later gates never touch a herald mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm
from scipy.sparse import csr_matrix, diags, identity, kron

from .gaussian import DetectorModel, GateKind, N_PARAMS, TWO_MODE_GATES

NORM_LOSS_TOL = 1e-8
PAD = 6


class TruncationError(RuntimeError):
    """The photon-number cutoff is too small for the requested gate."""


def default_cutoff(n_modes: int) -> int:
    return 40 if n_modes <= 2 else 25


@dataclass(frozen=True, eq=False)
class FockState:
    """Pure state with amplitude tensor of shape ``(cutoff + 1,) * n_modes``."""

    amplitudes: np.ndarray
    cutoff: int

    @property
    def n_modes(self) -> int:
        return self.amplitudes.ndim

    @property
    def norm(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2))

    def photon_distribution(self, mode: int) -> np.ndarray:
        probs = np.abs(self.amplitudes) ** 2
        axes = tuple(i for i in range(self.n_modes) if i != mode)
        return probs.sum(axis=axes)


def fock_vacuum(n_modes: int, cutoff: int | None = None) -> FockState:
    if n_modes < 1:
        raise ValueError("need at least one mode")
    cutoff = default_cutoff(n_modes) if cutoff is None else int(cutoff)
    if cutoff < 1:
        raise ValueError("cutoff must be at least 1")
    amps = np.zeros((cutoff + 1,) * n_modes, dtype=complex)
    amps[(0,) * n_modes] = 1.0
    return FockState(amps, cutoff)


def _lowering(dim: int):
    return diags(np.sqrt(np.arange(1, dim)), offsets=1, format="csr", dtype=complex)


def generator(kind, params, dim: int):
    """Anti-hermitian generator G with U = exp(G) on ``dim`` levels per mode."""
    kind = GateKind(kind)
    a = _lowering(dim)
    ad = a.getH()
    if kind is GateKind.DISPLACEMENT:
        alpha = complex(params[0], params[1])
        return alpha * ad - np.conj(alpha) * a
    if kind is GateKind.PHASE_SHIFTER:
        return -1j * params[0] * (ad @ a)
    if kind is GateKind.SQUEEZER:
        z = params[0] * np.exp(1j * params[1])
        return 0.5 * (np.conj(z) * (a @ a) - z * (ad @ ad))
    eye = identity(dim, dtype=complex, format="csr")
    ai, aj = kron(a, eye), kron(eye, a)
    if kind is GateKind.BEAMSPLITTER:
        return params[0] * (ai.getH() @ aj - ai @ aj.getH())
    if kind is GateKind.TWO_MODE_SQUEEZER:
        z = params[0] * np.exp(1j * params[1])
        return np.conj(z) * (ai @ aj) - z * (ai.getH() @ aj.getH())
    raise ValueError(f"unknown gate {kind!r}")


def _conserved_blocks(kind: GateKind, big: int):
    """Index groups of the padded basis that the generator never mixes.

    Beamsplitters conserve n_i + n_j and two-mode squeezers n_i - n_j, so the
    exponential factorizes into small dense blocks.
    """
    if kind not in TWO_MODE_GATES:
        return [np.arange(big)]
    ni, nj = np.divmod(np.arange(big * big), big)
    label = ni + nj if kind is GateKind.BEAMSPLITTER else ni - nj
    return [np.flatnonzero(label == v) for v in np.unique(label)]


def apply_gate_fock(state: FockState, kind, params, modes) -> FockState:
    kind = GateKind(kind)
    modes = tuple(int(m) for m in modes)
    params = tuple(float(p) for p in params)
    arity = 2 if kind in TWO_MODE_GATES else 1
    if len(modes) != arity or len(set(modes)) != arity:
        raise ValueError(f"{kind.value} needs {arity} distinct mode(s), got {modes}")
    if len(params) != N_PARAMS[kind]:
        raise ValueError(f"{kind.value} takes {N_PARAMS[kind]} parameters")
    n, dim = state.n_modes, state.cutoff + 1
    big = dim + PAD
    rest = [m for m in range(n) if m not in modes]
    moved = np.transpose(state.amplitudes, modes + tuple(rest))
    block = moved.reshape((dim,) * arity + (-1,))
    padded = np.zeros((big,) * arity + (block.shape[-1],), dtype=complex)
    padded[(slice(0, dim),) * arity] = block
    flat = padded.reshape(big**arity, -1)
    gen = csr_matrix(generator(kind, params, big))
    out = np.empty_like(flat)
    for idx in _conserved_blocks(kind, big):
        sub = gen[idx][:, idx].toarray()
        out[idx] = expm(sub) @ flat[idx]
    out = out.reshape((big,) * arity + (-1,))[(slice(0, dim),) * arity]
    out = out.reshape((dim,) * n)
    amps = np.transpose(out, np.argsort(modes + tuple(rest)))
    new = FockState(np.ascontiguousarray(amps), state.cutoff)
    loss = state.norm - new.norm
    if loss >= NORM_LOSS_TOL:
        raise TruncationError(f"{kind.value} on {modes} lost norm {loss:.2e} at cutoff {state.cutoff}")
    return new


def no_click_diagonal(cutoff: int, det: DetectorModel) -> np.ndarray:
    """Diagonal of the no-click POVM element (1 - p_dc) sum_n (1 - eta)^n |n><n|."""
    return (1.0 - det.dark_count) * (1.0 - det.efficiency) ** np.arange(cutoff + 1)


def oracle_outcome_probabilities(state: FockState, det: DetectorModel, modes=None, heralds=()):
    """Click-pattern distribution on ``modes``, conditioned on herald outcomes.

    ``heralds`` is a sequence of ``(mode, click)`` pairs on modes that are not
    measured.  Returns ``(probabilities keyed by bit tuples, herald probability)``.
    """
    herald_modes = [int(m) for m, _ in heralds]
    if modes is None:
        modes = [m for m in range(state.n_modes) if m not in herald_modes]
    modes = list(modes)
    nc = no_click_diagonal(state.cutoff, det)
    povm = {False: nc, True: 1.0 - nc}
    weight = np.abs(state.amplitudes) ** 2
    for m, click in heralds:
        shape = [1] * state.n_modes
        shape[m] = -1
        weight = weight * povm[bool(click)].reshape(shape)
    p_herald = float(weight.sum())
    keep = tuple(i for i in range(state.n_modes) if i not in modes)
    marg = weight.sum(axis=keep) if keep else weight
    # marg axes follow the sorted order of ``modes``
    order = sorted(modes)
    marg = np.transpose(marg, [order.index(m) for m in modes])
    out = {}
    for bits in np.ndindex(*(2,) * len(modes)):
        val = marg
        for b in bits:
            val = np.tensordot(povm[bool(b)], val, axes=([0], [0]))
        out[bits] = float(val) / p_herald
    return out, p_herald


def run_oracle_circuit(n_modes: int, gates, det: DetectorModel, heralds=(), cutoffs=None):
    """Simulate ``gates`` (kind, params, modes) on vacuum, then measure all non-herald modes.

    Heralds are ``(mode, click)`` pairs; gates touching a herald mode must
    precede its measurement, which holds automatically for deferred heralds
    as long as the caller lists preparation gates only.  The cutoff is raised
    through ``cutoffs`` until no gate leaks norm.
    """
    if cutoffs is None:
        first = default_cutoff(n_modes)
        cutoffs = (first, first + 15, first + 30)
    last = None
    for cutoff in cutoffs:
        try:
            state = fock_vacuum(n_modes, cutoff)
            for kind, params, modes in gates:
                state = apply_gate_fock(state, kind, params, modes)
        except TruncationError as exc:
            last = exc
            continue
        return oracle_outcome_probabilities(state, det, heralds=heralds)
    raise last
