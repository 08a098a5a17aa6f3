"""Gaussian states, symplectic gates and NPNR-detector conditioning.

States use the quadrature ordering ``(x1, p1, ..., xn, pn)`` with
``x = (a + a^dag)/2``, so the vacuum has ``mu = 0`` and ``sigma = I/4``.

Covariances are stored as the *excess* over the vacuum, ``X = sigma - I/4``,
and each gate adds its noise ``(M M^T - I)/4`` in closed form.  For a set of
no-click filters ``l`` this gives

    <o_l> = exp(-1/2 y^T (I + D X_ll D)^-1 y) / sqrt(det(I + D X_ll D)),
    D = diag(sqrt(2 eta_i)),  y = D mu_l,

identical to the ``(sigma^-1 + O_l)`` expression but free of the
inverse of the full covariance and accurate for states close to vacuum.

Heralded states are quasi-mixtures.  Heralding is applied lazily: the herald
modes stay in the underlying Gaussian "parent" and each click outcome is
resolved as ``<f> - <f R_h> = <f> (-expm1(log p_nc))`` with ``log p_nc``
taken from the filtered herald marginal.  This keeps full relative precision
for heralding probabilities ~1e-9 where the two Gaussian branches agree to
all printed digits.  ``QuasiMixture.branches`` expands the explicit signed
branch list when it is needed.
"""

from __future__ import annotations

import enum
import functools
import itertools
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np

COND_LIMIT = 1e12
CLAMP_SLACK = 1e-9
HERALD_FLOOR = 1e-12


class SimulationError(Exception):
    """Base class for simulator failures."""


class NumericalInstabilityError(SimulationError):
    pass


class HeraldImpossibleError(SimulationError):
    """The requested heralding outcome has (numerically) zero probability."""


class GateKind(str, enum.Enum):
    DISPLACEMENT = "D"
    PHASE_SHIFTER = "PS"
    SQUEEZER = "S"
    TWO_MODE_SQUEEZER = "TMS"
    BEAMSPLITTER = "BS"


TWO_MODE_GATES = (GateKind.BEAMSPLITTER, GateKind.TWO_MODE_SQUEEZER)
N_PARAMS = {
    GateKind.DISPLACEMENT: 2,
    GateKind.PHASE_SHIFTER: 1,
    GateKind.SQUEEZER: 2,
    GateKind.TWO_MODE_SQUEEZER: 2,
    GateKind.BEAMSPLITTER: 1,
}


def symplectic_form(n: int) -> np.ndarray:
    return np.kron(np.eye(n), np.array([[0.0, 1.0], [-1.0, 0.0]]))


@dataclass(frozen=True)
class DetectorModel:
    """Non-photon-number-resolving detector with efficiency and dark counts."""

    efficiency: float = 1.0
    dark_count: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must lie in [0, 1], got {self.efficiency}")
        if not 0.0 <= self.dark_count <= 1.0:
            raise ValueError(f"dark_count must lie in [0, 1], got {self.dark_count}")

    @property
    def log_survival(self) -> float:
        """log(1 - p_dc), carried by every no-click POVM element."""
        if self.dark_count >= 1.0:
            return -np.inf
        return float(np.log1p(-self.dark_count))


@dataclass(frozen=True, eq=False)
class GaussianState:
    mu: np.ndarray
    excess: np.ndarray

    @classmethod
    def from_sigma(cls, mu, sigma) -> "GaussianState":
        sigma = np.asarray(sigma, dtype=float)
        return cls(np.asarray(mu, dtype=float), sigma - 0.25 * np.eye(sigma.shape[0]))

    @property
    def sigma(self) -> np.ndarray:
        return self.excess + 0.25 * np.eye(self.excess.shape[0])

    @property
    def n_modes(self) -> int:
        return self.mu.shape[0] // 2

    def is_physical(self, tol: float = 1e-9) -> bool:
        herm = self.sigma + 0.25j * symplectic_form(self.n_modes)
        return bool(np.linalg.eigvalsh(herm).min() >= -tol)


# --------------------------------------------------------------------------
# gates


@dataclass(frozen=True, eq=False)
class SymplecticOp:
    """Affine quadrature map ``mu -> M mu + d``, ``sigma -> M sigma M^T``.

    ``noise = (M M^T - I)/4`` so that the excess maps as ``X -> M X M^T + noise``.
    """

    d: np.ndarray
    M: np.ndarray
    noise: np.ndarray
    kind: GateKind
    target_modes: tuple[int, ...]
    params: tuple[float, ...] = field(default=())

    @property
    def n_total(self) -> int:
        return self.d.shape[0] // 2


def _reflection(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, s], [s, -c]])


def gate_blocks(kind: GateKind, params: Sequence[float]):
    """(d, M, noise) restricted to the target-mode block of a gate."""
    if kind is GateKind.DISPLACEMENT:
        re, im = params
        return np.array([re, im], dtype=float), np.eye(2), np.zeros((2, 2))
    if kind is GateKind.PHASE_SHIFTER:
        (theta,) = params
        c, s = np.cos(theta), np.sin(theta)
        return np.zeros(2), np.array([[c, s], [-s, c]]), np.zeros((2, 2))
    if kind is GateKind.SQUEEZER:
        r, theta = params
        refl = _reflection(theta)
        M = np.cosh(r) * np.eye(2) - np.sinh(r) * refl
        noise = 0.25 * (2 * np.sinh(r) ** 2 * np.eye(2) - np.sinh(2 * r) * refl)
        return np.zeros(2), M, noise
    if kind is GateKind.BEAMSPLITTER:
        (theta,) = params
        c, s = np.cos(theta), np.sin(theta)
        M = np.array([[c, 0, s, 0], [0, c, 0, s], [-s, 0, c, 0], [0, -s, 0, c]], dtype=float)
        return np.zeros(4), M, np.zeros((4, 4))
    if kind is GateKind.TWO_MODE_SQUEEZER:
        r, theta = params
        refl = _reflection(theta)
        K = np.block([[np.zeros((2, 2)), refl], [refl, np.zeros((2, 2))]])
        M = np.cosh(r) * np.eye(4) - np.sinh(r) * K
        noise = 0.25 * (2 * np.sinh(r) ** 2 * np.eye(4) - np.sinh(2 * r) * K)
        return np.zeros(4), M, noise
    raise ValueError(f"unknown gate kind {kind!r}")


def quad_index(modes: Sequence[int]) -> np.ndarray:
    return np.array([q for m in modes for q in (2 * m, 2 * m + 1)], dtype=int)


def check_gate(kind: GateKind, modes: tuple[int, ...], params: tuple[float, ...], n_total: int):
    if any(m < 0 or m >= n_total for m in modes):
        raise ValueError(f"modes {modes} out of range for {n_total} modes")
    arity = 2 if kind in TWO_MODE_GATES else 1
    if len(modes) != arity:
        raise ValueError(f"{kind.value} acts on {arity} mode(s), got {modes}")
    if arity == 2 and modes[0] == modes[1]:
        raise ValueError(f"{kind.value} needs two distinct modes, got {modes}")
    if len(params) != N_PARAMS[kind]:
        raise ValueError(f"{kind.value} takes {N_PARAMS[kind]} parameter(s), got {len(params)}")
    if not all(np.isfinite(params)):
        raise ValueError(f"non-finite gate parameters {params}")


def gate_symplectic(kind, params, target_modes, n_total: int) -> SymplecticOp:
    """Embed a gate acting on 0-based ``target_modes`` into ``n_total`` modes.

    Parameters per kind: D (re, im), PS (theta,), S (r, theta), TMS (r, theta),
    BS (theta,).
    """
    kind = GateKind(kind)
    modes = tuple(int(m) for m in target_modes)
    params = tuple(float(p) for p in params)
    check_gate(kind, modes, params, n_total)
    d_blk, m_blk, noise_blk = gate_blocks(kind, params)
    idx = quad_index(modes)
    d = np.zeros(2 * n_total)
    M = np.eye(2 * n_total)
    noise = np.zeros((2 * n_total, 2 * n_total))
    d[idx] = d_blk
    M[np.ix_(idx, idx)] = m_blk
    noise[np.ix_(idx, idx)] = noise_blk
    return SymplecticOp(d=d, M=M, noise=noise, kind=kind, target_modes=modes, params=params)


def _symmetrize(mats: np.ndarray) -> np.ndarray:
    return 0.5 * (mats + np.swapaxes(mats, -1, -2))


def _transform(mus, excess, idx, d, block, noise, kind=None):
    mus = mus.copy()
    if kind is GateKind.DISPLACEMENT:
        # covariance untouched; arrays are never mutated in place, so share it
        mus[:, idx] += d
        return mus, excess
    excess = excess.copy()
    mus[:, idx] = mus[:, idx] @ block.T + d
    excess[:, idx, :] = block @ excess[:, idx, :]
    excess[:, :, idx] = excess[:, :, idx] @ block.T
    excess[:, idx[:, None], idx[None, :]] += noise
    return mus, _symmetrize(excess)


# --------------------------------------------------------------------------
# detection kernels on stacked Gaussian branches


def _spectral(X: np.ndarray):
    """Eigen-decomposition of the symmetric detection matrices ``I + X``.

    One ``eigh`` call provides the condition-number guard, the log-determinant
    (as ``sum log1p(w)``, accurate for small ``X``) and the solves.
    """
    w, V = np.linalg.eigh(X)
    one_plus = 1.0 + w
    if np.any(~np.isfinite(w)) or np.any(one_plus <= 0):
        raise NumericalInstabilityError("detection matrix is not positive definite")
    cond = one_plus.max(axis=-1) / one_plus.min(axis=-1)
    if np.any(cond > COND_LIMIT):
        raise NumericalInstabilityError(
            f"ill-conditioned detection matrix (condition number {np.max(cond):.3g})"
        )
    return w, V


def _scales(etas) -> np.ndarray:
    return np.repeat(np.sqrt(2.0 * np.asarray(etas, dtype=float)), 2)


def filter_log(mus, excess, modes: Sequence[int], etas: Sequence[float]) -> np.ndarray:
    """Per-branch log<o_l> for no-click filters (without dark counts) on ``modes``."""
    if len(modes) == 0:
        return np.zeros(mus.shape[0])
    idx = quad_index(modes)
    D = _scales(etas)
    X = excess[:, idx][:, :, idx] * D[:, None] * D[None, :]
    y = mus[:, idx] * D
    w, V = _spectral(X)
    proj = np.einsum("bij,bi->bj", V, y)
    return -0.5 * np.sum(proj**2 / (1.0 + w), axis=-1) - 0.5 * np.sum(np.log1p(w), axis=-1)


def _filter_condition(mus, excess, modes, etas, keep_idx):
    """Moments on ``keep_idx`` quadratures after the no-click filters on ``modes``.

    Schur complement form, exact for the (unnormalized) filtered Gaussian:
    X_kk - X_kF D (I + D X_FF D)^-1 D X_Fk and the matching mean shift.
    """
    if len(modes) == 0:
        return mus[:, keep_idx], excess[:, keep_idx][:, :, keep_idx]
    idx = quad_index(modes)
    D = _scales(etas)
    w, V = _spectral(excess[:, idx][:, :, idx] * D[:, None] * D[None, :])
    cross = excess[:, keep_idx][:, :, idx] * D[None, None, :]
    # cross (I + X)^-1 = (cross V) diag(1/(1+w)) V^T
    cv = cross @ V
    scaled = cv / (1.0 + w)[:, None, :]
    ex = excess[:, keep_idx][:, :, keep_idx] - scaled @ np.swapaxes(cv, 1, 2)
    ymu = np.einsum("bij,bi->bj", V, mus[:, idx] * D)
    mu = mus[:, keep_idx] - np.einsum("bkj,bj->bk", scaled, ymu)
    return mu, _symmetrize(ex)


@dataclass(frozen=True)
class _Meas:
    mode: int
    eta: float
    log_survival: float


def _log_g(mus, excess, filters: list[_Meas], clicks: list[_Meas]) -> np.ndarray:
    """Per-branch log of <prod_F (1-p_dc) R_F * prod_C (1 - (1-p_dc) R_C)>."""
    if not clicks:
        base = filter_log(mus, excess, [f.mode for f in filters], [f.eta for f in filters])
        return base + sum(f.log_survival for f in filters)
    *rest, c = clicks
    a = _log_g(mus, excess, filters, rest)
    if not rest:
        keep = quad_index([c.mode])
        mu_c, ex_c = _filter_condition(
            mus, excess, [f.mode for f in filters], [f.eta for f in filters], keep
        )
        delta = c.log_survival + filter_log(mu_c, ex_c, [0], [c.eta])
    else:
        delta = _log_g(mus, excess, filters + [c], rest) - a
    with np.errstate(divide="ignore", invalid="ignore"):
        tail = -np.expm1(delta)
        out = a + np.log(np.where(tail > 0, tail, 1.0))
    return np.where((tail > 0) & np.isfinite(a), out, -np.inf)


def _clamp_probability(p: float, what: str) -> float:
    if not np.isfinite(p) or p < -CLAMP_SLACK or p > 1 + CLAMP_SLACK:
        raise NumericalInstabilityError(f"{what} probability {p!r} outside [0, 1]")
    return min(max(p, 0.0), 1.0)


# --------------------------------------------------------------------------
# quasi-mixtures


@dataclass(frozen=True)
class Herald:
    mode: int  # index in the parent state
    click: bool
    detector: DetectorModel


@dataclass(frozen=True, eq=False)
class QuasiMixture:
    """Signed mixture ``sum_k w_k rho_k`` of Gaussian states.

    Stored lazily as a signed mixture of Gaussian *parents* (``mus`` and
    ``excess`` stacked over ``base_weights``) on ``visible`` plus herald
    modes; ``heralds`` lists the conditioning events in application order.
    ``log_norm`` is the log probability of the heralding events.
    """

    mus: np.ndarray
    excess: np.ndarray
    base_weights: np.ndarray
    visible: tuple[int, ...]
    heralds: tuple[Herald, ...] = ()
    log_norm: float = 0.0

    @classmethod
    def from_state(cls, state: GaussianState) -> "QuasiMixture":
        return cls.from_branches([(1.0, state)])

    @classmethod
    def from_branches(cls, branches: Sequence[tuple[float, GaussianState]]) -> "QuasiMixture":
        if not branches:
            raise ValueError("a mixture needs at least one branch")
        sizes = {s.n_modes for _, s in branches}
        if len(sizes) != 1:
            raise ValueError("all branches must share the same number of modes")
        weights = np.array([w for w, _ in branches], dtype=float)
        if abs(weights.sum() - 1.0) > 1e-10:
            raise ValueError(f"branch weights sum to {weights.sum()}, expected 1")
        return cls(
            mus=np.stack([np.asarray(s.mu, dtype=float) for _, s in branches]),
            excess=np.stack([np.asarray(s.excess, dtype=float) for _, s in branches]),
            base_weights=weights,
            visible=tuple(range(sizes.pop())),
        )

    @property
    def n_modes(self) -> int:
        return len(self.visible)

    @property
    def n_branches(self) -> int:
        clicks = sum(h.click for h in self.heralds)
        return self.base_weights.shape[0] * 2**clicks

    def _replace(self, **changes) -> "QuasiMixture":
        fields = dict(
            mus=self.mus, excess=self.excess, base_weights=self.base_weights,
            visible=self.visible, heralds=self.heralds, log_norm=self.log_norm,
        )
        fields.update(changes)
        return QuasiMixture(**fields)

    def _parent_modes(self, modes: Sequence[int]) -> list[int]:
        for m in modes:
            if not 0 <= m < self.n_modes:
                raise ValueError(f"mode {m} out of range for {self.n_modes} modes")
        return [self.visible[m] for m in modes]

    def _herald_sets(self):
        filters, clicks = [], []
        for h in self.heralds:
            meas = _Meas(h.mode, h.detector.efficiency, h.detector.log_survival)
            (clicks if h.click else filters).append(meas)
        return filters, clicks

    def log_expectation(self, modes: Sequence[int], det: DetectorModel) -> float:
        """log of the mixture value of the (dark-count scaled) no-click filters on ``modes``."""
        filters, clicks = self._herald_sets()
        extra = [_Meas(m, det.efficiency, det.log_survival) for m in self._parent_modes(modes)]
        logs = _log_g(self.mus, self.excess, filters + extra, clicks)
        return _log_weighted_sum(self.base_weights, logs) - self.log_norm

    @property
    def branches(self) -> list[tuple[float, GaussianState]]:
        """Explicit signed branch list on the visible modes.

        Heralds are applied one after the other: no-click keeps the branch
        count, a click turns each branch (w, rho) into (w/p, rho_traced) and
        (-w p_nc/p, rho_nc).
        """
        n_parent = self.mus.shape[1] // 2
        weights = self.base_weights.copy()
        mus, excess = self.mus, self.excess
        alive = list(range(n_parent))
        for h in self.heralds:
            pos = alive.index(h.mode)
            keep = quad_index([i for i in range(len(alive)) if i != pos])
            eta = h.detector.efficiency
            log_p = filter_log(mus, excess, [pos], [eta]) + h.detector.log_survival
            p_nc = np.exp(log_p)
            mu_nc, ex_nc = _filter_condition(mus, excess, [pos], [eta], keep)
            if h.click:
                total = float(weights @ -np.expm1(log_p))
                weights = np.concatenate([weights, -weights * p_nc]) / total
                mus = np.concatenate([mus[:, keep], mu_nc])
                excess = np.concatenate([excess[:, keep][:, :, keep], ex_nc])
            else:
                weights = weights * p_nc / float(weights @ p_nc)
                mus, excess = mu_nc, ex_nc
            alive.pop(pos)
        order = quad_index([alive.index(m) for m in self.visible])
        return [
            (float(w), GaussianState(m[order], x[np.ix_(order, order)]))
            for w, m, x in zip(weights, mus, excess)
        ]

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for w, _ in self.branches])

    def __iter__(self) -> Iterator[tuple[float, GaussianState]]:
        return iter(self.branches)


def _log_weighted_sum(weights: np.ndarray, logs: np.ndarray) -> float:
    top = np.max(logs)
    if not np.isfinite(top):
        return -np.inf
    total = float(weights @ np.exp(logs - top))
    if total <= 0:
        return -np.inf
    return top + np.log(total)


def vacuum(n: int) -> QuasiMixture:
    """The n-mode vacuum as a single-branch mixture."""
    if n < 1:
        raise ValueError("vacuum needs at least one mode")
    return QuasiMixture(
        mus=np.zeros((1, 2 * n)),
        excess=np.zeros((1, 2 * n, 2 * n)),
        base_weights=np.ones(1),
        visible=tuple(range(n)),
    )


def apply_op(state: QuasiMixture, op: SymplecticOp) -> QuasiMixture:
    """Apply a full (d, M) map defined on the visible modes."""
    if op.n_total != state.n_modes:
        raise ValueError(
            f"gate built for {op.n_total} modes applied to a {state.n_modes}-mode state"
        )
    idx = quad_index(state.visible)
    mus, excess = _transform(state.mus, state.excess, idx, op.d, op.M, op.noise)
    return state._replace(mus=mus, excess=excess)


def apply_gate(state: QuasiMixture, kind, params, modes: Sequence[int]) -> QuasiMixture:
    """Apply a gate on visible ``modes``, touching only their rows and columns."""
    kind = GateKind(kind)
    modes = tuple(int(m) for m in modes)
    params = tuple(float(p) for p in params)
    check_gate(kind, modes, params, state.n_modes)
    d, block, noise = gate_blocks(kind, params)
    idx = quad_index(state._parent_modes(modes))
    mus, excess = _transform(state.mus, state.excess, idx, d, block, noise, kind)
    return state._replace(mus=mus, excess=excess)


def trace_out(state: QuasiMixture, mode: int) -> QuasiMixture:
    if state.n_modes < 2:
        raise ValueError("cannot trace out the last remaining mode")
    (target,) = state._parent_modes([mode])
    n_parent = state.mus.shape[1] // 2
    keep = quad_index([m for m in range(n_parent) if m != target])

    def shift(m):
        return m - (m > target)

    return state._replace(
        mus=state.mus[:, keep],
        excess=state.excess[:, keep][:, :, keep],
        visible=tuple(shift(m) for m in state.visible if m != target),
        heralds=tuple(Herald(shift(h.mode), h.click, h.detector) for h in state.heralds),
    )


def no_click_probability(state: QuasiMixture, mode: int, det: DetectorModel) -> float:
    p = float(np.exp(state.log_expectation([mode], det)))
    return _clamp_probability(p, "no-click")


def _condition(state: QuasiMixture, mode: int, det: DetectorModel, click: bool):
    if state.n_modes < 2:
        raise ValueError("conditioning needs at least two modes")
    (target,) = state._parent_modes([mode])
    new = state._replace(
        visible=tuple(m for m in state.visible if m != target),
        heralds=state.heralds + (Herald(target, click, det),),
    )
    filters, clicks = new._herald_sets()
    log_total = _log_weighted_sum(new.base_weights, _log_g(new.mus, new.excess, filters, clicks))
    log_p = log_total - state.log_norm
    p = float(np.exp(log_p)) if np.isfinite(log_p) else 0.0
    if not p > HERALD_FLOOR:
        outcome = "click" if click else "no-click"
        raise HeraldImpossibleError(f"{outcome} on mode {mode} has probability {p:.3g}")
    return new._replace(log_norm=log_total), _clamp_probability(p, "herald")


def condition_no_click(state: QuasiMixture, mode: int, det: DetectorModel):
    """Herald on no click at ``mode``; returns (state on the other modes, probability)."""
    return _condition(state, mode, det, click=False)


def condition_click(state: QuasiMixture, mode: int, det: DetectorModel):
    """Herald on a click at ``mode``; returns (state on the other modes, probability)."""
    return _condition(state, mode, det, click=True)


@functools.lru_cache(maxsize=None)
def _inclusion_exclusion(m: int) -> np.ndarray:
    """Matrix T with Prob(k) = sum_l T[k, l] <o_l>; rows and columns in lexicographic bit order."""
    patterns = list(itertools.product((0, 1), repeat=m))
    T = np.zeros((2**m, 2**m))
    for i, k in enumerate(patterns):
        for j, ell in enumerate(patterns):
            if any(ki == 0 and li == 0 for ki, li in zip(k, ell)):
                continue
            T[i, j] = -1.0 if sum(ki * li for ki, li in zip(k, ell)) % 2 else 1.0
    T.setflags(write=False)
    return T


def batch_expectations(states: Sequence[QuasiMixture], det: DetectorModel, modes=None) -> np.ndarray:
    """<o_l> for every subset l of ``modes`` and every state, shape (len(states), 2^m).

    All states must share visible modes and heralds (as the per-setting states
    of one circuit do); their branches are stacked so each filter set costs a
    single batched eigen-decomposition.
    """
    first = states[0]
    for st in states[1:]:
        if st.visible != first.visible or st.heralds != first.heralds:
            raise ValueError("batched states must share visible modes and heralds")
    modes = list(range(first.n_modes)) if modes is None else list(modes)
    parent = first._parent_modes(modes)
    mus = np.concatenate([st.mus for st in states])
    excess = np.concatenate([st.excess for st in states])
    weights = np.concatenate([st.base_weights for st in states])
    sizes = [st.base_weights.shape[0] for st in states]
    owner = np.repeat(np.arange(len(states)), sizes)
    log_norm = np.repeat([st.log_norm for st in states], sizes)
    filters, clicks = first._herald_sets()
    herald_modes = [h.mode for h in filters + clicks]
    n_parent = mus.shape[1] // 2
    out = np.ones((len(states), 2 ** len(modes)))
    patterns = list(itertools.product((0, 1), repeat=len(modes)))
    by_size: dict[int, list[int]] = {}
    for j, bits in enumerate(patterns):
        if any(bits):
            by_size.setdefault(sum(bits), []).append(j)
    for k, columns in by_size.items():
        # reorder every subset's modes to the front so one stacked call serves them all
        stack_mu, stack_ex = [], []
        for j in columns:
            chosen = [m for m, b in zip(parent, patterns[j]) if b]
            rest = [m for m in range(n_parent) if m not in chosen and m not in herald_modes]
            q = quad_index(chosen + herald_modes + rest)
            stack_mu.append(mus[:, q])
            stack_ex.append(excess[:, q][:, :, q])
        pos = {h: k + i for i, h in enumerate(herald_modes)}

        def moved(ms):
            return [replace(f, mode=pos[f.mode]) for f in ms]

        extra = [_Meas(i, det.efficiency, det.log_survival) for i in range(k)]
        logs = _log_g(np.concatenate(stack_mu), np.concatenate(stack_ex),
                      moved(filters) + extra, moved(clicks))
        vals = np.tile(weights, len(columns)) * np.exp(logs - np.tile(log_norm, len(columns)))
        sums = np.bincount(np.concatenate([owner + c * len(states) for c in range(len(columns))]),
                           weights=vals, minlength=len(states) * len(columns))
        out[:, columns] = sums.reshape(len(columns), len(states)).T
    return out


def _clamp_array(probs: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(probs)) or probs.min() < -CLAMP_SLACK or probs.max() > 1 + CLAMP_SLACK:
        raise NumericalInstabilityError(
            f"pattern probabilities outside [0, 1] (range {probs.min():.3g}..{probs.max():.3g})"
        )
    return np.clip(probs, 0.0, 1.0)


def batch_outcome_probabilities(states: Sequence[QuasiMixture], det: DetectorModel, modes=None) -> np.ndarray:
    """Click-pattern distributions, shape (len(states), 2^m), patterns in lexicographic order."""
    expect = batch_expectations(states, det, modes)
    m = int(np.log2(expect.shape[1]))
    return _clamp_array(expect @ _inclusion_exclusion(m).T)


def subset_expectations(state: QuasiMixture, det: DetectorModel, modes=None) -> dict:
    """Mixture value of <o_l> for every subset l of ``modes`` (default: all visible).

    Keys are bit tuples aligned with ``modes``; dark counts scale each no-click
    filter by (1 - p_dc).
    """
    row = batch_expectations([state], det, modes)[0]
    m = int(np.log2(row.size))
    return dict(zip(itertools.product((0, 1), repeat=m), row.tolist()))


def outcome_probabilities(state: QuasiMixture, det: DetectorModel, modes=None) -> dict:
    """Click-pattern distribution of NPNR detectors on ``modes`` (default: all visible).

    Returns a dict keyed by bit tuples (1 = click) in lexicographic order.
    Herald clicks go through the direct ``-expm1`` step; signal patterns follow
    from ``Prob(k) = sum_{l in S_k} (-1)^{k.l} <o_l>`` on the conditioned
    expectations, which are O(1) quantities.
    """
    row = batch_outcome_probabilities([state], det, modes)[0]
    m = int(np.log2(row.size))
    return dict(zip(itertools.product((0, 1), repeat=m), row.tolist()))


def patterns_from_expectations(expect: dict) -> dict:
    """Inclusion-exclusion ``Prob(k) = sum_{l in S_k} (-1)^{k.l} <o_l>``."""
    keys = sorted(expect)
    m = len(keys[0])
    probs = _clamp_array(np.array([expect[k] for k in keys]) @ _inclusion_exclusion(m).T)
    return dict(zip(keys, probs.tolist()))
