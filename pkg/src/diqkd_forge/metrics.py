"""CHSH score, entropies and the noisy-preprocessing DIQKD key rate."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

TSIRELSON = 2.0 * np.sqrt(2.0)
S_OVERSHOOT = 1e-9
NEG_TOL = 1e-12
NORM_TOL = 1e-9


class InvalidBehaviorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BehaviorTable:
    """Conditional distribution ``p[a, b, x, y]`` with a, b, x in {0,1} and y in {0,1,2}."""

    p: np.ndarray
    herald_probability: float = 1.0

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.shape != (2, 2, 2, 3):
            raise InvalidBehaviorError(f"behavior must have shape (2, 2, 2, 3), got {p.shape}")
        if np.any(p < -NEG_TOL) or not np.all(np.isfinite(p)):
            raise InvalidBehaviorError("behavior has negative or non-finite entries")
        sums = p.sum(axis=(0, 1))
        if np.any(np.abs(sums - 1.0) > NORM_TOL):
            raise InvalidBehaviorError(f"setting slices do not sum to 1: {sums.ravel()}")
        object.__setattr__(self, "p", p)

    def correlator(self, x: int, y: int) -> float:
        s = self.p[:, :, x, y]
        return float(s[0, 0] + s[1, 1] - s[0, 1] - s[1, 0])

    def joint(self, x: int = 0, y: int = 2) -> np.ndarray:
        return self.p[:, :, x, y]


def binary_entropy(x):
    """h(x) in bits, with 0 log 0 = 0."""
    x = np.clip(np.asarray(x, dtype=float), 0.0, 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = -x * np.log2(x) - (1 - x) * np.log2(1 - x)
    out = np.where((x <= 0) | (x >= 1), 0.0, terms)
    return float(out) if out.ndim == 0 else out


def shannon_entropy(probs) -> float:
    probs = np.asarray(probs, dtype=float).ravel()
    probs = probs[probs > 0]
    return float(-np.sum(probs * np.log2(probs)))


def chsh_score(behavior: BehaviorTable) -> float:
    """S = E00 + E01 + E10 - E11 over Bob's settings 0 and 1."""
    E = behavior.correlator
    return E(0, 0) + E(0, 1) + E(1, 0) - E(1, 1)


def fold_noise(p: float) -> float:
    """Map any real flip parameter to the equivalent probability in [0, 1/2].

    Negative values are read as their magnitude; flipping with 1 - p is a
    relabelling of flipping with p.
    """
    q = abs(float(p)) % 1.0
    return 1.0 - q if q > 0.5 else q


def _check_noise(p: float):
    if not 0.0 <= p <= 0.5:
        raise ValueError(f"flip probability must lie in [0, 1/2], got {p}")


def _clamp_score(S: float) -> float:
    S = abs(float(S))
    if S > TSIRELSON + S_OVERSHOOT:
        raise InvalidBehaviorError(f"CHSH score {S} exceeds the quantum bound")
    return min(S, TSIRELSON)


def eve_information(S: float, p: float = 0.0) -> float:
    """Upper bound I_p(S) on Eve's information, valid for |S| > 2."""
    _check_noise(p)
    S = _clamp_score(S)
    if S <= 2.0:
        raise ValueError(f"eve_information needs |S| > 2, got {S}")
    first = binary_entropy((1 + np.sqrt(max((S / 2) ** 2 - 1, 0.0))) / 2)
    second = binary_entropy((1 + np.sqrt(max(1 - p * (1 - p) * (8 - S * S), 0.0))) / 2)
    return first - second


def extended_eve_information(S: float, p: float = 0.0) -> float:
    """Continuation of I_p to all |S|, used to steer the optimizer into S > 2."""
    _check_noise(p)
    S = _clamp_score(S)
    if S > 2.0:
        return eve_information(S, p)
    first = binary_entropy((1 + np.sqrt(S / 2)) / 2)
    second = binary_entropy((1 + np.sqrt(max(1 - p * (1 - p) * S * S, 0.0))) / 2)
    return 1.0 + first - second


def conditional_entropy(joint, p: float = 0.0, flip: str = "bob") -> float:
    """Conditional entropy of the flipped key bit given the other party's bit.

    ``joint[a, b]`` is the distribution of the raw-key pair.  With
    ``flip="bob"`` (the default) Bob's bit goes through the flip channel and
    H(B'|A) is returned; ``flip="alice"`` gives H(A'|B).
    """
    _check_noise(p)
    joint = np.asarray(joint, dtype=float)
    if joint.shape != (2, 2):
        raise InvalidBehaviorError("joint distribution must be 2x2")
    if np.any(joint < -NEG_TOL):
        raise InvalidBehaviorError("joint distribution has negative entries")
    if abs(joint.sum() - 1.0) > NORM_TOL:
        raise InvalidBehaviorError(f"joint distribution sums to {joint.sum()}")
    joint = np.clip(joint, 0.0, None)
    if flip == "alice":
        joint = joint.T
    elif flip != "bob":
        raise ValueError(f"flip must be 'alice' or 'bob', got {flip!r}")
    flipped = (1 - p) * joint + p * joint[:, ::-1]
    return shannon_entropy(flipped) - shannon_entropy(flipped.sum(axis=1))


@dataclass(frozen=True)
class KeyRateReport:
    S: float
    I_p: float
    H_AB: float
    rate: float
    extended_rate: float
    noise_p: float
    herald_probability: float

    def to_dict(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def key_rate(behavior: BehaviorTable, p: float = 0.0, key_pair=(0, 2), flip: str = "bob") -> KeyRateReport:
    """Key rate 1 - I_p(S) - H for the raw-key settings ``key_pair`` = (x, y).

    ``p`` is folded into [0, 1/2] first.  Below |S| = 2 the continuation is
    reported in both ``I_p`` and ``rate``, so ``rate`` equals ``extended_rate``
    and is negative.
    """
    p = fold_noise(p)
    S = chsh_score(behavior)
    H = conditional_entropy(behavior.joint(*key_pair), p, flip)
    info = extended_eve_information(S, p)
    rate = 1.0 - info - H
    return KeyRateReport(
        S=S, I_p=info, H_AB=H, rate=rate, extended_rate=rate,
        noise_p=p, herald_probability=behavior.herald_probability,
    )


def extended_key_rate(behavior: BehaviorTable, p: float = 0.0, key_pair=(0, 2), flip: str = "bob") -> float:
    return key_rate(behavior, p, key_pair, flip).extended_rate


def shaped_reward(extended_rate: float, S: float, weight: float = 1e-2) -> float:
    """(r + weight |S|) / (1 + weight), the lossless-task reward."""
    return (extended_rate + weight * abs(S)) / (1 + weight)
