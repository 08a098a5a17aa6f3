"""Circuit description, parameter binding, simplification and evaluation.

A circuit acts on ``n_modes`` modes.  The first ``m_signal`` are delivered to
the parties (Alice gets the first half, Bob the second half); the others are
heralded after the preparation gates.  Modes are 0-based everywhere.

Gate parameters are either pinned floats or free slots (``None``).  A flat
vector binds the free slots in declaration order: preparation gates, then
Alice's settings 0 and 1, then Bob's settings 0, 1 and 2.  With
``baseline_displacements`` each of Alice's branches ends with a free ``Dx``
and each of Bob's with a free ``Dp``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
import yaml

from . import gaussian as gs
from .metrics import BehaviorTable

GATE_PARAMS = {
    "D": ("re", "im"),
    "Dx": ("re",),
    "Dp": ("im",),
    "PS": ("theta",),
    "S": ("r", "theta"),
    "TMS": ("r", "theta"),
    "BS": ("theta",),
}
TWO_MODE = ("TMS", "BS")
PARAM_KIND = {"re": "displacement", "im": "displacement", "theta": "angle", "r": "squeezing"}
N_SETTINGS = {"alice": 2, "bob": 3}


class CircuitError(ValueError):
    """Invalid circuit structure."""


class CircuitParseError(CircuitError):
    """Malformed circuit document."""


@dataclass(frozen=True)
class Gate:
    name: str
    modes: tuple[int, ...]
    params: tuple[float | None, ...] = ()

    def __post_init__(self):
        if self.name not in GATE_PARAMS:
            raise CircuitError(f"unknown gate {self.name!r}")
        modes = tuple(int(m) for m in self.modes)
        arity = 2 if self.name in TWO_MODE else 1
        if len(modes) != arity or len(set(modes)) != arity:
            raise CircuitError(f"{self.name} needs {arity} distinct mode(s), got {modes}")
        params = self.params or (None,) * len(GATE_PARAMS[self.name])
        if len(params) != len(GATE_PARAMS[self.name]):
            raise CircuitError(
                f"{self.name} takes {len(GATE_PARAMS[self.name])} parameter(s), got {len(params)}"
            )
        params = tuple(None if p is None else float(p) for p in params)
        object.__setattr__(self, "modes", modes)
        object.__setattr__(self, "params", params)

    @property
    def n_free(self) -> int:
        return sum(p is None for p in self.params)

    @property
    def action(self) -> tuple:
        """Identity of the gate up to its free parameters."""
        return (self.name, self.modes, self.params)

    def bound(self, values: Iterable[float]) -> "Gate":
        it = iter(values)
        return replace(self, params=tuple(next(it) if p is None else p for p in self.params))

    def operation(self, values=()) -> tuple[gs.GateKind, tuple[float, ...], tuple[int, ...]]:
        """(kind, numeric params, modes) for the simulator, filling free slots from ``values``."""
        it = iter(values)
        vals = [next(it) if p is None else p for p in self.params]
        if self.name == "Dx":
            return gs.GateKind.DISPLACEMENT, (vals[0], 0.0), self.modes
        if self.name == "Dp":
            return gs.GateKind.DISPLACEMENT, (0.0, vals[0]), self.modes
        return gs.GateKind(self.name), tuple(vals), self.modes


@dataclass(frozen=True)
class CircuitSpec:
    n_modes: int
    m_signal: int
    preparation: tuple[Gate, ...] = ()
    heralding: tuple[tuple[int, str], ...] = ()
    alice: tuple[tuple[Gate, ...], ...] = ((), ())
    bob: tuple[tuple[Gate, ...], ...] = ((), (), ())
    baseline_displacements: bool = True
    binning: dict = field(default=None, compare=True, hash=False)
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "preparation", tuple(self.preparation))
        object.__setattr__(self, "heralding", tuple((int(m), str(o)) for m, o in self.heralding))
        object.__setattr__(self, "alice", tuple(tuple(b) for b in self.alice))
        object.__setattr__(self, "bob", tuple(tuple(b) for b in self.bob))
        if self.binning is None:
            object.__setattr__(self, "binning", default_binning(self.party_size))
        else:
            object.__setattr__(
                self, "binning", {k: tuple(int(b) for b in v) for k, v in self.binning.items()}
            )
        self.validate()

    def __hash__(self):
        return hash((self.n_modes, self.m_signal, self.preparation, self.heralding, self.alice,
                     self.bob, self.baseline_displacements,
                     tuple(sorted(self.binning.items())), self.name))

    @property
    def party_size(self) -> int:
        return self.m_signal // 2

    def party_modes(self, party: str) -> tuple[int, ...]:
        k = self.party_size
        return tuple(range(k)) if party == "alice" else tuple(range(k, 2 * k))

    def branches(self, party: str) -> tuple[tuple[Gate, ...], ...]:
        return self.alice if party == "alice" else self.bob

    def validate(self):
        n, m = self.n_modes, self.m_signal
        if n < 1 or m < 2 or m % 2 or m > n:
            raise CircuitError(f"need an even signal-mode count 2 <= m <= n, got n={n}, m={m}")
        herald_modes = [mode for mode, _ in self.heralding]
        if sorted(herald_modes) != list(range(m, n)):
            raise CircuitError(
                f"heralding must cover exactly the non-signal modes {list(range(m, n))}, "
                f"got {herald_modes}"
            )
        for mode, outcome in self.heralding:
            if outcome not in ("click", "no-click"):
                raise CircuitError(f"herald outcome must be 'click' or 'no-click', got {outcome!r}")
        for gate in self.preparation:
            if max(gate.modes) >= n:
                raise CircuitError(f"preparation gate {gate.name}{gate.modes} outside {n} modes")
        for party, count in N_SETTINGS.items():
            branches = self.branches(party)
            if len(branches) != count:
                missing = [(party, s) for s in range(len(branches), count)]
                raise CircuitError(f"missing measurement branches {missing}")
            own = set(self.party_modes(party))
            for s, branch in enumerate(branches):
                for gate in branch:
                    if not set(gate.modes) <= own:
                        raise CircuitError(
                            f"{party} setting {s}: {gate.name}{gate.modes} leaves modes {sorted(own)}"
                        )
        if self.baseline_displacements and self.party_size != 1:
            raise CircuitError("baseline displacements need single-mode parties")
        for party in ("alice", "bob"):
            table = self.binning.get(party)
            if table is None or len(table) != 2**self.party_size or set(table) - {0, 1}:
                raise CircuitError(
                    f"binning for {party} needs {2 ** self.party_size} bits, got {table}"
                )

    # -- parameter slots ---------------------------------------------------

    def effective_branch(self, party: str, setting: int) -> tuple[Gate, ...]:
        branch = self.branches(party)[setting]
        if self.baseline_displacements:
            mode = self.party_modes(party)[0]
            branch = branch + (Gate("Dx" if party == "alice" else "Dp", (mode,), (None,)),)
        return branch

    def gate_sequence(self) -> list[tuple[str, Gate]]:
        """All gates with their location label, in slot-binding order."""
        seq = [("prep", g) for g in self.preparation]
        for party, count in N_SETTINGS.items():
            for s in range(count):
                label = f"{party[0].upper()}{s}"
                seq += [(label, g) for g in self.effective_branch(party, s)]
        return seq

    def slot_names(self) -> list[str]:
        names = []
        for i, (loc, gate) in enumerate(self.gate_sequence()):
            modes = "".join(str(m) for m in gate.modes)
            for pname, val in zip(GATE_PARAMS[gate.name], gate.params):
                if val is None:
                    names.append(f"{loc}:{gate.name}{modes}.{pname}#{i}")
        return names

    def slot_kinds(self) -> list[str]:
        return [
            PARAM_KIND[pname]
            for _, gate in self.gate_sequence()
            for pname, val in zip(GATE_PARAMS[gate.name], gate.params)
            if val is None
        ]

    @property
    def n_params(self) -> int:
        return sum(g.n_free for _, g in self.gate_sequence())

    def compile(self, phi: Sequence[float] | None = None):
        """Numeric operations (prep, alice branches, bob branches) with slots bound to ``phi``."""
        phi = np.zeros(0) if phi is None else np.asarray(phi, dtype=float)
        if phi.shape != (self.n_params,):
            raise CircuitError(f"circuit has {self.n_params} free parameters, got {phi.size}")
        pos = 0

        def ops(gates):
            nonlocal pos
            out = []
            for g in gates:
                out.append(g.operation(phi[pos:pos + g.n_free]))
                pos += g.n_free
            return out

        prep = ops(self.preparation)
        alice = [ops(self.effective_branch("alice", s)) for s in range(2)]
        bob = [ops(self.effective_branch("bob", s)) for s in range(3)]
        return prep, alice, bob

    def bind(self, phi: Sequence[float]) -> "CircuitSpec":
        """Fully pinned copy with baseline displacements written out."""
        phi = np.asarray(phi, dtype=float)
        if phi.shape != (self.n_params,):
            raise CircuitError(f"circuit has {self.n_params} free parameters, got {phi.size}")
        pos = 0

        def fill(gates):
            nonlocal pos
            out = []
            for g in gates:
                out.append(g.bound(phi[pos:pos + g.n_free]))
                pos += g.n_free
            return tuple(out)

        prep = fill(self.preparation)
        alice = tuple(fill(self.effective_branch("alice", s)) for s in range(2))
        bob = tuple(fill(self.effective_branch("bob", s)) for s in range(3))
        return replace(self, preparation=prep, alice=alice, bob=bob, baseline_displacements=False)

    def with_gate(self, location: str, gate: Gate) -> "CircuitSpec":
        """Append ``gate`` to the preparation (``"prep"``) or a branch such as ``"alice:1"``."""
        if location == "prep":
            return replace(self, preparation=self.preparation + (gate,))
        party, setting = location.split(":")
        branches = list(self.branches(party))
        branches[int(setting)] = branches[int(setting)] + (gate,)
        return replace(self, **{party: tuple(branches)})

    def gate_count(self) -> int:
        return len(self.preparation) + sum(len(b) for b in self.alice + self.bob)


def default_binning(party_size: int) -> dict:
    """No click -> 0, click -> 1 for one detector; for two detectors the bit of
    the pattern is the second detector's click, with both-click mapped to 1."""
    if party_size == 1:
        bits = (0, 1)
    else:
        bits = tuple(int(any(p[1:])) for p in itertools.product((0, 1), repeat=party_size))
    return {"alice": bits, "bob": bits}


# -- evaluation -------------------------------------------------------------


def _prepare(circuit: CircuitSpec, prep, det):
    state = gs.vacuum(circuit.n_modes)
    for kind, params, modes in prep:
        state = gs.apply_gate(state, kind, params, modes)
    p_herald = 1.0
    alive = list(range(circuit.n_modes))
    for mode, outcome in circuit.heralding:
        idx = alive.index(mode)
        cond = gs.condition_click if outcome == "click" else gs.condition_no_click
        state, p = cond(state, idx, det)
        p_herald *= p
        alive.pop(idx)
    return state, p_herald


def _bin_maps(circuit: CircuitSpec):
    """Alice's and Bob's bit for every joint click pattern (lexicographic order)."""
    k = circuit.party_size
    index = np.arange(2 ** (2 * k))
    a_of = np.asarray(circuit.binning["alice"])[index >> k]
    b_of = np.asarray(circuit.binning["bob"])[index & (2**k - 1)]
    return a_of, b_of


def evaluate(circuit: CircuitSpec, det: gs.DetectorModel, phi=None) -> BehaviorTable:
    """Behavior p(a, b | x, y) of the circuit with its free slots bound to ``phi``."""
    prep, alice, bob = circuit.compile(phi)
    state, p_herald = _prepare(circuit, prep, det)
    states = []
    for a_ops in alice:
        sa = state
        for op in a_ops:
            sa = gs.apply_gate(sa, *op)
        for b_ops in bob:
            s = sa
            for op in b_ops:
                s = gs.apply_gate(s, *op)
            states.append(s)
    probs = gs.batch_outcome_probabilities(states, det)
    a_of, b_of = _bin_maps(circuit)
    p = np.zeros((2, 2, 2, 3))
    for idx, (x, y) in enumerate(itertools.product(range(2), range(3))):
        np.add.at(p[:, :, x, y], (a_of, b_of), probs[idx])
    return BehaviorTable(p, p_herald)


def measurement_states(circuit: CircuitSpec, det: gs.DetectorModel, phi=None):
    """Pre-detection quasi-mixtures for each (x, y), keyed by the setting pair."""
    prep, alice, bob = circuit.compile(phi)
    state, _ = _prepare(circuit, prep, det)
    out = {}
    for x, a_ops in enumerate(alice):
        sa = state
        for op in a_ops:
            sa = gs.apply_gate(sa, *op)
        for y, b_ops in enumerate(bob):
            s = sa
            for op in b_ops:
                s = gs.apply_gate(s, *op)
            out[x, y] = s
    return out


# -- simplification ---------------------------------------------------------

_ACTIVATES = ("D", "Dx", "Dp", "S", "TMS")


def _simplify_list(gates, nonvacuum: set, unique: bool):
    kept = []
    for gate in gates:
        modes = set(gate.modes)
        if gate.name in ("PS", "BS") and not modes & nonvacuum:
            continue
        duplicate = False
        for prev in reversed(kept):
            if prev.action == gate.action:
                duplicate = True
                break
            if not unique and set(prev.modes) & modes:
                break
        if duplicate:
            continue
        kept.append(gate)
        if gate.name in _ACTIVATES or modes & nonvacuum:
            nonvacuum |= modes
    return tuple(kept)


def simplify(circuit: CircuitSpec) -> CircuitSpec:
    """Drop redundant actions.

    * phase shifters and beamsplitters acting only on vacuum modes;
    * the later of two identical actions separated only by gates on disjoint modes;
    * repeated measurement actions within a party's setting branch.
    """
    current = circuit
    while True:
        nonvac: set = set()
        prep = _simplify_list(current.preparation, nonvac, unique=False)
        alice = tuple(_simplify_list(b, set(nonvac), unique=True) for b in current.alice)
        bob = tuple(_simplify_list(b, set(nonvac), unique=True) for b in current.bob)
        new = replace(current, preparation=prep, alice=alice, bob=bob)
        if new == current:
            return new
        current = new


# -- presets ----------------------------------------------------------------


def preset(name: str) -> CircuitSpec:
    """Built-in circuits with free parameter slots."""
    if name == "robust_fig3":
        return CircuitSpec(
            n_modes=2, m_signal=2,
            preparation=(Gate("TMS", (0, 1)),),
            alice=((), (Gate("S", (0,), (None, 0.0)),)),
            bob=((), (), ()),
            name=name,
        )
    if name == "discovered_fig2":
        return CircuitSpec(
            n_modes=3, m_signal=2,
            preparation=(
                Gate("TMS", (0, 1)), Gate("TMS", (1, 2)), Gate("TMS", (0, 2)), Gate("S", (1,)),
            ),
            heralding=((2, "click"),),
            alice=((Gate("PS", (0,)),), (Gate("S", (0,), (None, 0.0)),)),
            bob=((), (Gate("S", (1,), (None, 0.0)),), ()),
            name=name,
        )
    if name == "reference_fig1":
        def setting(a, b):
            return (Gate("PS", (b,)), Gate("BS", (a, b)))
        return CircuitSpec(
            n_modes=4, m_signal=4,
            preparation=(Gate("TMS", (0, 2)), Gate("TMS", (1, 3))),
            alice=(setting(0, 1), setting(0, 1)),
            bob=(setting(2, 3), setting(2, 3), setting(2, 3)),
            baseline_displacements=False,
            name=name,
        )
    raise CircuitError(f"unknown preset {name!r}; choose from {PRESETS}")


PRESETS = ("reference_fig1", "discovered_fig2", "robust_fig3")


def empty_circuit(n_modes: int, m_signal: int = 2, herald: str = "click") -> CircuitSpec:
    """Circuit with no gates; non-signal modes are heralded with ``herald``."""
    return CircuitSpec(
        n_modes=n_modes, m_signal=m_signal,
        heralding=tuple((m, herald) for m in range(m_signal, n_modes)),
        baseline_displacements=m_signal == 2,
    )


# -- serialization ----------------------------------------------------------


def _pattern_key(index: int, width: int) -> str:
    return format(index, f"0{width}b")


def to_document(circuit: CircuitSpec) -> dict:
    def gates(seq):
        return [{"gate": g.name, "modes": list(g.modes), "params": list(g.params)} for g in seq]

    k = circuit.party_size
    return {
        "name": circuit.name,
        "modes": circuit.n_modes,
        "signal_modes": circuit.m_signal,
        "baseline_displacements": circuit.baseline_displacements,
        "preparation": gates(circuit.preparation),
        "heralding": [{"mode": m, "outcome": o} for m, o in circuit.heralding],
        "measurements": {
            "alice": {s: gates(b) for s, b in enumerate(circuit.alice)},
            "bob": {s: gates(b) for s, b in enumerate(circuit.bob)},
        },
        "binning": {
            party: {_pattern_key(i, k): bit for i, bit in enumerate(circuit.binning[party])}
            for party in ("alice", "bob")
        },
    }


def serialize(circuit: CircuitSpec) -> str:
    return yaml.safe_dump(to_document(circuit), sort_keys=False, default_flow_style=None)


def _parse_gate(raw, where: str) -> Gate:
    if not isinstance(raw, dict) or "gate" not in raw or "modes" not in raw:
        raise CircuitParseError(f"{where}: expected a mapping with 'gate' and 'modes'")
    name = raw["gate"]
    if name not in GATE_PARAMS:
        raise CircuitParseError(f"{where}: unknown gate {name!r} (known: {', '.join(GATE_PARAMS)})")
    params = raw.get("params")
    if params is None:
        params = [None] * len(GATE_PARAMS[name])
    try:
        return Gate(name, tuple(raw["modes"]), tuple(params))
    except (CircuitError, TypeError, ValueError) as exc:
        raise CircuitParseError(f"{where}: {exc}") from None


def from_document(doc: dict) -> CircuitSpec:
    if not isinstance(doc, dict):
        raise CircuitParseError("circuit document must be a mapping")
    for key in ("modes", "signal_modes"):
        if key not in doc:
            raise CircuitParseError(f"missing field {key!r}")
    prep = tuple(
        _parse_gate(g, f"preparation[{i}]") for i, g in enumerate(doc.get("preparation") or [])
    )
    heralding = []
    for i, h in enumerate(doc.get("heralding") or []):
        if not isinstance(h, dict) or "mode" not in h:
            raise CircuitParseError(f"heralding[{i}]: expected a mapping with 'mode'")
        heralding.append((h["mode"], h.get("outcome", "click")))
    meas = doc.get("measurements") or {}
    branches = {}
    for party, count in N_SETTINGS.items():
        raw = meas.get(party) or {}
        raw = {int(k): v for k, v in raw.items()}
        missing = [(party, s) for s in range(count) if s not in raw]
        if missing:
            raise CircuitParseError(f"measurements: missing setting branches {missing}")
        branches[party] = tuple(
            tuple(_parse_gate(g, f"measurements.{party}.{s}[{i}]") for i, g in enumerate(raw[s] or []))
            for s in range(count)
        )
    binning = None
    if doc.get("binning"):
        binning = {}
        for party in ("alice", "bob"):
            table = doc["binning"].get(party)
            if not isinstance(table, dict):
                raise CircuitParseError(f"binning.{party}: expected a pattern -> bit mapping")
            ordered = sorted(table.items(), key=lambda kv: int(str(kv[0]), 2))
            binning[party] = tuple(int(v) for _, v in ordered)
    try:
        return CircuitSpec(
            n_modes=int(doc["modes"]),
            m_signal=int(doc["signal_modes"]),
            preparation=prep,
            heralding=tuple(heralding),
            alice=branches["alice"],
            bob=branches["bob"],
            baseline_displacements=bool(doc.get("baseline_displacements", True)),
            binning=binning,
            name=str(doc.get("name") or ""),
        )
    except CircuitError as exc:
        raise CircuitParseError(str(exc)) from None


def parse(text: str) -> CircuitSpec:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise CircuitParseError(f"malformed circuit document{where}: {exc}") from None
    return from_document(doc)
