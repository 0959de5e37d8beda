"""The six-state detection-cycle automaton, as data, plus a stepping engine.

The machine is cyclic: S5 returns to S0 on any input, so the accepting state
marks a completed cycle rather than termination.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping


class StateId(enum.Enum):
    S0 = "S0"  # initial / data collection
    S1 = "S1"  # detection and primary classification
    S2 = "S2"  # secondary classification
    S3 = "S3"  # decision (vote)
    S4 = "S4"  # safe state
    S5 = "S5"  # final

    def __str__(self) -> str:
        return self.value


INITIAL = StateId.S0
FINAL = frozenset({StateId.S5})
SYMBOLS = (0, 1)


def check_symbol(symbol: int) -> int:
    if isinstance(symbol, bool) or symbol not in SYMBOLS:
        raise ValueError(f"input symbol must be 0 or 1, got {symbol!r}")
    return int(symbol)


class TransitionTable:
    """A mapping ``(state, symbol) -> state``.

    Construction does not enforce totality so that defective tables can be
    built and handed to :func:`validate`; stepping a missing pair raises
    ``KeyError``.
    """

    def __init__(self, entries: Mapping[tuple[StateId, int], StateId]):
        self.entries = dict(entries)

    def __getitem__(self, key: tuple[StateId, int]) -> StateId:
        return self.entries[key]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, TransitionTable) and self.entries == other.entries

    def __repr__(self) -> str:
        return f"TransitionTable({len(self.entries)} entries)"

    def without(self, state: StateId, symbol: int) -> "TransitionTable":
        entries = dict(self.entries)
        del entries[(state, symbol)]
        return TransitionTable(entries)

    @classmethod
    def parse(cls, text: str) -> "TransitionTable":
        """Parse ``FROM SYMBOL TO`` lines; ``#`` starts a comment.

        All 12 entries are required and duplicates are rejected.
        """
        entries: dict[tuple[StateId, int], StateId] = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"line {lineno}: expected 'FROM SYMBOL TO', got {raw!r}")
            try:
                src, sym, dst = StateId(parts[0]), int(parts[1]), StateId(parts[2])
                check_symbol(sym)
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            if (src, sym) in entries:
                raise ValueError(f"line {lineno}: duplicate entry for ({src}, {sym})")
            entries[(src, sym)] = dst
        missing = [(s, i) for s in StateId for i in SYMBOLS if (s, i) not in entries]
        if missing:
            names = ", ".join(f"({s}, {i})" for s, i in missing)
            raise ValueError(f"table incomplete, missing {names}")
        return cls(entries)

    @classmethod
    def load(cls, path: str | Path) -> "TransitionTable":
        return cls.parse(Path(path).read_text())

    def format(self) -> str:
        lines = []
        for s in StateId:
            for i in SYMBOLS:
                if (s, i) in self.entries:
                    lines.append(f"{s} {i} {self.entries[(s, i)]}")
        return "\n".join(lines) + "\n"


_S = StateId
DEFAULT_TABLE = TransitionTable({
    (_S.S0, 0): _S.S4, (_S.S0, 1): _S.S1,
    (_S.S1, 0): _S.S0, (_S.S1, 1): _S.S2,
    (_S.S2, 0): _S.S3, (_S.S2, 1): _S.S3,
    (_S.S3, 0): _S.S4, (_S.S3, 1): _S.S5,
    (_S.S4, 0): _S.S4, (_S.S4, 1): _S.S5,
    (_S.S5, 0): _S.S0, (_S.S5, 1): _S.S0,
})


@dataclass(frozen=True)
class Step:
    src: StateId
    symbol: int
    dst: StateId


@dataclass
class RunTrace:
    """Audit log of one execution: every step taken, and the current state."""

    steps: list[Step] = field(default_factory=list)
    current: StateId = INITIAL
    start: StateId = INITIAL

    def states(self) -> list[StateId]:
        return [self.start] + [s.dst for s in self.steps]

    def path(self) -> str:
        return "→".join(str(s) for s in self.states())

    @property
    def accepted(self) -> bool:
        return any(s.dst in FINAL for s in self.steps)

    @property
    def status(self) -> str:
        """``completed-accept``, ``completed-safe``, or ``in-progress``."""
        if self.current is StateId.S4:
            return "completed-safe"
        if self.accepted:
            return "completed-accept"
        return "in-progress"

    def passed(self, state: StateId, symbol: int) -> bool:
        return any(s.src is state and s.symbol == symbol for s in self.steps)


def step(table: TransitionTable, state: StateId, symbol: int) -> StateId:
    return table[(state, check_symbol(symbol))]


def advance(table: TransitionTable, trace: RunTrace, symbol: int) -> StateId:
    """Apply one input to ``trace`` in place and return the new state."""
    nxt = step(table, trace.current, symbol)
    trace.steps.append(Step(trace.current, int(symbol), nxt))
    trace.current = nxt
    return nxt


def run(table: TransitionTable, inputs: Iterable[int], start: StateId = INITIAL) -> RunTrace:
    trace = RunTrace(current=start, start=start)
    for symbol in inputs:
        advance(table, trace, symbol)
    return trace


@dataclass
class Violation:
    kind: str  # "totality" | "determinism" | "unreachable" | "no_accept_path"
    detail: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.detail}"


@dataclass
class ValidationReport:
    violations: list[Violation]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self) -> str:
        if self.ok:
            return "table valid"
        return "\n".join(str(v) for v in self.violations)


def _reachable(succ: dict[StateId, set[StateId]], start: StateId) -> set[StateId]:
    seen = {start}
    queue = deque([start])
    while queue:
        s = queue.popleft()
        for t in succ.get(s, ()):
            if t not in seen:
                seen.add(t)
                queue.append(t)
    return seen


def validate(table: TransitionTable | Mapping | Iterable[tuple]) -> ValidationReport:
    """Check totality, determinism, reachability from S0, and that S5 is
    reachable from every state.

    Besides a ``TransitionTable``, accepts a raw iterable of
    ``(state, symbol, state)`` triples so that duplicate (nondeterministic)
    entries can be reported too.
    """
    violations: list[Violation] = []
    if isinstance(table, TransitionTable):
        triples = [(s, i, t) for (s, i), t in table.entries.items()]
    elif isinstance(table, Mapping):
        triples = [(s, i, t) for (s, i), t in table.items()]
    else:
        triples = list(table)

    targets: dict[tuple[StateId, int], set[StateId]] = {}
    for s, i, t in triples:
        targets.setdefault((s, i), set()).add(t)

    for s in StateId:
        for i in SYMBOLS:
            if (s, i) not in targets:
                violations.append(Violation("totality", f"no transition for ({s}, {i})"))
    for (s, i), ts in targets.items():
        if len(ts) > 1:
            names = ", ".join(sorted(str(t) for t in ts))
            violations.append(Violation("determinism", f"({s}, {i}) maps to {{{names}}}"))

    succ: dict[StateId, set[StateId]] = {}
    for (s, _), ts in targets.items():
        succ.setdefault(s, set()).update(ts)
    from_initial = _reachable(succ, INITIAL)
    for s in StateId:
        if s not in from_initial:
            violations.append(Violation("unreachable", f"{s} unreachable from {INITIAL}"))
    for s in StateId:
        if not _reachable(succ, s) & FINAL:
            violations.append(Violation("no_accept_path", f"S5 unreachable from {s}"))
    return ValidationReport(violations)


def validate_trace(table: TransitionTable, trace: RunTrace) -> list[str]:
    """Problems found when replaying ``trace`` against ``table``; empty if valid."""
    problems = []
    prev = trace.start
    for k, st in enumerate(trace.steps):
        if st.src is not prev:
            problems.append(f"step {k}: starts at {st.src}, previous step ended at {prev}")
        expected = table.entries.get((st.src, st.symbol))
        if expected is not st.dst:
            problems.append(f"step {k}: ({st.src}, {st.symbol}) -> {st.dst}, table says {expected}")
        prev = st.dst
    if prev is not trace.current:
        problems.append(f"current {trace.current} does not match last step {prev}")
    return problems
