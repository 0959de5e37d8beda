import itertools

import pytest
from hypothesis import given, strategies as st

from driftguard.automaton import (
    DEFAULT_TABLE,
    RunTrace,
    StateId,
    Step,
    TransitionTable,
    run,
    step,
    validate,
    validate_trace,
)

S0, S1, S2, S3, S4, S5 = StateId

# the published transition function, written out independently of the module
PUBLISHED = {
    "S0": {0: "S4", 1: "S1"},
    "S1": {0: "S0", 1: "S2"},
    "S2": {0: "S3", 1: "S3"},
    "S3": {0: "S4", 1: "S5"},
    "S4": {0: "S4", 1: "S5"},
    "S5": {0: "S0", 1: "S0"},
}

inputs = st.lists(st.sampled_from([0, 1]), max_size=40)


def test_exactly_six_states():
    assert [s.value for s in StateId] == ["S0", "S1", "S2", "S3", "S4", "S5"]


def test_default_table_equals_published_delta():
    assert len(DEFAULT_TABLE.entries) == 12
    for src, row in PUBLISHED.items():
        for sym, dst in row.items():
            assert DEFAULT_TABLE[(StateId(src), sym)] is StateId(dst)


@pytest.mark.parametrize("state,symbol,expected", [
    (S0, 1, S1), (S4, 0, S4), (S2, 0, S3), (S2, 1, S3), (S0, 0, S4), (S5, 0, S0),
])
def test_step(state, symbol, expected):
    assert step(DEFAULT_TABLE, state, symbol) is expected


@pytest.mark.parametrize("bad", [2, -1, True, "1"])
def test_step_rejects_non_binary_symbols(bad):
    with pytest.raises(ValueError):
        step(DEFAULT_TABLE, S0, bad)


def test_run_happy_path():
    trace = run(DEFAULT_TABLE, [1, 1, 1, 1])
    assert trace.path() == "S0→S1→S2→S3→S5"
    assert trace.current is S5 and trace.accepted
    assert trace.status == "completed-accept"


def test_run_empty():
    trace = run(DEFAULT_TABLE, [])
    assert trace.steps == [] and trace.current is S0


def test_run_safe_state_dwell_and_reset():
    trace = run(DEFAULT_TABLE, [0, 0, 0, 1, 1])
    assert trace.path() == "S0→S4→S4→S4→S5→S0"
    # same answer from walking the independent table by hand
    state = "S0"
    for sym in [0, 0, 0, 1, 1]:
        state = PUBLISHED[state][sym]
    assert trace.current.value == state


def test_validate_default_table_passes():
    report = validate(DEFAULT_TABLE)
    assert report.ok, str(report)


def test_validate_reports_missing_entry():
    report = validate(DEFAULT_TABLE.without(S2, 1))
    assert [v.kind for v in report.violations] == ["totality"]
    assert "(S2, 1)" in report.violations[0].detail


def test_validate_all_to_safe_state():
    table = TransitionTable({(s, i): S4 for s in StateId for i in (0, 1)})
    report = validate(table)
    assert not report.ok
    assert any("S5 unreachable" in v.detail for v in report.violations)


def test_validate_reports_nondeterminism():
    triples = [(s, i, t) for (s, i), t in DEFAULT_TABLE.entries.items()] + [(S3, 1, S4)]
    report = validate(triples)
    assert [v.kind for v in report.violations] == ["determinism"]


def test_table_text_round_trip():
    text = DEFAULT_TABLE.format()
    assert text.splitlines()[0] == "S0 0 S4"
    assert TransitionTable.parse("# delta\n" + text) == DEFAULT_TABLE
    assert TransitionTable.parse(text).format() == text


@pytest.mark.parametrize("text,msg", [
    ("S0 1 S1\n", "incomplete"),
    (DEFAULT_TABLE.format() + "S0 1 S2\n", "duplicate"),
    ("S0 1\n", "expected"),
    ("S9 1 S1\n", "line 1"),
])
def test_table_parse_errors(text, msg):
    with pytest.raises(ValueError, match=msg):
        TransitionTable.parse(text)


def test_only_entry_into_s1_is_from_s0_on_1():
    into_s1 = [(s, i) for (s, i), t in DEFAULT_TABLE.entries.items() if t is S1]
    assert into_s1 == [(S0, 1)]


def test_liveness_return_to_s0_within_three_steps():
    for s in StateId:
        if s is S0:
            continue
        found = any(
            run(DEFAULT_TABLE, seq, start=s).current is S0
            or S0 in run(DEFAULT_TABLE, seq, start=s).states()
            for n in (1, 2, 3)
            for seq in itertools.product([0, 1], repeat=n)
        )
        assert found, s


@given(st.sampled_from(list(StateId)), st.sampled_from([0, 1]))
def test_step_is_total_and_deterministic(state, symbol):
    a = step(DEFAULT_TABLE, state, symbol)
    assert a is step(DEFAULT_TABLE, state, symbol)
    assert a.value == PUBLISHED[state.value][symbol]


@given(inputs, inputs)
def test_fold_composition(xs, ys):
    whole = run(DEFAULT_TABLE, xs + ys)
    first = run(DEFAULT_TABLE, xs)
    rest = run(DEFAULT_TABLE, ys, start=first.current)
    assert whole.current is rest.current
    assert whole.steps == first.steps + rest.steps


@given(inputs)
def test_traces_are_chain_consistent(xs):
    trace = run(DEFAULT_TABLE, xs)
    assert len(trace.steps) == len(xs)
    assert validate_trace(DEFAULT_TABLE, trace) == []
    for a, b in zip(trace.steps, trace.steps[1:]):
        assert a.dst is b.src


def test_validate_trace_flags_forged_step():
    trace = RunTrace([Step(S0, 1, S2)], current=S2)
    assert validate_trace(DEFAULT_TABLE, trace)
