"""
Walking the six-state controller
================================

The controller is a tiny automaton over the inputs {0, 1}. This script
steps through it by hand, then shows how a broken table is caught.
"""

from driftguard.automaton import DEFAULT_TABLE, StateId, TransitionTable, run, validate

# the table as text: FROM SYMBOL TO, one per line
print(DEFAULT_TABLE.format())

# frame acquired, detection found, crop classified, votes agree
happy = run(DEFAULT_TABLE, [1, 1, 1, 1])
print(happy.path(), happy.status)

# frame lost: straight to the safe state, then a reset signal
lost = run(DEFAULT_TABLE, [0, 1])
print(lost.path())

# dwell in S4 for a while before the reset arrives
print(run(DEFAULT_TABLE, [1, 1, 1, 0, 0, 0, 1]).path())

# any walk can be split in two and resumed from the midpoint state
word = [1, 0, 1, 1, 1, 0, 1]
first = run(DEFAULT_TABLE, word[:3])
rest = run(DEFAULT_TABLE, word[3:], start=first.current)
assert rest.current is run(DEFAULT_TABLE, word).current

# a table that drops an entry, and one that can never accept
print(validate(DEFAULT_TABLE.without(StateId.S2, 1)))
stuck = TransitionTable({(s, i): StateId.S4 for s in StateId for i in (0, 1)})
print(validate(stuck))
