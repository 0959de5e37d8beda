"""
An emulated evaluation on 600 drifted frames
============================================

No networks are trained here. The emulator draws one joint outcome per
frame (both right, one right, both wrong) from a fitted profile, and the
pipeline turns disagreements into safe-state alarms.
"""

from driftguard.metrics import reproduce_tables, score_classification
from driftguard.models import SPLIT_PRESERVING_COUNTS, default_profile, fit_profile
from driftguard.pipeline import end_to_end_latency, simulate

profile = default_profile(seed=0)
for name, p in profile.probabilities.items():
    print(f"{name:26s} {p:.4f}")

# what the fitted counts reproduce, and what they cannot
print("matches:", profile.metadata["matches"])
print("misses: ", profile.metadata["misses"])

ledger = simulate(profile, 600)
print(ledger.counters)

# the classifier alone vs the voted pipeline
print("classifier accuracy", round(score_classification(ledger, "classifier").accuracy, 4))
print("hybrid accuracy    ", round(score_classification(ledger, "hybrid").accuracy, 4))

first = [c[0] for c in ledger.cycles]
print("mean latency ms", round(sum(end_to_end_latency(c) for c in first) / len(first), 2))

text, doc = reproduce_tables(ledger)
print(text)

# the alternative completion keeps the stage-level disagreement counts but
# its alarm total comes out higher
alt = fit_profile(SPLIT_PRESERVING_COUNTS, 600)
print("alternative profile alarms per 600:", round(alt.expected_counts(600)["alarms"], 1))
