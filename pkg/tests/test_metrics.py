import json
import random

import pytest
from hypothesis import given, strategies as st

from driftguard.dataset import BoundingBox
from driftguard.metrics import (
    ConfusionMatrix,
    ScoredBox,
    average_precision,
    fmt,
    iou,
    reproduce_tables,
    score_classification,
    score_detection,
)
from driftguard.models import default_profile
from driftguard.pipeline import LedgerRow, OutcomeLedger, simulate


def ledger_from_counts(agree, det_only, cls_only, bwa, bwd, no_det=0, fail=0):
    """Rows realising the given joint counts (truth class 0 throughout)."""
    spec = [("agree_correct", 0, 0)] * agree + [("detector_only_correct", 0, 1)] * det_only
    spec += [("classifier_only_correct", 1, 0)] * cls_only + [("both_wrong_agree", 2, 2)] * bwa
    spec += [("both_wrong_disagree", 2, 3)] * bwd
    rows = []
    for k, (cat, d, c) in enumerate(spec):
        verdict = "accepted(round_30)" if d == c else "safe_state(model_disagreement)"
        rows.append(LedgerRow(k, f"i{k}", 0, d, c, verdict, cat))
    n = len(rows)
    rows += [LedgerRow(n + k, f"n{k}", 0, None, None, "no_detection", "no_detection") for k in range(no_det)]
    n = len(rows)
    rows += [LedgerRow(n + k, f"s{k}", 0, None, None, "safe_state(sensor_failure)", "sensor_failure")
             for k in range(fail)]
    return OutcomeLedger(rows)


def test_iou_cases():
    a = BoundingBox(0, 0, 2, 2)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(5, 5, 6, 6)) == 0.0
    assert iou(a, BoundingBox(2, 0, 4, 2)) == 0.0
    assert iou(a, BoundingBox(1, 1, 3, 3)) == pytest.approx(1 / 7)


@pytest.mark.parametrize("x,text", [(583 / 600, "0.9716"), (571 / 600, "0.9516"), (1.0, "1.0000"),
                                    (2 / 3, "0.6666"), (None, "n/a")])
def test_fmt_truncates_to_four_places(x, text):
    assert fmt(x) == text


def test_accuracy_583_of_600():
    pairs = [(0, 0)] * 583 + [(0, 1)] * 17
    report = score_classification(pairs)
    assert report.accuracy == 583 / 600
    assert fmt(report.accuracy) == "0.9716"


def test_perfect_predictions():
    pairs = [(k % 7, k % 7) for k in range(70)]
    r = score_classification(pairs)
    assert (r.accuracy, r.precision, r.recall, r.f1) == (1.0, 1.0, 1.0, 1.0)


def test_three_sample_hand_case():
    r = score_classification([(0, 0), (1, 1), (1, 0)])
    assert r.accuracy == pytest.approx(2 / 3)
    # class 0: tp 1, predicted 2, support 1 -> P 1/2, R 1, F1 2/3
    # class 1: tp 1, predicted 1, support 2 -> P 1,   R 1/2, F1 2/3
    assert r.per_class[0].precision == pytest.approx(0.5) and r.per_class[0].recall == 1.0
    assert r.per_class[1].precision == 1.0 and r.per_class[1].recall == pytest.approx(0.5)
    assert r.precision == pytest.approx(0.75)
    assert r.recall == pytest.approx(0.75)
    assert r.f1 == pytest.approx(2 / 3)


def test_absent_classes_excluded_from_macro_average():
    r = score_classification([(0, 0), (0, 3)])
    assert set(r.per_class) == {0}
    # class 3 was predicted but never true, so it does not enter the average
    assert r.precision == 1.0 and r.recall == 0.5


def test_misses_count_against_accuracy():
    r = score_classification([(0, 0), (0, None)])
    assert r.accuracy == 0.5 and r.recall == 0.5 and r.precision == 1.0


def test_empty_input_raises():
    with pytest.raises(ValueError):
        score_classification([])


pairs_strategy = st.lists(st.tuples(st.integers(0, 6), st.one_of(st.none(), st.integers(0, 6))), min_size=1, max_size=80)


@given(pairs_strategy)
def test_accuracy_is_trace_over_total(pairs):
    r = score_classification(pairs)
    m = ConfusionMatrix.from_pairs(pairs)
    assert r.accuracy == m.correct / m.total
    assert 0 <= r.precision <= 1 and 0 <= r.recall <= 1 and 0 <= r.f1 <= 1


@given(pairs_strategy)
def test_macro_f1_between_per_class_extremes(pairs):
    r = score_classification(pairs)
    f1s = [s.f1 for s in r.per_class.values()]
    assert min(f1s) - 1e-12 <= r.f1 <= max(f1s) + 1e-12


@given(pairs_strategy, pairs_strategy)
def test_confusion_merge_is_addition(a, b):
    assert (ConfusionMatrix.from_pairs(a) + ConfusionMatrix.from_pairs(b)).to_list() == \
        ConfusionMatrix.from_pairs(a + b).to_list()


def test_ledger_and_pairs_paths_agree():
    ledger = simulate(default_profile(), 300, seed=1)
    for source in ("detector", "classifier", "hybrid"):
        a = score_classification(ledger, source).to_dict()
        b = score_classification(ledger.label_pairs(source)).to_dict()
        assert a == b


def brute_force_ap(flags, n_truth):
    """AP as the mean over each truth's recall step of the best precision at
    any cutoff reaching that recall."""
    cutoffs = []
    for k in range(1, len(flags) + 1):
        tp = sum(flags[:k])
        cutoffs.append((tp / n_truth, tp / k))
    total = 0.0
    for level in range(1, n_truth + 1):
        reach = [p for r, p in cutoffs if r >= level / n_truth - 1e-12]
        total += max(reach) if reach else 0.0
    return total / n_truth


def test_average_precision_five_detections_three_truths():
    flags = [True, False, True, False, True]
    assert average_precision(flags, 3) == pytest.approx(34 / 45)
    assert average_precision(flags, 3) == pytest.approx(brute_force_ap(flags, 3))


@given(st.lists(st.booleans(), max_size=30), st.integers(1, 10))
def test_average_precision_matches_brute_force(flags, extra):
    n_truth = sum(flags) + extra - 1 if sum(flags) + extra - 1 > 0 else 1
    assert average_precision(flags, n_truth) == pytest.approx(brute_force_ap(flags, n_truth))


def truth(image, cls, box):
    return ScoredBox(image, cls, BoundingBox(*box))


def test_perfect_detector_map_one():
    truths = [truth(f"i{k}", k % 7, (k, k, k + 10, k + 10)) for k in range(14)]
    dets = [ScoredBox(t.image, t.class_id, t.box, 1.0) for t in truths]
    assert score_detection(dets, truths).map50 == 1.0


def test_low_iou_detection_scores_zero():
    t = truth("a", 0, (0, 0, 10, 10))
    # shifted box: intersection 60, union 140 -> IoU ~0.43
    d = ScoredBox("a", 0, BoundingBox(4, 0, 14, 10), 0.9)
    assert 0.4 <= iou(d.box, t.box) < 0.5
    assert score_detection([d], [t]).map50 == 0.0


def test_empty_detections_give_zero_ap():
    r = score_detection([], [truth("a", 2, (0, 0, 5, 5))])
    assert r.map50 == 0.0 and r.per_class[2].ap == 0.0


def test_constructed_map_scenario():
    truths = [truth("a", 0, (0, 0, 10, 10)), truth("a", 0, (20, 20, 30, 30)), truth("b", 0, (0, 0, 10, 10))]
    dets = [
        ScoredBox("a", 0, BoundingBox(0, 0, 10, 10), 0.95),    # hit
        ScoredBox("a", 0, BoundingBox(1, 0, 11, 10), 0.90),    # duplicate of a matched truth: miss
        ScoredBox("b", 0, BoundingBox(0, 1, 10, 11), 0.80),    # hit (IoU 0.82)
        ScoredBox("b", 0, BoundingBox(50, 50, 60, 60), 0.70),  # background: miss
        ScoredBox("a", 0, BoundingBox(20, 21, 30, 31), 0.60),  # hit
    ]
    assert score_detection(dets, truths).map50 == pytest.approx(34 / 45)


def test_map_permutation_invariant():
    gen = random.Random(3)
    truths, dets = [], []
    for k in range(30):
        img, cls = f"i{k % 6}", k % 3
        x = gen.randint(0, 50)
        truths.append(truth(img, cls, (x, x, x + 10, x + 10)))
        for _ in range(2):
            dx = gen.randint(-4, 4)
            conf = gen.choice([0.3, 0.5, 0.9])  # many ties on purpose
            dets.append(ScoredBox(img, cls, BoundingBox(x + dx, x, x + dx + 10, x + 10), conf))
    base = score_detection(dets, truths).map50
    for seed in range(5):
        d2, t2 = dets[:], truths[:]
        random.Random(seed).shuffle(d2)
        random.Random(seed + 100).shuffle(t2)
        assert score_detection(d2, t2).map50 == base


def test_reproduce_tables_oracle_all_ones():
    ledger = ledger_from_counts(600, 0, 0, 0, 0)
    text, doc = reproduce_tables(ledger, ledger)
    assert doc["tables"]["hybrid"]["drift"]["accuracy"] == 1.0
    for name in ("detector", "classifier"):
        for col in ("standard", "drift"):
            t = doc["tables"][name][col]
            assert (t["accuracy"], t["precision"], t["recall"], t["f1"]) == (1.0, 1.0, 1.0, 1.0)
    assert "1.0000" in text


def test_reproduce_tables_flags_alarm_deviation():
    ledger = ledger_from_counts(466, 15, 105, 2, 12)
    text, doc = reproduce_tables(ledger)
    assert doc["joint"]["alarms"] == 132
    assert doc["targets"]["alarms"]["target"] == 120
    assert "alarms" in doc["deviating"]
    assert "classifier_correct" in doc["exact"]
    assert "detector_correct" in doc["deviating"]
    line = next(l for l in text.splitlines() if l.strip().startswith("alarms") and "120" in l)
    assert "132" in line and "off by +12" in line


def test_reproduce_tables_json_is_serialisable():
    _, doc = reproduce_tables(simulate(default_profile(), 100, seed=0))
    json.dumps(doc)
    assert set(doc["hybrid_views"]) == {"primary", "decision_quality"}


def test_hybrid_views_differ_only_by_alarm_handling():
    ledger = ledger_from_counts(478, 10, 93, 2, 17)
    _, doc = reproduce_tables(ledger)
    prim, dq = doc["hybrid_views"]["primary"], doc["hybrid_views"]["decision_quality"]
    assert prim["accuracy"] == pytest.approx(478 / 600)
    assert dq["accuracy"] == pytest.approx(478 / 480)
