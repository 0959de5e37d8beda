"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the verdict lines are
written straight to the terminal so they show up even when output is
captured.
"""

import itertools
import math
import time

import numpy as np
import pytest
from scipy import stats

from conftest import write_synthetic_dataset
from driftguard.automaton import DEFAULT_TABLE, StateId, run, step, validate
from driftguard.dataset import (
    BoundingBox,
    DatasetManifest,
    ManifestEntry,
    NormalizedBox,
    crop,
    denormalize,
    pair_stems,
    relpath,
    split,
)
from driftguard.imaging import (
    DriftSpec,
    ImageBuffer,
    add_gaussian_noise,
    adjust_brightness,
    apply_drift,
    read_ppm,
    tilt,
    write_ppm,
)
from driftguard.metrics import ScoredBox, average_precision, fmt, iou, reproduce_tables, score_classification, score_detection
from driftguard.models import (
    ClassifierRecord,
    DetectorRecord,
    OracleClassifier,
    OracleDetector,
    ReplayDetection,
    default_profile,
    read_classifier_replay,
    read_detector_replay,
    write_classifier_replay,
    write_detector_replay,
)
from driftguard.pipeline import check_traces, end_to_end_latency, run_stream, simulate


@pytest.fixture
def verdict(request, capsys):
    """``verdict(ok, detail)`` prints one PASS/FAIL line and asserts ``ok``."""
    start = time.perf_counter()

    def emit(ok: bool, detail: str, limit_s: float):
        elapsed = time.perf_counter() - start
        ok = ok and elapsed < limit_s
        line = f"[{'PASS' if ok else 'FAIL'}] {request.node.name}: {detail} ({elapsed:.2f}s < {limit_s:g}s)"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return emit


# 1 -------------------------------------------------------------------------

REFERENCE_DELTA = {
    ("S0", 0): "S4", ("S0", 1): "S1",
    ("S1", 0): "S0", ("S1", 1): "S2",
    ("S2", 0): "S3", ("S2", 1): "S3",
    ("S3", 0): "S4", ("S3", 1): "S5",
    ("S4", 0): "S4", ("S4", 1): "S5",
    ("S5", 0): "S0", ("S5", 1): "S0",
}


def test_criterion_1_automaton_fidelity(verdict):
    problems = []
    if len(DEFAULT_TABLE.entries) != 12:
        problems.append("table does not have 12 entries")
    for (src, sym), dst in REFERENCE_DELTA.items():
        if DEFAULT_TABLE[(StateId(src), sym)] is not StateId(dst):
            problems.append(f"delta({src},{sym}) != {dst}")
    if not validate(DEFAULT_TABLE).ok:
        problems.append(str(validate(DEFAULT_TABLE)))
    # totality and determinism over every (state, symbol)
    for s, i in itertools.product(StateId, (0, 1)):
        if step(DEFAULT_TABLE, s, i) is not step(DEFAULT_TABLE, s, i):
            problems.append(f"nondeterministic at ({s.value},{i})")
    # fold composition over all input words up to length 8, split at every point
    for n in range(9):
        for word in itertools.product((0, 1), repeat=n):
            whole = run(DEFAULT_TABLE, word)
            for cut in range(n + 1):
                head = run(DEFAULT_TABLE, word[:cut])
                if run(DEFAULT_TABLE, word[cut:], start=head.current).current is not whole.current:
                    problems.append(f"fold fails on {word} at {cut}")
    # every state can reach S0 within three steps
    for s in StateId:
        if s is StateId.S0:
            continue
        reach = any(StateId.S0 in run(DEFAULT_TABLE, w, start=s).states()
                    for k in (1, 2, 3) for w in itertools.product((0, 1), repeat=k))
        if not reach:
            problems.append(f"{s.value} cannot return to S0 in 3 steps")
    broken = validate(DEFAULT_TABLE.without(StateId.S3, 1))
    if broken.ok:
        problems.append("validator accepted a table with a missing entry")
    verdict(not problems, "; ".join(problems) or "12 entries match, total, deterministic, fold-compositional, live", 1.0)


# 2 -------------------------------------------------------------------------

def brute_force_crop(img: np.ndarray, box: NormalizedBox) -> np.ndarray:
    """Pixels whose unit square overlaps the clamped continuous box."""
    h, w, _ = img.shape
    x1 = min(max((box.cx - box.w / 2) * w, 0), w)
    x2 = min(max((box.cx + box.w / 2) * w, 0), w)
    y1 = min(max((box.cy - box.h / 2) * h, 0), h)
    y2 = min(max((box.cy + box.h / 2) * h, 0), h)
    rows = []
    for y in range(h):
        if not (y + 1 > y1 and y < y2):
            continue
        row = [img[y, x] for x in range(w) if x + 1 > x1 and x < x2]
        rows.append(row)
    return np.array(rows, dtype=np.uint8)


def random_instances(n: int, seed: int):
    gen = np.random.default_rng(seed)
    for k in range(n):
        w, h = (int(v) for v in gen.integers(1, 48, size=2))
        img = gen.integers(0, 256, size=(h, w, 3), dtype=np.uint8)
        if k % 5 == 0:
            # boxes hanging over an edge or corner, forcing the clamp
            cx, cy = gen.choice([0.0, 0.02, 0.98, 1.0]), gen.uniform(0, 1)
            if k % 10 == 0:
                cx, cy = cy, cx
            bw, bh = gen.uniform(0.05, 1.0, size=2)
        else:
            bw, bh = gen.uniform(0.01, 1.0, size=2)
            cx, cy = gen.uniform(0, 1, size=2)
        yield img, NormalizedBox(float(cx), float(cy), float(bw), float(bh))


def test_criterion_2_crop_oracle_equivalence(verdict):
    mismatches, clamped = [], 0
    for k, (px, box) in enumerate(random_instances(1000, seed=20240)):
        h, w, _ = px.shape
        raw = ((box.cx - box.w / 2) * w, (box.cx + box.w / 2) * w)
        clamped += raw[0] < 0 or raw[1] > w
        got = crop(ImageBuffer(px), denormalize(box, w, h)).pixels
        want = brute_force_crop(px, box)
        if got.shape != want.shape or not np.array_equal(got, want):
            mismatches.append(k)
    ok = not mismatches and clamped >= 100
    verdict(ok, f"1000 instances, {clamped} clamped, mismatches={mismatches[:5]}", 10.0)


# 3 -------------------------------------------------------------------------

def test_criterion_3_table_marginals(verdict):
    profile = default_profile(seed=0)
    ledger = simulate(profile, 600, seed=0)
    c = ledger.counters
    n = ledger.total
    cls_acc = (c["agree_correct"] + c["classifier_only_correct"]) / n
    p = 571 / 600
    cls_ok = abs(cls_acc - p) <= 3 * math.sqrt(p * (1 - p) / n)
    q = 120 / 600
    alarm_ok = abs(c["alarms"] - 120) <= 3 * math.sqrt(n * q * (1 - q))
    # two-sided Poisson tail at mean 2
    k = c["both_wrong_agree"]
    tail = min(1.0, 2 * min(stats.poisson.cdf(k, 2.0), stats.poisson.sf(k - 1, 2.0)))
    bwa_ok = tail > 0.001
    # the report must say which reference figures this profile meets
    _, doc = reproduce_tables(ledger)
    meta = profile.metadata
    flags_ok = (
        set(meta["matches"]) >= {"classifier_correct", "alarms", "both_wrong_agree", "detector_correct"}
        and "hybrid_correct" in meta["misses"]
        and set(doc["exact"]) | set(doc["deviating"]) == set(doc["targets"])
    )
    ok = cls_ok and alarm_ok and bwa_ok and flags_ok
    detail = (f"classifier acc {fmt(cls_acc)} vs 0.9516, alarms {c['alarms']} vs 120, "
              f"agree-wrong {k} (p={tail:.3f}); profile matches {meta['matches']}, misses {meta['misses']}")
    verdict(ok, detail, 5.0)


# 4 -------------------------------------------------------------------------

def test_criterion_4_metric_arithmetic(verdict):
    report = score_classification([(0, 0)] * 583 + [(0, 1)] * 17)
    acc_ok = fmt(report.accuracy) == "0.9716" and report.accuracy == 583 / 600
    iou_ok = (iou(BoundingBox(0, 0, 2, 2), BoundingBox(1, 1, 3, 3)) == 1 / 7
              and iou(BoundingBox(0, 0, 2, 2), BoundingBox(0, 0, 2, 2)) == 1.0
              and iou(BoundingBox(0, 0, 1, 1), BoundingBox(2, 2, 3, 3)) == 0.0)
    # precision 1, 2/3, 3/5 at the three recall steps
    ap = average_precision([True, False, True, False, True], 3)
    ap_ok = math.isclose(ap, 34 / 45, rel_tol=0, abs_tol=1e-15)
    t = ScoredBox("a", 0, BoundingBox(0, 0, 10, 10))
    low = score_detection([ScoredBox("a", 0, BoundingBox(4, 0, 14, 10), 0.9)], [t]).map50
    ok = acc_ok and iou_ok and ap_ok and low == 0.0
    verdict(ok, f"accuracy {fmt(report.accuracy)}, IoU 1/7, AP {ap:.6f} (34/45={34 / 45:.6f})", 1.0)


# 5 -------------------------------------------------------------------------

def test_criterion_5_latency_additivity(verdict):
    ledger = simulate(default_profile(seed=0), 600, seed=0)
    cycles = [c for cs in ledger.cycles for c in cs]
    stage_sum = np.mean([c.detector_ms + c.classifier_ms for c in cycles])
    det, cls = np.mean([c.detector_ms for c in cycles]), np.mean([c.classifier_ms for c in cycles])
    hybrid = np.mean([end_to_end_latency(c) for c in cycles])
    ok = (abs(stage_sum - 30.74) <= 0.1 * 30.74 and abs(hybrid - 30.74) <= 0.1 * 30.74
          and abs(det - 2.4) <= 0.24 and abs(cls - 28.34) <= 2.834)
    verdict(ok, f"detector {det:.2f} + classifier {cls:.2f} = {stage_sum:.2f} ms; "
                f"hybrid with measured overhead {hybrid:.2f} ms vs 30.74", 5.0)


# 6 -------------------------------------------------------------------------

def test_criterion_6_oracle_end_to_end(tmp_path, verdict):
    images, labels = write_synthetic_dataset(tmp_path / "src", 100, seed=6, size=(64, 48), max_objects=3)
    pairs, problems = pair_stems(images, labels)
    entries = [ManifestEntry(relpath(i, tmp_path), relpath(l, tmp_path), "train") for i, l in pairs]
    manifest = split(entries, seed=0, root=tmp_path)
    ledger = run_stream(manifest, "all", OracleDetector(), OracleClassifier())
    c = ledger.counters
    traces = {c_.trace.path() for cs in ledger.cycles for c_ in cs}
    safe = sum(c_.verdict.kind == "safe_state" for cs in ledger.cycles for c_ in cs)
    acc = score_classification(ledger, "hybrid").accuracy
    ok = (not problems and ledger.total == 100 and c["alarms"] == 0 and safe == 0
          and acc == 1.0 and traces == {"S0→S1→S2→S3→S5"} and check_traces(ledger) == [])
    verdict(ok, f"100 images, {sum(len(cs) for cs in ledger.cycles)} votes, alarms {c['alarms']}, "
                f"safe states {safe}, accuracy {fmt(acc)}, traces {sorted(traces)}", 10.0)


# 7 -------------------------------------------------------------------------

def test_criterion_7_drift_transforms(verdict):
    gen = np.random.default_rng(7)
    img = ImageBuffer(gen.integers(0, 256, size=(40, 50, 3), dtype=np.uint8))
    specs = [DriftSpec("gaussian_noise", sigma=10, seed=3), DriftSpec("brightness", gain=1.7, seed=3),
             DriftSpec("tilt", angle=23.5, seed=3)]
    reruns_ok = all(write_ppm(apply_drift(img, s)) == write_ppm(apply_drift(img, s)) for s in specs)
    grey = ImageBuffer.solid(256, 256, (128, 128, 128))
    diff = add_gaussian_noise(grey, 10, 0).pixels.astype(float) - 128
    std = float(diff.std(ddof=1))
    std_ok = abs(std - 10) <= 0.5
    ident_ok = (adjust_brightness(img, 1.0) == img and tilt(img, 0) == img
                and add_gaussian_noise(img, 0, 1) == img)
    px = img.pixels[:2, :2]
    half_turn_ok = tilt(ImageBuffer(px), 180).pixels.tolist() == px[::-1, ::-1].tolist()
    ok = reruns_ok and std_ok and ident_ok and half_turn_ok
    verdict(ok, f"reruns identical={reruns_ok}, noise std {std:.3f}, identities={ident_ok}, "
                f"180-degree 2x2 exact={half_turn_ok}", 5.0)


# 8 -------------------------------------------------------------------------

def test_criterion_8_format_round_trips(verdict):
    gen = np.random.default_rng(8)
    ppm_ok = True
    for w, h in [(1, 1), (3, 7), (64, 64), (33, 17)]:
        data = write_ppm(ImageBuffer(gen.integers(0, 256, size=(h, w, 3), dtype=np.uint8)))
        ppm_ok &= write_ppm(read_ppm(data)) == data
    entries = [ManifestEntry(f"images/i{k}.ppm", f"labels/i{k}.txt", "train") for k in range(20)]
    entries += [ManifestEntry("drift/d.ppm", "drift/d.txt", "test", DriftSpec("tilt", angle=-12.5, seed=9))]
    text = split(entries, seed=2).dumps()
    manifest_ok = DatasetManifest.loads(text).dumps() == text
    det = write_detector_replay([
        DetectorRecord("a", (ReplayDetection(3, 0.91, NormalizedBox(0.5, 0.5, 0.25, 0.5)),
                             ReplayDetection(1, 0.123456789, NormalizedBox(0.1, 0.9, 0.2, 0.2), 2.5))),
        DetectorRecord("b", ()),
    ])
    cls = write_classifier_replay([ClassifierRecord("crops/a_0_square_30.ppm", 3, 0.91),
                                   ClassifierRecord("a_1", 1, 0.5, 28.34)])
    replay_ok = (write_detector_replay(read_detector_replay(det)) == det
                 and write_classifier_replay(read_classifier_replay(cls)) == cls)
    ok = ppm_ok and manifest_ok and replay_ok
    verdict(ok, f"ppm={ppm_ok}, manifest={manifest_ok}, replay={replay_ok}", 1.0)
