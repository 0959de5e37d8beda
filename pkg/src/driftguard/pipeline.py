"""Runtime binding the automaton to the two model stages and the vote.

One cycle walks the automaton from S0:

* S0 gets 1 iff the frame was acquired;
* S1 gets 1 iff some detection reaches the confidence threshold (the most
  confident one is voted on), else 0 and the cycle ends as ``no_detection``;
* S2 gets the classifier's success bit (both symbols lead to S3);
* S3 gets 1 iff detector and classifier report the same class;
* S4 is left according to the :class:`ResetPolicy`.

A failing model call never propagates: a detector failure takes S1 back to
S0 and from there into S4 with reason ``sensor_failure``; a classifier
failure feeds 0 to S2 and S3, also ending in ``sensor_failure``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from . import rng
from .automaton import DEFAULT_TABLE, RunTrace, StateId, TransitionTable, advance, validate_trace
from .dataset import (
    Annotation,
    ClassLabel,
    DatasetManifest,
    ManifestEntry,
    NormalizedBox,
    crop,
    denormalize,
    load_sample,
    parse_annotation,
    resize_64,
)
from .imaging import ImageBuffer, PPMError
from .metrics import iou
from .models import (
    CATEGORIES,
    Classifier,
    ClassPrediction,
    CropContext,
    Detection,
    Detector,
    Emulator,
    Sample,
)

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.25

COUNTER_NAMES = CATEGORIES + ("no_detection", "sensor_failure", "alarms")


@dataclass(frozen=True)
class ResetPolicy:
    """How the controller leaves the safe state.

    ``auto`` resets immediately (S4 -1-> S5); ``manual`` holds S4 until
    :meth:`Controller.reset` is called; ``after_n`` holds for ``n`` frames.
    """

    mode: str = "auto"
    n: int = 1

    def __post_init__(self):
        if self.mode not in ("auto", "manual", "after_n"):
            raise ValueError(f"unknown reset mode {self.mode!r}")
        if self.mode == "after_n" and self.n < 1:
            raise ValueError("after_n needs n >= 1")

    @classmethod
    def parse(cls, text: str) -> "ResetPolicy":
        """``auto``, ``manual`` or ``after_n:<n>``."""
        mode, _, n = text.partition(":")
        if mode == "after_n":
            return cls("after_n", int(n or 1))
        return cls(mode)

    def __str__(self) -> str:
        return f"after_n:{self.n}" if self.mode == "after_n" else self.mode


AUTO = ResetPolicy("auto")


@dataclass(frozen=True)
class Verdict:
    kind: str  # "accepted" | "safe_state" | "no_detection"
    class_id: ClassLabel | None = None
    reason: str | None = None  # "sensor_failure" | "model_disagreement"

    def __str__(self) -> str:
        if self.kind == "accepted":
            return f"accepted({ClassLabel(self.class_id).name})"
        if self.kind == "safe_state":
            return f"safe_state({self.reason})"
        return self.kind


@dataclass
class CycleResult:
    image_id: str
    trace: RunTrace
    verdict: Verdict
    detection: Detection | None = None
    prediction: ClassPrediction | None = None
    truth: ClassLabel | None = None
    detector_ms: float = 0.0
    classifier_ms: float = 0.0
    overhead_ms: float = 0.0
    detection_index: int = 0
    error: str | None = None

    @property
    def drift_alarm(self) -> bool:
        return self.verdict.kind == "safe_state" and self.verdict.reason == "model_disagreement"

    @property
    def category(self) -> str:
        v = self.verdict
        if v.kind == "no_detection":
            return "no_detection"
        if v.kind == "safe_state" and v.reason == "sensor_failure":
            return "sensor_failure"
        return categorize(self.truth, self.detection.class_id, self.prediction.class_id)


def categorize(truth, det, cls) -> str:
    """Joint outcome category of one vote."""
    d_ok = truth is not None and det == truth
    c_ok = truth is not None and cls == truth
    if d_ok and c_ok:
        return "agree_correct"
    if d_ok:
        return "detector_only_correct"
    if c_ok:
        return "classifier_only_correct"
    return "both_wrong_agree" if det == cls else "both_wrong_disagree"


def end_to_end_latency(result: CycleResult) -> float:
    """Detector + classifier + measured pipeline overhead, in ms."""
    return result.detector_ms + result.classifier_ms + result.overhead_ms


def _leave_safe_state(table: TransitionTable, trace: RunTrace, policy: ResetPolicy) -> None:
    if policy.mode == "auto":
        advance(table, trace, 1)


def _match_truth(det: Detection, sample: Sample) -> tuple[int | None, ClassLabel | None]:
    """Index and class of the annotation overlapping ``det`` the most."""
    img = sample.image
    best, best_iou = None, 0.0
    for k, ann in enumerate(sample.annotations):
        try:
            v = iou(det.box, denormalize(ann.box, img.width, img.height))
        except ValueError:
            continue
        if v > best_iou:
            best, best_iou = k, v
    if best is None:
        return None, None
    return best, sample.annotations[best].class_id


def rank_detections(detections: Sequence[Detection], threshold: float) -> list[Detection]:
    """Detections at or above ``threshold``, most confident first (stable)."""
    kept = [d for d in detections if d.confidence >= threshold]
    return sorted(kept, key=lambda d: -d.confidence)


def _first_truth(sample: Sample) -> ClassLabel | None:
    return sample.annotations[0].class_id if sample.annotations else None


def _sensor_failure(sample: Sample, trace: RunTrace, table, policy, error=None, **kw) -> CycleResult:
    _leave_safe_state(table, trace, policy)
    return CycleResult(sample.image_id, trace, Verdict("safe_state", reason="sensor_failure"),
                       truth=kw.pop("truth", _first_truth(sample)), error=error, **kw)


def vote_cycle(sample: Sample, ranked: Sequence[Detection] | None, rank: int,
               classifier: Classifier, table: TransitionTable = DEFAULT_TABLE,
               policy: ResetPolicy = AUTO, detector_ms: float = 0.0,
               detector_error: str | None = None) -> CycleResult:
    """One automaton cycle voting on ``ranked[rank]``.

    ``ranked`` is the thresholded, confidence-sorted detector output for the
    frame (None when the detector failed).
    """
    t0 = time.perf_counter()
    trace = RunTrace()
    if sample.image is None:
        advance(table, trace, 0)
        return _sensor_failure(sample, trace, table, policy, error="image acquisition failed")
    advance(table, trace, 1)

    if ranked is None:
        advance(table, trace, 0)  # S1 -> S0: no usable detector output
        advance(table, trace, 0)  # S0 -> S4: pipeline cannot sense
        return _sensor_failure(sample, trace, table, policy, error=detector_error,
                               overhead_ms=(time.perf_counter() - t0) * 1e3)
    if rank >= len(ranked):
        advance(table, trace, 0)
        return CycleResult(sample.image_id, trace, Verdict("no_detection"), truth=_first_truth(sample),
                           detector_ms=detector_ms, overhead_ms=(time.perf_counter() - t0) * 1e3)

    det = ranked[rank]
    advance(table, trace, 1)
    match_index, truth = _match_truth(det, sample)
    index = match_index if match_index is not None else len(sample.annotations) + rank
    ctx = CropContext(sample.image_id, index, truth)

    pred, error, cls_ms_measured = None, None, 0.0
    try:
        patch = resize_64(crop(sample.image, det.box))
        c0 = time.perf_counter()
        try:
            pred = classifier.classify(patch, ctx)
        finally:
            cls_ms_measured = (time.perf_counter() - c0) * 1e3
    except Exception as exc:  # any model failure ends in the safe state
        error = f"classifier: {exc}"
        log.debug("%s: %s", sample.image_id, error)
    advance(table, trace, 1 if pred is not None else 0)

    base = dict(detection=det, truth=truth, detector_ms=detector_ms, detection_index=rank)
    if pred is None:
        advance(table, trace, 0)
        elapsed = (time.perf_counter() - t0) * 1e3 - cls_ms_measured
        return _sensor_failure(sample, trace, table, policy, error=error, overhead_ms=elapsed, **base)

    agree = pred.class_id == det.class_id
    advance(table, trace, 1 if agree else 0)
    if agree:
        verdict = Verdict("accepted", det.class_id)
    else:
        verdict = Verdict("safe_state", reason="model_disagreement")
        _leave_safe_state(table, trace, policy)
    classifier_ms = pred.latency_ms if pred.latency_ms > 0 else cls_ms_measured
    elapsed = (time.perf_counter() - t0) * 1e3 - cls_ms_measured
    return CycleResult(sample.image_id, trace, verdict, prediction=pred, classifier_ms=classifier_ms,
                       overhead_ms=max(elapsed, 0.0), **base)


def detect_frame(sample: Sample, detector: Detector, threshold: float):
    """Run the first stage; returns ``(ranked or None, latency_ms, error)``."""
    if sample.image is None:
        return None, 0.0, None
    t0 = time.perf_counter()
    try:
        dets = detector.detect(sample)
    except Exception as exc:
        return None, (time.perf_counter() - t0) * 1e3, f"detector: {exc}"
    measured = (time.perf_counter() - t0) * 1e3
    ranked = rank_detections(dets, threshold)
    reported = ranked[0].latency_ms if ranked else 0.0
    return ranked, (reported if reported > 0 else measured), None


def run_cycle(sample: Sample, detector: Detector, classifier: Classifier,
              table: TransitionTable = DEFAULT_TABLE, threshold: float = DEFAULT_THRESHOLD,
              policy: ResetPolicy = AUTO) -> CycleResult:
    """Single-vote cycle on the frame's most confident detection."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    ranked, det_ms, err = detect_frame(sample, detector, threshold)
    return vote_cycle(sample, ranked, 0, classifier, table, policy, det_ms, err)


def frame_cycles(sample: Sample, detector: Detector, classifier: Classifier,
                 table: TransitionTable = DEFAULT_TABLE, threshold: float = DEFAULT_THRESHOLD,
                 policy: ResetPolicy = AUTO, per_detection: bool = True) -> list[CycleResult]:
    """All vote cycles for one frame: one per qualifying detection when
    ``per_detection`` is set, otherwise just the most confident one.

    The detector runs once per frame; its latency is charged to the first
    cycle only.  Voting stops early if a cycle leaves the controller in S4.
    """
    ranked, det_ms, err = detect_frame(sample, detector, threshold)
    n = len(ranked) if (per_detection and ranked) else 1
    out = []
    for k in range(n):
        r = vote_cycle(sample, ranked, k, classifier, table, policy, det_ms if k == 0 else 0.0, err)
        out.append(r)
        if r.trace.current is StateId.S4:
            break
    return out


# ----------------------------------------------------------------------- ledger

@dataclass
class LedgerRow:
    seq: int
    image_id: str
    truth: int | None
    detector: int | None
    classifier: int | None
    verdict: str
    category: str
    votes: int = 1

    @property
    def agreement(self) -> bool | None:
        if self.detector is None or self.classifier is None:
            return None
        return self.detector == self.classifier


def row_from_cycles(seq: int, cycles: Sequence[CycleResult]) -> LedgerRow:
    """Image-level row: the first disagreeing (or failing) vote decides,
    otherwise the first vote."""
    deciding = next((c for c in cycles if c.verdict.kind == "safe_state"), cycles[0])
    d = deciding.detection.class_id if deciding.detection is not None else None
    c = deciding.prediction.class_id if deciding.prediction is not None else None
    return LedgerRow(
        seq, deciding.image_id,
        None if deciding.truth is None else int(deciding.truth),
        None if d is None else int(d),
        None if c is None else int(c),
        str(deciding.verdict), deciding.category, len(cycles),
    )


CSV_HEADER = ["seq", "image_id", "truth_class", "detector_class", "classifier_class",
              "agreement", "verdict", "category", "votes"]


def _opt(v) -> str:
    return "" if v is None else str(v)


def _int_or_none(s: str) -> int | None:
    return None if s == "" else int(s)


@dataclass
class OutcomeLedger:
    rows: list[LedgerRow] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    cycles: list[list[CycleResult]] = field(default_factory=list, compare=False, repr=False)

    @property
    def counters(self) -> dict[str, int]:
        c = {name: 0 for name in COUNTER_NAMES}
        for r in self.rows:
            c[r.category] += 1
        c["alarms"] = c["detector_only_correct"] + c["classifier_only_correct"] + c["both_wrong_disagree"]
        return c

    @property
    def total(self) -> int:
        return len(self.rows)

    def merge(self, other: "OutcomeLedger") -> "OutcomeLedger":
        """Associative, order-independent combination (rows sorted by ``seq``)."""
        pairs = list(zip(self.rows, self.cycles or [None] * len(self.rows)))
        pairs += list(zip(other.rows, other.cycles or [None] * len(other.rows)))
        pairs.sort(key=lambda p: (p[0].seq, p[0].image_id))
        keep_cycles = all(c is not None for _, c in pairs)
        return OutcomeLedger(
            [r for r, _ in pairs],
            sorted(self.errors + other.errors),
            sorted(self.skipped + other.skipped),
            [c for _, c in pairs] if keep_cycles else [],
        )

    def label_pairs(self, source: str) -> list[tuple[int | None, int | None]]:
        """``(truth, prediction)`` per row for ``detector``, ``classifier`` or
        ``hybrid`` (accepted class, None otherwise)."""
        out = []
        for r in self.rows:
            if source == "detector":
                pred = r.detector
            elif source == "classifier":
                pred = r.classifier
            elif source == "hybrid":
                pred = r.detector if r.verdict.startswith("accepted") else None
            else:
                raise ValueError(f"unknown source {source!r}")
            out.append((r.truth, pred))
        return out

    # -- serialisation

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            agree = r.agreement
            w.writerow([r.seq, r.image_id, _opt(r.truth), _opt(r.detector), _opt(r.classifier),
                        "" if agree is None else int(agree), r.verdict, r.category, r.votes])
        return buf.getvalue()

    def aggregate(self) -> dict:
        return {
            "total": self.total,
            "counters": self.counters,
            "errors": list(self.errors),
            "skipped": list(self.skipped),
        }

    def to_json(self) -> str:
        return json.dumps(self.aggregate(), indent=2) + "\n"

    @classmethod
    def from_csv(cls, text: str, aggregate: dict | None = None) -> "OutcomeLedger":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"unexpected ledger header {header}")
        rows = [
            LedgerRow(int(r[0]), r[1], _int_or_none(r[2]), _int_or_none(r[3]), _int_or_none(r[4]),
                      r[6], r[7], int(r[8]))
            for r in reader
        ]
        ledger = cls(rows)
        if aggregate is not None:
            ledger.errors = list(aggregate.get("errors", []))
            ledger.skipped = list(aggregate.get("skipped", []))
            if aggregate.get("counters") and aggregate["counters"] != ledger.counters:
                raise ValueError("ledger JSON counters disagree with CSV rows")
        return ledger

    def save(self, out_dir: str | Path, stem: str = "ledger") -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / f"{stem}.csv").write_text(self.to_csv())
        (out_dir / f"{stem}.json").write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "OutcomeLedger":
        """Load from ``ledger.csv`` (a sibling ``.json`` is used if present)."""
        path = Path(path)
        csv_path = path.with_suffix(".csv")
        json_path = path.with_suffix(".json")
        agg = json.loads(json_path.read_text()) if json_path.exists() else None
        return cls.from_csv(csv_path.read_text(), agg)


# ----------------------------------------------------------------- controllers

@dataclass
class StreamConfig:
    threshold: float = DEFAULT_THRESHOLD
    reset_policy: ResetPolicy = AUTO
    per_detection_mode: bool = True
    seed: int = 0
    table: TransitionTable = field(default=DEFAULT_TABLE, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")


class Controller:
    """Stateful single-sensor controller.

    Keeps the automaton state between frames and a full trace of every step
    taken, including S5 -> S0 returns and dwell steps while held in S4.
    """

    def __init__(self, detector: Detector, classifier: Classifier, config: StreamConfig | None = None):
        self.detector = detector
        self.classifier = classifier
        self.config = config or StreamConfig()
        self.trace = RunTrace()
        self._held = 0

    @property
    def state(self) -> StateId:
        return self.trace.current

    def reset(self) -> None:
        """External reset signal: S4 -1-> S5."""
        if self.state is StateId.S4:
            advance(self.config.table, self.trace, 1)
            self._held = 0

    def process(self, sample: Sample) -> list[CycleResult] | None:
        """Handle one frame; returns its vote cycles, or None if the frame was
        dropped because the controller is holding the safe state."""
        table, policy = self.config.table, self.config.reset_policy
        if self.state is StateId.S4:
            if policy.mode == "after_n" and self._held >= policy.n:
                self.reset()
            else:
                advance(table, self.trace, 0)
                self._held += 1
                return None
        if self.state is StateId.S5:
            advance(table, self.trace, 1)
        cycles = frame_cycles(sample, self.detector, self.classifier, table,
                              self.config.threshold, policy, self.config.per_detection_mode)
        for c in cycles:
            if self.state is StateId.S5:
                advance(table, self.trace, 1)
            self.trace.steps.extend(c.trace.steps)
            self.trace.current = c.trace.current
        if self.state is StateId.S4:
            self._held = 0
        return cycles


def load_frame(manifest: DatasetManifest, entry: ManifestEntry) -> tuple[Sample, str | None]:
    """Read an entry as a frame; unreadable images become acquisition failures."""
    stem = entry.stem
    try:
        img, anns = load_sample(manifest, entry)
    except (OSError, PPMError, ValueError) as exc:
        anns: list[Annotation] = []
        try:
            anns = parse_annotation(manifest.resolve(entry.labels).read_text())
        except (OSError, ValueError):
            pass
        return Sample(stem, None, anns), f"{entry.image}: {exc}"
    return Sample(stem, img, anns), None


def run_samples(samples: Iterable[tuple[Sample, str | None]], detector: Detector, classifier: Classifier,
                config: StreamConfig | None = None, start_seq: int = 0) -> OutcomeLedger:
    ctl = Controller(detector, classifier, config)
    ledger = OutcomeLedger()
    for k, (sample, error) in enumerate(samples, start=start_seq):
        if error:
            ledger.errors.append(error)
        cycles = ctl.process(sample)
        if cycles is None:
            ledger.skipped.append(sample.image_id)
            continue
        ledger.rows.append(row_from_cycles(k, cycles))
        ledger.cycles.append(cycles)
    return ledger


def run_stream(manifest: DatasetManifest, split: str, detector: Detector, classifier: Classifier,
               config: StreamConfig | None = None, workers: int = 1) -> OutcomeLedger:
    """Evaluate every entry of ``split``; per-image I/O errors are recorded
    and processing continues.

    With ``workers > 1`` the entries are sharded across independent
    controllers; this is only allowed under the auto reset policy, where it
    gives the same ledger as a single worker.
    """
    config = config or StreamConfig()
    entries = manifest.select(split)
    if workers <= 1 or len(entries) <= 1:
        ledger = run_samples((load_frame(manifest, e) for e in entries), detector, classifier, config)
        ledger.errors.sort()
        return ledger
    if config.reset_policy.mode != "auto":
        raise ValueError("sharded evaluation requires the auto reset policy")

    size = -(-len(entries) // workers)
    shards = [(i, entries[i:i + size]) for i in range(0, len(entries), size)]

    def work(shard):
        start, chunk = shard
        return run_samples((load_frame(manifest, e) for e in chunk), detector, classifier, config, start)

    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(work, shards))
    ledger = OutcomeLedger()
    for part in parts:
        ledger = ledger.merge(part)
    return ledger


def check_traces(ledger: OutcomeLedger, table: TransitionTable = DEFAULT_TABLE) -> list[str]:
    """Re-validate every recorded cycle trace against ``table``."""
    problems = []
    for cycles in ledger.cycles:
        for c in cycles:
            problems += [f"{c.image_id}: {p}" for p in validate_trace(table, c.trace)]
    return problems


SIM_SIZE = 64
SIM_BOX = (0.5, 0.5, 0.5, 0.5)


def synthetic_samples(n: int, seed: int = 0):
    """``n`` in-memory frames, each one mid-grey raster with a single centred
    object whose class is drawn uniformly."""
    img = ImageBuffer.solid(SIM_SIZE, SIM_SIZE, (128, 128, 128))
    box = NormalizedBox(*SIM_BOX)
    for k in range(n):
        stream = rng.SplitMix64(rng.derive_seed(seed, "truth", k))
        truth = ClassLabel(stream.choice_index(len(ClassLabel)))
        yield Sample(f"sim{k:06d}", img, [Annotation(truth, box)]), None


def simulate(profile, n: int, seed: int | None = None, config: StreamConfig | None = None) -> OutcomeLedger:
    """Run ``n`` synthetic frames through the pipeline with emulated models."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seed = profile.seed if seed is None else seed
    emu = Emulator(profile, seed)
    return run_samples(synthetic_samples(n, seed), emu.detector, emu.classifier, config)
