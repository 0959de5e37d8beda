"""Command-line entry point.

Exit codes: 0 success, 1 internal error, 2 input or validation error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import rng
from .automaton import DEFAULT_TABLE, TransitionTable
from .dataset import (
    Annotation,
    AnnotationError,
    DatasetManifest,
    ManifestEntry,
    ManifestError,
    audit_classifier_dataset,
    build_classifier_dataset,
    denormalize,
    format_annotations,
    normalize,
    pair_stems,
    parse_annotation,
    pixel_extent,
    relpath,
    split,
)
from .imaging import DegenerateBoxError, DriftSpec, PPMError, apply_drift, load_ppm, save_ppm, transform_bbox
from .metrics import ScoredBox, dumps_report, reproduce_tables, score_detection
from .models import (
    Emulator,
    EmulatorProfile,
    ErrorInjection,
    OracleClassifier,
    OracleDetector,
    ReplayClassifier,
    ReplayDetector,
    default_profile,
)
from .pipeline import (
    OutcomeLedger,
    ResetPolicy,
    StreamConfig,
    check_traces,
    end_to_end_latency,
    run_stream,
    simulate,
)

log = logging.getLogger("driftguard")

DEFAULT_SEED = 0
CONFIG_KEYS = {"threshold", "reset_policy", "per_detection_mode", "seed", "table"}


class UsageError(Exception):
    """Bad input; reported and mapped to exit code 2."""


def resolve_seed(args, config: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in config:
        return int(config["seed"])
    env = os.environ.get("DRIFTGUARD_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"DRIFTGUARD_SEED must be an integer, got {env!r}") from None
    return DEFAULT_SEED


def load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    unknown = set(doc) - CONFIG_KEYS
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return doc


def stream_config(args, config: dict) -> StreamConfig:
    threshold = args.threshold if args.threshold is not None else config.get("threshold", 0.25)
    table = DEFAULT_TABLE
    if config.get("table"):
        try:
            table = TransitionTable.load(config["table"])
        except (OSError, ValueError) as exc:
            raise UsageError(f"transition table: {exc}") from None
    try:
        return StreamConfig(
            threshold=float(threshold),
            reset_policy=ResetPolicy.parse(str(config.get("reset_policy", "auto"))),
            per_detection_mode=bool(config.get("per_detection_mode", True)),
            seed=resolve_seed(args, config),
            table=table,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def parse_ratios(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise UsageError(f"--ratios expects a,b,c, got {text!r}") from None
    if len(parts) != 3:
        raise UsageError(f"--ratios expects three values, got {text!r}")
    return parts


def load_manifest(path: str) -> DatasetManifest:
    try:
        return DatasetManifest.load(path)
    except (OSError, ManifestError) as exc:
        raise UsageError(f"manifest {path}: {exc}") from None


def load_profile(spec: str | None, seed: int) -> EmulatorProfile:
    if spec in (None, "default"):
        return default_profile(seed)
    try:
        return EmulatorProfile.load(spec)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"profile {spec}: {exc}") from None


# ----------------------------------------------------------------- commands

def cmd_prepare(args) -> int:
    if not Path(args.images).is_dir() or not Path(args.labels).is_dir():
        raise UsageError("--images and --labels must be existing directories")
    ratios = parse_ratios(args.ratios)
    seed = resolve_seed(args, {})
    out = Path(args.out)
    pairs, problems = pair_stems(args.images, args.labels)
    for _, lab in pairs:
        try:
            parse_annotation(lab.read_text())
        except (OSError, AnnotationError) as exc:
            problems.append(f"{lab}: {exc}")
    for img, _ in pairs:
        try:
            load_ppm(img)
        except (OSError, PPMError) as exc:
            problems.append(f"{img}: {exc}")
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return 2
    if not pairs:
        raise UsageError("no image/label pairs found")
    out.mkdir(parents=True, exist_ok=True)
    entries = [ManifestEntry(relpath(i, out), relpath(lab, out), "train") for i, lab in pairs]
    try:
        manifest = split(entries, ratios, seed, root=out)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest.save(out / "manifest.json")
    report = build_classifier_dataset(manifest, out / "crops", workers=args.workers)
    violations = audit_classifier_dataset(manifest, out / "crops")
    c = manifest.counts
    print(f"manifest: {out / 'manifest.json'}  train={c['train']} test={c['test']} val={c['val']}")
    print(f"crops: {len(report.records)} written, {len(report.errors)} errors, "
          f"audit {len(violations)} violations")
    for e in report.errors + violations:
        print(e, file=sys.stderr)
    return 2 if report.errors or violations else 0


def _drifted_annotations(anns: list[Annotation], spec: DriftSpec, width: int, height: int) -> list[Annotation]:
    if spec.kind != "tilt":
        return list(anns)
    out = []
    for a in anns:
        box = transform_bbox(pixel_extent(a.box, width, height), spec.angle, width, height)
        nb = normalize(box, width, height)
        out.append(Annotation(a.class_id, nb))
    return out


def cmd_augment(args) -> int:
    manifest = load_manifest(args.manifest)
    seed = resolve_seed(args, {})
    try:
        specs = [DriftSpec.parse(text, default_seed=seed) for text in (args.drift or [])]
    except ValueError as exc:
        raise UsageError(f"--drift: {exc}") from None
    out_path = Path(args.out) if args.out else Path(args.manifest)
    if not specs:
        if out_path.resolve() != Path(args.manifest).resolve():
            out_path.write_text(Path(args.manifest).read_text())
        print("no drift specs given; manifest unchanged")
        return 0
    if out_path.parent.resolve() != manifest.root.resolve():
        raise UsageError("--out must be in the same directory as the input manifest")
    try:
        sources = [e for e in manifest.select(args.split or "all") if e.drift is None]
    except ManifestError as exc:
        raise UsageError(str(exc)) from None
    drift_dir = Path(args.manifest).parent / "drift"
    drift_dir.mkdir(parents=True, exist_ok=True)
    problems: list[str] = []
    new_entries: list[ManifestEntry] = []
    for entry in sources:
        try:
            img = load_ppm(manifest.resolve(entry.image))
            anns = parse_annotation(manifest.resolve(entry.labels).read_text())
        except (OSError, PPMError, AnnotationError) as exc:
            problems.append(f"{entry.image}: {exc}")
            continue
        for spec in specs:
            applied = DriftSpec(spec.kind, spec.sigma, spec.gain, spec.angle,
                                rng.derive_seed(spec.seed, entry.stem, spec.tag()))
            stem = f"{entry.stem}__{spec.tag()}"
            try:
                labels = _drifted_annotations(anns, applied, img.width, img.height)
            except (DegenerateBoxError, ValueError) as exc:
                problems.append(f"{entry.image}: {spec.tag()}: {exc}")
                continue
            save_ppm(apply_drift(img, applied), drift_dir / f"{stem}.ppm")
            (drift_dir / f"{stem}.txt").write_text(format_annotations(labels))
            new_entries.append(ManifestEntry(
                relpath(drift_dir / f"{stem}.ppm", manifest.root),
                relpath(drift_dir / f"{stem}.txt", manifest.root),
                "test", applied))
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return 2
    fresh = {e.image for e in new_entries}
    kept = [e for e in manifest.entries if e.image not in fresh]
    updated = DatasetManifest(kept + new_entries, manifest.seed, manifest.root)
    updated.save(out_path)
    print(f"{len(new_entries)} drifted entries written to {drift_dir}; manifest {out_path}")
    return 0


def build_models(args, manifest: DatasetManifest | None, entries, seed: int):
    detector = classifier = None
    if args.oracle:
        inj = ErrorInjection(args.miss_rate or 0.0, args.misclass_rate or 0.0, seed=seed)
        detector, classifier = OracleDetector(inj), OracleClassifier(inj)
    elif args.profile:
        emu = Emulator(load_profile(args.profile, seed), seed)
        detector, classifier = emu.detector, emu.classifier
    if args.detector_replay:
        try:
            detector = ReplayDetector.load(args.detector_replay)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"detector replay: {exc}") from None
        missing = detector.missing(e.stem for e in entries)
        if missing:
            raise UsageError("detector replay lacks records for: " + ", ".join(missing))
    if args.classifier_replay:
        try:
            classifier = ReplayClassifier.load(args.classifier_replay)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"classifier replay: {exc}") from None
        keys = []
        for e in entries:
            try:
                n = len(parse_annotation(manifest.resolve(e.labels).read_text()))
            except (OSError, AnnotationError):
                continue
            keys += [ReplayClassifier.key(e.stem, k) for k in range(n)]
        missing = classifier.missing(keys)
        if missing:
            raise UsageError("classifier replay lacks records for: " + ", ".join(missing))
    if detector is None or classifier is None:
        raise UsageError("choose model sources: --oracle, --profile, or --detector-replay/--classifier-replay")
    return detector, classifier


def detection_scores(manifest: DatasetManifest, entries, replay: ReplayDetector):
    dets, truths = [], []
    for e in entries:
        try:
            img = load_ppm(manifest.resolve(e.image))
            anns = parse_annotation(manifest.resolve(e.labels).read_text())
        except (OSError, PPMError, AnnotationError):
            continue
        for a in anns:
            truths.append(ScoredBox(e.stem, int(a.class_id), denormalize(a.box, img.width, img.height)))
        for d in replay.records[e.stem].detections:
            dets.append(ScoredBox(e.stem, d.class_id, denormalize(d.box, img.width, img.height), d.confidence))
    return score_detection(dets, truths) if truths else None


def write_outputs(ledger: OutcomeLedger, out: Path, extra: dict | None = None) -> str:
    out.mkdir(parents=True, exist_ok=True)
    ledger.save(out)
    text, doc = reproduce_tables(ledger) if ledger.total else ("empty ledger\n", {})
    if extra:
        doc.update(extra)
    (out / "report.txt").write_text(text)
    (out / "report.json").write_text(dumps_report(doc))
    return text


def latency_line(ledger: OutcomeLedger) -> str:
    first = [c[0] for c in ledger.cycles if c]
    if not first:
        return "latency: no cycles"
    det = np.mean([c.detector_ms for c in first])
    cls = np.mean([c.classifier_ms for c in first])
    total = np.mean([end_to_end_latency(c) for c in first])
    return f"latency ms: detector {det:.2f}  classifier {cls:.2f}  hybrid {total:.2f}"


def cmd_run(args) -> int:
    config_doc = load_config(args.config)
    config = stream_config(args, config_doc)
    manifest = load_manifest(args.manifest)
    try:
        entries = manifest.select(args.split)
    except ManifestError as exc:
        raise UsageError(str(exc)) from None
    detector, classifier = build_models(args, manifest, entries, config.seed)
    try:
        ledger = run_stream(manifest, args.split, detector, classifier, config, workers=args.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    problems = check_traces(ledger, config.table)
    if problems:
        raise RuntimeError("invalid traces: " + "; ".join(problems[:5]))
    extra = {}
    if isinstance(detector, ReplayDetector):
        scores = detection_scores(manifest, entries, detector)
        if scores is not None:
            extra["detection"] = scores.to_dict()
    text = write_outputs(ledger, Path(args.out), extra)
    print(text, end="")
    if "detection" in extra:
        print(f"mAP@0.5: {extra['detection']['map50']:.4f}")
    print(latency_line(ledger))
    for e in ledger.errors:
        print(e, file=sys.stderr)
    return 0


def cmd_simulate(args) -> int:
    config = stream_config(args, load_config(args.config))
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    profile = load_profile(args.profile, config.seed)
    ledger = simulate(profile, args.n, config.seed, config)
    text = write_outputs(ledger, Path(args.out), {"profile": profile.to_dict()})
    print(text, end="")
    print(latency_line(ledger))
    return 0


def _load_ledger(path: str) -> OutcomeLedger:
    try:
        return OutcomeLedger.load(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"ledger {path}: {exc}") from None


def cmd_report(args) -> int:
    ledger = _load_ledger(args.ledger)
    standard = _load_ledger(args.standard_ledger) if args.standard_ledger else None
    if ledger.total == 0:
        raise UsageError("ledger is empty")
    text, doc = reproduce_tables(ledger, standard)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
        (out / "report.json").write_text(dumps_report(doc))
    return 0


def cmd_audit(args) -> int:
    manifest = load_manifest(args.manifest)
    crops = Path(args.crops) if args.crops else Path(args.manifest).parent / "crops"
    violations = audit_classifier_dataset(manifest, crops)
    for v in violations:
        print(v, file=sys.stderr)
    print(f"audit: {len(violations)} violations")
    return 2 if violations else 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="driftguard", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", required=out_required)

    p = sub.add_parser("prepare", help="pair images and labels, split, build classifier crops")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")
    common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("augment", help="write drifted copies of manifest entries")
    p.add_argument("--manifest", required=True)
    p.add_argument("--drift", action="append", metavar="kind=...,param=...")
    p.add_argument("--split", default=None)
    common(p, out_required=False)
    p.set_defaults(func=cmd_augment)

    def models(p):
        p.add_argument("--threshold", type=float, default=None)
        p.add_argument("--profile")
        p.add_argument("--config")

    p = sub.add_parser("run", help="evaluate the pipeline over a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--oracle", action="store_true")
    p.add_argument("--miss-rate", type=float, default=None)
    p.add_argument("--misclass-rate", type=float, default=None)
    p.add_argument("--detector-replay")
    p.add_argument("--classifier-replay")
    models(p)
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="emulated run over synthetic frames")
    p.add_argument("--n", type=int, default=600)
    models(p)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="rebuild result tables from a ledger")
    p.add_argument("--ledger", required=True)
    p.add_argument("--standard-ledger")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("audit", help="re-verify a classifier crop dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--crops")
    p.set_defaults(func=cmd_audit)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
