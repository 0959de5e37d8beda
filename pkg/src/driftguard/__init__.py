"""Drift-aware two-stage detection pipeline.

A six-state automaton drives a fast detector and an independent verification
classifier; when their votes disagree the controller raises a drift alarm
and falls back to a safe state.  The package also carries the dataset
tooling, drift transforms, model emulation and metrics needed to evaluate
the pipeline offline.
"""

from .automaton import DEFAULT_TABLE, RunTrace, StateId, TransitionTable, run, step, validate
from .dataset import (
    Annotation,
    BoundingBox,
    ClassLabel,
    DatasetManifest,
    NormalizedBox,
    build_classifier_dataset,
    crop,
    denormalize,
    parse_annotation,
    resize_64,
    split,
)
from .imaging import (
    DriftSpec,
    ImageBuffer,
    add_gaussian_noise,
    adjust_brightness,
    read_ppm,
    tilt,
    transform_bbox,
    write_ppm,
)
from .metrics import iou, reproduce_tables, score_classification, score_detection
from .models import (
    Emulator,
    EmulatorProfile,
    ErrorInjection,
    OracleClassifier,
    OracleDetector,
    ReplayClassifier,
    ReplayDetector,
    default_profile,
    fit_profile,
    sample_outcome,
)
from .pipeline import (
    Controller,
    OutcomeLedger,
    ResetPolicy,
    StreamConfig,
    end_to_end_latency,
    run_cycle,
    run_stream,
    simulate,
)

__version__ = "0.1.0"
