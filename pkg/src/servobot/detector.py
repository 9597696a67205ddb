"""Simulated few-shot object detector.

Detection quality for a class depends only on its view-condition bin
(distance band x clutter x motion blur). A bin becomes covered once the
few-shot set contains a positive example for that class captured under the
same conditions; covered bins detect reliably with small box jitter,
uncovered bins detect rarely, noisily, and with low confidence.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .world import ImageRecord

BAND_NEAR_MAX_M = 0.35
BAND_FAR_MIN_M = 0.8
BLUR_SPEED_M_S = 0.15
DEFAULT_CONFIDENCE_THRESHOLD = 0.9
LOW_CONFIDENCE_THRESHOLD = 0.1

_BANDS = ("near", "mid", "far")


@dataclass(frozen=True, order=True)
class ContextBin:
    """Discrete view-condition label controlling detection quality."""

    band: str
    clutter: bool
    blur: bool

    def __post_init__(self):
        if self.band not in _BANDS:
            raise ValueError(f"unknown distance band {self.band!r}")

    def key(self) -> str:
        parts = [self.band]
        if self.clutter:
            parts.append("clutter")
        if self.blur:
            parts.append("blur")
        return "+".join(parts)

    @staticmethod
    def from_key(key: str) -> "ContextBin":
        parts = key.split("+")
        return ContextBin(band=parts[0], clutter="clutter" in parts[1:],
                          blur="blur" in parts[1:])


def band_for_depth(depth_m: float) -> str:
    if depth_m < BAND_NEAR_MAX_M:
        return "near"
    if depth_m > BAND_FAR_MIN_M:
        return "far"
    return "mid"


def classify_context(depth_to_top_m: float, camera_speed_m_s: float,
                     in_clutter: bool) -> ContextBin:
    return ContextBin(band=band_for_depth(depth_to_top_m),
                      clutter=in_clutter,
                      blur=camera_speed_m_s > BLUR_SPEED_M_S)


def all_context_bins() -> List[ContextBin]:
    """Every bin in the view-condition partition, in a fixed order."""
    return [ContextBin(band=b, clutter=c, blur=s)
            for b in _BANDS for c in (False, True) for s in (False, True)]


def covered_model(labels: Iterable[str],
                  params: Optional["DetectorParams"] = None,
                  bins: Optional[Iterable[ContextBin]] = None
                  ) -> "DetectorModel":
    """Model that treats the given labels as reliable in the given bins.

    With bins omitted, every bin is covered; handy for exercising the
    estimation stack without the annotation loop in the way.
    """
    chosen = list(bins) if bins is not None else all_context_bins()
    keys = frozenset((label, ctx) for label in labels for ctx in chosen)
    return DetectorModel(params=params or DetectorParams(), covered=keys)


def ambient_context(record: ImageRecord) -> ContextBin:
    """View conditions of the image as a whole, used for false positives and
    for true-negative examples. The nearest visible object sets the band."""
    if record.truth:
        depth = min(e.box.depth_to_top for e in record.truth)
        clutter = any(e.in_clutter for e in record.truth)
    else:
        depth = record.cam.z
        clutter = False
    return classify_context(depth, record.camera_speed, clutter)


@dataclass(frozen=True)
class BoundingBox:
    center: Tuple[float, float]
    width: float
    height: float
    class_label: str
    confidence: float
    object_id: Optional[str] = None

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("box dimensions must be positive")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")


@dataclass(frozen=True)
class DetectionSet:
    image_id: str
    threshold: float
    boxes: Tuple[BoundingBox, ...]

    def of_class(self, label: str) -> Tuple[BoundingBox, ...]:
        return tuple(b for b in self.boxes if b.class_label == label)


@dataclass(frozen=True)
class DetectorParams:
    """Per-bin emission statistics; one set shared by every class."""

    covered_detect_p: float = 0.99
    uncovered_detect_p: float = 0.25
    covered_jitter_px: float = 1.5
    uncovered_jitter_px: float = 6.0
    uncovered_fp_per_frame: float = 0.02
    fp_negative_factor: float = 0.25
    fp_labels: Tuple[str, ...] = ()
    # Rare gross mislocalizations of otherwise-good detections.
    outlier_rate: float = 0.0
    outlier_px: float = 0.0

    def to_json(self) -> dict:
        return {
            "covered_detect_p": self.covered_detect_p,
            "uncovered_detect_p": self.uncovered_detect_p,
            "covered_jitter_px": self.covered_jitter_px,
            "uncovered_jitter_px": self.uncovered_jitter_px,
            "uncovered_fp_per_frame": self.uncovered_fp_per_frame,
            "fp_negative_factor": self.fp_negative_factor,
            "fp_labels": list(self.fp_labels),
            "outlier_rate": self.outlier_rate,
            "outlier_px": self.outlier_px,
        }

    @staticmethod
    def from_json(d: dict) -> "DetectorParams":
        base = DetectorParams()
        return DetectorParams(
            covered_detect_p=float(d.get("covered_detect_p",
                                         base.covered_detect_p)),
            uncovered_detect_p=float(d.get("uncovered_detect_p",
                                           base.uncovered_detect_p)),
            covered_jitter_px=float(d.get("covered_jitter_px",
                                          base.covered_jitter_px)),
            uncovered_jitter_px=float(d.get("uncovered_jitter_px",
                                            base.uncovered_jitter_px)),
            uncovered_fp_per_frame=float(d.get("uncovered_fp_per_frame",
                                               base.uncovered_fp_per_frame)),
            fp_negative_factor=float(d.get("fp_negative_factor",
                                           base.fp_negative_factor)),
            fp_labels=tuple(d.get("fp_labels", ())),
            outlier_rate=float(d.get("outlier_rate", base.outlier_rate)),
            outlier_px=float(d.get("outlier_px", base.outlier_px)),
        )


CoverageKey = Tuple[str, ContextBin]


@dataclass(frozen=True)
class DetectorModel:
    """Immutable detector state: emission params plus coverage from examples."""

    params: DetectorParams = DetectorParams()
    covered: FrozenSet[CoverageKey] = frozenset()
    negative_counts: Tuple[Tuple[CoverageKey, int], ...] = ()

    def is_covered(self, label: str, ctx: ContextBin) -> bool:
        return (label, ctx) in self.covered

    def fp_rate(self, label: str, ctx: ContextBin) -> float:
        n = dict(self.negative_counts).get((label, ctx), 0)
        return (self.params.uncovered_fp_per_frame
                * self.params.fp_negative_factor ** n)

    def to_json(self) -> dict:
        return {
            "params": self.params.to_json(),
            "covered": sorted(f"{label}|{ctx.key()}"
                              for label, ctx in self.covered),
            "negative_counts": sorted(
                [f"{label}|{ctx.key()}", n]
                for (label, ctx), n in self.negative_counts),
        }

    @staticmethod
    def from_json(d: dict) -> "DetectorModel":
        params = DetectorParams.from_json(d.get("params", {}))
        covered = frozenset(
            (entry.split("|")[0], ContextBin.from_key(entry.split("|")[1]))
            for entry in d.get("covered", ()))
        negatives = tuple(
            ((entry.split("|")[0], ContextBin.from_key(entry.split("|")[1])),
             int(n))
            for entry, n in d.get("negative_counts", ()))
        return DetectorModel(params=params, covered=covered,
                             negative_counts=negatives)


def update_model(model: DetectorModel, examples: Iterable) -> DetectorModel:
    """Recompute coverage from the full example set (monotone: examples are
    append-only, so coverage only grows)."""
    covered = set(model.covered)
    negatives: Dict[CoverageKey, int] = dict(model.negative_counts)
    for ex in examples:
        for label, ctx in getattr(ex, "positive_keys", lambda: [])():
            covered.add((label, ctx))
        for label, ctx in getattr(ex, "negative_keys", lambda: [])():
            negatives[(label, ctx)] = negatives.get((label, ctx), 0) + 1
    return replace(model, covered=frozenset(covered),
                   negative_counts=tuple(sorted(negatives.items())))


def _confidence(rng: np.random.Generator, covered: bool) -> float:
    # Two well-separated modes so 0.9 vs 0.1 thresholds behave differently.
    if covered:
        return 0.9 + 0.1 * rng.beta(6.0, 2.0)
    return min(1.0, 0.05 + 0.9 * rng.beta(1.6, 3.2))


def _jittered_box(truth, sigma: float, label: str, conf: float,
                  image_size: Tuple[int, int],
                  rng: np.random.Generator,
                  offset: Tuple[float, float] = (0.0, 0.0)
                  ) -> Optional[BoundingBox]:
    cx, cy = truth.center[0] + offset[0], truth.center[1] + offset[1]
    half_w, half_h = truth.width / 2.0, truth.height / 2.0
    x_lo = cx - half_w + sigma * rng.standard_normal()
    x_hi = cx + half_w + sigma * rng.standard_normal()
    y_lo = cy - half_h + sigma * rng.standard_normal()
    y_hi = cy + half_h + sigma * rng.standard_normal()
    w_img, h_img = image_size
    x_lo, x_hi = max(0.0, min(x_lo, x_hi)), min(float(w_img), max(x_lo, x_hi))
    y_lo, y_hi = max(0.0, min(y_lo, y_hi)), min(float(h_img), max(y_lo, y_hi))
    if x_hi - x_lo < 1e-9 or y_hi - y_lo < 1e-9:
        return None
    return BoundingBox(center=((x_lo + x_hi) / 2.0, (y_lo + y_hi) / 2.0),
                       width=x_hi - x_lo, height=y_hi - y_lo,
                       class_label=label, confidence=conf,
                       object_id=truth.object_id)


def detect(record: ImageRecord, model: DetectorModel,
           rng: np.random.Generator,
           threshold: float = DEFAULT_CONFIDENCE_THRESHOLD) -> DetectionSet:
    """Sample one frame of detections from the ground-truth image record.

    The random draws do not depend on the threshold; it only filters the
    candidate list at the end. Two calls with identical rng state and
    different thresholds therefore see the same candidates, and the stricter
    threshold keeps a subset.
    """
    candidates: List[BoundingBox] = []
    seen_labels = set()
    for entry in record.truth:
        truth = entry.box
        label = truth.class_label
        seen_labels.add(label)
        ctx = classify_context(truth.depth_to_top, record.camera_speed,
                               entry.in_clutter)
        covered = model.is_covered(label, ctx)
        p = model.params.covered_detect_p if covered \
            else model.params.uncovered_detect_p
        if rng.random() >= p:
            continue
        conf = _confidence(rng, covered)
        sigma = model.params.covered_jitter_px if covered \
            else model.params.uncovered_jitter_px
        offset = (0.0, 0.0)
        if (model.params.outlier_rate > 0.0
                and rng.random() < model.params.outlier_rate):
            r = model.params.outlier_px
            offset = (rng.uniform(-r, r), rng.uniform(-r, r))
        box = _jittered_box(truth, sigma, label, conf,
                            record.intrinsics.image_size, rng, offset)
        if box is not None:
            candidates.append(box)
    fp_labels = model.params.fp_labels or tuple(sorted(seen_labels))
    w_img, h_img = record.intrinsics.image_size
    ctx = ambient_context(record)
    for label in fp_labels:
        rate = model.fp_rate(label, ctx)
        if rng.random() < rate:
            conf = _confidence(rng, covered=False)
            w = rng.uniform(30.0, 120.0)
            h = rng.uniform(30.0, 120.0)
            cx = rng.uniform(w / 2.0, w_img - w / 2.0)
            cy = rng.uniform(h / 2.0, h_img - h / 2.0)
            candidates.append(BoundingBox(center=(cx, cy), width=w, height=h,
                                          class_label=label, confidence=conf))
    boxes = tuple(b for b in candidates if b.confidence >= threshold)
    return DetectionSet(image_id=record.image_id, threshold=threshold,
                        boxes=boxes)


def save_params(params: DetectorParams, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path: str) -> DetectorParams:
    with open(path, "r", encoding="utf-8") as fh:
        return DetectorParams.from_json(json.load(fh))
