"""Standard single-image depth metrics: rel, rms, log10 and threshold accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable

import numpy as np

from .errors import DataError
from .tensor import Tensor, interp_matrix

THRESHOLDS = (1.25, 1.25 ** 2, 1.25 ** 3)


@dataclass(frozen=True)
class MetricsReport:
    rel: float
    rms: float
    log10: float
    delta1: float
    delta2: float
    delta3: float
    pixel_count: int

    def to_text(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self)) + "\n"

    @staticmethod
    def csv_header() -> str:
        return ",".join(f.name for f in fields(MetricsReport))

    def to_csv_row(self) -> str:
        return ",".join(repr(getattr(self, f.name)) for f in fields(self))


@dataclass
class MetricSums:
    """Additive sufficient statistics; merging then finalising gives pixel-weighted metrics."""

    abs_rel: float = 0.0
    sq_err: float = 0.0
    log10_err: float = 0.0
    within1: int = 0
    within2: int = 0
    within3: int = 0
    count: int = 0

    def __iadd__(self, other: "MetricSums"):
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def report(self) -> MetricsReport:
        if self.count == 0:
            raise DataError("no valid pixels to evaluate")
        n = self.count
        return MetricsReport(
            rel=self.abs_rel / n,
            rms=math.sqrt(self.sq_err / n),
            log10=self.log10_err / n,
            delta1=self.within1 / n,
            delta2=self.within2 / n,
            delta3=self.within3 / n,
            pixel_count=n,
        )


def _plane(x) -> np.ndarray:
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return arr


def _resize_to(pred: np.ndarray, shape) -> np.ndarray:
    if pred.shape[-2:] == tuple(shape[-2:]):
        return pred
    ah = interp_matrix(pred.shape[-2], shape[-2])
    aw = interp_matrix(pred.shape[-1], shape[-1])
    return np.matmul(np.matmul(ah, pred), aw.T)


def metric_sums(pred, truth, mask=None) -> MetricSums:
    truth = _plane(truth)
    pred = _plane(pred)
    while pred.ndim > truth.ndim and pred.shape[0] == 1:
        pred = pred[0]
    pred = _resize_to(pred, truth.shape)
    if pred.shape != truth.shape:
        raise DataError(f"prediction {pred.shape} cannot be matched to ground truth {truth.shape}")
    valid = np.ones(truth.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(truth.shape)
    d, p = truth[valid], pred[valid]
    if d.size == 0:
        raise DataError("no valid pixels to evaluate")
    if np.any(d <= 0) or np.any(p <= 0):
        raise DataError("depth must be positive on every valid pixel")
    ratio = np.maximum(d / p, p / d)
    return MetricSums(
        abs_rel=float(np.sum(np.abs(d - p) / d)),
        sq_err=float(np.sum((d - p) ** 2)),
        log10_err=float(np.sum(np.abs(np.log10(d) - np.log10(p)))),
        within1=int(np.sum(ratio < THRESHOLDS[0])),
        within2=int(np.sum(ratio < THRESHOLDS[1])),
        within3=int(np.sum(ratio < THRESHOLDS[2])),
        count=int(d.size),
    )


def compute_metrics(pred, truth, mask=None) -> MetricsReport:
    """Metrics over valid pixels; ``pred`` is bilinearly resized to ``truth`` if sizes differ."""
    return metric_sums(pred, truth, mask).report()


def aggregate(pairs: Iterable, weighting: str = "pixel") -> MetricsReport:
    """Combine ``(pred, truth, mask)`` triples.

    ``weighting="pixel"`` pools all valid pixels; ``"image"`` averages
    per-image reports instead.
    """
    if weighting not in ("pixel", "image"):
        raise ValueError(f"weighting must be 'pixel' or 'image', got {weighting!r}")
    total = MetricSums()
    reports = []
    for pred, truth, mask in pairs:
        s = metric_sums(pred, truth, mask)
        total += s
        reports.append(s.report())
    if not reports:
        raise DataError("empty dataset")
    if weighting == "pixel":
        return total.report()
    return _image_mean(reports, total.count)


def _image_mean(reports, count) -> MetricsReport:
    mean = lambda name: float(np.mean([getattr(r, name) for r in reports]))  # noqa: E731
    return MetricsReport(mean("rel"), mean("rms"), mean("log10"), mean("delta1"), mean("delta2"),
                         mean("delta3"), count)


def evaluate_dataset(dataset, net, resize_to_input: bool = True, weighting: str = "pixel") -> MetricsReport:
    """Run ``net`` over ``dataset`` in order and aggregate; errors name the failing sample."""
    if not dataset:
        raise DataError("empty dataset")
    total = MetricSums()
    reports = []
    for s in dataset:
        try:
            pred = net.predict(s.image_chw()[None], resize_to_input=resize_to_input)[0, 0]
            sums = metric_sums(pred, s.depth, s.mask)
        except DataError as exc:
            raise DataError(f"sample {s.id!r}: {exc}") from exc
        total += sums
        reports.append(sums.report())
    if weighting == "pixel":
        return total.report()
    return _image_mean(reports, total.count)
