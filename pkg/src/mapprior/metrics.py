"""Evaluation metrics: per-class IoU, MMD realism score and calibration error.

Classes overlap, so every IoU is computed one class at a time. ECE pools all
(pixel, class) pairs and bins them by predicted probability; within a bin the
"accuracy" is the observed frequency of the class being present.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from mapprior.exceptions import ShapeError
from mapprior.layout import _Grid

DEFAULT_THRESHOLDS = tuple(np.round(np.arange(1, 20) / 20, 2))
ECE_VARIANTS = ("l1_guo", "l2_kumar")


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, _Grid) else np.asarray(x)


def _class_index(grid, cls) -> int:
    if isinstance(cls, str):
        if not isinstance(grid, _Grid):
            raise KeyError(f"class name {cls!r} needs a named grid")
        if cls not in grid.channels:
            raise KeyError(f"unknown class {cls!r}; have {grid.channels}")
        return grid.channels.index(cls)
    return int(cls)


def iou(pred, gt, cls=None, empty_value: float = 1.0) -> float:
    """Intersection over union of two binary masks.

    ``pred``/``gt`` are grids or arrays; with ``cls`` (name or index) the
    given channel of a (C, H, W) input is compared. Two empty masks score
    ``empty_value``.
    """
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ShapeError(f"iou: shape {p.shape} != {g.shape}")
    if cls is not None:
        k = _class_index(pred if isinstance(pred, _Grid) else gt, cls)
        p, g = p[k], g[k]
    p, g = p.astype(bool), g.astype(bool)
    union = np.logical_or(p, g).sum()
    if union == 0:
        return float(empty_value)
    return float(np.logical_and(p, g).sum() / union)


def per_class_iou(pred, gt, empty_value: float = 1.0) -> np.ndarray:
    """IoU for every channel of (C, H, W) or (N, C, H, W) inputs.

    Returns shape (C,) or (N, C).
    """
    p, g = _arr(pred).astype(bool), _arr(gt).astype(bool)
    if p.shape != g.shape:
        raise ShapeError(f"iou: shape {p.shape} != {g.shape}")
    inter = np.logical_and(p, g).sum(axis=(-1, -2))
    union = np.logical_or(p, g).sum(axis=(-1, -2))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union == 0, empty_value, inter / np.maximum(union, 1))
    return out.astype(np.float64)


def mean_iou(pred, gt, empty_value: float = 1.0) -> float:
    """Mean over classes (and over scenes for batched input)."""
    return float(per_class_iou(pred, gt, empty_value).mean())


def best_threshold_iou(pred, gt, cls=None, thresholds=DEFAULT_THRESHOLDS, empty_value: float = 1.0):
    """Sweep thresholds on a soft prediction; return ``(best_t, best_iou)``.

    A cell is positive when ``pred >= t``. Ties go to the smallest threshold.
    """
    thresholds = sorted(float(t) for t in thresholds)
    if not thresholds:
        raise ValueError("thresholds must be non-empty")
    p, g = _arr(pred), _arr(gt)
    if cls is not None:
        k = _class_index(pred if isinstance(pred, _Grid) else gt, cls)
        p, g = p[k], g[k]
    best_t, best = thresholds[0], -1.0
    for t in thresholds:
        score = iou(p >= t, g, empty_value=empty_value)
        if score > best:
            best_t, best = t, score
    return best_t, best


def best_class_thresholds(pred, gt, thresholds=DEFAULT_THRESHOLDS, empty_value: float = 1.0):
    """Per-class threshold maximizing the scene-averaged IoU of (N, C, H, W) soft predictions.

    Returns ``(thresholds (C,), per-class IoU (C,))``.
    """
    p, g = _arr(pred), _arr(gt)
    thresholds = sorted(float(t) for t in thresholds)
    C = p.shape[1]
    best_t = np.full(C, thresholds[0])
    best = np.full(C, -1.0)
    for t in thresholds:
        scores = per_class_iou(p >= t, g, empty_value).mean(axis=0)
        better = scores > best
        best_t[better], best[better] = t, scores[better]
    return best_t, best


def _pool_matrix(n: int, out: int) -> np.ndarray:
    m = np.zeros((out, n))
    for i in range(out):
        lo = (i * n) // out
        hi = -((-(i + 1) * n) // out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def layout_embedding(layouts, size: int = 25) -> np.ndarray:
    """Average-pool each channel to ``size x size`` (adaptive bins) and flatten.

    Input (N, C, H, W) grids or arrays; output (N, C * size * size) float64.
    """
    if isinstance(layouts, (list, tuple)):
        layouts = np.stack([_arr(x) for x in layouts])
    x = np.asarray(layouts, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    ph, pw = _pool_matrix(x.shape[2], size), _pool_matrix(x.shape[3], size)
    pooled = np.einsum("ih,nchw,jw->ncij", ph, x, pw)
    return pooled.reshape(len(x), -1)


def median_bandwidth(ea: np.ndarray, eb: np.ndarray) -> float:
    """Median pairwise Euclidean distance over the union of both sets (1.0 if degenerate)."""
    pooled = np.concatenate([ea, eb])
    d = cdist(pooled, pooled)
    iu = np.triu_indices(len(pooled), k=1)
    med = float(np.median(d[iu])) if len(iu[0]) else 0.0
    return med if med > 0 else 1.0


def gaussian_kernel(a: np.ndarray, b: np.ndarray, bandwidth: float) -> np.ndarray:
    """``exp(-|a - b|^2 / (2 bandwidth^2))`` for all row pairs."""
    return np.exp(-cdist(a, b, "sqeuclidean") / (2.0 * bandwidth**2))


def mmd_from_embeddings(ea, eb, bandwidth: float | None = None) -> float:
    """Biased squared MMD with diagonal terms kept.

    ``sum k(a_i, a_i')/n^2 + sum k(b_j, b_j')/m^2 - 2 sum k(a_i, b_j)/(n m)``
    with a Gaussian kernel; ``bandwidth=None`` applies the median heuristic.
    """
    ea, eb = np.atleast_2d(np.asarray(ea, np.float64)), np.atleast_2d(np.asarray(eb, np.float64))
    if len(ea) == 0 or len(eb) == 0:
        raise ValueError("mmd needs two non-empty sets")
    if bandwidth is None:
        bandwidth = median_bandwidth(ea, eb)
    kaa = gaussian_kernel(ea, ea, bandwidth).mean()
    kbb = gaussian_kernel(eb, eb, bandwidth).mean()
    kab = gaussian_kernel(ea, eb, bandwidth).mean()
    return float(kaa + kbb - 2.0 * kab)


def mmd(set_a, set_b, pool: int = 25, bandwidth: float | None = None) -> float:
    """MMD between two sets of layouts on pooled embeddings.

    Embeddings are divided by their joint maximum so both sets share one
    unit scale.
    """
    ea, eb = layout_embedding(set_a, pool), layout_embedding(set_b, pool)
    if len(ea) == 0 or len(eb) == 0:
        raise ValueError("mmd needs two non-empty sets")
    scale = max(np.abs(ea).max(), np.abs(eb).max())
    if scale > 0:
        ea, eb = ea / scale, eb / scale
    return mmd_from_embeddings(ea, eb, bandwidth)


@dataclass
class BinTable:
    edges: np.ndarray
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}


def calibration_bins(confidence, gt, n_bins: int = 10) -> BinTable:
    """Uniform bins on [0, 1]; per-bin count, positive frequency and mean confidence."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    c = np.asarray(_stack(confidence), dtype=np.float64).ravel()
    g = np.asarray(_stack(gt), dtype=np.float64).ravel()
    if c.shape != g.shape:
        raise ShapeError(f"ece: confidence {c.shape} vs gt {g.shape}")
    idx = np.minimum((c * n_bins).astype(np.int64), n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.bincount(idx, weights=g, minlength=n_bins) / counts
        conf = np.bincount(idx, weights=c, minlength=n_bins) / counts
    acc = np.where(counts > 0, acc, 0.0)
    conf = np.where(counts > 0, conf, 0.0)
    return BinTable(np.linspace(0.0, 1.0, n_bins + 1), counts, acc, conf)


def ece_from_bins(table: BinTable, variant: str = "l2_kumar") -> float:
    n = table.counts.sum()
    if n == 0:
        return 0.0
    w = table.counts / n
    gap = table.accuracy - table.confidence
    if variant == "l1_guo":
        return float(np.sum(w * np.abs(gap)))
    if variant == "l2_kumar":
        return float(math.sqrt(np.sum(w * gap * gap)))
    raise ValueError(f"unknown ECE variant {variant!r}; choose from {ECE_VARIANTS}")


def ece(confidence, gt, n_bins: int = 10, variant: str = "l2_kumar", per_class: bool = False):
    """Expected calibration error and its bin table.

    ``l1_guo``: sum_b (n_b/n) |acc_b - conf_b|.
    ``l2_kumar``: sqrt(sum_b (n_b/n) (acc_b - conf_b)^2).
    With ``per_class`` the per-channel ECEs are averaged instead of pooled
    (the returned table is then the pooled one, for reference).
    """
    if variant not in ECE_VARIANTS:
        raise ValueError(f"unknown ECE variant {variant!r}; choose from {ECE_VARIANTS}")
    table = calibration_bins(confidence, gt, n_bins)
    if not per_class:
        return ece_from_bins(table, variant), table
    c, g = _stack(confidence), _stack(gt)
    c = c if c.ndim == 4 else c[None]
    g = g if g.ndim == 4 else g[None]
    vals = [ece_from_bins(calibration_bins(c[:, k], g[:, k], n_bins), variant) for k in range(c.shape[1])]
    return float(np.mean(vals)), table


def _stack(x) -> np.ndarray:
    if isinstance(x, (list, tuple)):
        return np.stack([_arr(v) for v in x])
    return _arr(x)


@dataclass
class EvalReport:
    method: str
    classes: tuple
    per_class_iou: list
    mean_iou: float
    mmd: float
    ece_l1: float
    ece_l2: float
    thresholds: list
    bins: dict = field(default_factory=dict)
    tags: dict = field(default_factory=dict)

    def csv_header(self) -> list:
        return ["method", *self.classes, "mean", "MMD", "ECE", "ECE_l1", *sorted(self.tags)]

    def csv_row(self) -> list:
        fmt = lambda v: "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"  # noqa: E731
        return [self.method, *[fmt(v) for v in self.per_class_iou], fmt(self.mean_iou), fmt(self.mmd),
                fmt(self.ece_l2), fmt(self.ece_l1), *[str(self.tags[k]) for k in sorted(self.tags)]]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = list(self.classes)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_json_default)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["classes"] = tuple(d["classes"])
        return cls(**d)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def reports_to_csv(reports) -> str:
    reports = list(reports)
    header = reports[0].csv_header()
    for r in reports[1:]:
        if r.csv_header() != header:
            raise ValueError("reports have different column layouts")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in reports:
        w.writerow(r.csv_row())
    return buf.getvalue()


def evaluate(method: str, final, gt, confidence=None, classes=None, thresholds=None, n_bins: int = 10,
             mmd_reference=None, tags: dict | None = None, empty_value: float = 1.0) -> EvalReport:
    """Score a set of predictions against ground truth.

    ``final`` holds binary predictions (N, C, H, W); ``confidence`` the
    matching probabilities used for ECE (defaults to ``final``). MMD compares
    ``final`` with ``mmd_reference`` (defaults to ``gt``).
    """
    f, g = _stack(final).astype(np.float64), _stack(gt).astype(np.float64)
    if f.ndim == 3:
        f, g = f[None], g[None]
    ious = per_class_iou(f >= 0.5, g >= 0.5, empty_value).mean(axis=0)
    conf = f if confidence is None else _stack(confidence)
    e1, table = ece(conf, g, n_bins, "l1_guo")
    e2 = ece_from_bins(table, "l2_kumar")
    ref = g if mmd_reference is None else _stack(mmd_reference)
    classes = tuple(classes) if classes is not None else tuple(f"c{i}" for i in range(f.shape[1]))
    return EvalReport(
        method=method,
        classes=classes,
        per_class_iou=[float(v) for v in ious],
        mean_iou=float(ious.mean()),
        mmd=mmd(f, ref),
        ece_l1=e1,
        ece_l2=e2,
        thresholds=list(thresholds) if thresholds is not None else [0.5] * f.shape[1],
        bins=table.to_dict(),
        tags=dict(tags or {}),
    )
