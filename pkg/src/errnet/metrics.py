"""Full-reference quality metrics and dataset-level reports.

Conventions: SSIM works on luminance (BT.601 weights), PSNR / NCC / LMSE on all
three channels jointly.  ``lmse(x, y)`` fits ``y`` onto ``x``; pass the reference
first.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import signal

from .imaging import DimensionError, TrainingSample

log = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 and img.shape[-1] == 3 else img


def psnr(x, y) -> float:
    x, y = _pair(x, y)
    mse = np.mean((x - y) ** 2)
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim_map(x, y, window: np.ndarray | None = None, k1: float = 0.01, k2: float = 0.03,
             data_range: float = 1.0) -> np.ndarray:
    x, y = _pair(luminance(x), luminance(y))
    win = gaussian_window() if window is None else window
    if x.shape[0] < win.shape[0] or x.shape[1] < win.shape[1]:
        raise DimensionError(f"image {x.shape} smaller than SSIM window {win.shape}")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    filt = lambda a: signal.correlate(a, win, mode="valid", method="direct")
    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx ** 2
    syy = filt(y * y) - my ** 2
    sxy = filt(x * y) - mx * my
    return ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2))


def ssim(x, y, window: np.ndarray | None = None, k1: float = 0.01, k2: float = 0.03) -> float:
    return float(ssim_map(x, y, window, k1, k2).mean())


def ncc(x, y) -> float:
    """Zero-mean normalised cross-correlation; NaN when either image is constant."""
    x, y = _pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    denom = math.sqrt(float(np.sum(xc * xc)) * float(np.sum(yc * yc)))
    if denom == 0:
        return math.nan
    return float(np.sum(xc * yc) / denom)


def lmse(x, y, window: int = 20, stride: int = 10) -> float:
    """Mean over sliding windows of ``min_a mean((x_w - a * y_w)^2)``."""
    x, y = _pair(x, y)
    h, w = x.shape[:2]
    if h < window or w < window:
        raise DimensionError(f"image {h}x{w} smaller than LMSE window {window}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    # (ny, nx, c, window, window) strided views, windows fully inside the image
    vx = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(0, 1))[::stride, ::stride]
    vy = np.lib.stride_tricks.sliding_window_view(y, (window, window), axis=(0, 1))[::stride, ::stride]
    vx = vx.reshape(vx.shape[0], vx.shape[1], -1)
    vy = vy.reshape(vy.shape[0], vy.shape[1], -1)
    syy = np.sum(vy * vy, axis=-1)
    sxy = np.sum(vx * vy, axis=-1)
    a = np.divide(sxy, syy, out=np.zeros_like(sxy), where=syy > 0)
    err = np.mean((vx - a[..., None] * vy) ** 2, axis=-1)
    return float(err.mean())


METRICS = ("psnr", "ssim", "ncc", "lmse")


def all_metrics(pred, ref) -> dict[str, float]:
    return {"psnr": psnr(pred, ref), "ssim": ssim(pred, ref), "ncc": ncc(pred, ref), "lmse": lmse(ref, pred)}


# ---------------------------------------------------------------------------
# reports

@dataclass
class MetricRow:
    image_id: str
    psnr: float
    ssim: float
    ncc: float
    lmse: float


@dataclass
class MetricReport:
    dataset: str = ""
    method: str = ""
    per_image: list[MetricRow] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def add(self, image_id: str, values: dict[str, float]) -> None:
        self.per_image.append(MetricRow(image_id, *(values[m] for m in METRICS)))

    @property
    def aggregate(self) -> dict[str, float] | None:
        if not self.per_image:
            return None
        out = {}
        for m in METRICS:
            vals = np.array([getattr(r, m) for r in self.per_image], dtype=np.float64)
            finite = vals[np.isfinite(vals)]
            out[m] = float(finite.mean()) if finite.size else math.nan
        out["psnr_infinite"] = int(np.isinf([r.psnr for r in self.per_image]).sum())
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf)
        wr.writerow(["dataset", "method", "image_id", *METRICS])
        for r in self.per_image:
            wr.writerow([self.dataset, self.method, r.image_id, *(f"{getattr(r, m):.6f}" for m in METRICS)])
        agg = self.aggregate
        if agg:
            wr.writerow([self.dataset, self.method, "mean", *(f"{agg[m]:.6f}" for m in METRICS)])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def format_table(reports: Sequence[MetricReport]) -> str:
    """Rows = dataset x metric, columns = methods (one column per distinct method)."""
    methods = list(dict.fromkeys(r.method for r in reports))
    datasets = list(dict.fromkeys(r.dataset for r in reports))
    lookup = {(r.dataset, r.method): r.aggregate for r in reports}
    head = ["Dataset", "Index", *methods]
    rows = []
    for d in datasets:
        for m in METRICS:
            cells = []
            for meth in methods:
                agg = lookup.get((d, meth))
                cells.append("-" if not agg else (f"{agg[m]:.2f}" if m == "psnr" else f"{agg[m]:.3f}"))
            rows.append([d, m.upper(), *cells])
    widths = [max(len(str(c)) for c in col) for col in zip(head, *rows)]
    fmt = lambda row: " | ".join(str(c).rjust(wd) for c, wd in zip(row, widths))
    lines = [fmt(head), "-+-".join("-" * wd for wd in widths)]
    lines += [fmt(r) for r in rows]
    return "\n".join(lines)


def evaluate_samples(samples: Sequence[TrainingSample], predict: Callable[[np.ndarray], np.ndarray] | None,
                     dataset: str = "", method: str = "model") -> tuple[MetricReport, MetricReport]:
    """Metrics of ``predict(input)`` against the target, plus the ``Input`` baseline row.

    ``predict=None`` means the identity model.
    """
    model_rep = MetricReport(dataset, method)
    input_rep = MetricReport(dataset, "Input")
    for i, s in enumerate(samples):
        image_id = s.name or f"{i:04d}"
        try:
            if not s.aligned:
                raise DimensionError("evaluation needs aligned pairs")
            pred = s.input if predict is None else predict(s.input)
            model_rep.add(image_id, all_metrics(pred, s.transmission))
            input_rep.add(image_id, all_metrics(s.input, s.transmission))
        except Exception as exc:
            log.warning("skipping %s: %s", image_id, exc)
            model_rep.skipped.append(image_id)
            input_rep.skipped.append(image_id)
    return model_rep, input_rep


def evaluate_dataset(checkpoint, manifest, dataset: str = "", backbone=None) -> tuple[MetricReport, MetricReport]:
    """Evaluate a checkpoint (path, loaded model, or ``None`` for identity) on an aligned manifest."""
    from .imaging import load_image, read_manifest

    predict = None
    method = "Identity"
    if checkpoint is not None:
        from .training import load_generator, predictor

        model = load_generator(checkpoint, backbone=backbone) if isinstance(checkpoint, (str, Path)) else checkpoint
        predict = predictor(model)
        method = "ERRNet" if model.config.arm == "ERRNet" else model.config.arm

    samples = []
    skipped = []
    for e in read_manifest(manifest):
        try:
            samples.append(TrainingSample(load_image(e.input_path), load_image(e.target_path),
                                          aligned=e.aligned, name=e.input_path.stem))
        except Exception as exc:
            log.warning("skipping %s: %s", e.input_path, exc)
            skipped.append(e.input_path.stem)
    model_rep, input_rep = evaluate_samples(samples, predict, dataset or Path(manifest).stem, method)
    model_rep.skipped += skipped
    input_rep.skipped += skipped
    return model_rep, input_rep
