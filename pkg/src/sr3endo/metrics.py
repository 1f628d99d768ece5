"""Image quality metrics and the exploratory statistics report."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage, ImageDraw, ImageFont
from scipy.ndimage import correlate1d

HIST_BINS = 64
BRIGHTNESS_RANGE = (0.0, 1.0)
# population std of values in [0, 1] cannot exceed 0.5
CONTRAST_RANGE = (0.0, 0.5)


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def psnr(a, b, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    r = (win.size - 1) // 2
    out = correlate1d(correlate1d(img, win, axis=0, mode="reflect"), win, axis=1, mode="reflect")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim_map(a: np.ndarray, b: np.ndarray, k1=0.01, k2=0.03, window=11, sigma=1.5, max_val=1.0) -> np.ndarray:
    """Per-pixel SSIM of two single-channel images over fully covered window positions."""
    win = gaussian_window(window, sigma)
    c1, c2 = (k1 * max_val) ** 2, (k2 * max_val) ** 2
    mu_a, mu_b = _filter_valid(a, win), _filter_valid(b, win)
    var_a = _filter_valid(a * a, win) - mu_a * mu_a
    var_b = _filter_valid(b * b, win) - mu_b * mu_b
    cov = _filter_valid(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, window: int = 11, sigma: float = 1.5,
         max_val: float = 1.0) -> float:
    """Mean SSIM over pixels and channels (multichannel = mean of per-channel SSIM)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_same(a, b)
    if window % 2 == 0:
        raise ValueError("window size must be odd")
    if min(a.shape[:2]) < window:
        raise ValueError(f"image {a.shape[1]}x{a.shape[0]} is smaller than the {window}-pixel window")
    if a.ndim == 2:
        val = ssim_map(a, b, k1, k2, window, sigma, max_val).mean()
    else:
        val = np.mean([ssim_map(a[..., c], b[..., c], k1, k2, window, sigma, max_val).mean()
                       for c in range(a.shape[2])])
    # near-identical inputs can round a hair past 1
    return float(np.clip(val, -1.0, 1.0))


def grayscale(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


def brightness_contrast(img) -> tuple[float, float]:
    g = grayscale(img)
    return float(g.mean()), float(g.std())


# report -------------------------------------------------------------------

@dataclass
class ImageTriplet:
    id: str
    lr: np.ndarray | None
    sr: np.ndarray
    hr: np.ndarray


@dataclass
class MetricReport:
    rows: list  # (id, psnr_db, ssim)
    aggregates: dict
    hist_brightness: np.ndarray = field(default=None)  # [bins, 4]: low, high, count_sr, count_hr
    hist_contrast: np.ndarray = field(default=None)


def fmt_db(v: float) -> str:
    return "inf" if math.isinf(v) else repr(float(v))


def aggregate(rows) -> dict:
    p = np.array([r[1] for r in rows], dtype=np.float64)
    s = np.array([r[2] for r in rows], dtype=np.float64)
    # math.fsum is order independent, so permuting rows cannot change the means
    return {
        "n": len(rows),
        "mean_psnr": math.fsum(p) / len(p) if np.all(np.isfinite(p)) else math.inf,
        "median_psnr": float(np.median(p)),
        "mean_ssim": math.fsum(s) / len(s),
        "median_ssim": float(np.median(s)),
    }


def _histograms(values_sr, values_hr, rng) -> np.ndarray:
    edges = np.linspace(rng[0], rng[1], HIST_BINS + 1)
    c_sr, _ = np.histogram(np.clip(values_sr, *rng), edges)
    c_hr, _ = np.histogram(np.clip(values_hr, *rng), edges)
    return np.column_stack([edges[:-1], edges[1:], c_sr, c_hr])


def metric_rows(pairs) -> list:
    """[(id, psnr, ssim)] for an iterable of (id, sr, hr)."""
    return [(i, psnr(sr, hr), ssim(sr, hr)) for i, sr, hr in pairs]


def write_metric_rows(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["id", "psnr_db", "ssim"])
        for i, p, s in rows:
            w.writerow([i, fmt_db(p), repr(float(s))])


def write_summary(agg: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["statistic", "value"])
        for k, v in agg.items():
            w.writerow([k, fmt_db(v) if isinstance(v, float) else v])


def eda_report(triplets, out_dir) -> MetricReport:
    """SR-vs-HR metrics per triplet plus brightness/contrast histograms of both populations.

    Writes report.tsv, summary.tsv, hist_brightness.tsv, hist_contrast.tsv and
    a PNG plot of each histogram into ``out_dir``.
    """
    triplets = list(triplets)
    if not triplets:
        raise ValueError("eda_report needs at least one triplet")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = metric_rows((t.id, t.sr, t.hr) for t in triplets)
    bc_sr = np.array([brightness_contrast(t.sr) for t in triplets])
    bc_hr = np.array([brightness_contrast(t.hr) for t in triplets])
    hb = _histograms(bc_sr[:, 0], bc_hr[:, 0], BRIGHTNESS_RANGE)
    hc = _histograms(bc_sr[:, 1], bc_hr[:, 1], CONTRAST_RANGE)
    report = MetricReport(rows, aggregate(rows), hb, hc)

    write_metric_rows(rows, out / "report.tsv")
    write_summary(report.aggregates, out / "summary.tsv")
    for name, hist, title in (("brightness", hb, "grayscale brightness"),
                              ("contrast", hc, "grayscale contrast (std)")):
        with open(out / f"hist_{name}.tsv", "w", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["bin_low", "bin_high", "count_sr", "count_hr"])
            for lo, hi, a, b in hist:
                w.writerow([repr(float(lo)), repr(float(hi)), int(a), int(b)])
        render_histogram(hist, title, out / f"hist_{name}.png")
    return report


def render_histogram(hist: np.ndarray, title: str, path, width: int = 640, height: int = 400) -> None:
    """Paired bar chart (SR red, HR blue) with axes and tick labels, saved as PNG."""
    im = PILImage.new("RGB", (width, height), "white")
    d = ImageDraw.Draw(im)
    font = ImageFont.load_default()
    left, right, top, bottom = 60, width - 20, 40, height - 50
    d.text((left, 12), title, fill="black", font=font)
    d.line([(left, top), (left, bottom), (right, bottom)], fill="black")
    peak = max(int(hist[:, 2:].max()), 1)
    n = len(hist)
    slot = (right - left) / n
    for k, (lo, hi, c_sr, c_hr) in enumerate(hist):
        x0 = left + k * slot
        for j, (c, colour) in enumerate(((c_sr, (200, 40, 40)), (c_hr, (40, 70, 200)))):
            if c:
                h = (bottom - top) * c / peak
                d.rectangle([x0 + j * slot / 2, bottom - h, x0 + (j + 1) * slot / 2 - 1, bottom], fill=colour)
    for frac in (0.0, 0.5, 1.0):
        y = bottom - frac * (bottom - top)
        d.line([(left - 4, y), (left, y)], fill="black")
        d.text((8, y - 6), str(int(round(frac * peak))), fill="black", font=font)
    for k in (0, n // 2, n):
        x = left + k * slot
        val = hist[min(k, n - 1), 0] if k < n else hist[-1, 1]
        d.line([(x, bottom), (x, bottom + 4)], fill="black")
        d.text((x - 12, bottom + 8), f"{val:.2f}", fill="black", font=font)
    d.rectangle([right - 110, top, right - 100, top + 10], fill=(200, 40, 40))
    d.text((right - 95, top - 1), "SR", fill="black", font=font)
    d.rectangle([right - 60, top, right - 50, top + 10], fill=(40, 70, 200))
    d.text((right - 45, top - 1), "HR", fill="black", font=font)
    im.save(path, format="PNG")
