"""Evaluation metrics, agreement statistics and report generation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ParamMaps

BA_FACTOR = 1.96
SSIM_WINDOW = 8
SSIM_SIGMA = 1.5
EXACT_WILCOXON_MAX_N = 12
CSV_HEADER = ("method", "r", "metric", "roi", "value", "sd", "n")


def _region(region, shape) -> np.ndarray:
    region = np.asarray(region).astype(bool)
    if region.shape != tuple(shape):
        raise ValueError(f"region shape {region.shape} does not match maps {shape}")
    if not region.any():
        raise ValueError("empty region")
    return region


def nrmse(t2_est, t2_ref, region) -> float:
    """||ref - est||_2 / ||ref||_2 over ``region``, in percent."""
    est = np.asarray(t2_est, dtype=np.float64)
    ref = np.asarray(t2_ref, dtype=np.float64)
    phi = _region(region, ref.shape)
    denom = np.linalg.norm(ref[phi])
    if denom == 0:
        raise ValueError("reference has zero norm over the region")
    return 100.0 * float(np.linalg.norm(ref[phi] - est[phi]) / denom)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(map_est, map_ref, region, window: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean SSIM (percent) over all window positions touching ``region``.

    The dynamic range L is that of ``map_ref`` inside the region.
    """
    a = np.asarray(map_est, dtype=np.float64)
    b = np.asarray(map_ref, dtype=np.float64)
    phi = _region(region, b.shape)
    rows, cols = np.nonzero(phi)
    if a.shape != b.shape:
        raise ValueError("maps must have equal shapes")
    if (min(b.shape) < window or rows.max() - rows.min() + 1 < window
            or cols.max() - cols.min() + 1 < window):
        raise ValueError(f"region smaller than the {window}x{window} window")
    drange = float(b[phi].max() - b[phi].min())
    if drange == 0:
        drange = float(np.abs(b[phi]).max()) or 1.0
    c1, c2 = (k1 * drange) ** 2, (k2 * drange) ** 2
    w = gaussian_window(window, sigma)

    def wmean(x):
        return np.einsum("ijkl,kl->ij", sliding_window_view(x, (window, window)), w)

    mu_a, mu_b = wmean(a), wmean(b)
    var_a = wmean(a * a) - mu_a**2
    var_b = wmean(b * b) - mu_b**2
    cov = wmean(a * b) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    touches = sliding_window_view(phi, (window, window)).any(axis=(2, 3))
    return 100.0 * float(smap[touches].mean())


def roi_stats(t2_map, roi_labels) -> dict[int, tuple[float, float, int]]:
    """Per-label (mean, sample SD, pixel count) for every label >= 1."""
    t2 = np.asarray(t2_map, dtype=np.float64)
    labels = np.asarray(roi_labels)
    out = {}
    for lab in np.unique(labels):
        if lab <= 0:
            continue
        v = t2[labels == lab]
        sd = float(v.std(ddof=1)) if v.size > 1 else 0.0
        out[int(lab)] = (float(v.mean()), sd, int(v.size))
    return out


def _diffs(pairs) -> np.ndarray:
    p = np.asarray(pairs, dtype=np.float64)
    if p.ndim == 2 and p.shape[1] == 2:
        return p[:, 0] - p[:, 1]
    if p.ndim == 1:
        return p
    raise ValueError("pairs must be an [n, 2] array or a vector of differences")


def bland_altman(pairs) -> tuple[float, float, float]:
    """Mean difference (first minus second) and its +-1.96 sample-SD limits."""
    d = _diffs(pairs)
    if d.size == 0:
        raise ValueError("no pairs")
    mean = float(d.mean())
    sd = float(d.std(ddof=1)) if d.size > 1 else 0.0
    return mean, mean - BA_FACTOR * sd, mean + BA_FACTOR * sd


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(x.size)
    xs = x[order]
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def _exact_wplus_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    """Number of sign patterns giving each value of 2*W+ (subset-sum counts)."""
    counts = np.zeros(int(doubled_ranks.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:counts.size - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(pairs) -> float:
    """Two-sided Wilcoxon signed-rank p-value.

    Zero differences are dropped and tied magnitudes get average ranks. For
    up to 12 non-zero differences the exact permutation distribution of W+ is
    used; beyond that the tie-corrected normal approximation.
    """
    d = _diffs(pairs)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return 1.0
    ranks = _average_ranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        counts = _exact_wplus_counts(doubled)
        total = float(counts.sum())
        w2 = int(round(2 * w_plus))
        lower = counts[:w2 + 1].sum() / total
        upper = counts[w2:].sum() / total
        return float(min(1.0, 2 * min(lower, upper)))
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
    if var <= 0:
        return 1.0
    z = (w_plus - mean) / math.sqrt(var)
    return float(math.erfc(abs(z) / math.sqrt(2)))


# ------------------------------------------------------------------- reporting


@dataclass(frozen=True)
class Row:
    method: str
    r: float
    metric: str
    roi: str
    value: float
    sd: float = float("nan")
    n: int = 0

    def key(self):
        return (self.method, self.r, self.metric, self.roi)


def _same(a: float, b: float) -> bool:
    return (math.isnan(a) and math.isnan(b)) or a == b


@dataclass
class EvalReport:
    """Flat table of evaluation results, one row per (method, R, metric, ROI)."""

    rows: list[Row] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    def add(self, *args, **kwargs) -> None:
        self.rows.append(Row(*args, **kwargs))

    def get(self, method, r, metric, roi="all") -> Row:
        for row in self.rows:
            if row.key() == (method, float(r), metric, roi):
                return row
        raise KeyError((method, r, metric, roi))

    def methods(self) -> list[str]:
        return sorted({row.method for row in self.rows})

    def equals(self, other: "EvalReport") -> bool:
        if len(self.rows) != len(other.rows):
            return False
        return all(a.key() == b.key() and _same(a.value, b.value) and _same(a.sd, b.sd)
                   and a.n == b.n for a, b in zip(self.rows, other.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in self.rows:
            w.writerow([row.method, repr(float(row.r)), row.metric, row.roi,
                        repr(float(row.value)), repr(float(row.sd)), row.n])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if tuple(header) != CSV_HEADER:
            raise ValueError(f"unexpected CSV header {header}")
        rows = [Row(m, float(r), metric, roi, float(v), float(sd), int(n))
                for m, r, metric, roi, v, sd, n in reader]
        return cls(rows)

    def to_payload(self):
        values = np.array([[row.value, row.sd, row.n] for row in self.rows],
                          dtype=np.float64).reshape(-1, 3)
        extra = {"rows": [[row.method, row.r, row.metric, row.roi, row.value, row.sd, row.n]
                          for row in self.rows],
                 "notes": self.notes}
        return values, extra

    @classmethod
    def from_payload(cls, values, extra) -> "EvalReport":
        rows = [Row(m, float(r), metric, roi, float(v), float(sd), int(n))
                for m, r, metric, roi, v, sd, n in extra["rows"]]
        return cls(rows, dict(extra.get("notes") or {}))


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit portable graymap."""
    img = np.asarray(image, dtype=np.uint8)
    ny, nx = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{nx} {ny}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    nx, ny = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(ny, nx)


def to_gray(image, lo: float, hi: float) -> np.ndarray:
    x = (np.asarray(image, dtype=np.float64) - lo) / (hi - lo)
    return np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


@dataclass(frozen=True)
class ReportConfig:
    t2_window: tuple[float, float] = (0.0, 100.0)
    residual_window: float = 20.0
    roi_names: dict = field(default_factory=dict)
    preview_index: int = 0


def make_report(references: list[ParamMaps], outputs: dict, config: ReportConfig = ReportConfig(),
                out_dir=None, regions: list | None = None) -> EvalReport:
    """Compare method outputs against reference maps.

    ``outputs`` maps (method, R) to a list of ParamMaps aligned with
    ``references``. ``regions`` optionally overrides the evaluation regions
    and ROI labels (defaults to each reference's roi_labels). With
    ``out_dir`` the CSV and PGM previews are written there.
    """
    labels = [np.asarray(r.roi_labels) if regions is None else np.asarray(g)
              for r, g in zip(references, regions or references)]
    report = EvalReport(notes={"sd_convention": "sample (n-1)", "ba_factor": BA_FACTOR,
                               "ssim_region": "windows touching the evaluation region"})
    name = config.roi_names.get

    ref_roi = [roi_stats(r.t2_ms, lab) for r, lab in zip(references, labels)]
    all_labels = sorted({k for s in ref_roi for k in s})
    for lab in all_labels:
        vals = [s[lab][0] for s in ref_roi if lab in s]
        report.add("reference", 0.0, "t2_mean", name(lab, str(lab)), float(np.mean(vals)),
                   float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0, len(vals))

    for (method, r), maps in outputs.items():
        if len(maps) != len(references):
            raise ValueError(f"{method} R={r}: {len(maps)} outputs for {len(references)} references")
        nr = [nrmse(m.t2_ms, ref.t2_ms, lab > 0) for m, ref, lab in zip(maps, references, labels)]
        ss = [ssim(m.t2_ms, ref.t2_ms, lab > 0) for m, ref, lab in zip(maps, references, labels)]
        for metric, vals in (("nrmse", nr), ("ssim", ss)):
            report.add(method, float(r), metric, "all", float(np.mean(vals)),
                       float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0, len(vals))
        est_roi = [roi_stats(m.t2_ms, lab) for m, lab in zip(maps, labels)]
        pairs = []
        for lab in all_labels:
            vals = [s[lab][0] for s in est_roi if lab in s]
            report.add(method, float(r), "t2_mean", name(lab, str(lab)), float(np.mean(vals)),
                       float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0, len(vals))
        for e, rf in zip(est_roi, ref_roi):
            pairs += [(e[lab][0], rf[lab][0]) for lab in sorted(rf)]
        mean_diff, lower, upper = bland_altman(pairs)
        report.add(method, float(r), "ba_mean_diff", "all", mean_diff, n=len(pairs))
        report.add(method, float(r), "ba_lower", "all", lower, n=len(pairs))
        report.add(method, float(r), "ba_upper", "all", upper, n=len(pairs))
        report.add(method, float(r), "wilcoxon_p", "all", wilcoxon_signed_rank(pairs), n=len(pairs))

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        i = config.preview_index
        lo, hi = config.t2_window
        rw = config.residual_window
        write_pgm(out / "reference_t2.pgm", to_gray(references[i].t2_ms, lo, hi))
        for (method, r), maps in outputs.items():
            tag = f"{method}_r{r:g}"
            write_pgm(out / f"{tag}_t2.pgm", to_gray(maps[i].t2_ms, lo, hi))
            resid = np.asarray(maps[i].t2_ms, float) - np.asarray(references[i].t2_ms, float)
            write_pgm(out / f"{tag}_residual.pgm", to_gray(resid, -rw, rw))
    return report
