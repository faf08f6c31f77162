"""Randomized knee-like phantoms with known I0/T2 maps and ROI labels."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import T2_MAX, T2_MIN, EchoSeries, ParamMaps

# Echo times of the multi-echo spin-echo knee protocol (ms).
KNEE_TE_MS = (7.0, 16.0, 25.0, 34.0, 43.0, 52.0, 62.0, 71.0)


@dataclass(frozen=True)
class Tissue:
    name: str
    t2_mean_ms: float
    t2_sd_ms: float
    i0_range: tuple[float, float]


# Reference regional T2 (mean, sd) of knee cartilage sub-regions and meniscus,
# plus a short-T2 filler standing in for fat/bone.
DEFAULT_TISSUES = (
    Tissue("filler", 15.0, 1.5, (0.5, 0.8)),
    Tissue("patellar", 39.6, 3.5, (0.6, 1.0)),
    Tissue("femoral", 46.0, 3.4, (0.6, 1.0)),
    Tissue("tibial", 42.5, 5.5, (0.6, 1.0)),
    Tissue("superficial", 53.4, 3.8, (0.6, 1.0)),
    Tissue("deep", 32.0, 2.3, (0.6, 1.0)),
    Tissue("meniscus", 27.5, 4.0, (0.4, 0.8)),
)


@dataclass(frozen=True)
class PhantomSpec:
    ny: int = 64
    nx: int = 64
    n_objects: int = 8
    tissue_table: tuple = field(default=DEFAULT_TISSUES)
    seed: int = 0

    def __post_init__(self):
        if self.ny < 1 or self.nx < 1:
            raise ValueError("phantom size must be positive")
        if self.n_objects < 1:
            raise ValueError("phantom needs at least one object")
        if not self.tissue_table:
            raise ValueError("empty tissue table")
        for tis in self.tissue_table:
            lo, hi = tis.t2_mean_ms - 3 * tis.t2_sd_ms, tis.t2_mean_ms + 3 * tis.t2_sd_ms
            if lo < T2_MIN or hi > T2_MAX or tis.t2_sd_ms < 0:
                raise ValueError(f"tissue {tis.name!r}: T2 mean +- 3 sd leaves [{T2_MIN}, {T2_MAX}]")
            a, b = tis.i0_range
            if not (0 < a <= b <= 1):
                raise ValueError(f"tissue {tis.name!r}: i0_range must lie in (0, 1]")


def _ellipse(yy, xx, cy, cx, ay, ax):
    return ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0


def make_phantom(spec: PhantomSpec) -> ParamMaps:
    """Paint ``n_objects`` ellipses / half-annuli; later objects overwrite earlier ones.

    Object 1 is a large body ellipse made of the first tissue in the table;
    the rest draw their tissue uniformly from the remaining entries. Each
    object gets one T2 draw from its tissue distribution and one I0 draw.
    ROI labels are tissue classes: 1 + the tissue's index in the table.
    """
    rng = np.random.default_rng(spec.seed)
    ny, nx = spec.ny, spec.nx
    yy, xx = np.mgrid[0:ny, 0:nx].astype(np.float64)
    i0 = np.zeros((ny, nx))
    t2 = np.full((ny, nx), T2_MIN)
    labels = np.zeros((ny, nx), dtype=np.int32)
    tissues = spec.tissue_table

    for obj in range(1, spec.n_objects + 1):
        if obj == 1:
            k = 0
            cy = ny / 2 + rng.uniform(-0.05, 0.05) * ny
            cx = nx / 2 + rng.uniform(-0.05, 0.05) * nx
            region = _ellipse(yy, xx, cy, cx, rng.uniform(0.36, 0.45) * ny,
                              rng.uniform(0.36, 0.45) * nx)
        else:
            k = 1 + int(rng.integers(len(tissues) - 1)) if len(tissues) > 1 else 0
            cy = rng.uniform(0.25, 0.75) * ny
            cx = rng.uniform(0.25, 0.75) * nx
            ay = rng.uniform(0.06, 0.2) * ny
            ax = rng.uniform(0.06, 0.2) * nx
            if rng.random() < 0.5:
                region = _ellipse(yy, xx, cy, cx, ay, ax)
            else:
                thick = rng.uniform(0.3, 0.6)
                ring = _ellipse(yy, xx, cy, cx, ay, ax) & ~_ellipse(
                    yy, xx, cy, cx, ay * thick, ax * thick)
                side = rng.integers(4)
                half = (yy < cy, yy >= cy, xx < cx, xx >= cx)[side]
                region = ring & half
        tis = tissues[k]
        t2_val = float(np.clip(rng.normal(tis.t2_mean_ms, tis.t2_sd_ms), T2_MIN, T2_MAX))
        i0_val = float(rng.uniform(*tis.i0_range))
        i0[region] = i0_val
        t2[region] = t2_val
        labels[region] = k + 1
    return ParamMaps(i0, t2, labels)


def tissue_names(spec: PhantomSpec) -> dict[int, str]:
    return {i + 1: t.name for i, t in enumerate(spec.tissue_table)}


def synthesize_echoes(maps: ParamMaps, te_ms, noise_sd: float = 0.0, seed: int = 0) -> EchoSeries:
    """Noiseless mono-exponential echoes plus i.i.d. complex Gaussian noise."""
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    te = np.asarray(te_ms, dtype=np.float64)
    i0 = np.asarray(maps.i0, dtype=np.float64)
    t2 = np.maximum(np.asarray(maps.t2_ms, dtype=np.float64), T2_MIN)
    data = (i0 * np.exp(-te[:, None, None] / t2)).astype(np.complex128)
    if noise_sd > 0:
        rng = np.random.default_rng(seed)
        data = data + noise_sd * (rng.standard_normal(data.shape)
                                  + 1j * rng.standard_normal(data.shape))
    return EchoSeries(te, data)
