"""Time-varying 1D variable-density random ky-line masks (ky-t incoherent sampling)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _center_count(ny: int, center_frac: float) -> int:
    # ceil with a guard against float noise such as 0.05 * 200 = 10.000000000000002
    return int(math.ceil(round(center_frac * ny, 9)))


def line_budget(ny: int, r_target: float) -> int:
    """Lines per echo: ny / R rounded half-up."""
    return int(math.floor(ny / r_target + 0.5))


def center_block(ny: int, center_frac: float) -> np.ndarray:
    n_center = _center_count(ny, center_frac)
    start = ny // 2 - n_center // 2
    return np.arange(start, start + n_center)


def density_weights(ny: int, alpha: float = 2.0) -> np.ndarray:
    """w(k) = (1 - |k - kc| / kmax)^alpha with kc = ny // 2.

    kmax is one more than the largest distance from kc so that the outermost
    line keeps a small non-zero weight.
    """
    k = np.arange(ny)
    kc = ny // 2
    kmax = max(kc, ny - 1 - kc) + 1
    return (1.0 - np.abs(k - kc) / kmax) ** alpha


@dataclass(frozen=True)
class MaskSet:
    """Per-echo binary ky-line masks ``lines[t, ny]``."""

    lines: np.ndarray
    r_target: float
    center_frac: float
    seed: int
    alpha: float = 2.0

    def __post_init__(self):
        lines = np.asarray(self.lines).astype(np.uint8)
        if lines.ndim != 2:
            raise ValueError("mask lines must be [t, ny]")
        lines.flags.writeable = False
        object.__setattr__(self, "lines", lines)

    @property
    def t(self) -> int:
        return self.lines.shape[0]

    @property
    def ny(self) -> int:
        return self.lines.shape[1]

    def to_header(self, with_lines: bool = True) -> dict:
        h = {
            "r_target": float(self.r_target),
            "center_frac": float(self.center_frac),
            "seed": int(self.seed),
            "alpha": float(self.alpha),
        }
        if with_lines:
            h["lines"] = self.lines.tolist()
        return h

    @classmethod
    def from_header(cls, h: dict, lines=None) -> "MaskSet":
        lines = h["lines"] if lines is None else lines
        return cls(np.asarray(lines), h["r_target"], h["center_frac"], h["seed"], h["alpha"])

    def __eq__(self, other):
        if not isinstance(other, MaskSet):
            return NotImplemented
        return (np.array_equal(self.lines, other.lines)
                and self.to_header() == other.to_header())

    __hash__ = None


def make_maskset(ny: int, t: int, r_target: float, center_frac: float = 0.05,
                 seed: int = 0, alpha: float = 2.0) -> MaskSet:
    """Draw ``t`` independent ky-line masks sharing a fully sampled center block.

    Each echo draws ``round(ny / r_target) - n_center`` extra lines without
    replacement, weighted by :func:`density_weights`, using a generator keyed
    on ``(seed, echo index)``.
    """
    if r_target < 1:
        raise ValueError("r_target must be >= 1")
    if ny < 1 or t < 1:
        raise ValueError("ny and t must be positive")
    budget = line_budget(ny, r_target)
    center = center_block(ny, center_frac)
    if budget < center.size:
        raise ValueError("center exceeds budget")
    free = np.setdiff1d(np.arange(ny), center)
    n_free = budget - center.size
    w = density_weights(ny, alpha)[free]

    lines = np.zeros((t, ny), dtype=np.uint8)
    for j in range(t):
        lines[j, center] = 1
        if n_free:
            rng = np.random.default_rng([int(seed), j])
            # Efraimidis-Spirakis weighted reservoir: keep the n_free largest u**(1/w)
            keys = np.log(rng.random(free.size)) / w
            lines[j, free[np.argsort(-keys, kind="stable")[:n_free]]] = 1
    return MaskSet(lines, float(r_target), float(center_frac), int(seed), float(alpha))


def library_seeds(n_sets: int, seed: int) -> list[int]:
    return [int(np.random.SeedSequence([int(seed), i]).generate_state(1, np.uint64)[0] >> 1)
            for i in range(n_sets)]


def make_mask_library(n_sets: int, ny: int, t: int, r_target: float,
                      center_frac: float = 0.05, seed: int = 0,
                      alpha: float = 2.0) -> list[MaskSet]:
    if n_sets < 1:
        raise ValueError("n_sets must be >= 1")
    return [make_maskset(ny, t, r_target, center_frac, s, alpha)
            for s in library_seeds(n_sets, seed)]


def achieved_acceleration(m: MaskSet) -> float:
    return m.ny / float(np.mean(m.lines.sum(axis=1)))
