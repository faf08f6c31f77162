"""Single-coil Cartesian encoding operator E = M F, its adjoint and zero-filling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import EchoSeries, KSpaceSet
from .sampling import MaskSet


def fft2_centered(image: np.ndarray) -> np.ndarray:
    """Unitary 2D DFT over the last two axes with DC at the array center."""
    image = np.asarray(image)
    if image.ndim < 2 or 0 in image.shape[-2:]:
        raise ValueError(f"need a non-empty array with >= 2 dims, got shape {image.shape}")
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(image, axes=axes), norm="ortho"), axes=axes)


def ifft2_centered(kspace: np.ndarray) -> np.ndarray:
    kspace = np.asarray(kspace)
    if kspace.ndim < 2 or 0 in kspace.shape[-2:]:
        raise ValueError(f"need a non-empty array with >= 2 dims, got shape {kspace.shape}")
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(kspace, axes=axes), norm="ortho"), axes=axes)


def apply_mask(kspace: np.ndarray, lines: np.ndarray) -> np.ndarray:
    """Zero every unsampled ky line. ``lines`` is [t, ny], ``kspace`` [..., t, ny, nx]."""
    return kspace * lines[..., :, :, None]


def forward_array(images: np.ndarray, lines: np.ndarray) -> np.ndarray:
    return apply_mask(fft2_centered(images), lines)


def adjoint_array(kspace: np.ndarray, lines: np.ndarray) -> np.ndarray:
    return ifft2_centered(apply_mask(kspace, lines))


@dataclass(frozen=True)
class EncodingOp:
    ny: int
    nx: int
    maskset: MaskSet

    def __post_init__(self):
        if self.maskset.ny != self.ny:
            raise ValueError(f"mask has {self.maskset.ny} ky lines, operator expects {self.ny}")

    def _check(self, shape):
        t, ny, nx = shape
        if (ny, nx) != (self.ny, self.nx):
            raise ValueError(f"image size {(ny, nx)} does not match operator {(self.ny, self.nx)}")
        if t != self.maskset.t:
            raise ValueError(f"{t} echoes but mask-set has {self.maskset.t}")


def forward(op: EncodingOp, series: EchoSeries) -> KSpaceSet:
    """d_j = M_j F i_j for every echo."""
    op._check(series.data.shape)
    k = forward_array(series.data, op.maskset.lines)
    return KSpaceSet(k, op.maskset, series.te_ms)


def adjoint(op: EncodingOp, k: KSpaceSet) -> EchoSeries:
    """Zero-filled reconstruction F^H M_j d_j."""
    op._check(k.data.shape)
    return EchoSeries(k.te_ms, adjoint_array(k.data, op.maskset.lines))


def undersample(series: EchoSeries, maskset: MaskSet) -> tuple[KSpaceSet, EchoSeries]:
    op = EncodingOp(series.ny, series.nx, maskset)
    k = forward(op, series)
    return k, adjoint(op, k)
