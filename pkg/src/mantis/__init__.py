"""Model-augmented deep learning for T2 mapping from undersampled multi-echo data."""

from .core import (BadMagicError, ContainerError, EchoSeries, KSpaceSet, NumericError, ParamMaps,
                   QmtError, ShapeMismatchError, TruncatedPayloadError, read_container,
                   write_container)

__version__ = "0.1.0"
