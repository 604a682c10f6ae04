"""Secure multi-party inference for graph neural networks over secret shares."""

__version__ = "0.1.0"

from .field import MODULUS, FixedPointCodec
from .kernels import BACKEND as KERNEL_BACKEND

__all__ = ["MODULUS", "FixedPointCodec", "KERNEL_BACKEND", "__version__"]
