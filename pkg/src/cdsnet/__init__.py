"""Complex-valued networks with co-domain scale equivariance and invariance."""

from .ctensor import ComplexScalar, ComplexTensor, Rng
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"
