from . import tape
from .eigen import jacobi_eigen, sym_eigenvalues
from .functional import (
    ZeroNormWarning,
    cosine_similarity,
    grad_check,
    sample_categorical,
    sample_categorical_rows,
    softmax,
)
from .rng import SeededRng
from .tape import NonFiniteError, Tensor, no_grad

__all__ = [
    "tape",
    "jacobi_eigen",
    "sym_eigenvalues",
    "ZeroNormWarning",
    "cosine_similarity",
    "grad_check",
    "sample_categorical",
    "sample_categorical_rows",
    "softmax",
    "SeededRng",
    "NonFiniteError",
    "Tensor",
    "no_grad",
]
