"""Numerical laboratory for the Hermitian two-matrix model with a quartic
interaction potential: finite-n biorthogonal polynomials and correlation
kernels, the constrained three-measure equilibrium problem, the genus-g
spectral curve with periods / Abel map / theta function, the outer
Riemann-Hilbert parametrix, and desk-scale universality checks.
"""

from .config import ModelConfig, eval_potential
from .weights import WeightTable
from . import errors

__version__ = "0.1.0"

__all__ = ["ModelConfig", "eval_potential", "WeightTable", "errors",
           "__version__"]
