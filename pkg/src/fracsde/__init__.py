"""Numerical toolkit for SDEs with singular drifts driven by rough fBm.

Submodules
----------
``fbm``       kernel, covariance, and path generators for fractional Brownian
              motion with Hurst parameter ``H <= 1/2``
``fraccalc``  Riemann-Liouville fractional calculus on grid functions and the
              kernel-induced operators (forward, inverse, adjoint transfer)
``girsanov``  drift-removal process, change-of-measure weights, diagnostics
``driftsde``  drift field models (smooth / singular / mollified), the Euler
              scheme, flow maps, variational (Jacobian) fields, and the
              approximation-convergence harness
``regimes``   parameter-regime classification and exponent bookkeeping
``verify``    numerical certification of the quantitative estimates
``mc``        deterministic Monte Carlo batching
``cli``       command-line entry point and report emission
"""

__version__ = "0.1.0"

from .fbm import FbmEnsemble, HurstGrid  # noqa: F401
from .mc import McSummary, mc_batch  # noqa: F401
