"""Spatio-temporal modelling of areal count data.

Submodules: ``lattice`` (regions and contiguity graphs), ``autocorr``
(Moran's I), ``glm`` (negative binomial GLM and LASSO), ``carmodel``
(Bayesian CAR models, DIC, relative risk), ``fusion`` (covariate
assembly), ``synth`` (synthetic scenarios) and ``cli``.
"""

from importlib.metadata import PackageNotFoundError, version

from .errors import ArealRiskError, ConvergenceWarning, InputError, UndefinedStatisticError

try:
    __version__ = version("arealrisk")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = ["ArealRiskError", "ConvergenceWarning", "InputError", "UndefinedStatisticError",
           "__version__"]
