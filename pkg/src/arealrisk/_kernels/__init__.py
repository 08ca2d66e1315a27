"""Hot numerical kernels with a compiled backend and a numpy fallback.

The Cython extension ``_core`` is used when it has been built; otherwise
the pure-Python ``_fallback`` module is used. Setting the environment
variable ``AREALRISK_PURE_PYTHON=1`` forces the fallback.
"""

import os

from . import _fallback

if os.environ.get("AREALRISK_PURE_PYTHON", "") not in ("", "0"):
    _impl = _fallback
else:
    try:
        from . import _core as _impl
    except ImportError:  # extension not built
        _impl = _fallback

BACKEND = "cython" if _impl is not _fallback else "python"

car_sweep = _impl.car_sweep
proper_car_gibbs = _impl.proper_car_gibbs
moran_cross_products = _impl.moran_cross_products
ring_crossing_parity = _impl.ring_crossing_parity
ring_on_boundary = _impl.ring_on_boundary
lasso_cd_gram = _impl.lasso_cd_gram

__all__ = [
    "BACKEND",
    "car_sweep",
    "proper_car_gibbs",
    "moran_cross_products",
    "ring_crossing_parity",
    "ring_on_boundary",
    "lasso_cd_gram",
]
