"""Hot-kernel dispatch.

The compiled ``_ckernels`` extension is used when it imports; otherwise the
numpy implementations in ``_kernels_py`` are used. Set ``SHGREG_PURE_PYTHON=1``
to force the fallback.
"""

import logging
import os

from . import _kernels_py

log = logging.getLogger(__name__)

BACKENDS = {"python": _kernels_py}

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
else:
    BACKENDS["cython"] = _ckernels

if _ckernels is not None and os.environ.get("SHGREG_PURE_PYTHON", "") in ("", "0"):
    BACKEND = "cython"
else:
    BACKEND = "python"

_impl = BACKENDS[BACKEND]
log.debug("shgreg kernels backend: %s", BACKEND)

warp_bilinear = _impl.warp_bilinear
cost_volume = _impl.cost_volume
