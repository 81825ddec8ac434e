"""Select the compiled kernels when available, else the numpy fallback.

Set ``DOBSTAB_PURE_PYTHON=1`` to force the fallback.
"""

import os

from dobstab import _pykernels

if os.environ.get("DOBSTAB_PURE_PYTHON", "") not in ("", "0"):
    kernels = _pykernels
else:
    try:
        from dobstab import _ckernels as kernels
    except ImportError:
        kernels = _pykernels

BACKEND = kernels.BACKEND
