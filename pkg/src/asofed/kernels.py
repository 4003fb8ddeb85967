"""Backend selection for the fused update kernels.

The compiled extension is used when it imported cleanly; setting
``ASOFED_PURE_PYTHON=1`` forces the numpy fallback.
"""

import os

from . import _pykernels

python = _pykernels

try:
    from . import _ckernels as compiled
except ImportError:  # extension not built
    compiled = None

if compiled is not None and os.environ.get("ASOFED_PURE_PYTHON", "") not in ("1", "true"):
    active = compiled
else:
    active = python

BACKEND = active.NAME

sgd_step = active.sgd_step
asofed_step = active.asofed_step
ema_update = active.ema_update
async_merge = active.async_merge
mix = active.mix
reweight = active.reweight
