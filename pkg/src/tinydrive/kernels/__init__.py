"""Integer kernels: the compiled extension when available, numpy otherwise.

Set ``TINYDRIVE_PURE=1`` to force the numpy fallback.
"""

from __future__ import annotations

import os

from . import _pykernels as python

compiled = None
if os.environ.get("TINYDRIVE_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled = None

active = compiled if compiled is not None else python
BACKEND = active.BACKEND

conv1d_ref = active.conv1d_ref
conv1d_fast = active.conv1d_fast
fc_ref = active.fc_ref
fc_fast = active.fc_fast
maxpool1d = active.maxpool1d
requantize = active.requantize
dt_predict_u8 = active.dt_predict_u8
dt_predict_u8_batch = active.dt_predict_u8_batch
TreeWalker = active.TreeWalker


def backends() -> dict:
    """Every importable backend by name."""
    out = {"python": python}
    if compiled is not None:
        out["compiled"] = compiled
    return out
