"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy
reference is used. Setting ``KINCROWD_PURE_PYTHON=1`` forces the fallback.
"""

from __future__ import annotations

import contextlib
import os

from . import _pykernels

_backend = _pykernels
if os.environ.get("KINCROWD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _backend  # type: ignore[no-redef]
    except ImportError:  # extension not built
        _backend = _pykernels

BACKEND: str = _backend.NAME
interaction_rates = _backend.interaction_rates
link_transport = _backend.link_transport


def available_backends() -> dict:
    """Map backend name -> module for every kernel implementation that imports."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily route the solver through backend ``name``."""
    global interaction_rates, link_transport, BACKEND
    backends = available_backends()
    if name not in backends:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(backends)}")
    saved = interaction_rates, link_transport, BACKEND
    mod = backends[name]
    interaction_rates, link_transport, BACKEND = mod.interaction_rates, mod.link_transport, mod.NAME
    try:
        yield mod
    finally:
        interaction_rates, link_transport, BACKEND = saved
