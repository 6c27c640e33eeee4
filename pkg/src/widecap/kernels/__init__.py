"""Kernel backend selection.

The compiled extension is preferred when it imported cleanly; the numpy
reference backend is always available. Set ``WIDECAP_KERNELS=py`` to force the
fallback or ``WIDECAP_KERNELS=fast`` to require the extension (import fails
loudly if it is missing). Everything downstream goes through the module-level
names re-exported here, so the choice is made exactly once, at import time.
"""

import os

from widecap.kernels import pyref

_requested = os.environ.get("WIDECAP_KERNELS", "auto")

if _requested == "py":
    _impl = pyref
elif _requested == "fast":
    from widecap.kernels import _fast as _impl
elif _requested == "auto":
    try:
        from widecap.kernels import _fast as _impl
    except ImportError:
        _impl = pyref
else:
    raise RuntimeError(
        f"WIDECAP_KERNELS must be one of auto/fast/py, got {_requested!r}"
    )

BACKEND = _impl.BACKEND

gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
softmax_fwd = _impl.softmax_fwd
softmax_bwd = _impl.softmax_bwd
causal_softmax_fwd = _impl.causal_softmax_fwd
causal_softmax_bwd = _impl.causal_softmax_bwd
layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
rope_fwd = _impl.rope_fwd


def backend_name() -> str:
    """Name of the kernel backend selected at import time."""
    return BACKEND
