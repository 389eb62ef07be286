"""Decoder kernel selection: compiled extension when built, numpy otherwise.

Set ``FACSPEECH_PURE_PY=1`` to force the fallback (used by the benchmark to
compare both backends in one process via direct module access).
"""

import os

from . import _viterbi_np

HAVE_COMPILED = False
_impl = _viterbi_np
if not os.environ.get("FACSPEECH_PURE_PY"):
    try:
        from . import _viterbi_cy as _compiled

        _impl = _compiled
        HAVE_COMPILED = True
    except ImportError:
        pass

viterbi_joint = _impl.viterbi_joint
BACKEND = "compiled" if HAVE_COMPILED else "pure-python"
