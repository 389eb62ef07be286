"""Compiled and pure-Python Viterbi kernels must agree bit for bit."""

import numpy as np
import pytest

from facspeech import decoder as dec
from facspeech import kernels, verify
from facspeech.kernels import _viterbi_np

compiled = pytest.importorskip("facspeech.kernels._viterbi_cy",
                               reason="compiled kernel not built")


def _kernel_args(tensor, net, model, beam=0):
    chain = dec.compile_chain(net, model)
    logobs = np.ascontiguousarray(
        np.maximum(tensor.log_values(), dec.LOG_TENSOR_FLOOR))
    args = (logobs,
            chain.state_idx, chain.self_log, chain.adv_log,
            chain.arc_src, chain.arc_dst, chain.start, chain.final,
            chain.state_idx, chain.self_log, chain.adv_log,
            chain.arc_src, chain.arc_dst, chain.start, chain.final,
            beam)
    return args


@pytest.mark.parametrize("beam", [0, 1, 4, 32])
def test_backends_bit_identical(beam):
    rng = np.random.default_rng(100 + beam)
    for _ in range(8):
        tensor, net, model = verify.random_toy_instance(rng)
        args = _kernel_args(tensor, net, model, beam)
        s_py, pa_py, pb_py = _viterbi_np.viterbi_joint(*args)
        s_cy, pa_cy, pb_cy = compiled.viterbi_joint(*args)
        assert s_py == s_cy
        if pa_py is None:
            assert pa_cy is None
        else:
            assert np.array_equal(pa_py, pa_cy)
            assert np.array_equal(pb_py, pb_cy)


def test_selected_backend_matches_fallback():
    rng = np.random.default_rng(200)
    tensor, net, model = verify.random_toy_instance(rng)
    args = _kernel_args(tensor, net, model)
    assert kernels.viterbi_joint(*args)[0] == \
        _viterbi_np.viterbi_joint(*args)[0]


def test_backend_flag_consistent():
    assert kernels.BACKEND in ("compiled", "pure-python")
    assert kernels.HAVE_COMPILED == (kernels.BACKEND == "compiled")
