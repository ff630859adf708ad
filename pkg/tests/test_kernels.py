"""Numba and numpy kernel paths must agree to rounding error."""
import numpy as np
import pytest

from setflow.kernels import numpy_impl

try:
    from setflow.kernels import numba_impl
    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False

pytestmark = pytest.mark.skipif(not HAS_NUMBA, reason="numba unavailable")

RNG = np.random.default_rng(42)


def close(a, b):
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)


@pytest.mark.parametrize("name", ["silu", "elu", "sigmoid", "softplus"])
def test_elementwise_fwd_bwd(name):
    x = RNG.standard_normal(512) * 3.0
    g = RNG.standard_normal(512)
    close(getattr(numba_impl, f"{name}_fwd")(x),
          getattr(numpy_impl, f"{name}_fwd")(x))
    ref_in = numpy_impl.sigmoid_fwd(x) if name == "sigmoid" else x
    close(getattr(numba_impl, f"{name}_bwd")(ref_in, g),
          getattr(numpy_impl, f"{name}_bwd")(ref_in, g))


def test_layer_norm_parity():
    x = RNG.standard_normal((40, 17))
    gamma = RNG.standard_normal(17)
    beta = RNG.standard_normal(17)
    g = RNG.standard_normal((40, 17))
    out_a, mean_a, rstd_a = numba_impl.layer_norm_fwd(x, gamma, beta, 1e-5)
    out_b, mean_b, rstd_b = numpy_impl.layer_norm_fwd(x, gamma, beta, 1e-5)
    close(out_a, out_b)
    close(mean_a, mean_b)
    close(rstd_a, rstd_b)
    for a, b in zip(numba_impl.layer_norm_bwd(x, mean_a, rstd_a, gamma, g),
                    numpy_impl.layer_norm_bwd(x, mean_b, rstd_b, gamma, g)):
        close(a, b)


def test_masked_softmax_parity():
    logits = RNG.standard_normal((30, 9)) * 5.0
    mask = RNG.random((30, 9)) < 0.6
    mask[:, 0] = True
    g = RNG.standard_normal((30, 9))
    pa = numba_impl.masked_softmax_fwd(logits, mask.astype(np.uint8))
    pb = numpy_impl.masked_softmax_fwd(logits, mask.astype(np.uint8))
    close(pa, pb)
    assert (pa[~mask] == 0.0).all() and (pb[~mask] == 0.0).all()
    close(numba_impl.masked_softmax_bwd(pa, g), numpy_impl.masked_softmax_bwd(pb, g))


def test_adam_parity():
    p = RNG.standard_normal(1000)
    g = RNG.standard_normal(1000)
    m = RNG.standard_normal(1000) * 0.1
    v = np.abs(RNG.standard_normal(1000)) * 0.1
    for a, b in zip(numba_impl.adam_update(p, g, m, v, 3, 1e-4, 0.9, 0.999, 1e-8),
                    numpy_impl.adam_update(p, g, m, v, 3, 1e-4, 0.9, 0.999, 1e-8)):
        close(a, b)


def test_nn_min_dists_parity():
    a = RNG.standard_normal((200, 6))
    b = RNG.standard_normal((150, 6))
    close(numba_impl.nn_min_dists(a, b, False), numpy_impl.nn_min_dists(a, b, False))
    close(numba_impl.nn_min_dists(a, a, True), numpy_impl.nn_min_dists(a, a, True))
