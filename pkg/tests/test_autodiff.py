import numpy as np
import pytest

import setflow.autodiff as ad
from setflow.autodiff import GradTape, MaskError, NonFiniteError, ShapeError

from gradcheck import numeric_grad, rel_err


def test_linear_identity():
    tape = GradTape()
    out = ad.linear(tape.leaf(np.eye(2)), tape.leaf(np.eye(2)),
                    tape.leaf(np.zeros(2)))
    np.testing.assert_array_equal(out.data, np.eye(2))


def test_linear_hand_sum():
    tape = GradTape()
    out = ad.linear(tape.leaf([[1.0, 2.0]]), tape.leaf([[1.0], [1.0]]),
                    tape.leaf([3.0]))
    np.testing.assert_array_equal(out.data, [[6.0]])


def test_linear_shape_mismatch_reports_dims():
    tape = GradTape()
    with pytest.raises(ShapeError, match=r"\(2, 3\)"):
        ad.linear(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((4, 2))),
                  tape.leaf(np.ones(2)))


def test_linear_grad_matches_finite_differences():
    rng = np.random.default_rng(0)
    arrays = {"x": rng.standard_normal((3, 4)), "w": rng.standard_normal((4, 2)),
              "b": rng.standard_normal(2)}

    def forward():
        tape = GradTape()
        leafs = {k: tape.leaf(v, requires_grad=True) for k, v in arrays.items()}
        return float(ad.sum_all(ad.linear(leafs["x"], leafs["w"], leafs["b"])).data[0])

    tape = GradTape()
    leafs = {k: tape.leaf(v, requires_grad=True) for k, v in arrays.items()}
    loss = ad.sum_all(ad.linear(leafs["x"], leafs["w"], leafs["b"]))
    ad.backward(tape, loss)
    numeric = numeric_grad(forward, arrays)
    assert rel_err(leafs["w"].grad, numeric["w"]) < 1e-6
    assert rel_err(leafs["x"].grad, numeric["x"]) < 1e-6
    assert rel_err(leafs["b"].grad, numeric["b"]) < 1e-6


def test_layer_norm_constant_row_is_zero():
    tape = GradTape()
    out = ad.layer_norm(tape.leaf(np.full((1, 5), 3.7)), tape.leaf(np.ones(5)),
                        tape.leaf(np.zeros(5)))
    np.testing.assert_allclose(out.data, 0.0)


def test_layer_norm_already_normalized_row():
    tape = GradTape()
    out = ad.layer_norm(tape.leaf([[1.0, -1.0]]), tape.leaf(np.ones(2)),
                        tape.leaf(np.zeros(2)), eps=1e-15)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-7)


def test_layer_norm_grad_matches_finite_differences():
    rng = np.random.default_rng(1)
    arrays = {"x": rng.standard_normal((2, 5)), "g": rng.standard_normal(5),
              "b": rng.standard_normal(5)}
    weights = rng.standard_normal((2, 5))

    def forward():
        tape = GradTape()
        leafs = {k: tape.leaf(v, requires_grad=True) for k, v in arrays.items()}
        out = ad.layer_norm(leafs["x"], leafs["g"], leafs["b"])
        return float(ad.sum_all(ad.mul(out, tape.constant(weights))).data[0])

    tape = GradTape()
    leafs = {k: tape.leaf(v, requires_grad=True) for k, v in arrays.items()}
    out = ad.layer_norm(leafs["x"], leafs["g"], leafs["b"])
    ad.backward(tape, ad.sum_all(ad.mul(out, tape.constant(weights))))
    numeric = numeric_grad(forward, arrays)
    for name in arrays:
        assert rel_err(leafs[name].grad, numeric[name]) < 1e-5


def test_silu_elu_values():
    tape = GradTape()
    assert ad.silu(tape.leaf([0.0])).data[0] == 0.0
    assert ad.elu(tape.leaf([0.0])).data[0] == 0.0
    assert abs(ad.elu(tape.leaf([-30.0])).data[0] + 1.0) < 1e-9
    assert ad.activation(tape.leaf([0.0]), "silu").data[0] == 0.0
    with pytest.raises(ValueError, match="unknown kind"):
        ad.activation(tape.leaf([0.0]), "gelu")


@pytest.mark.parametrize("kind", ["silu", "elu"])
def test_activation_grad_matches_finite_differences(kind):
    rng = np.random.default_rng(2)
    arrays = {"x": rng.standard_normal((4, 3)) * 2.0}
    weights = rng.standard_normal((4, 3))

    def forward():
        tape = GradTape()
        x = tape.leaf(arrays["x"], requires_grad=True)
        out = ad.activation(x, kind)
        return float(ad.sum_all(ad.mul(out, tape.constant(weights))).data[0])

    tape = GradTape()
    x = tape.leaf(arrays["x"], requires_grad=True)
    ad.backward(tape, ad.sum_all(ad.mul(ad.activation(x, kind), tape.constant(weights))))
    numeric = numeric_grad(forward, arrays)
    assert rel_err(x.grad, numeric["x"]) < 1e-6


def test_masked_softmax_uniform():
    tape = GradTape()
    probs = ad.masked_softmax(tape.leaf(np.zeros((2, 4))), np.ones((2, 4), dtype=bool))
    np.testing.assert_allclose(probs.data, 0.25)


def test_masked_softmax_single_survivor():
    tape = GradTape()
    probs = ad.masked_softmax(tape.leaf([[0.0, 1000.0]]),
                              np.array([[True, False]]))
    np.testing.assert_array_equal(probs.data, [[1.0, 0.0]])


def test_masked_softmax_rows_normalize():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((3, 5)) * 4.0
    mask = rng.random((3, 5)) < 0.5
    mask[:, 2] = True
    tape = GradTape()
    probs = ad.masked_softmax(tape.leaf(logits), mask)
    np.testing.assert_allclose(probs.data.sum(axis=1), 1.0, atol=1e-12)
    assert (probs.data[~mask] == 0.0).all()


def test_masked_softmax_fully_masked_row_names_row():
    tape = GradTape()
    mask = np.array([[True, True], [False, False]])
    with pytest.raises(MaskError, match="row 1"):
        ad.masked_softmax(tape.leaf(np.zeros((2, 2))), mask)
    out = ad.masked_softmax(tape.leaf(np.zeros((2, 2))), mask, allow_empty=True)
    np.testing.assert_array_equal(out.data[1], [0.0, 0.0])


def test_masked_softmax_grad_matches_finite_differences():
    rng = np.random.default_rng(4)
    arrays = {"x": rng.standard_normal((3, 4))}
    mask = np.array([[True, True, False, True]] * 3)
    weights = rng.standard_normal((3, 4))

    def forward():
        tape = GradTape()
        x = tape.leaf(arrays["x"], requires_grad=True)
        probs = ad.masked_softmax(x, mask)
        return float(ad.sum_all(ad.mul(probs, tape.constant(weights))).data[0])

    tape = GradTape()
    x = tape.leaf(arrays["x"], requires_grad=True)
    probs = ad.masked_softmax(x, mask)
    ad.backward(tape, ad.sum_all(ad.mul(probs, tape.constant(weights))))
    numeric = numeric_grad(forward, arrays)
    assert rel_err(x.grad, numeric["x"]) < 1e-6


def test_backward_linear_loss_grad_structure():
    # loss = sum(x @ w): d/dw[k, j] = sum_i x[i, k], identical across columns j
    rng = np.random.default_rng(5)
    x_val = rng.standard_normal((3, 4))
    tape = GradTape()
    x = tape.leaf(x_val)
    w = tape.leaf(rng.standard_normal((4, 2)), requires_grad=True)
    b = tape.leaf(np.zeros(2))
    ad.backward(tape, ad.sum_all(ad.linear(x, w, b)))
    expected = np.repeat(x_val.sum(axis=0)[:, None], 2, axis=1)
    np.testing.assert_allclose(w.grad, expected, atol=1e-12)


def test_backward_rejects_nonscalar_loss():
    tape = GradTape()
    out = ad.scale(tape.leaf(np.ones((2, 2)), requires_grad=True), 2.0)
    with pytest.raises(ShapeError, match="scalar"):
        ad.backward(tape, out)


def test_unused_parameter_gets_no_gradient():
    tape = GradTape()
    used = tape.leaf(np.ones(3), requires_grad=True)
    unused = tape.leaf(np.ones(3), requires_grad=True)
    ad.backward(tape, ad.sum_all(used))
    np.testing.assert_array_equal(used.grad, np.ones(3))
    assert unused.grad is None  # reported as exact zeros by collect_grads


def test_tape_replay_gives_identical_gradients():
    rng = np.random.default_rng(6)
    tape = GradTape()
    x = tape.leaf(rng.standard_normal((3, 3)), requires_grad=True)
    loss = ad.sum_all(ad.silu(ad.mul(x, x)))
    ad.backward(tape, loss)
    first = x.grad.copy()
    ad.backward(tape, loss)
    np.testing.assert_array_equal(first, x.grad)


def test_forward_determinism_bit_identical():
    rng = np.random.default_rng(7)
    x_val = rng.standard_normal((4, 4))

    def run():
        tape = GradTape()
        x = tape.leaf(x_val)
        return ad.silu(ad.layer_norm(x, tape.leaf(np.ones(4)),
                                     tape.leaf(np.zeros(4)))).data

    np.testing.assert_array_equal(run(), run())


def test_nonfinite_forward_rejected():
    tape = GradTape()
    x = tape.leaf([700.0, 710.0])
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        ad.mul(ad.scale(x, 1e300), ad.scale(x, 1e300))


def test_gradients_accumulate_across_shared_use():
    tape = GradTape()
    x = tape.leaf(np.ones(3), requires_grad=True)
    loss = ad.sum_all(ad.add(x, x))
    ad.backward(tape, loss)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_tensor_rank_bounds():
    tape = GradTape()
    with pytest.raises(ShapeError):
        tape.leaf(np.ones((2, 2, 2, 2)))
    with pytest.raises(ShapeError):
        tape.leaf(3.0)


def _random_op_case(rng):
    """One randomized FD check over the reshaping/attention op set."""
    n, p, q, r = (int(rng.integers(2, 5)) for _ in range(4))
    cases = []
    a3 = rng.standard_normal((n, p, q))
    b3 = rng.standard_normal((n, q, r))
    cases.append(("bmm", {"a": a3, "b": b3},
                  lambda lf: ad.bmm(lf["a"], lf["b"])))
    cases.append(("transpose", {"a": a3},
                  lambda lf: ad.transpose_last2(lf["a"])))
    cases.append(("reshape", {"a": a3},
                  lambda lf: ad.reshape(lf["a"], (n * p, q))))
    m2 = rng.standard_normal((p, q))
    n2 = rng.standard_normal((p, r))
    cases.append(("concat", {"a": m2, "b": n2},
                  lambda lf: ad.concat_cols([lf["a"], lf["b"]])))
    cases.append(("slice", {"a": m2},
                  lambda lf: ad.slice_cols(lf["a"], 0, max(1, q - 1))))
    cases.append(("tile", {"a": m2},
                  lambda lf: ad.tile_batch(lf["a"], 3)))
    table = rng.standard_normal((5, q))
    ids = rng.integers(0, 5, size=p)
    cases.append(("embed", {"a": table},
                  lambda lf: ad.embed_rows(lf["a"], ids)))
    heads = 2
    h3 = rng.standard_normal((n, p, 2 * q))
    cases.append(("split_heads", {"a": h3},
                  lambda lf: ad.split_heads(lf["a"], heads)))
    h3m = rng.standard_normal((n * heads, p, q))
    cases.append(("merge_heads", {"a": h3m},
                  lambda lf: ad.merge_heads(lf["a"], heads)))
    for fn in (ad.sigmoid, ad.tanh, ad.softplus, ad.relu):
        cases.append((fn.__name__, {"a": rng.standard_normal((p, q)) * 2.0 + 0.05},
                      lambda lf, fn=fn: fn(lf["a"])))
    for fn in (ad.add, ad.sub, ad.mul):
        cases.append((fn.__name__, {"a": m2, "b": rng.standard_normal((p, q))},
                      lambda lf, fn=fn: fn(lf["a"], lf["b"])))
    return cases


@pytest.mark.parametrize("seed", range(5))
def test_structural_op_grads_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    for name, arrays, build in _random_op_case(rng):
        weights = None

        def forward():
            nonlocal weights
            tape = GradTape()
            leafs = {k: tape.leaf(v, requires_grad=True) for k, v in arrays.items()}
            out = build(leafs)
            if weights is None:
                weights = np.random.default_rng(0).standard_normal(out.data.shape)
            return float(ad.sum_all(ad.mul(out, tape.constant(weights))).data[0])

        forward()  # fix the weights
        tape = GradTape()
        leafs = {k: tape.leaf(v, requires_grad=True) for k, v in arrays.items()}
        out = build(leafs)
        ad.backward(tape, ad.sum_all(ad.mul(out, tape.constant(weights))))
        numeric = numeric_grad(forward, arrays)
        for key in arrays:
            err = rel_err(leafs[key].grad, numeric[key])
            assert err < 1e-4, f"{name}/{key}: rel err {err}"
