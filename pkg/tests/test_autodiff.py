"""Numeric-core tests: every differentiable op against independent oracles."""

import math

import numpy as np
import pytest

from tacticraft import autodiff as ad
from tacticraft.autodiff import LstmParams, Tensor
from tacticraft.errors import DimensionError, InvalidMaskError, NonFiniteError
from tacticraft.gradcheck import finite_diff_check


def test_tensor_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])


def test_tensor_shape_invariant():
    t = Tensor(np.zeros((3, 4)), requires_grad=True)
    assert t.grad.shape == t.data.shape
    assert Tensor([1.0]).grad is None


def test_op_flags_nonfinite_result():
    big = Tensor(np.array([700.0, 800.0]))
    with pytest.raises(NonFiniteError):
        ad.exp(big)


# --- matmul -----------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = ad.matmul(Tensor(np.eye(2)), Tensor(a))
    assert np.array_equal(out.data, a)


def test_matmul_selector_row():
    sel = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
    b = Tensor(np.array([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(ad.matmul(sel, b).data,
                          np.array([[5.0, 6.0], [0.0, 0.0]]))


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for t in range(4):
                expected[i, j] += a[i, t] * b[t, j]
    out = ad.matmul(Tensor(a), Tensor(b))
    assert np.abs(out.data - expected).max() < 1e-12


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(DimensionError):
        ad.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


def test_matmul_backward_formulas():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    out = ad.matmul(a, b)
    seed = rng.normal(size=(3, 2))
    out.backward(seed)
    assert np.allclose(a.grad, seed @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ seed)


# --- relu ---------------------------------------------------------------------

def test_relu_definition():
    out = ad.relu(Tensor([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_relu_all_negative_zero_gradient():
    x = Tensor([-3.0, -0.5, -1.0], requires_grad=True)
    out = ad.tsum(ad.relu(x))
    assert np.array_equal(out.data, 0.0)
    out.backward()
    assert np.array_equal(x.grad, np.zeros(3))


def test_relu_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=12) + np.sign(rng.normal(size=12)) * 0.5,
               requires_grad=True)
    report = finite_diff_check(lambda: ad.tsum(ad.mul(ad.relu(x), ad.relu(x))),
                               {"x": x}, eps=1e-5, tolerance=1e-6)
    assert report.passed, str(report)


# --- log_softmax ----------------------------------------------------------------

def test_log_softmax_symmetric_pair():
    out = ad.log_softmax(Tensor([0.0, 0.0]))
    assert np.allclose(out.data, [math.log(0.5)] * 2, atol=1e-15)


def test_log_softmax_forced_by_mask():
    mask = np.array([False, False, True, False])
    out = ad.log_softmax(Tensor([5.0, 1.0, -2.0, 3.0]), mask=mask)
    probs = np.exp(out.data)
    assert probs[2] == pytest.approx(1.0, abs=1e-12)
    assert probs[[0, 1, 3]].max() < 1e-12


def test_log_softmax_direct_summation_oracle():
    logits = np.array([1.0, 2.0, 3.0])
    out = np.exp(ad.log_softmax(Tensor(logits)).data)
    denom = sum(math.exp(v) for v in logits)
    expected = np.array([math.exp(v) / denom for v in logits])
    assert np.abs(out - expected).max() < 1e-12


def test_log_softmax_shift_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=9)
    a = ad.log_softmax(Tensor(x)).data
    b = ad.log_softmax(Tensor(x + 13.25)).data
    assert np.abs(a - b).max() < 1e-12


def test_log_softmax_sums_to_one_large_n():
    rng = np.random.default_rng(4)
    x = rng.normal(size=10_000) * 5
    total = np.exp(ad.log_softmax(Tensor(x)).data).sum()
    assert abs(total - 1.0) < 1e-12


def test_log_softmax_fully_masked_rejected():
    with pytest.raises(InvalidMaskError):
        ad.log_softmax(Tensor([1.0, 2.0]), mask=np.array([False, False]))


def test_log_softmax_masked_gradient_exactly_zero():
    mask = np.array([True, False, True])
    x = Tensor([0.3, 0.9, -0.2], requires_grad=True)
    out = ad.tsum(ad.mul(ad.log_softmax(x, mask=mask), [1.0, 1.0, 2.0]))
    out.backward()
    assert x.grad[1] == 0.0
    assert np.abs(x.grad[[0, 2]]).min() > 0


# --- kl_categorical ---------------------------------------------------------------

def test_kl_identical_is_exactly_zero():
    logits = Tensor([0.4, -1.0, 2.2, 0.0])
    assert ad.kl_categorical(logits, logits).item() == 0.0


def test_kl_direct_summation_oracle():
    p = Tensor([0.0, 0.0])                      # [0.5, 0.5]
    q = Tensor([math.log(0.25), math.log(0.75)])
    expected = 0.5 * math.log(2.0) + 0.5 * math.log(2.0 / 3.0)
    assert ad.kl_categorical(p, q).item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.14384, abs=5e-6)


def test_kl_nonnegative_random_sweep():
    rng = np.random.default_rng(5)
    worst = np.inf
    for _ in range(10_000):
        p = Tensor(rng.normal(size=9) * 3)
        q = Tensor(rng.normal(size=9) * 3)
        worst = min(worst, ad.kl_categorical(p, q).item())
    assert worst >= 0.0


def test_kl_teacher_detached_by_default():
    p = Tensor([0.5, -0.5], requires_grad=True)
    q = Tensor([0.1, 0.2], requires_grad=True)
    ad.kl_categorical(p, q).backward()
    assert np.array_equal(p.grad, np.zeros(2))
    assert np.abs(q.grad).max() > 0


def test_kl_gradient_flows_through_p_when_not_detached():
    p = Tensor([0.5, -0.5], requires_grad=True)
    q = Tensor([0.1, 0.2], requires_grad=True)
    ad.kl_categorical(p, q, detach_p=False).backward()
    assert np.abs(p.grad).max() > 0


def test_kl_shape_mismatch():
    with pytest.raises(DimensionError):
        ad.kl_categorical(Tensor([0.0, 1.0]), Tensor([0.0, 1.0, 2.0]))


def test_kl_rowwise_batch():
    rng = np.random.default_rng(6)
    p = rng.normal(size=(4, 5))
    q = rng.normal(size=(4, 5))
    batched = ad.kl_categorical(Tensor(p), Tensor(q)).data
    each = [ad.kl_categorical(Tensor(p[i]), Tensor(q[i])).item() for i in range(4)]
    assert np.allclose(batched, each, atol=1e-14)


# --- bernoulli helpers ----------------------------------------------------------

def test_bernoulli_kl_oracle():
    # KL(Bern(a) || Bern(b)) computed directly from probabilities
    def direct(a, b):
        return a * math.log(a / b) + (1 - a) * math.log((1 - a) / (1 - b))

    p_logit, q_logit = 0.7, -0.4
    a = 1 / (1 + math.exp(-p_logit))
    b = 1 / (1 + math.exp(-q_logit))
    out = ad.bernoulli_kl(Tensor([p_logit]), Tensor([q_logit])).data[0]
    assert out == pytest.approx(direct(a, b), abs=1e-12)


def test_bernoulli_kl_identical_zero_and_masked_zero():
    x = Tensor([0.3, -2.0])
    assert np.array_equal(ad.bernoulli_kl(x, x).data, [0.0, 0.0])
    y = Tensor([0.5, 1.0])
    masked = ad.bernoulli_kl(x, y, mask=np.array([False, True])).data
    assert masked[0] == 0.0 and masked[1] > 0


def test_bce_with_logits_oracle():
    logit, target = 0.8, 1.0
    p = 1 / (1 + math.exp(-logit))
    out = ad.bce_with_logits(Tensor([logit]), np.array([target])).data[0]
    assert out == pytest.approx(-math.log(p), abs=1e-12)


# --- lstm_cell -------------------------------------------------------------------

def _lstm_params(d_in, d_h, rng=None, scale=0.0):
    def mk(shape, kind):
        if rng is None or kind == "zero":
            return Tensor(np.zeros(shape), requires_grad=rng is not None)
        if kind == "one":
            return Tensor(np.ones(shape), requires_grad=True)
        return Tensor(rng.normal(size=shape) * scale, requires_grad=True)

    return LstmParams(
        w_x=mk((d_in, 4 * d_h), "w"), w_h=mk((d_h, 4 * d_h), "w"),
        b=mk((4 * d_h,), "w"), ln_gain=mk((4 * d_h,), "one" if rng else "zero"),
        ln_bias=mk((4 * d_h,), "w"))


def test_lstm_zero_everything_forced_case():
    p = _lstm_params(3, 5)
    h, c = ad.lstm_cell(Tensor(np.zeros(3)), Tensor(np.zeros(5)),
                        Tensor(np.zeros(5)), p)
    assert np.array_equal(h.data, np.zeros(5))
    assert np.array_equal(c.data, np.zeros(5))


def test_layer_norm_constant_vector_zero_before_affine():
    out = ad.layer_norm(Tensor(np.full(7, 3.25)))
    assert np.abs(out.data).max() < 1e-12


def test_lstm_two_step_unroll_gradient():
    rng = np.random.default_rng(7)
    p = _lstm_params(3, 4, rng=rng, scale=0.4)
    x = [rng.normal(size=(2, 3)) for _ in range(2)]

    def f():
        h, c = Tensor(np.zeros((2, 4))), Tensor(np.zeros((2, 4)))
        for t in range(2):
            h, c = ad.lstm_cell(Tensor(x[t]), h, c, p)
        return ad.tsum(ad.mul(h, h))

    report = finite_diff_check(f, p.tensors(), eps=1e-5, tolerance=1e-5)
    assert report.passed, str(report)


def test_lstm_dimension_mismatch():
    p = _lstm_params(3, 5)
    with pytest.raises(DimensionError):
        ad.lstm_cell(Tensor(np.zeros(4)), Tensor(np.zeros(5)),
                     Tensor(np.zeros(5)), p)


# --- graph invariants -------------------------------------------------------------

def test_backward_accumulates_and_doubles_without_reset():
    w = Tensor([1.0, 2.0], requires_grad=True)
    out = ad.tsum(ad.mul(w, Tensor([3.0, 4.0])))
    out.backward()
    assert np.array_equal(w.grad, [3.0, 4.0])
    out.backward()
    assert np.array_equal(w.grad, [6.0, 8.0])
    w.zero_grad()
    out.backward()
    assert np.array_equal(w.grad, [3.0, 4.0])


def test_backward_through_shared_node_once():
    w = Tensor([2.0], requires_grad=True)
    y = ad.mul(w, 3.0)
    out = ad.tsum(ad.add(y, y))   # d/dw = 6
    out.backward()
    assert np.array_equal(w.grad, [6.0])


def test_frozen_leaves_receive_no_gradient():
    frozen = Tensor([1.0, 2.0], requires_grad=False)
    live = Tensor([3.0, 4.0], requires_grad=True)
    ad.tsum(ad.mul(frozen, live)).backward()
    assert frozen.grad is None
    assert np.array_equal(live.grad, [1.0, 2.0])


def test_no_grad_builds_no_graph():
    w = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        out = ad.mul(w, 2.0)
    assert not out.requires_grad
    with pytest.raises(ValueError):
        out.backward()


def test_detach_stops_gradient():
    w = Tensor([1.0, 2.0], requires_grad=True)
    ad.tsum(ad.mul(w.detach(), w)).backward()
    assert np.array_equal(w.grad, [1.0, 2.0])


def test_deep_graph_iterative_topo():
    # deeper than the default recursion limit would allow
    x = Tensor([1.0], requires_grad=True)
    y = x
    for _ in range(5000):
        y = ad.add(y, 0.001)
    ad.tsum(y).backward()
    assert np.array_equal(x.grad, [1.0])


# --- misc ops through finite differences ------------------------------------------

def test_composite_ops_gradient_sweep():
    rng = np.random.default_rng(8)
    w = Tensor(rng.normal(size=(4, 6)) * 0.5, requires_grad=True)
    x = rng.normal(size=(5, 4))
    mask = np.ones((5, 6), dtype=bool)
    mask[0, 3] = mask[2, 1] = False
    idx = np.array([0, 1, 2, 4, 5])

    def f():
        logits = ad.matmul(Tensor(x), w)
        ce = ad.tmean(ad.cross_entropy(logits, idx, mask=mask))
        ln = ad.tmean(ad.layer_norm(ad.tanh(logits)))
        sp = ad.tmean(ad.softplus(ad.narrow(logits, 1, 0, 3)))
        return ad.add(ad.add(ce, ln), sp)

    report = finite_diff_check(f, {"w": w})
    assert report.passed, str(report)


def test_entity_dot_matches_einsum_and_grads():
    rng = np.random.default_rng(9)
    q = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    k = Tensor(rng.normal(size=(3, 5, 4)), requires_grad=True)
    out = ad.entity_dot(q, k)
    assert np.allclose(out.data, np.einsum("nd,ned->ne", q.data, k.data))
    report = finite_diff_check(
        lambda: ad.tsum(ad.mul(ad.entity_dot(q, k), ad.entity_dot(q, k))),
        {"q": q, "k": k})
    assert report.passed, str(report)
