import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from multistream_slt.numerics import (
    EVAL,
    Mode,
    NumericalError,
    OptimizerState,
    ParamStore,
    Tensor,
    adamw_step,
    clip_grad_norm,
    dropout_mask,
    finite_diff_check,
    layer_norm,
    load_store,
    log_softmax_array,
    lr_schedule,
    multi_head_attention,
    positional_encoding,
    read_archive,
    save_store,
    softmax_stable,
    write_archive,
)
from multistream_slt.numerics import tensor as tf
from multistream_slt.numerics.archive import ArchiveError
from multistream_slt.numerics.gradcheck import rel_err, rounding_noise
from multistream_slt.numerics.layers import init_attention


def test_positional_encoding_values():
    pe = positional_encoding(3, 4)
    np.testing.assert_allclose(pe[0], [0, 1, 0, 1], atol=1e-15)
    np.testing.assert_allclose(pe[1], [math.sin(1), math.cos(1), math.sin(0.01), math.cos(0.01)], atol=1e-12)
    with pytest.raises(ValueError):
        positional_encoding(3, 5)


def test_layer_norm_two_values():
    x = Tensor(np.array([[1.0, 3.0]]))
    y = layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)))
    np.testing.assert_allclose(y.data, [[-1.0, 1.0]], atol=1e-5)
    with pytest.raises(ValueError):
        layer_norm(Tensor(np.ones((1, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


def test_pointwise_reference_values():
    assert float(tf.gelu(Tensor(np.array(1.0))).data) == pytest.approx(0.8413, abs=1e-3)
    assert float(tf.sigmoid(Tensor(np.array(0.0))).data) == 0.5
    big = tf.sigmoid(Tensor(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(big)) and big[0] == pytest.approx(0.0) and big[1] == 1.0
    np.testing.assert_allclose(softmax_stable([1000.0, 1000.0]), [0.5, 0.5])
    with pytest.raises(ValueError):
        softmax_stable([np.nan, 0.0])


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
@settings(max_examples=50)
def test_softmax_rows_sum_to_one(z):
    np.testing.assert_allclose(softmax_stable(z).sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.exp(log_softmax_array(z)).sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax_stable(z + 7.0), softmax_stable(z), atol=1e-12)


def test_broadcast_gradients_reduce_to_shape():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.arange(3.0), requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_allclose(a.grad, np.tile(np.arange(3.0), (2, 1)))
    np.testing.assert_allclose(b.grad, [2.0, 2.0, 2.0])


def one_param_store(values, **flags):
    s = ParamStore()
    s.add("w", np.array(values, dtype=float), **flags)
    return s


def test_adamw_first_step_is_signed_lr():
    s = one_param_store([1.0, -2.0])
    s["w"].grad = np.array([0.5, -3.0])
    opt = OptimizerState(lr=0.1, weight_decay=0.01, clip_norm=None)
    adamw_step(s, opt)
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.array([1.0, -1.0])
    np.testing.assert_allclose(s["w"].data, expected, atol=1e-6)


def test_adamw_decay_exempt_and_frozen():
    s = ParamStore()
    s.add("gain", np.array([2.0]), decay_exempt=True)
    s.add("fixed", np.array([5.0]), frozen=True)
    s["gain"].grad = np.array([0.0])
    adamw_step(s, OptimizerState(lr=0.5, weight_decay=0.5))
    assert s["gain"].data[0] == 2.0
    assert s["fixed"].data[0] == 5.0


def test_adamw_rejects_non_finite():
    s = one_param_store([1.0])
    s["w"].grad = np.array([np.nan])
    with pytest.raises(NumericalError):
        adamw_step(s, OptimizerState())


@given(arrays(np.float64, 6, elements=st.floats(-100, 100)), st.floats(0.1, 5.0))
@settings(max_examples=50)
def test_clipping_bounds_global_norm(g, max_norm):
    s = ParamStore()
    s.add("a", np.zeros(4))
    s.add("b", np.zeros(2))
    s["a"].grad, s["b"].grad = g[:4].copy(), g[4:].copy()
    before, after = clip_grad_norm(s, max_norm)
    assert before == pytest.approx(np.linalg.norm(g))
    now = math.sqrt(float(np.sum(s["a"].grad ** 2) + np.sum(s["b"].grad ** 2)))
    assert now <= max_norm * (1 + 1e-9)
    assert after == pytest.approx(now, abs=1e-9)


def test_lr_schedule_shape():
    assert lr_schedule(0, 100, 10, 1.0, 0.0) == 0.0
    assert lr_schedule(5, 100, 10, 1.0, 0.0) == pytest.approx(0.5)
    assert lr_schedule(10, 100, 10, 1.0, 0.0) == pytest.approx(1.0)
    assert lr_schedule(55, 100, 10, 1.0, 0.2) == pytest.approx(0.6)
    assert lr_schedule(100, 100, 10, 1.0, 0.2) == 0.2
    with pytest.raises(ValueError):
        lr_schedule(0, 10, 10)


def test_dropout_mask_statistics():
    m = dropout_mask((200_000,), 0.1, np.random.default_rng(0))
    assert abs(m.mean() - 1.0) < 0.01
    assert set(np.unique(m)) <= {0.0, 1 / 0.9}
    assert np.all(dropout_mask((4,), 0.1, train=False) == 1.0)
    with pytest.raises(ValueError):
        dropout_mask((4,), 1.0)
    with pytest.raises(ValueError):
        Mode(train=True).generator()


def attention_store(d=4):
    s = ParamStore()
    init_attention(s, "att", d, np.random.default_rng(0))
    return s


def test_attention_single_key_returns_projected_value():
    s = attention_store()
    rng = np.random.default_rng(1)
    q = Tensor(rng.normal(size=(3, 4)))
    kv = Tensor(rng.normal(size=(1, 4)))
    out, w = multi_head_attention(q, kv, kv, s, "att", heads=2, return_weights=True)
    np.testing.assert_allclose(w, 1.0)
    v = kv.data @ s["att.v.W"].data + s["att.v.b"].data
    expected = v @ s["att.o.W"].data + s["att.o.b"].data
    np.testing.assert_allclose(out.data, np.repeat(expected, 3, axis=0), atol=1e-12)


def test_attention_mask_hides_padding():
    s = attention_store()
    rng = np.random.default_rng(2)
    q = Tensor(rng.normal(size=(2, 4)))
    k = rng.normal(size=(3, 4))
    mask = np.array([True, True, False])
    a = multi_head_attention(q, Tensor(k), Tensor(k), s, "att", 2, key_mask=mask)
    k2 = k.copy()
    k2[2] = 99.0
    b = multi_head_attention(q, Tensor(k2), Tensor(k2), s, "att", 2, key_mask=mask)
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)
    with pytest.raises(ValueError):
        multi_head_attention(q, Tensor(k), Tensor(k), s, "att", heads=3)


def test_finite_difference_of_quadratic():
    s = one_param_store([0.3, -1.2, 2.0])
    assert finite_diff_check(lambda st_: tf.tsum(tf.square(st_["w"])), s) < 1e-8
    # a term hidden from the tape is a wrong gradient and must be caught
    leaky = lambda st_: tf.tsum(tf.square(st_["w"])) + Tensor(st_["w"].data.sum())
    assert finite_diff_check(leaky, s) > 0.1


def test_rel_err_forgives_only_rounding():
    assert rel_err(1.0e-8, 1.001e-8, noise=rounding_noise(1.1, 1.1, 1e-5)) == 0.0
    assert rel_err(1.0e-8, 1.001e-8) > 1e-4
    assert rel_err(1.0, 1.01, noise=rounding_noise(1.1, 1.1, 1e-5)) == pytest.approx(0.01 / 2.01, rel=1e-6)


def test_archive_roundtrip_keeps_flags(tmp_path):
    s = ParamStore()
    s.add("enc.W", np.arange(6.0).reshape(2, 3), stage="experts")
    s.add("ln.gamma", np.ones(3), decay_exempt=True, frozen=True)
    save_store(tmp_path / "m.ckpt", s, {"note": "x"})
    back, meta = load_store(tmp_path / "m.ckpt")
    assert meta["note"] == "x"
    assert back.digest() == s.digest()
    assert back.params["ln.gamma"].frozen and back.params["ln.gamma"].decay_exempt
    assert back.params["enc.W"].stage == "experts"


def test_archive_rejects_corruption(tmp_path):
    path = tmp_path / "a.bin"
    write_archive(path, {"x": np.zeros(2)})
    raw = path.read_bytes()
    (tmp_path / "b.bin").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "c.bin").write_bytes(raw + b"\0")
    for name in ("b.bin", "c.bin"):
        with pytest.raises(ArchiveError):
            read_archive(tmp_path / name)


def test_digest_is_order_independent_and_sensitive():
    a, b = ParamStore(), ParamStore()
    a.add("x", np.zeros(2))
    a.add("y", np.ones(2))
    b.add("y", np.ones(2))
    b.add("x", np.zeros(2))
    assert a.digest() == b.digest()
    b["x"].data[0] = 1e-300
    assert a.digest() != b.digest()
    assert EVAL.train is False
