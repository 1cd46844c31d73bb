import numpy as np
import pytest

from multistream_slt import experts as ex
from multistream_slt.numerics import Mode, ParamStore, Tensor
from multistream_slt.synthdata import FeatureStream

CFG = ex.ExpertConfig(n_gloss=10, dropout=0.0)


def store():
    s = ParamStore()
    ex.init_experts(s, CFG, np.random.default_rng(0))
    return s


def stream(T=12, segments=((0, 6, ex.SIGN), (6, 12, ex.REST))):
    return FeatureStream(np.random.default_rng(1).normal(size=(T, CFG.d_feat)), "manual", segments=segments)


def reaches(out, target):
    stack, seen = [out], set()
    while stack:
        t = stack.pop()
        if t is target:
            return True
        if id(t) not in seen:
            seen.add(id(t))
            stack.extend(t._parents)
    return False


def test_gumbel_softmax_reference_values():
    z = np.array([1.0, 2.0, 0.5])
    np.testing.assert_allclose(ex.gumbel_softmax(z, 1.0, 0.0), np.exp(z) / np.exp(z).sum(), atol=1e-15)
    y = ex.gumbel_softmax([10.0, 0.0, 0.0], 1.0, 0.0)
    assert y[0] == pytest.approx(np.exp(10) / (np.exp(10) + 2), abs=1e-12)
    assert y[1] == pytest.approx(4.54e-5, rel=1e-2)
    sharp = ex.gumbel_softmax([0.1, 0.0, 0.0], 0.01, 0.0)
    assert sharp.max() > 0.999
    with pytest.raises(ValueError):
        ex.gumbel_softmax([0.0, 0.0, 0.0], 0.0, 0.0)


def test_straight_through_forward_is_one_hot():
    logits = Tensor(np.array([[0.3, 1.2, -0.4]]), requires_grad=True)
    y = ex.gumbel_softmax_tensor(logits, 0.5, np.zeros((1, 3)), hard=True)
    np.testing.assert_array_equal(y.data, [[0.0, 1.0, 0.0]])
    (y * Tensor(np.array([[1.0, 2.0, 3.0]]))).sum().backward()
    assert np.abs(logits.grad).sum() > 0


def test_tau_schedule_endpoints():
    assert ex.tau_schedule(0, 100) == 1.0
    assert ex.tau_schedule(99, 100) == pytest.approx(0.1)
    assert ex.tau_schedule(500, 100) == pytest.approx(0.1)


def test_eval_routing_margin_and_ties():
    s = store()
    s["router.cls.W"].data[...] = 0.0
    s["router.cls.b"].data[...] = [50.0, 0.0, 0.0]
    routes = ex.route(stream(), s)
    assert all(np.array_equal(r.g, [1.0, 0.0, 0.0]) for r in routes)
    s["router.cls.b"].data[...] = 0.0
    assert [r.kind for r in ex.route(stream(), s)] == [ex.SIGN, ex.SIGN]
    with pytest.raises(ValueError):
        ex.route(stream(), s, train=True)
    with pytest.raises(ValueError):
        ex.RoutingVector(np.array([0.5, 0.6, 0.0]), 1.0, False)


def test_frame_routing_broadcasts_segments():
    segs = ((0, 2, ex.SIGN), (2, 3, ex.FS))
    routes = [ex.RoutingVector(np.eye(3)[0], 1.0, True), ex.RoutingVector(np.eye(3)[1], 1.0, True)]
    g = ex.frame_routing(4, segs, routes)
    np.testing.assert_array_equal(g, [[1, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])


def test_manual_heads_shapes_and_shared_input():
    s = store()
    sign, fs, h = ex.manual_heads(stream(), s, CFG)
    assert sign.shape == (12, CFG.n_gloss + 1) and fs.shape == (12, 27)
    assert reaches(sign, h) and reaches(fs, h)
    again, _, _ = ex.manual_heads(stream(), s, CFG)
    np.testing.assert_array_equal(sign.data, again.data)


def test_zero_weights_give_uniform_rows():
    s = store()
    for name in ("sign.out.W", "sign.out.b", "fs.out.W", "fs.out.b"):
        s[name].data[...] = 0.0
    sign, fs, _ = ex.manual_heads(stream(), s, CFG)
    np.testing.assert_allclose(sign.data, np.log(1 / (CFG.n_gloss + 1)))
    np.testing.assert_allclose(fs.data, np.log(1 / 27))


def test_dropout_only_in_training():
    cfg = ex.ExpertConfig(n_gloss=10, dropout=0.5)
    a = ex.shared_input(stream().frames, cfg)
    b = ex.shared_input(stream().frames, cfg, Mode(True, np.random.default_rng(0)))
    assert not np.allclose(a.data, b.data)
    with pytest.raises(ValueError):
        ex.shared_input(np.zeros((3, 5)), cfg)


def test_lip_lengths_and_mask():
    assert ex.lip_length(16) == 6
    assert all(ex.lip_length(T) < T for T in range(6, 200))
    with pytest.raises(ValueError):
        ex.lip_length(4)
    m = ex.frame_mask(10, 0.5, np.random.default_rng(0))
    assert m.sum() == 5


def test_lip_forward_eval_matches_tensor_path():
    s = store()
    face = np.random.default_rng(2).normal(size=(16, CFG.d_face))
    out = ex.lip_forward(face, s, CFG)
    assert out.shape == (6, 40)
    np.testing.assert_allclose(out.data, ex.lip_forward_tensor(Tensor(face), s, CFG).data, atol=1e-12)
    train = ex.lip_forward(face, s, CFG, np.random.default_rng(0), train=True)
    assert not np.allclose(out.data, train.data)
    np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-12)


def test_pool_segments_means():
    frames = np.arange(8.0).reshape(4, 2)
    np.testing.assert_allclose(ex.pool_segments(frames, ((0, 2, 0), (2, 4, 2))), [[1, 2], [5, 6]])
    with pytest.raises(ValueError):
        ex.pool_segments(frames, ((2, 2, 0),))
    assert ex.window_segments(20) == ((0, 16, ex.REST), (16, 20, ex.REST))
