import numpy as np
import pytest

from multistream_slt import experts as ex
from multistream_slt import fusion as fu
from multistream_slt.numerics import ParamStore, Tensor, layer_norm
from multistream_slt.synthdata import GenConfig, gen_episode

RNG = np.random.default_rng(0)


def rand(*shape):
    return Tensor(RNG.normal(size=shape))


def fusion_store(**kw):
    cfg = fu.fusion_config("tiny", n_gloss=10, k_sign=11, dropout=0.0, **kw)
    s = ParamStore()
    fu.init_fusion(s, cfg, np.random.default_rng(1))
    return s, cfg


def test_upsample_and_shift_by_hand():
    assert fu.upsample_indices(2, 4).tolist() == [0, 0, 1, 1]
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(fu.upsample(x, 3), x)
    np.testing.assert_allclose(fu.upsample(x, 3, "linear"), x)
    with pytest.raises(ValueError):
        fu.upsample(x, 2)
    seq = np.array([[1.0], [2.0], [3.0], [4.0]])  # a b c d
    assert fu.apply_temporal_shift(seq, 2)[:, 0].tolist() == [1, 1, 1, 2]
    assert fu.apply_temporal_shift(seq, -1)[:, 0].tolist() == [2, 3, 4, 4]
    np.testing.assert_array_equal(fu.apply_temporal_shift(seq, 0), seq)
    np.testing.assert_array_equal(fu.apply_temporal_shift(seq, fu.LEARNED), seq)
    with pytest.raises(ValueError):
        fu.apply_temporal_shift(seq, 4)


def test_shift_then_unshift_recovers_interior():
    x = RNG.normal(size=(20, 3))
    back = fu.apply_temporal_shift(fu.apply_temporal_shift(x, 3), -3)
    np.testing.assert_array_equal(back[3:17], x[3:17])


def test_zero_projection_gives_zero_streams():
    s, _ = fusion_store()
    for name in ("sign", "fs", "lip"):
        s[f"fusion.phi_{name}.W"].data[...] = 0.0
        s[f"fusion.phi_{name}.b"].data[...] = 0.0
    E = fu.project_and_upsample(np.ones((4, 11)), np.ones((4, 27)), np.ones((2, 40)), s)
    assert all(np.all(e.data == 0.0) and e.shape == (4, 64) for e in E)


def test_gated_aggregate_cases():
    Es, Ef, null = rand(3, 4), rand(3, 4), rand(4)
    one = lambda k: np.tile(np.eye(3)[k], (3, 1))
    np.testing.assert_array_equal(fu.gated_manual_aggregate(Es, Ef, one(0), null).data, Es.data)
    np.testing.assert_array_equal(fu.gated_manual_aggregate(Es, Ef, one(2), null).data, np.tile(null.data, (3, 1)))
    half = np.tile([0.5, 0.5, 0.0], (3, 1))
    np.testing.assert_allclose(fu.gated_manual_aggregate(Es, Ef, half, null).data, (Es.data + Ef.data) / 2)


def test_adaptive_gate_cases():
    M, L = rand(3, 4), rand(3, 4)
    W0 = Tensor(np.zeros((8, 4)))
    alpha, H = fu.adaptive_gate(M, L, W0, Tensor(np.full(4, 40.0)))
    np.testing.assert_allclose(H.data, M.data, atol=1e-12)
    alpha, H = fu.adaptive_gate(M, L, W0, Tensor(np.zeros(4)))
    np.testing.assert_allclose(alpha.data, 0.5)
    np.testing.assert_allclose(H.data, (M.data + L.data) / 2)
    _, H = fu.adaptive_gate(M, M, Tensor(RNG.normal(size=(8, 4))), Tensor(np.zeros(4)))
    np.testing.assert_allclose(H.data, M.data, atol=1e-12)
    alpha, H = fu.static_gate(M, L)
    np.testing.assert_allclose(H.data, (M.data + L.data) / 2)


def test_concat_mlp_zero_weights():
    s, _ = fusion_store(variant="concat_mlp")
    for name in s.names("fusion.mix"):
        s[name].data[...] = 0.0
    out = fu.fusion_concat_mlp(rand(5, 64), rand(5, 64), s)
    assert np.all(out.data == 0.0)


def test_cross_attention_cases():
    s, cfg = fusion_store(variant="cross_attention")
    M = rand(5, 64)
    const = Tensor(np.tile(RNG.normal(size=64), (5, 1)))
    a = fu.fusion_cross_attention(M, const, s, cfg.heads)
    # with constant keys/values every query receives the same attended vector
    v = const.data[0] @ s["fusion.xattn.v.W"].data + s["fusion.xattn.v.b"].data
    att = v @ s["fusion.xattn.o.W"].data + s["fusion.xattn.o.b"].data
    expected = layer_norm(M + Tensor(np.tile(att, (5, 1))), s["fusion.xattn_ln.gamma"], s["fusion.xattn_ln.beta"])
    np.testing.assert_allclose(a.data, expected.data, atol=1e-10)
    for name in ("fusion.xattn.v.W", "fusion.xattn.v.b", "fusion.xattn.o.b"):
        s[name].data[...] = 0.0
    out = fu.fusion_cross_attention(M, rand(5, 64), s, cfg.heads)
    ln = layer_norm(M, s["fusion.xattn_ln.gamma"], s["fusion.xattn_ln.beta"])
    np.testing.assert_allclose(out.data, ln.data, atol=1e-12)


@pytest.mark.parametrize("variant", fu.VARIANTS)
def test_forward_on_real_expert_outputs(variant):
    gcfg = GenConfig(gloss_vocab_size=10, glosses_per_sentence=(2, 3))
    ecfg = ex.ExpertConfig(n_gloss=10)
    es = ParamStore()
    ex.init_experts(es, ecfg, np.random.default_rng(0))
    s, cfg = fusion_store(variant=variant)
    for p in es:
        s.add(p.name, p.value.data, frozen=True, stage=ex.STAGE)
    eps = [gen_episode(gcfg, i) for i in range(3)]
    outs = [fu.expert_outputs(ep, s, ecfg) for ep in eps]
    for o in outs:
        np.testing.assert_allclose(np.exp(o.sign).sum(-1), 1.0, atol=1e-12)
        assert o.lip.shape == (o.T, 40)
    batch = fu.collate(outs)
    state = fu.fusion_forward(batch, s, cfg)
    np.testing.assert_allclose(np.exp(state.log_probs.data).sum(-1), 1.0, atol=1e-12)
    # padded frames must not influence valid ones
    single = fu.fusion_forward(outs[0], s, cfg)
    np.testing.assert_allclose(state.log_probs.data[0, : outs[0].T], single.log_probs.data, atol=1e-9)
    assert (state.alpha is not None) == (variant == "gated")
    if variant == "gated":
        # a freshly initialised gate mixes the two streams evenly
        np.testing.assert_allclose(single.alpha.data, 0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        fu.FusionConfig(variant="sum")
    with pytest.raises(ValueError):
        fu.FusionConfig(gate="matrix")
    with pytest.raises(ValueError):
        fu.FusionConfig(d=30, heads=4)
    with pytest.raises(ValueError):
        fu.fusion_config("huge")
    assert fu.fusion_config("default").d == 512
