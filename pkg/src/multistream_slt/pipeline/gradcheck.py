"""Finite-difference audit of every differentiable operation and the composed tiny model."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .. import experts as ex
from .. import fusion as fu
from ..ctc import ctc_loss_batch, ctc_loss_tensor
from ..numerics import layers as ly
from ..numerics import tensor as tf
from ..numerics.gradcheck import GradReport, finite_diff_report
from ..numerics.layers import EVAL, Mode
from ..numerics.params import ParamStore
from ..numerics.tensor import Tensor

TOL = 1e-4
H = 1e-5

Case = Callable[[np.random.Generator], tuple[ParamStore, Callable[[ParamStore], Tensor]]]


def _weighted(rng: np.random.Generator, shape) -> Callable[[Tensor], Tensor]:
    """A fixed random linear read-out, so no output coordinate has a structurally zero gradient."""
    w = rng.normal(size=shape)
    return lambda y: tf.tsum(y * w)


def _store(rng, **shapes) -> ParamStore:
    s = ParamStore()
    for name, shape in shapes.items():
        s.add(name, rng.normal(size=shape))
    return s


def _away_from_zero(rng, shape, gap=0.2):
    x = rng.normal(size=shape)
    return np.sign(x) * (gap + np.abs(x))


def _unary(op, positive=False, kink=False):
    def case(rng):
        s = ParamStore()
        shape = (3, 4)
        if positive:
            s.add("x", rng.uniform(0.5, 2.0, size=shape))
        elif kink:
            s.add("x", _away_from_zero(rng, shape))
        else:
            s.add("x", rng.normal(size=shape))
        read = _weighted(rng, shape)
        return s, lambda st: read(op(st["x"]))

    return case


def _binary(op, safe_b=False):
    def case(rng):
        s = ParamStore()
        s.add("a", rng.normal(size=(3, 4)))
        s.add("b", _away_from_zero(rng, (4,), 0.5) if safe_b else rng.normal(size=(4,)))
        read = _weighted(rng, (3, 4))
        return s, lambda st: read(op(st["a"], st["b"]))

    return case


def _reduce(op):
    def case(rng):
        s = _store(rng, x=(3, 4, 2))
        read = _weighted(rng, (3, 2))
        return s, lambda st: read(op(st["x"]))

    return case


def _matmul(rng):
    s = _store(rng, a=(2, 3, 4), b=(4, 5))
    read = _weighted(rng, (2, 3, 5))
    return s, lambda st: read(tf.matmul(st["a"], st["b"]))


def _shape_ops(rng):
    s = _store(rng, x=(2, 3, 4), y=(2, 3, 2))
    read = _weighted(rng, (4, 3, 2))
    idx = np.array([2, 0, 0, 1])

    def f(st):
        z = tf.concat([st["x"], st["y"]], axis=-1)  # [2,3,6]
        z = tf.swapaxes(z, 0, 1).reshape(3, 12)
        z = tf.transpose(z)[:, 1:]  # [12,2]
        z = tf.getitem(z, slice(0, 8)).reshape(4, 2, 2)
        z = tf.take(z, idx, axis=0)
        return read(tf.concat([z, z[:, :1]], axis=1))

    return s, f


def _softmax(log=False):
    def case(rng):
        s = _store(rng, x=(3, 5))
        read = _weighted(rng, (3, 5))
        op = tf.log_softmax if log else tf.softmax
        return s, lambda st: read(op(st["x"], axis=-1))

    return case


def _layer_norm(rng):
    s = _store(rng, x=(3, 6), gamma=(6,), beta=(6,))
    read = _weighted(rng, (3, 6))
    return s, lambda st: read(tf.layer_norm(st["x"], st["gamma"], st["beta"]))


def _affine(rng):
    s = _store(rng, x=(2, 3, 4), W=(4, 5), b=(5,))
    read = _weighted(rng, (2, 3, 5))
    return s, lambda st: read(ly.affine(st["x"], st["W"], st["b"]))


def _dropout(rng):
    s = _store(rng, x=(4, 6))
    read = _weighted(rng, (4, 6))
    seed = int(rng.integers(2**31))
    return s, lambda st: read(ly.dropout(st["x"], 0.3, Mode(True, np.random.default_rng(seed))))


def _attention(rng):
    s = ParamStore()
    ly.init_attention(s, "attn", 8, rng)
    s.add("q", rng.normal(size=(2, 3, 8)))
    s.add("kv", rng.normal(size=(2, 5, 8)))
    mask = np.ones((2, 5), dtype=bool)
    mask[1, 3:] = False
    read = _weighted(rng, (2, 3, 8))
    return s, lambda st: read(ly.multi_head_attention(st["q"], st["kv"], st["kv"], st, "attn", 2, mask))


def _encoder_block(rng):
    s = ParamStore()
    ly.init_encoder_block(s, "blk", 8, 16, rng)
    s.add("x", rng.normal(size=(2, 4, 8)))
    mask = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=bool)
    read = _weighted(rng, (2, 4, 8))
    return s, lambda st: read(ly.transformer_encoder_block(st["x"], st, "blk", 2, mask, EVAL, 0.0))


def _ctc(rng):
    s = _store(rng, x=(6, 4))
    target = [1, 2, 2] if rng.random() < 0.5 else [3, 1]
    return s, lambda st: ctc_loss_tensor(tf.log_softmax(st["x"]), target)


def _ctc_batch(rng):
    s = _store(rng, x=(2, 6, 4))
    lengths = (6, 4)
    targets = [[1, 3, 1], [2]]
    return s, lambda st: ctc_loss_batch(tf.log_softmax(st["x"]), targets, lengths)


def _gumbel(rng):
    s = _store(rng, logits=(4, 3))
    noise = ex.sample_gumbel(rng, (4, 3))
    tau = float(rng.uniform(0.5, 2.0))
    read = _weighted(rng, (4, 3))
    return s, lambda st: read(ex.gumbel_softmax_tensor(st["logits"], tau, noise, hard=False))


def _manual_heads(rng):
    cfg = ex.ExpertConfig(d_feat=6, d_face=4, n_gloss=5)
    s = ParamStore()
    s.add("sign.out.W", rng.normal(size=(6, 6)))
    s.add("sign.out.b", rng.normal(size=(6,)))
    s.add("fs.out.W", rng.normal(size=(6, 27)) * 0.3)
    s.add("fs.out.b", rng.normal(size=(27,)))
    frames = rng.normal(size=(7, 6))
    rs, rf = _weighted(rng, (7, 6)), _weighted(rng, (7, 27))

    def f(st):
        h = ex.shared_input(frames, cfg)
        return rs(ex.sign_head(h, st)) + rf(ex.fs_head(h, st))

    return s, f


def _lip(rng):
    cfg = ex.ExpertConfig(d_feat=4, d_face=3, n_gloss=5, lip_hidden=6)
    s = ParamStore()
    s.add("face", rng.normal(size=(11, 3)))
    s.add("lip.conv.W", rng.normal(size=(15, 6)) * 0.5)
    s.add("lip.conv.b", rng.normal(size=(6,)))
    s.add("lip.out.W", rng.normal(size=(6, 40)) * 0.5)
    s.add("lip.out.b", rng.normal(size=(40,)))
    read = _weighted(rng, (ex.lip_length(11), 40))
    return s, lambda st: read(ex.lip_forward_tensor(st["face"], st, cfg))


def _fusion_store(rng, d=8, variant="gated", gate="vector"):
    cfg = fu.FusionConfig(n_gloss=4, k_sign=5, k_fs=6, k_lip=7, d=d, layers=1, heads=2, d_ff=16,
                          dropout=0.0, variant=variant, gate=gate)
    s = ParamStore()
    fu.init_fusion(s, cfg, rng)
    return cfg, s


def _project(rng):
    _, s = _fusion_store(rng)
    sign, fsx, lip = rng.normal(size=(6, 5)), rng.normal(size=(6, 6)), rng.normal(size=(3, 7))
    g = rng.dirichlet(np.ones(3), size=6)
    r1, r2, r3 = (_weighted(rng, (6, 8)) for _ in range(3))

    def f(st):
        es, ef, el = fu.project_and_upsample(sign, fsx, lip, st)
        M = fu.gated_manual_aggregate(es, ef, g, st["fusion.null"])
        return r1(M) + r2(el) + r3(es)

    return _only(s, "fusion.phi_", "fusion.null"), f


def _gate(kind):
    def case(rng):
        s = _store(rng, M=(5, 4), L=(5, 4), W=(8, 4 if kind == "vector" else 1), b=(4 if kind == "vector" else 1,))
        read = _weighted(rng, (5, 4))
        if kind == "static":
            return s, lambda st: read(fu.static_gate(st["M"], st["L"])[1])
        return s, lambda st: read(fu.adaptive_gate(st["M"], st["L"], st["W"], st["b"])[1])

    return case


def _concat_mlp(rng):
    _, s = _fusion_store(rng, variant="concat_mlp")
    s.add("M", rng.normal(size=(5, 8)))
    s.add("L", rng.normal(size=(5, 8)))
    read = _weighted(rng, (5, 8))
    return _only(s, "fusion.mix", "M", "L"), lambda st: read(fu.fusion_concat_mlp(st["M"], st["L"], st))


def _cross_attention(rng):
    _, s = _fusion_store(rng, variant="cross_attention")
    s.add("M", rng.normal(size=(2, 5, 8)))
    s.add("L", rng.normal(size=(2, 5, 8)))
    mask = np.array([[1] * 5, [1, 1, 1, 0, 0]], dtype=bool)
    read = _weighted(rng, (2, 5, 8))
    return _only(s, "fusion.xattn", "M", "L"), lambda st: read(fu.fusion_cross_attention(st["M"], st["L"], st, 2, mask))


def _fuse_encode(rng):
    cfg, s = _fusion_store(rng)
    s.add("H", rng.normal(size=(6, 8)))
    return _only(s, "fusion.enc", "fusion.ln_f", "fusion.out", "H"), lambda st: ctc_loss_tensor(
        fu.fuse_encode(st["H"], st, cfg)[1], [1, 2, 1]
    )


def _only(store: ParamStore, *prefixes) -> ParamStore:
    return ParamStore({n: p for n, p in store.params.items() if n.startswith(prefixes)})


OP_CASES: dict[str, Case] = {
    "add": _binary(tf.add),
    "sub": _binary(tf.sub),
    "mul": _binary(tf.mul),
    "div": _binary(tf.div, safe_b=True),
    "exp": _unary(tf.exp),
    "log": _unary(tf.log, positive=True),
    "square": _unary(tf.square),
    "sigmoid": _unary(tf.sigmoid),
    "gelu": _unary(tf.gelu),
    "relu": _unary(tf.relu, kink=True),
    "sum": _reduce(lambda x: tf.tsum(x, axis=1)),
    "mean": _reduce(lambda x: tf.mean(x, axis=1)),
    "matmul": _matmul,
    "shape_ops": _shape_ops,
    "softmax": _softmax(),
    "log_softmax": _softmax(log=True),
    "layer_norm": _layer_norm,
    "affine": _affine,
    "dropout": _dropout,
    "attention": _attention,
    "encoder_block": _encoder_block,
    "ctc": _ctc,
    "ctc_batch": _ctc_batch,
    "gumbel_softmax": _gumbel,
    "manual_heads": _manual_heads,
    "lip": _lip,
    "project_aggregate": _project,
    "gate_vector": _gate("vector"),
    "gate_scalar": _gate("scalar"),
    "gate_static": _gate("static"),
    "concat_mlp": _concat_mlp,
    "cross_attention": _cross_attention,
    "fuse_encode": _fuse_encode,
}


def composed_case(profile: str = "tiny", variant: str = "gated") -> Case:
    """Experts (frozen) feeding the full fusion model, scored by batched gloss CTC."""

    def case(rng):
        from ..synthdata import GenConfig, gen_episode, make_world

        gen = GenConfig(gloss_vocab_size=6, d_feat=8, d_face=8, glosses_per_sentence=(2, 3),
                        frames_per_gloss=(4, 6), seed=int(rng.integers(2**31)))
        world = make_world(gen)
        eps = [gen_episode(gen, i, world) for i in range(2)]
        ecfg = ex.ExpertConfig(d_feat=8, d_face=8, n_gloss=6, lip_hidden=8)
        s = ParamStore()
        ex.init_experts(s, ecfg, rng)
        s.set_frozen("")
        fcfg = fu.fusion_config(profile, n_gloss=6, k_sign=7, dropout=0.0, variant=variant)
        fu.init_fusion(s, fcfg, rng)
        experts = _only(s, *ex.PREFIXES)
        inputs = fu.collate([fu.expert_outputs(ep, experts, ecfg) for ep in eps])
        targets = [ep.gloss_target for ep in eps]

        def f(st):
            state = fu.fusion_forward(inputs, st, fcfg)
            return ctc_loss_batch(state.log_probs, targets, inputs.lengths) * 0.1

        return s, f

    return case


@dataclass
class GradcheckResult:
    tol: float
    reports: dict[str, GradReport] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max((r.max_rel_err for r in self.reports.values()), default=0.0)

    @property
    def frozen_ok(self) -> bool:
        return all(v == 0.0 for r in self.reports.values() for v in r.frozen_grad_max.values())

    @property
    def passed(self) -> bool:
        return self.worst < self.tol and self.frozen_ok

    def lines(self) -> list[str]:
        out = []
        for case, rep in self.reports.items():
            for name, err in rep.per_param.items():
                flag = "ok" if err < self.tol else "FAIL"
                out.append(f"{case:20s} {name:32s} rel_err={err:.2e} {flag}")
            for name, g in rep.frozen_grad_max.items():
                flag = "ok" if g == 0.0 else "FAIL"
                out.append(f"{case:20s} {name:32s} frozen max|grad|={g:.1e} {flag}")
        return out


def _merge(into: GradReport | None, rep: GradReport) -> GradReport:
    if into is None:
        return rep
    for k, v in rep.per_param.items():
        into.per_param[k] = max(into.per_param.get(k, 0.0), v)
    for k, v in rep.frozen_grad_max.items():
        into.frozen_grad_max[k] = max(into.frozen_grad_max.get(k, 0.0), v)
    into.coords_checked += rep.coords_checked
    return into


def run_gradcheck(
    profile: str = "tiny",
    seeds: Iterable[int] = range(50),
    tol: float = TOL,
    cases: Iterable[str] | None = None,
    composed: bool = True,
    composed_coords: int = 2,
) -> GradcheckResult:
    """Check each op case on every seed, keeping the worst error per parameter.

    Op cases probe every coordinate. The composed model probes a random sample
    of ``composed_coords`` coordinates per parameter per seed.
    """
    seeds = list(seeds)
    chosen = dict(OP_CASES) if cases is None else {k: OP_CASES[k] for k in cases}
    result = GradcheckResult(tol)
    for name, build in chosen.items():
        rep = None
        for seed in seeds:
            rng = np.random.default_rng([seed, 404])
            store, f = build(rng)
            rep = _merge(rep, finite_diff_report(f, store, H, rng=rng))
        result.reports[name] = rep
    if composed:
        for variant in fu.VARIANTS:
            rep = None
            for seed in seeds:
                rng = np.random.default_rng([seed, 405])
                store, f = composed_case(profile, variant)(rng)
                rep = _merge(rep, finite_diff_report(f, store, H, max_coords=composed_coords, rng=rng))
            result.reports[f"model[{variant}]"] = rep
    return result
