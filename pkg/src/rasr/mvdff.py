"""Multi-view feature decoupling and adaptively gated fusion.

The enhanced view chunks each raw feature into S pseudo-tokens and runs
single-query attention with the parsing feature as query (projections are
bias-free so zeroed weights remove the reasoning influence exactly).  The
consistency view works from projected raw features and their pairwise
cosines.  A sigmoid gate interpolates elementwise between the enhanced
concatenation and the tiled consistency vector, and a two-layer head maps
the fusion to the authenticity probability.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import DataError
from .numerics import ParamStore, Tape, Var


def token_dim(d_m: int, s_tokens: int) -> int:
    if d_m % s_tokens != 0:
        raise DataError(f"feature dim {d_m} is not divisible by S={s_tokens}")
    return d_m // s_tokens


def init_mvdff_params(store: ParamStore, config, rng: np.random.Generator) -> None:
    """Add enhancement, consistency, gate, and classifier weights."""
    d_h, d_c = config.d_h, config.d_c
    for m, d_m in (("v", config.d_v), ("t", config.d_t), ("a", config.d_a)):
        t = token_dim(d_m, config.s_tokens)
        store.add(f"mvdff.enh_{m}.wq", _glorot(rng, config.d_p, t))
        store.add(f"mvdff.enh_{m}.wk", _glorot(rng, t, t))
        store.add(f"mvdff.enh_{m}.wv", _glorot(rng, t, t))
        store.add(f"mvdff.enh_{m}.wo", _glorot(rng, t, d_m))
        store.add(f"mvdff.enh_{m}.mlp.w1", _glorot(rng, d_m, d_h))
        store.add(f"mvdff.enh_{m}.mlp.b1", np.zeros(d_h))
        store.add(f"mvdff.enh_{m}.mlp.w2", _glorot(rng, d_h, d_h))
        store.add(f"mvdff.enh_{m}.mlp.b2", np.zeros(d_h))
        store.add(f"mvdff.cons.proj_{m}.w", _glorot(rng, d_m, d_c))
        store.add(f"mvdff.cons.proj_{m}.b", np.zeros(d_c))
    store.add("mvdff.cons.mlp.w1", _glorot(rng, 3 * d_c + 3, d_h))
    store.add("mvdff.cons.mlp.b1", np.zeros(d_h))
    store.add("mvdff.cons.mlp.w2", _glorot(rng, d_h, d_h))
    store.add("mvdff.cons.mlp.b2", np.zeros(d_h))
    store.add("mvdff.gate.w1", _glorot(rng, d_h, d_h))
    store.add("mvdff.gate.b1", np.zeros(d_h))
    store.add("mvdff.gate.w2", _glorot(rng, d_h, 3 * d_h))
    store.add("mvdff.gate.b2", np.zeros(3 * d_h))
    store.add("mvdff.cls.w1", _glorot(rng, 3 * d_h, d_h))
    store.add("mvdff.cls.b1", np.zeros(d_h))
    store.add("mvdff.cls.w2", _glorot(rng, d_h, 1))
    store.add("mvdff.cls.b2", np.zeros(1))


def init_simple_fusion_params(store: ParamStore, config, rng: np.random.Generator) -> None:
    """Concat+MLP replacement used by the fusion ablation."""
    d_in = config.d_v + config.d_t + config.d_a + 3 * config.d_p
    store.add("fusion_simple.w1", _glorot(rng, d_in, config.d_h))
    store.add("fusion_simple.b1", np.zeros(config.d_h))
    store.add("fusion_simple.w2", _glorot(rng, config.d_h, 3 * config.d_h))
    store.add("fusion_simple.b2", np.zeros(3 * config.d_h))
    store.add("mvdff.cls.w1", _glorot(rng, 3 * config.d_h, config.d_h))
    store.add("mvdff.cls.b1", np.zeros(config.d_h))
    store.add("mvdff.cls.w2", _glorot(rng, config.d_h, 1))
    store.add("mvdff.cls.b2", np.zeros(1))


def _glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


def enhance_batch(
    tape: Tape,
    params: ParamStore,
    f_m: Var,
    p_m: Var,
    modality: str,
    config,
    skip_attention: bool = False,
) -> Var:
    """Parsing-feature-guided recalibration, then the modality MLP.

    With ``skip_attention`` the attention term is hard-zero and the
    enhanced path is a pure function of the raw feature (the reasoning
    ablation).
    """
    b, d_m = f_m.value.shape
    t = token_dim(d_m, config.s_tokens)
    if skip_attention:
        f_hat = f_m
    else:
        if p_m.value.shape != (b, config.d_p):
            raise DataError(f"enhance: parsing feature {p_m.value.shape}, expected ({b}, {config.d_p})")
        s = config.s_tokens
        tokens = tape.reshape(f_m, (b * s, t))
        q = tape.matmul(p_m, tape.param(params, f"mvdff.enh_{modality}.wq"))
        rep = np.repeat(np.arange(b, dtype=np.intp), s)
        q_rep = tape.gather_rows(q, rep)
        keys = tape.matmul(tokens, tape.param(params, f"mvdff.enh_{modality}.wk"))
        vals = tape.matmul(tokens, tape.param(params, f"mvdff.enh_{modality}.wv"))
        scores = tape.affine(tape.rowsum(tape.mul(keys, q_rep)), 1.0 / math.sqrt(t))
        attn = tape.softmax_rows(tape.reshape(scores, (b, s)))
        weighted = tape.mul_colvec(vals, tape.reshape(attn, (b * s,)))
        ctx = tape.segment_sum(weighted, rep, b)
        att_out = tape.matmul(ctx, tape.param(params, f"mvdff.enh_{modality}.wo"))
        f_hat = tape.add(f_m, att_out)
    return tape.mlp2(
        f_hat,
        tape.param(params, f"mvdff.enh_{modality}.mlp.w1"),
        tape.param(params, f"mvdff.enh_{modality}.mlp.b1"),
        tape.param(params, f"mvdff.enh_{modality}.mlp.w2"),
        tape.param(params, f"mvdff.enh_{modality}.mlp.b2"),
    )


def consistency_batch(
    tape: Tape,
    params: ParamStore,
    f_v: Var,
    f_t: Var,
    f_a: Var,
    config,
) -> tuple[Var, Var, Var, Var]:
    """Common-space projections, pairwise cosines, consistency MLP.

    Returns (h_cons, s_tv, s_ta, s_va).
    """
    proj = {}
    for m, f in (("v", f_v), ("t", f_t), ("a", f_a)):
        proj[m] = tape.linear(
            f,
            tape.param(params, f"mvdff.cons.proj_{m}.w"),
            tape.param(params, f"mvdff.cons.proj_{m}.b"),
        )
    s_tv = tape.cosine_rows(proj["t"], proj["v"])
    s_ta = tape.cosine_rows(proj["t"], proj["a"])
    s_va = tape.cosine_rows(proj["v"], proj["a"])
    b = f_v.value.shape[0]
    cat = tape.concat_cols(
        [
            proj["v"],
            proj["t"],
            proj["a"],
            tape.reshape(s_tv, (b, 1)),
            tape.reshape(s_ta, (b, 1)),
            tape.reshape(s_va, (b, 1)),
        ]
    )
    h_cons = tape.mlp2(
        cat,
        tape.param(params, "mvdff.cons.mlp.w1"),
        tape.param(params, "mvdff.cons.mlp.b1"),
        tape.param(params, "mvdff.cons.mlp.w2"),
        tape.param(params, "mvdff.cons.mlp.b2"),
    )
    return h_cons, s_tv, s_ta, s_va


def gate_fuse_batch(
    tape: Tape,
    params: ParamStore,
    h_v: Var,
    h_t: Var,
    h_a: Var,
    h_cons: Var,
) -> tuple[Var, Var]:
    """Sigmoid-gated convex mix of the enhanced concat and tiled h_cons.

    Returns (h_final, gate).
    """
    pool = tape.affine(tape.add_n([h_v, h_t, h_a, h_cons]), 0.25)
    gate = tape.sigmoid(
        tape.mlp2(
            pool,
            tape.param(params, "mvdff.gate.w1"),
            tape.param(params, "mvdff.gate.b1"),
            tape.param(params, "mvdff.gate.w2"),
            tape.param(params, "mvdff.gate.b2"),
        )
    )
    enh_cat = tape.concat_cols([h_v, h_t, h_a])
    cons3 = tape.concat_cols([h_cons, h_cons, h_cons])
    ones = tape.leaf(np.ones_like(gate.value))
    h_final = tape.add(tape.mul(gate, enh_cat), tape.mul(tape.sub(ones, gate), cons3))
    return h_final, gate


def classify_batch(tape: Tape, params: ParamStore, h_final: Var) -> Var:
    """Two-layer head then sigmoid; output strictly inside (0, 1)."""
    b = h_final.value.shape[0]
    logit = tape.mlp2(
        h_final,
        tape.param(params, "mvdff.cls.w1"),
        tape.param(params, "mvdff.cls.b1"),
        tape.param(params, "mvdff.cls.w2"),
        tape.param(params, "mvdff.cls.b2"),
    )
    return tape.reshape(tape.sigmoid(logit), (b,))


def simple_fusion_batch(
    tape: Tape,
    params: ParamStore,
    f_v: Var,
    f_t: Var,
    f_a: Var,
    p_v: Var,
    p_t: Var,
    p_a: Var,
) -> Var:
    """Ablation fusion: plain concat of raw + parsing features, one MLP."""
    cat = tape.concat_cols([f_v, f_t, f_a, p_v, p_t, p_a])
    return tape.mlp2(
        cat,
        tape.param(params, "fusion_simple.w1"),
        tape.param(params, "fusion_simple.b1"),
        tape.param(params, "fusion_simple.w2"),
        tape.param(params, "fusion_simple.b2"),
    )


# single-record conveniences -------------------------------------------------

def enhance(f_m: np.ndarray, p_m: np.ndarray, params: ParamStore, modality: str, config) -> np.ndarray:
    tape = Tape()
    out = enhance_batch(
        tape, params,
        tape.leaf(np.asarray(f_m)[None, :]), tape.leaf(np.asarray(p_m)[None, :]),
        modality, config,
    )
    return out.value[0].copy()


def consistency(f_v: np.ndarray, f_t: np.ndarray, f_a: np.ndarray, params: ParamStore, config):
    tape = Tape()
    h, s_tv, s_ta, s_va = consistency_batch(
        tape, params,
        tape.leaf(np.asarray(f_v)[None, :]),
        tape.leaf(np.asarray(f_t)[None, :]),
        tape.leaf(np.asarray(f_a)[None, :]),
        config,
    )
    return h.value[0].copy(), (float(s_tv.value[0]), float(s_ta.value[0]), float(s_va.value[0]))


def gate_fuse(h_v, h_t, h_a, h_cons, params: ParamStore):
    tape = Tape()
    h_final, gate = gate_fuse_batch(
        tape, params,
        tape.leaf(np.asarray(h_v)[None, :]),
        tape.leaf(np.asarray(h_t)[None, :]),
        tape.leaf(np.asarray(h_a)[None, :]),
        tape.leaf(np.asarray(h_cons)[None, :]),
    )
    return h_final.value[0].copy(), gate.value[0].copy()


def classify(h_final: np.ndarray, params: ParamStore) -> float:
    tape = Tape()
    out = classify_batch(tape, params, tape.leaf(np.asarray(h_final)[None, :]))
    return float(out.value[0])
