"""Shared-manifold projection and InfoNCE alignment with hard negatives.

Raw modality features and parsing features are mapped by per-modality
linear heads into a common space and unit-normalized there.  Negatives
are the retrieved neighbours with the opposite authenticity label; a
modality with no negatives contributes exactly zero to the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cspr import MemoryBank, RetrievedContext
from .errors import DataError
from .numerics import ParamStore, Tape, Var


def init_alignment_params(store: ParamStore, config, rng: np.random.Generator) -> None:
    """Add the raw-feature and parsing-feature projection heads.

    Biases start small-uniform rather than zero so a fully distrusted
    (zero) parsing feature never lands on the normalize-at-origin corner.
    """
    d_align = config.d_align
    for m, d_in in (("v", config.d_v), ("t", config.d_t), ("a", config.d_a)):
        store.add(f"align.raw_{m}.w", _glorot(rng, d_in, d_align))
        store.add(f"align.raw_{m}.b", rng.uniform(-0.05, 0.05, size=d_align))
        store.add(f"align.parse_{m}.w", _glorot(rng, config.d_p, d_align))
        store.add(f"align.parse_{m}.b", rng.uniform(-0.05, 0.05, size=d_align))


def _glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


def project_batch(tape: Tape, params: ParamStore, x: Var, modality: str, kind: str) -> Var:
    """Linear head then row-wise L2 normalization; kind is raw|parse."""
    if kind not in ("raw", "parse"):
        raise DataError(f"unknown projection head {kind!r}")
    w = tape.param(params, f"align.{kind}_{modality}.w")
    b = tape.param(params, f"align.{kind}_{modality}.b")
    if x.value.shape[-1] != w.value.shape[0]:
        raise DataError(
            f"project: input dim {x.value.shape[-1]} does not match "
            f"{kind}_{modality} head ({w.value.shape[0]})"
        )
    return tape.l2_normalize_rows(tape.linear(x, w, b))


def project(vec: np.ndarray, modality: str, kind: str, params: ParamStore) -> np.ndarray:
    """Project one vector into the manifold (plain-array convenience)."""
    tape = Tape()
    out = project_batch(tape, params, tape.leaf(np.asarray(vec)[None, :]), modality, kind)
    return out.value[0].copy()


@dataclass(frozen=True)
class NegativeSet:
    """Opposite-label neighbours for one anchor, highest similarity first."""

    ids: tuple[str, ...]
    labels: tuple[int, ...]
    vectors: np.ndarray  # (H, d_align) projected raw features

    def __len__(self) -> int:
        return len(self.ids)


def select_hard_negatives(
    context: RetrievedContext,
    anchor_label: int,
    h: int,
    batch_records=None,
    anchor_id: str | None = None,
) -> list[tuple[str, str]]:
    """Pick up to ``h`` opposite-label sources: (id, origin) pairs.

    Context items come first (already similarity-ordered); with none
    available the current training batch supplies the fallback; with no
    opposite labels anywhere the result is empty.
    """
    chosen = [
        (item.video_id, "bank")
        for item in context.items
        if item.label != anchor_label
    ][:h]
    if not chosen and batch_records:
        chosen = [
            (rec.id, "batch")
            for rec in batch_records
            if rec.label != anchor_label and rec.id != anchor_id
        ][:h]
    return chosen


def mine_hard_negatives(
    context: RetrievedContext,
    anchor_label: int,
    bank: MemoryBank,
    modality: str,
    h: int,
    params: ParamStore,
    batch_records=None,
) -> NegativeSet:
    """Project the selected opposite-label raw features into the manifold."""
    if h < 0:
        raise DataError(f"negative count must be >= 0, got {h}")
    batch_by_id = {rec.id: rec for rec in (batch_records or [])}
    picked = select_hard_negatives(context, anchor_label, h, batch_records)
    feats, ids, labels = [], [], []
    for vid, origin in picked:
        if origin == "bank":
            entry = bank.entry(vid)
            feats.append(entry.features[modality])
            labels.append(entry.label)
        else:
            rec = batch_by_id[vid]
            feats.append(rec.feature(modality))
            labels.append(rec.label)
        ids.append(vid)
    for label in labels:
        assert label != anchor_label, "mined negative shares the anchor label"
    if not feats:
        d_align = params[f"align.raw_{modality}.b"].shape[0]
        return NegativeSet(ids=(), labels=(), vectors=np.zeros((0, d_align)))
    tape = Tape()
    proj = project_batch(tape, params, tape.leaf(np.stack(feats)), modality, "raw")
    return NegativeSet(ids=tuple(ids), labels=tuple(labels), vectors=proj.value.copy())


def align_loss(
    tape: Tape,
    anchors: dict[str, Var],
    positives: dict[str, Var],
    negatives: dict[str, Var],
    tau: float,
) -> Var:
    """Single-sample InfoNCE over the three modalities.

    ``anchors``/``positives`` map modality to a (1, d_align) projected
    row; ``negatives`` to a (H_m, d_align) matrix (H_m may be 0).  The
    loss is (1/M) * sum_m log(1 + sum_k exp((s-_k - s+) / tau)).
    """
    if tau <= 0:
        raise DataError(f"temperature must be positive, got {tau}")
    terms = []
    for m in ("v", "t", "a"):
        anchor, pos, neg = anchors[m], positives[m], negatives[m]
        s_pos = tape.rowsum(tape.mul(anchor, pos))  # (1,)
        n = neg.value.shape[0]
        if n == 0:
            terms.append(tape.affine(s_pos, 0.0))  # exact zero contribution
            continue
        rep = tape.gather_rows(anchor, np.zeros(n, dtype=np.intp))
        s_neg = tape.rowsum(tape.mul(rep, neg))  # (n,)
        z = tape.exp(tape.affine(tape.sub(s_neg, tape.gather_rows(s_pos, np.zeros(n, dtype=np.intp))), 1.0 / tau))
        total = tape.segment_sum(z, np.zeros(n, dtype=np.intp), 1)
        terms.append(tape.log(tape.affine(total, 1.0, 1.0)))
    return tape.affine(tape.sum_all(tape.add_n(terms)), 1.0 / 3.0)
