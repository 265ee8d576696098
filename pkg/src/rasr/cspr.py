"""Cross-instance semantic parsing and dual-scope memory-bank retrieval.

The parser fuses the three modality features through a 2-token cross
attention (text query over projected visual/audio tokens), maps the
residual sum through an MLP to the semantic space, and decomposes the
result into modality-aware components.  Retrieval is an exact scan over
intra-domain and cross-domain bank partitions with a stable tie-break.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .corpus import Domain, VideoRecord
from .errors import DataError, NumericsWarning
from .numerics import NORM_EPS, ParamStore, Tape, Var, cosine


@dataclass(frozen=True)
class AlphaWeights:
    """Per-modality similarity weights, exposed as a softmax over logits."""

    logits: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def weights(self) -> tuple[float, float, float]:
        z = np.asarray(self.logits, dtype=np.float64)
        e = np.exp(z - z.max())
        w = e / e.sum()
        return (float(w[0]), float(w[1]), float(w[2]))


@dataclass(frozen=True)
class SemanticPrimitive:
    """Fused narrative vector and its modality-aware components."""

    s: np.ndarray
    s_v: np.ndarray
    s_t: np.ndarray
    s_a: np.ndarray

    def component(self, modality: str) -> np.ndarray:
        return {"v": self.s_v, "t": self.s_t, "a": self.s_a}[modality]

    def check_consistent(self, params: ParamStore, atol: float = 1e-9) -> bool:
        """Components must be linear images of s under current projections."""
        for m in ("v", "t", "a"):
            want = self.s @ params[f"cspr.comp_{m}.w"]
            if not np.allclose(self.component(m), want, atol=atol):
                return False
        return True


def init_cspr_params(store: ParamStore, config, rng: np.random.Generator) -> None:
    """Add parser weights: attention projections, semantic MLP, components."""
    d_attn, d_s = config.d_attn, config.d_s
    for m, d_in in (("v", config.d_v), ("t", config.d_t), ("a", config.d_a)):
        store.add(f"cspr.attn_{m}.w", _glorot(rng, d_in, d_attn))
        store.add(f"cspr.attn_{m}.b", np.zeros(d_attn))
    store.add("cspr.mlp_sem.w1", _glorot(rng, d_attn, d_s))
    store.add("cspr.mlp_sem.b1", np.zeros(d_s))
    store.add("cspr.mlp_sem.w2", _glorot(rng, d_s, d_s))
    store.add("cspr.mlp_sem.b2", np.zeros(d_s))
    for m in ("v", "t", "a"):
        store.add(f"cspr.comp_{m}.w", _glorot(rng, d_s, d_s))


def _glorot(rng: np.random.Generator, d_in: int, d_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-bound, bound, size=(d_in, d_out))


def parse_semantic_batch(
    tape: Tape,
    params: ParamStore,
    f_v: Var,
    f_t: Var,
    f_a: Var,
    config,
) -> dict[str, Var]:
    """Taped batch forward of the semantic parser.

    Query = projected text feature; keys/values = the two projected
    visual/audio tokens; residual add, then the semantic MLP and the
    three component projections.
    """
    b = f_t.value.shape[0]
    q_v = tape.linear(f_v, tape.param(params, "cspr.attn_v.w"), tape.param(params, "cspr.attn_v.b"))
    q_t = tape.linear(f_t, tape.param(params, "cspr.attn_t.w"), tape.param(params, "cspr.attn_t.b"))
    q_a = tape.linear(f_a, tape.param(params, "cspr.attn_a.w"), tape.param(params, "cspr.attn_a.b"))

    inv_sqrt = 1.0 / math.sqrt(config.d_attn)
    score_v = tape.affine(tape.rowsum(tape.mul(q_t, q_v)), inv_sqrt)
    score_a = tape.affine(tape.rowsum(tape.mul(q_t, q_a)), inv_sqrt)
    scores = tape.concat_cols(
        [tape.reshape(score_v, (b, 1)), tape.reshape(score_a, (b, 1))]
    )
    attn = tape.softmax_rows(scores)
    w_v = tape.reshape(tape.slice_cols(attn, 0, 1), (b,))
    w_a = tape.reshape(tape.slice_cols(attn, 1, 2), (b,))
    attn_out = tape.add(tape.mul_colvec(q_v, w_v), tape.mul_colvec(q_a, w_a))
    h = tape.add(q_t, attn_out)

    s = tape.mlp2(
        h,
        tape.param(params, "cspr.mlp_sem.w1"),
        tape.param(params, "cspr.mlp_sem.b1"),
        tape.param(params, "cspr.mlp_sem.w2"),
        tape.param(params, "cspr.mlp_sem.b2"),
    )
    out = {"s": s}
    for m in ("v", "t", "a"):
        out[m] = tape.matmul(s, tape.param(params, f"cspr.comp_{m}.w"))
    return out


def parse_semantic(
    f_v: np.ndarray,
    f_t: np.ndarray,
    f_a: np.ndarray,
    params: ParamStore,
    config,
) -> SemanticPrimitive:
    """Parse one record's features into a semantic primitive."""
    for vec, want, name in (
        (f_v, config.d_v, "visual"),
        (f_t, config.d_t, "text"),
        (f_a, config.d_a, "audio"),
    ):
        if np.asarray(vec).shape != (want,):
            raise DataError(f"parse_semantic: {name} feature has shape {np.asarray(vec).shape}, expected ({want},)")
    tape = Tape()
    out = parse_semantic_batch(
        tape,
        params,
        tape.leaf(np.asarray(f_v)[None, :]),
        tape.leaf(np.asarray(f_t)[None, :]),
        tape.leaf(np.asarray(f_a)[None, :]),
        config,
    )
    return SemanticPrimitive(
        s=out["s"].value[0].copy(),
        s_v=out["v"].value[0].copy(),
        s_t=out["t"].value[0].copy(),
        s_a=out["a"].value[0].copy(),
    )


def parse_corpus(records: list[VideoRecord], params: ParamStore, config) -> list[SemanticPrimitive]:
    """Batch-parse a record list (single tape, one pass)."""
    if not records:
        return []
    tape = Tape()
    out = parse_semantic_batch(
        tape,
        params,
        tape.leaf(np.stack([r.visual_feature for r in records])),
        tape.leaf(np.stack([r.text_feature for r in records])),
        tape.leaf(np.stack([r.audio_feature for r in records])),
        config,
    )
    s, sv, st, sa = (out[k].value for k in ("s", "v", "t", "a"))
    return [
        SemanticPrimitive(s=s[i].copy(), s_v=sv[i].copy(), s_t=st[i].copy(), s_a=sa[i].copy())
        for i in range(len(records))
    ]


def aggregate_similarity(p: SemanticPrimitive, q: SemanticPrimitive, alpha: AlphaWeights) -> float:
    """Alpha-weighted sum of per-modality component cosines."""
    if p.s.shape != q.s.shape:
        raise DataError(f"aggregate_similarity: dims {p.s.shape} vs {q.s.shape}")
    w = alpha.weights
    return (
        w[0] * cosine(p.s_v, q.s_v)
        + w[1] * cosine(p.s_t, q.s_t)
        + w[2] * cosine(p.s_a, q.s_a)
    )


# ---------------------------------------------------------------------------
# memory bank
# ---------------------------------------------------------------------------

@dataclass
class BankEntry:
    video_id: str
    domain: Domain
    label: int
    primitive: SemanticPrimitive
    text_digest: str = ""
    text: str = ""
    reports: dict[str, "object"] = field(default_factory=dict)  # modality -> AnalysisReport
    preloaded_reports: dict | None = None
    features: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class ContextItem:
    video_id: str
    score: float
    label: int
    domain: Domain
    text_digest: str = ""
    reports: dict[str, "object"] = field(default_factory=dict)


@dataclass(frozen=True)
class RetrievedContext:
    items: tuple[ContextItem, ...]
    intra_count: int
    cross_count: int


EMPTY_CONTEXT = RetrievedContext(items=(), intra_count=0, cross_count=0)


class MemoryBank:
    """Domain-partitioned store of primitives, labels, and cached reports.

    Immutable once built; ``refresh_bank`` returns a new bank so readers
    always observe a consistent snapshot.
    """

    def __init__(self, entries: list[BankEntry]):
        ids = [e.video_id for e in entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"memory bank has duplicate ids: {dupes[:5]}")
        self.entries = list(entries)
        self.domain_index: dict[Domain, list[int]] = {}
        for i, e in enumerate(self.entries):
            self.domain_index.setdefault(e.domain, []).append(i)
        self.id_index = {e.video_id: i for i, e in enumerate(self.entries)}
        self._norm = {}
        self._zero_rows = False
        for m in ("v", "t", "a"):
            if self.entries:
                mat = np.stack([e.primitive.component(m) for e in self.entries])
                norms = np.sqrt((mat * mat).sum(axis=1, keepdims=True))
                self._zero_rows |= bool(np.any(norms == 0.0))
                self._norm[m] = mat / (norms + NORM_EPS)
            else:
                self._norm[m] = np.zeros((0, 0))

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, video_id: str) -> BankEntry:
        return self.entries[self.id_index[video_id]]

    def scores_against(self, query: SemanticPrimitive, alpha: AlphaWeights) -> np.ndarray:
        """Aggregate similarity of the query against every entry."""
        w = alpha.weights
        total = np.zeros(len(self.entries))
        warned = False
        for wi, m in zip(w, ("v", "t", "a")):
            qc = query.component(m)
            qn = float(np.sqrt(qc @ qc))
            if qn == 0.0 and not warned:
                warnings.warn("retrieval query has a zero-norm component", NumericsWarning, stacklevel=3)
                warned = True
            total += wi * (self._norm[m] @ (qc / (qn + NORM_EPS)))
        if self._zero_rows:
            warnings.warn("memory bank holds zero-norm components", NumericsWarning, stacklevel=3)
        return total


def retrieve(
    bank: MemoryBank,
    query: SemanticPrimitive,
    query_domain: Domain,
    query_id: str,
    k_intra: int,
    k_cross: int,
    alpha: AlphaWeights,
) -> RetrievedContext:
    """Exact dual-scope top-K with (score desc, id asc) tie-break.

    Partitions short of their quota return everything they have; there is
    no backfill from the other partition.
    """
    if len(bank) == 0:
        raise DataError("retrieve: memory bank is empty")
    scores = bank.scores_against(query, alpha)
    intra_idx = [
        i for i in bank.domain_index.get(query_domain, []) if bank.entries[i].video_id != query_id
    ]
    intra_set = set(bank.domain_index.get(query_domain, []))
    cross_idx = [
        i
        for i in range(len(bank))
        if i not in intra_set and bank.entries[i].video_id != query_id
    ]

    def top_k(idx: list[int], k: int) -> list[int]:
        if k <= 0 or not idx:
            return []
        sub = np.asarray(idx)
        s = scores[sub]
        if k < len(sub):
            kth = np.partition(-s, k - 1)[k - 1]
            keep = sub[-s <= kth]
        else:
            keep = sub
        ranked = sorted(keep.tolist(), key=lambda i: (-scores[i], bank.entries[i].video_id))
        return ranked[:k]

    chosen_intra = top_k(intra_idx, k_intra)
    chosen_cross = top_k(cross_idx, k_cross)

    def to_item(i: int) -> ContextItem:
        e = bank.entries[i]
        return ContextItem(
            video_id=e.video_id,
            score=float(scores[i]),
            label=e.label,
            domain=e.domain,
            text_digest=e.text_digest,
            reports=e.reports,
        )

    merged = sorted(
        (to_item(i) for i in chosen_intra + chosen_cross),
        key=lambda it: (-it.score, it.video_id),
    )
    return RetrievedContext(
        items=tuple(merged),
        intra_count=len(chosen_intra),
        cross_count=len(chosen_cross),
    )


def _digest(text: str, limit: int = 80) -> str:
    flat = " ".join(text.split())
    return flat[:limit]


def build_bank(
    records: list[VideoRecord],
    params: ParamStore,
    config,
) -> MemoryBank:
    """One entry per record with current-parameter primitives.

    Reports are populated separately (see pipeline); raw features are kept
    on the entries so hard-negative mining can fetch them.
    """
    primitives = parse_corpus(records, params, config)
    entries = [
        BankEntry(
            video_id=rec.id,
            domain=rec.domain,
            label=rec.label,
            primitive=prim,
            text_digest=_digest(rec.text),
            text=rec.text,
            preloaded_reports=rec.reports,
            features={
                "v": rec.visual_feature,
                "t": rec.text_feature,
                "a": rec.audio_feature,
            },
        )
        for rec, prim in zip(records, primitives)
    ]
    return MemoryBank(entries)


def refresh_bank(bank: MemoryBank, params: ParamStore, config) -> MemoryBank:
    """Recompute every primitive under updated parameters.

    Ids, labels, digests, features, and cached reports carry over; the
    result is a new bank so concurrent readers never observe a mix.
    """
    if not bank.entries:
        return MemoryBank([])
    tape = Tape()
    out = parse_semantic_batch(
        tape,
        params,
        tape.leaf(np.stack([e.features["v"] for e in bank.entries])),
        tape.leaf(np.stack([e.features["t"] for e in bank.entries])),
        tape.leaf(np.stack([e.features["a"] for e in bank.entries])),
        config,
    )
    s, sv, st, sa = (out[k].value for k in ("s", "v", "t", "a"))
    entries = [
        replace(
            e,
            primitive=SemanticPrimitive(
                s=s[i].copy(), s_v=sv[i].copy(), s_t=st[i].copy(), s_a=sa[i].copy()
            ),
        )
        for i, e in enumerate(bank.entries)
    ]
    return MemoryBank(entries)
