"""End-to-end orchestration: parameters, reports, batch graphs, losses.

This module owns the glue the individual stages share: whole-model
parameter initialization, backend construction, bank report population,
per-record report resolution, and the taped batch graph that the trainer
differentiates and the evaluator runs forward.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import alignment, cspr, dgmp, mvdff
from .config import TrainConfig
from .corpus import MODALITIES, VideoRecord
from .cspr import AlphaWeights, MemoryBank, RetrievedContext, retrieve
from .errors import BackendError, DataError
from .numerics import ParamStore, Tape, Var

VARIANTS = (
    "full",
    "no-retrieval",
    "no-domain-guide",
    "no-reasoning",
    "no-fusion",
    "no-alignment",
)


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise DataError(f"unknown ablation variant {variant!r}; choose from {VARIANTS}")
    return variant


def uses_reasoning(variant: str) -> bool:
    return variant != "no-reasoning"


def include_domain(variant: str) -> bool:
    return variant != "no-domain-guide"


def effective_lambda(config: TrainConfig, variant: str) -> float:
    if variant in ("no-reasoning", "no-alignment"):
        return 0.0
    return config.lambda_align


def effective_k(config: TrainConfig, variant: str) -> tuple[int, int]:
    if variant == "no-retrieval":
        return 0, 0
    return config.k_intra, config.k_cross


def init_params(config: TrainConfig, variant: str = "full") -> ParamStore:
    """All trainable weights for the given architecture variant."""
    check_variant(variant)
    rng = np.random.default_rng([config.seed, 1009])
    store = ParamStore()
    cspr.init_cspr_params(store, config, rng)
    alignment.init_alignment_params(store, config, rng)
    if variant == "no-fusion":
        mvdff.init_simple_fusion_params(store, config, rng)
    else:
        mvdff.init_mvdff_params(store, config, rng)
    return store


def make_backends(config: TrainConfig):
    """(reasoning client, report embedder) per the configured backends."""
    if config.reasoning_backend == "stub":
        client = dgmp.StubReasoningClient(
            seed=config.seed,
            temperature=config.temperature,
            top_p=config.top_p,
            max_tokens=config.max_tokens,
        )
    else:
        client = dgmp.HttpReasoningClient(
            model=config.chat_model,
            temperature=config.temperature,
            top_p=config.top_p,
            max_tokens=config.max_tokens,
        )
    if config.embed_backend == "stub":
        embedder = dgmp.StubReportEmbedder(dim=config.d_p, seed=config.seed)
    else:
        embedder = dgmp.HttpReportEmbedder(model=config.embed_model, dim=config.d_p)
    return client, embedder


@dataclass
class _RecordView:
    """Minimal record interface for reports generated from bank entries."""

    id: str
    text: str
    features: dict

    def feature(self, modality: str):
        return self.features[modality]


def populate_bank_reports(
    bank: MemoryBank,
    client,
    embedder,
    config: TrainConfig,
    alpha: AlphaWeights,
    variant: str = "full",
) -> None:
    """Generate and confidence-score one report per (entry, modality).

    Two deterministic phases keep the result order-independent: first all
    texts (single attempt, preloaded reports win), then confidences
    against the phase-one texts of each entry's own retrieved context.
    """
    if not uses_reasoning(variant):
        return
    k_intra, k_cross = effective_k(config, variant)
    order = sorted(range(len(bank)), key=lambda i: bank.entries[i].video_id)
    contexts: dict[str, RetrievedContext] = {}
    texts: dict[tuple[str, str], str] = {}
    fixed_conf: dict[tuple[str, str], float] = {}

    def job(i: int, m: str):
        entry = bank.entries[i]
        ctx = contexts[entry.video_id]
        prompt = dgmp.build_prompt(m, entry.domain, ctx, config.ref_char_budget,
                                   include_domain(variant))
        view = _RecordView(id=entry.video_id, text=entry.text, features=entry.features)
        try:
            return dgmp.generate_report(client, m, view, prompt, attempt=0)
        except BackendError:
            return ""

    for i in order:
        entry = bank.entries[i]
        contexts[entry.video_id] = retrieve(
            bank, entry.primitive, entry.domain, entry.video_id, k_intra, k_cross, alpha
        )
    jobs = []
    for i in order:
        entry = bank.entries[i]
        for m in MODALITIES:
            pre = (entry.preloaded_reports or {}).get(m)
            if pre is not None:
                texts[(entry.video_id, m)] = pre["text"]
                fixed_conf[(entry.video_id, m)] = float(pre["confidence"])
            else:
                jobs.append((i, m))
    if getattr(client, "backend", "stub") == "http" and config.max_workers > 1 and jobs:
        with ThreadPoolExecutor(max_workers=config.max_workers) as pool:
            results = list(pool.map(lambda im: job(*im), jobs))
        for (i, m), text in zip(jobs, results):
            texts[(bank.entries[i].video_id, m)] = text
    else:
        for i, m in jobs:
            texts[(bank.entries[i].video_id, m)] = job(i, m)

    for i in order:
        entry = bank.entries[i]
        reports = {}
        for m in MODALITIES:
            key = (entry.video_id, m)
            text = texts[key]
            if not text:
                reports[m] = dgmp.sentinel_report(m, config.d_p)
                continue
            if key in fixed_conf:
                conf = fixed_conf[key]
            else:
                refs = [
                    texts[(item.video_id, m)]
                    for item in contexts[entry.video_id].items
                    if texts.get((item.video_id, m))
                ]
                if refs:
                    emb = dgmp.embed_report(text, embedder)
                    conf = sum(
                        float(np.dot(emb, dgmp.embed_report(r, embedder))) for r in refs
                    ) / len(refs)
                else:
                    conf = 1.0
            low = conf < config.theta
            feature = dgmp.embed_report(text, embedder)
            if low:
                scale = conf / config.theta if config.theta > 0 else 0.0
                feature = feature * min(1.0, max(0.0, scale))
            reports[m] = dgmp.AnalysisReport(
                modality=m,
                text=text,
                confidence=float(conf),
                low_confidence=low,
                attempts=1,
                parsing_feature=feature,
            )
        entry.reports = reports


def resolve_reports(
    record: VideoRecord,
    context: RetrievedContext,
    bank: MemoryBank,
    client,
    embedder,
    config: TrainConfig,
    variant: str = "full",
    cache: dict | None = None,
) -> dict[str, dgmp.AnalysisReport]:
    """Reports for one record: bank cache, preloaded, or gated generation."""
    if not uses_reasoning(variant):
        raise DataError("resolve_reports called with reasoning disabled")
    if cache is not None and record.id in cache:
        return cache[record.id]
    if record.id in bank.id_index and bank.entry(record.id).reports:
        out = bank.entry(record.id).reports
    else:
        out = {}
        for m in MODALITIES:
            pre = (record.reports or {}).get(m)
            if pre is not None:
                conf = float(pre["confidence"])
                low = conf < config.theta
                feature = dgmp.embed_report(pre["text"], embedder)
                if low:
                    scale = conf / config.theta if config.theta > 0 else 0.0
                    feature = feature * min(1.0, max(0.0, scale))
                out[m] = dgmp.AnalysisReport(
                    modality=m, text=pre["text"], confidence=conf,
                    low_confidence=low, attempts=1, parsing_feature=feature,
                )
                continue
            prompt = dgmp.build_prompt(
                m, record.domain, context, config.ref_char_budget, include_domain(variant)
            )
            try:
                out[m] = dgmp.gate_report(
                    client, embedder, record, m, prompt, context,
                    config.theta, config.r_max,
                )
            except BackendError:
                out[m] = dgmp.sentinel_report(m, config.d_p)
    if cache is not None:
        cache[record.id] = out
    return out


# ---------------------------------------------------------------------------
# batch assembly and graphs
# ---------------------------------------------------------------------------

@dataclass
class BatchData:
    """Plain-array inputs for one taped batch."""

    ids: list[str]
    features: dict[str, np.ndarray]  # m -> (B, d_m)
    parsing: dict[str, np.ndarray]  # m -> (B, d_p)
    labels: np.ndarray  # (B,)
    neg_features: dict[str, np.ndarray]  # m -> (n, d_m)
    neg_segments: np.ndarray  # (n,) sample index per negative row


def build_batch(
    records: list[VideoRecord],
    contexts: list[RetrievedContext],
    reports: list[dict[str, dgmp.AnalysisReport]] | None,
    bank: MemoryBank | None,
    config: TrainConfig,
    variant: str = "full",
    with_negatives: bool = True,
) -> BatchData:
    features = {
        m: np.stack([rec.feature(m) for rec in records]) for m in MODALITIES
    }
    if reports is None:
        parsing = {m: np.zeros((len(records), config.d_p)) for m in MODALITIES}
    else:
        parsing = {
            m: np.stack([rep[m].parsing_feature for rep in reports]) for m in MODALITIES
        }
    labels = np.asarray([rec.label for rec in records], dtype=np.float64)

    neg_features = {m: np.zeros((0, features[m].shape[1])) for m in MODALITIES}
    segments: list[int] = []
    if with_negatives and effective_lambda(config, variant) > 0:
        rows: dict[str, list[np.ndarray]] = {m: [] for m in MODALITIES}
        batch_by_id = {rec.id: rec for rec in records}
        for i, (rec, ctx) in enumerate(zip(records, contexts)):
            picked = alignment.select_hard_negatives(
                ctx, rec.label, config.hard_negatives,
                batch_records=records, anchor_id=rec.id,
            )
            for vid, origin in picked:
                src = bank.entry(vid) if origin == "bank" else batch_by_id[vid]
                for m in MODALITIES:
                    vec = src.features[m] if origin == "bank" else src.feature(m)
                    rows[m].append(vec)
                segments.append(i)
        if segments:
            neg_features = {m: np.stack(rows[m]) for m in MODALITIES}
    return BatchData(
        ids=[rec.id for rec in records],
        features=features,
        parsing=parsing,
        labels=labels,
        neg_features=neg_features,
        neg_segments=np.asarray(segments, dtype=np.intp),
    )


def forward_batch(
    tape: Tape,
    params: ParamStore,
    config: TrainConfig,
    batch: BatchData,
    variant: str = "full",
) -> dict[str, Var]:
    """Taped forward pass from raw/parsing features to probabilities."""
    f = {m: tape.leaf(batch.features[m]) for m in MODALITIES}
    p = {m: tape.leaf(batch.parsing[m]) for m in MODALITIES}
    if variant == "no-fusion":
        h_final = mvdff.simple_fusion_batch(
            tape, params, f["v"], f["t"], f["a"], p["v"], p["t"], p["a"]
        )
        return {"yhat": mvdff.classify_batch(tape, params, h_final), "h_final": h_final,
                "f": f, "p": p}
    skip_attn = variant == "no-reasoning"
    h_enh = {
        m: mvdff.enhance_batch(tape, params, f[m], p[m], m, config, skip_attention=skip_attn)
        for m in MODALITIES
    }
    h_cons, s_tv, s_ta, s_va = mvdff.consistency_batch(
        tape, params, f["v"], f["t"], f["a"], config
    )
    h_final, gate = mvdff.gate_fuse_batch(
        tape, params, h_enh["v"], h_enh["t"], h_enh["a"], h_cons
    )
    yhat = mvdff.classify_batch(tape, params, h_final)
    return {
        "yhat": yhat, "h_final": h_final, "gate": gate, "h_cons": h_cons,
        "sims": (s_tv, s_ta, s_va), "f": f, "p": p,
    }


def bce_batch(tape: Tape, yhat: Var, labels: np.ndarray) -> Var:
    """Mean clamped binary cross-entropy over the batch."""
    b = labels.shape[0]
    p = tape.clip(yhat, 1e-7, 1.0 - 1e-7)
    y = tape.leaf(labels)
    ones = tape.leaf(np.ones(b))
    ll = tape.add(
        tape.mul(y, tape.log(p)),
        tape.mul(tape.sub(ones, y), tape.log(tape.sub(ones, p))),
    )
    return tape.affine(tape.mean_all(ll), -1.0)


def align_loss_batch(
    tape: Tape,
    params: ParamStore,
    config: TrainConfig,
    batch: BatchData,
    forward: dict[str, Var],
) -> Var:
    """Batched InfoNCE matching the per-sample closed form exactly."""
    b = batch.labels.shape[0]
    seg = batch.neg_segments
    n = seg.shape[0]
    terms = []
    for m in MODALITIES:
        anchor = alignment.project_batch(tape, params, forward["p"][m], m, "parse")
        pos = alignment.project_batch(tape, params, forward["f"][m], m, "raw")
        s_pos = tape.rowsum(tape.mul(anchor, pos))
        if n == 0:
            terms.append(tape.affine(s_pos, 0.0))
            continue
        negs = alignment.project_batch(
            tape, params, tape.leaf(batch.neg_features[m]), m, "raw"
        )
        s_neg = tape.rowsum(tape.mul(tape.gather_rows(anchor, seg), negs))
        z = tape.exp(
            tape.affine(tape.sub(s_neg, tape.gather_rows(s_pos, seg)), 1.0 / config.tau)
        )
        acc = tape.segment_sum(z, seg, b)
        terms.append(tape.log(tape.affine(acc, 1.0, 1.0)))
    per_sample = tape.affine(tape.add_n(terms), 1.0 / 3.0)
    return tape.mean_all(per_sample)


def batch_loss(
    tape: Tape,
    params: ParamStore,
    config: TrainConfig,
    batch: BatchData,
    variant: str = "full",
) -> dict[str, Var]:
    """Total objective: bce + lambda * alignment (alignment skipped at 0)."""
    forward = forward_batch(tape, params, config, batch, variant)
    l_cls = bce_batch(tape, forward["yhat"], batch.labels)
    lam = effective_lambda(config, variant)
    out = {"yhat": forward["yhat"], "l_cls": l_cls, "l_align": None}
    if lam > 0:
        l_align = align_loss_batch(tape, params, config, batch, forward)
        out["l_align"] = l_align
        out["total"] = tape.add(l_cls, tape.affine(l_align, lam))
    else:
        out["total"] = l_cls
    return out


def total_loss_fn(config: TrainConfig, batch: BatchData, variant: str = "full"):
    """Builder for finite-difference checks: store -> scalar loss Var.

    Binds every parameter in the store so disconnected ones are visible
    as zero adjoints.
    """

    def fn(store: ParamStore) -> Var:
        tape = Tape()
        for name in store.names():
            tape.param(store, name)
        return batch_loss(tape, store, config, batch, variant)["total"]

    return fn


def parse_probe_fn(config: TrainConfig, batch: BatchData, probe_seed: int = 0):
    """Scalar probe through the semantic parser for gradient checks."""
    rng = np.random.default_rng(probe_seed)
    weights = {
        key: rng.normal(size=(batch.labels.shape[0], config.d_s))
        for key in ("s", "v", "t", "a")
    }

    def fn(store: ParamStore) -> Var:
        tape = Tape()
        out = cspr.parse_semantic_batch(
            tape,
            store,
            tape.leaf(batch.features["v"]),
            tape.leaf(batch.features["t"]),
            tape.leaf(batch.features["a"]),
            config,
        )
        terms = [
            tape.sum_all(tape.mul(out[key], tape.leaf(weights[key])))
            for key in ("s", "v", "t", "a")
        ]
        return tape.sum_all(tape.add_n(terms))

    return fn
