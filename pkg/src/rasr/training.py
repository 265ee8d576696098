"""Losses, optimizer loop, metrics, and the experiment harnesses.

The trainer is AdamW with decoupled weight decay, a linear warmup into
cosine annealing, per-epoch bank refresh, and cached reports.  With stub
backends a (seed, config) pair fully determines the history, metrics, and
checkpoint bytes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoint import Checkpoint, make_checkpoint
from .config import TrainConfig
from .corpus import Domain, SplitSpec, VideoRecord, lodo_split, split
from .cspr import (
    AlphaWeights,
    ContextItem,
    EMPTY_CONTEXT,
    MemoryBank,
    RetrievedContext,
    aggregate_similarity,
    build_bank,
    parse_corpus,
    refresh_bank,
    retrieve,
)
from .errors import DataError, RasrError
from .numerics import ParamStore, Tape
from .pipeline import (
    batch_loss,
    build_batch,
    check_variant,
    effective_k,
    forward_batch,
    init_params,
    make_backends,
    populate_bank_reports,
    resolve_reports,
    uses_reasoning,
)

EVAL_CHUNK = 256


# ---------------------------------------------------------------------------
# losses (plain-scalar forms)
# ---------------------------------------------------------------------------

def bce(y_hat: float, y: int) -> float:
    """Clamped binary cross-entropy for one prediction."""
    p = min(max(float(y_hat), 1e-7), 1.0 - 1e-7)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def total_loss(l_cls: float, l_align: float, lam: float) -> float:
    if lam < 0:
        raise DataError(f"lambda must be >= 0, got {lam}")
    return l_cls + lam * l_align


def lr_schedule(config: TrainConfig, epoch: int) -> float:
    """Linear warmup to the peak, then cosine annealing to min_lr."""
    if config.warmup_epochs > 0 and epoch <= config.warmup_epochs:
        return config.lr * epoch / config.warmup_epochs
    if config.epochs <= config.warmup_epochs:
        return config.lr
    t = (epoch - config.warmup_epochs) / (config.epochs - config.warmup_epochs)
    return config.min_lr + 0.5 * (config.lr - config.min_lr) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass(frozen=True)
class Metrics:
    """Confusion counts plus the derived scores; fake (label 1) is positive."""

    tp: int
    fn: int
    fp: int
    tn: int
    accuracy: float
    precision_fake: float
    recall_fake: float
    f1_fake: float
    precision_real: float
    recall_real: float
    f1_real: float
    macro_f1: float

    @classmethod
    def from_confusion(cls, tp: int, fn: int, fp: int, tn: int) -> "Metrics":
        total = tp + fn + fp + tn
        if total == 0:
            raise DataError("cannot compute metrics on an empty dataset")
        p_f, r_f, f1_f = _prf(tp, fp, fn)
        p_r, r_r, f1_r = _prf(tn, fn, fp)
        return cls(
            tp=tp, fn=fn, fp=fp, tn=tn,
            accuracy=(tp + tn) / total,
            precision_fake=p_f, recall_fake=r_f, f1_fake=f1_f,
            precision_real=p_r, recall_real=r_r, f1_real=f1_r,
            macro_f1=(f1_f + f1_r) / 2.0,
        )

    @classmethod
    def from_predictions(cls, y_true, y_pred) -> "Metrics":
        y_true = np.asarray(y_true, dtype=int)
        y_pred = np.asarray(y_pred, dtype=int)
        if y_true.shape != y_pred.shape or y_true.size == 0:
            raise DataError("predictions and labels must be equal-length and nonempty")
        tp = int(((y_true == 1) & (y_pred == 1)).sum())
        fn = int(((y_true == 1) & (y_pred == 0)).sum())
        fp = int(((y_true == 0) & (y_pred == 1)).sum())
        tn = int(((y_true == 0) & (y_pred == 0)).sum())
        return cls.from_confusion(tp, fn, fp, tn)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fn": self.fn, "fp": self.fp, "tn": self.tn,
            "accuracy": self.accuracy, "macro_f1": self.macro_f1,
            "precision_fake": self.precision_fake, "recall_fake": self.recall_fake,
            "f1_fake": self.f1_fake, "precision_real": self.precision_real,
            "recall_real": self.recall_real, "f1_real": self.f1_real,
        }


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; iteration order is name-sorted."""

    def __init__(self, store: ParamStore, config: TrainConfig):
        self.store = store
        self.beta1 = config.beta1
        self.beta2 = config.beta2
        self.eps = config.adam_eps
        self.weight_decay = config.weight_decay
        self.t = 0
        self._m = {name: np.zeros_like(v) for name, v in store.items()}
        self._v = {name: np.zeros_like(v) for name, v in store.items()}

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name in self.store.names():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(self.store[name])
            m = self._m[name] = self.beta1 * self._m[name] + (1.0 - self.beta1) * g
            v = self._v[name] = self.beta2 * self._v[name] + (1.0 - self.beta2) * (g * g)
            update = (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p = self.store[name]
            self.store[name] = p - lr * (update + self.weight_decay * p)


# ---------------------------------------------------------------------------
# shared forward evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    metrics: Metrics
    probs: np.ndarray
    loss: float
    ids: list[str]

    def to_dict(self) -> dict:
        return {"loss": self.loss, **self.metrics.to_dict()}


def _forward_probs(
    records: list[VideoRecord],
    params: ParamStore,
    bank: MemoryBank,
    client,
    embedder,
    config: TrainConfig,
    variant: str,
    alpha: AlphaWeights,
    report_cache: dict | None = None,
    corrupt=None,
) -> np.ndarray:
    """Deterministic forward probabilities for a record list."""
    k_intra, k_cross = effective_k(config, variant)
    probs = np.zeros(len(records))
    for lo in range(0, len(records), EVAL_CHUNK):
        chunk = records[lo:lo + EVAL_CHUNK]
        primitives = parse_corpus(chunk, params, config)
        contexts = []
        for off, (rec, prim) in enumerate(zip(chunk, primitives)):
            if k_intra == 0 and k_cross == 0:
                ctx = EMPTY_CONTEXT
            else:
                ctx = retrieve(bank, prim, rec.domain, rec.id, k_intra, k_cross, alpha)
            if corrupt is not None:
                ctx = corrupt(lo + off, ctx, prim)
            contexts.append(ctx)
        if uses_reasoning(variant):
            reports = [
                resolve_reports(rec, ctx, bank, client, embedder, config, variant, report_cache)
                for rec, ctx in zip(chunk, contexts)
            ]
        else:
            reports = None
        batch = build_batch(chunk, contexts, reports, bank, config, variant, with_negatives=False)
        out = forward_batch(Tape(), params, config, batch, variant)
        probs[lo:lo + len(chunk)] = out["yhat"].value
    return probs


def _eval_records(
    records: list[VideoRecord],
    params: ParamStore,
    bank: MemoryBank,
    client,
    embedder,
    config: TrainConfig,
    variant: str,
    alpha: AlphaWeights,
    report_cache: dict | None = None,
    corrupt=None,
) -> EvalResult:
    if not records:
        raise DataError("cannot evaluate an empty dataset")
    probs = _forward_probs(
        records, params, bank, client, embedder, config, variant, alpha,
        report_cache, corrupt,
    )
    labels = np.asarray([r.label for r in records], dtype=int)
    preds = (probs >= 0.5).astype(int)
    loss = float(np.mean([bce(p, y) for p, y in zip(probs, labels)]))
    return EvalResult(
        metrics=Metrics.from_predictions(labels, preds),
        probs=probs,
        loss=loss,
        ids=[r.id for r in records],
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[dict]
    params: ParamStore
    bank: MemoryBank


def train(
    config: TrainConfig,
    train_records: list[VideoRecord],
    val_records: list[VideoRecord] | None = None,
    variant: str = "full",
    early_stop_acc: float | None = None,
    client=None,
    embedder=None,
) -> TrainResult:
    """Full training run; see module docstring for the loop structure."""
    config.validate()
    check_variant(variant)
    if not train_records:
        raise DataError("cannot train on an empty record list")
    if client is None or embedder is None:
        client, embedder = make_backends(config)
    alpha = AlphaWeights(config.alpha_logits)
    params = init_params(config, variant)
    optimizer = AdamW(params, config)
    k_intra, k_cross = effective_k(config, variant)

    bank = build_bank(train_records, params, config)
    populate_bank_reports(bank, client, embedder, config, alpha, variant)

    shuffle_rng = np.random.default_rng([config.seed, 7])
    val_cache: dict = {}
    history: list[dict] = []
    epoch = 0
    for epoch in range(1, config.epochs + 1):
        lr = lr_schedule(config, epoch)
        bank = refresh_bank(bank, params, config)
        order = shuffle_rng.permutation(len(train_records))
        losses = []
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            records = [train_records[i] for i in idx]
            contexts = []
            for rec in records:
                if k_intra == 0 and k_cross == 0:
                    contexts.append(EMPTY_CONTEXT)
                else:
                    entry = bank.entry(rec.id)
                    contexts.append(
                        retrieve(bank, entry.primitive, rec.domain, rec.id,
                                 k_intra, k_cross, alpha)
                    )
            if uses_reasoning(variant):
                reports = [bank.entry(rec.id).reports for rec in records]
            else:
                reports = None
            batch = build_batch(records, contexts, reports, bank, config, variant)
            tape = Tape()
            out = batch_loss(tape, params, config, batch, variant)
            loss_value = float(out["total"].value)
            if not math.isfinite(loss_value):
                norms = {n: float(np.linalg.norm(v)) for n, v in list(params.items())[:8]}
                raise RasrError(
                    f"non-finite loss at epoch {epoch}: batch ids {batch.ids[:8]}, "
                    f"param norms {norms}"
                )
            grads = tape.gradients(out["total"])
            optimizer.step(grads, lr)
            losses.append(loss_value)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr}
        if val_records:
            ev = _eval_records(
                val_records, params, bank, client, embedder, config, variant, alpha,
                report_cache=val_cache,
            )
            row.update(
                val_loss=ev.loss,
                val_accuracy=ev.metrics.accuracy,
                val_macro_f1=ev.metrics.macro_f1,
            )
        history.append(row)
        if (
            early_stop_acc is not None
            and row.get("val_accuracy") is not None
            and row["val_accuracy"] >= early_stop_acc
        ):
            break

    ckpt = make_checkpoint(
        config, variant, epoch,
        rng_state=shuffle_rng.bit_generator.state,
        params=params, bank=bank,
    )
    return TrainResult(checkpoint=ckpt, history=history, params=params, bank=bank)


def evaluate(
    ckpt: Checkpoint,
    records: list[VideoRecord],
    client=None,
    embedder=None,
) -> EvalResult:
    """Frozen-pipeline metrics at serialization precision."""
    if client is None or embedder is None:
        client, embedder = make_backends(ckpt.config)
    return _eval_records(
        records,
        ckpt.param_store(),
        ckpt.bank(),
        client,
        embedder,
        ckpt.config,
        ckpt.variant,
        AlphaWeights(ckpt.config.alpha_logits),
    )


# ---------------------------------------------------------------------------
# harnesses
# ---------------------------------------------------------------------------

def run_general(
    config: TrainConfig,
    corpus: list[VideoRecord],
    split_spec: SplitSpec | None = None,
    variant: str = "full",
    early_stop_acc: float | None = None,
) -> dict:
    """General-detection protocol: stratified split, train, test metrics."""
    spec = split_spec or SplitSpec(seed=config.seed)
    train_recs, val_recs, test_recs = split(corpus, spec)
    result = train(config, train_recs, val_recs, variant=variant,
                   early_stop_acc=early_stop_acc)
    test = evaluate(result.checkpoint, test_recs)
    return {"result": result, "test": test,
            "splits": (train_recs, val_recs, test_recs)}


def run_lodo(config: TrainConfig, corpus: list[VideoRecord], target: Domain) -> dict:
    """Leave-one-domain-out: source-domain training, target inference."""
    train_recs, test_recs = lodo_split(corpus, target)
    assert all(r.domain != target for r in train_recs), "target domain leaked into training"
    result = train(config, train_recs, val_records=None)
    assert all(
        e.domain != target for e in result.bank.entries
    ), "target domain leaked into the memory bank"
    test = evaluate(result.checkpoint, test_recs)
    return {"result": result, "test": test, "target": target,
            "splits": (train_recs, test_recs)}


def ablate(
    config: TrainConfig,
    corpus: list[VideoRecord],
    variant: str,
    split_spec: SplitSpec | None = None,
    early_stop_acc: float | None = None,
) -> dict:
    """Train and evaluate one architecture variant on the general split."""
    check_variant(variant)
    cfg = config
    if variant == "no-alignment":
        cfg = config.with_overrides(lambda_align=0.0)
    return run_general(cfg, corpus, split_spec, variant=variant,
                       early_stop_acc=early_stop_acc)


def _corrupted_context(
    ctx: RetrievedContext,
    bank: MemoryBank,
    query_id: str,
    query_prim,
    ratio: float,
    rng: np.random.Generator,
    alpha: AlphaWeights,
) -> RetrievedContext:
    n_items = len(ctx.items)
    n_replace = math.ceil(ratio * n_items)
    if n_replace == 0:
        return ctx
    positions = rng.choice(n_items, size=n_replace, replace=False)
    items = list(ctx.items)
    for pos in sorted(positions.tolist()):
        while True:
            j = int(rng.integers(0, len(bank)))
            entry = bank.entries[j]
            if entry.video_id != query_id:
                break
        items[pos] = ContextItem(
            video_id=entry.video_id,
            score=aggregate_similarity(query_prim, entry.primitive, alpha),
            label=entry.label,
            domain=entry.domain,
            text_digest=entry.text_digest,
            reports=entry.reports,
        )
    return RetrievedContext(items=tuple(items), intra_count=ctx.intra_count,
                            cross_count=ctx.cross_count)


def noise_robustness(
    ckpt: Checkpoint,
    records: list[VideoRecord],
    ratios: list[float],
    seed: int,
    client=None,
    embedder=None,
) -> dict[float, EvalResult]:
    """Re-evaluate with a fraction of each retrieved set randomized.

    Ratio 0 takes the exact evaluate() path and is bitwise identical
    to it.
    """
    if any(not (0.0 <= r <= 1.0) for r in ratios):
        raise DataError("noise ratios must lie in [0, 1]")
    if client is None or embedder is None:
        client, embedder = make_backends(ckpt.config)
    params = ckpt.param_store()
    bank = ckpt.bank()
    alpha = AlphaWeights(ckpt.config.alpha_logits)
    out: dict[float, EvalResult] = {}
    for ridx, ratio in enumerate(ratios):
        if ratio == 0.0:
            corrupt = None
        else:
            rng = np.random.default_rng([seed, ridx, 7919])

            def corrupt(i, ctx, prim, _rng=rng, _ratio=ratio):
                return _corrupted_context(ctx, bank, records[i].id, prim, _ratio, _rng, alpha)

        out[ratio] = _eval_records(
            records, params, bank, client, embedder, ckpt.config, ckpt.variant,
            alpha, corrupt=corrupt,
        )
    return out


_SWEEPABLE = ("K", "d_s", "tau", "lambda")


def sensitivity_sweep(
    param: str,
    values: list,
    config: TrainConfig,
    corpus: list[VideoRecord],
    split_spec: SplitSpec | None = None,
    early_stop_acc: float | None = None,
) -> list[dict]:
    """One full train+eval per value; everything else held fixed."""
    if param not in _SWEEPABLE:
        raise DataError(f"unknown sweep parameter {param!r}; choose from {_SWEEPABLE}")
    if not values:
        raise DataError("sweep needs at least one value")
    rows = []
    for value in values:
        if param == "K":
            k = int(value)
            if k < 0:
                raise DataError(f"K must be >= 0, got {value}")
            cfg = config.with_overrides(k_intra=k // 2, k_cross=k - k // 2)
        elif param == "d_s":
            cfg = config.with_overrides(d_s=int(value))
        elif param == "tau":
            cfg = config.with_overrides(tau=float(value))
        else:
            cfg = config.with_overrides(lambda_align=float(value))
        run = run_general(cfg, corpus, split_spec, early_stop_acc=early_stop_acc)
        rows.append({
            "param": param,
            "value": value,
            "test": run["test"].to_dict(),
            "epochs_ran": len(run["result"].history),
        })
    return rows
