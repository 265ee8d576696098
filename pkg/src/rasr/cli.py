"""Command-line surface: reproducible runs driven by a config file.

stdout carries machine-readable JSON, stderr carries human logs.  Exit
codes: 0 success, 1 usage, 2 data/contract error, 3 backend failure.
Every run writes a RunManifest sufficient to reproduce it under stub
backends.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, load_config
from .corpus import Domain, load_corpus, save_corpus, synth_generate
from .cspr import AlphaWeights, retrieve
from .errors import BackendError, DataError, RasrError
from .pipeline import VARIANTS, make_backends, resolve_reports
from .training import (
    ablate,
    evaluate,
    noise_robustness,
    run_general,
    run_lodo,
    sensitivity_sweep,
    train,
)

DEFAULT_NOISE_RATIOS = (0.0, 0.1, 0.2, 0.3, 0.5)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Record of one CLI run, written atomically at run end."""

    def __init__(self, command: str, argv: list[str]):
        self.data = {
            "command": command,
            "argv": argv,
            "started": datetime.now(timezone.utc).isoformat(),
            "config": None,
            "seed": None,
            "inputs": {},
            "outputs": {},
        }
        self._t0 = time.monotonic()

    def set_config(self, config: TrainConfig) -> None:
        self.data["config"] = config.to_dict()
        self.data["seed"] = config.seed

    def add_input(self, path) -> None:
        p = Path(path)
        if p.exists():
            self.data["inputs"][str(p)] = _sha256(p)

    def add_output(self, path) -> None:
        p = Path(path)
        if p.exists():
            self.data["outputs"][str(p)] = _sha256(p)

    def write(self, path) -> None:
        self.data["finished"] = datetime.now(timezone.utc).isoformat()
        self.data["wall_clock_s"] = round(time.monotonic() - self._t0, 3)
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(self.data, sort_keys=True, indent=2) + "\n",
                       encoding="utf-8")
        os.replace(tmp, path)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _build_parser() -> _Parser:
    parser = _Parser(prog="rasr", description=__doc__)
    parser.add_argument("--json", action="store_true",
                        help="emit a JSON envelope on stdout even for errors")
    sub = parser.add_subparsers(dest="command")

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="flat key=value config file")
            p.add_argument("--seed", type=int, help="override config seed")
            p.add_argument("--epochs", type=int, help="override config epochs")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override any config field")
        p.add_argument("--manifest", help="run-manifest path")
        p.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                       help="emit a JSON envelope on stdout even for errors")

    p = sub.add_parser("validate", help="validate a corpus file")
    p.add_argument("corpus")
    common(p, config=False)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--separability", type=float, default=0.9)
    p.add_argument("--leak", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", help="run-manifest path")
    p.add_argument("--json", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("train", help="train on a corpus (general split)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    common(p, config=False)

    p = sub.add_parser("lodo", help="leave-one-domain-out run")
    p.add_argument("--corpus", required=True)
    p.add_argument("--target", required=True, help="held-out domain name")
    p.add_argument("--out", help="checkpoint output path")
    common(p)

    p = sub.add_parser("ablate", help="train+eval one ablation variant")
    p.add_argument("--corpus", required=True)
    p.add_argument("--variant", required=True, choices=VARIANTS[1:])
    common(p)

    p = sub.add_parser("robustness", help="retrieval-noise robustness curve")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--ratios", default=",".join(str(r) for r in DEFAULT_NOISE_RATIOS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", help="run-manifest path")
    p.add_argument("--json", action="store_true", default=argparse.SUPPRESS)

    p = sub.add_parser("sweep", help="hyperparameter sensitivity sweep")
    p.add_argument("--corpus", required=True)
    p.add_argument("--param", required=True, choices=("K", "d_s", "tau", "lambda"))
    p.add_argument("--values", required=True, help="comma-separated values")
    common(p)

    p = sub.add_parser("retrieve", help="dump retrieval results for one record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--id", required=True)
    common(p, config=False)

    p = sub.add_parser("report", help="dump prompts/reports/confidences for one record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--id", required=True)
    common(p, config=False)

    return parser


def _resolve_config(args) -> TrainConfig:
    overrides = {}
    for item in getattr(args, "set", []) or []:
        if "=" not in item:
            raise DataError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, raw = item.partition("=")
        overrides[key.strip()] = raw.strip()
    if overrides:
        from .config import _coerce  # reuse the field coercion

        overrides = {k: _coerce(k, v) if isinstance(v, str) else v
                     for k, v in overrides.items()}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    return load_config(getattr(args, "config", None), overrides)


def _manifest_path(args, out: str | None = None) -> Path:
    if getattr(args, "manifest", None):
        return Path(args.manifest)
    if out:
        return Path(str(out) + ".manifest.json")
    return Path(f"rasr-{args.command}-manifest.json")


def _record_by_id(records, rec_id):
    for rec in records:
        if rec.id == rec_id:
            return rec
    raise DataError(f"record id {rec_id!r} not found in corpus")


def _cmd_validate(args, manifest) -> dict:
    records = load_corpus(args.corpus)
    manifest.add_input(args.corpus)
    domains = sorted({r.domain.value for r in records})
    return {"records": len(records), "domains": domains,
            "fake": sum(r.label for r in records)}


def _cmd_synth(args, manifest) -> dict:
    records = synth_generate(args.n, args.separability, args.leak, args.seed)
    save_corpus(records, args.out)
    manifest.add_output(args.out)
    return {"records": len(records), "out": args.out}


def _cmd_train(args, manifest) -> dict:
    config = _resolve_config(args)
    manifest.set_config(config)
    corpus = load_corpus(args.corpus)
    manifest.add_input(args.corpus)
    run = run_general(config, corpus)
    save_checkpoint(args.out, run["result"].checkpoint)
    history_path = Path(str(args.out) + ".history.jsonl")
    with open(history_path, "w", encoding="utf-8") as fh:
        for row in run["result"].history:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    manifest.add_output(args.out)
    manifest.add_output(history_path)
    return {"epochs_ran": len(run["result"].history), "test": run["test"].to_dict(),
            "checkpoint": str(args.out)}


def _cmd_eval(args, manifest) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    records = load_corpus(args.corpus)
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.corpus)
    ev = evaluate(ckpt, records)
    return ev.to_dict()


def _cmd_lodo(args, manifest) -> dict:
    config = _resolve_config(args)
    manifest.set_config(config)
    corpus = load_corpus(args.corpus)
    manifest.add_input(args.corpus)
    run = run_lodo(config, corpus, Domain.parse(args.target))
    if args.out:
        save_checkpoint(args.out, run["result"].checkpoint)
        manifest.add_output(args.out)
    return {"target": args.target, "test": run["test"].to_dict(),
            "train_size": len(run["splits"][0]), "test_size": len(run["splits"][1])}


def _cmd_ablate(args, manifest) -> dict:
    config = _resolve_config(args)
    manifest.set_config(config)
    corpus = load_corpus(args.corpus)
    manifest.add_input(args.corpus)
    run = ablate(config, corpus, args.variant)
    return {"variant": args.variant, "test": run["test"].to_dict()}


def _cmd_robustness(args, manifest) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    records = load_corpus(args.corpus)
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.corpus)
    try:
        ratios = [float(x) for x in args.ratios.split(",") if x.strip() != ""]
    except ValueError:
        raise DataError(f"bad --ratios value {args.ratios!r}") from None
    curve = noise_robustness(ckpt, records, ratios, args.seed)
    return {"curve": [{"ratio": r, **ev.to_dict()} for r, ev in curve.items()]}


def _cmd_sweep(args, manifest) -> dict:
    config = _resolve_config(args)
    manifest.set_config(config)
    corpus = load_corpus(args.corpus)
    manifest.add_input(args.corpus)
    raw = [x for x in args.values.split(",") if x.strip() != ""]
    values = [float(x) if args.param in ("tau", "lambda") else int(x) for x in raw]
    rows = sensitivity_sweep(args.param, values, config, corpus)
    return {"param": args.param, "rows": rows}


def _cmd_retrieve(args, manifest) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    records = load_corpus(args.corpus)
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.corpus)
    rec = _record_by_id(records, args.id)
    from .cspr import parse_corpus

    params = ckpt.param_store()
    bank = ckpt.bank()
    prim = parse_corpus([rec], params, ckpt.config)[0]
    ctx = retrieve(bank, prim, rec.domain, rec.id, ckpt.config.k_intra,
                   ckpt.config.k_cross, AlphaWeights(ckpt.config.alpha_logits))
    return {
        "query_id": rec.id,
        "items": [
            {"id": it.video_id, "score": it.score, "label": it.label,
             "domain": it.domain.value}
            for it in ctx.items
        ],
    }


def _cmd_report(args, manifest) -> dict:
    ckpt = load_checkpoint(args.checkpoint)
    records = load_corpus(args.corpus)
    manifest.add_input(args.checkpoint)
    manifest.add_input(args.corpus)
    rec = _record_by_id(records, args.id)
    from .cspr import parse_corpus
    from .dgmp import build_prompt

    params = ckpt.param_store()
    bank = ckpt.bank()
    client, embedder = make_backends(ckpt.config)
    prim = parse_corpus([rec], params, ckpt.config)[0]
    ctx = retrieve(bank, prim, rec.domain, rec.id, ckpt.config.k_intra,
                   ckpt.config.k_cross, AlphaWeights(ckpt.config.alpha_logits))
    reports = resolve_reports(rec, ctx, bank, client, embedder, ckpt.config,
                              ckpt.variant)
    out = {"id": rec.id, "modalities": {}}
    for m, rep in reports.items():
        out["modalities"][m] = {
            "prompt": build_prompt(m, rec.domain, ctx, ckpt.config.ref_char_budget),
            "report": rep.text,
            "confidence": rep.confidence,
            "low_confidence": rep.low_confidence,
            "attempts": rep.attempts,
        }
    return out


_COMMANDS = {
    "validate": _cmd_validate,
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "lodo": _cmd_lodo,
    "ablate": _cmd_ablate,
    "robustness": _cmd_robustness,
    "sweep": _cmd_sweep,
    "retrieve": _cmd_retrieve,
    "report": _cmd_report,
}


def run(argv: list[str]) -> int:
    parser = _build_parser()
    want_json = "--json" in argv
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        _log(f"usage error: {exc}")
        parser.print_usage(sys.stderr)
        if want_json:
            _emit({"status": "error", "exit_code": 1, "error": str(exc)})
        return 1
    if not args.command:
        parser.print_usage(sys.stderr)
        if want_json or args.json:
            _emit({"status": "error", "exit_code": 1, "error": "missing subcommand"})
        return 1

    manifest = RunManifest(args.command, argv)
    try:
        payload = _COMMANDS[args.command](args, manifest)
        exit_code = 0
    except BackendError as exc:
        _log(f"backend error: {exc}")
        if args.json:
            _emit({"status": "error", "exit_code": 3, "error": str(exc)})
        return 3
    except (DataError, RasrError) as exc:
        _log(f"error: {exc}")
        if args.json:
            _emit({"status": "error", "exit_code": 2, "error": str(exc)})
        return 2

    out_path = getattr(args, "out", None)
    manifest.write(_manifest_path(args, out_path))
    if args.json:
        _emit({"status": "ok", "exit_code": 0, "command": args.command, **payload})
    else:
        _emit(payload)
    return exit_code


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
