"""Command-line entry point: ``coughscreen <command> [options]``.

Exit codes: 0 success, 1 data error, 2 usage or configuration error.
Machine output (JSON, CSV) goes to stdout or files; logs go to stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from typing import Optional

from .config import PipelineConfig, effective_config_text, load_config

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("coughscreen")


class UsageError(Exception):
    """Bad flags, config or missing input paths (exit 2)."""


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI config file (env COUGH_<SECTION>_<KEY> overrides it)")
    p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
    p.add_argument("--seed", type=int, default=None, help="seed for every random step")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="coughscreen", description="Cough-audio screening pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="resample, denoise and normalize a corpus")
    p.add_argument("--manifest")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", parents=[common], help="train the gate and the CNN")
    p.add_argument("--manifest")
    p.add_argument("--out", help="bundle path to write")
    p.add_argument("--history", help="history CSV path (default: <out>.history.csv)")
    p.add_argument("--epochs", type=int, help="override train.epochs")

    p = sub.add_parser("eval", parents=[common], help="evaluate a bundle on a manifest")
    p.add_argument("--manifest")
    p.add_argument("--bundle")
    p.add_argument("--level", choices=("chunk", "file", "individual"), default="chunk")
    p.add_argument("--out", help="directory for report.json and roc.csv")

    p = sub.add_parser("infer", parents=[common], help="screen one audio file")
    p.add_argument("--bundle")
    p.add_argument("audio")

    p = sub.add_parser("synth", parents=[common], help="write a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--gate", action="store_true", help="write labeled gate chunks instead of recordings")

    p = sub.add_parser("serve", parents=[common], help="run the HTTP service")
    p.add_argument("--bundle")
    p.add_argument("--port", type=int)
    p.add_argument("--data-dir")
    return parser


def _resolve_config(args) -> PipelineConfig:
    if args.config and not os.path.isfile(args.config):
        raise UsageError(f"config file not found: {args.config}")
    try:
        cfg = load_config(args.config)
    except ValueError as exc:
        raise UsageError(f"bad config: {exc}")
    paths = cfg.paths
    upd = {}
    if getattr(args, "manifest", None):
        upd["manifest"] = args.manifest
    if getattr(args, "bundle", None):
        upd["bundle"] = args.bundle
    if args.command == "train" and args.out:
        upd["bundle"] = args.out
    if args.command in ("preprocess", "eval") and args.out:
        upd["output_dir"] = args.out
    if upd:
        cfg = cfg.replace(paths=dataclasses.replace(paths, **upd))
    if args.seed is not None:
        cfg = cfg.with_values("train", seed=args.seed)
    if getattr(args, "epochs", None):
        cfg = cfg.with_values("train", epochs=args.epochs)
    return cfg


def _require_file(path: str, what: str) -> None:
    if not path:
        raise UsageError(f"{what} path is required")
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")


def _load_records(path: str):
    from .dataset import load_manifest

    errors: list = []
    records = load_manifest(path, errors)
    for e in errors:
        print(f"{path}: {e}", file=sys.stderr)
    return records, errors


# --- commands ---------------------------------------------------------------------

def cmd_preprocess(args, cfg: PipelineConfig) -> int:
    from .audio_io import write_wav
    from .dsp import preprocess_with_report
    from .pipeline import load_audio

    _require_file(cfg.paths.manifest, "manifest")
    if not cfg.paths.output_dir:
        raise UsageError("--out is required")
    if args.dry_run:
        return _dry_run(cfg)
    records, errors = _load_records(cfg.paths.manifest)
    if not records and not errors:
        log.warning("manifest is empty; nothing to do")
    os.makedirs(cfg.paths.output_dir, exist_ok=True)
    failures = len(errors)
    reports = []
    for rec in records:
        rel = os.path.splitext(rec.audio_path)[0] + ".wav"
        dest = os.path.join(cfg.paths.output_dir, rel)
        try:
            buf = load_audio(rec.resolved_path)
            out, report = preprocess_with_report(buf, cfg.preprocess)
            os.makedirs(os.path.dirname(dest) or ".", exist_ok=True)
            write_wav(out, dest)
        except Exception as exc:  # per-file diagnostics, keep going
            failures += 1
            print(f"{rec.audio_path}: {type(exc).__name__}: {exc}", file=sys.stderr)
            continue
        reports.append({"audio_path": rel, "source": rec.audio_path, **report.to_dict()})
    with open(os.path.join(cfg.paths.output_dir, "reports.jsonl"), "w", encoding="utf-8") as f:
        f.write("".join(json.dumps(r, sort_keys=True) + "\n" for r in reports))
    log.info("preprocessed %d file(s), %d failure(s)", len(reports), failures)
    return EXIT_DATA if failures else EXIT_OK


def cmd_train(args, cfg: PipelineConfig) -> int:
    from .bundle import save_bundle
    from .dataset import dumps_record
    from .pipeline import train_pipeline

    _require_file(cfg.paths.manifest, "manifest")
    if not cfg.paths.bundle:
        raise UsageError("--out is required")
    if args.dry_run:
        return _dry_run(cfg)
    records, errors = _load_records(cfg.paths.manifest)
    if errors:
        return EXIT_DATA

    def progress(r):
        log.info("epoch %3d  train_loss %.5f  val_loss %.5f  val_acc %.3f", r.epoch, r.train_loss, r.val_loss, r.val_accuracy)

    result = train_pipeline(records, cfg, progress=progress)
    out = cfg.paths.bundle
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    save_bundle(result.bundle, out)
    result.history.write_csv(args.history or out + ".history.csv")
    with open(out + ".split.json", "w", encoding="utf-8") as f:
        json.dump(result.plan.to_dict(), f, sort_keys=True, indent=1)
    # held-out test records with absolute audio paths, ready for `eval`
    with open(out + ".test.jsonl", "w", encoding="utf-8") as f:
        for item in result.test_items:
            rec = dataclasses.replace(item.record, audio_path=item.record.resolved_path)
            f.write(dumps_record(rec) + "\n")
    print(json.dumps({
        "bundle": out,
        "best_epoch": result.history.best_epoch,
        "gate_train_accuracy": result.gate_train_accuracy,
        "epochs": len(result.history.epochs),
    }, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    from .bundle import load_bundle
    from .evaluation import evaluate_levels
    from .pipeline import bundle_pipeline_config, featurize_records, score_items

    _require_file(cfg.paths.bundle, "bundle")
    _require_file(cfg.paths.manifest, "manifest")
    if args.dry_run:
        return _dry_run(cfg)
    bundle = load_bundle(cfg.paths.bundle)
    cfg = bundle_pipeline_config(bundle, cfg)
    records, errors = _load_records(cfg.paths.manifest)
    if errors:
        return EXIT_DATA
    items = featurize_records(records, cfg, bundle.gate)
    scored = score_items(bundle, items)
    report = evaluate_levels(scored, cfg.aggregation, bundle.decision_threshold, levels=[args.level])[args.level]
    text = report.to_json()
    print(text)
    if cfg.paths.output_dir:
        os.makedirs(cfg.paths.output_dir, exist_ok=True)
        with open(os.path.join(cfg.paths.output_dir, "report.json"), "w", encoding="utf-8") as f:
            f.write(text + "\n")
        with open(os.path.join(cfg.paths.output_dir, "roc.csv"), "w", encoding="utf-8", newline="") as f:
            f.write(report.roc_csv())
    log.info("%s level: accuracy %s over %d samples", args.level, report.accuracy, report.n_samples)
    return EXIT_OK


def cmd_infer(args, cfg: PipelineConfig) -> int:
    from .bundle import load_bundle
    from .pipeline import bundle_pipeline_config, load_audio, screen

    _require_file(cfg.paths.bundle, "bundle")
    if not os.path.exists(args.audio):
        raise UsageError(f"audio file not found: {args.audio}")
    if args.dry_run:
        return _dry_run(cfg)
    bundle = load_bundle(cfg.paths.bundle)
    cfg = bundle_pipeline_config(bundle, cfg)
    buf = load_audio(args.audio)
    result = screen(bundle, buf, cfg, submission_id=os.path.basename(args.audio))
    print(json.dumps(result.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_synth(args, cfg: PipelineConfig) -> int:
    from .synth import synth_corpus, synth_gate_corpus

    if args.n < 0:
        raise UsageError("--n must be >= 0")
    if args.dry_run:
        return _dry_run(cfg)
    seed = 0 if args.seed is None else args.seed
    write = synth_gate_corpus if args.gate else synth_corpus
    path = write(args.out, args.n, seed)
    if args.n == 0:
        log.warning("n=0: wrote an empty manifest")
    print(json.dumps({"manifest": path, "n": args.n, "seed": seed}, sort_keys=True))
    return EXIT_OK


def cmd_serve(args, cfg: PipelineConfig) -> int:
    from .service import ServiceSettings, serve

    settings = ServiceSettings.from_env(model_path=args.bundle, port=args.port, data_dir=args.data_dir)
    if args.dry_run:
        return _dry_run(cfg, {"service": dataclasses.asdict(dataclasses.replace(settings, admin_token=None))})
    return serve(settings, cfg)


def _dry_run(cfg: PipelineConfig, extra: Optional[dict] = None) -> int:
    sys.stdout.write(effective_config_text(cfg))
    if extra:
        sys.stdout.write(json.dumps(extra, sort_keys=True) + "\n")
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "synth": cmd_synth,
    "serve": cmd_serve,
}


def main(argv=None) -> int:
    from .errors import CoughScreenError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"coughscreen {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CoughScreenError, OSError) as exc:
        print(f"coughscreen {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
