"""Command-line entry point.

Subcommands cover the whole pipeline: ``synth`` builds a corpus, ``pretrain``
trains and freezes the acoustic model, ``train`` runs contrastive training,
``detect`` spots enrolled keywords in a feature track, ``eval`` reports
recall/EER/AUC at a calibrated threshold, and ``bench`` times detection
against the posterior-handling baseline. Every command is deterministic
given ``--seed`` and writes a resolved-config snapshot into its output
directory. Failures print a machine-readable JSON error object to stderr
and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import corpus as corpus_mod
from .encoders import AcousticModel, AcousticModelConfig, am_pretrain, frame_accuracy
from .errors import CladError, UsageError
from .evaluation import (
    bench_detectors,
    build_trial_set,
    auc as auc_metric,
    calibrate_fa_threshold,
    eer as eer_metric,
    evaluate_detection,
    select_keywords,
)
from .stream import StreamState, detect, enroll
from .trainer import (
    ModelBundle,
    build_bundle,
    load_am_checkpoint,
    load_checkpoint,
    save_am_checkpoint,
    save_checkpoint,
    train_clad,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with plain text
        raise UsageError(message, hint="run with --help for usage")


def _utterance_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, 3, index]).generate_state(1)[0])


def _load_corpus(path: str):
    manifest, records = corpus_mod.read_manifest(path)
    return manifest, records


def _resolve_keywords(arg: str | None, manifest, records, cfg, section_key: str):
    min_phn = cfg["sampling"]["min_phonemes"]
    if arg:
        words = [w.strip() for w in arg.split(",") if w.strip()]
        if not words:
            raise UsageError("--keywords is empty", hint="pass a comma-separated word list")
        unknown = [w for w in words if w not in manifest.lexicon]
        if unknown:
            sample = ", ".join(sorted(manifest.lexicon)[:6])
            raise UsageError(
                f"unknown keywords: {', '.join(unknown)}",
                hint=f"words come from the corpus lexicon, e.g. {sample}",
            )
        return {w: manifest.lexicon[w] for w in words}
    return select_keywords(records, manifest.lexicon, cfg[section_key]["num_keywords"], min_phn)


def _window_config(cfg, records, manifest):
    t_mean = cfg["window"]["t_mean_ms"]
    if t_mean is None:
        t_mean = corpus_mod.estimate_t_mean_ms(records, manifest.frame_rate_hz)
    return config_mod.window_config(cfg, t_mean_ms=t_mean)


def cmd_synth(args) -> int:
    cfg = config_mod.load_config(args.config, _seed_override(args))
    out = Path(args.out)
    config_mod.write_snapshot(cfg, out)
    seed = cfg["seed"]
    c = cfg["corpus"]
    inventory = corpus_mod.synth_inventory(
        c["num_phonemes"],
        c["feature_dim"],
        seed,
        separation=c["separation"],
        duration_range=tuple(c["duration_range"]),
    )
    lexicon = corpus_mod.synth_lexicon(
        inventory,
        c["lexicon_words"],
        seed + 1,
        min_len=c["min_word_len"],
        max_len=c["max_word_len"],
        prefix_families=c["prefix_families"],
        family_size=c["family_size"],
        prefix_len=c["prefix_len"],
    )
    records = [
        corpus_mod.synth_utterance(
            inventory,
            lexicon,
            c["words_per_utterance"],
            c["noise_sigma"],
            c["coart_frames"],
            _utterance_seed(seed, i),
        )
        for i in range(c["num_utterances"])
    ]
    manifest = corpus_mod.CorpusManifest(
        frame_rate_hz=c["frame_rate_hz"],
        feature_dim=c["feature_dim"],
        inventory=inventory,
        lexicon=lexicon,
    )
    manifest_path = out / "corpus.jsonl"
    corpus_mod.write_manifest(manifest, records, manifest_path)
    summary = {
        "manifest": str(manifest_path),
        "num_records": len(records),
        "total_frames": int(sum(r.num_frames for r in records)),
        "lexicon_words": len(lexicon),
        "estimated_t_mean_ms": corpus_mod.estimate_t_mean_ms(records, c["frame_rate_hz"]),
    }
    (out / "synth_summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_pretrain(args) -> int:
    cfg = config_mod.load_config(args.config, _seed_override(args))
    out = Path(args.out)
    config_mod.write_snapshot(cfg, out)
    manifest, records = _load_corpus(args.corpus)
    a = cfg["am"]
    model = AcousticModel(
        AcousticModelConfig(
            feature_dim=manifest.feature_dim,
            num_phonemes=manifest.inventory.num_phonemes,
            hidden=a["hidden"],
            projection=a["projection"],
            memory_layers=a["memory_layers"],
            left_context=a["left_context"],
            right_context=a["right_context"],
        ),
        seed=cfg["seed"],
    )
    model, history = am_pretrain(
        model, records, epochs=a["pretrain_epochs"], lr=a["pretrain_lr"], seed=cfg["seed"]
    )
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "am.ckpt"
    save_am_checkpoint(ckpt, model, history)
    _, held = corpus_mod.holdout_split(records, 0.1)
    report = {
        "checkpoint": str(ckpt),
        "holdout_ce": history,
        "holdout_frame_accuracy": frame_accuracy(model, held or records),
    }
    (out / "pretrain_report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    cfg = config_mod.load_config(args.config, _seed_override(args))
    out = Path(args.out)
    config_mod.write_snapshot(cfg, out)
    manifest, records = _load_corpus(args.corpus)
    am = load_am_checkpoint(args.am)
    bundle = ModelBundle(
        am=am,
        audio_encoder=_audio_encoder(cfg, am, seed=cfg["seed"] + 1),
        text_encoder=_text_encoder(cfg, am, manifest, seed=cfg["seed"] + 2),
        frame_rate_hz=manifest.frame_rate_hz,
    )
    train_pool, _eval_pool = corpus_mod.holdout_split(records, cfg["eval"]["eval_fraction"], salt="eval")
    window_cfg = _window_config(cfg, train_pool, manifest)
    report = train_clad(
        bundle,
        train_pool,
        config_mod.train_config(cfg, cfg["seed"]),
        config_mod.loss_config(cfg),
        window_cfg,
        config_mod.label_config(cfg),
        config_mod.sampling_config(cfg),
    )
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "clad.ckpt"
    save_checkpoint(ckpt, bundle)
    (out / "train_report.json").write_text(report.to_json() + "\n")
    payload = json.loads(report.to_json(include_timing=False))
    payload["checkpoint"] = str(ckpt)
    print(json.dumps(payload, sort_keys=True))
    return 0


def _audio_encoder(cfg, am, seed):
    from .encoders import AcousticEncoder, EncoderConfig

    e = cfg["encoder"]
    return AcousticEncoder(
        EncoderConfig(
            input_dim=am.config.projection,
            layers=e["layers"],
            hidden=e["hidden"],
            projection=e["projection"],
            embedding_dim=e["embedding_dim"],
        ),
        seed=seed,
    )


def _text_encoder(cfg, am, manifest, seed):
    from .encoders import EncoderConfig, TextEncoder

    e = cfg["encoder"]
    return TextEncoder(
        EncoderConfig(
            input_dim=am.config.projection,
            layers=e["layers"],
            hidden=e["hidden"],
            projection=e["projection"],
            embedding_dim=e["embedding_dim"],
        ),
        manifest.inventory.num_phonemes,
        seed=seed,
    )


def cmd_detect(args) -> int:
    cfg = config_mod.load_config(args.config, _seed_override(args))
    manifest, records = _load_corpus(args.corpus)
    bundle = load_checkpoint(args.checkpoint)
    keywords = _resolve_keywords(args.keywords, manifest, records, cfg, "eval")
    if not keywords:
        raise UsageError("no keywords to enroll", hint="pass --keywords word01,word02")
    window_cfg = _window_config(cfg, records, manifest)
    threshold = args.threshold
    if threshold is None:
        if args.fa_budget is None:
            raise UsageError(
                "detect needs --threshold or --fa-budget",
                hint="--fa-budget calibrates on the keyword-free part of the corpus",
            )
        fa_records = [
            r for r in records if all(w.word not in keywords for w in r.words)
        ]
        if not fa_records:
            raise UsageError("corpus has no keyword-free records to calibrate on")
        threshold = calibrate_fa_threshold(bundle, fa_records, keywords, window_cfg, args.fa_budget)
    features = corpus_mod.read_features(args.track)
    state = StreamState(bundle=bundle)
    for word, seq in keywords.items():
        enroll(state, word, seq, window_cfg)
    events = detect(state, features, threshold)
    lines = [e.to_json() for e in events]
    if args.out:
        out = Path(args.out)
        config_mod.write_snapshot(cfg, out)
        (out / "events.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    for line in lines:
        print(line)
    return 0


def cmd_eval(args) -> int:
    cfg = config_mod.load_config(args.config, _seed_override(args))
    out = Path(args.out)
    config_mod.write_snapshot(cfg, out)
    manifest, records = _load_corpus(args.corpus)
    bundle = load_checkpoint(args.checkpoint)
    keywords = _resolve_keywords(args.keywords, manifest, records, cfg, "eval")
    window_cfg = _window_config(cfg, records, manifest)
    fa_budget = args.fa_budget if args.fa_budget is not None else cfg["eval"]["fa_budget"]
    _train_pool, eval_pool = corpus_mod.holdout_split(
        records, cfg["eval"]["eval_fraction"], salt="eval"
    )
    fa_records = [r for r in records if all(w.word not in keywords for w in r.words)]
    eval_records = [r for r in eval_pool if any(w.word in keywords for w in r.words)]
    report = evaluate_detection(
        bundle, eval_records, fa_records, keywords, window_cfg, fa_budget=fa_budget
    )
    trials = build_trial_set(
        bundle,
        eval_pool,
        keywords,
        window_cfg,
        config_mod.label_config(cfg),
        manifest.lexicon,
        dataset_id="eval",
    )
    has_both = any(t.positive for t in trials.trials) and any(
        not t.positive for t in trials.trials
    )
    if has_both:
        report.eer = eer_metric(trials)
        report.auc = auc_metric(trials)
    if cfg["eval"]["write_roc_csv"] and has_both:
        from .evaluation import _roc_points

        far, tpr, thresholds = _roc_points(trials.trials)
        rows = ["far,tpr,threshold"] + [
            f"{f},{t},{th}" for f, t, th in zip(far, tpr, thresholds)
        ]
        (out / "roc.csv").write_text("\n".join(rows) + "\n")
    (out / "eval_report.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


def cmd_bench(args) -> int:
    cfg = config_mod.load_config(args.config, _seed_override(args))
    out = Path(args.out)
    config_mod.write_snapshot(cfg, out)
    manifest, records = _load_corpus(args.corpus)
    bundle = load_checkpoint(args.checkpoint)
    b = cfg["bench"]
    keywords = _resolve_keywords(args.keywords, manifest, records, cfg, "bench")
    window_cfg = _window_config(cfg, records, manifest)
    tracks = [
        corpus_mod.synth_utterance(
            manifest.inventory,
            manifest.lexicon,
            b["track_words"],
            cfg["corpus"]["noise_sigma"],
            cfg["corpus"]["coart_frames"],
            _utterance_seed(cfg["seed"] + 17, i),
        ).features
        for i in range(b["num_tracks"])
    ]
    result = bench_detectors(
        bundle,
        tracks,
        keywords,
        window_cfg,
        smoothing_window=b["smoothing_window"],
        threshold=b["threshold"],
        repetitions=b["repetitions"],
    )
    table = result.table()
    (out / "bench_report.json").write_text(json.dumps(table, sort_keys=True, indent=2) + "\n")
    print(json.dumps({"median_rsa": table["rsa"]["median"], "spread_std": table["rsa"]["spread_std"]}, sort_keys=True))
    return 0


def _seed_override(args) -> dict:
    return {"seed": args.seed} if args.seed is not None else {}


def build_parser() -> _Parser:
    parser = _Parser(prog="cladkws", description=__doc__)
    parser.add_argument(
        "--print-config-schema",
        action="store_true",
        help="print the JSON schema all config files are validated against, and exit",
    )
    sub = parser.add_subparsers(dest="command")

    def common(p, corpus=True, checkpoint=False, needs_out=True):
        p.add_argument("--config", default=None, help="JSON config file (defaults apply if omitted)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
        else:
            p.add_argument("--out", default=None, help="optional output directory")
        if corpus:
            p.add_argument("--corpus", required=True, help="corpus manifest (corpus.jsonl)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="trained model checkpoint")

    p = sub.add_parser("synth", help="generate a synthetic aligned corpus")
    common(p, corpus=False)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="train and freeze the acoustic model")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="contrastive training of the encoders")
    common(p)
    p.add_argument("--am", required=True, help="acoustic-model checkpoint from pretrain")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("detect", help="spot keywords in one feature track")
    common(p, checkpoint=True, needs_out=False)
    p.add_argument("--track", required=True, help="binary feature file to scan")
    p.add_argument("--keywords", default=None, help="comma-separated words from the lexicon")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--fa-budget", type=int, default=None, dest="fa_budget")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("eval", help="recall at a calibrated threshold, EER and AUC")
    common(p, checkpoint=True)
    p.add_argument("--keywords", default=None)
    p.add_argument("--fa-budget", type=int, default=None, dest="fa_budget")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="relative speed against the posterior baseline")
    common(p, checkpoint=True)
    p.add_argument("--keywords", default=None)
    p.set_defaults(fn=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.print_config_schema:
            print(json.dumps(config_mod.CONFIG_SCHEMA, sort_keys=True, indent=2))
            return 0
        if not getattr(args, "command", None):
            raise UsageError("no subcommand given", hint="one of: synth, pretrain, train, detect, eval, bench")
        return args.fn(args)
    except UsageError as err:
        _print_error("usage", err, hint=err.hint)
        return 2
    except CladError as err:
        _print_error(type(err).__name__, err)
        return 1
    except OSError as err:
        _print_error("io", err)
        return 1


def _print_error(kind: str, err: Exception, hint: str = "") -> None:
    payload = {"error": {"type": kind, "message": str(err)}}
    if hint:
        payload["error"]["hint"] = hint
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
