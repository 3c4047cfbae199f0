"""``soli``: synth, augment, stats, train, eval and analyze from one executable.

Exit status is 0 on success, 1 on a runtime error and 2 on a usage error.
Human-readable progress goes to stderr; ``--json`` prints a machine-readable
summary (always carrying the seed and a config hash) to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .analysis import embedding_distance_report, emit_report
from .config import TrainConfig, load_config, stable_hash
from .dataset import AugmentedSet, compute_stats, generate_augmented_set, load_manifest, load_variants
from .errors import ConfigError, ProfileError, SoliError
from .imageops import TABLE_PROFILES, canonical_profile
from .metrics import checkpoint_id, evaluate_checkpoint
from .nncore import Vocabulary, build_vocabulary, load_checkpoint, save_checkpoint, spec_dict
from .synth import config_hash as corpus_hash
from .synth import MIN_SIZE, generate_corpus
from .trainer import checkpoint_meta, data_for, new_model, train, write_log

log = logging.getLogger("soli")


class UsageError(Exception):
    pass


def _profiles(text: str) -> list[str]:
    out = []
    for tok in (t.strip() for t in text.split(",")):
        if not tok:
            continue
        try:
            out.append(canonical_profile(tok))
        except ProfileError as exc:
            raise UsageError(f"unknown profile {tok!r}: {exc}") from None
    if not out:
        raise UsageError("--profiles is empty")
    return list(dict.fromkeys(out))


def _header(seed, chash, **extra) -> str:
    parts = [f"seed={seed}", f"config_hash={chash}"] + [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


def _load_set(manifest, variants) -> AugmentedSet:
    records = load_manifest(manifest)
    if variants:
        return load_variants(records, variants)
    return AugmentedSet({r.image_id: r for r in records}, ("normal",), {})


# -- commands ------------------------------------------------------------------------

def cmd_synth(args) -> dict:
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")
    if args.size < MIN_SIZE:
        raise UsageError(f"--size must be >= {MIN_SIZE}, got {args.size}")
    manifest = generate_corpus(args.out, count=args.count, size=args.size, seed=args.seed)
    log.info("wrote %d images and %s", args.count, manifest)
    return {"seed": args.seed, "config_hash": corpus_hash({"count": args.count, "size": args.size, "seed": args.seed}),
            "manifest": str(manifest), "count": args.count}


def cmd_augment(args) -> dict:
    profiles = _profiles(args.profiles) if args.profiles else list(TABLE_PROFILES)
    records = load_manifest(args.manifest)
    out = Path(args.out)
    aset, report = generate_augmented_set(records, profiles, out, threads=args.threads)
    chash = stable_hash({"manifest": Path(args.manifest).name, "profiles": profiles})
    meta = {"profiles": profiles, "images": len(records), "seed": None, "config_hash": chash,
            "errors": report.errors}
    (out / "augment.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    for e in report.errors:
        log.error("%s %s: %s", e["image_id"], e["profile"], e["error"])
    log.info("%d written, %d unchanged, %d errors", report.written, report.unchanged, len(report.errors))
    return {"seed": None, "config_hash": chash, "ok": report.ok, "written": report.written,
            "unchanged": report.unchanged, "errors": report.errors,
            "variants": str(out / "variants.jsonl")}


def cmd_stats(args) -> dict:
    stats = compute_stats(load_manifest(args.manifest))
    d = stats.to_dict()
    for axis in ("height", "width", "channels"):
        a = d[axis]
        log.info("%-8s mean %.2f std %.2f median %.1f min %g max %g", axis, a["mean"], a["std_dev"],
                 a["median"], a["min"], a["max"])
    return {"seed": None, "config_hash": stable_hash({"manifest": Path(args.manifest).name}), "stats": d}


_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name != "mode"]


def _train_config(args) -> TrainConfig:
    overrides = {}
    for name in _TRAIN_KEYS:
        v = getattr(args, name, None)
        if v is not None:
            overrides["lambda" if name == "lam" else name] = v
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.mode:
        overrides["mode"] = args.mode
    return load_config(args.config, overrides)


def cmd_train(args) -> dict:
    try:
        cfg = _train_config(args)
    except ConfigError as exc:
        raise UsageError(str(exc)) from None
    if cfg.mode != "baseline" and not (args.init or args.resume):
        raise UsageError(f"--mode {cfg.mode} fine-tunes a trained model; pass --init CHECKPOINT")
    if cfg.mode in ("soli-par", "soli-con") and cfg.gamma == 0:
        log.warning("gamma=0: the contrastive term is off and %s degenerates to cross-entropy training",
                    cfg.mode)
    aset = _load_set(args.manifest, args.variants)
    missing = [p for p in cfg.profiles if p != "normal" and p not in aset.profiles]
    if missing:
        raise UsageError(f"profile(s) {', '.join(missing)} not present in the variants set")

    resume, init_id = None, None
    if args.resume:
        ps, meta = load_checkpoint(args.resume)
        if meta.get("config_hash") != cfg.config_hash():
            raise ConfigError("--resume checkpoint was written with a different configuration")
        if not meta.get("resume"):
            raise ConfigError("--resume checkpoint is already complete")
        resume, init_id = meta["resume"], meta.get("init")
        vocab = Vocabulary.from_dict(meta["vocab"])
    elif args.init:
        vocab_meta = load_checkpoint(args.init)[1]["vocab"]
        vocab = Vocabulary.from_dict(vocab_meta)
        ps, _ = load_checkpoint(args.init, spec_dict(cfg.encoder_spec, cfg.decoder_spec(vocab.size)))
        init_id = checkpoint_id(args.init)
    else:
        train_caps = [c for i in aset.image_ids("train") for c in aset.records[i].captions]
        if not train_caps:
            raise SoliError("the train split is empty")
        vocab = build_vocabulary(train_caps, cfg.min_frequency)
        ps = new_model(cfg, vocab)

    data = data_for(cfg, aset, vocab)
    out_ps, tlog = train(cfg, data, ps, resume=resume, stop_after_epochs=args.stop_after_epochs)
    meta = checkpoint_meta(cfg, vocab, tlog, init=init_id)
    ckpt = Path(args.checkpoint_out)
    save_checkpoint(out_ps, meta, ckpt)
    prefix = Path(args.log_prefix) if args.log_prefix else ckpt.with_suffix("")
    jl, cs = write_log(tlog, prefix, _header(cfg.seed, cfg.config_hash(), mode=cfg.mode), append=bool(resume))
    log.info("%s: %d steps in %.1fs -> %s", cfg.mode, len(tlog.records), tlog.wall_clock_s, ckpt)
    if tlog.resume:
        log.info("stopped early; continue with --resume %s", ckpt)
    return {"seed": cfg.seed, "config_hash": cfg.config_hash(), "mode": cfg.mode, "checkpoint": str(ckpt),
            "log": str(jl), "summary": str(cs), "steps": len(tlog.records), "complete": tlog.resume is None,
            "final": {k: tlog.last(k) for k in ("cross_entropy", "contrastive", "combined")}}


def cmd_eval(args) -> dict:
    aset = _load_set(args.manifest, args.variants)
    profiles = _profiles(args.profiles) if args.profiles else list(aset.profiles)
    res = evaluate_checkpoint(args.checkpoint, aset, profiles, args.split)
    meta = load_checkpoint(args.checkpoint)[1]
    seed, chash = meta.get("seed"), meta.get("config_hash")
    header = _header(seed, chash, checkpoint=res.checkpoint_id, split=args.split)
    if args.out:
        Path(args.out).write_text(res.to_csv(header))
    if args.json_out:
        Path(args.json_out).write_text(res.to_json({"seed": seed, "config_hash": chash}))
    for r in res.rows:
        log.info("%-14s B1 %.4f  B4 %.4f  M %.4f", r["profile"], r["B1"], r["B4"], r["M"])
    for m in res.missing:
        log.error("missing %s %s: %s", m["image_id"], m["profile"], m["error"])
    return {"seed": seed, "config_hash": chash, "ok": res.ok, **res.to_dict()}


def cmd_analyze(args) -> dict:
    aset = _load_set(args.manifest, args.variants)
    ps, meta = load_checkpoint(args.checkpoint)
    report = embedding_distance_report(ps, aset, meta["config"]["side"], args.n_probes, args.seed, args.split)
    chash = stable_hash({"checkpoint": checkpoint_id(args.checkpoint), "n_probes": args.n_probes,
                         "split": args.split, "profiles": list(aset.profiles)})
    prefix = Path(args.out_prefix)
    header = _header(args.seed, chash)
    paths = [emit_report(report, prefix.with_suffix(".csv"), "csv", header),
             emit_report(report, prefix.with_suffix(".json"), "json",
                         extra={"config_hash": chash, "checkpoint": checkpoint_id(args.checkpoint)}),
             emit_report(report, prefix.with_suffix(".svg"), "svg", header)]
    log.info("cross-profile mean %.4f, control mean %.4f", report.cross_profile_mean, report.control_mean)
    return {"seed": args.seed, "config_hash": chash, "outputs": [str(p) for p in paths],
            "cross_profile_mean": report.cross_profile_mean, "control_mean": report.control_mean}


# -- parser -------------------------------------------------------------------------

def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soli", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--json", action="store_true", help="print a JSON summary to stdout")
    p.add_argument("--threads", type=int, default=1, help="worker threads for image processing")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic captioned corpus")
    s.add_argument("--count", type=int, default=64)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=_nonneg_int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("augment", help="apply degradation profiles to every image")
    s.add_argument("--manifest", required=True)
    s.add_argument("--profiles", help="comma-separated; default: the ten benchmark profiles")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("stats", help="image dimension statistics")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train", help="train or fine-tune a captioning model")
    s.add_argument("--mode", choices=["baseline", "soli-half", "soli-par", "soli-con"])
    s.add_argument("--config", help="key=value file; flags override it")
    s.add_argument("--manifest", required=True)
    s.add_argument("--variants", help="variants.jsonl from augment (default: originals only)")
    s.add_argument("--checkpoint-out", required=True)
    s.add_argument("--init", help="warm-start checkpoint")
    s.add_argument("--resume", help="continue an interrupted run from its checkpoint")
    s.add_argument("--stop-after-epochs", type=_nonneg_int, help="stop early after this many epochs")
    s.add_argument("--log-prefix", help="where to write <prefix>.jsonl and <prefix>.csv")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="any config key")
    for f in fields(TrainConfig):
        if f.name == "mode":
            continue
        flag = "--lambda" if f.name == "lam" else "--" + f.name.replace("_", "-")
        s.add_argument(flag, dest=f.name, metavar=f.name.upper().replace("LAM", "LAMBDA"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="caption every profile and score against the references")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--variants")
    s.add_argument("--profiles", help="comma-separated; default: every profile in the variants set")
    s.add_argument("--split", default="test", choices=["train", "val", "test"])
    s.add_argument("--out", help="CSV path")
    s.add_argument("--json-out", help="JSON path")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("analyze", help="embedding distances between profiles for probe images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--variants", required=True)
    s.add_argument("--n-probes", type=int, default=5)
    s.add_argument("--seed", type=_nonneg_int, default=0)
    s.add_argument("--split", choices=["train", "val", "test"])
    s.add_argument("--out-prefix", required=True, help="writes <prefix>.csv, .json and .svg")
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.handlers[:] = [handler]
    log.setLevel(logging.WARNING if args.quiet else logging.INFO)
    log.propagate = False
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        # one BLAS thread keeps every floating-point reduction in a fixed order
        with threadpool_limits(limits=1):
            summary = args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"soli {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (SoliError, OSError, KeyError) as exc:
        log.error("%s", exc)
        if args.json:
            print(json.dumps({"command": args.command, "ok": False, "error": str(exc)}, sort_keys=True))
        return 1
    ok = summary.pop("ok", True)
    if args.json:
        print(json.dumps({"command": args.command, "ok": ok, **summary}, sort_keys=True, default=str))
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
