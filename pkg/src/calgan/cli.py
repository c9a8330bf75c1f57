"""Command-line entry point: ``calgan <command> [options]``.

Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 checkpoint
error, 5 numeric failure, 6 pretraining required. Failures print one JSON
error record on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import warnings

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError, restore_trainer
from .corpus import DataError, WorldConfig, file_hash, generate_world, load_dataset, save_dataset
from .metrics import (category_diversity_report, discriminator_scores, distinct_n, bleu4, encode_captions,
                      encoder_hash, diversity_sigma, random_scores, retrieval_recall, word_frequency_table,
                      write_diversity_csv, write_wordfreq_csv)
from .numeric import NonFiniteError, SeededRng
from .trainer import Trainer, TrainerConfig, TrainingDiverged, decode_test

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT, EXIT_NUMERIC, EXIT_PRETRAIN = 0, 2, 3, 4, 5, 6
OUTPUT_ROOT_ENV = "CALGAN_OUTPUT_ROOT"


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code, self.kind = code, kind


# ------------------------------------------------------------------ config


def _coerce(value: str, typ, key):
    if typ in (bool, "bool"):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise CliError(EXIT_USAGE, "bad_config", f"{key}: expected a boolean, got {value!r}")
    try:
        if typ in (int, "int"):
            return int(value)
        if typ in (float, "float"):
            return float(value)
    except ValueError:
        raise CliError(EXIT_USAGE, "bad_config", f"{key}: cannot parse {value!r}") from None
    if typ in (str, "str"):
        return value
    try:
        return json.loads(value)
    except ValueError:
        raise CliError(EXIT_USAGE, "bad_config", f"{key}: expected JSON, got {value!r}") from None


def _fields(cls):
    return {f.name: f.type for f in dataclasses.fields(cls)}


def resolve_config(overrides, config_file=None, seed=None):
    """Merge a JSON config file and ``key=value`` overrides.

    Keys are ``trainer.<field>`` or ``world.<field>``; a bare field name
    means ``trainer``. Unknown keys are rejected.
    """
    values = {"trainer": {}, "world": {}}
    if config_file:
        try:
            with open(config_file, encoding="utf-8") as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise CliError(EXIT_DATA, "missing_file", f"config file not found: {config_file}") from None
        except ValueError as exc:
            raise CliError(EXIT_USAGE, "bad_config", f"{config_file}: {exc}") from None
        if not isinstance(raw, dict):
            raise CliError(EXIT_USAGE, "bad_config", "config file must hold a JSON object")
        for section, body in raw.items():
            if section not in values or not isinstance(body, dict):
                raise CliError(EXIT_USAGE, "bad_config", f"unknown config section {section!r}")
            values[section].update(body)
    specs = {"trainer": _fields(TrainerConfig), "world": _fields(WorldConfig)}
    for item in overrides or []:
        if "=" not in item:
            raise CliError(EXIT_USAGE, "bad_config", f"override must be key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, _, name = key.rpartition(".")
        section = section or "trainer"
        if section not in specs or name not in specs[section]:
            raise CliError(EXIT_USAGE, "bad_config", f"unknown config key {key!r}")
        values[section][name] = _coerce(value, specs[section][name], key)
    for section, spec in specs.items():
        for name in values[section]:
            if name not in spec:
                raise CliError(EXIT_USAGE, "bad_config", f"unknown config key {section}.{name}")
    if seed is not None:
        values["trainer"].setdefault("seed", seed)
        values["world"].setdefault("seed", seed)
    if "split" in values["world"]:
        values["world"]["split"] = tuple(values["world"]["split"])
    try:
        trainer = TrainerConfig(**values["trainer"]).validate()
        world = WorldConfig(**values["world"])
        world.validate()
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_USAGE, "bad_config", str(exc)) from None
    return trainer, world


# ----------------------------------------------------------------- helpers


def _resolve_out(path):
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        path = os.path.join(root, path)
    return path


def _out_path(path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    return path


def _load_data(path):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise CliError(EXIT_DATA, "missing_file", f"dataset not found: {path}") from None
    except DataError as exc:
        raise CliError(EXIT_DATA, "bad_data", str(exc)) from None


def _load_ckpt(path):
    try:
        return Checkpoint.load(path)
    except FileNotFoundError:
        raise CliError(EXIT_CHECKPOINT, "missing_checkpoint", f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise CliError(EXIT_CHECKPOINT, "bad_checkpoint", str(exc)) from None


def _check_vocab(ckpt, ds, path):
    if ckpt["vocab_hash"] != ds.vocab.hash():
        raise CliError(EXIT_CHECKPOINT, "vocab_mismatch",
                       f"{path}: vocabulary hash {ckpt['vocab_hash']} does not match the dataset's {ds.vocab.hash()}")


def _restore(ckpt, ds, trainer_cfg, path):
    _check_vocab(ckpt, ds, path)
    return restore_trainer(ckpt, ds, trainer_cfg)


def _test_arrays(ds):
    return np.stack([r.features for r in ds.test]), [r.image_id for r in ds.test]


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _hash_or_none(path):
    return file_hash(path) if path and os.path.isfile(path) else None


def write_manifest(args, trainer_cfg, world_cfg, inputs, outputs):
    """Record the resolved config and input/output hashes next to the main output."""
    out = args.out
    target = os.path.join(out, "run_manifest.json") if os.path.isdir(out) else out + ".run_manifest.json"
    _write_json(target, {
        "calgan_version": __version__,
        "command": args.command,
        "argv": args.argv,
        "trainer_config": dataclasses.asdict(trainer_cfg),
        "world_config": {k: v for k, v in dataclasses.asdict(world_cfg).items()},
        "inputs": {k: {"path": v, "sha256": _hash_or_none(v)} for k, v in inputs.items() if v},
        "outputs": {k: {"path": v, "sha256": _hash_or_none(v)} for k, v in outputs.items()},
    })
    return target


# ---------------------------------------------------------------- commands


def cmd_gen_data(args, tcfg, wcfg):
    out = _out_path(args.out)
    save_dataset(generate_world(wcfg), out)
    return {}, {"dataset": out}


def cmd_pretrain(args, tcfg, wcfg):
    ds = _load_data(args.data)
    if args.init:
        tr = _restore(_load_ckpt(args.init), ds, tcfg, args.init)
    else:
        tr = Trainer(tcfg, ds)
    if args.role in ("generator", "both"):
        tr.pretrain_generator()
    if args.role in ("discriminator", "both"):
        if tr.stage not in ("g_pretrain", "d_pretrain", "adversarial"):
            raise CliError(EXIT_PRETRAIN, "pretraining_required",
                           "discriminator pretraining needs a generator-pretrained checkpoint (--init)")
        tr.pretrain_discriminator()
    out = _out_path(args.out)
    tr.checkpoint().save(out)
    return {"dataset": args.data, "init": args.init}, {"checkpoint": out}


def cmd_train(args, tcfg, wcfg):
    ds = _load_data(args.data)
    if not args.init:
        raise CliError(EXIT_PRETRAIN, "pretraining_required",
                       "adversarial training needs a pretrained checkpoint (--init); run `calgan pretrain` first")
    ckpt = _load_ckpt(args.init)
    if ckpt.stage not in ("d_pretrain", "adversarial"):
        raise CliError(EXIT_PRETRAIN, "pretraining_required",
                       f"{args.init}: checkpoint stage {ckpt.stage!r} is not pretrained; run `calgan pretrain` first")
    tr = _restore(ckpt, ds, tcfg, args.init)
    out = _out_path(args.out)
    metrics = args.metrics or out + ".metrics.csv"
    if os.path.exists(metrics):
        os.unlink(metrics)
    last = None
    for i, last in enumerate(tr.adversarial(metrics_path=metrics)):
        if args.snapshots:
            last.save(f"{out}.{i:04d}")
    (last or tr.checkpoint()).save(out)
    return {"dataset": args.data, "init": args.init}, {"checkpoint": out, "metrics": metrics}


def _captions_for(ds, ckpt_path, tcfg, seed_stream):
    ckpt = _load_ckpt(ckpt_path)
    _check_vocab(ckpt, ds, ckpt_path)
    f, _ = _test_arrays(ds)
    gen, disc = ckpt.generator(), ckpt.discriminator()
    return decode_test(f, gen, disc, tcfg, SeededRng(tcfg.seed, seed_stream)), disc


def _human_captions(ds, seed):
    from .pipeline import human_captions
    return human_captions(ds, SeededRng(seed, 600))


def cmd_eval(args, tcfg, wcfg):
    ds = _load_data(args.data)
    caps, disc = _captions_for(ds, args.ckpt, tcfg, 700)
    enc = disc
    if args.encoder:
        e = _load_ckpt(args.encoder)
        _check_vocab(e, ds, args.encoder)
        enc = e.discriminator()
    texts = [" ".join(ds.vocab.decode(c)) for c in caps]
    refs = [[ds.vocab.decode(r) for r in rec.captions] for rec in ds.test]
    report = {
        "bleu4": float(np.mean([bleu4(ds.vocab.decode(c), rs) for c, rs in zip(caps, refs)])),
        "distinct_1": distinct_n([t.split() for t in texts], 1),
        "distinct_2": distinct_n([t.split() for t in texts], 2),
        "sigma_hat": diversity_sigma(encode_captions(enc, caps)).sigma_hat,
        "encoder_hash": encoder_hash(enc),
        "decode": tcfg.decode,
        "n_captions": len(texts),
    }
    out = _out_path(args.out)
    _write_json(out, report)
    cap_path = out + ".captions.jsonl"
    with open(cap_path, "w", encoding="utf-8") as fh:
        for rec, t in zip(ds.test, texts):
            fh.write(json.dumps({"image_id": rec.image_id, "caption": t}) + "\n")
    return {"dataset": args.data, "checkpoint": args.ckpt, "encoder": args.encoder}, {"report": out, "captions": cap_path}


def cmd_retrieve(args, tcfg, wcfg):
    ds = _load_data(args.data)
    f, ids = _test_arrays(ds)
    caps, own = _captions_for(ds, args.ckpt, tcfg, 800)
    if args.random_scorer:
        scores = random_scores(len(ids), len(ids), SeededRng(tcfg.seed, 801))
    else:
        scorer = own
        if args.scorer:
            s = _load_ckpt(args.scorer)
            _check_vocab(s, ds, args.scorer)
            scorer = s.discriminator()
        scores = discriminator_scores(scorer, caps, f)
    ks = [int(k) for k in args.ks.split(",")]
    recall = retrieval_recall(ids, scores, ks)
    out = _out_path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("k,recall\n")
        for k in ks:
            fh.write(f"{k},{recall[k]!r}\n")
    return {"dataset": args.data, "checkpoint": args.ckpt, "scorer": args.scorer}, {"recall": out}


def cmd_diversity(args, tcfg, wcfg):
    ds = _load_data(args.data)
    f, _ = _test_arrays(ds)
    enc_ck = _load_ckpt(args.encoder)
    _check_vocab(enc_ck, ds, args.encoder)
    sources = {"human": _human_captions(ds, tcfg.seed)}
    inputs = {"dataset": args.data, "encoder": args.encoder}
    for i, spec in enumerate(args.model or []):
        name, _, path = spec.partition("=")
        if not path:
            raise CliError(EXIT_USAGE, "bad_usage", f"--model expects name=checkpoint, got {spec!r}")
        sources[name], _ = _captions_for(ds, path, tcfg, 900 + i)
        inputs[f"model:{name}"] = path
    rows = category_diversity_report(f, sources, enc_ck.discriminator(), args.k, seed=tcfg.seed)
    out = _out_path(args.out)
    write_diversity_csv(out, rows)
    return inputs, {"report": out}


def cmd_wordfreq(args, tcfg, wcfg):
    ds = _load_data(args.data)
    if args.ckpt:
        caps, _ = _captions_for(ds, args.ckpt, tcfg, 1000)
        corpus = [ds.vocab.decode(c, strip=False) for c in caps]
    else:
        corpus = [ds.vocab.decode(c, strip=False) for rec in ds.test for c in rec.captions]
    table = word_frequency_table(corpus, args.positions, args.threshold)
    out = _out_path(args.out)
    write_wordfreq_csv(out, table)
    return {"dataset": args.data, "checkpoint": args.ckpt}, {"table": out}


def cmd_ablate(args, tcfg, wcfg):
    from .pipeline import VARIANTS, ablation_rows, evaluate, train_variants, write_ablation_csv
    variants = tuple(v for v in args.variants.split(",") if v)
    if not {"ggan", "cal"} <= set(variants) or not set(variants) <= set(VARIANTS):
        raise CliError(EXIT_USAGE, "bad_usage", f"--variants must include ggan and cal, drawn from {', '.join(VARIANTS)}")
    ds = _load_data(args.data) if args.data else generate_world(wcfg)
    exp = train_variants(ds, tcfg, variants=variants)
    rows = ablation_rows(exp, seed=tcfg.seed, draws=args.draws)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "ablation.csv")
    write_ablation_csv(path, rows)
    outputs = {"ablation": path}
    if set(variants) == set(VARIANTS):
        report = evaluate(exp, seed=tcfg.seed, draws=args.draws)
        report["captions"] = {k: [" ".join(ds.vocab.decode(c)) for c in v] for k, v in report["captions"].items()}
        report["recall"] = {k: {str(n): r for n, r in v.items()} for k, v in report["recall"].items()}
        outputs["evaluation"] = os.path.join(args.out, "evaluation.json")
        _write_json(outputs["evaluation"], report)
    for name, tr in [("mle", exp.mle), *exp.models.items()]:
        p = os.path.join(args.out, f"{name}.ckpt.json")
        tr.checkpoint().save(p)
        outputs[f"checkpoint:{name}"] = p
    return {"dataset": args.data}, outputs


COMMANDS = {
    "gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "train": cmd_train, "eval": cmd_eval,
    "retrieve": cmd_retrieve, "diversity": cmd_diversity, "wordfreq": cmd_wordfreq, "ablate": cmd_ablate,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "bad_usage", message)


def build_parser():
    p = _Parser(prog="calgan", description="Comparative adversarial captioning on a synthetic world.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, data=True, out_help="output path"):
        if data:
            sp.add_argument("--data", required=True, help="dataset JSONL")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, e.g. trainer.k=16 or world.n_images=100")
        sp.add_argument("--config", help="JSON config file with 'trainer' and 'world' sections")
        sp.add_argument("--seed", type=int, help="seed for both world and trainer unless set explicitly")
        return sp

    common(sub.add_parser("gen-data", help="write a seeded synthetic dataset"), data=False)
    sp = common(sub.add_parser("pretrain", help="MLE generator and/or discriminator pretraining"))
    sp.add_argument("--role", choices=("generator", "discriminator", "both"), default="both")
    sp.add_argument("--init", help="checkpoint to continue from")
    sp = common(sub.add_parser("train", help="adversarial training from a pretrained checkpoint"))
    sp.add_argument("--init", help="pretrained checkpoint")
    sp.add_argument("--metrics", help="metrics CSV (default: <out>.metrics.csv)")
    sp.add_argument("--snapshots", action="store_true", help="also save every emitted checkpoint")
    sp = common(sub.add_parser("eval", help="decode the test split; BLEU-4, distinct-n, diversity"))
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--encoder", help="checkpoint whose text encoder embeds captions (default: --ckpt)")
    sp = common(sub.add_parser("retrieve", help="caption-to-image recall@k on the test split"))
    sp.add_argument("--ckpt", required=True, help="caption source")
    sp.add_argument("--scorer", help="discriminator checkpoint used for ranking (default: --ckpt)")
    sp.add_argument("--random-scorer", action="store_true", help="rank with uniform random scores (control)")
    sp.add_argument("--ks", default="1,5,10")
    sp = common(sub.add_parser("diversity", help="per-cluster diversity report under one encoder"))
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--model", action="append", metavar="NAME=CKPT")
    sp.add_argument("--k", type=int, default=4, help="number of image clusters")
    sp = common(sub.add_parser("wordfreq", help="positional word-frequency table"))
    sp.add_argument("--ckpt", help="decode captions from this checkpoint (default: human references)")
    sp.add_argument("--positions", type=int, default=None)
    sp.add_argument("--threshold", type=float, default=0.005)
    sp = common(sub.add_parser("ablate", help="diversity of the four decoding/discriminator arms"), data=False,
                out_help="output directory")
    sp.add_argument("--data", help="dataset JSONL (default: generate from the world config)")
    sp.add_argument("--draws", type=int, default=5, help="decodes averaged per sampled arm")
    sp.add_argument("--variants", default="ggan,cal",
                    help="adversarial variants to train; with all three, also write evaluation.json")
    return p


def run(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise CliError(EXIT_USAGE, "bad_usage", "a command is required: " + ", ".join(COMMANDS))
        args.argv = argv
        args.out = _resolve_out(args.out)
        tcfg, wcfg = resolve_config(args.overrides, args.config, args.seed)
        inputs, outputs = COMMANDS[args.command](args, tcfg, wcfg)
        write_manifest(args, tcfg, wcfg, inputs, outputs)
        return EXIT_OK
    except CliError as exc:
        return _fail(exc.code, exc.kind, str(exc))
    except (TrainingDiverged, NonFiniteError) as exc:
        return _fail(EXIT_NUMERIC, "numeric_failure", str(exc))
    except DataError as exc:
        return _fail(EXIT_DATA, "bad_data", str(exc))
    except CheckpointError as exc:
        return _fail(EXIT_CHECKPOINT, "bad_checkpoint", str(exc))


def _fail(code, kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main():
    with warnings.catch_warnings():
        warnings.simplefilter("default")
        sys.exit(run())


if __name__ == "__main__":
    main()
