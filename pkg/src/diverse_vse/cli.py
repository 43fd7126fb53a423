"""
Command-line entry point.

    diverse-vse train --data DIR --out DIR [--config FILE] [--set key=value ...]
    diverse-vse eval-retrieval --checkpoint FILE --data DIR [--split test]
    diverse-vse eval-sts --checkpoint FILE --sts FILE
    diverse-vse gradcheck [--probes N]
    diverse-vse synth-gen --out DIR [--set key=value ...]
    diverse-vse export-embeddings --checkpoint FILE --data DIR
    diverse-vse diversity-report --checkpoint FILE --data DIR

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import RunConfig, config_from_dict, parse_assignments
from .data import SyntheticSpec, generate_synthetic, load_corpus, load_sts, save_corpus
from .errors import ContractError, NumericError, ParseError, VocabularyError
from .evaluation import (encode_split, evaluate_sts, export_embeddings, format_reports,
                         retrieval_reports, split_diversity, write_reports_csv)
from .model import encode_batch, init_params
from .objectives import total_loss
from .training import build_vocabs, load_checkpoint, sample_batch, save_checkpoint, train, write_log_csv

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("train", "eval-retrieval", "eval-sts", "gradcheck", "synth-gen",
            "export-embeddings", "diversity-report")

log = logging.getLogger("diverse_vse")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="diverse-vse",
                description="Multilingual visual-semantic embeddings with diverse multi-head attention")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--diversity-mode", choices=("literal", "intent"))
    p.add_argument("--data", help="corpus directory (features.bin, captions.<lang>.tsv, <split>.txt)")
    p.add_argument("--languages", default="en,de", help="language A,language B")
    p.add_argument("--checkpoint", help="checkpoint file")
    p.add_argument("--split", default="test")
    p.add_argument("--sts", help="STS pairs TSV")
    p.add_argument("--sts-language", choices=("a", "b"), default="a")
    p.add_argument("--probes", type=int, default=50)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(args):
    values = {}
    if args.config:
        values.update(parse_assignments(Path(args.config).read_text(encoding="utf-8").splitlines()))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    if args.seed is not None:
        values["seed"] = str(args.seed)
    if args.diversity_mode:
        values["diversity_mode"] = args.diversity_mode
    return values


def resolve_config(args, base=None):
    try:
        return config_from_dict(_overrides(args), base)
    except ContractError as exc:
        raise UsageError(str(exc)) from None


def resolve_synthetic(args):
    kinds = {f.name: f for f in dataclasses.fields(SyntheticSpec)}
    spec = SyntheticSpec()
    changes = {}
    for key, value in _overrides(args).items():
        if key not in kinds:
            raise UsageError(f"unknown config key: {key}")
        default = getattr(spec, key)
        try:
            if isinstance(default, tuple):
                changes[key] = tuple(type(default[0])(v) for v in value.split(","))
            elif default is None:
                changes[key] = int(value)
            else:
                changes[key] = type(default)(value)
        except ValueError:
            raise UsageError(f"bad value for {key}: {value!r}") from None
    return dataclasses.replace(spec, **changes)


def _need(args, *names):
    for name in names:
        if getattr(args, name) is None:
            raise UsageError(f"{args.command} requires --{name}")


def _snapshot(out, text):
    (out / "config.resolved.txt").write_text(text, encoding="utf-8")


def _corpus(args):
    return load_corpus(args.data, tuple(args.languages.split(",")))


def cmd_train(args, out):
    _need(args, "data")
    cfg = resolve_config(args)
    _snapshot(out, cfg.to_text())
    corpus = _corpus(args)
    result = train(cfg, corpus)
    save_checkpoint(out / "checkpoint.bin", result.best)
    write_log_csv(out / "train_log.csv", result.log)
    print(f"best epoch {result.best.epoch}, validation score {result.best.val_score:.2f}")
    return EXIT_OK


def _load_model(args):
    _need(args, "checkpoint")
    ckpt = load_checkpoint(args.checkpoint)
    return ckpt, ckpt.model()


def cmd_eval_retrieval(args, out):
    _need(args, "data")
    ckpt, params = _load_model(args)
    _snapshot(out, ckpt.config.to_text())
    corpus = _corpus(args)
    emb = encode_split(params, corpus, ckpt.vocabs, corpus.split(args.split), ckpt.config.max_len)
    reports = retrieval_reports(emb, threads=args.threads)
    write_reports_csv(out / "retrieval.csv", reports)
    print(format_reports(reports))
    return EXIT_OK


def cmd_eval_sts(args, out):
    _need(args, "sts")
    ckpt, params = _load_model(args)
    _snapshot(out, ckpt.config.to_text())
    pairs, gold = load_sts(args.sts, ckpt.config.max_len)
    stream = "E" if args.sts_language == "a" else "G"
    report = evaluate_sts(params, pairs, gold, ckpt.vocabs[stream], stream)
    with open(out / "sts.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["pair", "prediction", "gold"])
        for i, (p, g) in enumerate(zip(report.predictions, gold)):
            w.writerow([i, f"{p:.9g}", g])
    print(f"pearson r = {report.r:.4f} (x100 = {100 * report.r:.1f}) over {len(gold)} pairs")
    return EXIT_OK


GRADCHECK_DEFAULTS = {"k": 2, "hidden": 16, "d_w": 8, "batch": 3}


def cmd_gradcheck(args, out):
    cfg = resolve_config(args, RunConfig(**GRADCHECK_DEFAULTS))
    _snapshot(out, cfg.to_text() + f"# probes = {args.probes}\n# tolerance = {args.tolerance!r}\n")
    report = gradcheck_report(cfg, args.probes)
    lines = [f"{name}\t{idx}\t{a:.12g}\t{n:.12g}\t{e:.3g}" for name, idx, a, n, e in report.probes]
    (out / "gradcheck.tsv").write_text("param\tindex\tanalytic\tnumeric\trel_error\n"
                                       + "\n".join(lines) + "\n", encoding="utf-8")
    ok = report.passed(args.tolerance)
    print(f"max relative error {report.max_rel_error:.3g} over {report.n_probe} probes: "
          f"{'PASS' if ok else 'FAIL'} (tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


def gradcheck_report(cfg, probes):
    """Finite-difference check of the total loss on a seeded synthetic batch."""
    spec = SyntheticSpec(n_concepts=10, n_images=max(2 * cfg.batch, 8), vocab_per_language=14,
                         d_v=8, seed=cfg.seed)
    corpus = generate_synthetic(spec)
    vocabs = build_vocabs(corpus, corpus.image_ids())
    params = init_params(cfg, {s: len(vocabs[s]) for s in "EG"}, corpus.d_v)
    rng = np.random.default_rng(cfg.seed)
    batch = sample_batch(corpus, vocabs, rng, cfg.batch, corpus.image_ids(), cfg.max_len)
    return T.finite_diff_check(lambda p: total_loss(encode_batch(p, batch, cfg.max_objects), cfg).total,
                               params, probes, rng=rng)


def cmd_synth_gen(args, out):
    spec = resolve_synthetic(args)
    _snapshot(out, "".join(f"{f.name} = {getattr(spec, f.name)}\n" for f in dataclasses.fields(spec)))
    save_corpus(generate_synthetic(spec), out)
    print(f"wrote {spec.n_images} images to {out}")
    return EXIT_OK


def cmd_export_embeddings(args, out):
    _need(args, "data")
    ckpt, params = _load_model(args)
    _snapshot(out, ckpt.config.to_text())
    corpus = _corpus(args)
    n = export_embeddings(out / "embeddings.tsv", params, corpus, ckpt.vocabs,
                          corpus.split(args.split), ckpt.config.max_len)
    print(f"wrote {n} records")
    return EXIT_OK


def cmd_diversity_report(args, out):
    _need(args, "data")
    ckpt, params = _load_model(args)
    _snapshot(out, ckpt.config.to_text())
    corpus = _corpus(args)
    if params.k < 2:
        raise UsageError("diversity-report needs a model with k >= 2")
    emb = encode_split(params, corpus, ckpt.vocabs, corpus.split(args.split), ckpt.config.max_len)
    report = split_diversity(emb)
    with open(out / "diversity.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["stream", "mean_inter_head_cosine"])
        for s, v in report.items():
            w.writerow([s, f"{v:.9g}"])
    for s, v in report.items():
        print(f"{s}\t{v:.4f}")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train,
    "eval-retrieval": cmd_eval_retrieval,
    "eval-sts": cmd_eval_sts,
    "gradcheck": cmd_gradcheck,
    "synth-gen": cmd_synth_gen,
    "export-embeddings": cmd_export_embeddings,
    "diversity-report": cmd_diversity_report,
}


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        return HANDLERS[args.command](args, out)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParseError, ContractError, VocabularyError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
