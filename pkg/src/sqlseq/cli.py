"""Command-line entry point wiring the pipeline end to end.

Subcommands: synth, preprocess, train, probe, evaluate, predict, gradcheck.
Configuration is a flat key=value file plus flag overrides; precedence is
flags > config file > defaults, and the effective configuration is echoed
into every output directory so runs are diffable.

Exit codes: 0 success, 1 usage/configuration, 2 data/path problems,
3 numeric abort. SQLSEQ_THREADS caps worker parallelism (evaluation fans
out per example; everything else is single-threaded for reproducibility).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import datagen, gradcheck, metrics as M, probe as pb, text as tx
from .checkpoint import CheckpointError, load_model, save_model, write_checkpoint
from .models import ConfigError, ModelConfig, ModelDataError, build_model
from .tensor import NumericError, Rng
from .text import DataError, TruncationError, UnpointableTokenError, Vocabulary
from .training import NumericAbort, TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# Shared option space; config files and flag overrides draw from one key set.
CONFIG_SPEC = {
    "variant": str,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "hidden": int,
    "embed": int,
    "cell_size": int,
    "seed": int,
    "max_decode_len": int,
    "eval_every": int,
    "min_count": int,
    "augment_style": str,
    "project_keys": bool,
    "pointer_eos_slot": bool,
    "mlp_hidden": int,
    "use_embedding": bool,
    "wall_clock": bool,
    "worst_k": int,
}

DEFAULTS = {
    "variant": "vanilla",
    "epochs": 300,
    "batch_size": 128,
    "lr": None,                 # resolved per variant: 0.01, pointer 0.001
    "hidden": 200,
    "embed": 300,
    "cell_size": None,
    "seed": 2,
    "max_decode_len": 32,
    "eval_every": 10,
    "min_count": 1,
    "augment_style": "keywords_first",
    "project_keys": True,
    "pointer_eos_slot": True,
    "mlp_hidden": 100,
    "use_embedding": True,
    "wall_clock": False,
    "worst_k": 10,
}


def _coerce(key: str, raw: str):
    kind = CONFIG_SPEC[key]
    if kind is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"config key {key}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from exc


def parse_config_file(path) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in CONFIG_SPEC:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            out[key] = _coerce(key, value.strip())
    return out


def merge_config(args, flag_keys) -> dict:
    merged = dict(DEFAULTS)
    if getattr(args, "config", None):
        merged.update(parse_config_file(args.config))
    for key in flag_keys:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    if merged["lr"] is None:
        merged["lr"] = 0.001 if merged["variant"] == "pointer" else 0.01
    return merged


def write_effective_config(out_dir, merged: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "effective.conf"), "w", encoding="utf-8") as fh:
        for key in sorted(merged):
            value = merged[key]
            if value is None:
                continue
            if isinstance(value, bool):
                value = "true" if value else "false"
            fh.write(f"{key}={value}\n")


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("SQLSEQ_THREADS", "1")))
    except ValueError:
        return 1


def _say(*parts):
    print(*parts)
    sys.stdout.flush()


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    rng = Rng(args.seed if args.seed is not None else 2)
    os.makedirs(args.out_dir, exist_ok=True)
    sizes = {"train": args.n_train, "dev": args.n_dev, "test": args.n_test}
    for split, n in sizes.items():
        if args.separable:
            examples = datagen.generate_separable_examples(n, rng)
        else:
            examples = datagen.generate_examples(n, rng, balanced_agg=args.balanced)
        path = os.path.join(args.out_dir, f"{split}.jsonl")
        tx.save_examples(examples, path)
        _say(f"wrote {n} examples to {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------


def cmd_preprocess(args) -> int:
    merged = merge_config(args, ["seed", "min_count", "augment_style", "cell_size",
                                 "pointer_eos_slot"])
    raw = {}
    for split in ("train", "dev", "test"):
        path = os.path.join(args.data_dir, f"{split}.jsonl")
        if split == "train" and not os.path.exists(path):
            raise FileNotFoundError(f"missing training file: {path}")
        if os.path.exists(path):
            raw[split] = tx.load_examples(path)
            if not raw[split] and split != "train":
                _say(f"warning: {path} is empty")
        else:
            raw[split] = []
    if not raw["train"]:
        raise DataError("training split is empty; cannot build vocabularies")

    style = merged["augment_style"]
    input_vocab, target_vocab = tx.build_vocabularies(raw["train"], merged["min_count"],
                                                      style)
    os.makedirs(args.out_dir, exist_ok=True)
    input_vocab.save(os.path.join(args.out_dir, "input.vocab"))
    target_vocab.save(os.path.join(args.out_dir, "target.vocab"))

    stats = tx.PreprocessStats(input_vocab_size=len(input_vocab),
                               target_vocab_size=len(target_vocab))
    for split, examples in raw.items():
        pairs = tx.encode_examples(examples, input_vocab, target_vocab, style)
        tx.save_pairs(pairs, os.path.join(args.out_dir, f"{split}.pairs.jsonl"))
        stats.n_examples[split] = len(pairs)
        stats.input_length_histogram[split] = tx.length_histogram(
            len(p.input_ids) for p in pairs)
        stats.target_length_histogram[split] = tx.length_histogram(
            len(p.target_ids) for p in pairs)
        if merged["cell_size"] is not None:
            ptr_pairs, dropped, too_long = tx.encode_pointer_examples(
                examples, input_vocab, target_vocab, merged["cell_size"],
                eos_slot=merged["pointer_eos_slot"], style=style)
            tx.save_pairs(ptr_pairs, os.path.join(args.out_dir, f"{split}.pointer.jsonl"))
            stats.dropped_unpointable[split] = dropped
            stats.dropped_too_long[split] = too_long
            if dropped or too_long:
                _say(f"{split}: dropped {dropped} unpointable, "
                     f"{too_long} over cell size")
    with open(os.path.join(args.out_dir, "stats.json"), "w", encoding="utf-8") as fh:
        json.dump(stats.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_effective_config(args.out_dir, merged)
    _say(f"input vocabulary {len(input_vocab)} tokens, "
         f"target vocabulary {len(target_vocab)} tokens")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_split_pairs(data_dir, split, pointer: bool):
    suffix = "pointer" if pointer else "pairs"
    path = os.path.join(data_dir, f"{split}.{suffix}.jsonl")
    if not os.path.exists(path):
        if split == "train":
            raise FileNotFoundError(f"missing preprocessed file: {path}")
        return []
    return tx.load_pairs(path)


def _load_vocabs(data_dir):
    ivp = os.path.join(data_dir, "input.vocab")
    tvp = os.path.join(data_dir, "target.vocab")
    if not (os.path.exists(ivp) and os.path.exists(tvp)):
        raise FileNotFoundError(f"vocabulary files not found under {data_dir}")
    return Vocabulary.load(ivp), Vocabulary.load(tvp)


def cmd_train(args) -> int:
    merged = merge_config(args, ["variant", "epochs", "batch_size", "lr", "hidden",
                                 "embed", "cell_size", "seed", "max_decode_len",
                                 "eval_every", "project_keys", "pointer_eos_slot",
                                 "wall_clock"])
    variant = merged["variant"]
    model_cfg = ModelConfig(
        variant=variant, hidden=merged["hidden"], embed=merged["embed"],
        cell_size=merged["cell_size"], max_decode_len=merged["max_decode_len"],
        seed=merged["seed"], project_keys=merged["project_keys"],
        pointer_eos_slot=merged["pointer_eos_slot"])
    model_cfg.validate()
    train_cfg = TrainConfig(epochs=merged["epochs"], batch_size=merged["batch_size"],
                            lr=merged["lr"], eval_every=merged["eval_every"],
                            seed=merged["seed"])
    train_cfg.validate()

    input_vocab, target_vocab = _load_vocabs(args.data_dir)
    pointer = variant == "pointer"
    train_pairs = _load_split_pairs(args.data_dir, "train", pointer)
    dev_pairs = _load_split_pairs(args.data_dir, "dev", pointer)
    if not train_pairs:
        raise DataError("no training pairs; run preprocess first"
                        + (" with cell_size for the pointer variant" if pointer else ""))

    meta = {"input_vocab_checksum": input_vocab.checksum(),
            "target_vocab_checksum": target_vocab.checksum(),
            "variant": variant}
    start_epoch = 0
    start_step = 0
    optimizer = None
    if args.checkpoint:
        model, prev_meta, optimizer = load_model(args.checkpoint)
        if model.config.variant != variant:
            raise ConfigError(f"checkpoint is a {model.config.variant} model, "
                              f"--variant says {variant}")
        start_epoch = int(prev_meta.get("epoch", 0))
        start_step = int(prev_meta.get("step", 0))
        _say(f"resuming from {args.checkpoint} at epoch {start_epoch}")
    else:
        model = build_model(model_cfg, (input_vocab, target_vocab))

    write_effective_config(args.out_dir, merged)
    clock = time.monotonic if merged["wall_clock"] else None
    train(model, train_pairs, dev_pairs, train_cfg, out_dir=args.out_dir,
          input_vocab=input_vocab, target_vocab=target_vocab,
          start_epoch=start_epoch, start_step=start_step, optimizer=optimizer,
          meta=meta, clock=clock, log=_say)
    _say(f"checkpoint written to {os.path.join(args.out_dir, 'checkpoint.ckpt')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# probe
# ---------------------------------------------------------------------------


def cmd_probe(args) -> int:
    merged = merge_config(args, ["epochs", "batch_size", "lr", "hidden", "embed",
                                 "seed", "mlp_hidden", "use_embedding", "wall_clock"])
    if merged["lr"] is None:
        merged["lr"] = 0.01
    train_path = os.path.join(args.data_dir, "train.jsonl")
    if not os.path.exists(train_path):
        raise FileNotFoundError(f"missing training file: {train_path}")
    train_exs = tx.load_examples(train_path)
    dev_path = os.path.join(args.data_dir, "dev.jsonl")
    dev_exs = tx.load_examples(dev_path) if os.path.exists(dev_path) else []
    if not train_exs:
        raise DataError("probe training split is empty")

    vocab = pb.probe_vocabulary(train_exs, merged["min_count"])
    train_set = pb.build_probe_dataset(train_exs, vocab)
    dev_set = pb.build_probe_dataset(dev_exs, vocab) if dev_exs else None
    if args.shuffle_labels:
        train_set = pb.shuffle_labels(train_set, Rng(merged["seed"], stream=7919))
        _say("control run: training labels shuffled")

    cfg = pb.ProbeConfig(hidden=merged["hidden"], embed=merged["embed"],
                         mlp_hidden=(merged["mlp_hidden"],),
                         use_embedding=merged["use_embedding"],
                         epochs=merged["epochs"], batch_size=merged["batch_size"],
                         lr=merged["lr"], seed=merged["seed"])
    write_effective_config(args.out_dir, merged)
    clock = time.monotonic if merged["wall_clock"] else None
    curve, model = pb.train_probe(train_set, dev_set, cfg, len(vocab),
                                  out_dir=args.out_dir, clock=clock, log=_say)
    vocab.save(os.path.join(args.out_dir, "probe.vocab"))
    tensors = {name: p.values for name, p in model.params.items()}
    write_checkpoint(os.path.join(args.out_dir, "probe.ckpt"), tensors, {
        "kind": "probe",
        "config": {"hidden": cfg.hidden, "embed": cfg.embed,
                   "mlp_hidden": list(cfg.mlp_hidden),
                   "use_embedding": cfg.use_embedding, "layers": cfg.layers,
                   "seed": cfg.seed},
        "vocab_size": len(vocab),
        "majority_baseline": pb.majority_class_rate(train_set),
    })
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate / predict
# ---------------------------------------------------------------------------


def _check_vocab_compat(meta, input_vocab, target_vocab):
    stored = (meta.get("input_vocab_checksum"), meta.get("target_vocab_checksum"))
    if stored[0] is None:
        return
    if stored != (input_vocab.checksum(), target_vocab.checksum()):
        raise CheckpointError(
            "checkpoint was trained with different vocabularies than the ones "
            "under --data-dir; re-run preprocess or point at the right data")


def cmd_evaluate(args) -> int:
    merged = merge_config(args, ["worst_k"])
    model, meta, _ = load_model(args.checkpoint)
    input_vocab, target_vocab = _load_vocabs(args.data_dir)
    _check_vocab_compat(meta, input_vocab, target_vocab)
    pointer = model.config.variant == "pointer"
    pairs = _load_split_pairs(args.data_dir, args.split, pointer)
    if not pairs:
        raise DataError(f"no pairs for split {args.split!r} under {args.data_dir}")

    cell = model.config.cell_size

    def one(item):
        i, pair = item
        return M.score_example(i, model.greedy_decode(pair.input_ids), pair,
                               input_vocab, target_vocab, cell_size=cell)

    items = list(enumerate(pairs))
    threads = _threads()
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            scores = list(pool.map(one, items))
    else:
        scores = [one(item) for item in items]
    report = M.aggregate_scores(scores, worst_k=merged["worst_k"])
    os.makedirs(args.out_dir, exist_ok=True)
    M.write_report(report, args.out_dir)
    M.write_per_example_csv(scores, os.path.join(args.out_dir, "per_example.csv"))
    write_effective_config(args.out_dir, merged)
    _say(report.to_text())
    return EXIT_OK


def cmd_predict(args) -> int:
    model, meta, _ = load_model(args.checkpoint)
    input_vocab, target_vocab = _load_vocabs(args.data_dir)
    _check_vocab_compat(meta, input_vocab, target_vocab)
    header = [h.strip() for h in args.header.split(",") if h.strip()]
    if not header:
        raise DataError("--header must list at least one column name")
    types = ([t.strip() for t in args.types.split(",")] if args.types
             else ["text"] * len(header))
    example = tx.Example(question=args.question, header=header, types=types,
                         sql=tx.SqlTarget(sel=0, agg=0, conds=[]))
    example.validate()
    tokens = tx.input_tokens_for(example)
    if model.config.variant == "pointer":
        cell = model.config.cell_size
        if model.config.pointer_eos_slot:
            tokens = tx.emphasize(tokens, cell - 1) + [tx.EOS_TOKEN]
        else:
            tokens = tx.emphasize(tokens, cell)
    input_ids = input_vocab.encode(tokens)
    pred = model.greedy_decode(input_ids)
    if pred.positions is not None:
        out_tokens = input_vocab.decode(pred.token_ids)
        _say("positions:", " ".join(str(p) for p in pred.positions))
    else:
        out_tokens = target_vocab.decode(pred.token_ids)
    query = " ".join(out_tokens)
    if tx.parse_linearized(M.strip_sequence(out_tokens)) is None:
        _say(f"UNPARSEABLE: {query}")
    else:
        _say(query)
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all()
    failed = False
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        _say(f"{r.component:<28} max rel err {r.max_rel_error:.3e}  {status}")
        failed = failed or not r.passed
    if failed:
        _say("gradient check FAILED")
        return EXIT_NUMERIC
    _say(f"all {len(results)} components pass (< {gradcheck.TOLERANCE})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------


def _add_common(sub, *names):
    flags = {
        "config": lambda: sub.add_argument("--config", help="flat key=value config file"),
        "variant": lambda: sub.add_argument("--variant", choices=list(
            ("vanilla", "reversed", "bidirectional", "attention", "pointer"))),
        "epochs": lambda: sub.add_argument("--epochs", type=int),
        "batch_size": lambda: sub.add_argument("--batch-size", dest="batch_size", type=int),
        "lr": lambda: sub.add_argument("--lr", type=float),
        "hidden": lambda: sub.add_argument("--hidden", type=int),
        "embed": lambda: sub.add_argument("--embed", type=int),
        "cell_size": lambda: sub.add_argument("--cell-size", dest="cell_size", type=int),
        "seed": lambda: sub.add_argument("--seed", type=int),
        "max_decode_len": lambda: sub.add_argument("--max-decode-len",
                                                   dest="max_decode_len", type=int),
        "eval_every": lambda: sub.add_argument("--eval-every", dest="eval_every", type=int),
        "min_count": lambda: sub.add_argument("--min-count", dest="min_count", type=int),
        "data_dir": lambda: sub.add_argument("--data-dir", dest="data_dir", required=True),
        "out_dir": lambda: sub.add_argument("--out-dir", dest="out_dir", required=True),
        "checkpoint": lambda: sub.add_argument("--checkpoint"),
        "wall_clock": lambda: sub.add_argument("--wall-clock", dest="wall_clock",
                                               action="store_const", const=True),
    }
    for name in names:
        flags[name]()


def build_parser() -> Parser:
    parser = Parser(prog="sqlseq",
                    description="seq2seq semantic parsing over single tables")
    subs = parser.add_subparsers(dest="command", required=True)

    synth = subs.add_parser("synth", help="generate a synthetic dataset")
    _add_common(synth, "out_dir", "seed")
    synth.add_argument("--n-train", type=int, default=256)
    synth.add_argument("--n-dev", type=int, default=64)
    synth.add_argument("--n-test", type=int, default=64)
    synth.add_argument("--balanced", action="store_true",
                       help="cycle aggregation classes evenly")
    synth.add_argument("--separable", action="store_true",
                       help="one trigger keyword per aggregation class")
    synth.set_defaults(func=cmd_synth)

    prep = subs.add_parser("preprocess", help="tokenize, augment, build vocabularies")
    _add_common(prep, "config", "data_dir", "out_dir", "seed", "min_count", "cell_size")
    prep.add_argument("--augment-style", dest="augment_style",
                      choices=["keywords_first", "seq2sql"])
    prep.add_argument("--pointer-eos-slot", dest="pointer_eos_slot", type=_coerce_bool)
    prep.set_defaults(func=cmd_preprocess)

    trn = subs.add_parser("train", help="train one model variant")
    _add_common(trn, "config", "data_dir", "out_dir", "variant", "epochs",
                "batch_size", "lr", "hidden", "embed", "cell_size", "seed",
                "max_decode_len", "eval_every", "checkpoint", "wall_clock")
    trn.add_argument("--project-keys", dest="project_keys", type=_coerce_bool)
    trn.add_argument("--pointer-eos-slot", dest="pointer_eos_slot", type=_coerce_bool)
    trn.set_defaults(func=cmd_train)

    prb = subs.add_parser("probe", help="train the aggregation probe")
    _add_common(prb, "config", "data_dir", "out_dir", "epochs", "batch_size", "lr",
                "hidden", "embed", "seed", "min_count", "wall_clock")
    prb.add_argument("--mlp-hidden", dest="mlp_hidden", type=int)
    prb.add_argument("--use-embedding", dest="use_embedding", type=_coerce_bool)
    prb.add_argument("--shuffle-labels", dest="shuffle_labels", action="store_true",
                     help="no-leakage control: permute training labels")
    prb.set_defaults(func=cmd_probe)

    ev = subs.add_parser("evaluate", help="score a checkpoint on a split")
    _add_common(ev, "config", "data_dir", "out_dir")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--split", default="dev", choices=["train", "dev", "test"])
    ev.add_argument("--worst-k", dest="worst_k", type=int)
    ev.set_defaults(func=cmd_evaluate)

    prd = subs.add_parser("predict", help="parse one ad-hoc question")
    _add_common(prd, "data_dir")
    prd.add_argument("--checkpoint", required=True)
    prd.add_argument("--question", required=True)
    prd.add_argument("--header", required=True,
                     help="comma-separated column names")
    prd.add_argument("--types", help="comma-separated column types")
    prd.set_defaults(func=cmd_predict)

    gc = subs.add_parser("gradcheck",
                         help="finite-difference check of every layer and variant")
    gc.set_defaults(func=cmd_gradcheck)
    return parser


def _coerce_bool(raw: str) -> bool:
    if raw.lower() in ("true", "1", "yes"):
        return True
    if raw.lower() in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {raw!r}")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, DataError, CheckpointError, UnpointableTokenError,
            TruncationError, ModelDataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericAbort, NumericError) as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
