"""Command-line front door: ``etusb <subcommand> [flags]``.

Every subcommand reads explicit input paths and writes into ``--out-dir``
together with ``effective_config.json``, the merged configuration after
applying defaults, the ``--config`` file and command-line flags (in
increasing precedence).

Exit codes: 0 success, 2 usage or configuration problems (bad flags,
missing files, shape mismatches), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import os
import sys
from typing import Mapping, Sequence

import numpy as np

from . import journey as J
from . import pipeline, synth
from .encoder import (
    POSITION_INITS,
    ModelConfig,
    export_attention,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
)
from .training import TrainConfig, format_history, metrics_report, rank_classes, train, write_history

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3

# sections of the config file and the dataclass (or defaults) behind each
PREPARE_DEFAULTS = {
    "fields": list(pipeline.DEFAULT_RULE_FIELDS),
    "threshold": pipeline.DEFAULT_THRESHOLD,
    "l_max": pipeline.DEFAULT_L_MAX,
    "min_count": 1,
    "reference_time": None,
}
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"vocab_size", "n_features", "l_max"}
SECTIONS = {
    "synth": {f.name for f in dataclasses.fields(synth.SynthConfig)} - {"rules", "class_priors"},
    "prepare": set(PREPARE_DEFAULTS),
    "model": MODEL_KEYS,
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
}


class UsageError(Exception):
    """Bad flags, config or inputs; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# configuration


def load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.isfile(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    for key, section in cfg.items():
        if key == "seed":
            continue
        if key not in SECTIONS:
            raise UsageError(f"unknown config section {key!r}")
        unknown = set(section) - SECTIONS[key]
        if unknown:
            raise UsageError(f"unknown keys in config section {key!r}: {sorted(unknown)}")
    return cfg


def effective_config(args: argparse.Namespace) -> dict:
    """Defaults < config file < flags.  ``--seed`` feeds both synth and train."""
    file_cfg = load_config_file(args.config)
    merged: dict[str, dict] = {k: dict(file_cfg.get(k, {})) for k in SECTIONS}
    seed = file_cfg.get("seed")
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    if seed is not None:
        merged["synth"].setdefault("seed", seed)
        merged["train"].setdefault("seed", seed)
        if getattr(args, "seed", None) is not None:
            merged["synth"]["seed"] = seed
            merged["train"]["seed"] = seed
    for dest, value in vars(args).items():
        if "." in dest and value is not None:
            section, key = dest.split(".", 1)
            merged[section][key] = value
    if isinstance(merged["prepare"].get("fields"), str):
        merged["prepare"]["fields"] = [f for f in merged["prepare"]["fields"].split(",") if f]
    return merged


def _synth_config(cfg: Mapping) -> synth.SynthConfig:
    kw = dict(cfg["synth"])
    if "quiet_boundaries_days" in kw:
        kw["quiet_boundaries_days"] = tuple(kw["quiet_boundaries_days"])
    return synth.SynthConfig(**kw)


def _train_config(cfg: Mapping) -> TrainConfig:
    return TrainConfig(**cfg["train"])


def _prepare_options(cfg: dict) -> dict:
    """Prepare-section defaults filled in; the result is stored back for the echo."""
    opts = dict(PREPARE_DEFAULTS)
    opts.update(cfg["prepare"])
    cfg["prepare"] = opts
    return opts


def _echo_config(out_dir: str, command: str, cfg: Mapping, used: Sequence[str]):
    os.makedirs(out_dir, exist_ok=True)
    body = {"command": command}
    body.update({k: cfg[k] for k in used})
    J.save_json(body, os.path.join(out_dir, "effective_config.json"))


def _require_file(path: str | None, what: str) -> str:
    if not path:
        raise UsageError(f"missing required input: {what}")
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _out(args, name: str) -> str:
    return os.path.join(args.out_dir, name)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args, cfg) -> int:
    scfg = _synth_config(cfg)
    data = synth.generate(scfg)
    cfg["synth"] = {k: v for k, v in dataclasses.asdict(scfg).items() if k in SECTIONS["synth"]}
    _echo_config(args.out_dir, "synth", cfg, ["synth"])
    synth.write_synth(data, args.out_dir)
    print(synth.describe(data.manifest))
    return EXIT_OK


def _read_counts(path: str) -> dict[str, dict[str, int]]:
    """``field,value,count`` rows (header required) into nested counts."""
    counts: dict[str, dict[str, int]] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"field", "value", "count"} <= set(reader.fieldnames):
            raise UsageError("counts file needs a header with field,value,count")
        for row in reader:
            try:
                n = int(row["count"])
            except ValueError:
                raise UsageError(f"bad count {row['count']!r} for {row['field']}={row['value']}") from None
            if n < 0:
                raise UsageError("counts must be nonnegative")
            per = counts.setdefault(row["field"], {})
            per[row["value"]] = per.get(row["value"], 0) + n
    return counts


def cmd_fit_granularity(args, cfg) -> int:
    opts = _prepare_options(cfg)
    fields = opts["fields"]
    if bool(args.events) == bool(args.counts):
        raise UsageError("give exactly one of --events or --counts")
    if args.events:
        events = J.read_events(_require_file(args.events, "events file"))
        if not events:
            raise UsageError("events file holds no events")
        rules, coverage = J.fit_rules(events, fields, opts["threshold"])
    else:
        counts = _read_counts(_require_file(args.counts, "counts file"))
        if not counts:
            raise UsageError("counts file holds no rows")
        fields = [f for f in fields if f in counts] or sorted(counts)
        opts["fields"] = fields
        retained, coverage = {}, {}
        for f in fields:
            retained[f], coverage[f] = J.fit_granularity(counts[f], opts["threshold"])
        rules = J.GranularityRuleSet(tuple(fields), retained, {f: opts["threshold"] for f in fields})
    if all(not rows for rows in coverage.values()):
        raise UsageError("no values observed for the configured fields")
    _echo_config(args.out_dir, "fit-granularity", cfg, ["prepare"])
    J.save_json(rules.to_dict(), _out(args, "rules.json"))
    report = J.format_coverage(coverage)
    with open(_out(args, "coverage.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report + "\n")
    print(report)
    return EXIT_OK


def cmd_prepare(args, cfg) -> int:
    opts = _prepare_options(cfg)
    events = J.read_events(_require_file(args.events, "events file"))
    rules = J.GranularityRuleSet.from_dict(J.load_json(_require_file(args.rules, "rules file")))
    labels = synth.read_labels(_require_file(args.labels, "labels file")) if args.labels else None
    l_max = int(opts["l_max"])
    journeys = J.build_journeys(events, l_max, reference_time=opts["reference_time"])
    if args.vocab:
        vocab = J.Vocabulary.from_dict(J.load_json(_require_file(args.vocab, "vocabulary file")))
    else:
        vocab = J.build_vocabulary(
            (J.apply_granularity(e, rules) for j in journeys for e in j.events), int(opts["min_count"])
        )
    if args.schema:
        schema = J.FeatureSchema.from_dict(J.load_json(_require_file(args.schema, "schema file")))
    else:
        schema = J.default_feature_schema(journeys, rules)
    data = J.prepare_dataset(journeys, rules, vocab, schema, l_max, labels)
    n_tok = int(data.mask.sum())
    n_oov = int(((data.token_ids == J.OOV_ID) & data.mask).sum())
    _echo_config(args.out_dir, "prepare", cfg, ["prepare"])
    data.save(_out(args, "samples.jsonl"))
    J.save_json(vocab.to_dict(), _out(args, "vocab.json"))
    J.save_json(schema.to_dict(), _out(args, "schema.json"))
    print(f"customers: {len(journeys)}   samples: {len(data)}   tokens: {n_tok}   "
          f"oov rate: {n_oov / max(n_tok, 1):.6f}")
    print(f"vocabulary: {len(vocab)}   features: {len(schema)}   schema hash: {schema.hash()}")
    return EXIT_OK


def _load_samples(path: str) -> J.Dataset:
    return J.Dataset.load(_require_file(path, "samples file"))


def _check_compatible(data: J.Dataset, config: ModelConfig):
    if data.vocab_size != config.vocab_size or data.nonseq.shape[1] != config.n_features:
        raise UsageError(
            f"samples (vocab {data.vocab_size}, features {data.nonseq.shape[1]}) do not match "
            f"the model (vocab {config.vocab_size}, features {config.n_features})"
        )
    if data.l_max > config.l_max:
        raise UsageError(f"samples are longer ({data.l_max}) than the model allows ({config.l_max})")


def cmd_train(args, cfg) -> int:
    data = _load_samples(args.samples)
    if (data.labels < 0).any():
        raise UsageError("training samples must all carry labels")
    model_kw = dict(cfg["model"])
    if "tower_dims" in model_kw:
        model_kw["tower_dims"] = tuple(model_kw["tower_dims"])
    mcfg = ModelConfig(vocab_size=data.vocab_size, n_features=int(data.nonseq.shape[1]),
                       l_max=data.l_max, **model_kw)
    tcfg = _train_config(cfg)
    cfg["model"] = mcfg.to_dict()
    cfg["train"] = dataclasses.asdict(tcfg)
    _echo_config(args.out_dir, "train", cfg, ["model", "train"])
    result = train(data, mcfg, tcfg)
    save_checkpoint(_out(args, "model.ckpt"), result.params, mcfg,
                    {"schema_hash": data.schema_hash, "best_epoch": result.best_epoch})
    write_history(result.history, _out(args, "history.jsonl"))
    if result.val_report is not None:
        J.save_json(result.val_report.to_dict(), _out(args, "val_metrics.json"))
    print(format_history(result.history))
    print(f"best epoch: {result.best_epoch}")
    return EXIT_OK


def _load_model(path: str):
    try:
        return load_checkpoint(_require_file(path, "checkpoint"))
    except (KeyError, OSError, ValueError) as e:
        if isinstance(e, UsageError):
            raise
        raise UsageError(f"cannot read checkpoint {path}: {e}") from None


def cmd_evaluate(args, cfg) -> int:
    params, mcfg, extra = _load_model(args.checkpoint)
    data = _load_samples(args.samples)
    _check_compatible(data, mcfg)
    if (data.labels < 0).any():
        raise UsageError("evaluation samples must all carry labels")
    if extra.get("schema_hash") not in (None, data.schema_hash):
        raise UsageError("samples were built with a different feature schema than the checkpoint")
    probs = predict_proba(data, params, mcfg)
    report = metrics_report(probs, data.labels)
    _echo_config(args.out_dir, "evaluate", cfg, [])
    J.save_json(report.to_dict(), _out(args, "metrics.json"))
    print(f"samples: {report.n}   map@3: {report.map_at_3:.4f}   accuracy: {report.accuracy:.4f}   "
          f"loss: {report.loss:.4f}")
    return EXIT_OK


def cmd_predict(args, cfg) -> int:
    params, mcfg, _ = _load_model(args.checkpoint)
    data = _load_samples(args.samples)
    _check_compatible(data, mcfg)
    probs = predict_proba(data, params, mcfg)
    top = rank_classes(probs, 3)
    _echo_config(args.out_dir, "predict", cfg, [])
    path = _out(args, "predictions.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["customer_id", "class_1", "prob_1", "class_2", "prob_2", "class_3", "prob_3"])
        for i, cid in enumerate(data.customer_ids):
            row = [cid]
            for c in top[i]:
                row += [int(c), repr(float(probs[i, c]))]
            w.writerow(row)
    print(f"wrote {len(data)} predictions to {path}")
    return EXIT_OK


def write_pgm(path: str, panels: Sequence[np.ndarray], cell: int = 12, gap: int = 4, columns: int = 4):
    """Binary grayscale grid, one panel per matrix; darker means more attention."""
    n = max(p.shape[0] for p in panels)
    cols = min(columns, len(panels))
    rows = math.ceil(len(panels) / cols)
    side = n * cell
    width = cols * side + (cols + 1) * gap
    height = rows * side + (rows + 1) * gap
    img = np.full((height, width), 255, dtype=np.uint8)
    for k, m in enumerate(panels):
        r, c = divmod(k, cols)
        y0 = gap + r * (side + gap)
        x0 = gap + c * (side + gap)
        shade = np.round(255.0 * (1.0 - np.clip(m, 0.0, 1.0))).astype(np.uint8)
        block = np.kron(shade, np.ones((cell, cell), dtype=np.uint8))
        img[y0:y0 + block.shape[0], x0:x0 + block.shape[1]] = block
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def write_matrix_tsv(path: str, matrix: np.ndarray, labels: Sequence[str]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(["", *labels]) + "\n")
        for label, row in zip(labels, matrix):
            fh.write("\t".join([label, *(repr(float(x)) for x in row)]) + "\n")


def cmd_attention_heatmap(args, cfg) -> int:
    params, mcfg, _ = _load_model(args.checkpoint)
    if not mcfg.use_sequence:
        raise UsageError("checkpoint has no sequence branch")
    events = J.read_events(_require_file(args.events, "events file"))
    rules = J.GranularityRuleSet.from_dict(J.load_json(_require_file(args.rules, "rules file")))
    vocab = J.Vocabulary.from_dict(J.load_json(_require_file(args.vocab, "vocabulary file")))
    schema = J.FeatureSchema.from_dict(J.load_json(_require_file(args.schema, "schema file")))
    mine = [e for e in events if e.customer_id == args.customer]
    if not mine:
        raise UsageError(f"unknown customer {args.customer!r}")
    opts = _prepare_options(cfg)
    # same default as prepare: the latest event in the whole file, not this customer's
    ref = opts["reference_time"]
    if ref is None:
        ref = opts["reference_time"] = max(e.action_time for e in events)
    journey = J.build_journeys(mine, mcfg.l_max, reference_time=ref)[0]
    sample = J.assemble_sample(journey, rules, vocab, schema, mcfg.l_max)
    if len(vocab) != mcfg.vocab_size or len(schema) != mcfg.n_features:
        raise UsageError("vocabulary or schema does not match the checkpoint")
    maps = export_attention(sample, params, mcfg)
    _echo_config(args.out_dir, "attention-heatmap", cfg, ["prepare"])
    shown = journey.events[-mcfg.l_max:]
    with open(_out(args, "attention_axis.tsv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("position\taction_time\ttoken\n")
        for i, (ev, tok) in enumerate(zip(shown, sample.tokens)):
            fh.write(f"{i}\t{ev.action_time}\t{tok}\n")
    panels = []
    for amap in maps:
        for h in range(amap.heads):
            name = f"attention_block{amap.block}_head{h}.tsv"
            write_matrix_tsv(_out(args, name), amap.scores[h], amap.labels)
            panels.append(amap.scores[h])
    write_pgm(_out(args, "attention_heatmap.pgm"), panels)
    print(f"wrote {len(panels)} attention matrices ({len(sample.tokens)} x {len(sample.tokens)}) "
          f"for customer {args.customer}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # the same flags are accepted before and after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="seed for generation and training")
    p.add_argument("--config", default=d, help="JSON file with synth/prepare/model/train sections")
    p.add_argument("--out-dir", default=d if suppress else ".", help="directory for all outputs")
    p.add_argument("--verbose", "-v", action="store_true", default=d if suppress else False)
    return p


def _csv_ints(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="etusb", description=__doc__.splitlines()[0], parents=[_global_flags(False)])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")
    sub.required = True
    common = _global_flags(True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "generate a synthetic journey corpus with planted rules")
    sp.add_argument("--customers", dest="synth.n_customers", type=int)
    sp.add_argument("--classes", dest="synth.n_classes", type=int)
    sp.add_argument("--rule-mix", dest="synth.rule_mix", type=float)
    sp.add_argument("--noise", dest="synth.noise_rate", type=float)
    sp.add_argument("--min-len", dest="synth.min_len", type=int)
    sp.add_argument("--max-len", dest="synth.max_len", type=int)
    sp.add_argument("--tail-exponent", dest="synth.tail_exponent", type=float)

    sp = add("fit-granularity", cmd_fit_granularity, "fit top-N retention rules per attribute field")
    sp.add_argument("--events", help="events JSONL")
    sp.add_argument("--counts", help="CSV with field,value,count rows (alternative to --events)")
    sp.add_argument("--fields", dest="prepare.fields", help="comma-separated field names")
    sp.add_argument("--threshold", dest="prepare.threshold", type=float)

    sp = add("prepare", cmd_prepare, "turn events into model-ready samples")
    sp.add_argument("--events", required=True)
    sp.add_argument("--rules", required=True)
    sp.add_argument("--labels", help="labels CSV; omit for unlabelled samples")
    sp.add_argument("--vocab", help="reuse a fitted vocabulary instead of building one")
    sp.add_argument("--schema", help="reuse a fitted feature schema instead of building one")
    sp.add_argument("--l-max", dest="prepare.l_max", type=int)
    sp.add_argument("--min-count", dest="prepare.min_count", type=int)
    sp.add_argument("--reference-time", dest="prepare.reference_time", type=int)

    sp = add("train", cmd_train, "train the classifier and write a checkpoint")
    sp.add_argument("--samples", required=True)
    sp.add_argument("--epochs", dest="train.epochs", type=int)
    sp.add_argument("--batch-size", dest="train.batch_size", type=int)
    sp.add_argument("--lr", dest="train.learning_rate", type=float)
    sp.add_argument("--optimizer", dest="train.optimizer", choices=("adam", "sgd"))
    sp.add_argument("--validation-fraction", dest="train.validation_fraction", type=float)
    sp.add_argument("--d", dest="model.d", type=int)
    sp.add_argument("--heads", dest="model.heads", type=int)
    sp.add_argument("--blocks", dest="model.blocks", type=int)
    sp.add_argument("--d-ff", dest="model.d_ff", type=int)
    sp.add_argument("--dropout", dest="model.dropout_rate", type=float)
    sp.add_argument("--position-init", dest="model.position_init", choices=POSITION_INITS)
    sp.add_argument("--tower-dims", dest="model.tower_dims", type=_csv_ints)
    sp.add_argument("--no-sequence", dest="model.use_sequence", action="store_const", const=False,
                    help="train the nonsequential baseline")

    sp = add("evaluate", cmd_evaluate, "score a checkpoint on labelled samples")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--samples", required=True)

    sp = add("predict", cmd_predict, "write the top-3 classes per customer")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--samples", required=True)

    sp = add("attention-heatmap", cmd_attention_heatmap, "export per-head attention for one customer")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--events", required=True)
    sp.add_argument("--rules", required=True)
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--schema", required=True)
    sp.add_argument("--customer", required=True)
    sp.add_argument("--reference-time", dest="prepare.reference_time", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = effective_config(args)
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            return args.func(args, cfg)
    except UsageError as e:
        print(f"etusb: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ArithmeticError as e:
        print(f"etusb: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, TypeError, KeyError, OSError, RuntimeError) as e:
        print(f"etusb: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
