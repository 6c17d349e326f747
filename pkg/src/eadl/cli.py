"""Single entry point wiring the pipeline stages together.

Stages communicate only through files: JSONL corpora, CoNLL tag files,
binary checkpoints, and CSV reports. The first stdout line of every run
is the fully-resolved configuration in canonical key order. Exit codes:
0 success, 1 usage error, 2 data/format error, 3 contract violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from . import attention as att
from . import benchkit, convert, corpus, distill, evalkit
from . import encoder as enc
from .errors import (
    ContractError,
    EadlError,
    FormatError,
    InputError,
    LengthError,
    NumericGuardError,
    ParameterError,
    ProtocolError,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# pattern mini-grammar: full | window:w=8,d=1,g=0 | bigbird:b=4,r=2,g=1,seed=7
#                       | nystrom:m=8,it=6 | lsg:w=4,s=4,g=1


def parse_pattern(text: str) -> att.AttentionSpec:
    name, _, rest = text.partition(":")
    kv = {}
    if rest:
        for part in rest.split(","):
            key, eq, value = part.partition("=")
            if not eq:
                raise UsageError(f"bad pattern parameter {part!r} in {text!r}")
            try:
                kv[key] = int(value)
            except ValueError:
                raise UsageError(f"pattern parameter {part!r} is not an integer") from None

    def take(allowed: dict) -> dict:
        unknown = set(kv) - set(allowed)
        if unknown:
            raise UsageError(f"unknown pattern keys {sorted(unknown)} for {name!r}")
        merged = dict(allowed)
        merged.update(kv)
        return merged

    if name == "full":
        if kv:
            raise UsageError("pattern 'full' takes no parameters")
        return att.Full()
    if name == "window":
        p = take({"w": 8, "d": 1, "g": 0})
        return att.SlidingWindow(window=p["w"], dilation=p["d"], global_tokens=tuple(range(p["g"])))
    if name == "bigbird":
        p = take({"b": 4, "r": 2, "g": 1, "seed": 0})
        return att.BlockSparse(block=p["b"], random_blocks=p["r"], global_blocks=p["g"], seed=p["seed"])
    if name == "nystrom":
        p = take({"m": 8, "it": 6})
        return att.Nystrom(landmarks=p["m"], pinv_iters=p["it"])
    if name == "lsg":
        p = take({"w": 4, "s": 4, "g": 1})
        return att.LocalSparseGlobal(local=p["w"], stride=p["s"], global_tokens=p["g"])
    raise UsageError(f"unknown pattern {name!r}")


def pattern_string(spec: att.AttentionSpec) -> str:
    if isinstance(spec, att.Full):
        return "full"
    if isinstance(spec, att.SlidingWindow):
        return f"window:w={spec.window},d={spec.dilation},g={len(spec.global_tokens)}"
    if isinstance(spec, att.BlockSparse):
        return f"bigbird:b={spec.block},r={spec.random_blocks},g={spec.global_blocks},seed={spec.seed}"
    if isinstance(spec, att.Nystrom):
        return f"nystrom:m={spec.landmarks},it={spec.pinv_iters}"
    return f"lsg:w={spec.local},s={spec.stride},g={spec.global_tokens}"


# ---------------------------------------------------------------------------
# run-config files (JSON with fixed sections; unknown keys rejected)

_MODEL_KEYS = {
    "vocab_size", "max_positions", "num_layers", "hidden_dim", "num_heads",
    "ffn_dim", "dropout_p", "num_tags", "tie_mlm_head", "attention",
}
_RECIPE_KEYS = {f.name for f in dataclasses.fields(distill.DistillRecipe)}
_DATA_KEYS = {"seq_len", "mask_rate", "mask_frac", "random_frac"}
_POLICY_KEYS = {"min_lang_prob", "min_perplexity_exclusive", "banned_flags", "banned_categories", "dedup"}
_DEDUP_KEYS = {"mode", "k", "jaccard_threshold"}


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise FormatError("config_parse", f"{path}: {e}") from e


def _check_keys(obj: dict, allowed: set, where: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise FormatError("config_keys", f"unknown keys {sorted(unknown)} in {where}")


def load_run_config(path) -> dict:
    obj = _load_json(path)
    _check_keys(obj, {"model", "recipe", "data"}, str(path))
    if "model" in obj:
        _check_keys(obj["model"], _MODEL_KEYS, f"{path}:model")
    if "recipe" in obj:
        _check_keys(obj["recipe"], _RECIPE_KEYS, f"{path}:recipe")
    if "data" in obj:
        _check_keys(obj["data"], _DATA_KEYS, f"{path}:data")
    return obj


def model_config_from_section(section: dict) -> enc.ModelConfig:
    section = dict(section)
    spec = parse_pattern(section.pop("attention", "full"))
    try:
        return enc.ModelConfig(attention_spec=spec, **section)
    except TypeError as e:
        raise FormatError("config_keys", f"bad model section: {e}") from e


def recipe_from_section(section: dict, overrides: dict) -> distill.DistillRecipe:
    merged = dict(section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if "steps" not in merged:
        raise FormatError("config_keys", "recipe needs 'steps' (config file or --steps)")
    try:
        return distill.DistillRecipe(**merged)
    except TypeError as e:
        raise FormatError("config_keys", f"bad recipe section: {e}") from e


def filter_policy_from_file(path) -> corpus.FilterPolicy:
    obj = _load_json(path)
    _check_keys(obj, _POLICY_KEYS, str(path))
    dd = obj.pop("dedup", {})
    _check_keys(dd, _DEDUP_KEYS, f"{path}:dedup")
    return corpus.FilterPolicy(
        min_lang_prob=obj.get("min_lang_prob", 0.80),
        min_perplexity_exclusive=obj.get("min_perplexity_exclusive", 13.51),
        banned_flags=frozenset(obj.get("banned_flags", ("tiny", "short", "noisy"))),
        banned_categories=frozenset(obj.get("banned_categories", ())),
        dedup=corpus.DedupPolicy(**dd) if dd else corpus.DedupPolicy(),
    )


def log_resolved(resolved: dict) -> None:
    print(json.dumps(resolved, sort_keys=True))


# ---------------------------------------------------------------------------
# shared helpers


def _load_ckpt(path):
    return enc.load_checkpoint(path)


def _mask_policy(data: dict) -> corpus.MaskPolicy:
    return corpus.MaskPolicy(
        rate=data.get("mask_rate", 0.15),
        mask_frac=data.get("mask_frac", 0.8),
        random_frac=data.get("random_frac", 0.1),
    )


def _mlm_stream(corpus_path, vocab_size: int, data: dict, recipe: distill.DistillRecipe):
    records = corpus.read_records(corpus_path)
    texts = [r.text for r in records]
    if not texts:
        raise InputError(f"empty corpus: {corpus_path}")
    tokenizer = corpus.ToyTokenizer.build(texts, max_vocab=vocab_size)
    seq_len = data.get("seq_len", 64)
    stream = corpus.mlm_batches(
        texts, tokenizer, seq_len, _mask_policy(data), recipe.seed, recipe.batch_size, epochs=None
    )
    return stream, tokenizer


def _train_flags(p: _Parser) -> None:
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)


def _recipe_overrides(args) -> dict:
    return {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "seed": args.seed,
    }


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    log_resolved({"command": "synth", "kind": args.kind, "size": args.size, "seed": args.seed, "out": args.out})
    made = corpus.synth_corpus(args.kind, args.size, args.seed)
    if args.kind == "mlm_toy":
        corpus.write_records(made, args.out)
    else:
        corpus.write_conll(made, args.out)
    print(f"wrote {len(made)} {args.kind} items to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_run_config(args.config)
    if "model" not in cfg:
        raise FormatError("config_keys", "pretrain needs a 'model' section")
    model_config = model_config_from_section(cfg["model"])
    recipe = recipe_from_section(cfg.get("recipe", {}), _recipe_overrides(args))
    data = cfg.get("data", {})
    log_resolved({
        "command": "pretrain", "config": enc.config_to_dict(model_config),
        "recipe": dataclasses.asdict(recipe), "data": data,
        "corpus": args.corpus, "out": args.out,
    })
    stream, _ = _mlm_stream(args.corpus, model_config.vocab_size, data, recipe)
    result = distill.run_mlm_pretrain(
        model_config, stream, recipe, init_seed=recipe.seed, init_sigma=args.init_sigma
    )
    enc.save_checkpoint(result.config, result.weights, args.out)
    distill.write_trajectory(result.trajectory, args.log or args.out + ".loss.csv")
    print(f"status={result.status} steps={result.steps_run} saved={args.out}")
    return 0


def cmd_convert(args) -> int:
    config, weights = _load_ckpt(args.inp)
    spec = parse_pattern(args.pattern)
    plan = convert.ConvertPlan(
        target_spec=spec,
        new_max_positions=args.max_pos if args.max_pos else config.max_positions,
        position_extension="random_init" if args.pos_init == "random" else "cyclic_copy",
        seed=args.seed if args.seed is not None else 0,
    )
    log_resolved({
        "command": "convert", "in": args.inp, "out": args.out,
        "pattern": args.pattern, "max_pos": plan.new_max_positions,
        "pos_init": plan.position_extension, "seed": plan.seed,
    })
    new_config, new_weights = convert.convert(config, weights, plan)
    enc.save_checkpoint(new_config, new_weights, args.out)
    print(f"converted {args.inp} -> {args.out} pattern={pattern_string(new_config.attention_spec)}")
    return 0


def cmd_extend(args) -> int:
    config, weights = _load_ckpt(args.inp)
    log_resolved({
        "command": "extend", "in": args.inp, "out": args.out,
        "max_pos": args.max_pos,
        "pos_init": "random_init" if args.pos_init == "random" else "cyclic_copy",
        "seed": args.seed if args.seed is not None else 0,
    })
    new_config, new_weights = convert.extend_only(
        config, weights, args.max_pos,
        position_extension="random_init" if args.pos_init == "random" else "cyclic_copy",
        seed=args.seed if args.seed is not None else 0,
    )
    enc.save_checkpoint(new_config, new_weights, args.out)
    print(f"extended {args.inp} -> {args.out} max_pos={args.max_pos}")
    return 0


def cmd_distill(args) -> int:
    cfg = load_run_config(args.config)
    recipe = recipe_from_section(cfg.get("recipe", {}), _recipe_overrides(args))
    data = cfg.get("data", {})
    teacher = _load_ckpt(args.teacher)
    log_resolved({
        "command": "distill", "teacher": args.teacher, "out": args.out,
        "recipe": dataclasses.asdict(recipe), "data": data, "corpus": args.corpus,
    })
    stream, _ = _mlm_stream(args.corpus, teacher[0].vocab_size, data, recipe)
    result = distill.run_distillation(teacher, stream, recipe)
    enc.save_checkpoint(result.config, result.weights, args.out)
    distill.write_trajectory(result.trajectory, args.log or args.out + ".loss.csv")
    print(f"status={result.status} steps={result.steps_run} saved={args.out}")
    return 0


def cmd_finetune(args) -> int:
    if args.task != "ner":
        raise UsageError(f"unsupported task {args.task!r}")
    cfg = load_run_config(args.config) if args.config else {}
    overrides = _recipe_overrides(args)
    section = dict(cfg.get("recipe", {}))
    section.setdefault("steps", 200)
    recipe = recipe_from_section(section, overrides)
    ckpt = _load_ckpt(args.inp)
    config = ckpt[0]
    log_resolved({
        "command": "finetune", "in": args.inp, "out": args.out, "task": args.task,
        "data": args.data, "recipe": dataclasses.asdict(recipe),
    })
    loaded = corpus.load_conll(args.data)
    if not loaded.sentences:
        raise InputError(f"no sentences in {args.data}")
    tokenizer = corpus.ToyTokenizer.build(
        (" ".join(s.tokens) for s in loaded.sentences), max_vocab=config.vocab_size
    )
    stream = corpus.ner_batches(
        loaded.sentences, tokenizer, recipe.batch_size, config.max_positions,
        seed=recipe.seed, epochs=None,
    )
    result = distill.run_finetune_tokencls(ckpt, stream, recipe)
    enc.save_checkpoint(result.config, result.weights, args.out)
    distill.write_trajectory(result.trajectory, args.log or args.out + ".loss.csv")
    print(f"status={result.status} steps={result.steps_run} saved={args.out}")
    return 0


def cmd_eval(args) -> int:
    if args.task != "ner":
        raise UsageError(f"unsupported task {args.task!r}")
    config, weights = _load_ckpt(args.inp)
    log_resolved({
        "command": "eval", "in": args.inp, "task": args.task, "data": args.data,
        "truncate": args.truncate, "out": args.out,
    })
    loaded = corpus.load_conll(args.data)
    if not loaded.sentences:
        raise InputError(f"no sentences in {args.data}")
    tokenizer = corpus.ToyTokenizer.build(
        (" ".join(s.tokens) for s in loaded.sentences), max_vocab=config.vocab_size
    )
    preds = distill.predict_tag_sequences(
        config, weights, loaded.sentences, tokenizer, max_len=args.truncate
    )
    scores = evalkit.entity_f1(preds, [s.tags for s in loaded.sentences])
    if args.out:
        evalkit.write_f1_report(scores, args.out)
    for tag in (*corpus.TAG_TYPES, "ALL"):
        s = scores[tag]
        print(f"{tag}: precision={s.precision:.4f} recall={s.recall:.4f} f1={s.f1:.4f} support={s.support}")
    return 0


def cmd_bench(args) -> int:
    bench = benchkit.BenchConfig(
        seq_lens=tuple(int(x) for x in args.seq_lens.split(",")),
        batch_size=args.batch,
        warmup_reps=args.warmup,
        timed_reps=args.reps,
        seed=args.seed if args.seed is not None else 0,
    )
    log_resolved({
        "command": "bench", "models": args.models, "bench": dataclasses.asdict(bench),
        "out": args.out, "scaling_out": args.scaling_out,
    })
    results = []
    for path in args.models.split(","):
        config, weights = _load_ckpt(path)
        results.extend(benchkit.time_inference(config, weights, bench, model=path))
    if args.out:
        with open(args.out, "w") as fh:
            benchkit.write_results_csv(results, fh)
    else:
        benchkit.write_results_csv(results, sys.stdout)
    if args.scaling_out:
        report = benchkit.scaling_report(results)
        with open(args.scaling_out, "w") as fh:
            benchkit.write_scaling_csv(report, fh)
        for warning in report.warnings:
            print(f"warning: {warning}", file=sys.stderr)
    return 0


def cmd_filter_corpus(args) -> int:
    policy = filter_policy_from_file(args.policy) if args.policy else corpus.FilterPolicy()
    log_resolved({
        "command": "filter-corpus", "in": args.inp, "out": args.out,
        "policy": args.policy, "report": args.report,
    })
    records = corpus.read_records(args.inp)
    kept, report = corpus.filter_stream_with_report(records, policy)
    deduped = corpus.dedup_stream(kept, policy)
    report["duplicate"] = len(kept) - len(deduped)
    report["kept"] = len(deduped)
    corpus.write_records(deduped, args.out)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write("reason,count\n")
            fh.write(f"kept,{report['kept']}\n")
            for reason in (*corpus.REJECT_REASONS, "duplicate"):
                fh.write(f"{reason},{report[reason]}\n")
    print(f"kept {len(deduped)} of {len(records)} records")
    return 0


def cmd_stats(args) -> int:
    log_resolved({"command": "stats", "data": args.data,
                  "lengths_out": args.lengths_out, "tags_out": args.tags_out})
    loaded = corpus.load_conll(args.data)
    if not loaded.sentences:
        raise InputError(f"no sentences in {args.data}")
    stats = evalkit.length_stats([len(s.tokens) for s in loaded.sentences])
    dist = evalkit.tag_distribution(loaded.sentences)
    if args.lengths_out:
        evalkit.write_length_stats(stats, args.lengths_out)
    if args.tags_out:
        evalkit.write_tag_distribution(dist, args.tags_out)
    values = (stats.mean, stats.std_dev, stats.min, stats.p25, stats.p50, stats.p75, stats.max)
    for name, value in zip(evalkit.STATS_ROWS, values):
        print(f"{name},{value:.1f}")
    print(f"repaired_transitions,{loaded.repairs}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="eadl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--kind", required=True, choices=["mlm_toy", "ner_toy"])
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="masked-LM pretraining")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--init-sigma", dest="init_sigma", type=float, default=0.02)
    _train_flags(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("convert", help="swap attention pattern / extend length")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--pattern", required=True)
    p.add_argument("--max-pos", dest="max_pos", type=int)
    p.add_argument("--pos-init", dest="pos_init", choices=["cyclic", "random"], default="cyclic")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("extend", help="extend max length, keep the pattern")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--max-pos", dest="max_pos", type=int, required=True)
    p.add_argument("--pos-init", dest="pos_init", choices=["cyclic", "random"], default="cyclic")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_extend)

    p = sub.add_parser("distill", help="distill a teacher into a half-depth student")
    p.add_argument("--teacher", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    _train_flags(p)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("finetune", help="fine-tune on token classification")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--task", required=True, choices=["ner"])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--log")
    _train_flags(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate on a tagged dataset")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--task", required=True, choices=["ner"])
    p.add_argument("--data", required=True)
    p.add_argument("--truncate", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="inference cost benchmark")
    p.add_argument("--models", required=True)
    p.add_argument("--seq-lens", dest="seq_lens", required=True)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--scaling-out", dest="scaling_out")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("filter-corpus", help="apply the quality filter and dedup")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy")
    p.add_argument("--report")
    p.set_defaults(fn=cmd_filter_corpus)

    p = sub.add_parser("stats", help="length and tag statistics of a tagged dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--lengths-out", dest="lengths_out")
    p.add_argument("--tags-out", dest="tags_out")
    p.set_defaults(fn=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"ERR 1: {e}", file=sys.stderr)
        return 1
    except (FormatError, InputError) as e:
        print(f"ERR 2: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"ERR 2: {e}", file=sys.stderr)
        return 2
    except (ParameterError, LengthError, ContractError, ProtocolError, NumericGuardError) as e:
        print(f"ERR 3: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
