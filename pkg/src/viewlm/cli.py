"""Command-line surface: gen-data, train, eval, compare, analyze.

Every command is a pure function of its config file, flags, and input
files; outputs are byte-identical across reruns except run.log, the
only file that carries timestamps. Exit codes: 0 success, 2
usage/schema, 3 contract violation, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields, replace

import numpy as np

from .analysis import analyze_checkpoint
from .data import generate_synthetic_corpus, load_jsonl, split_examples, write_jsonl
from .errors import ContractError, DivergenceError, SchemaError, ViewLMError
from .evaluation import (EvalConfig, evaluate_checkpoint, evaluate_run, paired_t_test)
from .model import Model, ModelConfig, load_checkpoint
from .objectives import ObjectiveConfig
from .trainer import KL_GRID, TrainConfig, train

_SECTIONS = ("model", "train", "objective", "eval", "corpus", "output_dir")


def _check_keys(obj: dict, allowed, pointer: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise SchemaError(f"unknown key at {pointer}/{unknown[0]}")


def _build_section(cls, obj: dict, pointer: str, rename: dict | None = None):
    rename = rename or {}
    names = [f.name for f in fields(cls)]
    allowed = [rename.get(n, n) for n in names]
    _check_keys(obj, allowed, pointer)
    kwargs = {}
    for name in names:
        key = rename.get(name, name)
        if key in obj:
            kwargs[name] = obj[key]
    try:
        return cls(**kwargs)
    except (ContractError, TypeError, ValueError) as e:
        raise SchemaError(f"invalid section at {pointer}: {e}") from e


def load_run_config(path) -> dict:
    """Parse and validate a run config JSON document.

    Returns {"model": ModelConfig, "train": TrainConfig, "eval":
    EvalConfig, "corpus": dict, "output_dir": str | None}; the
    objective section lands inside the TrainConfig.
    """
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"config is not valid JSON: {e.msg} (line {e.lineno})") from e
    if not isinstance(doc, dict):
        raise SchemaError("config root must be a JSON object")
    _check_keys(doc, _SECTIONS, "")

    model = _build_section(ModelConfig, doc.get("model", {}), "/model")
    objective = _build_section(ObjectiveConfig, doc.get("objective", {}), "/objective",
                               rename={"lambda_": "lambda"})
    train_obj = dict(doc.get("train", {}))
    grid = train_obj.pop("grid", None)
    if grid is not None:
        try:
            grid = tuple((int(k), float(lam)) for k, lam in grid)
        except (TypeError, ValueError) as e:
            raise SchemaError(f"invalid section at /train/grid: {e}") from e
    seeds = train_obj.pop("seeds", None)
    kwargs = {"objective": objective, "grid": grid}
    if seeds is not None:
        kwargs["seeds"] = tuple(seeds)
    names = [f.name for f in fields(TrainConfig) if f.name not in kwargs and f.name != "seeds"]
    _check_keys(train_obj, names, "/train")
    try:
        train_cfg = TrainConfig(**train_obj, **kwargs)
    except (ContractError, TypeError, ValueError) as e:
        raise SchemaError(f"invalid section at /train: {e}") from e

    eval_cfg = _build_section(EvalConfig, doc.get("eval", {}), "/eval")
    corpus = doc.get("corpus", {})
    _check_keys(corpus, ("train", "test"), "/corpus")
    output_dir = doc.get("output_dir")
    if output_dir is not None and not isinstance(output_dir, str):
        raise SchemaError("invalid section at /output_dir: expected a string")
    return {"model": model, "train": train_cfg, "eval": eval_cfg,
            "corpus": corpus, "output_dir": output_dir}


def _apply_objective_mode(cfg: TrainConfig, mode: str | None) -> TrainConfig:
    if mode is None:
        return cfg
    if mode == "ntp":
        obj = replace(cfg.objective, lambda_=0.0, monitor=False)
    elif mode == "monitor":
        obj = replace(cfg.objective, lambda_=0.0, monitor=True)
    elif mode == "jepa":
        obj = replace(cfg.objective, monitor=False)
    else:
        raise SchemaError(f"unknown objective mode {mode!r}")
    return replace(cfg, objective=obj)


def _positive_int(value: str) -> int:
    n = int(value)
    if n < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {n}")
    return n


def _seed_list(value: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in value.split(","))
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"bad seed list {value!r}") from e


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    examples = generate_synthetic_corpus(args.seed, args.n, args.depth)
    write_jsonl(args.out, examples, seed=args.seed, grammar_depth=args.depth)
    train_part, test_part = split_examples(examples)
    base, ext = os.path.splitext(args.out)
    write_jsonl(f"{base}.train{ext}", train_part, seed=args.seed, grammar_depth=args.depth)
    write_jsonl(f"{base}.test{ext}", test_part, seed=args.seed, grammar_depth=args.depth)
    print(f"wrote {len(examples)} examples ({len(train_part)} train, "
          f"{len(test_part)} test) to {args.out}")
    return 0


def _run_grid(train_cfg: TrainConfig, model_cfg: ModelConfig, train_examples,
              test_examples, eval_cfg: EvalConfig, out_dir) -> int:
    cells = train_cfg.grid or KL_GRID
    lams = sorted({lam for _, lam in cells})
    ks = sorted({k for k, _ in cells})
    accs = {}
    for k, lam in cells:
        cell_cfg = replace(train_cfg, grid=None,
                           objective=replace(train_cfg.objective, k=k, lambda_=lam,
                                             monitor=False))
        cell_dir = os.path.join(out_dir, f"grid_k{k}_lam{lam:g}")
        train(cell_cfg, train_examples, cell_dir, model_cfg)
        report = evaluate_run(cell_dir, test_examples, eval_cfg)
        accs[(k, lam)] = report.mean
    heatmap = os.path.join(out_dir, "grid_heatmap.csv")
    with open(heatmap, "w", encoding="utf-8") as f:
        f.write("k\\lambda," + ",".join(f"{lam:g}" for lam in lams) + "\n")
        for k in ks:
            row = [f"{accs[(k, lam)]:.6f}" if (k, lam) in accs else "" for lam in lams]
            f.write(f"{k}," + ",".join(row) + "\n")
    print(f"wrote {heatmap}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    train_cfg = _apply_objective_mode(cfg["train"], args.objective)
    if args.seed_set is not None:
        train_cfg = replace(train_cfg, seeds=args.seed_set)
    out_dir = args.out or cfg["output_dir"]
    if not out_dir:
        raise SchemaError("no output directory: set output_dir in the config or pass --out")
    corpus_path = cfg["corpus"].get("train")
    if not corpus_path:
        raise SchemaError("config needs /corpus/train to train")
    examples = load_jsonl(corpus_path)
    if args.grid:
        test_path = cfg["corpus"].get("test")
        if not test_path:
            raise SchemaError("--grid needs /corpus/test for the heatmap")
        return _run_grid(train_cfg, cfg["model"], examples, load_jsonl(test_path),
                         cfg["eval"], out_dir)
    report = train(train_cfg, examples, out_dir, cfg["model"],
                   init_checkpoint=args.init_checkpoint)
    statuses = [entry["status"] for entry in report["per_seed"].values()]
    print(f"run complete: {out_dir} ({statuses.count('ok')}/{len(statuses)} seeds ok)")
    return 4 if "ok" not in statuses else 0


def cmd_eval(args) -> int:
    eval_cfg = load_run_config(args.config)["eval"] if args.config else EvalConfig()
    if args.mode is not None:
        eval_cfg = replace(eval_cfg, match_mode=args.mode)
    examples = load_jsonl(args.corpus)
    if args.run_dir:
        report = evaluate_run(args.run_dir, examples, eval_cfg,
                              baseline_report=args.baseline, out_dir=args.out)
        print(json.dumps({"mean": report.mean, "sd": report.sd, "t": report.t,
                          "p": report.p}, sort_keys=True))
        return 0
    config, weights = load_checkpoint(args.checkpoint)
    acc, transcripts = evaluate_checkpoint(Model(config, weights), examples, eval_cfg)
    out_dir = args.out or os.path.join(os.path.dirname(args.checkpoint) or ".", "eval")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "transcripts.jsonl"), "w", encoding="utf-8") as f:
        for tr in transcripts:
            f.write(json.dumps(tr, sort_keys=True, ensure_ascii=False) + "\n")
    report = {"accuracy": acc, "n_examples": len(examples),
              "checkpoint": str(args.checkpoint), "config": asdict(eval_cfg)}
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    print(json.dumps({"accuracy": acc}, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    with open(args.report_a, "r", encoding="utf-8") as f:
        a = json.load(f)
    with open(args.report_b, "r", encoding="utf-8") as f:
        b = json.load(f)
    if a["seeds"] != b["seeds"]:
        raise ContractError(f"seed sets differ: {a['seeds']} vs {b['seeds']}")
    result = paired_t_test(a["accuracies"], b["accuracies"])
    out = {"t": result.t, "p": result.p, "df": result.df,
           "degenerate": result.degenerate,
           "mean_a": float(np.mean(a["accuracies"])),
           "mean_b": float(np.mean(b["accuracies"]))}
    print(json.dumps(out, sort_keys=True))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(out, f, sort_keys=True, indent=2)
            f.write("\n")
    return 0


def cmd_analyze(args) -> int:
    examples = load_jsonl(args.corpus)
    report = analyze_checkpoint(args.checkpoint, examples, args.out)
    print(json.dumps({"residual": report["residual"],
                      "avg_top_singular": report["avg_top_singular"]}, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="viewlm",
                                     description="Train and probe view-aligned language models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a deterministic synthetic corpus")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--depth", type=_positive_int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train per-seed runs from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--objective", choices=("ntp", "jepa", "monitor"))
    p.add_argument("--seed-set", type=_seed_list)
    p.add_argument("--grid", action="store_true",
                   help="sweep (k, lambda) cells and write a heatmap CSV")
    p.add_argument("--init-checkpoint")
    p.add_argument("--out", help="override the config's output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a whole run")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--checkpoint")
    group.add_argument("--run-dir")
    p.add_argument("--corpus", required=True)
    p.add_argument("--mode", choices=("exact", "prefix", "substring", "label_prefix",
                                      "mc_option_prob"))
    p.add_argument("--config")
    p.add_argument("--baseline", help="report.json of the run to pair against")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="paired one-tailed t-test between two eval reports")
    p.add_argument("--report-a", required=True)
    p.add_argument("--report-b", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("analyze", help="embedding geometry of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SchemaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (ViewLMError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
