"""Command-line entry point: ``solidrec <command> [options]``.

Every command takes ``--config FILE`` and any number of ``--set section.key=value``
overrides. The output root is ``run.output_dir`` unless ``SOLIDREC_OUT`` is set.
Exit codes: 0 ok, 2 config error, 3 data error, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import experiments as ex
from . import semantics as sem
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, ExperimentConfig, load_config
from .data import DataError, SplitDataset, read_dataset, write_dataset
from .evaluation import evaluate, make_perturbations, stability_variance, write_variance_tsv
from .synthetic import generate, write_categories, write_interactions
from .training import MODULE_ROWS, DivergenceError, StageError, Variant, predict, run_variant

logger = logging.getLogger("solidrec")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4
OUT_ENV = "SOLIDREC_OUT"


def output_root(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUT_ENV) or cfg.output_dir)


def parse_rows(text: str) -> list[Variant]:
    """``"000,100,110,001,111"`` -> variants (digits are spg, sml, scl)."""
    rows = []
    for tok in text.split(","):
        tok = tok.strip()
        if len(tok) != 3 or set(tok) - {"0", "1"}:
            raise ConfigError(f"bad ablation row {tok!r}; expected three 0/1 digits")
        try:
            rows.append(Variant(*(c == "1" for c in tok)))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return rows


def parse_floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _config(args) -> ExperimentConfig:
    overrides = [s.replace("=", " = ", 1) for s in args.set]
    if args.seed is not None:
        overrides.append(f"run.seed = {args.seed}")
    return load_config(args.config, overrides)


# -- commands ---------------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    cfg = _config(args)
    out = Path(args.output) if args.output else output_root(cfg) / "synthetic"
    out.mkdir(parents=True, exist_ok=True)
    syn = generate(cfg.data.synthetic_config(cfg.seed))
    write_interactions(out / "interactions.csv", syn.log)
    sem.write_modalities(out / "modalities", syn.modalities)
    write_categories(out / "categories.tsv", syn.categories)
    np.savetxt(out / "true_semantics.txt", syn.true_semantics, fmt="%d")
    (out / "manifest.json").write_text(json.dumps({"synthetic": cfg.to_dict()["data"], "seed": cfg.seed}, indent=2, sort_keys=True))
    print(out)
    return EXIT_OK


def cmd_build_data(args) -> int:
    cfg = _config(args)
    prepared = ex.prepare(cfg)
    out = Path(args.output) if args.output else output_root(cfg) / "dataset"
    manifest = {
        "seed": cfg.seed,
        "L_s": cfg.data.seq_len,
        "k_train": cfg.data.k_train,
        "k_valid": cfg.data.k_valid,
        "k_test": cfg.data.k_test,
        "n_semantics": prepared.n_semantics,
        "inputs": prepared.input_checksums or {},
        "config": cfg.to_dict(),
    }
    write_dataset(out, prepared.data, manifest, prepared.log)
    sem.write_semantic_map(out / "semantics", prepared.semantic_map)
    print(out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    prepared = ex.prepare(cfg)
    result = ex.train(prepared, cfg)
    out = Path(args.output) if args.output else output_root(cfg) / "train" / result.variant.name
    ex.write_run(out, result, cfg, prepared)
    _print_report(result.variant.name, result.report, cfg.eval.ks)
    print(out)
    return EXIT_OK


def _dataset_for(manifest_cfg: ExperimentConfig, dataset_dir) -> tuple[SplitDataset, sem.SemanticMap]:
    if dataset_dir:
        data, _ = read_dataset(dataset_dir)
        smap = sem.read_semantic_map(Path(dataset_dir) / "semantics")
        return data, smap
    prepared = ex.prepare(manifest_cfg)
    return prepared.data, prepared.semantic_map


def cmd_eval(args) -> int:
    try:
        model, cfg, manifest = load_checkpoint(args.checkpoint)
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc
    data, _ = _dataset_for(cfg, args.dataset)
    scores = predict(model, data.test, manifest["stage"], cfg.train.T, cfg.train.eval_batch_size)
    report = evaluate(scores, data.test, cfg.eval.ks)
    out = Path(args.output) if args.output else Path(args.checkpoint).parent
    report.write(out, args.prefix)
    _print_report(manifest["variant"], report, cfg.eval.ks)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    root = Path(args.output) if args.output else output_root(cfg) / "ablate"
    prepared = ex.prepare(cfg)
    ks = cfg.eval.ks
    if args.axis in ("modules", "both"):
        rows = parse_rows(args.rows) if args.rows else list(MODULE_ROWS)
        results = ex.run_rows(prepared, cfg, rows)
        table = []
        for v, r in results.items():
            ex.write_run(root / "modules" / v.name, r, cfg, prepared)
            table.append([int(v.spg), int(v.sml), int(v.scl)] + ex.metric_row(r.report, ks))
            _print_report(v.name, r.report, ks)
        ex.write_table(root / "ablation_modules.tsv", ["spg", "sml", "scl"] + ex.metric_header(ks), table)
    if args.axis in ("modalities", "both"):
        table = []
        for sel in ex.MODALITY_ROWS:
            p = ex.relift(prepared, cfg, sel)
            r = ex.train(p, cfg)
            name = "+".join(sel)
            ex.write_run(root / "modalities" / name, r, cfg, p)
            table.append([name] + ex.metric_row(r.report, ks))
            _print_report(name, r.report, ks)
        ex.write_table(root / "ablation_modalities.tsv", ["modalities"] + ex.metric_header(ks), table)
    print(root)
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _config(args)
    root = Path(args.output) if args.output else output_root(cfg) / "grid"
    prepared = ex.prepare(cfg)
    lams, Ts = parse_floats(args.lams), parse_floats(args.Ts)
    variant = cfg.model.variant
    rows = []
    for T in Ts:
        first = None
        for lam in lams:
            cell = replace(cfg, train=replace(cfg.train, lam=lam, T=T))
            if len(variant.stages) > 1 and first is None:
                first = run_variant(
                    Variant(variant.spg, variant.sml, False), prepared.data, prepared.n_semantics,
                    cell.train, cell.backbone, cell.generator, cell.eval.ks,
                )
            r = ex.train(prepared, cell, variant, warm_start=first)
            ex.write_run(root / f"lam{lam:g}_T{T:g}", r, cell, prepared)
            k = cfg.eval.ks[0]
            rows.append([lam, T, r.report.uauc, r.report.ndcg[k], r.report.recall[k], r.report.auc])
            print(f"lam={lam:g}\tT={T:g}\tuauc={r.report.uauc:.4f}\tauc={r.report.auc:.4f}", flush=True)
    k = cfg.eval.ks[0]
    ex.write_table(root / "grid.tsv", ["lambda", "T", "uauc", f"ndcg@{k}", f"recall@{k}", "auc"], rows)
    print(root)
    return EXIT_OK


def cmd_stability(args) -> int:
    named = {}
    for spec in args.checkpoint:
        if "=" not in spec:
            raise ConfigError(f"--checkpoint expects name=dir, got {spec!r}")
        name, path = spec.split("=", 1)
        try:
            named[name] = load_checkpoint(path)
        except CheckpointError as exc:
            raise DataError(str(exc)) from exc
    if len(named) == 0:
        raise ConfigError("stability needs at least one --checkpoint name=dir")
    first_cfg = next(iter(named.values()))[1]
    data, smap = _dataset_for(first_cfg, args.dataset)
    perturbed, skipped = make_perturbations(data.test, data.histories, smap.assignment, first_cfg.eval.perturbations, first_cfg.seed)
    summaries = {}
    for name, (model, cfg, manifest) in named.items():
        def score(s, model=model, cfg=cfg, stage=manifest["stage"]):
            return predict(model, s, stage, cfg.train.T, cfg.train.eval_batch_size)

        _, summaries[name] = stability_variance(score, perturbed)
    out = Path(args.output) if args.output else output_root(first_cfg) / "stability"
    out.mkdir(parents=True, exist_ok=True)
    write_variance_tsv(out / "stability.tsv", summaries)
    for name, s in summaries.items():
        print(f"{name}\tmedian={s['median']:.6g}\tmean={s['mean']:.6g}")
    if skipped:
        print(f"{len(skipped)} users skipped (no perturbation source)")
    print(out)
    return EXIT_OK


def _print_report(name, report, ks) -> None:
    parts = [f"auc={report.auc:.4f}", f"uauc={report.uauc:.4f}"]
    parts += [f"ndcg@{k}={report.ndcg[k]:.4f}" for k in ks]
    parts += [f"recall@{k}={report.recall[k]:.4f}" for k in ks]
    print(f"{name}\t" + "\t".join(parts), flush=True)


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat section.key = value file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    common.add_argument("--output", help="output directory (default: under the output root)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="solidrec", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-synthetic", parents=[common], help="write a planted synthetic log").set_defaults(fn=cmd_gen_synthetic)
    sub.add_parser("build-data", parents=[common], help="split, sequence and sample a log").set_defaults(fn=cmd_build_data)
    sub.add_parser("train", parents=[common], help="train one variant").set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", help="dataset directory from build-data (default: rebuilt from the checkpoint config)")
    e.add_argument("--prefix", default="eval_report")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="module and/or modality ablation table")
    a.add_argument("--axis", choices=("modules", "modalities", "both"), default="modules")
    a.add_argument("--rows", help="module rows as spg/sml/scl digit triples, e.g. 000,100,110,001,111")
    a.set_defaults(fn=cmd_ablate)

    g = sub.add_parser("grid", parents=[common], help="lambda x T sweep")
    g.add_argument("--lams", default="0.01,0.1,1.0")
    g.add_argument("--Ts", default="0,0.01,0.1")
    g.set_defaults(fn=cmd_grid)

    s = sub.add_parser("stability", parents=[common], help="per-user AUC variance under one-behavior perturbations")
    s.add_argument("--checkpoint", action="append", default=[], metavar="NAME=DIR", required=True)
    s.add_argument("--dataset")
    s.set_defaults(fn=cmd_stability)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(max(1, min(4, os.cpu_count() or 1)))
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except StageError as exc:
        if isinstance(exc.cause, DivergenceError):
            print(f"training diverged: {exc}", file=sys.stderr)
            return EXIT_DIVERGENCE
        raise


if __name__ == "__main__":
    sys.exit(main())
