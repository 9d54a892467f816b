"""lambda x T sweep of the full model, averaged over seeds.

    python3 scripts/grid.py --lams 0.01,0.1,1 --Ts 0,0.01,0.1 --seeds 0,1
"""

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from solidrec import experiments as ex
from solidrec.config import load_config
from solidrec.training import Variant


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/acceptance.cfg")
    p.add_argument("--seeds", default="0")
    p.add_argument("--lams", default="0.01,0.1,1.0")
    p.add_argument("--Ts", default="0,0.01,0.1")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--output", default="runs/grid")
    args = p.parse_args(argv)
    torch.set_num_threads(1)
    lams = [float(x) for x in args.lams.split(",")]
    Ts = [float(x) for x in args.Ts.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]
    cells: dict[tuple[float, float], list[float]] = {}
    for seed in seeds:
        cfg = load_config(args.config, [s.replace("=", " = ", 1) for s in args.set] + [f"run.seed = {seed}"])
        prepared = ex.prepare(cfg)
        for T in Ts:
            base = replace(cfg, train=replace(cfg.train, T=T))
            first = ex.train(prepared, base, Variant(True, True, False))  # lambda does not enter the first stage
            for lam in lams:
                cell = replace(base, train=replace(base.train, lam=lam))
                r = ex.train(prepared, cell, warm_start=first)
                ex.write_run(Path(args.output) / f"seed{seed}" / f"lam{lam:g}_T{T:g}", r, cell, prepared)
                cells.setdefault((lam, T), []).append(r.report.auc)
                print(f"seed {seed}\tlambda={lam:g}\tT={T:g}\tauc={r.report.auc:.4f}\tuauc={r.report.uauc:.4f}", flush=True)
    rows = [[lam, T, float(np.mean(v))] for (lam, T), v in cells.items()]
    ex.write_table(Path(args.output) / "grid_mean.tsv", ["lambda", "T", "auc"], rows)
    print("lambda \\ T\t" + "\t".join(f"{T:g}" for T in Ts))
    for lam in lams:
        print(f"{lam:g}\t\t" + "\t".join(f"{np.mean(cells[(lam, T)]):.4f}" for T in Ts))
    return 0


if __name__ == "__main__":
    sys.exit(main())
