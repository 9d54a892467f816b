"""Module ablation over several seeds: one row per (spg, sml, scl) switch setting.

    python3 scripts/ablation.py --config configs/acceptance.cfg --seeds 0,1,2,3,4 --output runs/ablation
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import torch

from solidrec import experiments as ex
from solidrec.cli import parse_rows
from solidrec.config import load_config
from solidrec.training import MODULE_ROWS


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/acceptance.cfg")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--rows", help="e.g. 000,100,110,001,111 (default: all five)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--output", default="runs/ablation")
    args = p.parse_args(argv)
    torch.set_num_threads(1)
    rows = parse_rows(args.rows) if args.rows else list(MODULE_ROWS)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.output)
    per_seed = {}
    for seed in seeds:
        t0 = time.perf_counter()
        cfg = load_config(args.config, [s.replace("=", " = ", 1) for s in args.set] + [f"run.seed = {seed}"])
        prepared = ex.prepare(cfg)
        results = ex.run_rows(prepared, cfg, rows)
        table = []
        for v, r in results.items():
            ex.write_run(out / f"seed{seed}" / v.name, r, cfg, prepared)
            table.append([v.name] + ex.metric_row(r.report, cfg.eval.ks))
        ex.write_table(out / f"seed{seed}" / "ablation_modules.tsv", ["variant"] + ex.metric_header(cfg.eval.ks), table)
        per_seed[seed] = table
        print(f"seed {seed} ({time.perf_counter() - t0:.0f}s): " + "  ".join(f"{r[0]}={r[1]:.4f}" for r in table), flush=True)
    header = ["variant"] + ex.metric_header(cfg.eval.ks)
    mean = []
    for i, v in enumerate(rows):
        vals = np.array([per_seed[s][i][1:] for s in seeds], dtype=float)
        mean.append([v.name] + vals.mean(0).tolist())
    ex.write_table(out / "ablation_modules_mean.tsv", header, mean)
    print("mean over seeds:")
    for r in mean:
        print(f"  {r[0]}\tauc={r[1]:.4f}\tuauc={r[2]:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
