"""Per-user AUC variance under one-behavior perturbations, full model vs item-only DSR, per seed.

    python3 scripts/stability.py --config configs/acceptance.cfg --seeds 0,1,2,3,4
"""

import argparse
import sys
from pathlib import Path

import torch

from solidrec import experiments as ex
from solidrec.config import load_config
from solidrec.evaluation import write_variance_tsv
from solidrec.training import FULL, ITEM_DSR, Variant


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/acceptance.cfg")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--output", default="runs/stability")
    args = p.parse_args(argv)
    torch.set_num_threads(1)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    rows = (ITEM_DSR, Variant(True, True, False), FULL)
    means = {"solid": [], "dsr": []}
    for seed in (int(s) for s in args.seeds.split(",")):
        cfg = load_config(args.config, [s.replace("=", " = ", 1) for s in args.set] + [f"run.seed = {seed}"])
        prepared = ex.prepare(cfg)
        results = ex.run_rows(prepared, cfg, rows)
        summary = ex.stability(prepared, cfg, ex.default_stability_models(results))
        write_variance_tsv(out / f"stability_seed{seed}.tsv", summary)
        for name, s in summary.items():
            means[name].append(s["mean"])
            print(f"seed {seed}\t{name}\tmedian={s['median']:.5f}\tmean={s['mean']:.5f}\tmin={s['min']:.5f}\tmax={s['max']:.5f}", flush=True)
    for name, vals in means.items():
        print(f"{name}: mean variance over seeds {sum(vals) / len(vals):.5f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
