"""Modality ablation: semantics clustered from each non-empty subset of id / image / text.

    python3 scripts/modalities.py --seeds 0,1
"""

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from solidrec import experiments as ex
from solidrec.config import load_config


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", default="configs/acceptance.cfg")
    p.add_argument("--seeds", default="0")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--output", default="runs/modalities")
    args = p.parse_args(argv)
    torch.set_num_threads(1)
    scores: dict[str, list[float]] = {}
    for seed in (int(s) for s in args.seeds.split(",")):
        cfg = load_config(args.config, [s.replace("=", " = ", 1) for s in args.set] + [f"run.seed = {seed}"])
        prepared = ex.prepare(cfg)
        for sel in ex.MODALITY_ROWS:
            name = "+".join(sel)
            lifted = ex.relift(prepared, cfg, sel)
            r = ex.train(lifted, cfg)
            ex.write_run(Path(args.output) / f"seed{seed}" / name, r, cfg, lifted)
            scores.setdefault(name, []).append(r.report.auc)
            print(f"seed {seed}\t{name}\tauc={r.report.auc:.4f}", flush=True)
    for name, v in scores.items():
        print(f"{name}\tmean auc={np.mean(v):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
