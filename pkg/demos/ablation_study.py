"""Full model against its single-module removals on the synthetic corpus.

    python demos/ablation_study.py --seeds 0 1 2
"""

import argparse
import logging

import numpy as np
import torch

from imvae.study import Study

parser = argparse.ArgumentParser()
parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
parser.add_argument("--variants", nargs="+", default=["full", "no_psg", "no_if_ds", "no_dn"])
args = parser.parse_args()

torch.set_num_threads(1)
logging.basicConfig(level=logging.INFO, format="%(message)s")
study = Study()
print(f"{'variant':<10} {'tailed':>14} {'cold-start':>14} {'all':>14}   (NDCG@10, mean of X and Y)")
for v in args.variants:
    cells = []
    for g in ("tailed", "cold_start", "all"):
        vals = study.cell(v, args.seeds, g)
        cells.append(f"{vals.mean():6.2f}±{vals.std():.2f}")
    print(f"{v:<10} " + " ".join(f"{c:>14}" for c in cells))
