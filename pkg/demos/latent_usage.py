"""Per-epoch KL of every latent, to see how much information each one carries.

A KL near zero means the posterior matches its prior for every user, so the
latent no longer distinguishes users.

    python demos/latent_usage.py --epochs 20
"""

import argparse
from dataclasses import replace

import torch

from imvae.study import STUDY_RUN, Study
from imvae.trainer import train

parser = argparse.ArgumentParser()
parser.add_argument("--epochs", type=int, default=20)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()

torch.set_num_threads(1)
data = Study().data(args.seed)
res = train(replace(STUDY_RUN, epochs=args.epochs, seed=args.seed), data.examples, data.n_items)
names = ("recon_x", "kl_zx", "kl_zax", "kl_ztx", "kl_zty", "kl_transfer_yx", "kl_denoise_x")
print("epoch " + " ".join(f"{n:>15}" for n in names) + "  valid_ndcg10")
for rec in res.history:
    print(f"{rec['epoch']:>5} " + " ".join(f"{rec[n]:>15.4f}" for n in names) + f"  {rec['valid_ndcg10']:.3f}")
