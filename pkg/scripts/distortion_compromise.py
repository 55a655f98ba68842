"""Rank correlation between input distortion and approach to the target.

Trains the fast-profile VAE on the bundled MNIST subset, runs latent
attacks on the evaluation pairs and prints Spearman rho per pair.
"""

import argparse
import logging

import numpy as np

from avae.experiments import AttackSettings, attack_evaluation_set, mnist_subset, train_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--lr", type=float, default=1e-4)
    ap.add_argument("--pairs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    data = mnist_subset(args.seed)
    params, _ = train_model(data, "vae", 32, epochs=args.epochs, lr=args.lr, seed=args.seed)
    _, summaries = attack_evaluation_set(params, data, AttackSettings(pairs=args.pairs, seed_pairs=args.seed,
                                                                      seed_noise=args.seed))
    for s in summaries:
        print(f"pair {s.pair_id}: rho {s.rho:+.3f}  AUDDC {s.auddc:.3f}")
    rhos = np.array([s.rho for s in summaries])
    print(f"{int(np.sum(rhos >= 0.8))}/{len(rhos)} pairs with rho >= 0.8")


if __name__ == "__main__":
    main()
