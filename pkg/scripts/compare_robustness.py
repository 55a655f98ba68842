"""Mean latent-attack AUDDC of a VAE and of DRAW with attention.

Both models get the same desk-scale training budget.  With ``--seeds k``
every seed changes training, the evaluation pairs and the attack noise;
the ordering is reported per seed together with the majority verdict.
"""

import argparse
import logging

import numpy as np

from avae.experiments import AttackSettings, attack_evaluation_set, mnist_subset, train_model


def mean_auddc(params, data, seed):
    _, summaries = attack_evaluation_set(params, data, AttackSettings(seed_pairs=seed, seed_noise=seed))
    return float(np.mean([s.auddc for s in summaries]))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    wins = 0
    for seed in range(args.seeds):
        data = mnist_subset(seed)
        vae, _ = train_model(data, "vae", 32, epochs=args.epochs, lr=args.lr, seed=seed)
        draw, _ = train_model(data, "draw", 8, epochs=args.epochs, lr=args.lr, seed=seed,
                              timesteps=16, attention=True, lstm=64)
        a_vae, a_draw = mean_auddc(vae, data, seed), mean_auddc(draw, data, seed)
        wins += a_draw > a_vae
        print(f"seed {seed}: AUDDC x100  VAE {100 * a_vae:.1f}  DRAW-attention {100 * a_draw:.1f}")
    print(f"DRAW-attention above VAE in {wins}/{args.seeds} seeds")


if __name__ == "__main__":
    main()
