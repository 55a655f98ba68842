"""Train, attack, score and plot one configuration through the CLI.

    python scripts/run_pipeline.py configs/fast_vae.cfg
"""

import argparse
import sys
from pathlib import Path

from avae.cli import main as avae
from avae.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config", type=Path)
    ap.add_argument("--out", type=Path, help="defaults to the config's out directory")
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    out = args.out or Path(load_config(args.config).out)
    common = ["--config", str(args.config), "--out", str(out), "-v"]
    for argv in (["train"] + common,
                 ["attack"] + common + ["--jobs", str(args.jobs)],
                 ["evaluate", "--raw", str(out / "raw_attacks.csv"), "--out", str(out)],
                 ["plot", "--raw", str(out / "raw_attacks.csv"), "--pair", "0", "--out", str(out)]):
        code = avae(argv)
        if code:
            sys.exit(code)
    print((out / "summary.csv").read_text(), end="")


if __name__ == "__main__":
    main()
