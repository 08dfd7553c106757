"""Write a synthetic race dataset with a planted CRT signal.

    python3 scripts/make_synthetic_dataset.py out/data --runners 30 --seed 0
"""

import argparse
import logging

from crtreg.synthetic import SyntheticSpec, make_synthetic_dataset


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("root", help="output directory")
    parser.add_argument("--runners", type=int, default=SyntheticSpec.n_runners)
    parser.add_argument("--frames", type=int, default=SyntheticSpec.frames)
    parser.add_argument("--size", type=int, default=SyntheticSpec.size)
    parser.add_argument("--noise", type=float, default=SyntheticSpec.noise_sigma, help="CRT noise, normalised units")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    spec = SyntheticSpec(n_runners=args.runners, frames=args.frames, size=args.size, noise_sigma=args.noise, seed=args.seed)
    manifest = make_synthetic_dataset(args.root, spec)
    print(f"{len(manifest)} observations -> {manifest.source}")


if __name__ == "__main__":
    main()
