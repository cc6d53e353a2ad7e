"""Train the denoiser on the small trending market and report loss and training-window accuracy."""

import argparse

from stockdiff.experiments import FIXTURE, make_config, run_fixture


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=FIXTURE["steps_per_epoch"], help="steps per epoch")
    args = ap.parse_args()
    res = run_fixture(make_config(FIXTURE, seed=args.seed, steps_per_epoch=args.steps))
    print(f"first loss      {res.losses[0]:.4f}")
    print(f"final loss      {res.final_loss:.4f}  (mean of last 25 steps)")
    print(f"train accuracy  {res.accuracy:.3f}")
    print(f"history recon   {res.reconstruction:.4f}")
    print(f"seconds         {res.seconds:.1f}")


if __name__ == "__main__":
    main()
