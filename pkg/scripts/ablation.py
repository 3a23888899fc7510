"""Decoupled vs end-to-end training and depth 2 vs depth 1, on one planted function.

    python scripts/ablation.py --tag log --epochs 200
"""
import argparse

from regression_table import fit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tag", default="log")
    ap.add_argument("--epochs", type=int, default=200)
    args = ap.parse_args()
    variants = {
        "decoupled, depth 2": {},
        "end-to-end, depth 2": {"mode": "end_to_end"},
        "decoupled, depth 1": {"depth": 1},
    }
    for name, kw in variants.items():
        rmse, secs = fit(args.tag, args.epochs, **kw)
        print(f"{name:<22} test RMSE {rmse:.4f}  ({secs / 60:.1f} min)", flush=True)


if __name__ == "__main__":
    main()
