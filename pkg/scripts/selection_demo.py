"""Max-min vs exhaustive-permutation training on the synthetic selection task.

    python scripts/selection_demo.py --epochs 5
"""
import argparse
import dataclasses
from pathlib import Path

import numpy as np

from submodnet.cli import load_config
from submodnet.evalkit import random_mean_jaccard
from submodnet.planted import PlantedFn, gen_selection_dataset, sample_features
from submodnet.setfn import build_model
from submodnet.subsel import mean_jaccard_of, train_exhaustive, train_maxmin

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "selection.yaml"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--exhaustive-epochs", type=int, default=2)
    args = ap.parse_args()
    cfg = load_config(str(CONFIG), [])
    dc = cfg.data
    table = sample_features(dc.n, dc.d, 3)
    data = gen_selection_dataset(PlantedFn(dc.tag), table, dc.universe_size, dc.subset_size, dc.count, 0)
    third = len(data) // 3
    train, dev = data[:third], data[third:2 * third]

    print(f"random baseline MJC {random_mean_jaccard(dc.universe_size, dc.subset_size):.3f}")
    print(f"untrained MJC       {mean_jaccard_of(build_model(cfg.model, table.d, 0), table, dev):.3f}")
    for name, trainer, epochs in (("max-min", train_maxmin, args.epochs),
                                  ("exhaustive", train_exhaustive, args.exhaustive_epochs)):
        sel = dataclasses.replace(cfg.selection, epochs=epochs)
        res = trainer(build_model(cfg.model, table.d, 0), table, train, dev, sel)
        for r in res.metrics:
            print(f"{name:<11} epoch {r['epoch']:>2}  dev MJC {r['dev_mjc']:.3f}")
        print(f"{name:<11} {np.mean(res.epoch_seconds):.1f} s per epoch", flush=True)


if __name__ == "__main__":
    main()
