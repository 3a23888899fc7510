"""Fit the decoupled model and the fixed-DSF reference on each planted function.

    python scripts/regression_table.py --tags log logdet facility_location --epochs 200

Prints one row per planted function: test RMSE of both models and the relative gain.
"""
import argparse
import dataclasses
import time
from pathlib import Path

from submodnet.cli import load_config
from submodnet.fitval import train_regression
from submodnet.planted import PlantedFn, gen_setvalue_dataset, sample_features
from submodnet.setfn import build_model

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "regression.yaml"


def fit(tag, epochs, **model_kw):
    cfg = load_config(str(CONFIG), [])
    table = sample_features(cfg.data.n, cfg.data.d, 1)
    ds = gen_setvalue_dataset(PlantedFn(tag), table, 0)
    mc = dataclasses.replace(cfg.model, **model_kw)
    rc = dataclasses.replace(cfg.regression, epochs=epochs)
    if mc.kind == "fixed_dsf":
        rc = dataclasses.replace(rc, rho=0.0)
    t0 = time.perf_counter()
    res = train_regression(build_model(mc, table.d, 0), ds, table, rc)
    return res.test_rmse, time.perf_counter() - t0


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--tags", nargs="+", default=["log", "logdet", "facility_location"])
    ap.add_argument("--epochs", type=int, default=200)
    args = ap.parse_args()
    print(f"{'tag':<18}{'ours':>10}{'fixed-DSF':>12}{'gain':>8}{'minutes':>9}")
    for tag in args.tags:
        ours, secs = fit(tag, args.epochs)
        ref, _ = fit(tag, args.epochs, kind="fixed_dsf")
        print(f"{tag:<18}{ours:>10.4f}{ref:>12.4f}{1 - ours / ref:>8.0%}{secs / 60:>9.1f}", flush=True)


if __name__ == "__main__":
    main()
