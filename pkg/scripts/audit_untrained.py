"""Audit freshly initialized models: no training, so any pass comes from the architecture.

    python scripts/audit_untrained.py --chains 10000
"""
import argparse

from submodnet.evalkit import audit_submodular, shape_audits
from submodnet.planted import sample_features
from submodnet.setfn import ModelConfig, build_model, calibrate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--chains", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    table = sample_features(args.n, 10, args.seed)
    for kind, kw in (("monotone", {}), ("alpha", {"alpha": 0.5, "k": 10}), ("nonmonotone", {})):
        m = build_model(ModelConfig(kind=kind, mode="end_to_end", method="swapped", **kw), 10, args.seed)
        calibrate(m, table.zsums([table.ids]), table.Z)
        reports = dict(shape_audits(m))
        if kind != "nonmonotone":
            reports.update(audit_submodular(m, table, args.chains, alpha=kw.get("alpha", 1.0), k=kw.get("k")))
        for name, r in reports.items():
            print(f"{kind:<12} {name:<28} worst {r.max_violation:+.2e}  {'pass' if r.passed else 'FAIL'}")


if __name__ == "__main__":
    main()
