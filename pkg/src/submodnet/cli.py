"""Command-line experiment driver.

Every command reads one YAML config (``--config``); ``--set a.b=value`` and
the dedicated flags override individual entries.  Exit codes: 0 success,
2 invalid input, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import evalkit, fitval, planted, subsel
from .diffgraph import MlpSpec
from .quadrature import QuadratureSpec
from .setfn import FeatureTable, ModelConfig, SetFnModel, build_model

log = logging.getLogger("submodnet")

SUBSTREAMS = {"data": 0, "init": 1, "sampling": 2}


class ValidationError(ValueError):
    pass


@dataclass
class DataConfig:
    task: str = "regression"
    tag: str = "log"
    n: int = 2000
    d: int = 10
    universe_size: int = 30
    subset_size: int = 5
    count: int = 500
    features: str | None = None  # optional external feature CSV


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    data_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    regression: fitval.RegressionConfig = field(default_factory=fitval.RegressionConfig)
    selection: subsel.SelectionConfig = field(default_factory=subsel.SelectionConfig)

    @property
    def dataset_dir(self) -> Path:
        return Path(self.data_dir or self.out_dir)

    def rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.seed, SUBSTREAMS[name]])

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_json()
        d["selection"]["seed_hidden"] = list(self.selection.seed_hidden)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def _build(cls, values: dict):
    """Instantiate a dataclass from a nested dict, rejecting unknown keys."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValidationError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**values)


def _model_config(d: dict) -> ModelConfig:
    d = dict(d)
    for key in ("net", "dnet"):
        if key in d:
            spec = dict(d[key])
            if "hidden" in spec:
                spec["hidden"] = tuple(spec["hidden"])
            d[key] = _build(MlpSpec, spec)
    for key in ("inner", "outer"):
        if key in d:
            d[key] = _build(QuadratureSpec, d[key])
    return _build(ModelConfig, d)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d or {})
    try:
        parts = {
            "data": _build(DataConfig, d.pop("data", {}) or {}),
            "model": _model_config(d.pop("model", {}) or {}),
            "regression": _build(fitval.RegressionConfig, d.pop("regression", {}) or {}),
            "selection": _build(subsel.SelectionConfig, d.pop("selection", {}) or {}),
        }
        return _build(ExperimentConfig, {**d, **parts})
    except (TypeError, ValueError) as e:
        raise ValidationError(str(e)) from e


def _set_path(d: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    for k in keys[:-1]:
        d = d.setdefault(k, {})
    d[keys[-1]] = value


def load_config(path: str | None, overrides: list[str]) -> ExperimentConfig:
    raw = {}
    if path:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        _set_path(raw, key, yaml.safe_load(value))
    return config_from_dict(raw)


def save_config(cfg: ExperimentConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# --- data ---------------------------------------------------------------------

def _folds(n: int, rng: np.random.Generator) -> list[np.ndarray]:
    return [np.sort(p) for p in np.array_split(rng.permutation(n), 3)]


def cmd_gen(cfg: ExperimentConfig) -> dict:
    out = cfg.dataset_dir
    out.mkdir(parents=True, exist_ok=True)
    rng = cfg.rng("data")
    dc = cfg.data
    if dc.features:
        table = planted.read_features(dc.features, shift=True)
    else:
        table = planted.sample_features(dc.n, dc.d, rng)
    planted.write_features(out / "features.csv", table)
    fn = planted.PlantedFn(dc.tag)
    manifest = {"seed": cfg.seed, "task": dc.task, "tag": dc.tag, "config_hash": cfg.digest()}
    if dc.task == "regression":
        ds = planted.gen_setvalue_dataset(fn, table, rng)
        folds = ds.folds()
        for name, insts in folds.items():
            planted.write_setvalue(out / f"{name}.txt", insts)
        manifest["norm"] = ds.norm
        manifest["sizes"] = {k: len(v) for k, v in folds.items()}
    elif dc.task == "selection":
        insts = planted.gen_selection_dataset(fn, table, dc.universe_size, dc.subset_size, dc.count, rng)
        for name, idx in zip(("train", "dev", "test"), _folds(len(insts), rng)):
            planted.write_selection(out / f"{name}.txt", [insts[i] for i in idx])
        manifest["sizes"] = {k: len(planted.read_selection(out / f"{k}.txt")) for k in ("train", "dev", "test")}
    else:
        raise ValidationError(f"unknown task {dc.task!r}")
    manifest["files"] = {p.name: _sha(p) for p in sorted(out.glob("*.txt")) + [out / "features.csv"]}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    save_config(cfg, Path(cfg.out_dir))
    return manifest


def _load_table(cfg: ExperimentConfig) -> FeatureTable:
    path = cfg.dataset_dir / "features.csv"
    if not path.exists():
        raise ValidationError(f"no dataset at {cfg.dataset_dir}; run gen first")
    return planted.read_features(path)


def _load_regression(cfg: ExperimentConfig) -> tuple[FeatureTable, planted.SetValueDataset]:
    table = _load_table(cfg)
    d = cfg.dataset_dir
    try:
        folds = [planted.read_setvalue(d / f"{k}.txt") for k in ("train", "dev", "test")]
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise ValidationError(f"dataset incomplete: {e}") from e
    if manifest.get("task") != "regression":
        raise ValidationError("dataset was not generated for regression")
    return table, planted.SetValueDataset(*folds, norm=manifest["norm"])


def _load_selection(cfg: ExperimentConfig):
    table = _load_table(cfg)
    d = cfg.dataset_dir
    try:
        folds = {k: planted.read_selection(d / f"{k}.txt") for k in ("train", "dev", "test")}
    except FileNotFoundError as e:
        raise ValidationError(f"dataset incomplete: {e}") from e
    except ValueError as e:
        raise ValidationError(f"dataset is not a selection dataset: {e}") from e
    return table, folds


def _check_dim(cfg: ExperimentConfig, table: FeatureTable, model: SetFnModel | None = None) -> None:
    if model is not None and model.dim != table.d:
        raise ValidationError(f"checkpoint expects d={model.dim}, dataset has d={table.d}")


# --- training -----------------------------------------------------------------

def cmd_train_regression(cfg: ExperimentConfig, resume: str | None = None) -> dict:
    table, ds = _load_regression(cfg)
    out = Path(cfg.out_dir)
    save_config(cfg, out)
    start, opt_state = 0, None
    if resume:
        state = json.loads(Path(resume).read_text())
        model = SetFnModel.from_json(state["model"])
        start = state["epoch"] + 1
        opt_state = _decode_opt(state["optimizer"])
    else:
        model = build_model(cfg.model, table.d, cfg.rng("init"))
    _check_dim(cfg, table, model)
    if model.kind == "alpha":
        too_big = sum(len(i.S) > cfg.model.k for i in ds.train)
        if too_big:
            log.warning("%d training sets exceed k=%d; the alpha guarantee covers |S| <= k only",
                        too_big, cfg.model.k)

    def save_state(row, m, opt):
        payload = {"epoch": row["epoch"], "model": m.to_json(), "optimizer": _encode_opt(opt.state())}
        (out / "last_state.json").write_text(json.dumps(payload))
        log.info("epoch %d train %.5f dev %.5f", row["epoch"], row["train_rmse"], row.get("dev_rmse", float("nan")))

    res = fitval.train_regression(model, ds, table, cfg.regression, start_epoch=start,
                                  optimizer_state=opt_state, on_epoch=save_state)
    res.model.save(out / "checkpoint.json")
    fitval.write_metrics(out / "metrics.csv", res.metrics)
    fitval.write_report(out / "report.json", res, cfg.digest(), cfg.seed,
                        {"kind": model.kind, "tag": cfg.data.tag, "mode": cfg.model.mode, "depth": cfg.model.depth})
    if res.diverged:
        raise fitval.Divergence("training diverged; last good checkpoint written")
    return json.loads((out / "report.json").read_text())


def _encode_opt(state: dict) -> dict:
    return {"t": state["t"], "m": {k: v.tolist() for k, v in state["m"].items()},
            "v": {k: v.tolist() for k, v in state["v"].items()}}


def _decode_opt(state: dict) -> dict:
    return {"t": state["t"], "m": {k: np.array(v) for k, v in state["m"].items()},
            "v": {k: np.array(v) for k, v in state["v"].items()}}


def _selection_scores(model, table, insts) -> tuple[dict, list[list[int]]]:
    preds = [subsel.greedy_select(model, table, i.V, min(len(i.V), max(len(i.S_star), 10))) for i in insts]
    mjc = evalkit.mean_jaccard(preds, [i.S_star for i in insts])
    ndcg = float(np.mean([evalkit.ndcg_at_10(p, i.S_star) for p, i in zip(preds, insts)]))
    return {"mjc": mjc, "ndcg10": ndcg}, preds


def cmd_train_select(cfg: ExperimentConfig) -> dict:
    table, folds = _load_selection(cfg)
    out = Path(cfg.out_dir)
    save_config(cfg, out)
    model = build_model(cfg.model, table.d, cfg.rng("init"))
    sel = dataclasses.replace(cfg.selection, seed=int(cfg.rng("sampling").integers(2 ** 31)))
    res = subsel.train_maxmin(model, table, folds["train"], folds["dev"], sel)
    res.model.save(out / "checkpoint.json")
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loglik", "dev_mjc"])
        for r in res.metrics:
            w.writerow([r["epoch"], r["loglik"], r["dev_mjc"]])
    scores, preds = _selection_scores(res.model, table, folds["test"])
    subsel.write_predictions(out / "predictions.txt", range(len(preds)), preds)
    report = {**scores, "best_epoch": res.best_epoch, "diverged": res.diverged, "seed": cfg.seed,
              "config_hash": cfg.digest(), "random_mjc": float(np.mean(
                  [evalkit.random_mean_jaccard(len(i.V), len(i.S_star)) for i in folds["test"]]))}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if res.diverged:
        raise fitval.Divergence("selection training diverged")
    return report


# --- evaluation ---------------------------------------------------------------

def _load_checkpoint(path) -> SetFnModel:
    try:
        return SetFnModel.load(path)
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot load checkpoint {path}: {e}") from e


def cmd_evaluate(cfg: ExperimentConfig, checkpoint: str) -> dict:
    model = _load_checkpoint(checkpoint)
    if cfg.data.task == "regression":
        table, ds = _load_regression(cfg)
        _check_dim(cfg, table, model)
        result = {k: fitval.batch_rmse(model, fitval.Batch.from_instances(table, v))
                  for k, v in ds.folds().items() if v}
        result = {f"{k}_rmse": v for k, v in result.items()}
    else:
        table, folds = _load_selection(cfg)
        _check_dim(cfg, table, model)
        result, _ = _selection_scores(model, table, folds["test"])
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "evaluation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def cmd_audit(cfg: ExperimentConfig, checkpoint: str, prop: str, samples: int) -> dict:
    model = _load_checkpoint(checkpoint)
    table = _load_table(cfg)
    _check_dim(cfg, table, model)
    if prop == "alpha" and model.kind != "alpha":
        raise ValidationError(f"alpha audit needs an alpha model, checkpoint is {model.kind}")
    reports = {}
    if prop in ("submodular", "alpha", "all"):
        alpha = model.config.alpha if model.kind == "alpha" else 1.0
        k = model.config.k if model.kind == "alpha" else None
        for key, r in evalkit.audit_submodular(model, table, samples, alpha, k, seed=cfg.seed).items():
            if key == "monotone" and model.kind == "nonmonotone":
                continue
            reports[key] = r
    if prop in ("concave", "all"):
        reports.update(evalkit.shape_audits(model))
    if not reports:
        raise ValidationError(f"unknown audit {prop!r}")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evalkit.write_reports(out / "audit.json", reports)
    return {k: r.to_json() for k, r in reports.items()}


def cmd_report(run_dirs: list[str], out_path: str) -> list[dict]:
    """Collect report.json files into one CSV (one row per run)."""
    rows = []
    for d in run_dirs:
        p = Path(d) / "report.json"
        if not p.exists():
            raise ValidationError(f"missing {p}")
        rows.append({"run": d, **json.loads(p.read_text())})
    cols = sorted({k for r in rows for k in r} - {"run"})
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", *cols])
        for r in rows:
            w.writerow([r["run"], *[r.get(c, "") for c in cols]])
    return rows


# --- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="submodnet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. model.depth=1")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--data", help="dataset directory (defaults to the output directory)")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("gen", help="generate a synthetic dataset"))
    sp = sub.add_parser("train-regression", help="fit a set function to (set, value) pairs")
    common(sp)
    sp.add_argument("--resume", help="last_state.json from an earlier run")
    sp = sub.add_parser("train-select", help="learn from (universe, subset) pairs")
    common(sp)
    sp.add_argument("--tau", type=float)
    sp.add_argument("--sinkhorn-t", type=float)
    sp.add_argument("--sinkhorn-iters", type=int)
    sp.add_argument("--inner-steps", type=int)
    sp.add_argument("--outer-steps", type=int)
    for name in ("evaluate", "audit"):
        sp = sub.add_parser(name)
        common(sp)
        sp.add_argument("--checkpoint", required=True)
        if name == "audit":
            sp.add_argument("--prop", default="all", choices=["all", "submodular", "alpha", "concave"])
            sp.add_argument("--samples", type=int, default=10_000)
    sp = sub.add_parser("report", help="merge report.json files into a CSV")
    sp.add_argument("runs", nargs="+")
    sp.add_argument("--csv", default="report.csv")
    return p


def _flag_overrides(args) -> list[str]:
    out = list(getattr(args, "set", []) or [])
    if getattr(args, "seed", None) is not None:
        out.append(f"seed={args.seed}")
    if getattr(args, "out", None):
        out.append(f"out_dir={args.out}")
    if getattr(args, "data", None):
        out.append(f"data_dir={args.data}")
    for flag, key in (("tau", "tau"), ("sinkhorn_t", "sinkhorn_t"), ("sinkhorn_iters", "sinkhorn_iters"),
                      ("inner_steps", "inner_steps"), ("outer_steps", "outer_steps")):
        if getattr(args, flag, None) is not None:
            out.append(f"selection.{key}={getattr(args, flag)}")
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.cmd == "report":
            cmd_report(args.runs, args.csv)
            return 0
        cfg = load_config(args.config, _flag_overrides(args))
        if args.cmd == "gen":
            result = cmd_gen(cfg)
        elif args.cmd == "train-regression":
            result = cmd_train_regression(cfg, args.resume)
        elif args.cmd == "train-select":
            result = cmd_train_select(cfg)
        elif args.cmd == "evaluate":
            result = cmd_evaluate(cfg, args.checkpoint)
        else:
            result = cmd_audit(cfg, args.checkpoint, args.prop, args.samples)
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
        return 0
    except fitval.Divergence as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 3
    except (ValidationError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
