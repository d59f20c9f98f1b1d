"""Command-line entry point.

Commands: simulate | fit | predict | evaluate | bootstrap | mc-study.
Every command is deterministic given its inputs, flags and seed, writes
its outputs atomically (no partial files on failure), and never changes
results with the worker count.  Exit codes: 0 success, 1 usage, 2 data
error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile

import numpy as np
import pandas as pd
import yaml

from . import artifact as artifact_mod
from .data import Dataset, History, export_dataset, load_dataset
from .errors import DataError, NumericalError
from .estimation import bootstrap as run_bootstrap
from .estimation import fit_crbjm, parameter_vector
from .evaluation import kfold_cv
from .longitudinal import LongitudinalSpec
from .prediction import PredictionContext
from .simulation import GeneratorConfig, run_mc_study, simulate_cohort


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


class _AtomicOutputs:
    """Stage outputs in temp files; commit them all or none."""

    def __init__(self):
        self._staged = []

    def path_for(self, final_path: str) -> str:
        d = os.path.dirname(os.path.abspath(final_path)) or "."
        os.makedirs(d, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(final_path))
        os.close(fd)
        self._staged.append((tmp, final_path))
        return tmp

    def commit(self):
        for tmp, final in self._staged:
            os.replace(tmp, final)
        self._staged = []

    def abort(self):
        for tmp, _ in self._staged:
            try:
                os.unlink(tmp)
            except OSError:
                pass
        self._staged = []


def _load_yaml(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        loc = f" at line {mark.line + 1}" if mark is not None else ""
        raise DataError(f"config parse error{loc}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise DataError("config must be a mapping")
    return data


def _spec_from_config(dataset: Dataset, cfg: dict) -> LongitudinalSpec:
    return LongitudinalSpec.for_dataset(
        dataset,
        trajectory_degree=int(cfg.get("trajectory_degree", 1)),
        phi=cfg.get("phi", "identity"),
        random_effects=cfg.get("random_effects", "intercept"),
        use_type=bool(cfg.get("use_type", True)),
        use_time=bool(cfg.get("use_time", True)),
        use_time_type=bool(cfg.get("use_time_type", True)),
    )


def _load_data(args, cfg: dict) -> Dataset:
    schema = dict(cfg.get("schema") or {})
    if cfg.get("tau_max") is not None:
        schema["tau_max"] = float(cfg["tau_max"])
    return load_dataset(args.subjects, args.longitudinal, schema=schema)


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg_dict = _load_yaml(args.config)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    if args.n is not None:
        cfg_dict["n"] = args.n
    try:
        config = GeneratorConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad generator config: {exc}") from exc
    dataset, truth = simulate_cohort(config)

    out = _AtomicOutputs()
    try:
        subj_path = out.path_for(os.path.join(args.out_dir, "subjects.csv"))
        long_path = out.path_for(os.path.join(args.out_dir, "longitudinal.csv"))
        truth_path = out.path_for(os.path.join(args.out_dir, "truth.csv"))
        export_dataset(dataset, subj_path, long_path)
        truth_rows = pd.DataFrame({
            "id": [s.id for s in dataset.subjects],
            "true_time": truth.true_times,
            "true_type": truth.true_types,
            "is_lts": truth.is_lts.astype(int),
        })
        for m in range(truth.random_effects.shape[1]):
            truth_rows[f"b{m + 1}"] = truth.random_effects[:, m]
        truth_rows.to_csv(truth_path, index=False)
        out.commit()
    except BaseException:
        out.abort()
        raise
    events = np.array([s.event_type for s in dataset.subjects])
    print(f"simulated n={dataset.n} subjects, J={dataset.n_event_types}, "
          f"M={dataset.n_biomarkers}, tau_max={dataset.tau_max:.4g}")
    print(f"censoring fraction: {np.mean(events == 0):.3f} "
          f"(target {config.target_censoring})")
    if config.variant == "tp":
        times = np.array([s.observed_time for s in dataset.subjects])
        admin = np.mean((events == 0) & (times >= config.tau_max - 1e-9))
        print(f"administrative censoring at tau_max: {admin:.3f} "
              f"(target {config.target_admin_censoring})")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    cfg = _load_yaml(args.config) if args.config else {}
    dataset = _load_data(args, cfg)
    spec = _spec_from_config(dataset, cfg)
    variant = args.variant or cfg.get("variant", "ex")
    method = args.method or cfg.get("method", "em")
    model = fit_crbjm(
        dataset,
        spec=spec,
        variant=variant,
        method=method,
        time_model=cfg.get("time_model", "weibull"),
        width=float(cfg.get("quadrature_width", 0.25)),
        t_end_ex=float(cfg.get("t_end_ex", 100.0)),
        tol=float(cfg.get("em_tol", 1e-4)),
        max_iter=int(cfg.get("em_max_iter", 200)),
    )
    from dataclasses import replace

    provenance = dict(model.provenance)
    provenance.update({
        "subjects_sha256": artifact_mod.file_sha256(args.subjects),
        "longitudinal_sha256": artifact_mod.file_sha256(args.longitudinal),
        "seed": args.seed,
    })
    model = replace(model, provenance=provenance)

    out = _AtomicOutputs()
    try:
        art_path = out.path_for(args.out)
        artifact_mod.save_artifact(model, art_path)
        log_path = out.path_for(args.out + ".log")
        with open(log_path, "w", encoding="utf-8") as f:
            f.write(f"method={provenance['method']} iterations={provenance['iterations']} "
                    f"final_change={provenance['final_change']:.3e}\n")
        out.commit()
    except BaseException:
        out.abort()
        raise
    print(f"fit complete: {provenance['method']}, iterations={provenance['iterations']}")
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def _history_for(covariates, meas_by_biomarker, names, s):
    meas = []
    for name in names:
        t, v = meas_by_biomarker.get(name, (np.zeros(0), np.zeros(0)))
        keep = t <= s + 1e-12
        meas.append((t[keep], v[keep]))
    return History(covariates=covariates, prediction_time=float(s), measurements=tuple(meas))


def _predict_one(model, covariates, meas, query):
    sid, s = query["id"], float(query["s"])
    hist = _history_for(covariates, meas, model.biomarker_names, s)
    rows = []
    if query["kind"] == "risk":
        delta = float(query["delta"])
        ctx = PredictionContext(model, hist)
        rp = ctx.risk(delta)
        for j in range(1, model.spec.n_event_types + 1):
            rows.append({"id": sid, "s": s, "delta": delta, "type": str(j),
                         "probability": rp.risks[j - 1], "error": ""})
        rows.append({"id": sid, "s": s, "delta": delta, "type": "event_free",
                     "probability": rp.remainder, "error": ""})
    else:
        t = float(query["t"])
        m = list(model.biomarker_names).index(str(query["biomarker"]))
        fc = PredictionContext(model, hist).forecast(m, t)
        row = {"id": sid, "s": s, "t": t, "biomarker": query["biomarker"],
               "mean": fc.mean, "mode": fc.mode, "error": ""}
        for p, v in fc.quantiles.items():
            row[f"q{int(round(p * 100))}"] = v
        rows.append(row)
    return rows


def _predict_task(payload):
    model, covariates, meas, query = payload
    try:
        return _predict_one(model, covariates, meas, query)
    except Exception as exc:
        base = {"id": query["id"], "s": query["s"], "error": type(exc).__name__}
        if query["kind"] == "risk":
            base.update({"delta": query.get("delta"), "type": "", "probability": np.nan})
        else:
            base.update({"t": query.get("t"), "biomarker": query.get("biomarker"),
                         "mean": np.nan, "mode": np.nan})
        return [base]


def cmd_predict(args) -> int:
    model = artifact_mod.load_artifact(args.artifact)
    baseline = pd.read_csv(args.baseline)
    if "id" not in baseline.columns:
        raise DataError("baseline file needs an id column")
    missing = [c for c in model.covariate_names if c not in baseline.columns]
    if missing:
        raise DataError(f"baseline file missing covariate columns {missing}")
    baseline["id"] = baseline["id"].astype(str)
    cov_map = {r["id"]: np.array([float(r[c]) for c in model.covariate_names])
               for _, r in baseline.iterrows()}

    hist = pd.read_csv(args.histories)
    for col in ("id", "biomarker", "time", "value"):
        if col not in hist.columns:
            raise DataError(f"histories file missing column {col!r}")
    hist["id"] = hist["id"].astype(str)
    hist["biomarker"] = hist["biomarker"].astype(str)
    meas_map: dict = {}
    for sid, chunk in hist.groupby("id"):
        per = {}
        for b, bc in chunk.groupby("biomarker"):
            bc = bc.sort_values("time", kind="mergesort")
            per[b] = (bc["time"].to_numpy(dtype=float), bc["value"].to_numpy(dtype=float))
        meas_map[sid] = per

    queries = pd.read_csv(args.queries)
    if "id" not in queries.columns or "s" not in queries.columns:
        raise DataError("queries file needs id and s columns")
    queries["id"] = queries["id"].astype(str)

    tasks = []
    for _, q in queries.iterrows():
        sid = q["id"]
        if sid not in cov_map:
            raise DataError(f"query subject {sid} missing from baseline file")
        is_risk = "delta" in queries.columns and pd.notna(q.get("delta")) and str(q.get("delta")) != ""
        query = {"id": sid, "s": float(q["s"]),
                 "kind": "risk" if is_risk else "forecast"}
        if is_risk:
            query["delta"] = float(q["delta"])
        else:
            if pd.isna(q.get("t")) or pd.isna(q.get("biomarker")):
                query.update({"kind": "forecast", "t": np.nan, "biomarker": ""})
            else:
                query["t"] = float(q["t"])
                query["biomarker"] = str(q["biomarker"])
        tasks.append((model, cov_map[sid], meas_map.get(sid, {}), query))

    if args.workers > 1 and len(tasks) > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(args.workers) as pool:
            results = pool.map(_predict_task, tasks)
    else:
        results = [_predict_task(t) for t in tasks]
    rows = [r for chunk in results for r in chunk]

    risk_cols = ["id", "s", "delta", "type", "probability", "error"]
    fc_cols = ["id", "s", "t", "biomarker", "mean", "mode"] + \
        [f"q{q}" for q in range(10, 100, 10)] + ["error"]
    all_cols = list(dict.fromkeys(risk_cols + fc_cols))
    table = pd.DataFrame(rows, columns=all_cols)

    out = _AtomicOutputs()
    try:
        table.to_csv(out.path_for(args.out), index=False)
        out.commit()
    except BaseException:
        out.abort()
        raise
    n_err = int((table["error"] != "").sum())
    print(f"predicted {len(queries)} queries -> {len(table)} rows ({n_err} row errors)")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    cfg = _load_yaml(args.config) if args.config else {}
    dataset = _load_data(args, cfg)
    spec = _spec_from_config(dataset, cfg)
    landmarks = [float(x) for x in args.landmarks.split(",") if x.strip()]
    report, details = kfold_cv(
        dataset,
        spec=spec,
        k=args.folds,
        landmarks=landmarks,
        delta=args.delta,
        seed=args.seed,
        variant=args.variant or cfg.get("variant", "ex"),
        method=args.method or cfg.get("method", "em"),
        time_model=cfg.get("time_model", "weibull"),
        width=float(cfg.get("quadrature_width", 0.25)),
        t_end_ex=float(cfg.get("t_end_ex", 100.0)),
        tol=float(cfg.get("em_tol", 1e-4)),
        max_iter=int(cfg.get("em_max_iter", 200)),
    )
    out = _AtomicOutputs()
    try:
        report.to_csv(out.path_for(args.out), index=False)
        machine = {
            "k": details["k"], "landmarks": details["landmarks"], "delta": details["delta"],
            "fold_failures": details["fold_failures"], "fit_logs": details["fit_logs"],
            "rows": report.to_dict(orient="records"),
        }
        with open(out.path_for(os.path.splitext(args.out)[0] + ".json"), "w",
                  encoding="utf-8") as f:
            json.dump(machine, f, indent=1, sort_keys=True, default=float)
            f.write("\n")
        if not args.no_figures:
            from .figures import evaluate_figure

            evaluate_figure(report, out.path_for(os.path.splitext(args.out)[0] + ".png"))
        out.commit()
    except BaseException:
        out.abort()
        raise
    for rec in details["fit_logs"]:
        print(f"fold {rec['fold']}: method={rec['method']} iterations={rec['iterations']}")
    if details["fold_failures"]:
        print(f"fold failures: {details['fold_failures']}")
    print(report.to_string(index=False))
    return 0


# ---------------------------------------------------------------------------
# bootstrap
# ---------------------------------------------------------------------------

def cmd_bootstrap(args) -> int:
    cfg = _load_yaml(args.config) if args.config else {}
    dataset = _load_data(args, cfg)
    spec = _spec_from_config(dataset, cfg)
    if args.reps < 10:
        print(f"warning: reps={args.reps} is small; bootstrap SDs will be unstable",
              file=sys.stderr)
    names, sds, failures = run_bootstrap(
        dataset,
        spec=spec,
        reps=args.reps,
        seed=args.seed,
        workers=args.workers,
        variant=args.variant or cfg.get("variant", "ex"),
        method=args.method or cfg.get("method", "em"),
        time_model=cfg.get("time_model", "weibull"),
        width=float(cfg.get("quadrature_width", 0.25)),
        tol=float(cfg.get("em_tol", 1e-4)),
        max_iter=int(cfg.get("em_max_iter", 200)),
    )
    table = pd.DataFrame({"parameter": names, "bootstrap_sd": sds})
    out = _AtomicOutputs()
    try:
        table.to_csv(out.path_for(args.out), index=False)
        out.commit()
    except BaseException:
        out.abort()
        raise
    print(f"bootstrap reps={args.reps}, failures={failures}")
    return 0


# ---------------------------------------------------------------------------
# mc-study
# ---------------------------------------------------------------------------

def cmd_mc_study(args) -> int:
    cfg_dict = _load_yaml(args.config)
    if args.seed is not None:
        cfg_dict["seed"] = args.seed
    n_values = [int(x) for x in args.n.split(",")] if args.n else [int(cfg_dict.get("n", 300))]
    tables = []
    summaries = {}
    for n in n_values:
        cfg_dict["n"] = n
        config = GeneratorConfig.from_dict(cfg_dict)
        table, summary = run_mc_study(config, n_datasets=args.n_datasets,
                                      workers=args.workers)
        table.insert(0, "n", n)
        tables.append(table)
        summaries[str(n)] = summary
    combined = pd.concat(tables, ignore_index=True)
    out = _AtomicOutputs()
    try:
        combined.to_csv(out.path_for(args.out), index=False)
        with open(out.path_for(os.path.splitext(args.out)[0] + "_summary.json"), "w",
                  encoding="utf-8") as f:
            json.dump(summaries, f, indent=1, sort_keys=True, default=str)
            f.write("\n")
        if not args.no_figures:
            from .figures import mc_study_figure

            mc_study_figure(combined, out.path_for(os.path.splitext(args.out)[0] + ".png"))
        out.commit()
    except BaseException:
        out.abort()
        raise
    for n, summary in summaries.items():
        print(f"n={n}: converged {summary['n_converged']}/{summary['n_datasets']}, "
              f"EM convergence fraction {summary['em_convergence_fraction']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="crbjm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic cohort")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n", type=int, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a model and write the artifact")
    p.add_argument("--subjects", required=True)
    p.add_argument("--longitudinal", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--variant", choices=["ex", "tp"], default=None)
    p.add_argument("--method", choices=["cca", "em"], default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="batch predictions from an artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--histories", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="cross-validated accuracy report")
    p.add_argument("--subjects", required=True)
    p.add_argument("--longitudinal", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--landmarks", default="1,2,3,4")
    p.add_argument("--delta", type=float, default=3.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=["ex", "tp"], default=None)
    p.add_argument("--method", choices=["cca", "em"], default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bootstrap", help="bootstrap parameter SDs")
    p.add_argument("--subjects", required=True)
    p.add_argument("--longitudinal", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", choices=["ex", "tp"], default=None)
    p.add_argument("--method", choices=["cca", "em"], default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bootstrap)

    p = sub.add_parser("mc-study", help="bias/efficiency simulation study")
    p.add_argument("--config", required=True)
    p.add_argument("--n-datasets", type=int, default=300)
    p.add_argument("--n", default=None, help="comma-separated sample sizes")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_mc_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
