"""Command-line interface: ``latentjm <subcommand> ...``.

Exit codes: 0 success, 2 invalid input or configuration, 3 fit failure.

A JSON config may hold ``model`` (``k``, ``basis``, optional ``p``), ``fit``
(any :class:`FitConfig` field) and ``seed``; command-line flags override it.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bootstrap import bootstrap_inference
from .data import ModelSpec, load_dataset, reported, write_dataset
from .em import FitConfig, FitResult, fit
from .errors import FitError, LatentJMError
from .predict import PredictionQuery, conditional_event_probability, prediction_error
from .quadrature import gauss_hermite
from .simulation import SCENARIOS, Scenario, paper_scenario, replicate_study, simulate
from .spline import BasisSpec, build_basis

log = logging.getLogger("latentjm")

EXIT_OK, EXIT_INVALID, EXIT_FIT = 0, 2, 3


class UsageError(Exception):
    pass


# --- configuration -------------------------------------------------------------

def _load_config(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no such file: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from None


def _fit_config(cfg: dict, args) -> FitConfig:
    d = dict(cfg.get("fit", {}))
    if getattr(args, "quad_nodes", None) is not None:
        d["quad_nodes"] = args.quad_nodes
    if getattr(args, "max_iters", None) is not None:
        d["max_iters"] = args.max_iters
    if getattr(args, "tol", None) is not None:
        d["loglik_rel_tol"] = args.tol
    return FitConfig.from_dict(d)


def _sniff(long_path, surv_path) -> tuple:
    """Number of biomarkers, covariate counts per biomarker and survival covariates."""
    for p in (long_path, surv_path):
        if not Path(p).exists():
            raise FileNotFoundError(f"no such file: {p}")
    with open(surv_path, newline="") as fh:
        header = next(csv.reader(fh), [])
    r = sum(1 for h in header if h.strip().startswith("z_"))
    J, p = 1, {}
    with open(long_path, newline="") as fh:
        reader = csv.DictReader(fh)
        xcols = [c for c in (reader.fieldnames or []) if c.strip().startswith("x_")]
        for row in reader:
            try:
                j = int(float(row["biomarker_index"]))
            except (KeyError, TypeError, ValueError):
                continue
            J = max(J, j)
            if j not in p:
                p[j] = sum(1 for c in xcols if (row.get(c) or "").strip() != "")
    return J, tuple(p.get(j, 0) for j in range(1, J + 1)), r


def _time_range(long_path, surv_path) -> float:
    hi = 0.0
    with open(surv_path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                hi = max(hi, float(row["event_time"]))
            except (KeyError, TypeError, ValueError):
                pass
    return hi


def _basis_spec(cfg: dict, args, long_path=None, surv_path=None) -> BasisSpec:
    b = dict(cfg.get("model", {}).get("basis", {}))
    knots = getattr(args, "knots", None)
    if isinstance(knots, int):
        b.pop("interior_knots", None)
        b["n_knots"] = knots
    if getattr(args, "time_transform", None):
        b["time_transform"] = args.time_transform
    if "domain" not in b:
        if long_path is None:
            raise UsageError("basis domain missing from the config")
        b["domain"] = [0.0, _time_range(long_path, surv_path)]
    b.setdefault("n_knots", 8)
    return BasisSpec.from_dict(b)


def _model_spec(cfg: dict, args, long_path, surv_path, k=None, knots=None) -> ModelSpec:
    J, p, r = _sniff(long_path, surv_path)
    m = cfg.get("model", {})
    if "p" in m:
        p = tuple(m["p"])
    J = int(m.get("J", J))
    if len(p) != J:
        p = tuple(p[:J]) + (0,) * max(0, J - len(p))
    rank = k if k is not None else (args.rank if getattr(args, "rank", None) else m.get("k", 2))
    ns = argparse.Namespace(**vars(args))
    if knots is not None:
        ns.knots = knots
    return ModelSpec(J=J, k=int(rank), basis=_basis_spec(cfg, ns, long_path, surv_path),
                     p=p, r=int(m.get("r", r)))


def _seed(cfg: dict, args) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    return int(cfg.get("seed", 0))


def _write_rows(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)


def _summary_line(res: FitResult, knots, rank) -> dict:
    return {"knots": knots, "rank": rank, "loglik": res.loglik, "n_params": res.n_params,
            "AIC": res.aic,
            "pc_proportions": ";".join(f"{v:.4f}" for v in res.pc_variance_proportions),
            "converged": res.converged}


def _print_summary(res: FitResult):
    print(f"loglik {res.loglik:.4f}  AIC {res.aic:.4f}  parameters {res.n_params}")
    print("PC variance proportions " + " ".join(f"{v:.4f}" for v in res.pc_variance_proportions))
    print(f"converged {res.converged} ({res.reason}) after {res.n_iters} iterations")


def _write_curves(res: FitResult, path, n_points: int = 101):
    basis = build_basis(res.spec.basis)
    lo, hi = res.spec.basis.domain
    t = np.linspace(lo, hi, n_points)
    B = basis(t)
    mean, pcs = B @ res.params.theta, B @ res.params.Theta
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "mean"] + [f"pc_{w_ + 1}" for w_ in range(pcs.shape[1])])
        for u in range(t.size):
            w.writerow([repr(float(v)) for v in (t[u], mean[u], *pcs[u])])


# --- subcommands -----------------------------------------------------------------

def cmd_fit(args) -> int:
    cfg = _load_config(args.config)
    spec = _model_spec(cfg, args, args.longitudinal, args.survival)
    subjects = load_dataset(args.longitudinal, args.survival, spec)
    res = fit(subjects, spec, _fit_config(cfg, args))
    out = Path(args.out)
    res.save(out)
    res.write_hazard_csv(out.with_name(out.stem + "_hazard.csv"))
    _write_curves(res, out.with_name(out.stem + "_curves.csv"))
    _print_summary(res)
    return EXIT_OK


def cmd_scan(args) -> int:
    cfg = _load_config(args.config)
    base = _model_spec(cfg, args, args.longitudinal, args.survival)
    knots = _int_list(args.knots_list) if args.knots_list else [len(base.basis.interior_knots)]
    ranks = _int_list(args.ranks) if args.ranks else [base.k]
    fc = _fit_config(cfg, args)
    rows = []
    for nk in knots:
        for k in ranks:
            spec = _model_spec(cfg, args, args.longitudinal, args.survival, k=k, knots=nk)
            try:
                subjects = load_dataset(args.longitudinal, args.survival, spec)
                res = fit(subjects, spec, fc)
                rows.append(_summary_line(res, nk, k))
            except (LatentJMError, ValueError) as exc:
                log.warning("configuration knots=%s rank=%s failed: %s", nk, k, exc)
                rows.append({"knots": nk, "rank": k, "loglik": "", "n_params": "", "AIC": "",
                             "pc_proportions": "", "converged": f"failed: {exc}"})
    good = [r for r in rows if r["AIC"] != ""]
    best = min(good, key=lambda r: r["AIC"]) if good else None
    for r in rows:
        r["best"] = "*" if r is best else ""
    fields = ["knots", "rank", "loglik", "n_params", "AIC", "pc_proportions", "converged", "best"]
    if args.out:
        _write_rows(args.out, fields, rows)
    print(f"{'knots':>5} {'rank':>4} {'loglik':>12} {'params':>6} {'AIC':>12}  pc")
    for r in rows:
        if r["AIC"] == "":
            print(f"{r['knots']:>5} {r['rank']:>4} {r['converged']}")
            continue
        print(f"{r['knots']:>5} {r['rank']:>4} {r['loglik']:12.2f} {r['n_params']:>6} "
              f"{r['AIC']:12.2f}  {r['pc_proportions']} {r['best']}")
    return EXIT_OK if good else EXIT_FIT


def _scenario(args) -> Scenario:
    if args.scenario_file:
        sc = Scenario.load(args.scenario_file)
    else:
        sc = paper_scenario(args.scenario)
    if args.n is not None:
        sc = Scenario.from_dict({**sc.to_dict(), "n": args.n})
    return sc


def cmd_simulate(args) -> int:
    cfg = _load_config(args.config)
    sc = _scenario(args)
    seed = _seed(cfg, args)
    subjects = simulate(sc, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(subjects, out / "longitudinal.csv", out / "survival.csv")
    truth = {"seed": seed, "scenario": sc.to_dict(), "truth": sc.truth()}
    (out / "truth.json").write_text(json.dumps(truth, indent=2))
    rate = np.mean([s.event_indicator for s in subjects])
    visits = np.median([s.n_visits for s in subjects])
    print(f"{len(subjects)} subjects, event rate {rate:.3f}, median visits {visits:g}")
    return EXIT_OK


def cmd_replicate(args) -> int:
    cfg = _load_config(args.config)
    sc = _scenario(args)
    basis = None
    if args.knots is not None or args.time_transform:
        basis = _basis_spec({"model": {"basis": sc.basis.to_dict()}}, args)
    table = replicate_study(sc, args.reps, _seed(cfg, args), _fit_config(cfg, args),
                            k=args.rank, basis_spec=basis)
    table.write_csv(args.out)
    print(table.format())
    return EXIT_OK if table.n_failed < args.reps else EXIT_FIT


def _load_fit(path) -> FitResult:
    if not Path(path).exists():
        raise FileNotFoundError(f"no such file: {path}")
    return FitResult.load(path)


def cmd_predict(args) -> int:
    res = _load_fit(args.params)
    basis = build_basis(res.spec.basis)
    rule = gauss_hermite(args.quad_nodes or res.config.quad_nodes)
    subjects = {s.id: s for s in load_dataset(args.longitudinal, args.survival, res.spec)}
    if not Path(args.queries).exists():
        raise FileNotFoundError(f"no such file: {args.queries}")
    rows = []
    with open(args.queries, newline="") as fh:
        for n, row in enumerate(csv.DictReader(fh), start=2):
            sid = (row.get("id") or "").strip()
            if sid not in subjects:
                raise UsageError(f"{args.queries} row {n}: unknown id {sid!r}")
            try:
                s, t = float(row["s"]), float(row["t"])
            except (KeyError, TypeError, ValueError):
                raise UsageError(f"{args.queries} row {n}: s and t must be numeric") from None
            q = PredictionQuery.from_subject(subjects[sid], s, t)
            prob = conditional_event_probability(q, res.params, basis, rule)
            rows.append({"id": sid, "s": s, "t": t, "probability": prob})
    _write_rows(args.out, ["id", "s", "t", "probability"], rows)
    print(f"{len(rows)} predictions written to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    res = _load_fit(args.params)
    basis = build_basis(res.spec.basis)
    rule = gauss_hermite(args.quad_nodes or res.config.quad_nodes)
    subjects = load_dataset(args.longitudinal, args.survival, res.spec)
    err, n_risk = prediction_error(subjects, res.params, basis, rule, args.s, args.t,
                                   n_threads=args.threads or 1)
    _write_rows(args.out, ["s", "t", "n_risk", "err"],
                [{"s": args.s, "t": args.t, "n_risk": n_risk, "err": err}])
    print(f"err({args.s} + {args.t}) = {err:.6f} over {n_risk} subjects at risk")
    return EXIT_OK


def cmd_bootstrap(args) -> int:
    cfg = _load_config(args.config)
    spec = _model_spec(cfg, args, args.longitudinal, args.survival)
    subjects = load_dataset(args.longitudinal, args.survival, spec)
    result = bootstrap_inference(subjects, spec, _fit_config(cfg, args), args.B,
                                 _seed(cfg, args))
    result.write_csv(args.out)
    print(f"{args.B - result.n_failed} of {args.B} replicates succeeded")
    for r in result.rows():
        p = "" if np.isnan(r["p_value"]) else f"p={r['p_value']:.4g}"
        print(f"{r['parameter']:>10} {r['estimate']:10.4f} ({r['ci_lower']:.4f}, "
              f"{r['ci_upper']:.4f}) {p}")
    for d in result.diagnostics:
        print(f"warning: {d}", file=sys.stderr)
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated list of integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser, knots=True):
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker threads (1 = serial)")
    p.add_argument("--quad-nodes", type=int, help="Gauss-Hermite nodes per dimension")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float, help="relative log-likelihood tolerance")
    if knots:
        p.add_argument("--knots", type=int, help="number of interior knots")
    p.add_argument("--rank", type=int, help="number of principal components k")
    p.add_argument("--time-transform", choices=["identity", "log1p"])


def _data_args(p):
    p.add_argument("--longitudinal", required=True, help="long-format biomarker CSV")
    p.add_argument("--survival", required=True, help="survival CSV")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="latentjm", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the joint model")
    _data_args(p)
    _common(p)
    p.add_argument("--out", required=True, help="result JSON; hazard and curve CSVs go alongside")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("scan", help="fit over knot counts and ranks, tabulating AIC")
    _data_args(p)
    _common(p, knots=False)
    p.add_argument("--knots", dest="knots_list", help="comma-separated interior knot counts")
    p.add_argument("--ranks", help="comma-separated ranks")
    p.add_argument("--out", help="CSV table")
    p.set_defaults(func=cmd_scan, knots=None)

    for name, func, helptext in (("simulate", cmd_simulate, "simulate one dataset"),
                                 ("replicate", cmd_replicate, "simulation bias study")):
        p = sub.add_parser(name, help=helptext)
        g = p.add_mutually_exclusive_group()
        g.add_argument("--scenario", choices=SCENARIOS, default="model1")
        g.add_argument("--scenario-file", help="scenario JSON")
        p.add_argument("--n", type=int, help="override the number of subjects")
        _common(p)
        if name == "simulate":
            p.add_argument("--out", required=True, help="output directory")
        else:
            p.add_argument("--reps", type=int, default=10)
            p.add_argument("--out", required=True, help="bias table CSV")
        p.set_defaults(func=func)

    p = sub.add_parser("predict", help="conditional event probabilities")
    _data_args(p)
    p.add_argument("--params", required=True, help="fit result JSON")
    p.add_argument("--queries", required=True, help="CSV with columns id, s, t")
    p.add_argument("--quad-nodes", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="prediction error over the risk set")
    _data_args(p)
    p.add_argument("--params", required=True, help="fit result JSON")
    p.add_argument("--s", type=float, required=True, help="landmark time")
    p.add_argument("--t", type=float, required=True, help="prediction window")
    p.add_argument("--quad-nodes", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bootstrap", help="bootstrap standard errors and intervals")
    _data_args(p)
    _common(p)
    p.add_argument("--B", type=int, default=100, help="number of resamples")
    p.add_argument("--out", required=True, help="CSV table")
    p.set_defaults(func=cmd_bootstrap)
    return ap


def _setup_logging():
    level = os.environ.get("LATENTJM_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FitError as exc:
        print(f"fit failed: {exc}", file=sys.stderr)
        return EXIT_FIT
    except (FileNotFoundError, UsageError, LatentJMError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
