"""Command-line entry point: simulate, fit, estimate-lambda, js-demo, show-fit."""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .correlation_ratio import (
    CorrelationRatioMatrix,
    CVContext,
    HistoricalData,
    OmegaInputs,
    build_omega_densities,
    estimate_lambda_bias_corrected,
    estimate_lambda_plugin,
    estimate_omega,
)
from .cr_tll_engine import (
    TransferFit,
    Weights,
    bootstrap_ci,
    closed_form_linear,
    estimate_weights,
    james_stein_demo,
    maximize_cr_tll,
)
from .glm_core import ExponentialFamily, GlmFit, SampleSet, TargetSample, fit_mle
from .semiparametric import ProfileSourceMap, fit_partially_linear
from .sim_bench import format_table, load_config, run_sweep
from .transfer_map import (
    LinearLinearMap,
    MomentEstimates,
    TransferMap,
    estimate_var_y_given_x,
    map_density_based,
    map_linear_linear,
    map_stein_normal,
    map_wu_ritt,
)

SCHEMA_VERSION = 1
DIGITS = 6


class CliError(Exception):
    """User-facing failure; the message is printed and the exit status is 2."""


# ---------------------------------------------------------------- CSV input


@dataclass(frozen=True)
class CsvTable:
    data: SampleSet | TargetSample
    dropped: int
    path: str


def _split_cols(spec: str | Sequence[str] | None) -> list[str]:
    if spec is None:
        return []
    if isinstance(spec, str):
        return [c.strip() for c in spec.split(",") if c.strip()]
    return [c for s in spec for c in _split_cols(s)]


def parse_csv(
    path: str | Path,
    response: str,
    x_columns: Sequence[str],
    z_columns: Sequence[str] | None = None,
    standardize: bool = False,
) -> CsvTable:
    """Read a headed CSV and bind columns by name.

    Rows with any empty cell among the bound columns are dropped and counted.
    With `standardize`, every covariate column is centred and scaled to unit
    sample standard deviation; the response is left alone.
    """
    path = str(path)
    z_columns = list(z_columns or [])
    wanted = [response, *x_columns, *z_columns]
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise CliError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CliError(f"{path}: file is empty") from None
        missing = [c for c in wanted if c not in header]
        if missing:
            raise CliError(f"{path}: missing column(s) {', '.join(missing)}")
        idx = [header.index(c) for c in wanted]
        rows, dropped = [], 0
        for line_no, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            cells = [rec[i].strip() if i < len(rec) else "" for i in idx]
            if any(c == "" for c in cells):
                dropped += 1
                continue
            vals = []
            for name, cell in zip(wanted, cells):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise CliError(f"{path}: row {line_no}, column {name}: not a number ({cell!r})") from None
            rows.append(vals)
    if not rows:
        raise CliError(f"{path}: no complete rows")
    arr = np.array(rows, dtype=float)
    y = arr[:, 0]
    cov = arr[:, 1:]
    if standardize and cov.shape[1]:
        sd = cov.std(axis=0, ddof=1) if cov.shape[0] > 1 else np.ones(cov.shape[1])
        if np.any(sd == 0):
            raise CliError(f"{path}: a constant column cannot be standardized")
        cov = (cov - cov.mean(axis=0)) / sd
    d1 = len(x_columns)
    if z_columns:
        data = TargetSample(cov[:, :d1], cov[:, d1:], y)
    else:
        data = SampleSet(cov[:, :d1].reshape(len(y), d1), y)
    return CsvTable(data, dropped, path)


# ---------------------------------------------------------------- output helpers


def fmt(x: float) -> str:
    return f"{x:.{DIGITS}g}"


def coefficient_table(doc: dict) -> str:
    """Printed coefficient table of a fit document. `show-fit` reproduces it from JSON."""
    labels = doc["labels"]
    fit = doc["fit"]
    est = fit["gamma"] + fit["theta"]
    se = fit.get("std_errors") or [math.nan] * len(est)
    boot = doc.get("bootstrap")
    mle = doc.get("mle")
    head = ["coef", "estimate", "std_err"]
    if boot:
        head += [f"lo{boot['level']:g}", f"hi{boot['level']:g}"]
    if mle:
        head += ["mle"]
    lines = [head]
    for k, lab in enumerate(labels):
        row = [lab, fmt(est[k]), fmt(se[k]) if k < len(se) else "nan"]
        if boot:
            row += [fmt(boot["lower"][k]), fmt(boot["upper"][k])]
        if mle:
            row += [fmt(mle["coefficients"][k])]
        lines.append(row)
    widths = [max(len(r[c]) for r in lines) for c in range(len(head))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in lines)


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# ---------------------------------------------------------------- simulate


def _resolve_config(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    stem = name if name.endswith(".json") else name + ".json"
    bundled = resources.files("artifact") / "configs" / stem
    if bundled.is_file():
        return Path(str(bundled))
    raise CliError(f"{name}: no such config file or bundled config")


def cmd_simulate(args: argparse.Namespace) -> int:
    path = _resolve_config(args.config)
    try:
        sweep = load_config(path)
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise CliError(f"{path}: invalid config: {exc}") from exc
    result = run_sweep(sweep, workers=args.workers, replications=args.replications, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_csv(out / "table.csv")
    result.write_json(out / "table.json")
    result.write_gnuplot(out / "series.dat")
    print(format_table(result, DIGITS))
    for v, tab in zip(result.values, result.tables):
        tag = tab.name if v is None else f"{tab.name} {sweep.parameter}={v}"
        bad = [k for k, u in tab.unstable.items() if u]
        fails = {k: s.n_failed for k, s in tab.stats.items() if s.n_failed}
        note = f" failures={fails}" if fails else ""
        note += f" UNSTABLE={bad}" if bad else ""
        print(f"# {tag}: {tab.wall_time:.2f}s{note}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------- fit


def _families(tags: Sequence[str] | None, n: int) -> list[ExponentialFamily]:
    tags = list(tags or ["gaussian"])
    if len(tags) == 1:
        tags = tags * n
    if len(tags) != n:
        raise CliError("give one --family-source per --source (or a single one for all)")
    return [ExponentialFamily.parse(t) for t in tags]


@dataclass
class FitInputs:
    sources: list[tuple[ExponentialFamily, SampleSet]]
    target: tuple[ExponentialFamily, TargetSample]
    hist_sources: list[SampleSet]
    hist_target: SampleSet | None
    dropped: dict[str, int]


def _load_fit_inputs(args: argparse.Namespace) -> FitInputs:
    xs = _split_cols(args.x)
    zs = _split_cols(args.z)
    if not xs:
        raise CliError("--x must name at least one covariate column")
    dropped = {}
    t_fam = ExponentialFamily.parse(args.family_target)
    t = parse_csv(args.target, args.response, xs, zs or None, args.standardize)
    if not zs:
        t = CsvTable(TargetSample(t.data.X, np.zeros((t.data.n, 0)), t.data.y), t.dropped, t.path)
    dropped[t.path] = t.dropped
    _validate(t_fam, t)
    sources, hist_sources = [], []
    hist_target = None
    if not args.no_sources:
        srcs = args.source or []
        if not srcs:
            raise CliError("--source is required unless --no-sources is given")
        fams = _families(args.family_source, len(srcs))
        for fam, p in zip(fams, srcs):
            s = parse_csv(p, args.response, xs, None, args.standardize)
            _validate(fam, s)
            dropped[s.path] = s.dropped
            sources.append((fam, s.data))
        hs = args.hist_source or []
        if hs:
            if len(hs) != len(srcs):
                raise CliError("give one --hist-source per --source")
            for fam, p in zip(fams, hs):
                h = parse_csv(p, args.response, xs, None, args.standardize)
                _validate(fam, h)
                dropped[h.path] = h.dropped
                hist_sources.append(h.data)
        if args.hist_target:
            h = parse_csv(args.hist_target, args.response, xs, None, args.standardize)
            _validate(t_fam, h)
            dropped[h.path] = h.dropped
            hist_target = h.data
    return FitInputs(sources, (t_fam, t.data), hist_sources, hist_target, dropped)


def _validate(family: ExponentialFamily, table: CsvTable) -> None:
    try:
        table.data.validate(family)
    except ValueError as exc:
        raise CliError(f"{table.path}: {exc}") from exc


def _lambda_for(
    inputs: FitInputs, j: int, method: str, map_form: str
) -> CorrelationRatioMatrix:
    if not inputs.hist_sources or inputs.hist_target is None:
        raise CliError("--hist-source and --hist-target are required to estimate the ratio")
    hist = HistoricalData(inputs.hist_sources[j], inputs.hist_target)
    if method == "plugin":
        return estimate_lambda_plugin(hist)
    return estimate_lambda_bias_corrected(hist, _cv_context(inputs, j, map_form))


def _cv_context(inputs: FitInputs, j: int, map_form: str) -> CVContext:
    s_fam, src = inputs.sources[j]
    t_fam, tgt = inputs.target
    weights = _weights([inputs.sources[j]], inputs.target)
    m_qq = tgt.X.T @ tgt.X / tgt.n
    m_qz = tgt.X.T @ tgt.Z / tgt.n

    def fit(diag: NDArray):
        lam = CorrelationRatioMatrix(diag)
        tmap = _build_map(map_form, lam, inputs, j)
        res = _fit([tmap], [(s_fam, src)], inputs.target, weights)
        return res.gamma, res.theta, tmap.evaluate(res.gamma, res.theta)

    return CVContext(fit, s_fam, t_fam, float(weights.w_sources[0]), weights.w_target,
                     z_projection=np.linalg.solve(m_qq, m_qz))


def _build_map(form: str, lam: CorrelationRatioMatrix, inputs: FitInputs, j: int) -> TransferMap:
    s_fam, src = inputs.sources[j]
    t_fam, tgt = inputs.target
    hist_src = inputs.hist_sources[j] if inputs.hist_sources else src
    if form == "linear":
        moments = MomentEstimates(
            hist_src.X.T @ hist_src.X / hist_src.n,
            tgt.X.T @ tgt.X / tgt.n,
            tgt.X.T @ tgt.Z / tgt.n,
        )
        return map_linear_linear(lam, moments)
    if form == "stein":
        v = estimate_var_y_given_x(s_fam, fit_mle(s_fam, src), source=src)
        return map_stein_normal(lam, v, t_fam, tgt)
    if form == "wu-ritt":
        return map_wu_ritt(lam, s_fam, src, t_fam, tgt)
    if form == "density":
        extra = None if inputs.hist_target is None else inputs.hist_target.X
        data = OmegaInputs(hist_src, tgt, extra_x=extra)
        dens = build_omega_densities(data)
        omega = estimate_omega(data, densities=dens)
        beta = fit_mle(s_fam, src).coefficients
        return map_density_based(omega, dens, s_fam, beta, src, t_fam, tgt)
    raise CliError(f"unknown map form {form!r}")


def _weights(sources, target) -> Weights:
    if not sources:
        return Weights(np.zeros(0), 1.0)
    s_fits = [fit_mle(f, d) for f, d in sources]
    t_fit = fit_mle(target[0], target[1].as_sample())
    return estimate_weights(s_fits, t_fit)


def _fit(maps, sources, target, weights) -> TransferFit:
    gaussian = all(f is ExponentialFamily.GAUSSIAN for f, _ in sources) and target[0] is ExponentialFamily.GAUSSIAN
    if gaussian and all(isinstance(m, LinearLinearMap) for m in maps):
        ab = [(m._jac[:, : m.d1], m._jac[:, m.d1:]) for m in maps]
        return closed_form_linear(ab, sources, target, weights)
    return maximize_cr_tll(maps, sources, target, weights)


def _glm_as_transfer(fit: GlmFit, d1: int, weights: Weights, data: TargetSample, family) -> TransferFit:
    from .glm_core import neg_hessian

    cov = np.linalg.pinv(neg_hessian(family, fit.coefficients, data.as_sample()))
    return TransferFit(fit.coefficients[:d1].copy(), fit.coefficients[d1:].copy(), cov, weights,
                       fit.loglik, fit.iterations, fit.converged, fit.score_norm, "target-only MLE")


class _Pipeline:
    """Ratio matrices are fixed once; `run` refits on (possibly resampled) current samples."""

    def __init__(self, args: argparse.Namespace, inputs: FitInputs):
        self.args = args
        self.inputs = inputs
        self.lams = []
        if not args.no_sources:
            if args.map == "density":
                self.lams = [None] * len(inputs.sources)
            else:
                self.lams = [_lambda_for(inputs, j, args.lambda_method, args.map) for j in range(len(inputs.sources))]

    def run(self, sources, target) -> TransferFit:
        inputs = FitInputs(sources, target, self.inputs.hist_sources, self.inputs.hist_target, {})
        weights = _weights(sources, target)
        if not sources:
            fam, tgt = target
            return _glm_as_transfer(fit_mle(fam, tgt.as_sample()), tgt.d1, weights, tgt, fam)
        maps = [_build_map(self.args.map, lam, inputs, j) for j, lam in enumerate(self.lams)]
        return _fit(maps, sources, target, weights)

    def run_partially_linear(self, sources, target):
        weights = _weights(sources[:1], target)
        if not sources:
            return fit_partially_linear(None, target, None, weights)
        if len(sources) > 1:
            raise CliError("the partially linear model takes a single source")
        m_qq = None
        if target[0] is ExponentialFamily.GAUSSIAN:
            m_qq = target[1].X.T @ target[1].X / target[1].n
        smap = ProfileSourceMap.moment(self.lams[0], target[0], sources[0][1], m_qq)
        return fit_partially_linear(sources[0], target, self.lams[0], weights, source_map=smap)


def cmd_fit(args: argparse.Namespace) -> int:
    inputs = _load_fit_inputs(args)
    t_fam, tgt = inputs.target
    pipe = _Pipeline(args, inputs)
    labels = args.x_labels + args.z_labels
    doc: dict = {
        "schema": SCHEMA_VERSION,
        "command": "fit",
        "target_model": args.target_model,
        "map": None if args.no_sources else args.map,
        "families": {"sources": [f.value for f, _ in inputs.sources], "target": t_fam.value},
        "dropped_rows": inputs.dropped,
        "ratios": [lam.to_dict() if lam is not None else None for lam in pipe.lams],
    }
    if args.target_model == "partially-linear":
        pf = pipe.run_partially_linear(inputs.sources, inputs.target)
        doc["labels"] = args.x_labels
        doc["fit"] = {
            "gamma": pf.gamma.tolist(), "theta": [], "std_errors": [math.nan] * pf.gamma.size,
            "converged": pf.converged, "loglik": pf.loglik,
        }
        doc["t_hat"] = {"z": pf.t_hat.queries.tolist(), "t": pf.t_hat.values.tolist(), "bandwidth": pf.bandwidth}
    else:
        fit = pipe.run(inputs.sources, inputs.target)
        doc["labels"] = labels
        doc["fit"] = fit.to_dict()
        if args.mle:
            m = fit_mle(t_fam, tgt.as_sample())
            doc["mle"] = {"coefficients": m.coefficients.tolist(), "converged": m.converged, "loglik": m.loglik}
        if args.bootstrap:
            n_src = len(inputs.sources)

            def refit(strata: list) -> NDArray:
                srcs = [(f, s) for (f, _), s in zip(inputs.sources, strata[:n_src])]
                return pipe.run(srcs, (t_fam, strata[n_src])).alpha

            strata = [s for _, s in inputs.sources] + [tgt]
            res = bootstrap_ci(refit, strata, level=args.level, B=args.bootstrap, seed=args.seed)
            doc["bootstrap"] = {
                "B": args.bootstrap, "level": args.level, "seed": args.seed,
                "lower": res.lower.tolist(), "upper": res.upper.tolist(), "failures": res.failures,
            }
    out = Path(args.out)
    _write_json(out / "fit.json", doc)
    print(coefficient_table(doc))
    return 0


def cmd_show_fit(args: argparse.Namespace) -> int:
    try:
        with open(args.path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"{args.path}: cannot read fit document ({exc})") from exc
    if doc.get("schema") != SCHEMA_VERSION or "fit" not in doc:
        raise CliError(f"{args.path}: not a fit document")
    print(coefficient_table(doc))
    return 0


# ---------------------------------------------------------------- estimate-lambda


def cmd_estimate_lambda(args: argparse.Namespace) -> int:
    xs = _split_cols(args.x)
    hs = parse_csv(args.hist_source, args.response, xs)
    ht = parse_csv(args.hist_target, args.response, xs)
    hist = HistoricalData(hs.data, ht.data)
    if args.source and args.target:
        args.no_sources = False
        args.source = [args.source]
        args.hist_source = [args.hist_source]
        args.family_source = [args.family_source]
        args.standardize = False
        inputs = _load_fit_inputs(args)
        lam, trace = estimate_lambda_bias_corrected(hist, _cv_context(inputs, 0, args.map), return_trace=True)
        doc = {"schema": SCHEMA_VERSION, "method": "bias-corrected", "lambda": lam.to_dict(),
               "grid": trace.grid.tolist(), "scores": np.where(np.isfinite(trace.scores), trace.scores, None).tolist()}
    else:
        lam = estimate_lambda_plugin(hist)
        doc = {"schema": SCHEMA_VERSION, "method": "plugin", "lambda": lam.to_dict()}
    doc["columns"] = xs
    doc["dropped_rows"] = {hs.path: hs.dropped, ht.path: ht.dropped}
    text = json.dumps(doc, indent=2)
    if args.out:
        _write_json(Path(args.out), doc)
    print(text)
    return 0


# ---------------------------------------------------------------- js-demo


def cmd_js_demo(args: argparse.Namespace) -> int:
    theta = np.zeros(args.k) if args.theta is None else np.array([float(v) for v in _split_cols(args.theta)])
    try:
        r = james_stein_demo(args.k, theta, args.c, args.reps, args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    doc = {
        "schema": SCHEMA_VERSION, "k": r.k, "c": r.c, "replications": r.replications, "seed": args.seed,
        "theta": theta.tolist(), "ordinary_risk": r.ordinary, "js_risk": r.shrunk,
    }
    if args.out:
        _write_json(Path(args.out), doc)
    print(json.dumps(doc, indent=2))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="artifact", description="Correlation-ratio transfer learning for GLMs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run a simulation sweep from a JSON config")
    s.add_argument("--config", required=True, help="config path or bundled name (e.g. table1_part1)")
    s.add_argument("--replications", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default="out")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit the transfer estimator to CSV files")
    f.add_argument("--family-source", nargs="+")
    f.add_argument("--family-target", default="gaussian")
    f.add_argument("--source", nargs="+")
    f.add_argument("--target", required=True)
    f.add_argument("--hist-source", nargs="+")
    f.add_argument("--hist-target")
    f.add_argument("--response", required=True)
    f.add_argument("--x", required=True, help="comma-separated permanent covariate columns")
    f.add_argument("--z", help="comma-separated emerging covariate columns")
    f.add_argument("--map", choices=["linear", "stein", "wu-ritt", "density"], default="linear")
    f.add_argument("--lambda-method", choices=["plugin", "bias-corrected"], default="plugin")
    f.add_argument("--target-model", choices=["glm", "partially-linear"], default="glm")
    f.add_argument("--bootstrap", type=int, metavar="B")
    f.add_argument("--level", type=float, default=0.9)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--standardize", action="store_true")
    f.add_argument("--no-sources", action="store_true")
    f.add_argument("--mle", action="store_true", help="also report the target-only MLE")
    f.add_argument("--out", default="out")
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("estimate-lambda", help="estimate the correlation-ratio matrix")
    e.add_argument("--hist-source", required=True)
    e.add_argument("--hist-target", required=True)
    e.add_argument("--response", required=True)
    e.add_argument("--x", required=True)
    e.add_argument("--z")
    e.add_argument("--source", help="current source CSV; with --target selects the bias-corrected estimate")
    e.add_argument("--target")
    e.add_argument("--family-source", default="gaussian")
    e.add_argument("--family-target", default="gaussian")
    e.add_argument("--map", choices=["linear", "stein", "wu-ritt"], default="linear")
    e.add_argument("--out")
    e.set_defaults(func=cmd_estimate_lambda)

    j = sub.add_parser("js-demo", help="James-Stein shrinkage risk demo")
    j.add_argument("--k", type=int, default=5)
    j.add_argument("--c", type=float, default=3.0)
    j.add_argument("--reps", type=int, default=100_000)
    j.add_argument("--seed", type=int, default=0)
    j.add_argument("--theta", help="comma-separated mean vector (default zero)")
    j.add_argument("--out")
    j.set_defaults(func=cmd_js_demo)

    v = sub.add_parser("show-fit", help="print the coefficient table of a fit.json")
    v.add_argument("path")
    v.set_defaults(func=cmd_show_fit)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "fit":
        args.x_labels = _split_cols(args.x)
        args.z_labels = _split_cols(args.z)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
