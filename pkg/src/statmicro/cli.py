"""Command-line front end: ``statmicro solve | propagate | sample | calibrate``.

Settings come from a TOML or JSON config file and from flags; flags win.
Every output embeds a hash of the resolved configuration and the seed, and
contains no timestamps, so identical configurations give identical bytes.
Timestamps go to a ``run.log`` sidecar in the output directory.

Exit codes: 0 success, 1 runtime or convergence failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import calibration, propagator, sampler
from .duality import CostParams, market_clearing
from .errors import (
    ConvergenceError,
    DomainError,
    IdentifiabilityError,
    LagRangeError,
    LengthError,
    StatMicroError,
    TuningError,
    UnsupportedConfigurationError,
    ValidationError,
)
from .lattice import Lattice
from .model import (
    ModelParams,
    _find_key_line,
    classical_market_prices,
    gamma_coefficients,
    load_params,
    minimum_potential,
    parse_document,
    stationary_prices,
)

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2

DEFAULTS = {
    "seed": 0,
    "out": "statmicro_out",
    "lattice": {"n_steps": 128, "dt": 0.1, "boundary": "periodic"},
    "sampler": {"n_sweeps": 100_000, "n_burnin": 2_000, "n_thin": 10, "n_chains": 1,
                "step_size": None, "max_lag": None, "quadratic": False},
    "propagate": {"lags": None, "method": None},
    "solve": {"format": "table", "beta": 1.0},
    "calibrate": {"input": None, "m": None, "a": 1.0, "b": 1.0, "max_lag": None,
                  "tau_max": None, "q0": None, "n_boot": 0},
}
_TOP_KEYS = {"seed", "out", "params", "params_file", *[k for k, v in DEFAULTS.items()
                                                        if isinstance(v, dict)]}


class _Config:
    """Resolved settings plus the raw text for line-precise error messages."""

    def __init__(self, data: dict, params_doc: dict | None, text: str | None,
                 source: str | None, base: Path):
        self.data = data
        self.params_doc = params_doc
        self.text = text
        self.source = source
        self.base = base

    def fail(self, message: str, key: str):
        raise ValidationError(message, field=key, line=_find_key_line(self.text, key),
                              source=self.source)


def _load_config(path: str | None) -> _Config:
    data = copy.deepcopy(DEFAULTS)
    if path is None:
        return _Config(data, None, None, None, Path.cwd())
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"config file '{path}' not found", field="config")
    text = p.read_text()
    doc = parse_document(text, p.suffix, source=str(p))
    cfg = _Config(data, None, text, str(p), p.parent)
    for key, value in doc.items():
        if key not in _TOP_KEYS:
            cfg.fail(f"unknown key '{key}'", key)
        if key == "params":
            if not isinstance(value, dict):
                cfg.fail("'params' must be a table", key)
            cfg.params_doc = value
        elif key == "params_file":
            cfg.data["params_file"] = str((p.parent / value).resolve())
        elif isinstance(DEFAULTS.get(key), dict):
            if not isinstance(value, dict):
                cfg.fail(f"'{key}' must be a table", key)
            for sub, v in value.items():
                if sub not in DEFAULTS[key]:
                    cfg.fail(f"unknown key '{sub}' in [{key}]", sub)
                data[key][sub] = v
        else:
            data[key] = value
    return cfg


def _apply_flags(cfg: _Config, args: argparse.Namespace) -> None:
    d = cfg.data
    flag_map = {
        "seed": ("seed",), "out": ("out",),
        "n_steps": ("lattice", "n_steps"), "dt": ("lattice", "dt"),
        "boundary": ("lattice", "boundary"),
        "n_sweeps": ("sampler", "n_sweeps"), "n_burnin": ("sampler", "n_burnin"),
        "n_thin": ("sampler", "n_thin"), "n_chains": ("sampler", "n_chains"),
        "step_size": ("sampler", "step_size"), "max_lag": ("sampler", "max_lag"),
        "lags": ("propagate", "lags"), "method": ("propagate", "method"),
        "format": ("solve", "format"), "beta": ("solve", "beta"),
        "input": ("calibrate", "input"), "a": ("calibrate", "a"), "b": ("calibrate", "b"),
        "fit_max_lag": ("calibrate", "max_lag"), "tau_max": ("calibrate", "tau_max"),
        "q0": ("calibrate", "q0"), "n_boot": ("calibrate", "n_boot"),
    }
    for flag, where in flag_map.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        target = d
        for k in where[:-1]:
            target = target[k]
        target[where[-1]] = value
    if getattr(args, "quadratic", False):
        d["sampler"]["quadratic"] = True
    if getattr(args, "params", None):
        d["params_file"] = str(Path(args.params).resolve())
        cfg.params_doc = None
    if getattr(args, "m", None) is not None:
        d["m_override"] = args.m
        if args.command == "calibrate":
            d["calibrate"]["m"] = args.m


def _params(cfg: _Config, required: bool = True) -> ModelParams | None:
    d = cfg.data
    if cfg.params_doc is not None:
        params = ModelParams.from_dict(cfg.params_doc, text=cfg.text, source=cfg.source)
    elif d.get("params_file"):
        if not Path(d["params_file"]).is_file():
            raise ValidationError(f"params file '{d['params_file']}' not found",
                                  field="params_file")
        params = load_params(d["params_file"])
    elif required:
        raise ValidationError("no model parameters: give --params or a [params] table",
                              field="params")
    else:
        return None
    if d.get("m_override") is not None:
        params = params.with_budget(float(d["m_override"]))
    return params


def _lattice(cfg: _Config) -> Lattice:
    lat = cfg.data["lattice"]
    try:
        return Lattice(int(lat["n_steps"]), float(lat["dt"]), str(lat["boundary"]))
    except (TypeError, ValueError) as exc:
        raise ValidationError(str(exc), field="lattice", line=_find_key_line(cfg.text, "lattice"),
                              source=cfg.source) from None


def _sampler_config(cfg: _Config) -> sampler.SamplerConfig:
    s = cfg.data["sampler"]
    try:
        return sampler.SamplerConfig(
            n_sweeps=int(s["n_sweeps"]), n_burnin=int(s["n_burnin"]), n_thin=int(s["n_thin"]),
            step_size=None if s["step_size"] is None else float(s["step_size"]),
            seed=int(cfg.data["seed"]), n_chains=int(s["n_chains"]),
            max_lag=None if s["max_lag"] is None else int(s["max_lag"]))
    except DomainError as exc:
        raise ValidationError(str(exc), field="sampler",
                              line=_find_key_line(cfg.text, "sampler"),
                              source=cfg.source) from None


def _resolved(cfg: _Config, command: str, params: ModelParams | None) -> dict:
    """Canonical description of the run; its hash identifies the outputs."""
    d = {k: v for k, v in cfg.data.items() if k not in ("out", "params_file", "m_override")}
    sections = {"solve": ["solve"], "propagate": ["lattice", "propagate"],
                "sample": ["lattice", "sampler"], "calibrate": ["calibrate"]}[command]
    out = {"command": command, "seed": int(d["seed"])}
    for sec in sections:
        out[sec] = d[sec]
    if command == "calibrate" and out["calibrate"]["input"]:
        data = Path(out["calibrate"]["input"]).read_bytes()
        out["calibrate"] = dict(out["calibrate"], input=Path(out["calibrate"]["input"]).name,
                                input_sha256=hashlib.sha256(data).hexdigest())
    if params is not None:
        out["params"] = params.to_dict()
    return out


def config_hash(resolved: dict) -> str:
    text = json.dumps(resolved, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class _Writer:
    """Writes outputs stamped with the config hash and seed; logs to ``run.log``."""

    def __init__(self, out: str | Path, resolved: dict):
        self.out = Path(out)
        self.resolved = resolved
        self.hash = config_hash(resolved)
        self.seed = resolved["seed"]
        self.files: list[str] = []
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ValidationError(f"output directory not writable: {exc}", field="out") from None

    def stamp(self, doc: dict) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "config": self.resolved, **doc}

    def json(self, name: str, doc: dict) -> Path:
        path = self.out / name
        path.write_text(json.dumps(self.stamp(doc), indent=2, sort_keys=True, default=float)
                        + "\n")
        self.files.append(name)
        return path

    def csv(self, name: str, header: list, rows) -> Path:
        buf = io.StringIO()
        buf.write(f"# config_hash: {self.hash}\n# seed: {self.seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])
        path = self.out / name
        path.write_text(buf.getvalue())
        self.files.append(name)
        return path

    def text(self, name: str, body: str) -> Path:
        path = self.out / name
        path.write_text(f"config_hash: {self.hash}\nseed: {self.seed}\n{body}")
        self.files.append(name)
        return path

    def log(self, status: str, message: str = "") -> None:
        stamp = datetime.now(timezone.utc).isoformat(timespec="seconds")
        with open(self.out / "run.log", "a") as fh:
            fh.write(f"{stamp} {self.resolved['command']} hash={self.hash} seed={self.seed} "
                     f"status={status} files={','.join(self.files)} {message}".rstrip() + "\n")


# --- solve -------------------------------------------------------------------

def _solve_report(params: ModelParams, beta: float) -> dict:
    report = {
        "n_commodities": params.n,
        "p0": stationary_prices(params).tolist(),
        "p_star": classical_market_prices(params).tolist(),
        "gamma": gamma_coefficients(params).tolist(),
        "V0": minimum_potential(params),
    }
    try:
        cost = CostParams.linked(params, beta)
        report["market_clearing"] = market_clearing(params, cost).to_dict()
        report["market_clearing"]["beta"] = cost.beta.tolist()
    except UnsupportedConfigurationError as exc:
        report["market_clearing"] = {"skipped": str(exc)}
    return report


def _solve_rows(report: dict):
    for key in ("p0", "p_star", "gamma"):
        for i, v in enumerate(report[key]):
            yield key, i, float(v)
    yield "V0", "", float(report["V0"])
    mc = report["market_clearing"]
    if "q_star" in mc:
        for key in ("q_star", "p_star"):
            for i, v in enumerate(mc[key]):
                yield f"clearing_{key}", i, float(v)


def _solve_table(report: dict) -> str:
    lines = [f"{'quantity':<18}{'index':>6}  value"]
    for key, i, v in _solve_rows(report):
        lines.append(f"{key:<18}{str(i):>6}  {v:.12g}")
    return "\n".join(lines) + "\n"


def cmd_solve(cfg: _Config, args) -> int:
    params = _params(cfg)
    resolved = _resolved(cfg, "solve", params)
    fmt = cfg.data["solve"]["format"]
    if fmt not in ("json", "csv", "table"):
        cfg.fail(f"unknown format '{fmt}'", "format")
    report = _solve_report(params, float(cfg.data["solve"]["beta"]))
    w = _Writer(cfg.data["out"], resolved) if args.out or cfg.source else None
    if fmt == "json":
        body = json.dumps({"config_hash": config_hash(resolved), "seed": resolved["seed"],
                           **report}, indent=2, sort_keys=True) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        cw = csv.writer(buf, lineterminator="\n")
        cw.writerow(["quantity", "index", "value"])
        for key, i, v in _solve_rows(report):
            cw.writerow([key, i, repr(v)])
        body = buf.getvalue()
    else:
        body = _solve_table(report)
    sys.stdout.write(body)
    if w is not None:
        w.json("solve.json", report)
        w.text("solve.txt", _solve_table(report))
        if fmt == "csv":
            w.csv("solve.csv", ["quantity", "index", "value"], _solve_rows(report))
        w.log("ok")
    return EXIT_OK


# --- propagate ---------------------------------------------------------------

def _requested_lags(cfg: _Config, lattice: Lattice) -> tuple[np.ndarray, np.ndarray]:
    lags = cfg.data["propagate"]["lags"]
    if lags is None:
        steps = np.arange(lattice.n_steps // 2 + 1)
        return steps * lattice.dt, steps
    taus = np.atleast_1d(np.asarray(lags, dtype=float))
    steps = np.round(taus / lattice.dt).astype(int)
    if np.any(np.abs(steps * lattice.dt - taus) > 1e-9 * np.maximum(1.0, np.abs(taus))):
        cfg.fail("every lag must be a multiple of the lattice spacing dt", "lags")
    if np.any(taus < 0) or np.any(steps >= lattice.n_steps):
        cfg.fail("lags must lie in [0, n_steps * dt)", "lags")
    return taus, steps


def propagate_tables(params: ModelParams, lattice: Lattice, taus, steps, method=None):
    """Continuum and lattice tables at the requested lags, plus their discrepancy."""
    if method is None:
        identity = np.allclose(params.rotation, np.eye(params.n), atol=1e-14)
        method = "continuum-residue" if identity else "continuum-quadrature"
    cont = propagator.continuum_propagator(params, taus, method=method)
    if lattice.periodic:
        lat = propagator.matrix_propagator(params, lattice, steps)
        lat = propagator.PropagatorTable(lags=np.asarray(taus, dtype=float), g=lat.g,
                                         method=lat.method)
    else:
        lat = _open_lattice_table(params, lattice, taus, steps)
    scale = np.max(np.abs(lat.g))
    discrepancy = float(np.max(np.abs(cont.g - lat.g)) / scale)
    return cont, lat, discrepancy


def _open_lattice_table(params, lattice, taus, steps):
    """Time-averaged covariance at each offset for the zero boundary."""
    cov = propagator.dense_propagator(params, lattice)
    t_len = lattice.n_steps
    g = np.empty((params.n, params.n, len(steps)))
    for k, n in enumerate(steps):
        idx = np.arange(t_len - n)
        g[:, :, k] = cov[:, idx, :, idx + n].mean(axis=0)
    return propagator.PropagatorTable(lags=np.asarray(taus, dtype=float), g=g,
                                      method="lattice-dense")


def cmd_propagate(cfg: _Config, args) -> int:
    params = _params(cfg)
    lattice = _lattice(cfg)
    taus, steps = _requested_lags(cfg, lattice)
    resolved = _resolved(cfg, "propagate", params)
    w = _Writer(cfg.data["out"], resolved)
    cont, lat, disc = propagate_tables(params, lattice, taus, steps,
                                       cfg.data["propagate"]["method"])
    for name, table in (("continuum", cont), ("lattice", lat)):
        w.csv(f"propagator_{name}.csv", ["tau", "i", "j", "G"], table.rows())
    warning = disc > 0.01
    w.json("propagate.json", {"continuum": cont.to_dict(), "lattice": lat.to_dict(),
                              "max_relative_discrepancy": disc,
                              "discrepancy_warning": warning})
    msg = f"max relative continuum/lattice discrepancy {disc:.3e}"
    if warning:
        print(f"warning: {msg} exceeds 1%", file=sys.stderr)
    print(msg)
    w.log("ok", "warning" if warning else "")
    return EXIT_OK


# --- sample ------------------------------------------------------------------

def cmd_sample(cfg: _Config, args) -> int:
    params = _params(cfg)
    lattice = _lattice(cfg)
    scfg = _sampler_config(cfg)
    quadratic = bool(cfg.data["sampler"]["quadratic"])
    resolved = _resolved(cfg, "sample", params)
    w = _Writer(cfg.data["out"], resolved)
    try:
        est = sampler.run_chain(params, lattice, scfg, quadratic=quadratic)
    except TuningError as exc:
        w.json("tuning_failure.json", {"error": str(exc), "diagnostics": exc.diagnostics})
        w.log("tuning-failure")
        raise
    steps = np.round(est.lags / lattice.dt).astype(int)
    _, theory, _ = propagate_tables(params, lattice, est.lags, steps)
    rows, zs = [], []
    for i in range(params.n):
        for j in range(params.n):
            for k, tau in enumerate(est.lags):
                g, err, ref = est.corr[i, j, k], est.corr_err[i, j, k], theory.g[i, j, k]
                z = (g - ref) / err if err > 0 else float("nan")
                zs.append(z)
                rows.append((float(tau), i, j, float(g), float(err), float(ref), float(z)))
    zs = np.abs(np.array(zs))
    summary = {
        "n": int(zs.size),
        "frac_within_1": float(np.mean(zs <= 1)),
        "frac_within_2": float(np.mean(zs <= 2)),
        "frac_within_3": float(np.mean(zs <= 3)),
        "max_abs_z": float(np.nanmax(zs)),
        "median_abs_z": float(np.nanmedian(zs)),
    }
    w.json("estimate.json", {"estimate": est.to_dict(), "quadratic": quadratic,
                             "z_summary": summary})
    w.csv("correlator.csv", ["tau", "i", "j", "G", "err"], est.rows())
    w.csv("comparison.csv", ["tau", "i", "j", "G_mc", "err", "G_gauss", "z"], rows)
    print(f"acceptance {est.acceptance_rate:.3f}; |z| within 1/2/3: "
          f"{summary['frac_within_1']:.2f}/{summary['frac_within_2']:.2f}/"
          f"{summary['frac_within_3']:.2f}; max |z| {summary['max_abs_z']:.2f}")
    w.log("ok")
    return EXIT_OK


# --- calibrate ---------------------------------------------------------------

def cmd_calibrate(cfg: _Config, args) -> int:
    c = cfg.data["calibrate"]
    if not c["input"]:
        cfg.fail("no input series: give --input or [calibrate] input", "input")
    path = Path(c["input"])
    if cfg.source and not path.is_absolute() and not path.exists():
        path = cfg.base / path
    if not path.is_file():
        cfg.fail(f"input file '{c['input']}' not found", "input")
    c["input"] = str(path)
    params = _params(cfg, required=False)
    m = c["m"] if c["m"] is not None else (params.m if params is not None else None)
    if m is None:
        cfg.fail("the budget m is required for calibration", "m")
    c["m"] = float(m)
    series = calibration.read_price_csv(path)
    resolved = _resolved(cfg, "calibrate", None)
    w = _Writer(cfg.data["out"], resolved)
    try:
        result = calibration.calibrate(series, c["m"], c["a"], c["b"], max_lag=c["max_lag"],
                                       tau_max=c["tau_max"], q0=c["q0"],
                                       n_boot=int(c["n_boot"]), seed=int(cfg.data["seed"]))
    except (IdentifiabilityError, ConvergenceError) as exc:
        w.json("calibration_failure.json", {"error": str(exc), "type": type(exc).__name__})
        w.log("failed", type(exc).__name__)
        raise
    w.json("calibration.json", result.to_dict())
    max_lag = int(max(4, round(2 * np.max(result.tau_max) / series.dt)))
    max_lag = min(max_lag, series.n_obs // 10)
    w.csv("fitted_curves.csv", ["tau", "label", "empirical", "fitted"],
          calibration.fitted_curves(series, result, max_lag))
    for i, lab in enumerate(result.labels):
        print(f"{lab}: m*gamma={result.m * result.gamma[i]:.6g} m*mu={result.m * result.mu[i]:.6g} "
              f"m*kappa={result.m * result.kappa[i]:.6g} d={result.d_hat[i]:.6g} "
              f"s={result.s_hat[i]:.6g} ({result.branch[i]})")
    w.log("ok")
    return EXIT_OK


# --- entry point -------------------------------------------------------------

def _floats(text: str):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="statmicro", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML or JSON run configuration")
    common.add_argument("--params", help="model parameter file (TOML or JSON)")
    common.add_argument("--m", type=float, help="budget m (overrides the parameter file)")
    common.add_argument("--seed", type=int, help="master RNG seed")
    common.add_argument("--out", help="output directory")
    lat = argparse.ArgumentParser(add_help=False)
    lat.add_argument("--n-steps", type=int, help="time slices T")
    lat.add_argument("--dt", type=float, help="lattice spacing")
    lat.add_argument("--boundary", choices=("periodic", "zero"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="stationary and market prices")
    p.add_argument("--format", choices=("json", "csv", "table"))
    p.add_argument("--beta", type=float, help="producer cost scale for market clearing")

    p = sub.add_parser("propagate", parents=[common, lat], help="Gaussian propagator tables")
    p.add_argument("--lags", type=_floats, help="comma-separated lag times (multiples of dt)")
    p.add_argument("--method", choices=("continuum-residue", "continuum-quadrature"))

    p = sub.add_parser("sample", parents=[common, lat], help="Metropolis correlator estimates")
    p.add_argument("--n-sweeps", type=int)
    p.add_argument("--n-burnin", type=int)
    p.add_argument("--n-thin", type=int)
    p.add_argument("--n-chains", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--max-lag", type=int, help="largest correlator lag in slices")
    p.add_argument("--quadratic", action="store_true", help="sample the truncated action")

    p = sub.add_parser("calibrate", parents=[common], help="fit parameters to a price CSV")
    p.add_argument("--input", help="CSV with header timestamp,label1,...")
    p.add_argument("--a", type=_floats, help="demand exponents")
    p.add_argument("--b", type=_floats, help="supply exponents")
    p.add_argument("--fit-max-lag", type=int, help="largest autocovariance lag in samples")
    p.add_argument("--tau-max", type=float, help="largest lag time used by the fit")
    p.add_argument("--q0", type=_floats, help="observed quantities for the cost model")
    p.add_argument("--n-boot", type=int, help="block bootstrap resamples")
    return parser


COMMANDS = {"solve": cmd_solve, "propagate": cmd_propagate, "sample": cmd_sample,
            "calibrate": cmd_calibrate}


def main(argv=None) -> int:
    """Run one subcommand and return its exit code."""
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_config(args.config)
        _apply_flags(cfg, args)
        return COMMANDS[args.command](cfg, args)
    except (IdentifiabilityError, ConvergenceError, TuningError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValidationError, DomainError, UnsupportedConfigurationError, LengthError,
            LagRangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except StatMicroError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
