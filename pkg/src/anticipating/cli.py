"""Command line runner: ``anticipating {verify,smooth,spde,fbm,density} [flags]``.

Configuration comes from an INI file (``--config``) with one section per
module, overridden by flags. Every command writes ``report.json`` (check
records, deterministic for a fixed config), ``timings.json`` and CSV data
into the output directory. Exit codes: 0 all checks passed, 1 some check
failed, 2 usage error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor, wait
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import chaos as ch
from . import density as dn
from . import gsro as gr
from . import smoothing as sm
from . import verification as vf
from .gaussian_space import CrossCovarianceSpec, TimeGrid, build_covariance, noise_from_whitened, sample_pairs

COMMANDS = ("verify", "smooth", "spde", "fbm", "density")
OUT_ENV = "ANTICIPATING_OUT"
DEFAULT_OUT = "anticipating-out"


class ConfigError(ValueError):
    """Invalid configuration; maps to exit code 2."""


@dataclass(frozen=True)
class Field:
    section: str
    key: str
    kind: type
    default: object
    check: object = None        # callable returning an error string or None
    choices: tuple = ()
    help: str = ""


def _between(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        if (v <= lo if lo_open else v < lo) if lo is not None else False:
            return f"must be {'>' if lo_open else '>='} {lo}"
        if (v >= hi if hi_open else v > hi) if hi is not None else False:
            return f"must be {'<' if hi_open else '<='} {hi}"
        return None
    return check


SCHEMA = {
    "command": Field("run", "command", str, "verify", choices=COMMANDS, help="what to run"),
    "T": Field("grid", "T", float, 1.0, _between(0, 100, lo_open=True), help="time horizon"),
    "n": Field("grid", "n", int, 16, _between(2, 1024), help="number of grid cells"),
    "corr": Field("correlation", "kind", str, "scalar", choices=("zero", "scalar", "volterra"),
                  help="cross-covariance between the two noises"),
    "rho": Field("correlation", "rho", float, 0.5, _between(-1, 1, True, True),
                 help="scalar correlation, or strength of the exponential Volterra kernel"),
    "a1": Field("drift", "a1", str, "tanh", choices=dn.DRIFT_PRESETS, help="drift preset of x1"),
    "eps1": Field("drift", "eps1", float, 0.3, _between(0, 10), help="scale of a1"),
    "a2": Field("drift", "a2", str, "zero", choices=dn.DRIFT_PRESETS, help="drift preset of x2"),
    "eps2": Field("drift", "eps2", float, 0.0, _between(0, 10), help="scale of a2"),
    "K": Field("chaos", "K", int, 4, _between(0, 8), help="chaos truncation degree"),
    "m": Field("run", "m", int, 10 ** 5, _between(1, 10 ** 8), help="Monte-Carlo sample count"),
    "seed": Field("run", "seed", int, 0, _between(0, 2 ** 63 - 1), help="master seed"),
    "suite": Field("run", "suite", str, "all", choices=tuple(vf.SUITES), help="verify suite"),
    "preset": Field("run", "preset", str, "full", choices=tuple(vf.PRESETS), help="verify sizes"),
    "workers": Field("run", "workers", int, 0, _between(0, 1024), help="worker processes (0: all cores)"),
    "timeout": Field("run", "timeout", float, 1800.0, _between(0, None, lo_open=True),
                     help="runtime cap of a verify suite in seconds"),
    "f": Field("smoothing", "f", str, "gauss", choices=sm.TEST_FUNCTIONS, help="test function"),
    "t_query": Field("smoothing", "t_query", float, None, _between(0, None),
                     help="smoothing time (default: T)"),
    "r_min": Field("smoothing", "r_min", float, -6.0, help="spatial grid start"),
    "r_max": Field("smoothing", "r_max", float, 6.0, help="spatial grid end"),
    "r_points": Field("smoothing", "r_points", int, 49, _between(3, 10 ** 4), help="spatial grid size"),
    "mode": Field("smoothing", "mode", str, "auto", choices=("auto", "simplified", "conditional"),
                  help="third term of the smoothing equation"),
    "hurst": Field("fbm", "hurst", float, 0.75, _between(0.5, 1, True, True), help="Hurst index"),
}
NOT_REPORTED = ("workers", "timeout")


@dataclass
class RunConfig:
    command: str = "verify"
    T: float = 1.0
    n: int = 16
    corr: str = "scalar"
    rho: float = 0.5
    a1: str = "tanh"
    eps1: float = 0.3
    a2: str = "zero"
    eps2: float = 0.0
    K: int = 4
    m: int = 10 ** 5
    seed: int = 0
    suite: str = "all"
    preset: str = "full"
    workers: int = 0
    timeout: float = 1800.0
    f: str = "gauss"
    t_query: float | None = None
    r_min: float = -6.0
    r_max: float = 6.0
    r_points: int = 49
    mode: str = "auto"
    hurst: float = 0.75
    out: str | None = None
    tolerances: dict = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        for name, spec in SCHEMA.items():
            v = getattr(self, name)
            if v is None and spec.default is None:
                continue
            if spec.choices and v not in spec.choices:
                raise ConfigError(f"{name}: must be one of {', '.join(spec.choices)} (got {v!r})")
            if spec.kind is float and not math.isfinite(v):
                raise ConfigError(f"{name}: must be finite (got {v!r})")
            msg = spec.check(v) if spec.check else None
            if msg:
                raise ConfigError(f"{name}: {msg} (got {v!r})")
        if self.t_query is not None and self.t_query > self.T:
            raise ConfigError(f"t_query: must be <= T={self.T} (got {self.t_query})")
        if self.r_min >= self.r_max:
            raise ConfigError(f"r_max: must exceed r_min={self.r_min} (got {self.r_max})")
        for name, scale in self.tolerances.items():
            if name not in vf.CHECKS and name not in vf.ANCHORS:
                raise ConfigError(f"tolerances.{name}: unknown check")
            if not (math.isfinite(scale) and scale > 0):
                raise ConfigError(f"tolerances.{name}: must be > 0 (got {scale!r})")
        return self

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for name, spec in SCHEMA.items():
            v = getattr(self, name)
            if not cp.has_section(spec.section):
                cp.add_section(spec.section)
            cp[spec.section][spec.key] = "" if v is None else repr(v) if spec.kind is float else str(v)
        if self.out is not None:
            cp["run"]["out"] = self.out
        cp.add_section("tolerances")
        for k, v in sorted(self.tolerances.items()):
            cp["tolerances"][k] = repr(v)
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)

    def report_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in NOT_REPORTED + ("out",)}
        d["tolerances"] = dict(sorted(self.tolerances.items()))
        return d


_KEY_INDEX = {(s.section, s.key): name for name, s in SCHEMA.items()}


def _convert(name: str, raw: str):
    spec = SCHEMA[name]
    if raw.strip() == "" and spec.default is None:
        return None
    try:
        if spec.kind is int:
            return int(raw)
        if spec.kind is float:
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: expected {spec.kind.__name__}, got {raw!r}") from None
    return raw.strip()


def read_config_file(path) -> dict:
    """Parse an INI file into field overrides; rejects unknown sections and keys."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except OSError as e:
        raise ConfigError(f"config file: cannot read {path}: {e.strerror}") from None
    except configparser.Error as e:
        raise ConfigError(f"config file: malformed: {e.message.splitlines()[0]}") from None
    values: dict = {}
    for sec in cp.sections():
        for key, raw in cp[sec].items():
            if sec == "tolerances":
                try:
                    values.setdefault("tolerances", {})[key] = float(raw)
                except ValueError:
                    raise ConfigError(f"tolerances.{key}: expected float, got {raw!r}") from None
            elif (sec, key) == ("run", "out"):
                values["out"] = raw.strip() or None
            elif (sec, key) in _KEY_INDEX:
                name = _KEY_INDEX[(sec, key)]
                values[name] = _convert(name, raw)
            else:
                known = sorted({s.section for s in SCHEMA.values()} | {"tolerances"})
                if sec not in known:
                    raise ConfigError(f"config file: unknown section [{sec}] (known: {', '.join(known)})")
                raise ConfigError(f"config file: unknown key {key!r} in section [{sec}]")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anticipating", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI configuration file")
    p.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    for name, spec in SCHEMA.items():
        if name == "command":
            continue
        kw = dict(dest=name, default=None, help=f"{spec.help} [{spec.section}.{spec.key}]")
        if spec.choices:
            kw["choices"] = spec.choices
        else:
            kw["type"] = spec.kind
            kw["metavar"] = spec.kind.__name__.upper()
        p.add_argument(f"--{name.replace('_', '-')}", **kw)
    p.add_argument("--tol", action="append", default=[], metavar="CHECK=SCALE",
                   help="multiply the tolerance of a check (repeatable)")
    return p


def parse_config(argv=None) -> RunConfig:
    args = build_parser().parse_args(argv)
    values = read_config_file(args.config) if args.config else {}
    for name in SCHEMA:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    if args.out is not None:
        values["out"] = args.out
    for item in args.tol:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--tol: expected CHECK=SCALE, got {item!r}")
        try:
            values.setdefault("tolerances", {})[key.strip()] = float(raw)
        except ValueError:
            raise ConfigError(f"tolerances.{key.strip()}: expected float, got {raw!r}") from None
    return RunConfig(**values).validate()


# model construction ---------------------------------------------------------------------------------

def make_cov(cfg: RunConfig):
    grid = TimeGrid(cfg.n, cfg.T)
    if cfg.corr == "zero":
        spec = CrossCovarianceSpec.zero()
    elif cfg.corr == "scalar":
        spec = CrossCovarianceSpec.scalar(cfg.rho)
    else:
        rho = cfg.rho
        spec = CrossCovarianceSpec.volterra_from_function(lambda t, s: rho * math.exp(-(t - s)), grid, strict=False)
    try:
        return build_covariance(grid, spec)
    except (ValueError, np.linalg.LinAlgError) as e:
        raise ConfigError(f"rho: covariance not positive definite ({e})") from None


def make_model(cfg: RunConfig) -> sm.SmoothingModel:
    cov = make_cov(cfg)
    drift = dn.DriftSpec.preset(cfg.a1, cfg.eps1, cfg.a2, cfg.eps2)
    try:
        return sm.SmoothingModel(cov, drift, sm.TestFunction.preset(cfg.f),
                                 np.linspace(cfg.r_min, cfg.r_max, cfg.r_points))
    except ValueError as e:
        raise ConfigError(f"eps1/eps2: {e}") from None


# output helpers ---------------------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def _jsonable(o):
    if isinstance(o, dict):
        return {str(k): _jsonable(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_jsonable(v) for v in o]
    if isinstance(o, np.ndarray):
        return _jsonable(o.tolist())
    if isinstance(o, (np.bool_, bool)):
        return bool(o)
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating, float)):
        f = float(o)
        return f if math.isfinite(f) else repr(f)
    return o


def _scaled(rec: vf.CheckRecord, cfg: RunConfig) -> vf.CheckRecord:
    scale = cfg.tolerances.get(rec.name)
    if scale is not None and scale != 1.0:
        rec.tolerance *= scale
        rec.passed = bool(rec.measured <= rec.tolerance)
        rec.detail["tolerance_scale"] = scale
    return rec


@dataclass
class RunReport:
    command: str
    config: dict
    records: list
    files: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.records)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1

    def to_json(self) -> str:
        d = {"command": self.command, "config": self.config, "passed": self.passed,
             "records": [r.as_dict() for r in self.records], "files": sorted(self.files)}
        return json.dumps(_jsonable(d), indent=2, sort_keys=True) + "\n"


# commands ------------------------------------------------------------------------------------------------

def _timeout_record(name: str, cap: float) -> vf.CheckRecord:
    return vf.CheckRecord(name, vf.ANCHORS[name], float("nan"), float("nan"), False,
                          {"status": "timeout", "cap_seconds": cap})


def run_verify(cfg: RunConfig, out: Path) -> tuple[list, list]:
    names = vf.SUITES[cfg.suite]
    workers = cfg.workers or os.cpu_count() or 1
    workers = min(workers, len(names))
    t0 = time.perf_counter()
    results: dict = {}
    if workers == 1:
        for name in names:
            if time.perf_counter() - t0 > cfg.timeout:
                results[name] = _timeout_record(name, cfg.timeout)
            else:
                results[name] = vf.run_check(name, cfg.seed, cfg.preset)
    else:
        pool = ProcessPoolExecutor(max_workers=workers)
        futs = {pool.submit(vf.run_check, name, cfg.seed, cfg.preset): name for name in names}
        done, pending = wait(futs, timeout=cfg.timeout)
        for fut in done:
            results[futs[fut]] = fut.result()
        for fut in pending:
            results[futs[fut]] = _timeout_record(futs[fut], cfg.timeout)
        if pending:
            for proc in list(getattr(pool, "_processes", {}).values()):
                proc.terminate()
        pool.shutdown(wait=not pending, cancel_futures=True)
    records = [_scaled(results[name], cfg) for name in names]
    rows = [(r.name, r.anchor, r.measured, r.tolerance, r.passed) for r in records]
    files = [write_csv(out / "checks.csv", ["name", "anchor", "measured", "tolerance", "passed"], rows)]
    return records, files


def _record(name, measured, tol, cfg, **detail) -> vf.CheckRecord:
    return _scaled(vf._record(name, measured, tol, **detail), cfg)


def run_smooth(cfg: RunConfig, out: Path) -> tuple[list, list]:
    model = make_model(cfg)
    cov, grid = model.cov, model.grid
    tq = cfg.T if cfg.t_query is None else cfg.t_query
    truth = sm.simulate_model(model, cfg.seed, 1)
    x1, x2 = truth.x1[0], truth.x2[0]
    m = max(cfg.m, 10 ** 4)
    res = sm.bayes_smoother(model, x2, tq, cfg.seed + 1, m)
    files = [
        write_csv(out / "observation.csv", ["t", "x1_hidden", "x2_observed"], zip(grid.times, x1, x2)),
        write_csv(out / "smoother.csv", ["t_query", "psi", "stderr", "ess", "flags"],
                  [(tq, res.psi, res.stderr, res.ess, ";".join(res.flags))]),
        write_csv(out / "pi_t.csv", ["t", "r_lo", "r_hi", "mass"],
                  [(t, res.r_edges[b], res.r_edges[b + 1], res.pi_t[j, b])
                   for j, t in enumerate(grid.times) for b in range(res.pi_t.shape[1])]),
    ]
    records = [_record("smoother_ess", -res.ess, -float(sm.ESS_FLOOR), cfg, ess=res.ess,
                       note="measured and tolerance are negated effective sample sizes")]
    drift_free = cfg.eps1 == 0 or cfg.a1 == "zero"
    if drift_free and model.drift.a2_zero and cfg.f == "gauss":
        mu, var = sm.gaussian_conditional_oracle(cov, x2, tq)
        exact = math.exp(-mu * mu / (2 * (1 + var))) / math.sqrt(1 + var)
        records.append(_record("smoother_gaussian", abs(res.psi - exact) / res.stderr, 4.0, cfg, exact=exact,
                               psi=res.psi, unit="standard errors"))
    return records, files


def run_spde(cfg: RunConfig, out: Path) -> tuple[list, list]:
    model = make_model(cfg)
    try:
        fld = sm.solve_spde(model, K=cfg.K, seed=cfg.seed, mode=cfg.mode, projection_m=min(cfg.m, 10 ** 5))
    except ValueError as e:
        raise ConfigError(f"mode: {e}") from None
    times = model.grid.times[fld.stored_steps]
    U = fld.mean_surface()
    files = [write_csv(out / "U_surface.csv", ["t", "r", "U_mean"],
                       [(t, r, U[j, i]) for j, t in enumerate(times) for i, r in enumerate(model.r_grid)])]
    norms = [(t, r, sum(math.factorial(k) * float(np.sum(ch.layout(fld.dim, k).mult * A[i] ** 2))
                        for k, A in enumerate(fld.U[j])))
             for j, t in enumerate(times) for i, r in enumerate(model.r_grid)]
    files.append(write_csv(out / "U_norm_sq.csv", ["t", "r", "norm_sq"], norms))
    records = []
    deterministic = cfg.corr == "zero" or cfg.rho == 0.0
    if deterministic and model.drift.a2_zero and (cfg.a1 == "zero" or cfg.eps1 == 0) and cfg.f == "gauss":
        ref = sm.heat_gauss(model.r_grid[None, :], times[:, None])
        err = float(np.abs(U - ref).max() / np.abs(ref).max())
        records.append(_record("spde_heat_reference", err, 0.02, cfg, unit="relative to max |reference|"))
    return records, files


def run_fbm(cfg: RunConfig, out: Path) -> tuple[list, list]:
    grid = TimeGrid(cfg.n, cfg.T)
    k = gr.fbm_kernel(cfg.hurst, grid, quadrature=True)
    R = k.target()
    files = [k.to_csv(out / "fbm_kernel.csv"), k.to_csv(out / "fbm_quadrature_kernel.csv", "quadrature")]
    qcov = k.quadrature @ k.quadrature.T
    t = grid.times
    files.append(write_csv(out / "fbm_covariance.csv", ["s", "t", "R", "grid_factor", "quadrature"],
                           [(t[i], t[j], R[i, j], k.covariance()[i, j], qcov[i, j])
                            for i in range(1, grid.n + 1) for j in range(1, grid.n + 1)]))
    growth = []
    nn = 4
    while nn <= cfg.n:
        g = TimeGrid(nn, cfg.T)
        kk = gr.fbm_kernel(cfg.hurst, g)
        growth.append((nn, kk.integrator(np.eye(nn)).bound_constant))
        nn *= 2
    files.append(write_csv(out / "fbm_bound_growth.csv", ["n", "bound_constant"], growth))
    fac = float(np.abs(k.covariance() - R).max())
    qerr = float(np.abs(qcov - R).max() / np.abs(R).max())
    records = [_record("fbm_factorization", fac, 1e-10, cfg, quadrature_relative_error=qerr,
                       c_alpha=k.c_alpha, bound_growth=dict(growth))]
    return records, files


def run_density(cfg: RunConfig, out: Path) -> tuple[list, list]:
    cov = make_cov(cfg)
    drift = dn.DriftSpec.preset(cfg.a1, cfg.eps1, cfg.a2, cfg.eps2)
    small = drift.smallness(cov)
    records = [_record("drift_smallness", small, 1.0, cfg)]
    if small >= 1.0:
        return records, []
    s = sample_pairs(cov, cfg.seed, cfg.m)
    p = dn.density_p(drift, s, cov, with_zeta=False).value
    se = float(p.std(ddof=1) / math.sqrt(cfg.m)) if cfg.m > 1 else float("inf")
    records.append(_record("density_normalization", abs(float(p.mean()) - 1) / se, 4.0, cfg,
                           mean=float(p.mean()), unit="standard errors"))
    rows_m = min(cfg.m, 10 ** 4)
    head = sample_pairs(cov, cfg.seed, rows_m)
    ev = dn.density_p(drift, head, cov, with_zeta=True)
    files = [write_csv(out / "density_samples.csv", ["sample", "p", "zeta", "divergence_term", "quadratic_term"],
                       zip(range(rows_m), ev.value, ev.zeta, ev.divergence_term, ev.quadratic_term))]
    kmax = 2 * cov.n + 4
    bound = dn.factorial_bound(cov, drift, kmax)
    one = sample_pairs(cov, cfg.seed, 1)
    _, Dh = dn.drift_jacobian(drift, noise_from_whitened(cov, one.xi_prime[0]), cov)
    curve = dn.quasinilpotence_certificate(cov.S @ Dh, kmax)
    files.append(write_csv(out / "quasinilpotence.csv", ["k", "norm_power_root", "factorial_bound"],
                           zip(range(1, kmax + 1), curve, bound)))
    if cov.is_causal:
        records.append(_record("carleman_fredholm", float(np.abs(np.asarray(ev.zeta) - 1).max()), 1e-8, cfg))
        records.append(_record("quasinilpotence", float((curve / bound).max()), 1.0, cfg, unit="curve / bound"))
    return records, files


RUNNERS = {"verify": run_verify, "smooth": run_smooth, "spde": run_spde, "fbm": run_fbm,
           "density": run_density}


def output_dir(cfg: RunConfig) -> Path:
    return Path(cfg.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def run(cfg: RunConfig) -> RunReport:
    out = output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    records, files = RUNNERS[cfg.command](cfg, out)
    total = time.perf_counter() - t0
    report = RunReport(cfg.command, cfg.report_dict(), records, [Path(f).name for f in files])
    (out / "report.json").write_text(report.to_json())
    timings = {"total_seconds": total, "checks": {r.name: r.runtime for r in records}}
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True) + "\n")
    return report


def main(argv=None) -> int:
    try:
        cfg = parse_config(argv)
        report = run(cfg)
    except ConfigError as e:
        print(f"anticipating: error: {e}", file=sys.stderr)
        return 2
    except SystemExit as e:          # argparse usage errors
        return int(e.code or 0)
    for rec in report.records:
        print(rec.line())
    print(f"{'PASS' if report.passed else 'FAIL'}: {sum(r.passed for r in report.records)}/"
          f"{len(report.records)} checks, output in {output_dir(cfg)}")
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
