"""Command-line interface.

Four commands:

  test      run the testing procedure on a CSV of (x, sigma) pairs
  deconv    fit the prior deconvolution model and export a density grid
  simulate  run built-in Monte Carlo experiments
  oracle    compute analytic oracle constants for the fixed designs

Interchange formats are CSV (mandatory header, UTF-8, '.' decimal) and JSON.
Flags override config-file values, which override defaults. Exit codes:
0 success, 2 usage or input error, 3 internal numerical failure. The
HAMT_THREADS environment variable caps replicate parallelism in `simulate`.
"""

import csv
import functools
import json
import math
import os
import sys

import click
import numpy as np

from .clfdr import clfdr_hat_batch
from .core import gauss_pdf, interval, left_ray
from .deconv import (
    BasisConfig,
    GridSupport,
    PriorModel,
    QpReport,
    default_grid,
    fit_prior,
    prior_mass,
    save_model,
)
from .mtp import oracle_power, oracle_threshold, step_up, z_oracle_threshold
from .pilot_kde import fit_pilot, pilot_density_batch
from .simlab import (
    PROCEDURES,
    aggregate,
    builtin_scenario,
    run_experiment,
    write_aggregate_csv,
    write_replicates_csv,
)

_PROC_ALIASES = {
    "hamt": "HAMT",
    "deconv": "DECONV-baseline",
    "npmle": "NPMLE-baseline",
    "bh": "BH",
    "adaptive-bh": "adaptive-BH",
    "or": "OR",
    "zor": "ZOR",
}

_DENSITY_POINTS = 201
_SIGMA_LEVELS = (5.0, 25.0, 50.0, 75.0, 95.0)  # percentiles of the input sigma


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _guard(fn):
    """Map library failures to the documented exit codes."""

    @functools.wraps(fn)
    def inner(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except np.linalg.LinAlgError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)
        except (RuntimeError, ArithmeticError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)
        except ValueError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)

    return inner


def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise click.UsageError(f"config {path}: invalid JSON ({exc})")
    if not isinstance(cfg, dict):
        raise click.UsageError(f"config {path}: expected a JSON object")
    return cfg


def _resolve(ctx, cfg, name, current, cast=None, key=None):
    """Flag > config file > default, per parameter.

    `name` is the click parameter; `key` the config-file key when the two
    differ (e.g. parameter out_dir, key out).
    """
    key = key or name
    source = ctx.get_parameter_source(name)
    if source is not None and source.name == "COMMANDLINE":
        return current
    if key in cfg:
        value = cfg[key]
        if cast is not None:
            try:
                value = cast(value)
            except (TypeError, ValueError):
                raise click.UsageError(f"config key {key!r}: cannot interpret {value!r}")
        return value
    return current


def _parse_region(spec):
    if spec is None:
        raise click.UsageError("--region is required: left:MU0, left:inf, or interval:LO,HI")
    text = str(spec).strip()
    kind, _, arg = text.partition(":")
    kind = kind.lower()
    try:
        if kind == "left" and arg:
            mu0 = float(arg)
            if math.isnan(mu0) or mu0 == -math.inf:
                raise click.UsageError(f"region {spec!r}: left:MU0 needs MU0 > -inf")
            return left_ray(mu0)
        if kind == "interval" and arg:
            parts = arg.split(",")
            if len(parts) != 2:
                raise click.UsageError(f"region {spec!r}: interval takes exactly two endpoints")
            return interval(float(parts[0]), float(parts[1]))
    except click.ClickException:
        raise
    except ValueError as exc:
        raise click.UsageError(f"region {spec!r}: {exc}")
    raise click.UsageError(f"unrecognized region {spec!r}; use left:MU0, left:inf, or interval:LO,HI")


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise click.UsageError(f"alpha must lie in (0, 1), got {alpha}")
    return float(alpha)


def _check_seed(seed):
    seed = int(seed)
    if not -(2**63) <= seed < 2**64:
        raise click.UsageError("seed must fit in 64 bits")
    return seed


def _check_min(name, value, minimum):
    value = int(value)
    if value < minimum:
        raise click.UsageError(f"{name} must be >= {minimum}, got {value}")
    return value


def _parse_procedures(spec):
    names = []
    for token in str(spec).split(","):
        token = token.strip()
        if not token:
            continue
        canonical = _PROC_ALIASES.get(token.lower())
        if canonical is None and token in PROCEDURES:
            canonical = token
        if canonical is None:
            known = ", ".join(_PROC_ALIASES)
            raise click.UsageError(f"unknown procedure {token!r}; known: {known}")
        if canonical not in names:
            names.append(canonical)
    if not names:
        raise click.UsageError("--procedures selected nothing")
    return tuple(names)


def _ensure_out_dir(out):
    if out is None:
        raise click.UsageError("--out DIRECTORY is required")
    os.makedirs(out, exist_ok=True)
    return out


def _read_observations(path):
    """Read unit-level `x,sigma` / `id,x,sigma`, or replicate-level `id,value`.

    Replicate-level rows are grouped by id in first-appearance order and
    reduced to x = mean and sigma = sample sd / sqrt(n).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise click.UsageError(f"{path}: empty file")
        if header in (["x", "sigma"], ["id", "x", "sigma"]):
            return _read_unit_rows(path, reader, has_id=header[0] == "id")
        if header == ["id", "value"]:
            return _read_replicate_rows(path, reader)
        raise click.UsageError(
            f"{path}: unrecognized header {','.join(header)!r}; "
            "expected x,sigma or id,x,sigma or id,value"
        )


def _parse_float(path, line, label, text):
    try:
        value = float(text)
    except ValueError:
        raise click.UsageError(f"{path} line {line}: could not parse {label} from {text!r}")
    if not math.isfinite(value):
        raise click.UsageError(f"{path} line {line}: {label} must be finite, got {text!r}")
    return value


def _read_unit_rows(path, reader, has_id):
    width = 3 if has_id else 2
    ids, xs, sigmas = [], [], []
    for row in reader:
        line = reader.line_num
        if not row or all(not field.strip() for field in row):
            continue
        if len(row) != width:
            raise click.UsageError(f"{path} line {line}: expected {width} fields, got {len(row)}")
        x = _parse_float(path, line, "x", row[-2])
        sig = _parse_float(path, line, "sigma", row[-1])
        if sig <= 0:
            raise click.UsageError(f"{path} line {line}: sigma must be positive, got {row[-1]}")
        ids.append(row[0].strip() if has_id else str(len(xs)))
        xs.append(x)
        sigmas.append(sig)
    if len(xs) < 2:
        raise click.UsageError(f"{path}: need at least 2 observations, got {len(xs)}")
    return ids, np.array(xs), np.array(sigmas)


def _read_replicate_rows(path, reader):
    order, groups = [], {}
    for row in reader:
        line = reader.line_num
        if not row or all(not field.strip() for field in row):
            continue
        if len(row) != 2:
            raise click.UsageError(f"{path} line {line}: expected 2 fields, got {len(row)}")
        unit = row[0].strip()
        value = _parse_float(path, line, "value", row[1])
        if unit not in groups:
            groups[unit] = []
            order.append(unit)
        groups[unit].append(value)
    ids, xs, sigmas = [], [], []
    for unit in order:
        values = np.array(groups[unit])
        n = values.size
        if n < 2:
            raise click.UsageError(f"{path}: id {unit!r} has {n} replicate value(s); need at least 2")
        sigma = float(values.std(ddof=1)) / math.sqrt(n)
        if sigma <= 0:
            raise click.UsageError(
                f"{path}: id {unit!r} has zero variance across {n} replicates, "
                "so sigma = 0; this unit cannot be tested"
            )
        ids.append(unit)
        xs.append(float(values.mean()))
        sigmas.append(sigma)
    if len(xs) < 2:
        raise click.UsageError(f"{path}: need at least 2 units, got {len(xs)}")
    return ids, np.array(xs), np.array(sigmas)


def _fit_model(x, sigma, grid_size, num_basis):
    data = (x, sigma)
    pilot = fit_pilot(data)
    values = pilot_density_batch(pilot, data)
    grid = default_grid(data, S=grid_size)
    basis = BasisConfig(K=num_basis)
    return fit_prior(data, pilot, grid=grid, basis=basis, pilot_values=values)


def _fmt(value) -> str:
    return "%.12g" % float(value)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@click.group()
@click.version_option(package_name="hamt", prog_name="hamt")
def main():
    """Multiple testing with unit-level standard deviations.

    Config files (--config PATH) are JSON objects whose keys match the long
    flag names with underscores (alpha, region, grid_size, num_basis, reps,
    seed, out, procedures, u, full). Flags override the file; the file
    overrides defaults.
    """


@main.command("test")
@click.argument("input_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--region", "region_spec", default=None, help="left:MU0, left:inf, or interval:LO,HI.")
@click.option("--alpha", type=float, default=0.1, show_default=True, help="Target FDR level.")
@click.option("--grid-size", type=int, default=50, show_default=True, help="Prior support size S.")
@click.option("--num-basis", type=int, default=10, show_default=True, help="Basis size K.")
@click.option("--out", "out_dir", default=None, help="Output directory (created if absent).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
@_guard
def cmd_test(ctx, input_csv, region_spec, alpha, grid_size, num_basis, out_dir, config_path):
    """Test the units in INPUT_CSV and write decisions plus a summary.

    INPUT_CSV needs a header: either unit-level `x,sigma` (optionally
    `id,x,sigma`) or replicate-level `id,value` rows, which are reduced to
    the per-unit mean and standard error. Writes decisions.csv with columns
    id,x,sigma,clfdr,rejected and summary.json with m, rejected, threshold,
    alpha, S, K, and the fit status.
    """
    cfg = _load_config(config_path)
    region = _parse_region(_resolve(ctx, cfg, "region_spec", region_spec, key="region"))
    alpha = _check_alpha(_resolve(ctx, cfg, "alpha", alpha, float))
    grid_size = _check_min("grid-size", _resolve(ctx, cfg, "grid_size", grid_size, int), 2)
    num_basis = _check_min("num-basis", _resolve(ctx, cfg, "num_basis", num_basis, int), 1)
    out_dir = _ensure_out_dir(_resolve(ctx, cfg, "out_dir", out_dir, key="out"))

    ids, x, sigma = _read_observations(input_csv)
    model, report = _fit_model(x, sigma, grid_size, num_basis)
    stats = clfdr_hat_batch(model, x, sigma, region)
    result = step_up(stats, alpha)

    decisions_path = os.path.join(out_dir, "decisions.csv")
    with open(decisions_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "x", "sigma", "clfdr", "rejected"])
        for i, unit in enumerate(ids):
            writer.writerow(
                [unit, _fmt(x[i]), _fmt(sigma[i]), _fmt(stats[i]), int(result.decisions.decisions[i])]
            )

    summary = {
        "m": int(x.size),
        "rejected": int(result.decisions.rejected_count),
        "threshold": float(result.realized_threshold),
        "alpha": alpha,
        "S": grid_size,
        "K": num_basis,
        "qp_status": report.status,
    }
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(json.dumps(summary, sort_keys=True))


@main.command("deconv")
@click.argument("input_csv", type=click.Path(exists=True, dir_okay=False))
@click.option("--grid-size", type=int, default=50, show_default=True, help="Prior support size S.")
@click.option("--num-basis", type=int, default=10, show_default=True, help="Basis size K.")
@click.option("--out", "out_dir", default=None, help="Output directory (created if absent).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
@_guard
def cmd_deconv(ctx, input_csv, grid_size, num_basis, out_dir, config_path):
    """Fit the prior model on INPUT_CSV and export a density grid.

    Writes model.json (reloadable, reproduces identical statistics) and
    density.csv with columns x,sigma,density: the fitted marginal density of
    x given sigma on 201 equally spaced x values spanning the data range
    extended by three times the largest sigma level, evaluated at the 5th,
    25th, 50th, 75th, and 95th percentiles of the input sigma.

    --grid-size 1 skips the fit and writes the one-point model whose single
    weight row is 1.
    """
    cfg = _load_config(config_path)
    grid_size = _check_min("grid-size", _resolve(ctx, cfg, "grid_size", grid_size, int), 1)
    num_basis = _check_min("num-basis", _resolve(ctx, cfg, "num_basis", num_basis, int), 1)
    out_dir = _ensure_out_dir(_resolve(ctx, cfg, "out_dir", out_dir, key="out"))

    ids, x, sigma = _read_observations(input_csv)
    if grid_size == 1:
        point = 0.5 * (float(x.min()) + float(x.max()))
        weights = np.zeros((1, num_basis))
        weights[0, 0] = 1.0
        model = PriorModel(
            grid=GridSupport(np.array([point])),
            basis=BasisConfig(K=num_basis),
            weights=weights,
            sigma_ref=np.array([float(np.median(sigma))]),
        )
        report = QpReport(objective=0.0, iterations=0, primal_infeasibility=0.0, status="degenerate")
    else:
        model, report = _fit_model(x, sigma, grid_size, num_basis)

    save_model(os.path.join(out_dir, "model.json"), model, report)

    levels = [float(v) for v in np.percentile(sigma, _SIGMA_LEVELS)]
    span = 3.0 * max(levels)
    xg = np.linspace(float(x.min()) - span, float(x.max()) + span, _DENSITY_POINTS)
    grid_points = np.asarray(model.grid.points, dtype=float)
    with open(os.path.join(out_dir, "density.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "sigma", "density"])
        for level in levels:
            mass = np.atleast_1d(prior_mass(model, level))
            dens = gauss_pdf(xg[:, None], grid_points[None, :], level) @ mass
            for xi, di in zip(xg, dens):
                writer.writerow([_fmt(xi), _fmt(level), _fmt(di)])

    click.echo(
        json.dumps(
            {"m": int(x.size), "S": grid_size, "K": num_basis, "qp_status": report.status,
             "sigma_levels": levels},
            sort_keys=True,
        )
    )


@main.command("simulate")
@click.argument("scenario")
@click.option("--u", type=float, default=None, help="Sweep parameter (scenario default if omitted).")
@click.option("--reps", type=int, default=50, show_default=True, help="Monte Carlo replicates.")
@click.option("--full", is_flag=True, help="Use 200 replicates unless --reps is given explicitly.")
@click.option("--seed", type=int, default=0, show_default=True, help="Base seed; replicate i uses seed + i.")
@click.option("--alpha", type=float, default=0.1, show_default=True, help="Target FDR level.")
@click.option(
    "--procedures",
    default="hamt,deconv,npmle,bh,adaptive-bh,or,zor",
    show_default=True,
    help="Comma-separated subset of: " + ", ".join(_PROC_ALIASES),
)
@click.option("--out", "out_dir", default=None, help="Output directory (created if absent).")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
@_guard
def cmd_simulate(ctx, scenario, u, reps, full, seed, alpha, procedures, out_dir, config_path):
    """Run a built-in SCENARIO and write per-replicate and aggregate CSVs.

    Writes replicates.csv (procedure,replicate,fdp,ptp,rejections,seed) and
    aggregate.csv (procedure,u,mean_fdp,se_fdp,mean_ptp,se_ptp), and prints
    the aggregate table. Parallelism follows HAMT_THREADS.
    """
    cfg = _load_config(config_path)
    u = _resolve(ctx, cfg, "u", u, float)
    full = bool(_resolve(ctx, cfg, "full", full))
    reps_source = ctx.get_parameter_source("reps")
    explicit_reps = reps_source is not None and reps_source.name == "COMMANDLINE"
    reps = int(_resolve(ctx, cfg, "reps", reps, int))
    if full and not explicit_reps and "reps" not in cfg:
        reps = 200
    reps = _check_min("reps", reps, 1)
    seed = _check_seed(_resolve(ctx, cfg, "seed", seed, int))
    alpha = _check_alpha(_resolve(ctx, cfg, "alpha", alpha, float))
    procs = _parse_procedures(_resolve(ctx, cfg, "procedures", procedures))
    out_dir = _ensure_out_dir(_resolve(ctx, cfg, "out_dir", out_dir, key="out"))

    try:
        design = builtin_scenario(scenario, u=u, alpha=alpha)
    except ValueError as exc:
        raise click.UsageError(str(exc))

    rows = run_experiment(design, procedures=procs, reps=reps, base_seed=seed)
    aggs = aggregate(rows, u=design.u)

    write_replicates_csv(os.path.join(out_dir, "replicates.csv"), rows)
    write_aggregate_csv(os.path.join(out_dir, "aggregate.csv"), aggs)

    click.echo(f"scenario={design.name} u={_fmt(design.u)} m={design.m} alpha={_fmt(design.alpha)} "
               f"reps={reps} seed={seed}")
    click.echo(f"{'procedure':<17s} {'mean_fdp':>9s} {'se_fdp':>8s} {'mean_ptp':>9s} {'se_ptp':>8s}")
    for agg in aggs:
        click.echo(
            f"{agg.procedure:<17s} {agg.mean_fdp:9.4f} {agg.se_fdp:8.4f} "
            f"{agg.mean_ptp:9.4f} {agg.se_ptp:8.4f}"
        )
    failures = [r for r in rows if r.error]
    if failures:
        click.echo(f"note: {len(failures)} procedure run(s) failed; see replicates.csv", err=True)


@main.command("oracle")
@click.argument("example")
@click.option("--alpha", type=float, default=0.1, show_default=True, help="Target mFDR level.")
@click.option("--out", "out_dir", default=None, help="Optional directory for oracle.json.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_context
@_guard
def cmd_oracle(ctx, example, alpha, out_dir, config_path):
    """Analytic oracle constants for EXAMPLE (example-1 or example-2).

    Prints a JSON object with t_star (oracle threshold), t_z (z-value
    threshold), power_or, and power_zor.
    """
    cfg = _load_config(config_path)
    alpha = _check_alpha(_resolve(ctx, cfg, "alpha", alpha, float))
    if example not in ("example-1", "example-2"):
        raise click.UsageError(f"unknown example {example!r}; choose example-1 or example-2")
    design = builtin_scenario(example)

    ores = oracle_threshold(design.prior, design.sigma_law, design.region, alpha)
    zres = z_oracle_threshold(design.prior, design.sigma_law, design.region, alpha)
    payload = {
        "t_star": float(ores.t_star),
        "t_z": float(zres.t_z),
        "power_or": float(oracle_power(design.prior, design.sigma_law, design.region, ores.t_star)),
        "power_zor": float(zres.power),
    }
    text = json.dumps(payload, sort_keys=True)
    click.echo(text)
    if out_dir is not None:
        out_dir = _ensure_out_dir(out_dir)
        with open(os.path.join(out_dir, "oracle.json"), "w", encoding="utf-8") as fh:
            fh.write(text + "\n")


if __name__ == "__main__":
    main()
