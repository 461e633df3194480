"""``omlab`` command line front end.

Each subcommand writes ``report.json``, per-radius CSV tables and two-column
plot-data CSVs into the output directory, and exits with

* 0 when every pass flag is true,
* 1 on a verification failure,
* 2 on a configuration error,
* 3 when a radius schedule is infeasible for the mass backend.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from omlab import __version__
from omlab.ballmass import RadiusSchedule, ScheduleInfeasible, ball_masses, write_mass_csv
from omlab.config import ConfigError, ExperimentConfig, load_config, parse_pairs, parse_point
from omlab.expr import ExpressionError
from omlab.omfit import (
    anchor_independence,
    fit_local_dimension,
    fit_small_ball,
    mass_source,
    om_difference,
)
from omlab.spaces import (
    GRID,
    PATHS,
    SampledSpace,
    build_atoms,
    build_grid,
    build_path_lattice,
    field_from_expression,
    measure,
    metric,
    read_csv_space,
)
from omlab.verify import (
    divergence_probe_c,
    rigidity_check,
    verify_part_a,
    verify_part_b,
    verify_target_om,
    verify_uniformizer,
)

log = logging.getLogger("omlab")

SUBCOMMANDS = (
    "om-diff",
    "fit-dim",
    "fit-smallball",
    "verify-a",
    "verify-b",
    "probe-c",
    "uniformize",
    "target-om",
    "rigidity",
)
CSV_VERSION = "1"


class Context:
    """Space, fields and output plumbing built from a validated config."""

    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.digest = cfg.digest
        self.csv_fields: dict = {}
        self.space = self._build_space()

    def _build_space(self) -> SampledSpace:
        cfg = self.cfg
        kind = cfg.get("space", "kind", "grid")
        if kind == "grid":
            lower = cfg.require("space", "lower")
            upper = cfg.require("space", "upper")
            if len(lower) != len(upper):
                raise ConfigError("space.lower and space.upper differ in dimension")
            res = [int(r) for r in cfg.require("space", "resolution")]
            return build_grid(lower, upper, res if len(res) > 1 else res[0])
        if kind == "atoms":
            pts = [parse_point(p) for p in cfg.require("space", "atoms").split(";")]
            pts = [p if isinstance(p, list) else [float(p)] for p in pts]
            masses = cfg.require("space", "masses")
            labels = cfg.get("space", "labels")
            labels = [s.strip() for s in labels.split(",")] if labels else None
            return build_atoms(pts, masses, labels)
        if kind == "paths":
            centers = cfg.get("space", "centers", "0")
            return build_path_lattice(
                cfg.require("space", "steps"),
                cfg.get("space", "terminal_time", 1.0),
                [c.strip() for c in centers.split(";") if c.strip()],
            )
        path = cfg.base_dir / cfg.require("space", "csv")
        space, self.csv_fields = read_csv_space(path)
        return space

    def field(self, name: str, required: bool = False):
        src = self.cfg.get("fields", name)
        if src is None:
            if required:
                raise ConfigError(f"missing required key fields.{name}")
            return None
        if src.startswith("csv:"):
            col = src[4:].strip()
            if col not in self.csv_fields:
                raise ConfigError(f"fields.{name}: no CSV column {col!r}")
            return self.csv_fields[col]
        try:
            return field_from_expression(self.space, src)
        except ExpressionError as exc:
            raise ConfigError(f"fields.{name}: {exc}") from None

    def point(self, p):
        if self.space.kind == GRID and isinstance(p, (int, float)):
            p = [float(p)]
        if isinstance(p, int) and self.space.kind != PATHS and not self.space.labels:
            p = [float(p)]
        try:
            self.space.locate(p)
        except (ValueError, KeyError, IndexError) as exc:
            raise ConfigError(f"bad point {p!r}: {exc}") from None
        return p

    def pairs(self):
        return [(self.point(a), self.point(b)) for a, b in parse_pairs(self.cfg.require("pairs", "pairs"))]

    def anchor(self, key: str = "anchor"):
        raw = self.cfg.get("run", key)
        if raw is None:
            if key == "anchor":
                return self.pairs()[0][0] if self.cfg.get("pairs", "pairs") else 0
            return None
        return self.point(parse_point(raw))

    def schedule(self) -> RadiusSchedule:
        c = self.cfg
        try:
            return RadiusSchedule(
                r_max=c.require("schedule", "r_max"),
                ratio=c.get("schedule", "ratio", 0.8),
                count=c.get("schedule", "count", 8),
                multipliers=tuple(c.get("schedule", "multipliers", ())),
                outer=c.get("schedule", "outer"),
            )
        except ValueError as exc:
            raise ConfigError(f"schedule: {exc}") from None

    def measure_kwargs(self) -> dict:
        if self.space.kind != PATHS:
            return {}
        c = self.cfg
        kw = {
            "samples": c.get("measure", "samples", 100_000),
            "seed": c.get("measure", "seed", 0),
            "partitions": c.get("measure", "partitions", 16),
            "workers": c.get("measure", "workers", 1),
        }
        if c.get("measure", "method"):
            kw["method"] = c.get("measure", "method")
        return kw

    # -- output -------------------------------------------------------------

    def write_json(self, name: str, payload: dict) -> Path:
        payload = {
            "omlab_version": __version__,
            "config_digest": self.digest,
            "config": self.cfg.canonical(),
            **payload,
        }
        path = self.out / name
        path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")
        return path

    def write_csv(self, name: str, header, rows) -> Path:
        path = self.out / name
        with open(path, "w", newline="") as fh:
            fh.write(f"# config_digest={self.digest} csv_version={CSV_VERSION}\n")
            w = csv.writer(fh)
            w.writerow(header)
            for row in rows:
                w.writerow([_cell(v) for v in row])
        return path


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _om_tables(ctx: Context, estimates) -> None:
    rows = []
    for i, e in enumerate(estimates):
        for r, lr, se in e.per_radius:
            rows.append((i, r, lr, se))
        ctx.write_csv(f"plot_logratio_pair{i}.csv", ("r", "log_ratio"), [(r, lr) for r, lr, _ in e.per_radius])
    ctx.write_csv("per_radius.csv", ("pair", "r", "log_ratio", "std_error"), rows)


def _mass_tables(ctx: Context, masses, label: str) -> None:
    write_mass_csv(masses, ctx.out / f"masses_{label}.csv", ctx.digest)
    ctx.write_csv(
        f"plot_logmass_{label}.csv",
        ("log_r", "log_mass"),
        [(math.log(e.radius), e.log_mass) for e in masses if math.isfinite(e.log_mass)],
    )


def cmd_om_diff(ctx: Context) -> bool:
    mu = measure(ctx.space, ctx.field("V"), **ctx.measure_kwargs())
    d = metric(ctx.space, ctx.field("U"))
    sched = ctx.schedule()
    ests = [om_difference(mu, d, x, y, sched) for x, y in ctx.pairs()]
    _om_tables(ctx, ests)
    passed = all(e.diverged == "none" for e in ests)
    ctx.write_json("report.json", {
        "subcommand": "om-diff", "pass": passed, "radii": sched.radii,
        "estimates": [e.to_dict() for e in ests],
    })
    return passed


def cmd_fit_dim(ctx: Context) -> bool:
    mu = measure(ctx.space, ctx.field("V"), **ctx.measure_kwargs())
    d = metric(ctx.space, ctx.field("U"))
    sched = ctx.schedule()
    fit_op = lambda q: fit_local_dimension(mu, d, q, sched)  # noqa: E731
    q2 = ctx.anchor("anchor2")
    payload = {"subcommand": "fit-dim", "radii": sched.radii, "multipliers": sched.multipliers}
    if q2 is not None:
        rep = anchor_independence(fit_op, ctx.anchor(), q2, ctx.cfg.get("run", "tolerance", 0.05))
        fit = rep.first
        payload["anchor_independence"] = rep.to_dict()
        passed = rep.agree
    else:
        fit = fit_op(ctx.anchor())
        passed = True
    p = ctx.cfg.get("run", "p")
    if p is not None:
        passed &= abs(fit.p - p) <= ctx.cfg.get("run", "tolerance", 0.05)
    radii = np.unique(np.concatenate([sched.radii] + [c * sched.radii for c in sched.multipliers]))
    _mass_tables(ctx, ball_masses(mu, d, ctx.anchor(), radii), "anchor")
    payload.update({"pass": bool(passed), "fit": fit.to_dict()})
    ctx.write_json("report.json", payload)
    return bool(passed)


def _alpha_grid(ctx: Context):
    g = ctx.cfg.get("run", "alpha_grid")
    if g is None:
        return None
    if len(g) != 3 or g[2] <= 0 or not 0 < g[0] <= g[1]:
        raise ConfigError("run.alpha_grid: need start, stop, step with 0 < start <= stop")
    return np.arange(g[0], g[1] + g[2] / 2, g[2])


def cmd_fit_smallball(ctx: Context) -> bool:
    mu = measure(ctx.space, ctx.field("V"), **ctx.measure_kwargs())
    d = metric(ctx.space, ctx.field("U"))
    window = tuple(ctx.cfg.get("run", "window", [0.25, 1.0]))
    grid = _alpha_grid(ctx)
    q = ctx.anchor()
    fit_op = lambda a: fit_small_ball(mass_source(mu, d, a), ctx.space.locate(a), grid, window)  # noqa: E731
    q2 = ctx.anchor("anchor2")
    payload = {"subcommand": "fit-smallball"}
    if q2 is not None:
        rep = anchor_independence(fit_op, q, q2)
        fit, passed = rep.first, rep.agree
        payload["anchor_independence"] = rep.to_dict()
    else:
        fit = fit_op(q)
        passed = fit.detected
    _mass_tables(ctx, ball_masses(mu, d, q, np.geomspace(*window, 10)), "anchor")
    payload.update({"pass": bool(passed), "fit": fit.to_dict()})
    ctx.write_json("report.json", payload)
    return bool(passed)


def _transform(ctx: Context, report, name: str) -> bool:
    report.config_digest = ctx.digest
    payload = {"subcommand": name, "radii": ctx.schedule().radii, **report.to_dict()}
    ctx.write_json("report.json", payload)
    ctx.write_csv(
        "pairs.csv",
        ("pair", "empirical", "predicted", "gap", "error"),
        [(i, p.empirical, p.predicted, p.gap, p.error) for i, p in enumerate(report.pairs)],
    )
    (ctx.out / "report.txt").write_text(report.to_text() + "\n")
    return report.passed


def cmd_verify_a(ctx: Context) -> bool:
    tol = ctx.cfg.get("run", "tolerance")
    rep = verify_part_a(
        ctx.space, ctx.cfg.get("run", "c", 0.0), ctx.field("V"), ctx.pairs(), ctx.schedule(),
        tol, **ctx.measure_kwargs(),
    )
    return _transform(ctx, rep, "verify-a")


def cmd_verify_b(ctx: Context) -> bool:
    rep = verify_part_b(
        ctx.space, ctx.field("U", True), ctx.field("V"), ctx.cfg.require("run", "p"),
        ctx.pairs(), ctx.schedule(), ctx.cfg.get("run", "tolerance"), **ctx.measure_kwargs(),
    )
    return _transform(ctx, rep, "verify-b")


def cmd_uniformize(ctx: Context) -> bool:
    rep = verify_uniformizer(
        ctx.space, ctx.field("f", True), ctx.pairs(), ctx.schedule(),
        ctx.cfg.get("run", "tolerance", 0.1), sign=ctx.cfg.get("run", "sign", 1.0),
    )
    return _transform(ctx, rep, "uniformize")


def cmd_target_om(ctx: Context) -> bool:
    rep = verify_target_om(
        ctx.space, ctx.field("f", True), ctx.field("h", True), ctx.pairs(), ctx.schedule(),
        ctx.cfg.get("run", "tolerance", 0.15),
    )
    return _transform(ctx, rep, "target-om")


def _probe_smallball(ctx: Context, mu0):
    sched = ctx.schedule()
    window = tuple(ctx.cfg.get("run", "window", [float(sched.radii.min()), float(sched.r_max)]))
    return fit_small_ball(mass_source(mu0, metric(ctx.space), 0), 0, _alpha_grid(ctx), window)


def cmd_probe_c(ctx: Context) -> bool:
    if ctx.space.kind != PATHS:
        raise ConfigError("probe-c needs space.kind = paths")
    kw = ctx.measure_kwargs()
    kw.setdefault("method", "transfer")
    mu0 = measure(ctx.space, **kw)
    U = ctx.field("U", True)
    sb = _probe_smallball(ctx, mu0)
    sched = ctx.schedule()
    threshold = ctx.cfg.get("run", "threshold", 20.0)
    probes, notes = [], []
    for x, y in ctx.pairs():
        if U.at(x) == U.at(y):
            e = om_difference(mu0, metric(ctx.space, U), x, y, sched, divergence_threshold=threshold)
            notes.append(f"pair {x}->{y}: U(x) = U(y); no divergence detected")
            probes.append({"x": e.x, "y": e.y, "pass": False, "diverged": False,
                           "log_ratios": [row[1] for row in e.per_radius],
                           "radii": [row[0] for row in e.per_radius]})
            continue
        rep = divergence_probe_c(ctx.space, U, x, y, sched, sb, mu0, threshold=threshold)
        if not rep.diverged:
            notes.append(f"pair {x}->{y}: no divergence detected")
        probes.append(rep.to_dict())
    for i, p in enumerate(probes):
        ctx.write_csv(f"plot_logratio_pair{i}.csv", ("r", "log_ratio"), zip(p["radii"], p["log_ratios"]))
    passed = bool(probes) and all(p["pass"] for p in probes)
    for n in notes:
        log.warning(n)
    ctx.write_json("report.json", {
        "subcommand": "probe-c", "pass": passed, "smallball": sb.to_dict(),
        "probes": probes, "notes": notes, "radii": sched.radii,
    })
    return passed


def cmd_rigidity(ctx: Context) -> bool:
    kw = ctx.measure_kwargs()
    sched = ctx.schedule()
    if ctx.space.kind != PATHS:
        rep = rigidity_check(ctx.space, ctx.field("U"), ctx.field("U2"), None, [], sched, None)
    else:
        mu0 = measure(ctx.space, **kw)
        probe_mu = measure(ctx.space, method="transfer")
        sb = _probe_smallball(ctx, probe_mu)
        rep = rigidity_check(
            ctx.space, ctx.field("U"), ctx.field("U2"), mu0, ctx.pairs(), sched, sb,
            probe_measure=probe_mu,
        )
    rep.config_digest = ctx.digest
    ctx.write_json("report.json", {"subcommand": "rigidity", "radii": sched.radii, **rep.to_dict()})
    return rep.passed


COMMANDS = {
    "om-diff": cmd_om_diff,
    "fit-dim": cmd_fit_dim,
    "fit-smallball": cmd_fit_smallball,
    "verify-a": cmd_verify_a,
    "verify-b": cmd_verify_b,
    "probe-c": cmd_probe_c,
    "uniformize": cmd_uniformize,
    "target-om": cmd_target_om,
    "rigidity": cmd_rigidity,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="omlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"omlab {__version__}")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", "-c", help="experiment config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config key (repeatable)")
    parser.add_argument("--seed", type=int, help="shorthand for --set measure.seed=N")
    parser.add_argument("--workers", type=int, help="shorthand for --set measure.workers=N")
    parser.add_argument("--out", help="output directory (default: output.dir or ./omlab-out)")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"measure.seed={args.seed}")
    if args.workers is not None:
        overrides.append(f"measure.workers={args.workers}")
    try:
        cfg = load_config(args.config, overrides)
        out = Path(args.out or cfg.get("output", "dir", "omlab-out"))
        out.mkdir(parents=True, exist_ok=True)
        ctx = Context(cfg, out)
        passed = COMMANDS[args.subcommand](ctx)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ScheduleInfeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return 3
    except (ValueError, ExpressionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if not passed:
        print(f"{args.subcommand}: verification failed (see {out / 'report.json'})", file=sys.stderr)
        return 1
    log.info("%s passed; report in %s", args.subcommand, out)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
