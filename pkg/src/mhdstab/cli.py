"""Experiment driver: convergence studies, viscosity sweeps, scheme comparison.

    mhdstab converge  --scheme all --example 1 --nu 1,1e-5,1e-10 --levels 2,4,8
    mhdstab sweep-nu  --scheme stab4f --levels 4
    mhdstab compare   --levels 2,4

Each command writes a CSV table, a manifest.json and gnuplot inputs into
``--out``. A ``key = value`` file passed with ``--config`` supplies the same
options; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .forms import SCHEMES, StabParams
from .mesh import Mesh, build_structured_tet_mesh, read_tetgen_mesh
from .metrics import error_indicators, observed_rate
from .mms import ManufacturedCase
from .solver import PicardConfig, run_transient

log = logging.getLogger("mhdstab")

CSV_HEADER = [
    "scheme", "nu", "level", "h", "dofs", "e_u", "e_p", "e_B",
    "rate_u", "rate_p", "rate_B", "picard_avg", "wall_s", "status",
]

COMMANDS = ("converge", "sweep-nu", "compare")

DEFAULTS = {
    "converge": dict(scheme="stab3f,stab4f", example=1, nu="1,1e-5,1e-10", levels="2,4,8", tau0=0.25),
    "sweep-nu": dict(
        scheme="stab3f,stab4f", example=1, nu=",".join(f"1e-{i}" for i in range(1, 12)), levels="4", tau0=0.125
    ),
    "compare": dict(scheme="nostab,stab3f,stab4f", example=2, nu_s=1e-10, nu_m=1e-2, levels="2,4", tau0=1 / 64),
}
COMMON_DEFAULTS = dict(order=1, t_final=1.0, out="results", verbose=False, jobs=1, nu_s=None, nu_m=None)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    command: str
    schemes: list
    example: int
    nus: list
    nu_s: float | None
    nu_m: float | None
    levels: list
    order: int = 1
    tau0: float = 0.25
    t_final: float = 1.0
    out: str = "results"
    mesh_node: str | None = None
    mesh_ele: str | None = None
    verbose: bool = False
    jobs: int = 1

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        for s in self.schemes:
            if s not in SCHEMES:
                raise ConfigError(f"unknown scheme {s!r}")
        if self.example not in (1, 2):
            raise ConfigError("example must be 1 or 2")
        if self.levels != sorted(self.levels) or len(set(self.levels)) != len(self.levels):
            raise ConfigError("mesh levels must be strictly ascending")
        if any(n < 1 for n in self.levels):
            raise ConfigError("mesh levels must be >= 1")
        if self.tau0 <= 0 or self.t_final <= 0:
            raise ConfigError("tau0 and t-final must be positive")
        if self.order not in (1, 2):
            raise ConfigError("order must be 1 or 2")
        if (self.mesh_node is None) != (self.mesh_ele is None):
            raise ConfigError("--mesh-node and --mesh-ele go together")
        for tau in self.time_steps():
            steps = self.t_final / tau
            if abs(steps - round(steps)) > 1e-9 * steps:
                raise ConfigError(f"t-final {self.t_final} is not a multiple of tau {tau}")

    def time_steps(self) -> list:
        """tau per level: halved per refinement, except compare (fixed tau)."""
        if self.command == "compare":
            return [self.tau0] * len(self.levels)
        return [self.tau0 / 2**i for i in range(len(self.levels))]

    def viscosities(self) -> list:
        """(label, nu_S, nu_M) triples."""
        if self.nu_s is not None or self.nu_m is not None:
            ns = self.nu_s if self.nu_s is not None else self.nu_m
            nm = self.nu_m if self.nu_m is not None else self.nu_s
            return [(ns, ns, nm)]
        return [(nu, nu, nu) for nu in self.nus]


# --- config parsing ------------------------------------------------------


def read_config_file(path) -> dict:
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _floats(text) -> list:
    if isinstance(text, (int, float)):
        return [float(text)]
    try:
        return [float(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise ConfigError(f"bad number list {text!r}") from exc


def _ints(text) -> list:
    return [int(v) for v in _floats(text)]


def _bool(v) -> bool:
    if isinstance(v, bool):
        return v
    return str(v).strip().lower() in ("1", "true", "yes", "on")


def _opt_float(v):
    return None if v is None or v == "" else float(v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhdstab", description="Stabilized H(div) MHD convergence experiments")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in zip(
        COMMANDS,
        ("mesh convergence study", "viscosity sweep on a fixed mesh", "three-scheme comparison (example 2)"),
    ):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="key = value file; flags override it")
        s.add_argument("--scheme", help="comma list of nostab, stab3f, stab4f, or 'all'")
        s.add_argument("--example", type=int, choices=(1, 2))
        s.add_argument("--nu", help="comma list; sets nu_S = nu_M")
        s.add_argument("--nu-s", dest="nu_s", type=float)
        s.add_argument("--nu-m", dest="nu_m", type=float)
        s.add_argument("--levels", help="comma list of structured mesh levels n")
        s.add_argument("--order", type=int)
        s.add_argument("--tau0", type=float, help="time step on the coarsest level")
        s.add_argument("--t-final", dest="t_final", type=float)
        s.add_argument("--out")
        s.add_argument("--mesh-node", dest="mesh_node")
        s.add_argument("--mesh-ele", dest="mesh_ele")
        s.add_argument("--jobs", type=int, help="worker processes")
        s.add_argument("--verbose", action="store_true", default=None)
    return p


def make_config(args: argparse.Namespace) -> ExperimentConfig:
    merged = dict(COMMON_DEFAULTS)
    merged.update(DEFAULTS[args.command])
    if args.config:
        filed = read_config_file(args.config)
        unknown = set(filed) - set(vars(args)) - {"scheme"}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        merged.update(filed)
    merged.update({k: v for k, v in vars(args).items() if v is not None and k not in ("command", "config")})

    schemes = str(merged["scheme"]).lower()
    schemes = list(SCHEMES) if schemes == "all" else [s.strip() for s in schemes.split(",") if s.strip()]
    return ExperimentConfig(
        command=args.command,
        schemes=schemes,
        example=int(merged["example"]),
        nus=_floats(merged.get("nu", "1")),
        nu_s=_opt_float(merged.get("nu_s")),
        nu_m=_opt_float(merged.get("nu_m")),
        levels=_ints(merged["levels"]),
        order=int(merged["order"]),
        tau0=float(merged["tau0"]),
        t_final=float(merged["t_final"]),
        out=str(merged["out"]),
        mesh_node=merged.get("mesh_node"),
        mesh_ele=merged.get("mesh_ele"),
        verbose=_bool(merged["verbose"]),
        jobs=int(merged["jobs"]),
    )


# --- running -------------------------------------------------------------


@dataclass(order=True)
class Cell:
    sort_key: tuple = field(init=False, repr=False)
    scheme: str
    nu_label: float
    nu_s: float
    nu_m: float
    level: int
    tau: float
    example: int
    order: int
    t_final: float
    variant: str
    mesh_node: str | None = None
    mesh_ele: str | None = None
    verbose: bool = False

    def __post_init__(self):
        self.sort_key = (SCHEMES.index(self.scheme), -self.nu_label, self.level)


def load_mesh(cell_or_cfg, level: int) -> Mesh:
    if cell_or_cfg.mesh_node:
        return read_tetgen_mesh(Path(cell_or_cfg.mesh_node).read_text(), Path(cell_or_cfg.mesh_ele).read_text())
    return build_structured_tet_mesh(level)


def run_cell(cell: Cell) -> dict:
    """Solve one (scheme, nu, level) case; failures become a status string."""
    row = dict(scheme=cell.scheme, nu=cell.nu_label, level=cell.level, h=math.nan, dofs=0,
               e_u=math.nan, e_p=math.nan, e_B=math.nan, picard_avg=math.nan, wall_s=math.nan, status="ok")
    start = time.perf_counter()
    try:
        mesh = load_mesh(cell, cell.level)
        case = ManufacturedCase(f"example{cell.example}", cell.nu_s, cell.nu_m)
        params = StabParams(nu_s=cell.nu_s, nu_m=cell.nu_m, tau=cell.tau, scheme=cell.scheme)
        traj = run_transient(
            cell.scheme, case, mesh, params, cell.tau, cell.t_final, order=cell.order,
            picard=PicardConfig(), stream=sys.stderr if cell.verbose else None,
        )
        rep = error_indicators(cell.scheme, traj, case, variant=cell.variant, level=cell.level)
        row.update(
            h=rep.h, dofs=traj.solver.n_dofs, e_u=rep.e_u, e_p=rep.e_p, e_B=rep.e_B,
            picard_avg=sum(d.picard_iters for d in traj.diagnostics) / len(traj.diagnostics),
            max_div_ratio=max(d.div_l2 / max(d.h1h_norm, 1e-300) for d in traj.diagnostics),
            parts=rep.parts,
        )
    except Exception as exc:  # recorded per row, the run continues
        log.error("%s nu=%g level=%d failed: %s", cell.scheme, cell.nu_label, cell.level, exc)
        row["status"] = f"failed: {type(exc).__name__}: {exc}".replace(",", ";").replace("\n", " ")
    row["wall_s"] = time.perf_counter() - start
    return row


def build_cells(cfg: ExperimentConfig) -> list:
    variant = "common" if cfg.command == "compare" else "full"
    levels = [0] if cfg.mesh_node else cfg.levels
    taus = cfg.time_steps()[: len(levels)]
    cells = [
        Cell(s, label, ns, nm, lvl, tau, cfg.example, cfg.order, cfg.t_final, variant,
             cfg.mesh_node, cfg.mesh_ele, cfg.verbose)
        for s in cfg.schemes
        for (label, ns, nm) in cfg.viscosities()
        for lvl, tau in zip(levels, taus)
    ]
    return sorted(cells)


def run_cells(cells: list, jobs: int = 1) -> list:
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(run_cell, cells))
    else:
        rows = [run_cell(c) for c in cells]
    for c, r in zip(cells, rows):
        r["_key"] = c.sort_key
    rows.sort(key=lambda r: r["_key"])
    return rows


def attach_rates(rows: list) -> list:
    """Pairwise rates between consecutive levels of each (scheme, nu) series."""
    series = {}
    for r in rows:
        series.setdefault((r["scheme"], r["nu"]), []).append(r)
    for group in series.values():
        group.sort(key=lambda r: r["level"])
        for name in ("u", "p", "B"):
            rates = observed_rate([g[f"e_{name}"] for g in group], [g["h"] for g in group])
            group[0][f"rate_{name}"] = math.nan
            for g, rate in zip(group[1:], rates):
                g[f"rate_{name}"] = rate
    return rows


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.9e}"
    return str(v)


def write_csv(path: Path, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([_fmt(r.get(k, math.nan)) for k in CSV_HEADER])


def sweep_summary(rows: list) -> dict:
    """max/min ratio of each indicator across nu, per scheme."""
    out = {}
    for r in rows:
        if r["status"] != "ok":
            continue
        d = out.setdefault(r["scheme"], {"e_u": [], "e_p": [], "e_B": []})
        for k in d:
            d[k].append(r[k])
    return {s: {k: max(v) / min(v) for k, v in d.items()} for s, d in out.items()}


def write_gnuplot(outdir: Path, stem: str, rows: list) -> None:
    pdir = outdir / "plots"
    pdir.mkdir(parents=True, exist_ok=True)
    series = {}
    for r in rows:
        if r["status"] == "ok":
            series.setdefault((r["scheme"], r["nu"]), []).append(r)
    plots = []
    for (scheme, nu), group in series.items():
        name = f"{stem}_{scheme}_nu{nu:.0e}.dat"
        with open(pdir / name, "w") as fh:
            fh.write("# h e_u e_p e_B\n")
            for g in sorted(group, key=lambda g: -g["h"]):
                fh.write(f"{g['h']:.9e} {g['e_u']:.9e} {g['e_p']:.9e} {g['e_B']:.9e}\n")
        plots.append((name, f"{scheme} nu={nu:.0e}"))
    lines = [
        "set logscale xy",
        "set xlabel 'h'",
        "set key outside",
        f"set terminal pngcairo size 1200,400",
        f"set output '{stem}.png'",
        "set multiplot layout 1,3",
    ]
    for col, label in ((2, "e_u"), (3, "e_p"), (4, "e_B")):
        lines.append(f"set title '{label}'")
        lines.append(
            "plot " + ", ".join(f"'{n}' using 1:{col} with linespoints title '{t}'" for n, t in plots)
            + ", x title 'O(h)', x**1.5 title 'O(h^{1.5})'"
        )
    lines.append("unset multiplot")
    (pdir / f"{stem}.gp").write_text("\n".join(lines) + "\n")


def write_manifest(outdir: Path, cfg: ExperimentConfig, stem: str, extra: dict) -> None:
    levels = [0] if cfg.mesh_node else cfg.levels
    hashes = {}
    for lvl in levels:
        hashes[str(lvl)] = load_mesh(cfg, lvl).content_hash()
    manifest = {
        "version": __version__,
        "command": cfg.command,
        "config": asdict(cfg),
        "time_steps": cfg.time_steps()[: len(levels)],
        "mesh": "tetgen" if cfg.mesh_node else "structured",
        "mesh_hashes": hashes,
        "csv": f"{stem}.csv",
        **extra,
    }
    if cfg.command == "sweep-nu":
        manifest["note"] = "fixed structured level stands in for an unspecified unstructured mesh"
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def execute(cfg: ExperimentConfig) -> tuple[Path, list]:
    outdir = Path(cfg.out)
    outdir.mkdir(parents=True, exist_ok=True)
    stem = cfg.command.replace("-", "_")
    rows = attach_rates(run_cells(build_cells(cfg), cfg.jobs))
    path = outdir / f"{stem}.csv"
    write_csv(path, rows)
    write_gnuplot(outdir, stem, rows)
    extra = {}
    if cfg.command == "sweep-nu":
        extra["ratio_max_min"] = sweep_summary(rows)
    write_manifest(outdir, cfg, stem, extra)
    return path, rows


def _print_table(rows: list, stream) -> None:
    stream.write(f"{'scheme':8} {'nu':>8} {'lvl':>4} {'e_u':>11} {'e_p':>11} {'e_B':>11} "
                 f"{'r_u':>6} {'r_p':>6} {'r_B':>6} status\n")
    for r in rows:
        stream.write(
            f"{r['scheme']:8} {r['nu']:8.0e} {r['level']:4d} {r['e_u']:11.4e} {r['e_p']:11.4e} {r['e_B']:11.4e} "
            f"{r.get('rate_u', math.nan):6.2f} {r.get('rate_p', math.nan):6.2f} {r.get('rate_B', math.nan):6.2f} "
            f"{r['status']}\n"
        )


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = make_config(args)
    except (ConfigError, OSError) as exc:
        parser.error(str(exc))
    logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    path, rows = execute(cfg)
    _print_table(rows, sys.stdout)
    if cfg.command == "sweep-nu":
        for scheme, ratios in sweep_summary(rows).items():
            print(f"{scheme}: max/min " + " ".join(f"{k}={v:.3f}" for k, v in ratios.items()))
    print(f"wrote {path}")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


if __name__ == "__main__":
    sys.exit(main())
