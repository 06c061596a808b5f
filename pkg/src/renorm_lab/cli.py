"""Batch experiment runner.

One experiment per invocation; configuration comes from a JSON file
(--config) with individual flags overriding file values.  All artifacts are
written under --out: one or more CSV files plus summary.json.  Re-running a
config with the same seed produces byte-identical CSV bodies.

Exit codes: 0 success, 2 configuration error, 3 numeric failure (partial
outputs plus failure.json are left in the output directory).

RENORM_LAB_THREADS caps the thread pool used for the defect grid.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import commutator as comm
from . import cylapprox as cyl
from . import neumann as neu
from .descriptors import DescriptorError, load_field, load_kernel
from .expflow import HSMatrix, flow_solution, log_ut, weak_continuity_residual
from .fields import ARCTAN_RENORM, SIGMOID_RENORM, sign_field
from .gauss import GaussianSpace, expect
from .mollifier import unit_kernel
from .optimizer import verify_bound
from .reporting import summary_payload, write_csv, write_json

_FIELD_SHORTHAND = {
    "sign-x2": {"kind": "sign", "vector": [1.0, 0.0], "normal": [0.0, 1.0],
                "offset": 0.0},
    "skew": {"kind": "linear", "matrix": [[0.0, 1.0], [-1.0, 0.0]]},
    "e11": {"kind": "linear", "matrix": [[1.0, 0.0], [0.0, 0.0]]},
    "e12": {"kind": "linear", "matrix": [[0.0, 1.0], [0.0, 0.0]]},
}

_MATRIX_SHORTHAND = {
    "e11": [[1.0, 0.0], [0.0, 0.0]],
    "e12": [[0.0, 1.0], [0.0, 0.0]],
    "skew": [[0.0, 1.0], [-1.0, 0.0]],
}

_BETAS = {"arctan": ARCTAN_RENORM, "sigmoid": SIGMOID_RENORM}


class ConfigError(ValueError):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("RENORM_LAB_THREADS", "1")))
    except ValueError:
        return 1


def _parse_eps(text: str) -> list[float]:
    """'0.2:0.025' -> geometric grid with ratio 1/2, ends inclusive."""
    hi, lo = (float(t) for t in text.split(":"))
    if lo <= 0 or hi <= lo:
        raise ConfigError(f"bad eps range {text!r}")
    grid = [hi]
    while grid[-1] / 2.0 >= lo * (1 - 1e-12):
        grid.append(grid[-1] / 2.0)
    return grid


def _parse_kernels(text: str, cfg: dict) -> list[dict]:
    specs = []
    for part in text.split(";"):
        part = part.strip()
        if part == "const":
            specs.append({"kind": "constant"})
        elif part.startswith("flow:T="):
            for T in part[len("flow:T="):].split(","):
                specs.append({"kind": "flow",
                              "matrix": cfg.get("kernel_matrix",
                                                _MATRIX_SHORTHAND["e12"]),
                              "horizon": float(T),
                              "nodes": int(cfg.get("flow_nodes", 12))})
        else:
            raise ConfigError(f"unknown kernel spec {part!r}")
    return specs


def _field_doc(value) -> dict:
    if isinstance(value, str):
        if value not in _FIELD_SHORTHAND:
            raise ConfigError(f"unknown field shorthand {value!r}")
        return _FIELD_SHORTHAND[value]
    return value


def _matrix_doc(value):
    if isinstance(value, str):
        if value not in _MATRIX_SHORTHAND:
            raise ConfigError(f"unknown matrix shorthand {value!r}")
        return _MATRIX_SHORTHAND[value]
    return value


def _space(cfg: dict, dim: int) -> GaussianSpace:
    return GaussianSpace(dim=dim,
                         quad_order=int(cfg.get("quad_order", 20)),
                         mc_budget=int(cfg.get("mc_budget", 100_000)),
                         seed=int(cfg.get("seed", 0)))


# ---------------------------------------------------------------------------
# experiment runners
# ---------------------------------------------------------------------------

def run_defect(cfg: dict, out: Path) -> dict:
    doc = _field_doc(cfg.get("field", "sign-x2"))
    dim = int(cfg.get("dim", 2))
    space = _space(cfg, dim)
    b = load_field(doc, space)
    kernel_docs = cfg.get("kernels", [{"kind": "constant"}])
    if isinstance(kernel_docs, str):
        kernel_docs = _parse_kernels(kernel_docs, cfg)
    kernels = [load_kernel(kd, space) for kd in kernel_docs]
    eps_grid = cfg.get("eps_grid", [0.2, 0.1, 0.05, 0.025])
    if isinstance(eps_grid, str):
        eps_grid = _parse_eps(eps_grid)
    phis = comm.test_battery(dim)[: int(cfg.get("n_phis", 3))]
    beta = _BETAS[cfg.get("beta", "arctan")]

    def u_one(t, pts):
        return np.ones(pts.shape[0])

    report = comm.defect_experiment(
        b, u_one, [beta], kernels, eps_grid, phis, space,
        u_sup=1.0, enforce_solution=bool(cfg.get("enforce_solution", False)),
        max_workers=_threads())

    rows = [(r.eps, r.kernel, r.phi, r.beta,
             r.residual.value, r.residual.std_error,
             r.aniso.value, r.aniso.std_error,
             r.first_error, r.second_error, int(r.bound_ok))
            for r in report.rows]
    write_csv(out / "defect_report.csv",
              ["eps", "kernel", "phi", "beta", "residual", "residual_se",
               "aniso_bound", "aniso_se", "first_error", "second_error",
               "bound_ok"], rows)
    results = {
        "defect_limit": report.defect_limit,
        "solution_residual": report.solution_residual,
        "all_rows_bounded": all(r.bound_ok for r in report.rows),
    }
    write_json(out / "summary.json",
               summary_payload("defect", cfg, results))
    return results


def run_optimize(cfg: dict, out: Path) -> dict:
    M = HSMatrix(np.asarray(_matrix_doc(cfg.get("matrix", "e11")),
                            dtype=float))
    T_grid = cfg.get("T_grid", [1.0, 5.0, 20.0])
    if isinstance(T_grid, str):
        T_grid = [float(t) for t in T_grid.split(",")]
    space = _space(cfg, M.dim)
    if space.dim > 4 or cfg.get("force_mc", True):
        space = space.with_(mc_budget=int(cfg.get("mc_budget", 100_000)))
        method = "monte-carlo"
    rows = verify_bound(M, T_grid, space,
                        nodes=int(cfg.get("flow_nodes", 16)))
    write_csv(out / "bound_table.csv",
              ["T", "objective", "bound", "std_error", "pass"],
              [(r.horizon, r.objective, r.bound, r.std_error, int(r.passed))
               for r in rows])
    results = {"all_passed": all(r.passed for r in rows),
               "objectives": {str(r.horizon): r.objective for r in rows}}
    write_json(out / "summary.json", summary_payload("optimize", cfg, results))
    return results


def run_expflow(cfg: dict, out: Path) -> dict:
    M = HSMatrix(np.asarray(_matrix_doc(cfg.get("matrix", "skew")),
                            dtype=float))
    space = _space(cfg, M.dim).with_(quad_order=int(cfg.get("quad_order", 64)))
    t_grid = cfg.get("t_grid", [0.0, 0.25, 0.5, 0.75, 1.0])
    rows = []
    for t in t_grid:
        fs = flow_solution(M, float(t))
        mass = expect(space, lambda pts: np.exp(log_ut(fs, pts))).value
        rows.append((t, mass, abs(mass - 1.0), fs.det2))
    phis = _expflow_test_battery(M.dim)
    weak = weak_continuity_residual(M, phis, space,
                                    t_span=float(cfg.get("t_span", 1.0)))
    write_csv(out / "expflow.csv",
              ["t", "mass", "mass_error", "det2"], rows)
    results = {"weak_residual": weak,
               "max_mass_error": max(r[2] for r in rows)}
    write_json(out / "summary.json", summary_payload("expflow", cfg, results))
    return results


def _expflow_test_battery(dim: int):
    def theta(t):
        return np.sin(np.pi * t) ** 2

    def theta_p(t):
        return np.pi * np.sin(2.0 * np.pi * t)

    out = []
    for psi in comm.test_battery(dim):
        out.append((theta, theta_p, psi.f, psi.grad))
    return out


def run_cylapprox(cfg: dict, out: Path) -> dict:
    dim = int(cfg.get("dim", 3))
    space = _space(cfg, dim).with_(quad_order=int(cfg.get("quad_order", 16)))
    battery_docs = cfg.get("fields") or _default_cyl_battery(dim)
    rows = []
    ok = True
    for doc in battery_docs:
        b = load_field(_field_doc(doc), space)
        for N in range(1, dim + 1):
            proj = cyl.Projection(dim, N)
            bN = cyl.cylindrical_approx(b, proj, space)
            gap = cyl.l1_distance(b, bN, space)
            div_rep = cyl.divergence_identity_check(b, proj, space)
            con = cyl.tv_contraction_check(b, proj, "hs", space)
            ok = ok and div_rep.passed and con.passed and con.tv_passed
            rows.append((getattr(b, "name", "field"), N, gap, div_rep.gap_l1,
                         con.tv_reduced, con.tv_full, int(con.passed)))
    write_csv(out / "cylapprox.csv",
              ["field", "N", "l1_gap", "div_gap", "tv_reduced", "tv_full",
               "jensen_pass"], rows)
    results = {"all_passed": ok}
    write_json(out / "summary.json", summary_payload("cylapprox", cfg, results))
    return results


def _default_cyl_battery(dim: int):
    rng = np.random.default_rng(5)
    M = rng.standard_normal((dim, dim)).round(3).tolist()
    docs = [{"kind": "linear", "matrix": M}]
    if dim >= 2:
        nu = [0.0] * dim
        nu[1] = 1.0
        docs.append({"kind": "sign", "vector": [1.0] + [0.0] * (dim - 1),
                     "normal": nu, "offset": 0.0})
    return docs


_NEUMANN_F = {
    "one": lambda pts: np.ones(pts.shape[0]),
    "x": lambda pts: pts[:, 0],
    "cospi": lambda pts: np.cos(np.pi * pts[:, 0]),
}


def run_neumann(cfg: dict, out: Path) -> dict:
    kind = cfg.get("domain", "interval")
    lam = float(cfg.get("lambda", 1.0))
    fname = cfg.get("f", "x")
    f = _NEUMANN_F.get(fname)
    if f is None:
        raise ConfigError(f"unknown load {fname!r}")
    levels = int(cfg.get("refine", 5))
    if kind == "interval":
        dom = neu.IntervalDomain(float(cfg.get("a", -1.0)),
                                 float(cfg.get("b", 1.0)),
                                 int(cfg.get("elements", 8)))
        battery = neu.smooth_phi_battery_1d()
    elif kind == "disk":
        dom = neu.disk_domain(int(cfg.get("rings", 4)),
                              float(cfg.get("radius", 1.0)))
        battery = neu.smooth_phi_battery_2d()
    else:
        raise ConfigError(f"unknown domain {kind!r}")
    rows = neu.refinement_study(dom, lam, f, levels, battery)
    write_csv(out / "convergence.csv",
              ["level", "elements", "weak_residual", "boundary_flux",
               "gap_to_next"],
              [(r.level, r.elements, r.weak_residual, r.boundary_flux,
                r.gap_to_next) for r in rows])
    sol = neu.solve_neumann(dom, lam, f)
    comp = neu.comparison_check(sol)
    results = {
        "weak_residuals": [r.weak_residual for r in rows],
        "comparison_passed": comp.passed,
        "coercive": sol.coercive,
    }
    write_json(out / "summary.json", summary_payload("neumann", cfg, results))
    return results


def run_identities(cfg: dict, out: Path) -> dict:
    dim = int(cfg.get("dim", 2))
    n_pts = int(cfg.get("points", 100))
    rng = np.random.default_rng(int(cfg.get("seed", 0)))
    v = _identity_field(dim)
    rows = []
    worst = {"euclid": 0.0, "wiener": 0.0, "speed": 0.0}
    for _ in range(n_pts):
        x = rng.standard_normal(dim)
        y = rng.standard_normal(dim)
        s = float(rng.uniform(0.05, 1.0))
        worst["euclid"] = max(worst["euclid"],
                              comm.euclid_rotation_residual(v, x, y, s))
        worst["wiener"] = max(worst["wiener"],
                              comm.wiener_rotation_residual(v, x, y, s))
        worst["speed"] = max(worst["speed"],
                             comm.flow_speed_residual(x, y, s))
    for name, val in worst.items():
        rows.append((name, n_pts, val, int(val < 1e-6)))
    write_csv(out / "identities.csv",
              ["identity", "points", "max_residual", "pass"], rows)
    results = {"max_residuals": worst,
               "all_passed": all(v < 1e-6 for v in worst.values())}
    write_json(out / "summary.json",
               summary_payload("identities", cfg, results))
    return results


def _identity_field(dim: int) -> comm.TwoVarField:
    # v_i(x, y) = sin(x_i) cos(y_i) + x_{i+1} y_i  (indices mod dim)
    def value(xs, ys):
        roll = np.roll(xs, -1, axis=1)
        return np.sin(xs) * np.cos(ys) + roll * ys

    def div_x(xs, ys):
        return np.sum(np.cos(xs) * np.cos(ys), axis=1)

    def div_y(xs, ys):
        roll = np.roll(xs, -1, axis=1)
        return np.sum(-np.sin(xs) * np.sin(ys) + roll, axis=1)

    return comm.TwoVarField(value, div_x, div_y, name="sincos")


_RUNNERS = {
    "defect": run_defect,
    "optimize": run_optimize,
    "expflow": run_expflow,
    "cylapprox": run_cylapprox,
    "neumann": run_neumann,
    "identities": run_identities,
}


def _load_config(args: argparse.Namespace) -> dict:
    cfg: dict = {}
    if args.config:
        try:
            with open(args.config, "r", encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}")
    for key, val in vars(args).items():
        if key in ("command", "config", "out") or val is None:
            continue
        cfg[key.replace("__", ".")] = val
    return cfg


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="renorm-lab",
                                     description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    common = dict(config=(["--config"], dict(help="JSON config file")),
                  out=(["--out"], dict(default="out", help="output directory")),
                  seed=(["--seed"], dict(type=int)))
    for name in _RUNNERS:
        p = sub.add_parser(name)
        for flags, kw in common.values():
            p.add_argument(*flags, **kw)
        if name == "defect":
            p.add_argument("--field")
            p.add_argument("--kernels")
            p.add_argument("--eps", dest="eps_grid")
        elif name == "optimize":
            p.add_argument("--matrix")
            p.add_argument("--T", dest="T_grid")
        elif name == "neumann":
            p.add_argument("--domain")
            p.add_argument("--f")
            p.add_argument("--lambda", dest="lambda_", type=float)
            p.add_argument("--refine", type=int)
        elif name == "expflow":
            p.add_argument("--matrix")

    args = parser.parse_args(argv)
    out = Path(args.out)
    try:
        cfg = _load_config(args)
        if "lambda_" in cfg:
            cfg["lambda"] = cfg.pop("lambda_")
    except (ConfigError, DescriptorError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out.mkdir(parents=True, exist_ok=True)
    try:
        _RUNNERS[args.command](cfg, out)
    except (ConfigError, DescriptorError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # numeric failure: leave partials + failure.json
        write_json(out / "failure.json",
                   {"experiment": args.command, "error": repr(exc)})
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
