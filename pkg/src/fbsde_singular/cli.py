"""Command-line runner: load a problem, run a named study, write CSV/JSON artifacts.

Every JSON file carries ``schema: 1`` and the run configuration. Output is a
deterministic function of the configuration: no timestamps, sorted keys,
floats written with ``repr`` precision.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import adjoint, conditions, hjb, model, simulate, variation
from .malliavin import MalliavinConfig, nabla, zero_oracle

STUDIES = ("validate", "simulate", "adjoint", "check", "hjb", "study", "example")
SCHEMA = 1
EXAMPLE_CONTROLS = (-1.0, -0.5, 0.0, 0.5, 1.0)


@dataclass
class RunConfig:
    problem: object = "quadratic_example"          # built-in name, JSON path or Problem
    study: str = "example"
    out: Path = Path("out")
    seed: int = 0
    n_paths: int = 10000
    n_steps: Optional[int] = None
    regression_degree: int = 3
    export_paths: Optional[Path] = None
    levels: Sequence[float] = (0.2, 0.1, 0.05, 0.025)
    kind: str = "regular"
    n_x: int = 201
    x_min: Optional[float] = None
    x_max: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def describe(self, problem: model.Problem) -> dict:
        return {"problem": problem.name, "study": self.study, "seed": int(self.seed),
                "n_paths": int(self.n_paths), "n_steps": int(problem.grid.n_steps),
                "T": float(problem.grid.T), "t0": float(problem.grid.t0),
                "regression_degree": int(self.regression_degree),
                "levels": [float(v) for v in self.levels], "kind": self.kind,
                "n_x": int(self.n_x)}


def _dump(obj: dict, path: Path) -> None:
    path.write_text(json.dumps(conditions._jsonable(obj), indent=2, sort_keys=True) + "\n")


def _load(cfg: RunConfig) -> model.Problem:
    problem = model.load_problem(cfg.problem)
    if cfg.n_steps is not None:
        problem = problem.with_grid(n_steps=int(cfg.n_steps))
    return problem


def _mc(cfg: RunConfig) -> simulate.McConfig:
    return simulate.McConfig(n_paths=int(cfg.n_paths), seed=int(cfg.seed),
                             regression_degree=int(cfg.regression_degree))


def _spatial(cfg: RunConfig, problem: model.Problem) -> hjb.SpatialGrid:
    x0 = float(problem.x0[0])
    lo = x0 - 2.0 if cfg.x_min is None else cfg.x_min
    hi = x0 + 2.0 if cfg.x_max is None else cfg.x_max
    return hjb.SpatialGrid(lo, hi, int(cfg.n_x))


def _reference(problem: model.Problem):
    """Reference pair: zero regular control clipped into U, no singular mass."""
    u = problem.region.clip(np.zeros(problem.coeffs.k))
    return u, model.SingularControlPath.zeros(problem.grid.n_steps, problem.coeffs.m)


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def _validate(cfg, problem, out):
    rep = model.validate_coefficients(problem, seed=cfg.seed)
    name, err = rep.worst()
    doc = {"report": rep.to_dict(), "worst_oracle": name, "worst_error": err}
    if not rep.passed:
        print(f"derivative oracle {name} disagrees with finite differences "
              f"(error {err:.3e} > {rep.tol:g})", file=sys.stderr)
    return rep.passed, doc


def _simulate(cfg, problem, out):
    u, xi = _reference(problem)
    est = simulate.evaluate_cost(problem, u, xi, _mc(cfg))
    if cfg.export_paths is not None:
        simulate.export_paths_csv(cfg.export_paths, est.forward, est.backward)
    return True, {"J": est.J, "se": est.se,
                  "degraded_steps": est.backward.degraded_steps}


def _solve_all(cfg, problem):
    mc = _mc(cfg)
    u, xi = _reference(problem)
    fwd = simulate.simulate_forward(problem, u, xi, mc)
    bwd = simulate.solve_bsde(problem, fwd, mc)
    cls = adjoint.solve_classical_adjoints(problem, fwd, bwd, mc)
    sing = adjoint.solve_singular_adjoint(problem, fwd, bwd, mc)
    return mc, u, xi, fwd, bwd, cls, sing


def _adjoint(cfg, problem, out):
    mc, u, xi, fwd, bwd, cls, sing = _solve_all(cfg, problem)
    adjoint.export_adjoints_csv(out / "adjoints.csv", fwd.times, sing, cls, max_paths=100)
    if cfg.export_paths is not None:
        simulate.export_paths_csv(cfg.export_paths, fwd, bwd)
    return True, {"ratio_deviation": adjoint.check_ratio_identity(sing, cls),
                  "degraded_steps": sorted(set(cls.degraded_steps) | set(sing.degraded_steps))}


def _condition_reports(problem, fwd, bwd, cls, sing, xi):
    c = problem.coeffs
    smp = conditions.check_singular_optimality(sing, c.G if not callable(c.G) else c.G_at, c.K,
                                               xi, fwd.times)
    csg = conditions.check_classical_singularity(problem, fwd, bwd, cls)
    return smp, csg


def _check(cfg, problem, out):
    mc, u, xi, fwd, bwd, cls, sing = _solve_all(cfg, problem)
    smp, csg = _condition_reports(problem, fwd, bwd, cls, sing, xi)
    var = variation.solve_regular_variations(problem, fwd, 1.0)
    vi = conditions.variational_inequality_value(problem, fwd, bwd, cls, var, 1.0, eps=0.1)
    for rep in (smp, csg):
        _dump({"schema": SCHEMA, **rep.to_dict()}, out / f"{rep.name}.json")
    with open(out / "conditions_per_time.csv", "w") as fh:
        fh.write("t,min_margin,misplaced_mass,residual_i,residual_ii\n")
        pm = smp.diagnostics["per_time_min_margin"]
        mm = smp.diagnostics["misplaced_mass_per_step"]
        ri = csg.diagnostics["per_time_residual_i"]
        rii = csg.diagnostics["per_time_residual_ii"]
        for k, t in enumerate(fwd.times[:-1]):
            fh.write(f"{t!r},{float(pm[k])!r},{float(mm[k])!r},{float(ri[k])!r},{float(rii[k])!r}\n")
    doc = {"singular_maximum_principle": smp.to_dict(),
           "classical_singularity": csg.to_dict(),
           "variational_inequality": {"eps": 0.1, "value": vi.value, "se": vi.value_se,
                                      "mixed_integral": vi.mixed_integral, "terms": vi.terms}}
    # necessary conditions only; classical singularity is a classification
    return smp.passed, doc


def _hjb(cfg, problem, out):
    vg = hjb.solve_hjb_vi(problem, _spatial(cfg, problem))
    hjb.write_value_grid_csv(vg, out / "value_grid.csv")
    summary = hjb.hjb_summary(vg, problem)
    consistency = hjb.fd_mc_consistency(vg, problem, _mc(cfg))
    summary["fd_mc"] = consistency
    passed = summary["residual"] <= 1e-6 and consistency["passed"]
    return passed, summary


def _study(cfg, problem, out):
    mc = _mc(cfg)
    if cfg.kind == "singular":
        xi = model.SingularControlPath.atom(problem.grid.n_steps, problem.grid.n_steps // 2, 1.0,
                                            problem.coeffs.m)
        res = variation.convergence_study(problem, "singular", cfg.levels, mc, xi=xi)
    else:
        res = variation.convergence_study(problem, cfg.kind, cfg.levels, mc)
    variation.write_study(res, out / "study.csv", out / "study.json")
    return True, res.to_dict()


def _example(cfg, problem, out):
    """Full pipeline on the reference pair: simulation, adjoints, conditions, HJB, links."""
    checks = {}
    mc, u, xi, fwd, bwd, cls, sing = _solve_all(cfg, problem)

    def gate(name, ok, **values):
        checks[name] = {"passed": bool(ok), **values}

    n = fwd.n_steps
    gate("adjoint_p_q", max(np.abs(cls.p).max(), np.abs(cls.q).max()) <= 1e-8,
         max_abs_p=float(np.abs(cls.p).max()), max_abs_q=float(np.abs(cls.q).max()))
    gate("adjoint_P_Q", max(np.abs(cls.P - 1).max(), np.abs(cls.Q).max()) <= 1e-8,
         max_abs_P_minus_1=float(np.abs(cls.P - 1).max()), max_abs_Q=float(np.abs(cls.Q).max()))
    gate("weights_unit", np.array_equal(cls.chi, np.ones_like(cls.chi))
         and np.array_equal(sing.frak_q, np.ones_like(sing.frak_q)),
         max_abs_chi_minus_1=float(np.abs(cls.chi - 1).max()),
         max_abs_frak_q_minus_1=float(np.abs(sing.frak_q - 1).max()))
    mixed = conditions.mixed_hamiltonian_path(problem, fwd, bwd, cls)
    gate("mixed_hamiltonian_unit", np.abs(mixed - 1).max() <= 1e-8,
         max_abs_error=float(np.abs(mixed - 1).max()))

    smp, csg = _condition_reports(problem, fwd, bwd, cls, sing, xi)
    gate("singular_maximum_principle", smp.passed, min_margin=smp.min_margin,
         complementarity_residual=smp.complementarity_residual)
    d = csg.diagnostics
    # reported, not gated: singular in the classical sense needs both residuals to vanish
    checks["classical_singularity"] = {
        "classification": "singular" if csg.passed else "not singular",
        "residual_i": d["residual_i"], "residual_ii": d["residual_ii"],
        "equivalence_discrepancy": d["equivalence_discrepancy"], "gated": False}
    gate("singularity_equivalence", d["equivalence_discrepancy"] <= 1e-8,
         discrepancy=d["equivalence_discrepancy"])

    # both Malliavin inputs are deterministic along the reference pair
    mcfg = MalliavinConfig(mode="closed_form")
    nab_m = nabla(None, fwd.dW, fwd.dt, mcfg, oracle=zero_oracle)
    nab_u = nabla(None, fwd.dW, fwd.dt, mcfg, oracle=zero_oracle)
    m2 = {}
    worst = 0.0
    for uv in EXAMPLE_CONTROLS:
        rep = conditions.pointwise_m2(problem, fwd, bwd, cls, uv, nab_m, nab_u, mixed=mixed)
        err = float(np.abs(rep.lhs - (uv - fwd.u[..., 0]) ** 2).max())
        worst = max(worst, err)
        m2[repr(uv)] = {"min_lhs": rep.min_lhs, "max_error_vs_square": err}
    gate("pointwise_m2", worst <= 1e-8, per_control=m2, max_error=worst,
         nabla_source="closed_form")

    grid = _spatial(cfg, problem)
    vg = hjb.solve_hjb_vi(problem, grid)
    hjb.write_value_grid_csv(vg, out / "value_grid.csv")
    res = hjb.complementarity_residual(vg, problem)
    gate("hjb_complementarity", res.residual <= 1e-6, residual=res.residual)
    i0 = int(np.argmin(np.abs(vg.x - problem.x0[0])))
    gate("hjb_value_at_start", abs(vg.v[0, i0]) <= 1e-3, value=float(vg.v[0, i0]))
    fb = hjb.extract_feedback(vg, problem)
    gate("feedback_at_start", float(np.abs(fb.control.table[:, i0]).max()) == 0.0,
         max_abs_u=float(np.abs(fb.control.table[:, i0]).max()))
    cons = hjb.fd_mc_consistency(vg, problem, mc)
    gate("fd_mc_consistency", cons["passed"], **cons)

    ffwd = simulate.simulate_forward(problem, fb.control, fb.push, mc)
    fbwd = simulate.solve_bsde(problem, ffwd, mc)
    fcls = adjoint.solve_classical_adjoints(problem, ffwd, fbwd, mc)
    link = hjb.check_dpp_mp_connection(vg, ffwd, fcls, problem)
    gate("dpp_mp_connection", link.passed, **link.to_dict())
    ver = hjb.verification_check(vg, ffwd, problem)
    gate("verification", ver.passed, **ver.to_dict())
    semi = hjb.semiconcavity_check(vg, 1.0)
    gate("semiconcavity", semi.passed, **semi.to_dict())

    passed = all(v["passed"] for v in checks.values() if v.get("gated", True))
    return passed, {"checks": checks, "J": float(bwd.Y[0].mean()), "n_steps": n}


_RUNNERS = {"validate": _validate, "simulate": _simulate, "adjoint": _adjoint, "check": _check,
            "hjb": _hjb, "study": _study, "example": _example}


def run(cfg: RunConfig) -> int:
    """Execute one study; 0 when every check passes, 1 on failure or error, 2 on usage errors."""
    if cfg.study not in STUDIES:
        print(f"usage error: unknown study {cfg.study!r}; choose from {', '.join(STUDIES)}",
              file=sys.stderr)
        return 2
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        problem = _load(cfg)
        passed, doc = _RUNNERS[cfg.study](cfg, problem, out)
    except Exception as exc:     # structured record, nonzero status
        _dump({"schema": SCHEMA, "study": cfg.study,
               "error": {"type": type(exc).__name__, "message": str(exc)}}, out / "error.json")
        print(f"{cfg.study} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        if cfg.extra.get("traceback"):
            traceback.print_exc()
        return 1
    _dump({"schema": SCHEMA, "config": cfg.describe(problem), "passed": bool(passed), **doc},
          out / f"{cfg.study}.json")
    return 0 if passed else 1


def _levels(text: str):
    return [float(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fbsde", description=__doc__.splitlines()[0])
    ap.add_argument("--problem", default="quadratic_example", help="built-in name or JSON path")
    ap.add_argument("--study", default="example", choices=STUDIES)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--paths", type=int, default=10000)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--out", type=Path, default=Path("out"))
    ap.add_argument("--export-paths", type=Path, default=None)
    ap.add_argument("--levels", type=_levels, default=[0.2, 0.1, 0.05, 0.025])
    ap.add_argument("--kind", choices=("regular", "singular"), default="regular")
    ap.add_argument("--degree", type=int, default=3, help="regression polynomial degree")
    ap.add_argument("--nx", type=int, default=201, help="HJB spatial points")
    ap.add_argument("--x-min", type=float, default=None)
    ap.add_argument("--x-max", type=float, default=None)
    ap.add_argument("--traceback", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = RunConfig(problem=args.problem, study=args.study, out=args.out, seed=args.seed,
                    n_paths=args.paths, n_steps=args.steps, regression_degree=args.degree,
                    export_paths=args.export_paths, levels=args.levels, kind=args.kind,
                    n_x=args.nx, x_min=args.x_min, x_max=args.x_max,
                    extra={"traceback": args.traceback})
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
