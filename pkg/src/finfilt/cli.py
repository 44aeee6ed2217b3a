"""Command-line front end.

Every command reads an optional JSON config, applies flag overrides, writes
its artifacts to ``--out`` and finishes with ``manifest.json`` listing the
resolved config, its hash, library versions and the SHA-256 of each
artifact.  Wall-clock timings go to the log and to ``timings.json``, which is
kept out of the manifest so that artifacts stay byte-identical across runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path
from typing import Literal, Optional

import numpy as np
import scipy
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__
from .cir import CirParams, simulate_panel
from .errors import FilterStepError, FinFiltError, InputError
from .expfam import ExpFamilyDensity
from .hedging import Claim, GridSpec, RegimeModel, simulate_cost_process, simulate_paths, solve_claim_pde
from .io import file_sha256, read_json, read_series, read_yield_panel, write_csv, write_json, write_yield_panel
from .kalman import QmlOptions, estimate_qml, run_kalman
from .oracle import GridDensity, bayes_step, default_grid, kl_to_grid, volatility_from_grid
from .svm import SvmParams, run_filter, simulate_svm

logger = logging.getLogger("finfilt")

COMMANDS = (
    "simulate-svm",
    "filter-svm",
    "oracle-svm",
    "simulate-cir",
    "estimate-cir",
    "filter-cir",
    "price-claim",
    "hedge",
)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class SvmParamsModel(_Strict):
    rho: float = 0.95
    sigma: float = Field(0.26, gt=0)
    gamma: float = -9.0


class GaussianModel(_Strict):
    mean: float = 0.0
    var: float = Field(10.0, gt=0)


class SvmBlock(_Strict):
    params: SvmParamsModel = SvmParamsModel()
    n: int = Field(500, ge=1)
    order: int = Field(2, ge=2)
    mode: Literal["m", "2m"] = "2m"
    grid_nodes: int = Field(4001, ge=11)
    initial: Optional[GaussianModel] = None
    x0: Optional[float] = None


class CirParamsModel(_Strict):
    k: list[float] = [0.5]
    theta: list[float] = [0.06]
    sigma: list[float] = [0.15]
    lam: list[float] = Field([-0.1], alias="lambda")
    delta: list[float] = [5e-4]

    def build(self) -> CirParams:
        return CirParams(self.k, self.theta, self.sigma, self.lam, self.delta)


class CirBlock(_Strict):
    params: CirParamsModel = CirParamsModel()
    n: int = Field(250, ge=1)
    dt: float = Field(1.0, gt=0)
    maturities: list[float] = [0.25, 0.5, 1.0, 2.0, 5.0, 10.0]
    x0: Optional[list[float]] = None
    start: Optional[CirParamsModel] = None
    restarts: int = Field(3, ge=0)
    max_iter: int = Field(4000, ge=1)


class RegimeBlock(_Strict):
    sigma: list[float] = [0.2]
    lam: Optional[list[list[float]]] = Field(None, alias="lambda")
    T: float = Field(1.0, gt=0)


class ClaimBlock(_Strict):
    payoff: Literal["call", "put", "identity"] = "call"
    strike: float = 100.0


class GridBlock(_Strict):
    n_space: int = Field(400, ge=4)
    n_time: int = Field(400, ge=1)
    s_max: Optional[float] = None


class HedgeBlock(_Strict):
    model: RegimeBlock = RegimeBlock()
    claim: ClaimBlock = ClaimBlock()
    grid: GridBlock = GridBlock()
    s0: float = Field(100.0, gt=0)
    regime: int = Field(0, ge=0)
    n_paths: int = Field(2000, ge=2)
    n_steps: int = Field(100, ge=1)
    strategy: Literal["full", "partial", "both"] = "both"
    time_stride: int = Field(20, ge=1)
    price_stride: int = Field(4, ge=1)


class RunConfig(_Strict):
    command: Literal[COMMANDS]  # type: ignore[valid-type]
    seed: int = 0
    out: str = "out"
    input: Optional[str] = None
    compare: Optional[str] = None
    oracle: bool = False
    svm: SvmBlock = SvmBlock()
    cir: CirBlock = CirBlock()
    hedge: HedgeBlock = HedgeBlock()


# ---------------------------------------------------------------------------
# commands


def _svm_params(cfg: RunConfig) -> SvmParams:
    p = cfg.svm.params
    return SvmParams(p.rho, p.sigma, p.gamma)


def _svm_initial(cfg: RunConfig) -> ExpFamilyDensity:
    g = cfg.svm.initial or GaussianModel()
    return ExpFamilyDensity.gaussian(g.mean, g.var)


def _require_input(cfg: RunConfig) -> Path:
    if cfg.input is None:
        raise InputError(f"{cfg.command} needs --input")
    return Path(cfg.input)


def cmd_simulate_svm(cfg: RunConfig, out: Path) -> list[str]:
    params = _svm_params(cfg)
    path = simulate_svm(params, cfg.svm.n, cfg.svm.x0, seed=cfg.seed)
    write_csv(out / "svm_path.csv", ["t", "x", "y"], zip(range(1, cfg.svm.n + 1), path.x, path.y))
    return ["svm_path.csv"]


def _oracle_run(obs, params: SvmParams, initial: ExpFamilyDensity, nodes: int) -> list[GridDensity]:
    d = GridDensity.from_logpdf(initial.logpdf, default_grid(params, nodes=nodes))
    out = []
    for y in obs:
        d = bayes_step(d, float(y), params)
        out.append(d)
    return out


def cmd_filter_svm(cfg: RunConfig, out: Path) -> list[str]:
    obs = read_series(_require_input(cfg))
    params = _svm_params(cfg)
    initial = _svm_initial(cfg)
    failure = None
    try:
        steps = run_filter(obs, params, cfg.svm.order, cfg.svm.mode, initial)
    except FilterStepError as exc:
        steps, failure = exc.partial, exc
    records = [st.to_record(vol) for st, vol in steps]
    if cfg.oracle:
        grids = _oracle_run(obs[: len(records)], params, initial, cfg.svm.grid_nodes)
        for rec, (st, _), g in zip(records, steps, grids):
            rec["oracle"] = {
                "mean": g.mean,
                "var": g.var,
                "vol_estimate": volatility_from_grid(g, params),
                "kl": kl_to_grid(g, st.density),
            }
    doc = {"order": cfg.svm.order, "mode": cfg.svm.mode, "records": records}
    if failure is not None:
        doc["failed_step"] = failure.step
    write_json(out / "filter.json", doc)
    rows = [(r["t"], r["eta"][0], r["eta"][1] - r["eta"][0] ** 2, r["vol_estimate"]) for r in records]
    write_csv(out / "filter.csv", ["t", "mean", "var", "vol_estimate"], rows)
    if failure is not None:
        raise failure
    return ["filter.json", "filter.csv"]


def cmd_oracle_svm(cfg: RunConfig, out: Path) -> list[str]:
    obs = read_series(_require_input(cfg))
    params = _svm_params(cfg)
    grids = _oracle_run(obs, params, _svm_initial(cfg), cfg.svm.grid_nodes)
    records = [
        {"t": t, "mean": g.mean, "var": g.var, "vol_estimate": volatility_from_grid(g, params)}
        for t, g in enumerate(grids, start=1)
    ]
    artifacts = ["oracle.json"]
    doc: dict = {"grid_nodes": cfg.svm.grid_nodes, "records": records}
    if cfg.compare is not None:
        filt = read_json(cfg.compare)
        try:
            frecs = {int(r["t"]): r for r in filt["records"]}
        except (KeyError, TypeError, ValueError):
            raise InputError("not a filter-svm record file", cfg.compare) from None
        comparison = []
        for rec, g in zip(records, grids):
            f = frecs.get(rec["t"])
            if f is None:
                continue
            eta = f["eta"]
            q = ExpFamilyDensity(np.asarray(f["theta"], dtype=float))
            comparison.append(
                {
                    "t": rec["t"],
                    "filter_mean": eta[0],
                    "filter_var": eta[1] - eta[0] ** 2,
                    "oracle_mean": rec["mean"],
                    "oracle_var": rec["var"],
                    "abs_mean_diff": abs(eta[0] - rec["mean"]),
                    "abs_var_diff": abs(eta[1] - eta[0] ** 2 - rec["var"]),
                    "kl": kl_to_grid(g, q),
                }
            )
        doc["comparison"] = comparison
        write_csv(
            out / "comparison.csv",
            ["t", "filter_mean", "oracle_mean", "filter_var", "oracle_var", "kl"],
            [(c["t"], c["filter_mean"], c["oracle_mean"], c["filter_var"], c["oracle_var"], c["kl"]) for c in comparison],
        )
        artifacts.append("comparison.csv")
    write_json(out / "oracle.json", doc)
    return artifacts


def cmd_simulate_cir(cfg: RunConfig, out: Path) -> list[str]:
    params = cfg.cir.params.build()
    path, panel = simulate_panel(params, cfg.cir.n, cfg.cir.maturities, cfg.cir.dt, cfg.cir.x0, seed=cfg.seed)
    K = params.factors
    times = cfg.cir.dt * np.arange(cfg.cir.n + 1)
    write_csv(out / "factors.csv", ["t"] + [f"x{j + 1}" for j in range(K)], ([t, *row] for t, row in zip(times, path)))
    write_yield_panel(out / "yields.csv", panel)
    write_json(out / "params.json", params.to_dict())
    return ["factors.csv", "yields.csv", "params.json"]


def _step_dicts(records) -> list[dict]:
    return [r.to_dict() for r in records]


def cmd_estimate_cir(cfg: RunConfig, out: Path) -> list[str]:
    panel = read_yield_panel(_require_input(cfg))
    start = (cfg.cir.start or cfg.cir.params).build()
    est = estimate_qml(panel, start, QmlOptions(max_iter=cfg.cir.max_iter, restarts=cfg.cir.restarts))
    doc = est.to_dict()
    doc["per_step"] = _step_dicts(run_kalman(panel, est.beta))
    write_json(out / "estimate.json", doc)
    return ["estimate.json"]


def cmd_filter_cir(cfg: RunConfig, out: Path) -> list[str]:
    panel = read_yield_panel(_require_input(cfg))
    params = cfg.cir.params.build()
    records = run_kalman(panel, params)
    write_json(
        out / "filter_cir.json",
        {"loglik": float(sum(r.loglik for r in records)), "per_step": _step_dicts(records)},
    )
    K = params.factors
    write_csv(
        out / "filter_cir.csv",
        ["t"] + [f"xhat{j + 1}" for j in range(K)] + [f"v{j + 1}" for j in range(K)],
        ([r.t, *r.xhat, *r.v_diag] for r in records),
    )
    return ["filter_cir.json", "filter_cir.csv"]


def _regime_setup(cfg: RunConfig):
    h = cfg.hedge
    R = len(h.model.sigma)
    lam = h.model.lam if h.model.lam is not None else np.zeros((R, R))
    model = RegimeModel(h.model.sigma, lam, h.model.T)
    claim = Claim(h.claim.payoff, h.claim.strike if h.claim.payoff != "identity" else 0.0)
    grid = GridSpec(h.grid.n_space, h.grid.n_time, h.grid.s_max)
    reference = h.claim.strike if h.claim.payoff != "identity" else h.s0
    return model, claim, solve_claim_pde(model, claim, grid, reference=reference)


def cmd_price_claim(cfg: RunConfig, out: Path) -> list[str]:
    h = cfg.hedge
    model, _, sol = _regime_setup(cfg)
    rows = []
    for n in range(0, sol.times.size, h.time_stride):
        for i in range(model.regimes):
            for k in range(0, sol.prices.size, h.price_stride):
                rows.append((sol.times[n], i, sol.prices[k], sol.u[n, i, k], sol.xi[n, i, k]))
    write_csv(out / "surface.csv", ["t", "regime", "price", "u", "xi"], rows)
    values = []
    for i in range(model.regimes):
        u, xi = sol.lookup(0.0, h.s0, i)
        values.append({"regime": i, "price": float(u), "xi": float(xi), "eta": float(u - xi * h.s0)})
    write_json(out / "price.json", {"s0": h.s0, "values": values, "model": model.to_dict()})
    return ["surface.csv", "price.json"]


def cmd_hedge(cfg: RunConfig, out: Path) -> list[str]:
    h = cfg.hedge
    model, _, sol = _regime_setup(cfg)
    paths = simulate_paths(model, h.s0, h.n_paths, h.n_steps, seed=cfg.seed, z0=h.regime)
    kinds = ("full", "partial") if h.strategy == "both" else (h.strategy,)
    stats = {
        kind: simulate_cost_process(model, sol, h.s0, strategy=kind, z0=h.regime, paths=paths).to_dict()
        for kind in kinds
    }
    write_json(out / "hedge.json", {"n_steps": h.n_steps, "seed": cfg.seed, "cost": stats})
    rows = []
    for n in range(0, sol.times.size, h.time_stride):
        t = sol.times[n]
        for i in range(model.regimes):
            for k in range(0, sol.prices.size, h.price_stride):
                s = sol.prices[k]
                u, xi = sol.lookup(t, s, i)
                rows.append((t, i, s, float(xi), float(u - xi * s)))
    write_csv(out / "strategy.csv", ["t", "regime", "price", "xi", "eta"], rows)
    return ["hedge.json", "strategy.csv"]


HANDLERS = {
    "simulate-svm": cmd_simulate_svm,
    "filter-svm": cmd_filter_svm,
    "oracle-svm": cmd_oracle_svm,
    "simulate-cir": cmd_simulate_cir,
    "estimate-cir": cmd_estimate_cir,
    "filter-cir": cmd_filter_cir,
    "price-claim": cmd_price_claim,
    "hedge": cmd_hedge,
}


# ---------------------------------------------------------------------------
# plumbing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="finfilt", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--order", type=int, help="EP(m) order for filter-svm")
    p.add_argument("--mode", choices=("m", "2m"))
    p.add_argument("--grid-nodes", type=int, dest="grid_nodes")
    p.add_argument("--oracle", action="store_true", default=None, help="add grid-oracle columns to filter-svm")
    p.add_argument("--input", help="data file (returns CSV or yield panel CSV)")
    p.add_argument("--compare", help="filter-svm output to compare against (oracle-svm)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--version", action="version", version=f"finfilt {__version__}")
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    data: dict = {}
    if args.config:
        data = read_json(args.config)
        if not isinstance(data, dict):
            raise InputError("config must be a JSON object", args.config)
    data = dict(data)
    if data.get("command", args.command) != args.command:
        raise InputError(f"config is for {data['command']!r}, not {args.command!r}", args.config)
    data["command"] = args.command
    for name in ("seed", "out", "input", "compare", "oracle"):
        value = getattr(args, name)
        if value is not None:
            data[name] = value
    svm = dict(data.get("svm", {}))
    for name in ("order", "mode", "grid_nodes"):
        value = getattr(args, name)
        if value is not None:
            svm[name] = value
    if svm:
        data["svm"] = svm
    return RunConfig.model_validate(data)


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def run(cfg: RunConfig) -> list[str]:
    """Execute one command and write its artifacts plus the manifest."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()
    artifacts = HANDLERS[cfg.command](cfg, out)
    elapsed = time.perf_counter() - started
    logger.info("%s finished in %.3fs", cfg.command, elapsed)
    manifest = {
        "command": cfg.command,
        "config": cfg.model_dump(mode="json", by_alias=True),
        "config_hash": config_hash(cfg),
        "versions": {
            "finfilt": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "artifacts": {name: file_sha256(out / name) for name in artifacts},
    }
    write_json(out / "manifest.json", manifest)
    write_json(out / "timings.json", {"command": cfg.command, "seconds": elapsed})
    return artifacts


def _raising_module(exc: BaseException) -> str | None:
    """Deepest library module (other than the CLI itself) on the traceback."""
    module = None
    tb = exc.__traceback__
    while tb is not None:
        name = tb.tb_frame.f_globals.get("__name__", "")
        if name.startswith("finfilt.") and name not in ("finfilt.cli", "finfilt.errors"):
            module = name
        tb = tb.tb_next
    return module


def _error_doc(exc: BaseException) -> tuple[dict, int]:
    doc: dict = {"type": type(exc).__name__, "message": str(exc)}
    code = 1
    if isinstance(exc, ValidationError):
        doc["message"] = "config validation failed"
        doc["details"] = [{"loc": list(e["loc"]), "msg": e["msg"]} for e in exc.errors()]
        code = 2
    elif isinstance(exc, InputError):
        doc["path"], doc["line"] = exc.path, exc.line
        code = 2
    elif isinstance(exc, FinFiltError):
        doc["module"] = _raising_module(exc)
        if isinstance(exc, FilterStepError):
            doc["step"] = exc.step
        code = 3
    elif isinstance(exc, ValueError):
        code = 2
    return {"error": doc}, code


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("FINFILT_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    logging.captureWarnings(True)
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        run(cfg)
    except (FinFiltError, ValueError, ValidationError, OSError) as exc:
        doc, code = _error_doc(exc)
        print(json.dumps(doc, sort_keys=True), file=sys.stderr)
        return code
    return 0


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
