"""Command-line surface: batch workflows over files.

Commands: simulate | select-basis | fit | summarize | diagnose |
evaluate | render. Exit codes: 0 success, 2 configuration error,
3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import artifacts, io as sio
from .baselines import bml_fit, glm_fit
from .basis import build_basis_system
from .diagnostics import cross_site_pmse, gelman_rubin, ppc_draw, select_num_basis
from .domain import SpatialDomain
from .errors import ConfigError, DataError, NumericalError, SimbaError
from .gibbs import GibbsConfig, run_gibbs
from .model import PriorConfig, transform_dataset
from .simstudy import (
    ALL_METHODS,
    SimScenario,
    StudyFitConfig,
    make_truth,
    phantom_mask,
    run_study,
    simulate_dataset,
)
from .summaries import pool_draws, summarize_gibbs, summarize_vi
from .vi import VIConfig, run_vi

_METHODS = ("simba-gibbs", "simba-vi", "glm", "bml")


def _env_jobs() -> int:
    try:
        return max(1, int(os.environ.get("SIMBA_NUM_THREADS", "1")))
    except ValueError:
        return 1


def _load_config(args) -> sio.StudyConfig:
    cfg = sio.load_study_config(args.config) if args.config else sio.StudyConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = str(args.out)
    return cfg


def _info(msg: str):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    mask = phantom_mask(tuple(args.mask_shape)) if args.mask_shape else phantom_mask()
    scenario = SimScenario(
        n_participants=args.n,
        sigma_eps=args.sigma_eps,
        mask=mask,
        seed=cfg.seed,
    )
    truth = make_truth(mask, seed=cfg.seed)
    sim = simulate_dataset(scenario, args.replicate, truth=truth)
    h = cfg.config_hash()
    sio.write_mask_grid(out / "mask.txt", mask, config_hash=h, seed=cfg.seed)
    sio.write_matrix_csv(
        out / "responses.csv",
        sim.dataset.Y,
        header=[f"v{k}" for k in range(sim.dataset.Y.shape[1])],
        config_hash=h,
        seed=cfg.seed,
    )
    sio.write_matrix_csv(
        out / "covariates.csv",
        sim.dataset.X,
        header=["intercept", "x1"],
        config_hash=h,
        seed=cfg.seed,
    )
    sio.write_map_file(
        out / "truth.map",
        sim.dataset.domain,
        {"truth_beta0": sim.beta0, "truth_beta1": sim.beta1},
        config_hash=h,
        seed=cfg.seed,
    )
    meta = {
        "n_participants": args.n,
        "sigma_eps": args.sigma_eps,
        "replicate": args.replicate,
        "seed": cfg.seed,
        "config_hash": h,
        "n_voxels": sim.dataset.domain.n_voxels,
    }
    sio.atomic_write(out / "meta.json", json.dumps(meta, indent=2).encode())
    _info(f"wrote scenario {scenario.label} replicate {args.replicate} to {out}")
    return 0


# ---------------------------------------------------------------------
# select-basis
# ---------------------------------------------------------------------

def cmd_select_basis(args) -> int:
    cfg = _load_config(args)
    data = sio.load_dataset(args.responses, args.covariates, args.mask,
                            nifti=args.nifti)
    sel = select_num_basis(
        data,
        data.domain,
        cfg.kernel_config(),
        L_max=min(cfg.basis_L_max, data.domain.n_voxels),
        seed=cfg.seed,
        max_folds=args.max_folds,
    )
    out = Path(cfg.out_dir)
    h = cfg.config_hash()
    sio.write_matrix_csv(
        out / "pmse_curve.csv",
        np.column_stack([sel.candidates, sel.pmse]),
        header=["L", "pmse"],
        config_hash=h,
        seed=cfg.seed,
    )
    sio.atomic_write(
        out / "selection.json",
        json.dumps({"chosen_L": sel.chosen_L, "config_hash": h}, indent=2).encode(),
    )
    print(sel.chosen_L)
    return 0


# ---------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------

def cmd_fit(args) -> int:
    cfg = _load_config(args)
    if args.method not in _METHODS:
        raise ConfigError(f"unknown method {args.method!r}")
    data = sio.load_dataset(args.responses, args.covariates, args.mask,
                            nifti=args.nifti)
    prior = PriorConfig(A=cfg.prior_A)
    out = Path(cfg.out_dir)
    h = cfg.config_hash()
    art = artifacts.FitArtifact(
        method=args.method, domain=data.domain, config_hash=h, seed=cfg.seed
    )
    t0 = time.perf_counter()
    if args.method in ("simba-gibbs", "simba-vi"):
        L = cfg.basis_size()
        if L == "auto":
            sel = select_num_basis(
                data, data.domain, cfg.kernel_config(),
                L_max=min(cfg.basis_L_max, data.domain.n_voxels),
                seed=cfg.seed, max_folds=args.max_folds,
            )
            L = sel.chosen_L
            _info(f"selected L={L} by LOOCV")
        L_eta = cfg.basis_L_eta or None
        basis = build_basis_system(
            data.domain, cfg.kernel_config(), int(L), L_eta=L_eta, seed=cfg.seed
        )
        art.basis = basis
        tdata = transform_dataset(data, basis, keep_voxel_data=cfg.memory_mode)
        if args.method == "simba-gibbs":
            gcfg = GibbsConfig(
                n_iter=cfg.inference_n_iter,
                n_burnin=cfg.inference_n_burnin,
                thin=cfg.inference_thin,
                n_chains=cfg.inference_n_chains,
                seed=cfg.seed,
            )
            chains = run_gibbs(
                tdata, prior, gcfg, n_jobs=_env_jobs(),
                progress=lambda c, t, n: _info(f"chain {c}: {t}/{n}"),
            )
            art.chains = chains
            art.seconds_per_1000_iter = float(
                np.mean([ch.seconds_per_1000_iter for ch in chains])
            )
            maps = summarize_gibbs(
                pool_draws(chains), basis, level=cfg.level, threshold=cfg.threshold
            )
        else:
            res = run_vi(
                tdata, prior,
                VIConfig(max_iter=cfg.inference_max_iter, tol=cfg.inference_tol,
                         seed=cfg.seed),
            )
            art.vi_result = res
            art.seconds_per_1000_iter = (
                1000.0 * (time.perf_counter() - t0) / max(res.iterations, 1)
            )
            maps = summarize_vi(res, basis, level=cfg.level, threshold=cfg.threshold)
    elif args.method == "glm":
        res = glm_fit(data, level=cfg.level)
        art.glm = res
        maps = res.effect_maps(threshold=cfg.threshold, level=cfg.level)
    else:  # bml
        gcfg = GibbsConfig(
            n_iter=cfg.inference_n_iter,
            n_burnin=cfg.inference_n_burnin,
            thin=cfg.inference_thin,
            n_chains=cfg.inference_n_chains,
            seed=cfg.seed,
        )
        res = bml_fit(data, gcfg, prior)
        art.bml = res
        maps = res.effect_maps(threshold=cfg.threshold, level=cfg.level)
    elapsed = time.perf_counter() - t0
    artifacts.save_fit(out / "fit.npz", art)
    sio.save_effect_maps(out, maps, data.domain, config_hash=h, seed=cfg.seed)
    timing = {
        "method": args.method,
        "seconds_total": elapsed,
        "seconds_per_1000_iter": art.seconds_per_1000_iter,
        "config_hash": h,
        "seed": cfg.seed,
    }
    sio.atomic_write(out / "timing.json", json.dumps(timing, indent=2).encode())
    _info(f"fit {args.method} in {elapsed:.1f}s -> {out}")
    return 0


# ---------------------------------------------------------------------
# summarize
# ---------------------------------------------------------------------

def cmd_summarize(args) -> int:
    cfg = _load_config(args)
    art = artifacts.load_fit(args.fit)
    thr = args.threshold if args.threshold is not None else cfg.threshold
    if art.chains is not None:
        maps = summarize_gibbs(
            pool_draws(art.chains), art.basis, level=cfg.level, threshold=thr
        )
    elif art.vi_result is not None:
        maps = summarize_vi(art.vi_result, art.basis, level=cfg.level, threshold=thr)
    elif art.glm is not None:
        maps = art.glm.effect_maps(threshold=thr, level=cfg.level)
    elif art.bml is not None:
        maps = art.bml.effect_maps(threshold=thr, level=cfg.level)
    else:
        raise DataError("fit artifact holds no posterior object")
    out = Path(cfg.out_dir)
    sio.save_effect_maps(
        out, maps, art.domain, config_hash=art.config_hash, seed=art.seed
    )
    _info(f"wrote {len(maps)} effect maps at threshold {thr} -> {out}")
    return 0


# ---------------------------------------------------------------------
# diagnose
# ---------------------------------------------------------------------

def cmd_diagnose(args) -> int:
    cfg = _load_config(args)
    art = artifacts.load_fit(args.fit)
    out = Path(cfg.out_dir)
    h = art.config_hash
    wrote = []
    if art.chains is not None and len(art.chains) >= 2:
        burn = art.chains[0].config.n_burnin if art.chains[0].config else 0
        traces = np.stack([ch.cond_loglik[burn:] for ch in art.chains])
        gr = gelman_rubin(traces)
        sio.write_matrix_csv(
            out / "rhat.csv",
            np.array([[gr.rhat, float(gr.degenerate)]]),
            header=["rhat_cond_loglik", "degenerate"],
            config_hash=h,
            seed=art.seed,
        )
        wrote.append(f"rhat.csv (R-hat {gr.rhat:.4f})")
    if args.responses:
        data = sio.load_dataset(args.responses, args.covariates, args.mask,
                                nifti=args.nifti)
        source = pool_draws(art.chains) if art.chains is not None else art.vi_result
        if source is None:
            raise DataError("PPC requires a simba-gibbs or simba-vi artifact")
        ppc = ppc_draw(source, art.basis, data, n_rep=args.n_rep, seed=art.seed)
        body = np.column_stack(
            [ppc.bin_centers, ppc.observed_density, ppc.replicated_density.T]
        )
        sio.write_matrix_csv(
            out / "ppc_curves.csv",
            body,
            header=["bin_center", "observed"]
            + [f"rep{k}" for k in range(ppc.replicated_density.shape[0])],
            config_hash=h,
            seed=art.seed,
        )
        lo = ppc.replicated_density.min(axis=0) if len(ppc.replicated_density) else 0
        hi = ppc.replicated_density.max(axis=0) if len(ppc.replicated_density) else 0
        curve = np.stack([ppc.observed_density, np.broadcast_to(lo, ppc.observed_density.shape),
                          np.broadcast_to(hi, ppc.observed_density.shape)])
        sio.render_ppm(
            out / "ppc.ppm",
            _curve_raster(curve),
            config_hash=h,
            seed=art.seed,
        )
        wrote.append("ppc_curves.csv, ppc.ppm")
    _info("diagnose wrote: " + "; ".join(wrote) if wrote else "nothing to diagnose")
    return 0


def _curve_raster(curves: np.ndarray, height: int = 200) -> np.ndarray:
    """Rasterize density curves (rows) into a signed 2-d grid for PPM."""
    n_curves, n_bins = curves.shape
    top = float(curves.max()) or 1.0
    grid = np.zeros((height, n_bins))
    for k in range(n_curves):
        y = np.clip((curves[k] / top) * (height - 1), 0, height - 1).astype(int)
        sign = 1.0 if k == 0 else -0.5  # observed positive, envelope negative
        grid[height - 1 - y, np.arange(n_bins)] = sign
    return grid


# ---------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------

def cmd_evaluate(args) -> int:
    from .simstudy import evaluate_replicate  # local to keep import cheap
    from .summaries import EffectMap

    cfg = _load_config(args)
    out = Path(cfg.out_dir)
    h = cfg.config_hash()
    if args.study:
        scenarios = [
            SimScenario(n_participants=n, sigma_eps=s, n_replicates=args.replicates,
                        seed=cfg.seed)
            for n in (50, 200)
            for s in (2.0, 5.0)
        ]
        table = run_study(
            scenarios,
            methods=tuple(args.methods) if args.methods else ALL_METHODS,
            fit_cfg=StudyFitConfig(kernel=cfg.kernel_config(), seed=cfg.seed),
            progress=True,
        )
        rows = table.to_rows()
        header = list(rows[0].keys())
        sio.write_matrix_csv(
            out / "metrics.csv",
            np.array([[_num(r[k]) for k in header[2:]] for r in rows]),
            header=header[2:],
            config_hash=h,
            seed=cfg.seed,
        )
        labeled = "\n".join(
            f"{r['scenario']},{r['method']}," + ",".join(str(r[k]) for k in header[2:])
            for r in rows
        )
        sio.atomic_write(
            out / "metrics_labeled.csv",
            (sio.provenance_line(h, cfg.seed) + "\nscenario,method,"
             + ",".join(header[2:]) + "\n" + labeled + "\n").encode(),
        )
        sio.atomic_write(out / "table.txt", table.format_table().encode())
        print(table.format_table())
        return 0
    if args.sites:
        datasets = [
            sio.load_dataset(Path(s) / "responses.csv", Path(s) / "covariates.csv",
                             Path(s) / "mask.txt")
            for s in args.sites
        ]
        L = cfg.basis_size()
        mats = cross_site_pmse(
            datasets,
            methods=tuple(args.methods) if args.methods else ("simba-vi", "glm"),
            kernel_cfg=cfg.kernel_config(),
            L=int(L) if L != "auto" else 100,
            seed=cfg.seed,
        )
        for name, mat in mats.items():
            sio.write_matrix_csv(
                out / f"cross_site_{name}.csv", mat,
                header=[f"test_site{k}" for k in range(mat.shape[1])],
                config_hash=h, seed=cfg.seed,
            )
        _info(f"wrote cross-site PMSE matrices for {list(mats)}")
        return 0
    # single-replicate mode: maps vs truth
    truth_file = sio.read_map_file(args.truth)
    truth = np.stack(list(truth_file.fields.values()))
    maps = []
    for path in args.maps:
        m = sio.read_map_file(path)
        maps.append(
            EffectMap(
                covariate=m.covariate,
                mean=m.fields["mean"],
                lower=m.fields["lower"],
                upper=m.fields["upper"],
                p_plus=m.fields["p_plus"],
                e_s=m.fields["e_s"],
                active=m.fields["active"] > 0.5,
                threshold=cfg.threshold,
            )
        )
    maps.sort(key=lambda m: m.covariate)
    res = evaluate_replicate(truth, maps, threshold=cfg.threshold)
    sio.write_matrix_csv(
        out / "replicate_metrics.csv",
        np.array([[res.mse_pct, res.tpr_pct, res.fdr_pct, res.coverage_pct]]),
        header=["mse_pct", "tpr_pct", "fdr_pct", "coverage_pct"],
        config_hash=h,
        seed=cfg.seed,
    )
    print(f"MSE%={res.mse_pct:.3f} TPR%={res.tpr_pct:.1f} "
          f"FDR%={res.fdr_pct:.1f} coverage%={res.coverage_pct:.1f}")
    return 0


def _num(v) -> float:
    return float(v) if np.isfinite(float(v)) else float("nan")


# ---------------------------------------------------------------------
# render
# ---------------------------------------------------------------------

def cmd_render(args) -> int:
    cfg = _load_config(args)
    m = sio.read_map_file(args.map)
    if m.mask_shape is None or m.grid_offsets is None:
        raise DataError("map file has no mask grid; cannot render")
    if args.field not in m.fields:
        raise ConfigError(f"field {args.field!r} not in map (has {list(m.fields)})")
    grid = m.to_grid(args.field)
    alpha = None
    if args.alpha_field:
        if args.alpha_field not in m.fields:
            raise ConfigError(f"alpha field {args.alpha_field!r} not in map")
        alpha = m.to_grid(args.alpha_field)
    if grid.ndim == 3:
        k = args.slice if args.slice is not None else grid.shape[0] // 2
        grid = grid[k]
        alpha = alpha[k] if alpha is not None else None
    out = Path(cfg.out_dir)
    sio.render_ppm(
        out / (Path(args.map).stem + ".ppm"),
        grid,
        alpha_grid=alpha,
        threshold=cfg.threshold,
        vmax=args.vmax,
        config_hash=m.config_hash,
        seed=m.seed,
    )
    sio.write_matrix_csv(
        out / (Path(args.map).stem + "_grid.csv"),
        grid,
        config_hash=m.config_hash,
        seed=m.seed,
    )
    _info(f"rendered {args.map} field {args.field} -> {out}")
    return 0


# ---------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="simba",
        description="Scalable Bayesian image-on-scalar regression toolkit",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value configuration file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("simulate", help="write a synthetic scenario dataset")
    common(p)
    p.add_argument("--n", type=int, default=50, help="participants")
    p.add_argument("--sigma-eps", type=float, default=2.0, dest="sigma_eps")
    p.add_argument("--replicate", type=int, default=0)
    p.add_argument("--mask-shape", type=int, nargs=2, default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("select-basis", help="choose the basis size by LOOCV")
    common(p)
    p.add_argument("--responses", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--nifti", action="store_true")
    p.add_argument("--max-folds", type=int, default=None)
    p.set_defaults(func=cmd_select_basis)

    p = sub.add_parser("fit", help="fit one method and write maps + artifact")
    common(p)
    p.add_argument("--method", required=True, choices=_METHODS)
    p.add_argument("--responses", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--nifti", action="store_true")
    p.add_argument("--max-folds", type=int, default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("summarize", help="re-threshold maps from a fit artifact")
    common(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("diagnose", help="R-hat table and posterior predictive check")
    common(p)
    p.add_argument("--fit", required=True)
    p.add_argument("--responses", default=None)
    p.add_argument("--covariates", default=None)
    p.add_argument("--mask", default=None)
    p.add_argument("--nifti", action="store_true")
    p.add_argument("--n-rep", type=int, default=150)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("evaluate", help="simulation metrics or cross-site PMSE")
    common(p)
    p.add_argument("--study", action="store_true",
                   help="run the full four-scenario replicated study")
    p.add_argument("--replicates", type=int, default=20)
    p.add_argument("--methods", nargs="*", default=None)
    p.add_argument("--sites", nargs="*", default=None,
                   help="site directories for cross-site evaluation")
    p.add_argument("--truth", default=None)
    p.add_argument("--maps", nargs="*", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="render a map file to a PPM raster")
    common(p)
    p.add_argument("--map", required=True)
    p.add_argument("--field", default="mean")
    p.add_argument("--alpha-field", default="e_s", dest="alpha_field")
    p.add_argument("--slice", type=int, default=None)
    p.add_argument("--vmax", type=float, default=None)
    p.set_defaults(func=cmd_render)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4
    except SimbaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
