"""Parameter sweeps reproducing the ablation trends: CSV tables + SVG plots."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from . import fit, metrics, svgplot
from .forest import proposals_from_votes

EXPERIMENTS = ("k", "top-n", "stepwise-vs-joint")


def pso_config(cfg, seed, **overrides):
    kw = dict(
        palm_particles=cfg["pso.palm_particles"],
        palm_generations=cfg["pso.palm_generations"],
        finger_particles=cfg["pso.finger_particles"],
        finger_generations=cfg["pso.finger_generations"],
        joint_particles=cfg["pso.joint_particles"],
        joint_generations=cfg["pso.generations"],
        inertia=cfg["pso.inertia"],
        cognitive=cfg["pso.cognitive"],
        social=cfg["pso.social"],
        d_max=cfg["pso.d_max_mm"],
        translation_margin=cfg["pso.translation_margin_mm"],
        seed=seed,
    )
    kw.update(overrides)
    return fit.PsoConfig(**kw)


def fit_sequence(psets, gt_list, geom, limits, pso_cfg, mode, seed):
    """Fit every frame; returns (FrameResults, mean evals per frame)."""
    results = []
    evals = []
    for i, (pset, gt) in enumerate(zip(psets, gt_list)):
        rng = np.random.default_rng((seed, i))
        if mode == "regression-only":
            pred = metrics.top_proposal_joints(pset)
            evals.append(0)
        elif mode == "joint":
            res = fit.joint_fit(pset, geom, limits, pso_cfg, rng=rng)
            pred = res.joints(geom)
            evals.append(res.evals)
        else:
            res = fit.stepwise_fit(pset, geom, limits, pso_cfg, rng=rng)
            pred = res.joints(geom)
            evals.append(res.evals)
        results.append(metrics.FrameResult.compute(i, pred, gt,
                                                   sentinel=pso_cfg.d_max))
    return results, float(np.mean(evals))


def _arm_metrics(results):
    curve = metrics.success_rate_curve(results, [20.0, 40.0])
    return {
        "mean_error_mm": metrics.mean_joint_error(results),
        "fingertip_error_mm": metrics.fingertip_error(results),
        "success_20mm": float(curve.fractions[0]),
        "success_40mm": float(curve.fractions[1]),
    }


def _oracle_error(psets, gt_list, sentinel):
    results = [metrics.FrameResult.compute(i, metrics.oracle_select(p, gt), gt,
                                           sentinel=sentinel)
               for i, (p, gt) in enumerate(zip(psets, gt_list))]
    return metrics.mean_joint_error(results)


def run_sweep(experiment, votes_per_frame, gt_list, geom, limits, cfg,
              out_dir, seeds=None):
    """Run one ablation experiment and write table.csv + plot.svg.

    votes_per_frame: per-frame joint->votes dicts (fixed vote sets, so the
    k sweep sees identical inputs at every k).
    """
    if experiment not in EXPERIMENTS:
        raise ValueError(f"unknown experiment {experiment!r}; pick from {EXPERIMENTS}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if seeds is None:
        seeds = list(range(cfg["eval.seeds"]))
    d_max = cfg["pso.d_max_mm"]
    bw = cfg["forest.infer_bandwidth_mm"]
    iters = cfg["forest.meanshift_iters"]

    rows = []
    if experiment == "k":
        grid = cfg.int_list("sweep.k_grid")
        k_max = max(grid)
        psets_full = [proposals_from_votes(v, top_n=cfg["forest.top_n"], k=k_max,
                                           bandwidth_mm=bw, max_iters=iters)
                      for v in votes_per_frame]
        for k in grid:
            psets = [p.top_k(k) for p in psets_full]
            oracle = _oracle_error(psets, gt_list, d_max)
            for seed in seeds:
                results, evals = fit_sequence(psets, gt_list, geom, limits,
                                              pso_config(cfg, seed), "stepwise", seed)
                rows.append({"k": k, "seed": seed, **_arm_metrics(results),
                             "oracle_error_mm": oracle, "evals_per_frame": evals})
        _write_table(out_dir / "table.csv", rows)
        _plot_grouped(out_dir / "plot.svg", rows, "k", "oracle_error_mm",
                      title="error vs proposals per joint", xlabel="k")
    elif experiment == "top-n":
        grid = cfg.int_list("sweep.topn_grid")
        for top_n in grid:
            psets = [proposals_from_votes(v, top_n=top_n, k=cfg["forest.k"],
                                          bandwidth_mm=bw, max_iters=iters)
                     for v in votes_per_frame]
            oracle = _oracle_error(psets, gt_list, d_max)
            for seed in seeds:
                results, evals = fit_sequence(psets, gt_list, geom, limits,
                                              pso_config(cfg, seed), "stepwise", seed)
                rows.append({"top_n": top_n, "seed": seed, **_arm_metrics(results),
                             "oracle_error_mm": oracle, "evals_per_frame": evals})
        _write_table(out_dir / "table.csv", rows)
        _plot_grouped(out_dir / "plot.svg", rows, "top_n", "oracle_error_mm",
                      title="error vs retained votes", xlabel="votes into mean-shift")
    else:
        psets = [proposals_from_votes(v, top_n=cfg["forest.top_n"], k=cfg["forest.k"],
                                      bandwidth_mm=bw, max_iters=iters)
                 for v in votes_per_frame]
        # matched budgets: 64^2 + 5*29^2 = 8301 vs 91^2 = 8281
        stepwise_cfg = dict(palm_particles=64, palm_generations=64,
                            finger_particles=29, finger_generations=29)
        joint_cfg = dict(joint_particles=91, joint_generations=91)
        for seed in seeds:
            for mode, over in (("stepwise", stepwise_cfg), ("joint", joint_cfg)):
                results, evals = fit_sequence(psets, gt_list, geom, limits,
                                              pso_config(cfg, seed, **over), mode, seed)
                rows.append({"method": mode, "seed": seed, **_arm_metrics(results),
                             "evals_per_frame": evals})
        _write_table(out_dir / "table.csv", rows)
        _plot_methods(out_dir / "plot.svg", rows)
    return rows


def _write_table(path, rows):
    if not rows:
        return
    header = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_cell(row[h]) for h in header])


def _cell(v):
    return f"{v:.6g}" if isinstance(v, float) else str(v)


def _plot_grouped(path, rows, param, oracle_key, *, title, xlabel):
    values = sorted({row[param] for row in rows})
    means, stds, oracle = [], [], []
    for v in values:
        errs = [row["mean_error_mm"] for row in rows if row[param] == v]
        means.append(float(np.mean(errs)))
        stds.append(float(np.std(errs)))
        oracle.append([row[oracle_key] for row in rows if row[param] == v][0])
    svgplot.line_plot(path, [
        {"label": "optimised", "x": values, "y": means, "yerr": stds},
        {"label": "oracle", "x": values, "y": oracle},
    ], title=title, xlabel=xlabel, ylabel="mean joint error (mm)")


def _plot_methods(path, rows):
    methods = sorted({row["method"] for row in rows})
    series = []
    for m in methods:
        pts = sorted((row["seed"], row["mean_error_mm"])
                     for row in rows if row["method"] == m)
        series.append({"label": m, "x": [p[0] for p in pts],
                       "y": [p[1] for p in pts]})
    svgplot.line_plot(path, series, title="stepwise vs joint optimisation",
                      xlabel="seed", ylabel="mean joint error (mm)")
