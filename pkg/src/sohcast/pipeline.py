"""End-to-end pipeline commands behind the CLI.

Each command reads one RunConfig, consumes the data bundle and/or
artifacts written by earlier commands, and writes its own outputs plus a
resolved copy of the config.  Stages communicate exclusively through
files, so every stage -- and the whole chain -- reruns byte-identically
for a fixed config.

Bundle layout (written by `generate`):
    <bundle_dir>/manifest.csv          cell roster: role, truncation, params
    <bundle_dir>/trajectories/<id>.csv per-cell SOH-vs-throughput records
    <bundle_dir>/split.json            window/cutoff/calibration/scaler meta
Output layout (written by the other commands under <out_dir>):
    checkpoints/<variant>.npz, history_<variant>.csv
    lobo_report.csv, lobo_selected.json
    calibration.json, calibration_scores.csv
    forecasts/<cell>.csv, eval_report.csv, scatter.csv, eval_summary.json
    plots/*.csv
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import adapt, conformal
from . import network as nn
from .cellsim import (
    ALL_BATCHES,
    SOHTrajectory,
    TARGET_BATCH,
    make_protocol,
    sample_population,
    simulate_cell,
)
from .config import RunConfig, config_hash, save_resolved
from .dataset import (
    Scaler,
    WindowSet,
    build_domain_split,
    fit_scaler,
    load_trajectories,
    read_manifest,
    read_split_meta,
    stack_windows,
    window_trajectory,
    write_bundle,
)
from .errors import DataError
from .seeding import derive_seed

log = logging.getLogger("sohcast")

VARIANTS = ("baseline", "adapted", "finetune")
RESOLVED_NAME = "config.resolved.yaml"


# --------------------------------------------------------------------------
# Small shared helpers
# --------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return "%.12g" % value


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, payload: Mapping) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def rmse(preds: np.ndarray, truths: np.ndarray) -> float:
    d = np.asarray(preds, dtype=np.float64) - np.asarray(truths, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def r2_score(preds: np.ndarray, truths: np.ndarray) -> float:
    truths = np.asarray(truths, dtype=np.float64)
    preds = np.asarray(preds, dtype=np.float64)
    ss_res = float(((truths - preds) ** 2).sum())
    ss_tot = float(((truths - truths.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise DataError("R^2 undefined: truths are constant")
    return 1.0 - ss_res / ss_tot


def forecast_start_step(cfg: RunConfig) -> int:
    """First trajectory row past the target-label cutoff."""
    sim = cfg.simulator
    return int(np.floor(sim.cutoff_kah / sim.record_kah + 1e-9)) + 1


def _train_settings(cfg: RunConfig, epochs: int | None = None) -> adapt.TrainSettings:
    m = cfg.model
    return adapt.TrainSettings(
        epochs=m.epochs if epochs is None else epochs,
        batch_size=m.batch_size,
        lr=m.lr,
        clip_norm=m.clip_norm,
    )


def _kernel(cfg: RunConfig) -> adapt.KernelConfig:
    return adapt.KernelConfig(
        sigma=cfg.adapt.kernel_sigma, selection=cfg.adapt.kernel_selection
    )


def _check_bundle_meta(cfg: RunConfig, meta: Mapping) -> None:
    if int(meta["window"]) != cfg.model.window:
        raise DataError(
            f"bundle was generated with window={meta['window']} but the "
            f"config requests model.window={cfg.model.window}; regenerate "
            "the bundle or adjust the config"
        )


def _load_scaler(meta: Mapping) -> Scaler:
    return Scaler.from_dict(meta["scaler"])


def _windows_for_role(
    bundle_dir: Path, w: int, role: str, name: str
) -> WindowSet:
    trajs = load_trajectories(bundle_dir, roles=[role])
    ws = stack_windows([window_trajectory(t, w) for t in trajs], name=name)
    return ws


def _target_windows(
    bundle_dir: Path, w: int, cutoff_kah: float
) -> tuple[WindowSet, WindowSet]:
    """(labeled early-life, unlabeled late-life) target window sets."""
    trajs = load_trajectories(bundle_dir, roles=["target"])
    all_ws = stack_windows(
        [window_trajectory(t, w) for t in trajs], name="target"
    )
    early = all_ws.label_thr_kah <= cutoff_kah + 1e-9
    labeled = all_ws.subset(np.flatnonzero(early))
    labeled.name = "target_labeled"
    unlabeled = all_ws.subset(np.flatnonzero(~early)).without_labels()
    unlabeled.name = "target_unlabeled"
    return labeled, unlabeled


def _checkpoint_path(out_dir: Path, variant: str) -> Path:
    return out_dir / "checkpoints" / f"{variant}.npz"


def _load_predictor(out_dir: Path, variant: str) -> tuple[nn.Predictor, dict]:
    path = _checkpoint_path(out_dir, variant)
    if not path.exists():
        raise DataError(
            f"missing checkpoint {path}; run `sohcast train --variant "
            f"{variant}` first"
        )
    model, scaler, meta = nn.load_checkpoint(path)
    return nn.Predictor(model=model, scaler=scaler), meta


def _write_history(path: Path, history: Sequence[Mapping]) -> None:
    _write_csv(
        path,
        ["epoch", "loss_source", "mmd2", "loss_total"],
        [
            [row["epoch"], _fmt(row["loss_source"]), _fmt(row["mmd2"]),
             _fmt(row["loss_total"])]
            for row in history
        ],
    )


# --------------------------------------------------------------------------
# generate
# --------------------------------------------------------------------------


def cmd_generate(cfg: RunConfig) -> dict:
    """Simulate the fleet, split it, and write the data bundle."""
    sim = cfg.simulator
    bundle_dir = Path(cfg.paths.bundle_dir)
    record_ah = sim.record_kah * 1000.0
    total_ah = sim.total_throughput_kah * 1000.0
    segment_ah = sim.segment_kah * 1000.0

    trajectories: list[SOHTrajectory] = []
    for bi, batch in enumerate(ALL_BATCHES):
        if batch == TARGET_BATCH:
            n = sim.target_cells
            nominal = (
                sim.nominal_eps_n * (1.0 + sim.target_shift),
                sim.nominal_eps_p * (1.0 + sim.target_shift),
            )
            rel_sigma = sim.rel_sigma * sim.target_sigma_scale
        else:
            n = sim.source_cells_per_batch
            nominal = (sim.nominal_eps_n, sim.nominal_eps_p)
            rel_sigma = sim.rel_sigma
        population = sample_population(
            n, nominal, rel_sigma, seed=derive_seed(sim.seed, bi), base=sim.cell
        )
        for ci, params in enumerate(population):
            cell_id = f"{batch}_c{ci:03d}"
            protocol = make_protocol(
                batch, total_ah, segment_ah, seed=derive_seed(sim.seed, bi, ci)
            )
            traj = simulate_cell(
                params,
                protocol,
                record_interval_ah=record_ah,
                steps_per_half_cycle=sim.steps_per_half_cycle,
                soh_floor=sim.soh_floor,
                cell_id=cell_id,
            )
            if traj.truncated:
                log.warning(
                    "%s truncated at %.0f kAh (soh floor %.2f)",
                    cell_id,
                    traj.throughput_kah[-1],
                    sim.soh_floor,
                )
            trajectories.append(traj)
        log.info("simulated batch %s: %d cells", batch, n)

    split = build_domain_split(
        trajectories,
        w=cfg.model.window,
        cutoff_kah=sim.cutoff_kah,
        calib_per_batch=cfg.conformal.calib_per_batch,
        seed=derive_seed(sim.seed, len(ALL_BATCHES)),
    )
    scaler = fit_scaler(split.source_labeled)

    roles: dict[str, str] = {}
    calib = {c for cells in split.calib_cells.values() for c in cells}
    for traj in trajectories:
        if traj.batch_id == TARGET_BATCH:
            roles[traj.cell_id] = "target"
        elif traj.cell_id in calib:
            roles[traj.cell_id] = "source_calib"
        else:
            roles[traj.cell_id] = "source_train"

    split_meta = {
        "window": cfg.model.window,
        "cutoff_kah": sim.cutoff_kah,
        "calib_cells": {b: list(c) for b, c in split.calib_cells.items()},
        "scaler": scaler.to_dict(),
        "config_hash": config_hash(cfg),
        "counts": {
            "source_labeled": len(split.source_labeled),
            "calibration": len(split.calibration),
            "target_labeled": len(split.target_labeled),
            "target_unlabeled": len(split.target_unlabeled),
        },
    }
    write_bundle(bundle_dir, trajectories, roles, split_meta)
    save_resolved(cfg, bundle_dir / RESOLVED_NAME)
    log.info(
        "bundle written to %s (%d cells, %d source windows)",
        bundle_dir,
        len(trajectories),
        len(split.source_labeled),
    )
    return {
        "bundle_dir": str(bundle_dir),
        "n_cells": len(trajectories),
        "n_truncated": sum(t.truncated for t in trajectories),
        "counts": split_meta["counts"],
    }


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------


def _resolve_lambda(cfg: RunConfig, out_dir: Path) -> float:
    lam = cfg.adapt.lam
    if isinstance(lam, str):  # "lobo"
        path = out_dir / "lobo_selected.json"
        if not path.exists():
            raise DataError(
                f"adapt.lam is 'lobo' but {path} does not exist; run "
                "`sohcast tune` first"
            )
        with path.open() as fh:
            return float(json.load(fh)["lambda_star"])
    return float(lam)


def cmd_train(cfg: RunConfig, variant: str = "baseline") -> dict:
    """Train one model variant and write its checkpoint and history."""
    if variant not in VARIANTS:
        raise DataError(f"unknown variant {variant!r}; expected {VARIANTS}")
    bundle_dir = Path(cfg.paths.bundle_dir)
    out_dir = Path(cfg.paths.out_dir)
    meta = read_split_meta(bundle_dir)
    _check_bundle_meta(cfg, meta)
    scaler = _load_scaler(meta)
    w = cfg.model.window
    settings = _train_settings(cfg)

    lam_used = 0.0
    if variant == "finetune":
        predictor, base_meta = _load_predictor(out_dir, "baseline")
        target_labeled, _ = _target_windows(
            bundle_dir, w, float(meta["cutoff_kah"])
        )
        model, history = adapt.fine_tune_dense(
            predictor.model,
            target_labeled,
            scaler,
            _train_settings(cfg, epochs=cfg.model.finetune_epochs),
            seed=derive_seed(cfg.model.seed, 2),
        )
        lam_used = float(base_meta.get("lambda", 0.0))
    else:
        source = _windows_for_role(bundle_dir, w, "source_train", "source_labeled")
        model0 = nn.init_model(cfg.model.hidden, seed=cfg.model.seed)
        if variant == "baseline":
            model, history = adapt.train_baseline(
                model0, source, scaler, settings, seed=derive_seed(cfg.model.seed, 0)
            )
        else:  # adapted
            lam_used = _resolve_lambda(cfg, out_dir)
            _, target_unlabeled = _target_windows(
                bundle_dir, w, float(meta["cutoff_kah"])
            )
            # Shares the baseline's training stream so that lam = 0
            # reproduces the baseline checkpoint bit-for-bit.
            model, history = adapt.train_adapted(
                model0,
                source,
                target_unlabeled,
                scaler,
                settings,
                seed=derive_seed(cfg.model.seed, 0),
                lam=lam_used,
                kernel=_kernel(cfg),
            )

    ckpt = _checkpoint_path(out_dir, variant)
    nn.save_checkpoint(
        ckpt,
        model,
        scaler,
        {
            "variant": variant,
            "lambda": lam_used,
            "hidden": cfg.model.hidden,
            "window": w,
            "epochs": len(history),
            "seed": cfg.model.seed,
            "config_hash": config_hash(cfg),
        },
    )
    _write_history(out_dir / f"history_{variant}.csv", history)
    save_resolved(cfg, out_dir / RESOLVED_NAME)
    final = history[-1]
    log.info(
        "%s trained: %d epochs, final loss %.6g (checkpoint %s)",
        variant,
        len(history),
        final["loss_total"],
        ckpt,
    )
    return {
        "checkpoint": str(ckpt),
        "variant": variant,
        "lambda": lam_used,
        "final_loss": final["loss_total"],
        "epochs": len(history),
    }


# --------------------------------------------------------------------------
# tune
# --------------------------------------------------------------------------


def cmd_tune(cfg: RunConfig) -> dict:
    """LOBO-tune lambda on source batches only; never reads target files."""
    bundle_dir = Path(cfg.paths.bundle_dir)
    out_dir = Path(cfg.paths.out_dir)
    meta = read_split_meta(bundle_dir)
    _check_bundle_meta(cfg, meta)
    w = cfg.model.window
    trajs = load_trajectories(bundle_dir, roles=["source_train"])
    by_batch: dict[str, list] = {}
    for traj in trajs:
        by_batch.setdefault(traj.batch_id, []).append(traj)
    batches = {
        batch: stack_windows(
            [window_trajectory(t, w) for t in cells], name=batch
        )
        for batch, cells in sorted(by_batch.items())
    }
    result = adapt.lobo_tune(
        batches,
        cfg.adapt.lambda_grid,
        hidden=cfg.model.hidden,
        settings=_train_settings(cfg, epochs=cfg.adapt.lobo_epochs),
        seed=derive_seed(cfg.model.seed, 3),
        kernel=_kernel(cfg),
    )
    result.to_csv(out_dir / "lobo_report.csv")
    selection = result.to_dict()
    selection["config_hash"] = config_hash(cfg)
    _write_json(out_dir / "lobo_selected.json", selection)
    save_resolved(cfg, out_dir / RESOLVED_NAME)
    log.info(
        "LOBO selected lambda* = %g (scores: %s)",
        result.lambda_star,
        ", ".join("%.5g" % s for s in result.scores),
    )
    return {
        "lambda_star": result.lambda_star,
        "report": str(out_dir / "lobo_report.csv"),
        "selection": str(out_dir / "lobo_selected.json"),
    }


# --------------------------------------------------------------------------
# calibrate
# --------------------------------------------------------------------------


def cmd_calibrate(cfg: RunConfig, variant: str = "adapted") -> dict:
    """Compute conformal scores and the interval half-width eps_hat."""
    bundle_dir = Path(cfg.paths.bundle_dir)
    out_dir = Path(cfg.paths.out_dir)
    meta = read_split_meta(bundle_dir)
    _check_bundle_meta(cfg, meta)
    predictor, _ = _load_predictor(out_dir, variant)
    w = cfg.model.window
    alpha = cfg.conformal.alpha

    if cfg.conformal.mode == "teacher_forced":
        calib_ws = _windows_for_role(bundle_dir, w, "source_calib", "calibration")
        dist = conformal.nonconformity_scores(predictor, calib_ws)
    else:  # rollout
        calib_trajs = load_trajectories(bundle_dir, roles=["source_calib"])
        full = max(len(t) for t in calib_trajs)
        kept = [t for t in calib_trajs if len(t) == full]
        if len(kept) < len(calib_trajs):
            log.warning(
                "calibration: skipping %d truncated cell(s)",
                len(calib_trajs) - len(kept),
            )
        dist = conformal.rollout_scores(
            predictor, kept, w, forecast_start_step(cfg)
        )
    eps = conformal.epsilon_hat(dist, alpha)
    p = conformal.quantile_index(dist.q, alpha)
    infinite = not np.isfinite(eps)
    if infinite:
        log.warning(
            "calibration set too small for alpha=%g (p = q + 1); intervals "
            "are infinite",
            alpha,
        )

    _write_csv(
        out_dir / "calibration_scores.csv",
        ["rank", "score"],
        [[k + 1, _fmt(s)] for k, s in enumerate(dist.scores)],
    )
    payload = {
        "variant": variant,
        "mode": cfg.conformal.mode,
        "alpha": alpha,
        "q": dist.q,
        "p": p,
        "eps_hat": eps if np.isfinite(eps) else "inf",
        "infinite": infinite,
        "config_hash": config_hash(cfg),
    }
    _write_json(out_dir / "calibration.json", payload)
    save_resolved(cfg, out_dir / RESOLVED_NAME)
    log.info(
        "calibrated %s (%s): q=%d, p=%d, eps_hat=%.5g",
        variant,
        cfg.conformal.mode,
        dist.q,
        p,
        eps,
    )
    return {
        "eps_hat": eps,
        "q": dist.q,
        "p": p,
        "infinite": infinite,
        "calibration": str(out_dir / "calibration.json"),
    }


def _read_calibration(out_dir: Path) -> dict:
    path = out_dir / "calibration.json"
    if not path.exists():
        raise DataError(f"missing {path}; run `sohcast calibrate` first")
    with path.open() as fh:
        payload = json.load(fh)
    payload["eps_hat"] = float(payload["eps_hat"]) if payload["eps_hat"] != "inf" else np.inf
    return payload


# --------------------------------------------------------------------------
# forecast
# --------------------------------------------------------------------------

FORECAST_COLUMNS = (
    "cell_id",
    "step",
    "throughput_kah",
    "soh_true",
    "soh_pred",
    "lower",
    "upper",
)


def cmd_forecast(cfg: RunConfig, variant: str = "adapted") -> dict:
    """Closed-loop target forecasts with conformal bands, one CSV per cell."""
    bundle_dir = Path(cfg.paths.bundle_dir)
    out_dir = Path(cfg.paths.out_dir)
    meta = read_split_meta(bundle_dir)
    _check_bundle_meta(cfg, meta)
    predictor, _ = _load_predictor(out_dir, variant)
    calibration = _read_calibration(out_dir)
    eps = calibration["eps_hat"]
    start = forecast_start_step(cfg)
    w = cfg.model.window

    trajs = load_trajectories(bundle_dir, roles=["target"])
    preds, truths, cells = conformal.rollout_cells(predictor, trajs, w, start)
    fdir = out_dir / "forecasts"
    for k, traj in enumerate(cells):
        rows = []
        for s in range(preds.shape[1]):
            center = preds[k, s]
            rows.append(
                [
                    traj.cell_id,
                    start + s,
                    _fmt(traj.throughput_kah[start + s]),
                    _fmt(truths[k, s]),
                    _fmt(center),
                    _fmt(center - eps),
                    _fmt(center + eps),
                ]
            )
        _write_csv(fdir / f"{traj.cell_id}.csv", FORECAST_COLUMNS, rows)
    save_resolved(cfg, out_dir / RESOLVED_NAME)
    log.info(
        "forecasts for %d cells x %d steps written to %s",
        preds.shape[0],
        preds.shape[1],
        fdir,
    )
    return {
        "forecast_dir": str(fdir),
        "n_cells": preds.shape[0],
        "horizon": preds.shape[1],
        "eps_hat": eps,
    }


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------


def cmd_evaluate(cfg: RunConfig) -> dict:
    """Rollout metrics for all variants on both domains, plus coverage."""
    bundle_dir = Path(cfg.paths.bundle_dir)
    out_dir = Path(cfg.paths.out_dir)
    meta = read_split_meta(bundle_dir)
    _check_bundle_meta(cfg, meta)
    start = forecast_start_step(cfg)
    w = cfg.model.window

    domains = {
        "source": load_trajectories(bundle_dir, roles=["source_calib"]),
        "target": load_trajectories(bundle_dir, roles=["target"]),
    }
    # Truncated cells (shorter grids) cannot join the common rollout; the
    # deepest-fading parameter draws can truncate under the B1 protocol.
    for name, trajs in domains.items():
        full = max(len(t) for t in trajs)
        kept = [t for t in trajs if len(t) == full]
        if len(kept) < len(trajs):
            log.warning(
                "%s: skipping %d truncated cell(s) in evaluation",
                name,
                len(trajs) - len(kept),
            )
        domains[name] = kept

    report_rows = []
    scatter_rows = []
    metrics: dict[tuple[str, str], dict] = {}
    for variant in VARIANTS:
        predictor, vmeta = _load_predictor(out_dir, variant)
        for domain, trajs in domains.items():
            preds, truths, cells = conformal.rollout_cells(
                predictor, trajs, w, start
            )
            m_rmse = rmse(preds, truths) * 100.0  # percent SOH
            m_r2 = r2_score(preds.ravel(), truths.ravel())
            metrics[(variant, domain)] = {
                "rmse_pct": m_rmse,
                "r2": m_r2,
                "lambda": float(vmeta.get("lambda", 0.0)),
            }
            report_rows.append(
                [
                    variant,
                    domain,
                    _fmt(m_rmse),
                    _fmt(m_r2),
                    len(cells),
                    preds.shape[1],
                    _fmt(float(vmeta.get("lambda", 0.0))),
                ]
            )
            for k, traj in enumerate(cells):
                for s in range(preds.shape[1]):
                    scatter_rows.append(
                        [
                            variant,
                            domain,
                            traj.cell_id,
                            start + s,
                            _fmt(truths[k, s]),
                            _fmt(preds[k, s]),
                        ]
                    )

    _write_csv(
        out_dir / "eval_report.csv",
        ["variant", "domain", "rmse_pct", "r2", "n_cells", "horizon", "lambda"],
        report_rows,
    )
    _write_csv(
        out_dir / "scatter.csv",
        ["variant", "domain", "cell_id", "step", "soh_true", "soh_pred"],
        scatter_rows,
    )

    # Conformal coverage on the target domain for the calibrated variant.
    calibration = _read_calibration(out_dir)
    cov_variant = calibration["variant"]
    eps = calibration["eps_hat"]
    predictor, _ = _load_predictor(out_dir, cov_variant)
    preds, truths, _ = conformal.rollout_cells(
        predictor, domains["target"], w, start
    )
    covered = np.abs(preds - truths) <= eps
    coverage = float(covered.mean())

    base = metrics[("baseline", "target")]["rmse_pct"]
    adapted = metrics[("adapted", "target")]["rmse_pct"]
    summary = {
        "coverage_target": coverage,
        "mean_width_pct": (2.0 * eps * 100.0) if np.isfinite(eps) else "inf",
        "eps_hat": eps if np.isfinite(eps) else "inf",
        "alpha": calibration["alpha"],
        "calibration_mode": calibration["mode"],
        "coverage_variant": cov_variant,
        "lambda_adapted": metrics[("adapted", "target")]["lambda"],
        "improvement_pct": 100.0 * (1.0 - adapted / base),
        "config_hash": config_hash(cfg),
    }
    _write_json(out_dir / "eval_summary.json", summary)
    save_resolved(cfg, out_dir / RESOLVED_NAME)
    log.info(
        "evaluation: baseline %.3f%% -> adapted %.3f%% target RMSE "
        "(%.1f%% better); coverage %.3f",
        base,
        adapted,
        summary["improvement_pct"],
        coverage,
    )
    return {
        "report": str(out_dir / "eval_report.csv"),
        "summary": summary,
        "metrics": {f"{v}/{d}": m for (v, d), m in metrics.items()},
    }


# --------------------------------------------------------------------------
# export-plot
# --------------------------------------------------------------------------


def cmd_export_plot(cfg: RunConfig) -> dict:
    """Consolidate bundle and evaluation artifacts into plot-ready CSVs."""
    bundle_dir = Path(cfg.paths.bundle_dir)
    out_dir = Path(cfg.paths.out_dir)
    plots = out_dir / "plots"

    manifest = read_manifest(bundle_dir)
    traj_rows = []
    for row in manifest:
        traj = SOHTrajectory.from_csv(
            bundle_dir / "trajectories" / f"{row['cell_id']}.csv"
        )
        for k in range(len(traj)):
            traj_rows.append(
                [
                    traj.batch_id,
                    traj.cell_id,
                    row["role"],
                    _fmt(traj.throughput_kah[k]),
                    _fmt(traj.soh[k]),
                ]
            )
    _write_csv(
        plots / "trajectories.csv",
        ["batch_id", "cell_id", "role", "throughput_kah", "soh"],
        traj_rows,
    )

    scatter = out_dir / "scatter.csv"
    if not scatter.exists():
        raise DataError(f"missing {scatter}; run `sohcast evaluate` first")
    (plots / "parity.csv").write_bytes(scatter.read_bytes())

    fdir = out_dir / "forecasts"
    files = sorted(fdir.glob("*.csv")) if fdir.exists() else []
    if not files:
        raise DataError(f"no forecasts in {fdir}; run `sohcast forecast` first")
    band_rows = []
    for path in files:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != FORECAST_COLUMNS:
                raise DataError(f"{path}: unexpected forecast columns {header}")
            band_rows.extend(reader)
    _write_csv(plots / "bands.csv", FORECAST_COLUMNS, band_rows)

    lobo = out_dir / "lobo_selected.json"
    if lobo.exists():
        with lobo.open() as fh:
            sel = json.load(fh)
        _write_csv(
            plots / "lobo_curve.csv",
            ["lambda", "score"],
            [
                [_fmt(lam), _fmt(score)]
                for lam, score in zip(sel["lambda_grid"], sel["scores"])
            ],
        )
    save_resolved(cfg, out_dir / RESOLVED_NAME)
    log.info("plot CSVs written to %s", plots)
    return {"plot_dir": str(plots)}
