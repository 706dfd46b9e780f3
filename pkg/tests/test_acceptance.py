"""Acceptance gate: ten pinned criteria, one test (one pytest line) each.

Each criterion states its own tolerance and runtime budget inline.  The
desk-scale study behind criteria 4 (pipeline half), 6, and 7 runs the real
CLI pipeline at the shipped config defaults over three model seeds; it is
built once per session and charged against criterion 6's 30-minute budget.

Run with `pytest -v tests/test_acceptance.py` to get the per-criterion
pass/fail listing.
"""

import copy
import json
import math
import pathlib
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import TINY_CONFIG
from sohcast import adapt, conformal, network as nn, pipeline
from sohcast.cellsim import (
    ALL_BATCHES,
    CONSTANTS,
    CellParams,
    SimState,
    SOHTrajectory,
    make_protocol,
    sample_population,
    simulate_cell,
    step_degradation,
    u_n_graphite,
)
from sohcast.config import RunConfig, config_from_dict, load_config
from sohcast.dataset import (
    fit_scaler,
    load_trajectories,
    read_split_meta,
    stack_windows,
    window_trajectory,
    write_bundle,
)
from sohcast.pipeline import forecast_start_step
from sohcast.seeding import derive_seed

DESK_SEEDS = (7, 8, 9)


# --------------------------------------------------------------------------
# Desk-scale study: the shipped defaults, three model seeds, full pipeline.
# --------------------------------------------------------------------------


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Generate the default fleet once and run all variants per seed."""
    root = tmp_path_factory.mktemp("desk")
    t0 = time.monotonic()
    bundle_dir = root / "bundle"
    runs = {}
    for seed in DESK_SEEDS:
        cfg = config_from_dict(
            {
                "model": {"seed": seed},
                "paths": {
                    "bundle_dir": str(bundle_dir),
                    "out_dir": str(root / f"out{seed}"),
                },
            }
        )
        if not (bundle_dir / "split.json").exists():
            pipeline.cmd_generate(cfg)
        pipeline.cmd_train(cfg, "baseline")
        pipeline.cmd_train(cfg, "adapted")
        pipeline.cmd_train(cfg, "finetune")
        pipeline.cmd_calibrate(cfg, variant="adapted")
        runs[seed] = pipeline.cmd_evaluate(cfg)
    return {"runs": runs, "elapsed": time.monotonic() - t0}


def _desk_table(desk) -> str:
    lines = []
    for seed, run in sorted(desk["runs"].items()):
        m = run["metrics"]
        lines.append(
            f"seed {seed}: baseline/target {m['baseline/target']['rmse_pct']:.3f}%  "
            f"adapted/target {m['adapted/target']['rmse_pct']:.3f}%  "
            f"finetune/target {m['finetune/target']['rmse_pct']:.3f}%  "
            f"baseline/source r2 {m['baseline/source']['r2']:.4f}  "
            f"adapted/source r2 {m['adapted/source']['r2']:.4f}  "
            f"coverage {run['summary']['coverage_target']:.3f}"
        )
    return "\n".join(lines)


# --------------------------------------------------------------------------
# 1. Gradient oracle
# --------------------------------------------------------------------------


def test_criterion_01_gradient_oracle():
    """Analytic gradients match central differences to 1e-4 (rel, 100 trials)."""
    t0 = time.monotonic()
    # With losses of order 10, h = 1e-4 balances truncation against
    # cancellation roundoff (which dominates near-zero gradient entries).
    h = 1e-4
    sigma = 1.0
    worst = 0.0
    for trial in range(50):
        rng = np.random.default_rng(10_000 + trial)
        x_s = rng.standard_normal((6, 3, 3))
        y_s = rng.standard_normal(6)
        x_t = rng.standard_normal((5, 3, 3)) + 0.3
        for lam in (0.0, 0.5):
            model = nn.init_model(4, seed=trial)
            grads, _ = adapt.gradients(model, x_s, y_s, x_t, lam, sigma)
            for name, arr in model.items():
                flat = arr.ravel()
                gflat = np.asarray(grads[name]).ravel()
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    up = adapt.total_loss(model, x_s, y_s, x_t, lam, sigma)
                    flat[i] = orig - h
                    down = adapt.total_loss(model, x_s, y_s, x_t, lam, sigma)
                    flat[i] = orig
                    fd = (up - down) / (2.0 * h)
                    err = abs(gflat[i] - fd) / max(1e-6, abs(gflat[i]), abs(fd))
                    worst = max(worst, err)
    assert worst < 1e-4, f"worst relative gradient error {worst:.3e}"
    assert time.monotonic() - t0 < 60.0


# --------------------------------------------------------------------------
# 2. MMD oracles
# --------------------------------------------------------------------------


def test_criterion_02_mmd_oracles():
    """Hand-derived MMD^2 values to 1e-12; symmetry/nonnegativity, 1000 pairs."""
    t0 = time.monotonic()
    # Singleton pair {0} vs {1}, sigma = 1: 1 + 1 - 2 e^{-1/2}.
    got = adapt.mmd2(np.array([[0.0]]), np.array([[1.0]]), 1.0)
    assert abs(got - (2.0 - 2.0 * math.exp(-0.5))) <= 1e-12
    # {0} vs {0, 2}, sigma = 1: 1 + (2 + 2 e^{-2})/4 - (1 + e^{-2}).
    got = adapt.mmd2(np.array([[0.0]]), np.array([[0.0], [2.0]]), 1.0)
    want = 1.0 + (2.0 + 2.0 * math.exp(-2.0)) / 4.0 - (1.0 + math.exp(-2.0))
    assert abs(got - want) <= 1e-12

    rng = np.random.default_rng(2)
    for _ in range(1000):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 9))
        d = int(rng.integers(1, 5))
        z_s = rng.standard_normal((n, d))
        z_t = rng.standard_normal((m, d)) + rng.normal()
        sigma = float(rng.uniform(0.3, 3.0))
        st = adapt.mmd2(z_s, z_t, sigma)
        ts = adapt.mmd2(z_t, z_s, sigma)
        assert abs(st - ts) <= 1e-12
        assert st >= -1e-12
        assert abs(adapt.mmd2(z_s, z_s, sigma)) <= 1e-12
    assert time.monotonic() - t0 < 10.0


# --------------------------------------------------------------------------
# 3. Conformal quantile arithmetic
# --------------------------------------------------------------------------


def test_criterion_03_conformal_quantile():
    """quantile_index on pinned (q, alpha) cases; 9-score epsilon_hat = 0.9."""
    cases = {(9, 0.1): 9, (19, 0.1): 18, (99, 0.1): 90, (1, 0.1): 2}
    for (q, alpha), want in cases.items():
        assert conformal.quantile_index(q, alpha) == want
    dist = conformal.scores_from_residuals(np.arange(1, 10) / 10.0)
    assert abs(conformal.epsilon_hat(dist, 0.1) - 0.9) <= 1e-12
    # q = 1 selects rank 2: the +inf sentinel, i.e. an infinite interval.
    single = conformal.scores_from_residuals(np.array([0.25]))
    assert math.isinf(conformal.epsilon_hat(single, 0.1))


# --------------------------------------------------------------------------
# 4. Conformal coverage
# --------------------------------------------------------------------------


def test_criterion_04_conformal_coverage(desk):
    """Synthetic mean coverage in [0.88, 0.95]; pipeline target coverage >= 0.90."""
    t0 = time.monotonic()
    rng = np.random.default_rng(20240817)
    coverages = []
    for _ in range(500):
        calib = rng.standard_normal(50)  # model = truth + unit noise
        test = rng.standard_normal(200)
        eps = conformal.epsilon_hat(conformal.scores_from_residuals(calib), 0.1)
        coverages.append(float((np.abs(test) <= eps).mean()))
    mean_cov = float(np.mean(coverages))
    assert 0.88 <= mean_cov <= 0.95, f"synthetic mean coverage {mean_cov:.4f}"
    assert time.monotonic() - t0 < 120.0

    desk_cov = sorted(
        run["summary"]["coverage_target"] for run in desk["runs"].values()
    )
    median_cov = desk_cov[len(desk_cov) // 2]
    assert median_cov >= 0.90, (
        f"median pipeline coverage {median_cov:.3f} "
        f"(per seed: {desk_cov})\n" + _desk_table(desk)
    )


# --------------------------------------------------------------------------
# 5. Simulator properties
# --------------------------------------------------------------------------


def test_criterion_05_simulator_properties():
    """Monotone SOH, exact zero-rate identity, B1<B4 ordering, Euler oracle."""
    t0 = time.monotonic()

    # SOH monotone non-increasing on every generated trajectory.
    for bi, batch in enumerate(ALL_BATCHES):
        population = sample_population(
            6, (0.60, 0.55), 0.05 / 3.0, seed=500 + bi
        )
        for ci, params in enumerate(population):
            proto = make_protocol(batch, 40_000.0, 1000.0, seed=600 + 10 * bi + ci)
            traj = simulate_cell(
                params,
                proto,
                record_interval_ah=1000.0,
                steps_per_half_cycle=25,
            )
            assert (np.diff(traj.soh) <= 1e-15).all(), traj.cell_id
            assert traj.soh[0] == 1.0

    # Zero applied current changes nothing, bit for bit.
    state = SimState(
        eps_am_n=0.58, eps_am_p=0.54, q_li=2.4, r_sei=0.002, soc=0.7,
        throughput=12.0,
    )
    params = CellParams()
    still = step_degradation(state, params, 0.0, 30.0)
    assert still == state

    # High-rate batch B1 always ends below low-rate batch B4 at 50 kAh.
    for seed in range(10):
        finals = {}
        for batch in ("B1", "B4"):
            proto = make_protocol(batch, 50_000.0, 1000.0, seed=seed)
            traj = simulate_cell(
                params,
                proto,
                record_interval_ah=50_000.0,
                steps_per_half_cycle=50,
            )
            finals[batch] = traj.soh[-1]
        assert finals["B1"] < finals["B4"], f"seed {seed}: {finals}"

    # One explicit Euler step against a literal transcription of the
    # degradation laws (LAM on both electrodes; SEI film growth on charge).
    rt = CONSTANTS.gas * CONSTANTS.temperature
    for i_app in (3.0, -2.0):  # discharge, then charge (SEI active)
        got = step_degradation(state, params, i_app, 10.0)
        d_eps_n = (
            10.0
            * params.k_am_n
            * (3.0 * params.r_n / (state.eps_am_n * params.area * params.l_n))
            * abs(i_app)
            * math.exp(-params.e_am_n / rt)
        )
        d_eps_p = (
            10.0
            * params.k_am_p
            * (3.0 * params.r_p / (state.eps_am_p * params.area * params.l_p))
            * abs(i_app)
            * math.exp(-params.e_am_p / rt)
        )
        dq_side = 0.0
        if i_app < 0.0:
            a_n = 3.0 * state.eps_am_n / params.r_n
            area_rxn = a_n * params.area * params.l_n
            i_t = abs(i_app) / area_rxn
            phi_1 = u_n_graphite(state.soc) - state.r_sei * i_t
            i_s = (
                -CONSTANTS.faraday
                * params.k_fs
                * params.c_ec
                * math.exp(
                    -params.beta_s
                    * CONSTANTS.faraday
                    / rt
                    * (phi_1 - state.r_sei * i_t)
                )
            )
            dq_side = -i_s * area_rxn * 10.0 / 3600.0
        q_now = min(
            params.q_nominal * state.eps_am_n / params.eps_am_n,
            params.q_nominal * state.eps_am_p / params.eps_am_p,
            state.q_li,
        )
        want = {
            "eps_am_n": state.eps_am_n - d_eps_n,
            "eps_am_p": state.eps_am_p - d_eps_p,
            "q_li": state.q_li - dq_side,
            "r_sei": state.r_sei + params.k_res * dq_side,
            "soc": state.soc - i_app * 10.0 / (3600.0 * q_now),
            "throughput": state.throughput + abs(i_app) * 10.0 / 3600.0,
        }
        for field, value in want.items():
            have = getattr(got, field)
            assert abs(have - value) <= 1e-12 * max(1.0, abs(value)), field

    assert time.monotonic() - t0 < 120.0


# --------------------------------------------------------------------------
# 6. Transfer-learning improvement
# --------------------------------------------------------------------------


def test_criterion_06_transfer_improvement(desk):
    """Adapted beats baseline by >= 20% on target; finetune gains less (2/3 seeds)."""
    wins = 0
    for run in desk["runs"].values():
        m = run["metrics"]
        base = m["baseline/target"]["rmse_pct"]
        adapted = m["adapted/target"]["rmse_pct"]
        finetune = m["finetune/target"]["rmse_pct"]
        impr_adapted = 1.0 - adapted / base
        impr_finetune = 1.0 - finetune / base
        if impr_adapted >= 0.20 and impr_finetune < impr_adapted:
            wins += 1
    assert wins >= 2, f"improvement held on {wins}/3 seeds\n" + _desk_table(desk)
    assert desk["elapsed"] < 1800.0, f"desk study took {desk['elapsed']:.0f}s"


# --------------------------------------------------------------------------
# 7. Source-domain fit
# --------------------------------------------------------------------------


def test_criterion_07_source_fit(desk):
    """Held-out source R^2 >= 0.95 for baseline and adapted (2/3 seeds)."""
    good = 0
    for run in desk["runs"].values():
        m = run["metrics"]
        if (
            m["baseline/source"]["r2"] >= 0.95
            and m["adapted/source"]["r2"] >= 0.95
        ):
            good += 1
    assert good >= 2, f"source fit held on {good}/3 seeds\n" + _desk_table(desk)


# --------------------------------------------------------------------------
# 8. LOBO integrity
# --------------------------------------------------------------------------

# Three source batches whose constant C-rate channels sit far apart
# (20 / 2 / 0.2), so whichever batch LOBO holds out is a rate-channel
# extrapolation for a model trained on the other two: at lambda = 0 the
# held-out windows land outside the training input range and the head's
# output there is unconstrained.  With lambda > 0 the held-out batch is
# the unlabeled pseudo-target, and the MMD penalty pulls its latents onto
# the training batches' latent cloud, where the shared SOH-history slope
# is the predictive feature -- so LOBO must pick lambda* > 0.  The slopes
# differ mildly per batch so the task is not degenerate.
_TOY_SPEC = {
    "B1": (20.0, -5.0e-3),
    "B3": (2.0, -4.0e-3),
    "B4": (0.2, -3.0e-3),
}
_TOY_WINDOW = 5


def _toy_trajectory(cell_id, batch_id, rate, slope, intercept, n, noise, rng):
    steps = np.arange(n, dtype=np.float64)
    return SOHTrajectory(
        cell_id=cell_id,
        batch_id=batch_id,
        throughput_kah=steps.copy(),
        soh=intercept + slope * steps + noise * rng.standard_normal(n),
        c_rate_dis=np.full(n, float(rate)),
        c_rate_ch=np.full(n, float(rate)),
        params=CellParams(),
    )


def _write_toy_bundle(bundle_dir: Path) -> None:
    rng = np.random.default_rng(2024)
    trajectories = []
    roles = {}
    for batch_id, (rate, slope) in _TOY_SPEC.items():
        for c in range(8):
            intercept = 0.95 + 0.1 * rng.random()
            traj = _toy_trajectory(
                f"{batch_id}_c{c}", batch_id, rate, slope, intercept, 40,
                3e-3, rng,
            )
            trajectories.append(traj)
            roles[traj.cell_id] = "source_train"
    for c in range(2):  # decoy target cells the tuner must never open
        traj = _toy_trajectory(f"B2_c{c}", "B2", 5.0, -4.0e-3, 0.97, 40, 3e-3, rng)
        trajectories.append(traj)
        roles[traj.cell_id] = "target"
    source = stack_windows(
        [
            window_trajectory(t, _TOY_WINDOW)
            for t in trajectories
            if t.batch_id != "B2"
        ]
    )
    split_meta = {
        "window": _TOY_WINDOW,
        "cutoff_kah": 20.0,
        "calib_cells": {},
        "scaler": fit_scaler(source).to_dict(),
        "counts": {"source_labeled": len(source)},
    }
    write_bundle(bundle_dir, trajectories, roles, split_meta)


def test_criterion_08_lobo_integrity(tmp_path, monkeypatch):
    """cmd_tune picks lambda* > 0, never opens target files, and is deterministic."""
    t0 = time.monotonic()
    bundle_dir = tmp_path / "toy_bundle"
    _write_toy_bundle(bundle_dir)
    cfg = config_from_dict(
        {
            "model": {
                "window": _TOY_WINDOW,
                "hidden": 8,
                "lr": 1e-2,
                "batch_size": 32,
                "seed": 7,
            },
            "adapt": {
                "lambda_grid": [0.0, 0.25, 0.5],
                "lobo_epochs": 40,
                "kernel_selection": "median",
                "kernel_sigma": 1.0,
            },
            "paths": {
                "bundle_dir": str(bundle_dir),
                "out_dir": str(tmp_path / "out"),
            },
        }
    )

    opened: list[Path] = []
    real_open = pathlib.Path.open

    def spying_open(self, *args, **kwargs):
        opened.append(Path(self))
        return real_open(self, *args, **kwargs)

    monkeypatch.setattr(pathlib.Path, "open", spying_open)
    first = pipeline.cmd_tune(cfg)
    monkeypatch.undo()

    # The shifted-domain toy is only solvable via the (noisy) SOH history,
    # so adaptation pressure must win on held-out batches.
    assert first["lambda_star"] > 0.0

    # File-access audit: source batches were read, target batch never.
    traj_reads = [p for p in opened if p.parent.name == "trajectories"]
    assert traj_reads, "audit saw no trajectory reads at all"
    assert not [p for p in traj_reads if p.name.startswith("B2")], (
        "tuning opened target-batch files"
    )
    for batch_id in _TOY_SPEC:
        assert any(p.name.startswith(batch_id) for p in traj_reads)

    # Determinism: the same config yields byte-identical outputs.
    report = Path(first["report"]).read_bytes()
    selected = Path(first["selection"]).read_bytes()
    second = pipeline.cmd_tune(cfg)
    assert Path(second["report"]).read_bytes() == report
    assert Path(second["selection"]).read_bytes() == selected
    assert time.monotonic() - t0 < 600.0


# --------------------------------------------------------------------------
# 9. Standardization and no-leakage
# --------------------------------------------------------------------------


def test_criterion_09_no_leakage(tiny_bundle, cfg_factory, monkeypatch):
    """Scaler self-map to 1e-10; target labels unreachable in train/tune."""
    trajs = load_trajectories(tiny_bundle, roles=["source_train"])
    meta = read_split_meta(tiny_bundle)
    w = int(meta["window"])
    windows = stack_windows([window_trajectory(t, w) for t in trajs])
    scaler = fit_scaler(windows)
    rows = scaler.transform(windows.X).reshape(-1, windows.X.shape[2])
    assert np.abs(rows.mean(axis=0)).max() <= 1e-10
    assert np.abs(rows.std(axis=0, ddof=1) - 1.0).max() <= 1e-10

    cfg = load_config(cfg_factory("leakage"))
    cutoff = float(meta["cutoff_kah"])
    seen = {}

    real_adapted = adapt.train_adapted
    real_finetune = adapt.fine_tune_dense

    def spy_adapted(*args, **kwargs):
        target = args[2] if len(args) > 2 else kwargs["target_unlabeled"]
        seen["adapted_target_labels"] = target.y
        return real_adapted(*args, **kwargs)

    def spy_finetune(*args, **kwargs):
        labeled = args[1] if len(args) > 1 else kwargs["target_labeled"]
        seen["finetune_max_label_thr"] = float(labeled.label_thr_kah.max())
        return real_finetune(*args, **kwargs)

    monkeypatch.setattr(adapt, "train_adapted", spy_adapted)
    monkeypatch.setattr(adapt, "fine_tune_dense", spy_finetune)
    pipeline.cmd_train(cfg, "baseline")
    pipeline.cmd_train(cfg, "adapted")
    pipeline.cmd_train(cfg, "finetune")
    # Adaptation saw the target strictly unlabeled; fine-tuning saw labels
    # only up to the accessibility cutoff.
    assert seen["adapted_target_labels"] is None
    assert seen["finetune_max_label_thr"] <= cutoff + 1e-9

    calls = []
    real_load = pipeline.load_trajectories

    def spy_load(bundle, **kwargs):
        calls.append(kwargs.get("roles"))
        return real_load(bundle, **kwargs)

    monkeypatch.setattr(pipeline, "load_trajectories", spy_load)
    pipeline.cmd_tune(cfg)
    assert calls and all(roles == ["source_train"] for roles in calls)


# --------------------------------------------------------------------------
# 10. End-to-end determinism
# --------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    """Two identical-config pipeline runs agree byte-for-byte."""
    snapshots = []
    for name in ("a", "b"):
        root = tmp_path / name
        overrides = copy.deepcopy(TINY_CONFIG)
        overrides["paths"] = {
            "bundle_dir": str(root / "bundle"),
            "out_dir": str(root / "out"),
        }
        cfg = config_from_dict(overrides)
        pipeline.cmd_generate(cfg)
        pipeline.cmd_train(cfg, "baseline")
        pipeline.cmd_train(cfg, "adapted")
        pipeline.cmd_train(cfg, "finetune")
        pipeline.cmd_calibrate(cfg, variant="adapted")
        forecast_dir = Path(pipeline.cmd_forecast(cfg, variant="adapted")["forecast_dir"])
        pipeline.cmd_evaluate(cfg)
        blobs = {"eval_report.csv": (root / "out" / "eval_report.csv").read_bytes()}
        for csv_path in sorted(forecast_dir.glob("*.csv")):
            blobs[f"forecast/{csv_path.name}"] = csv_path.read_bytes()
        snapshots.append(blobs)
    assert sorted(snapshots[0]) == sorted(snapshots[1])
    for key, blob in snapshots[0].items():
        assert snapshots[1][key] == blob, f"{key} differs between runs"
