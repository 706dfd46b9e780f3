"""Domain adaptation: MMD penalty, joint training, and LOBO tuning.

The adapted model minimizes

    L_total = sum_i (yhat_i - y_i)^2  +  lambda * MMD^2(z_s, z_t)

where z_s / z_t are encoder latents of a labeled source minibatch and an
unlabeled target minibatch.  MMD^2 is the biased V-statistic with a
Gaussian kernel; its gradient flows through both latent batches into the
encoder only, never into the decoder or head.  The kernel bandwidth is
either fixed or chosen by the median heuristic (median of pooled pairwise
squared distances; sigma^2 = median / 2), recomputed once per epoch from
the full latent pools under the current model -- not per step, which
would let the bandwidth chase the very alignment it drives.

Because no labeled target data exists by assumption, lambda is tuned by
leave-one-batch-out (LOBO) cross-validation over the source batches: each
source batch in turn plays the role of an unlabeled pseudo-target while
the others train the model, and is then scored on its held-back labels
with teacher-forced one-step RMSE.  The lambda minimizing the mean score
is selected (ties go to the smaller lambda).

The fine-tuning baseline retrains only the dense head on the early-life
labeled target windows, with encoder and decoder frozen bit-for-bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import network as nn
from .dataset import Scaler, WindowSet, fit_scaler, stack_windows
from .errors import DataError, NumericError, ParameterError
from .seeding import derive_seed

# --------------------------------------------------------------------------
# Maximum mean discrepancy
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian-kernel settings for the MMD penalty."""

    sigma: float = 1.0
    selection: str = "median"  # "median" or "fixed"

    def __post_init__(self) -> None:
        if self.selection not in ("median", "fixed"):
            raise ParameterError(
                f"kernel selection must be 'median' or 'fixed'; got "
                f"{self.selection!r}"
            )
        if self.selection == "fixed" and not self.sigma > 0.0:
            raise ParameterError(f"kernel sigma must be positive; got {self.sigma}")


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)
    bb = (b * b).sum(axis=1)
    d2 = aa[:, None] + bb[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def median_bandwidth(z_s: np.ndarray, z_t: np.ndarray) -> float:
    """Median-heuristic sigma over the pooled batch.

    sigma^2 = median of pairwise squared distances / 2, medians taken over
    distinct pairs.  Degenerate (zero-median) geometry is an error.
    """
    pooled = np.vstack([z_s, z_t])
    n = pooled.shape[0]
    if n < 2:
        raise DataError("median heuristic needs at least two latent points")
    d2 = _pairwise_sq_dists(pooled, pooled)
    iu = np.triu_indices(n, k=1)
    med = float(np.median(d2[iu]))
    if not med > 0.0:
        raise DataError(
            "degenerate kernel bandwidth: median pairwise distance is zero"
        )
    return float(np.sqrt(med / 2.0))


def resolve_sigma(z_s: np.ndarray, z_t: np.ndarray, kernel: KernelConfig) -> float:
    if kernel.selection == "fixed":
        return kernel.sigma
    return median_bandwidth(z_s, z_t)


def mmd2(z_s: np.ndarray, z_t: np.ndarray, sigma: float) -> float:
    """Biased V-statistic MMD^2 with a Gaussian kernel of bandwidth sigma."""
    value, _, _ = mmd2_and_grad(z_s, z_t, sigma, need_grad=False)
    return value


def mmd2_and_grad(
    z_s: np.ndarray, z_t: np.ndarray, sigma: float, *, need_grad: bool = True
) -> tuple[float, np.ndarray | None, np.ndarray | None]:
    """MMD^2 and its exact gradients w.r.t. both latent batches.

    mmd^2 = mean(K_ss) + mean(K_tt) - 2 mean(K_st) with
    k(a, b) = exp(-||a - b||^2 / (2 sigma^2)); the bandwidth is treated as
    a constant (no gradient through the median heuristic).
    """
    if z_s.ndim != 2 or z_t.ndim != 2 or z_s.shape[1] != z_t.shape[1]:
        raise ParameterError(
            f"latent batches must be 2-D with equal width; got {z_s.shape} "
            f"and {z_t.shape}"
        )
    n, m = z_s.shape[0], z_t.shape[0]
    if n == 0 or m == 0:
        raise ParameterError("MMD of an empty latent batch is undefined")
    if not sigma > 0.0:
        raise ParameterError(f"kernel sigma must be positive; got {sigma}")
    inv = 1.0 / (2.0 * sigma * sigma)
    k_ss = np.exp(-_pairwise_sq_dists(z_s, z_s) * inv)
    k_tt = np.exp(-_pairwise_sq_dists(z_t, z_t) * inv)
    k_st = np.exp(-_pairwise_sq_dists(z_s, z_t) * inv)
    value = float(k_ss.mean() + k_tt.mean() - 2.0 * k_st.mean())
    if not need_grad:
        return value, None, None
    inv_sig2 = 1.0 / (sigma * sigma)
    # d mean(K_ss) / dz_i = (2 / n^2 sigma^2) sum_j K_ij (z_j - z_i)
    row_ss = k_ss.sum(axis=1)
    row_tt = k_tt.sum(axis=1)
    row_st = k_st.sum(axis=1)
    col_st = k_st.sum(axis=0)
    d_zs = (
        -(2.0 / (n * n)) * inv_sig2 * (z_s * row_ss[:, None] - k_ss @ z_s)
        + (2.0 / (n * m)) * inv_sig2 * (z_s * row_st[:, None] - k_st @ z_t)
    )
    d_zt = (
        -(2.0 / (m * m)) * inv_sig2 * (z_t * row_tt[:, None] - k_tt @ z_t)
        + (2.0 / (n * m)) * inv_sig2 * (z_t * col_st[:, None] - k_st.T @ z_s)
    )
    return value, d_zs, d_zt


# --------------------------------------------------------------------------
# Combined loss gradient
# --------------------------------------------------------------------------


@dataclass
class BatchDiagnostics:
    loss_source: float  # sum of squared errors over the batch
    mmd2: float
    loss_total: float


def total_loss(
    model: nn.ModelParams,
    x_s: np.ndarray,
    y_s: np.ndarray,
    x_t: np.ndarray | None,
    lam: float,
    sigma: float,
) -> float:
    """L_total on standardized batches; reference for gradient checks."""
    fc = nn.forward(model, x_s)
    loss = nn.loss_source(fc.yhat, y_s)
    if lam != 0.0:
        if x_t is None:
            raise ParameterError("lambda > 0 requires a target batch")
        z_t = nn.forward(model, x_t, encoder_only=True).z
        loss += lam * mmd2(fc.z, z_t, sigma)
    return loss


def gradients(
    model: nn.ModelParams,
    x_s: np.ndarray,
    y_s: np.ndarray,
    x_t: np.ndarray | None,
    lam: float,
    sigma: float,
) -> tuple[dict[str, np.ndarray], BatchDiagnostics]:
    """Exact gradients of L_total for one minibatch pair.

    With lam == 0 (or no target batch) this is a plain supervised step and
    the target branch is never evaluated.  The MMD term contributes to
    encoder gradients only.
    """
    if lam < 0.0:
        raise ParameterError(f"lambda must be non-negative; got {lam}")
    fc_s = nn.forward(model, x_s)
    loss_sup = nn.loss_source(fc_s.yhat, y_s)
    dyhat = 2.0 * (fc_s.yhat - y_s)
    if lam == 0.0:
        grads = nn.backward(model, fc_s, dyhat)
        return grads, BatchDiagnostics(loss_sup, 0.0, loss_sup)
    if x_t is None:
        raise ParameterError("lambda > 0 requires a target batch")
    fc_t = nn.forward(model, x_t, encoder_only=True)
    value, d_zs, d_zt = mmd2_and_grad(fc_s.z, fc_t.z, sigma)
    grads = nn.backward(model, fc_s, dyhat, dz_extra=lam * d_zs)
    grads = nn.backward(model, fc_t, None, dz_extra=lam * d_zt, grads=grads)
    total = loss_sup + lam * value
    return grads, BatchDiagnostics(loss_sup, value, total)


# --------------------------------------------------------------------------
# Training loops
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 60
    batch_size: int = 32
    lr: float = 1e-3
    clip_norm: float = 5.0

    def __post_init__(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ParameterError(
                f"need epochs >= 0 and batch_size >= 1; got {self.epochs}, "
                f"{self.batch_size}"
            )
        if not self.lr > 0.0:
            raise ParameterError(f"learning rate must be positive; got {self.lr}")


class _Cycler:
    """Endless seeded sampler over a pool of indices.

    Serves permutation blocks, reshuffling as each is exhausted; pools
    smaller than the requested batch are sampled with replacement.
    """

    def __init__(self, n: int, rng: np.random.Generator) -> None:
        if n < 1:
            raise DataError("cannot sample from an empty pool")
        self.n = n
        self.rng = rng
        self._queue = rng.permutation(n)

    def take(self, k: int) -> np.ndarray:
        if self.n < k:
            return self.rng.integers(0, self.n, size=k)
        while self._queue.shape[0] < k:
            self._queue = np.concatenate(
                [self._queue, self.rng.permutation(self.n)]
            )
        out, self._queue = self._queue[:k], self._queue[k:]
        return out


def train_model(
    model0: nn.ModelParams,
    source: WindowSet,
    scaler: Scaler,
    settings: TrainSettings,
    seed: int,
    *,
    lam: float = 0.0,
    target: WindowSet | None = None,
    kernel: KernelConfig = KernelConfig(),
) -> tuple[nn.ModelParams, list[dict]]:
    """Minibatch Adam training on (optionally MMD-regularized) windows.

    `source` must be labeled and in physical units; `target`, when lam > 0,
    supplies unlabeled windows for the penalty.  Shuffling uses one seeded
    stream for the source and an independent one for the target, so the
    lam == 0 path is bit-identical to plain supervised training.  History
    rows carry per-epoch means: loss_source is MSE per window, mmd2 the
    mean over minibatches, loss_total their lam-weighted sum.
    """
    if source.y is None or len(source) == 0:
        raise DataError("training needs a non-empty labeled source set")
    if lam < 0.0:
        raise ParameterError(f"lambda must be non-negative; got {lam}")
    use_mmd = lam > 0.0
    if use_mmd and (target is None or len(target) == 0):
        raise DataError("lambda > 0 requires non-empty target windows")

    x_s = scaler.transform(source.X)
    y_s = scaler.transform_labels(source.y)
    n_s = x_s.shape[0]
    ss = np.random.SeedSequence(seed)
    child_s, child_t = ss.spawn(2)
    rng_s = np.random.default_rng(child_s)
    x_t = None
    cycler = None
    if use_mmd:
        x_t = scaler.transform(target.X)
        cycler = _Cycler(x_t.shape[0], np.random.default_rng(child_t))

    model = model0.copy()
    opt = nn.adam_init(model, lr=settings.lr)
    history: list[dict] = []
    for epoch in range(settings.epochs):
        sigma = kernel.sigma
        if use_mmd and kernel.selection == "median":
            # Once per epoch, over the full pools under the current model;
            # degenerate geometry falls back to sigma = 1.
            z_all_s = nn.forward(model, x_s, encoder_only=True).z
            z_all_t = nn.forward(model, x_t, encoder_only=True).z
            try:
                sigma = median_bandwidth(z_all_s, z_all_t)
            except DataError:
                sigma = 1.0
        perm = rng_s.permutation(n_s)
        sq_sum = 0.0
        mmd_vals: list[float] = []
        for start in range(0, n_s, settings.batch_size):
            idx = perm[start : start + settings.batch_size]
            xb, yb = x_s[idx], y_s[idx]
            xtb = None
            if use_mmd:
                xtb = x_t[cycler.take(idx.shape[0])]
            grads, diag = gradients(model, xb, yb, xtb, lam if use_mmd else 0.0, sigma)
            grads, _ = nn.clip_global_norm(grads, settings.clip_norm)
            model = nn.adam_step(model, grads, opt)
            sq_sum += diag.loss_source
            if use_mmd:
                mmd_vals.append(diag.mmd2)
        mse = sq_sum / n_s
        mmd_mean = float(np.mean(mmd_vals)) if mmd_vals else 0.0
        total = mse + lam * mmd_mean
        if not np.isfinite(total):
            raise NumericError(f"training diverged at epoch {epoch}: loss={total}")
        history.append(
            {
                "epoch": epoch,
                "loss_source": mse,
                "mmd2": mmd_mean,
                "loss_total": total,
            }
        )
    return model, history


def train_baseline(
    model0: nn.ModelParams,
    source: WindowSet,
    scaler: Scaler,
    settings: TrainSettings,
    seed: int,
) -> tuple[nn.ModelParams, list[dict]]:
    """Source-only supervised training (the lam = 0 special case)."""
    return train_model(model0, source, scaler, settings, seed)


def train_adapted(
    model0: nn.ModelParams,
    source: WindowSet,
    target_unlabeled: WindowSet,
    scaler: Scaler,
    settings: TrainSettings,
    seed: int,
    lam: float,
    kernel: KernelConfig = KernelConfig(),
) -> tuple[nn.ModelParams, list[dict]]:
    """Joint supervised + MMD training against unlabeled target windows.

    With lam == 0 the penalty vanishes and this reduces bit-for-bit to
    train_baseline under the same seed.
    """
    if lam < 0.0:
        raise ParameterError(f"lambda must be non-negative; got {lam}")
    return train_model(
        model0,
        source,
        scaler,
        settings,
        seed,
        lam=lam,
        target=target_unlabeled if lam > 0.0 else None,
        kernel=kernel,
    )


def fine_tune_dense(
    model: nn.ModelParams,
    target_labeled: WindowSet,
    scaler: Scaler,
    settings: TrainSettings,
    seed: int,
) -> tuple[nn.ModelParams, list[dict]]:
    """Retrain only the dense head on early-life labeled target windows.

    Encoder and decoder are frozen, so the decoder hidden states are
    precomputed once and the head is fit to them with minibatch Adam;
    this is mathematically identical to running the full network with all
    non-head gradients masked.  History rows carry per-epoch MSE.
    """
    if target_labeled.y is None or len(target_labeled) == 0:
        raise DataError("fine-tuning needs non-empty labeled target windows")
    x = scaler.transform(target_labeled.X)
    y = scaler.transform_labels(target_labeled.y)
    h_dec = nn.forward(model, x).h_dec  # frozen features
    x_last = x[:, -1, 0]  # skip part of the prediction (frozen input)
    n = h_dec.shape[0]

    head = {"head_w": model.head_w.copy(), "head_b": model.head_b.copy()}
    opt = nn.AdamState(
        lr=settings.lr,
        m={k: np.zeros_like(v) for k, v in head.items()},
        v={k: np.zeros_like(v) for k, v in head.items()},
    )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    history: list[dict] = []
    for epoch in range(settings.epochs):
        perm = rng.permutation(n)
        sq_sum = 0.0
        for start in range(0, n, settings.batch_size):
            idx = perm[start : start + settings.batch_size]
            hb, yb = h_dec[idx], y[idx]
            yhat = x_last[idx] + hb @ head["head_w"] + head["head_b"][0]
            dyhat = 2.0 * (yhat - yb)
            grads = {
                "head_w": hb.T @ dyhat,
                "head_b": np.array([dyhat.sum()]),
            }
            grads, _ = nn.clip_global_norm(grads, settings.clip_norm)
            opt.t += 1
            bc1 = 1.0 - opt.beta1**opt.t
            bc2 = 1.0 - opt.beta2**opt.t
            for k in head:
                g = grads[k]
                opt.m[k] = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
                opt.v[k] = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * g * g
                head[k] = head[k] - opt.lr * (opt.m[k] / bc1) / (
                    np.sqrt(opt.v[k] / bc2) + opt.eps
                )
            sq_sum += float(((yhat - yb) ** 2).sum())
        mse = sq_sum / n
        if not np.isfinite(mse):
            raise NumericError(f"fine-tuning diverged at epoch {epoch}")
        history.append({"epoch": epoch, "loss_source": mse, "mmd2": 0.0,
                        "loss_total": mse})
    tuned = model.copy()
    tuned.head_w = head["head_w"]
    tuned.head_b = head["head_b"]
    # Frozen parts must be byte-identical to the input model.
    tuned.enc_wx = model.enc_wx
    tuned.enc_wh = model.enc_wh
    tuned.enc_b = model.enc_b
    tuned.dec_wx = model.dec_wx
    tuned.dec_wh = model.dec_wh
    tuned.dec_b = model.dec_b
    return tuned, history


# --------------------------------------------------------------------------
# Leave-one-batch-out lambda selection
# --------------------------------------------------------------------------


@dataclass
class LoboResult:
    lambda_grid: tuple[float, ...]
    batch_ids: tuple[str, ...]
    rmse: np.ndarray  # (n_lambda, n_batches), physical units
    scores: np.ndarray  # (n_lambda,) mean over folds
    lambda_star: float

    def to_csv(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["lambda", "held_out_batch", "rmse"])
            for ki, lam in enumerate(self.lambda_grid):
                for bi, batch in enumerate(self.batch_ids):
                    writer.writerow(
                        ["%.12g" % lam, batch, "%.12g" % self.rmse[ki, bi]]
                    )

    def to_dict(self) -> dict:
        return {
            "lambda_grid": [float(v) for v in self.lambda_grid],
            "batch_ids": list(self.batch_ids),
            "scores": [float(v) for v in self.scores],
            "lambda_star": float(self.lambda_star),
        }


def lobo_tune(
    source_batches: Mapping[str, WindowSet],
    lambda_grid: Sequence[float],
    hidden: int,
    settings: TrainSettings,
    seed: int,
    kernel: KernelConfig = KernelConfig(),
) -> LoboResult:
    """Leave-one-batch-out selection of the MMD weight.

    For every lambda and every held-out source batch, a fresh model is
    trained on the remaining batches -- with the held-out batch serving as
    the unlabeled pseudo-target -- and scored by teacher-forced one-step
    RMSE on the held-out labels (physical units).  Per-fold scalers are
    fit on the fold's training windows only.  Model init and shuffling are
    seeded per (lambda, fold), so folds are independent and reproducible.
    """
    batches = sorted(source_batches)
    if len(batches) < 2:
        raise DataError(
            f"LOBO needs at least two source batches; got {batches}"
        )
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise ParameterError("lambda grid must be non-empty")
    if any(not 0.0 <= v <= 1.0 for v in grid):
        raise ParameterError(f"lambda grid must lie in [0, 1]; got {grid}")
    if sorted(grid) != grid:
        raise ParameterError(f"lambda grid must be ascending; got {grid}")
    for batch in batches:
        ws = source_batches[batch]
        if ws.y is None or len(ws) == 0:
            raise DataError(f"source batch {batch} has no labeled windows")

    rmse = np.zeros((len(grid), len(batches)))
    for ki, lam in enumerate(grid):
        for bi, held in enumerate(batches):
            train_ws = stack_windows(
                [source_batches[b] for b in batches if b != held],
                name="lobo_train",
            )
            fold_ws = source_batches[held]
            scaler = fit_scaler(train_ws)
            model0 = nn.init_model(hidden, seed=derive_seed(seed, ki, bi))
            model, _ = train_model(
                model0,
                train_ws,
                scaler,
                settings,
                seed=derive_seed(seed, ki, bi, 1),
                lam=lam,
                target=fold_ws.without_labels() if lam > 0.0 else None,
                kernel=kernel,
            )
            preds = nn.Predictor(model, scaler).predict_next(fold_ws.X)
            err = preds - fold_ws.y
            rmse[ki, bi] = float(np.sqrt(np.mean(err * err)))
    scores = rmse.mean(axis=1)
    best = int(np.argmin(scores))  # ties resolve to the smaller lambda
    return LoboResult(
        lambda_grid=tuple(grid),
        batch_ids=tuple(batches),
        rmse=rmse,
        scores=scores,
        lambda_star=grid[best],
    )
