"""Windowing, standardization, and source/target domain splits.

Trajectories are turned into sliding windows of `w` consecutive
(soh, c_rate_dis, c_rate_ch) rows; the label is the SOH one step past the
window.  Windows never cross cells.  Feature standardization is fit on
source training windows only and applied everywhere else, so no target or
calibration statistics leak into the inputs.

The domain split mirrors the fleet setup: labeled source batches (B1, B3,
B4) minus a held-out calibration subset per batch, plus a target batch
(B2) that is labeled only up to an early-life throughput cutoff and
unlabeled afterwards.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cellsim import SOHTrajectory, SOURCE_BATCHES, TARGET_BATCH
from .errors import DataError, ParameterError

FEATURE_NAMES = ("soh", "c_rate_dis", "c_rate_ch")


# --------------------------------------------------------------------------
# Window sets
# --------------------------------------------------------------------------


@dataclass
class WindowSet:
    """A stack of sliding windows, optionally labeled.

    `X` has shape (n, w, 3) in physical units; `y` is the next-step SOH
    per window, or None for unlabeled pools.  `step` is the label's row
    index within its source trajectory and `label_thr_kah` the label's
    throughput, kept for calibration-cutoff bookkeeping and rollouts.
    """

    X: np.ndarray
    y: np.ndarray | None
    cell_id: np.ndarray  # (n,) str
    batch_id: np.ndarray  # (n,) str
    step: np.ndarray  # (n,) int, label row index in the trajectory
    label_thr_kah: np.ndarray  # (n,) float
    name: str = ""

    def __post_init__(self) -> None:
        if self.X.ndim != 3 or self.X.shape[2] != len(FEATURE_NAMES):
            raise ParameterError(
                f"window array must be (n, w, {len(FEATURE_NAMES)}); got "
                f"{self.X.shape}"
            )

    def __len__(self) -> int:
        return int(self.X.shape[0])

    @property
    def window(self) -> int:
        return int(self.X.shape[1])

    def subset(self, idx: np.ndarray | Sequence[int]) -> "WindowSet":
        idx = np.asarray(idx)
        if idx.dtype != bool:
            idx = idx.astype(np.intp, copy=False)
        return WindowSet(
            X=self.X[idx],
            y=None if self.y is None else self.y[idx],
            cell_id=self.cell_id[idx],
            batch_id=self.batch_id[idx],
            step=self.step[idx],
            label_thr_kah=self.label_thr_kah[idx],
            name=self.name,
        )

    def without_labels(self) -> "WindowSet":
        out = self.subset(np.arange(len(self)))
        out.y = None
        return out


def window_trajectory(traj: SOHTrajectory, w: int) -> WindowSet:
    """Slide a length-`w` window over one trajectory.

    Window j covers rows j..j+w-1 and is labeled with the SOH at row j+w,
    giving len(traj) - w windows.
    """
    if w < 1:
        raise ParameterError(f"window length must be >= 1; got {w}")
    m = len(traj)
    if m < w + 1:
        raise DataError(
            f"{traj.cell_id}: trajectory has {m} samples; needs at least "
            f"{w + 1} for w={w}"
        )
    feats = np.stack([traj.soh, traj.c_rate_dis, traj.c_rate_ch], axis=1)
    n = m - w
    idx = np.arange(w)[None, :] + np.arange(n)[:, None]
    X = feats[idx]  # (n, w, 3)
    steps = np.arange(w, m)
    return WindowSet(
        X=X,
        y=traj.soh[w:].copy(),
        cell_id=np.full(n, traj.cell_id, dtype=object),
        batch_id=np.full(n, traj.batch_id, dtype=object),
        step=steps,
        label_thr_kah=traj.throughput_kah[w:].copy(),
    )


def stack_windows(sets: Sequence[WindowSet], name: str = "") -> WindowSet:
    """Concatenate window sets (all labeled or all unlabeled)."""
    if not sets:
        raise DataError("cannot stack an empty list of window sets")
    widths = {s.window for s in sets}
    if len(widths) != 1:
        raise DataError(f"mixed window lengths {sorted(widths)}")
    labeled = {s.y is not None for s in sets}
    if len(labeled) != 1:
        raise DataError("cannot mix labeled and unlabeled window sets")
    return WindowSet(
        X=np.concatenate([s.X for s in sets]),
        y=None if sets[0].y is None else np.concatenate([s.y for s in sets]),
        cell_id=np.concatenate([s.cell_id for s in sets]),
        batch_id=np.concatenate([s.batch_id for s in sets]),
        step=np.concatenate([s.step for s in sets]),
        label_thr_kah=np.concatenate([s.label_thr_kah for s in sets]),
        name=name,
    )


def empty_window_set(w: int, labeled: bool, name: str = "") -> WindowSet:
    return WindowSet(
        X=np.zeros((0, w, len(FEATURE_NAMES))),
        y=np.zeros(0) if labeled else None,
        cell_id=np.zeros(0, dtype=object),
        batch_id=np.zeros(0, dtype=object),
        step=np.zeros(0, dtype=int),
        label_thr_kah=np.zeros(0),
        name=name,
    )


# --------------------------------------------------------------------------
# Standardization
# --------------------------------------------------------------------------


@dataclass
class Scaler:
    """Per-feature z-score statistics, fit on source training windows."""

    mean_: np.ndarray  # (3,)
    std_: np.ndarray  # (3,)

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (X - self.mean_) / self.std_

    def transform_labels(self, y: np.ndarray) -> np.ndarray:
        return (y - self.mean_[0]) / self.std_[0]

    def inverse_labels(self, y_std: np.ndarray) -> np.ndarray:
        return y_std * self.std_[0] + self.mean_[0]

    def to_dict(self) -> dict:
        return {
            "feature_names": list(FEATURE_NAMES),
            "mean": [float(v) for v in self.mean_],
            "std": [float(v) for v in self.std_],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scaler":
        mean = np.asarray(d["mean"], dtype=np.float64)
        std = np.asarray(d["std"], dtype=np.float64)
        if mean.shape != (len(FEATURE_NAMES),) or std.shape != mean.shape:
            raise DataError(f"bad scaler stats: mean {mean}, std {std}")
        return cls(mean_=mean, std_=std)


def fit_scaler(windows: WindowSet) -> Scaler:
    """Fit per-feature mean and sample std over all window rows.

    Uses ddof=1; requires at least two rows and a strictly positive
    spread in every feature.
    """
    rows = windows.X.reshape(-1, windows.X.shape[2])
    if rows.shape[0] < 2:
        raise DataError(
            f"need at least 2 window rows to fit a scaler; got {rows.shape[0]}"
        )
    mean = rows.mean(axis=0)
    std = rows.std(axis=0, ddof=1)
    for j, s in enumerate(std):
        if not s > 0.0:
            raise DataError(
                f"feature {FEATURE_NAMES[j]!r} has zero spread; cannot "
                "standardize"
            )
    return Scaler(mean_=mean, std_=std)


# --------------------------------------------------------------------------
# Domain split
# --------------------------------------------------------------------------


@dataclass
class DomainSplit:
    """Window partitions for transfer learning plus calibration.

    * source_labeled: training windows from non-held-out source cells
    * calibration: windows from the held-out source cells (labeled)
    * target_labeled: early-life target windows (label at or before the
      throughput cutoff)
    * target_unlabeled: remaining target windows with labels dropped
    """

    source_labeled: WindowSet
    calibration: WindowSet
    target_labeled: WindowSet
    target_unlabeled: WindowSet
    calib_cells: dict[str, tuple[str, ...]] = field(default_factory=dict)
    cutoff_kah: float = 0.0
    window: int = 0


def _by_batch(trajectories: Iterable[SOHTrajectory]) -> dict[str, list[SOHTrajectory]]:
    groups: dict[str, list[SOHTrajectory]] = {}
    for traj in trajectories:
        groups.setdefault(traj.batch_id, []).append(traj)
    for batch in groups:
        groups[batch].sort(key=lambda t: t.cell_id)
    return groups


def split_from_roles(
    trajectories: Iterable[SOHTrajectory],
    roles: Mapping[str, str],
    w: int,
    cutoff_kah: float,
) -> DomainSplit:
    """Build window partitions from an explicit cell -> role map.

    Roles are 'source_train', 'source_calib', or 'target'.  Target windows
    are labeled iff their label throughput is at or before `cutoff_kah`.
    """
    if w < 1:
        raise ParameterError(f"window length must be >= 1; got {w}")
    if cutoff_kah < 0.0:
        raise ParameterError(f"cutoff must be non-negative; got {cutoff_kah}")
    src_sets: list[WindowSet] = []
    cal_sets: list[WindowSet] = []
    tgt_sets: list[WindowSet] = []
    calib_cells: dict[str, list[str]] = {}
    for traj in sorted(trajectories, key=lambda t: (t.batch_id, t.cell_id)):
        role = roles.get(traj.cell_id)
        if role is None:
            raise DataError(f"no role assigned for cell {traj.cell_id!r}")
        ws = window_trajectory(traj, w)
        if role == "source_train":
            src_sets.append(ws)
        elif role == "source_calib":
            cal_sets.append(ws)
            calib_cells.setdefault(traj.batch_id, []).append(traj.cell_id)
        elif role == "target":
            tgt_sets.append(ws)
        else:
            raise DataError(f"unknown role {role!r} for cell {traj.cell_id!r}")
    if not src_sets:
        raise DataError("split produced no source training cells")
    if not tgt_sets:
        raise DataError("split produced no target cells")
    source_labeled = stack_windows(src_sets, name="source_labeled")
    calibration = (
        stack_windows(cal_sets, name="calibration")
        if cal_sets
        else empty_window_set(w, labeled=True, name="calibration")
    )
    target_all = stack_windows(tgt_sets, name="target")
    early = target_all.label_thr_kah <= cutoff_kah + 1e-9
    target_labeled = target_all.subset(np.flatnonzero(early))
    target_labeled.name = "target_labeled"
    target_unlabeled = target_all.subset(np.flatnonzero(~early)).without_labels()
    target_unlabeled.name = "target_unlabeled"
    return DomainSplit(
        source_labeled=source_labeled,
        calibration=calibration,
        target_labeled=target_labeled,
        target_unlabeled=target_unlabeled,
        calib_cells={b: tuple(cells) for b, cells in sorted(calib_cells.items())},
        cutoff_kah=cutoff_kah,
        window=w,
    )


def build_domain_split(
    trajectories: Sequence[SOHTrajectory],
    w: int,
    cutoff_kah: float,
    calib_per_batch: int,
    seed: int,
) -> DomainSplit:
    """Assign roles and window the fleet.

    Per source batch, `calib_per_batch` cells are drawn (without
    replacement, seeded) into the conformal calibration partition; the
    rest become source training cells.  All target-batch cells keep the
    'target' role.
    """
    if calib_per_batch < 0:
        raise ParameterError(
            f"calib_per_batch must be non-negative; got {calib_per_batch}"
        )
    groups = _by_batch(trajectories)
    if TARGET_BATCH not in groups:
        raise DataError(f"no cells from target batch {TARGET_BATCH!r}")
    source_present = [b for b in SOURCE_BATCHES if b in groups]
    if not source_present:
        raise DataError(f"no cells from any source batch {SOURCE_BATCHES}")
    unknown = sorted(set(groups) - {TARGET_BATCH} - set(SOURCE_BATCHES))
    if unknown:
        raise DataError(f"unknown batches in fleet: {unknown}")
    rng = np.random.default_rng(seed)
    roles: dict[str, str] = {}
    for batch in source_present:
        cells = [t.cell_id for t in groups[batch]]
        if calib_per_batch >= len(cells):
            raise DataError(
                f"batch {batch}: cannot hold out {calib_per_batch} of "
                f"{len(cells)} cells for calibration"
            )
        held = set(rng.choice(len(cells), size=calib_per_batch, replace=False))
        for k, cell in enumerate(cells):
            roles[cell] = "source_calib" if k in held else "source_train"
    for traj in groups[TARGET_BATCH]:
        roles[traj.cell_id] = "target"
    return split_from_roles(trajectories, roles, w, cutoff_kah)


# --------------------------------------------------------------------------
# Bundle I/O
# --------------------------------------------------------------------------

MANIFEST_NAME = "manifest.csv"
SPLIT_NAME = "split.json"
TRAJ_DIR = "trajectories"

_PARAM_FIELDS = (
    "eps_am_n",
    "eps_am_p",
    "r_n",
    "r_p",
    "l_n",
    "l_p",
    "area",
    "k_am_n",
    "k_am_p",
    "e_am_n",
    "e_am_p",
    "k_fs",
    "c_ec",
    "beta_s",
    "r_sei_0",
    "k_res",
    "q_nominal",
)


def write_bundle(
    bundle_dir: Path | str,
    trajectories: Sequence[SOHTrajectory],
    roles: Mapping[str, str],
    split_meta: Mapping,
) -> None:
    """Persist a fleet: manifest, per-cell trajectory CSVs, split JSON."""
    bundle_dir = Path(bundle_dir)
    traj_dir = bundle_dir / TRAJ_DIR
    traj_dir.mkdir(parents=True, exist_ok=True)
    ordered = sorted(trajectories, key=lambda t: (t.batch_id, t.cell_id))
    with (bundle_dir / MANIFEST_NAME).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["cell_id", "batch_id", "role", "truncated", "n_samples"]
            + list(_PARAM_FIELDS)
        )
        for traj in ordered:
            if traj.params is None:
                raise DataError(f"{traj.cell_id}: trajectory lacks parameters")
            writer.writerow(
                [
                    traj.cell_id,
                    traj.batch_id,
                    roles[traj.cell_id],
                    int(traj.truncated),
                    len(traj),
                ]
                + ["%.12g" % getattr(traj.params, f) for f in _PARAM_FIELDS]
            )
    for traj in ordered:
        traj.to_csv(traj_dir / f"{traj.cell_id}.csv")
    with (bundle_dir / SPLIT_NAME).open("w") as fh:
        json.dump(split_meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(bundle_dir: Path | str) -> list[dict]:
    """Read manifest rows as dicts (params parsed to float)."""
    path = Path(bundle_dir) / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"missing manifest: {path}")
    rows = []
    with path.open(newline="") as fh:
        for row in csv.DictReader(fh):
            row["truncated"] = bool(int(row["truncated"]))
            row["n_samples"] = int(row["n_samples"])
            for f in _PARAM_FIELDS:
                row[f] = float(row[f])
            rows.append(row)
    if not rows:
        raise DataError(f"empty manifest: {path}")
    return rows


def read_split_meta(bundle_dir: Path | str) -> dict:
    path = Path(bundle_dir) / SPLIT_NAME
    if not path.exists():
        raise DataError(f"missing split file: {path}")
    with path.open() as fh:
        return json.load(fh)


def load_trajectories(
    bundle_dir: Path | str,
    *,
    roles: Sequence[str] | None = None,
    batches: Sequence[str] | None = None,
) -> list[SOHTrajectory]:
    """Load trajectory CSVs, optionally restricted by role and/or batch.

    Only the selected cells' files are opened, so e.g. hyperparameter
    tuning can load source batches without ever touching target files.
    """
    bundle_dir = Path(bundle_dir)
    manifest = read_manifest(bundle_dir)
    selected = []
    for row in manifest:
        if roles is not None and row["role"] not in roles:
            continue
        if batches is not None and row["batch_id"] not in batches:
            continue
        selected.append(row)
    if not selected:
        raise DataError(
            f"no cells match roles={roles} batches={batches} in {bundle_dir}"
        )
    out = []
    for row in selected:
        path = bundle_dir / TRAJ_DIR / f"{row['cell_id']}.csv"
        if not path.exists():
            raise DataError(f"manifest lists {row['cell_id']} but {path} is missing")
        traj = SOHTrajectory.from_csv(path)
        out.append(traj)
    return out


def roles_from_manifest(manifest: Sequence[Mapping]) -> dict[str, str]:
    return {row["cell_id"]: row["role"] for row in manifest}
