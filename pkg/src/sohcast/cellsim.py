"""Reduced-order lithium-ion cell aging simulator.

Generates heterogeneous virtual-cell populations and integrates two
capacity-fade pathways under piecewise-constant cycling protocols:

* loss of active material (LAM) in both electrodes: each electrode's
  active volume fraction decays in proportion to the applied current
  magnitude, with an Arrhenius temperature factor and a 1/eps term that
  accelerates fade as material is lost, and
* loss of lithium inventory (LLI) from SEI growth at the graphite anode,
  modeled as a cathodic Tafel side reaction that is active only while
  charging.  The interface potential is approximated by the anode OCP
  minus the ohmic drop across the SEI film; film resistance grows with
  accumulated side-reaction charge, and the film drop enters the Tafel
  argument, which makes high-rate charging disproportionately damaging.

State of health is the most limiting of the two electrode capacities and
the remaining cyclable lithium, normalized per cell to 1.0 at beginning
of life.  Cells are cycled at 100% depth of discharge with C-rates
redrawn from a batch-specific set after every fixed block of charge
throughput; trajectories are recorded on a fixed throughput grid, which
is the time axis used downstream by the forecasting models.

All integration is explicit Euler on scalar state, in float64, fully
deterministic for a given seed.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (
    DataError,
    DegradationFloorError,
    NumericError,
    ParameterError,
)

# --------------------------------------------------------------------------
# Physical constants and cycling batches
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Constants:
    """Physical constants and the (isothermal) cell temperature."""

    faraday: float = 96485.33212  # C/mol
    gas: float = 8.314462618  # J/(mol K)
    temperature: float = 298.0  # K


CONSTANTS = Constants()

#: C-rate sets per cycling batch.  Within a batch, discharge and charge
#: rates are redrawn independently from this set for every throughput
#: segment.  B2 is the unlabeled target fleet; the rest are source batches.
C_RATE_SETS: dict[str, tuple[float, ...]] = {
    "B1": (3.0, 4.0, 5.0),
    "B2": (1.0, 2.0, 3.0),
    "B3": (1.0 / 3.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0),
    "B4": (1.0 / 3.0, 0.5, 1.0),
}

SOURCE_BATCHES: tuple[str, ...] = ("B1", "B3", "B4")
TARGET_BATCH: str = "B2"
ALL_BATCHES: tuple[str, ...] = ("B1", "B2", "B3", "B4")


# --------------------------------------------------------------------------
# Parameters and state
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CellParams:
    """Per-cell physical parameters.

    Geometry is a single-stack equivalent: `area` is the total electrode
    face area and `l_n`/`l_p` the coating thicknesses, so `area * l_i` is
    the electrode volume.  `eps_am_n`/`eps_am_p` are the sampled
    beginning-of-life active-material volume fractions and double as the
    normalization reference for state of health.
    """

    eps_am_n: float = 0.60  # anode active-material volume fraction (BOL)
    eps_am_p: float = 0.55  # cathode active-material volume fraction (BOL)
    r_n: float = 5.0e-6  # anode particle radius [m]
    r_p: float = 3.0e-6  # cathode particle radius [m]
    l_n: float = 85.0e-6  # anode thickness [m]
    l_p: float = 75.0e-6  # cathode thickness [m]
    area: float = 1.1  # electrode face area [m^2]
    k_am_n: float = 1.1e-2  # anode LAM rate constant
    k_am_p: float = 8.3e-3  # cathode LAM rate constant
    e_am_n: float = 4.0e4  # anode LAM activation energy [J/mol]
    e_am_p: float = 4.0e4  # cathode LAM activation energy [J/mol]
    k_fs: float = 6.0e-14  # SEI kinetic prefactor [m/s]
    c_ec: float = 4500.0  # solvent concentration at the interface [mol/m^3]
    beta_s: float = 0.5  # SEI cathodic symmetry factor
    r_sei_0: float = 0.025  # initial SEI film resistance [ohm m^2]
    k_res: float = 5.0e-4  # film resistance growth per Ah of side charge
    q_nominal: float = 30.0  # nameplate capacity [Ah]

    def validated(self) -> "CellParams":
        """Return self after range-checking every field."""
        if not (0.0 < self.eps_am_n < 1.0 and 0.0 < self.eps_am_p < 1.0):
            raise ParameterError(
                f"active-material fractions must lie in (0, 1); got "
                f"eps_am_n={self.eps_am_n}, eps_am_p={self.eps_am_p}"
            )
        positive = {
            "r_n": self.r_n,
            "r_p": self.r_p,
            "l_n": self.l_n,
            "l_p": self.l_p,
            "area": self.area,
            "c_ec": self.c_ec,
            "q_nominal": self.q_nominal,
        }
        for name, value in positive.items():
            if not value > 0.0:
                raise ParameterError(f"{name} must be positive; got {value}")
        nonneg = {
            "k_am_n": self.k_am_n,
            "k_am_p": self.k_am_p,
            "e_am_n": self.e_am_n,
            "e_am_p": self.e_am_p,
            "k_fs": self.k_fs,
            "r_sei_0": self.r_sei_0,
            "k_res": self.k_res,
        }
        for name, value in nonneg.items():
            if value < 0.0:
                raise ParameterError(f"{name} must be non-negative; got {value}")
        if not (0.0 < self.beta_s <= 1.0):
            raise ParameterError(f"beta_s must lie in (0, 1]; got {self.beta_s}")
        return self


@dataclass
class SimState:
    """Instantaneous degradation state of one cell."""

    eps_am_n: float
    eps_am_p: float
    q_li: float  # cyclable lithium inventory [Ah]
    r_sei: float  # SEI film resistance [ohm m^2]
    soc: float  # state of charge in [0, 1]
    throughput: float  # cumulative charge throughput [Ah]


def initial_state(params: CellParams) -> SimState:
    """Beginning-of-life state: full, pristine, zero throughput."""
    return SimState(
        eps_am_n=params.eps_am_n,
        eps_am_p=params.eps_am_p,
        q_li=params.q_nominal,
        r_sei=params.r_sei_0,
        soc=1.0,
        throughput=0.0,
    )


def soh_of_state(state: SimState, params: CellParams) -> float:
    """State of health: most limiting capacity over nameplate.

    Electrode capacities scale with the surviving fraction of their BOL
    active material, so every cell starts at exactly 1.0 regardless of its
    sampled volume fractions.
    """
    q_n = params.q_nominal * (state.eps_am_n / params.eps_am_n)
    q_p = params.q_nominal * (state.eps_am_p / params.eps_am_p)
    q = min(q_n, q_p, state.q_li)
    return q / params.q_nominal


def u_n_graphite(soc: float) -> float:
    """Graphite-like open-circuit potential vs Li/Li+ [V].

    Monotone decreasing in soc; any correlation with that property can be
    substituted via the `ocp` argument of the integrator.
    """
    return 0.055 + 0.5 * math.exp(-12.0 * soc) + 0.21 * math.exp(-55.0 * soc)


# --------------------------------------------------------------------------
# Single Euler step
# --------------------------------------------------------------------------


def step_degradation(
    state: SimState,
    params: CellParams,
    i_applied: float,
    dt: float,
    *,
    const: Constants = CONSTANTS,
    ocp: Callable[[float], float] = u_n_graphite,
) -> SimState:
    """Advance the degradation state by one explicit Euler step.

    `i_applied` is the cell current in A, positive on discharge and
    negative on charge.  All rates are evaluated at the pre-step state.
    LAM acts on both electrodes whenever current flows; the SEI side
    reaction runs only while charging.  soc and throughput advance by
    coulomb counting against the instantaneous (degraded) capacity.
    """
    if dt <= 0.0:
        raise ParameterError(f"dt must be positive; got {dt}")
    eps_n = state.eps_am_n
    eps_p = state.eps_am_p
    if eps_n <= 0.0 or eps_p <= 0.0:
        raise DegradationFloorError(
            f"active material exhausted: eps_am_n={eps_n}, eps_am_p={eps_p}"
        )

    rt = const.gas * const.temperature
    i_abs = abs(i_applied)

    # LAM: d(eps)/dt = -k_am * (3 R / (eps A L)) * |I| * exp(-E / RT)
    d_eps_n = (
        dt
        * params.k_am_n
        * (3.0 * params.r_n / (eps_n * params.area * params.l_n))
        * i_abs
        * math.exp(-params.e_am_n / rt)
    )
    d_eps_p = (
        dt
        * params.k_am_p
        * (3.0 * params.r_p / (eps_p * params.area * params.l_p))
        * i_abs
        * math.exp(-params.e_am_p / rt)
    )

    # SEI: cathodic Tafel side current on the anode, charge only.
    dq_side = 0.0
    if i_applied < 0.0:
        a_n = 3.0 * eps_n / params.r_n  # specific interfacial area [1/m]
        area_rxn = a_n * params.area * params.l_n  # total interface [m^2]
        i_t = i_abs / area_rxn  # intercalation current density [A/m^2]
        # Interface potential proxy: anode OCP minus the film drop; the
        # Tafel argument subtracts the film drop once more, so the total
        # overpotential seen by the side reaction is U_n - 2 r_sei i_t.
        phi_1 = ocp(state.soc) - state.r_sei * i_t
        i_s = (
            -const.faraday
            * params.k_fs
            * params.c_ec
            * math.exp(
                -params.beta_s * const.faraday / rt * (phi_1 - state.r_sei * i_t)
            )
        )
        dq_side = -i_s * area_rxn * dt / 3600.0  # Ah of lithium lost

    q_n = params.q_nominal * (eps_n / params.eps_am_n)
    q_p = params.q_nominal * (eps_p / params.eps_am_p)
    q_now = min(q_n, q_p, state.q_li)

    new = SimState(
        eps_am_n=eps_n - d_eps_n,
        eps_am_p=eps_p - d_eps_p,
        q_li=state.q_li - dq_side,
        r_sei=state.r_sei + params.k_res * dq_side,
        soc=state.soc - i_applied * dt / (3600.0 * q_now),
        throughput=state.throughput + i_abs * dt / 3600.0,
    )
    if new.eps_am_n <= 0.0 or new.eps_am_p <= 0.0:
        raise DegradationFloorError(
            f"active material exhausted after step: eps_am_n={new.eps_am_n}, "
            f"eps_am_p={new.eps_am_p}"
        )
    return new


# --------------------------------------------------------------------------
# Population sampling and protocols
# --------------------------------------------------------------------------


def sample_population(
    n: int,
    nominal: tuple[float, float],
    rel_sigma: float,
    seed: int,
    *,
    base: CellParams | None = None,
) -> list[CellParams]:
    """Draw `n` cells with Gaussian active-material fractions.

    Each electrode fraction is drawn independently from
    N(nominal_i, (rel_sigma * nominal_i)^2); draws outside (0, 1) are
    rejected and redrawn.  All other parameters are shared from `base`.
    """
    if n <= 0:
        raise DataError(f"population size must be positive; got n={n}")
    if rel_sigma < 0.0:
        raise ParameterError(f"rel_sigma must be non-negative; got {rel_sigma}")
    for value in nominal:
        if not (0.0 < value < 1.0):
            raise ParameterError(
                f"nominal volume fractions must lie in (0, 1); got {nominal}"
            )
    if base is None:
        base = CellParams()
    rng = np.random.default_rng(seed)
    cells = []
    for _ in range(n):
        drawn = []
        for mean in nominal:
            sigma = rel_sigma * mean
            value = float(rng.normal(mean, sigma))
            while not (0.0 < value < 1.0):
                value = float(rng.normal(mean, sigma))
            drawn.append(value)
        cells.append(replace(base, eps_am_n=drawn[0], eps_am_p=drawn[1]))
    return cells


@dataclass(frozen=True)
class CyclingProtocol:
    """Piecewise-constant cycling schedule for one cell.

    `segments` is an ordered tuple of (c_rate_dis, c_rate_ch, length_ah);
    rates hold for the stated block of charge throughput, after which the
    next segment's rates take over mid-cycle if need be.  Cycling is full
    depth of discharge.
    """

    batch_id: str
    segments: tuple[tuple[float, float, float], ...]
    dod: float = 1.0

    @property
    def total_throughput(self) -> float:
        """Total scheduled charge throughput [Ah]."""
        return float(sum(seg[2] for seg in self.segments))


def make_protocol(
    batch_id: str,
    total_throughput_ah: float,
    segment_ah: float,
    seed: int,
) -> CyclingProtocol:
    """Draw a random rate schedule for one cell of the given batch.

    Discharge and charge C-rates are redrawn independently and uniformly
    from the batch's rate set for every `segment_ah` block of throughput.
    """
    if batch_id not in C_RATE_SETS:
        raise ParameterError(
            f"unknown batch_id {batch_id!r}; expected one of {ALL_BATCHES}"
        )
    if total_throughput_ah <= 0.0 or segment_ah <= 0.0:
        raise ParameterError(
            "total_throughput_ah and segment_ah must be positive; got "
            f"{total_throughput_ah}, {segment_ah}"
        )
    rates = C_RATE_SETS[batch_id]
    rng = np.random.default_rng(seed)
    segments = []
    remaining = total_throughput_ah
    while remaining > 1e-9:
        length = min(segment_ah, remaining)
        c_dis = float(rates[rng.integers(len(rates))])
        c_ch = float(rates[rng.integers(len(rates))])
        segments.append((c_dis, c_ch, length))
        remaining -= length
    return CyclingProtocol(batch_id=batch_id, segments=tuple(segments))


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------

TRAJECTORY_COLUMNS = (
    "cell_id",
    "batch_id",
    "throughput_kah",
    "soh",
    "c_rate_dis",
    "c_rate_ch",
)


@dataclass
class SOHTrajectory:
    """Recorded SOH-vs-throughput samples for one cell.

    `c_rate_dis`/`c_rate_ch` at row k are the rates in force over the
    block starting at that throughput, i.e. the rates driving the
    transition to row k+1.
    """

    cell_id: str
    batch_id: str
    throughput_kah: np.ndarray  # (m,)
    soh: np.ndarray  # (m,)
    c_rate_dis: np.ndarray  # (m,)
    c_rate_ch: np.ndarray  # (m,)
    truncated: bool = False
    params: CellParams | None = None

    def __len__(self) -> int:
        return int(self.throughput_kah.shape[0])

    def to_csv(self, path: Path | str) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(TRAJECTORY_COLUMNS)
            for k in range(len(self)):
                writer.writerow(
                    [
                        self.cell_id,
                        self.batch_id,
                        "%.12g" % self.throughput_kah[k],
                        "%.12g" % self.soh[k],
                        "%.12g" % self.c_rate_dis[k],
                        "%.12g" % self.c_rate_ch[k],
                    ]
                )

    @classmethod
    def from_csv(cls, path: Path | str) -> "SOHTrajectory":
        path = Path(path)
        rows = []
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != TRAJECTORY_COLUMNS:
                raise DataError(
                    f"{path}: bad trajectory header {header!r}; expected "
                    f"{TRAJECTORY_COLUMNS}"
                )
            rows = list(reader)
        if not rows:
            raise DataError(f"{path}: empty trajectory file")
        cell_ids = {row[0] for row in rows}
        batch_ids = {row[1] for row in rows}
        if len(cell_ids) != 1 or len(batch_ids) != 1:
            raise DataError(f"{path}: mixed cell or batch ids in one file")
        data = np.array([[float(v) for v in row[2:]] for row in rows])
        return cls(
            cell_id=rows[0][0],
            batch_id=rows[0][1],
            throughput_kah=data[:, 0].copy(),
            soh=data[:, 1].copy(),
            c_rate_dis=data[:, 2].copy(),
            c_rate_ch=data[:, 3].copy(),
        )


# --------------------------------------------------------------------------
# Full-cell integration
# --------------------------------------------------------------------------


def simulate_cell(
    params: CellParams,
    protocol: CyclingProtocol,
    *,
    const: Constants = CONSTANTS,
    record_interval_ah: float = 1000.0,
    steps_per_half_cycle: int = 100,
    soh_floor: float = 0.35,
    rel_change_limit: float = 1e-3,
    ocp: Callable[[float], float] = u_n_graphite,
    cell_id: str | None = None,
) -> SOHTrajectory:
    """Cycle one cell through its protocol and record SOH on a grid.

    The cell is cycled at full depth of discharge, starting with a
    discharge from soc 1.  Each half cycle is integrated in
    `steps_per_half_cycle` explicit Euler steps; steps are additionally
    split so that record boundaries, segment switches, soc limits, and the
    end of the schedule are hit exactly.  A step that would change any of
    eps_am_n, eps_am_p, or q_li by more than `rel_change_limit` (relative)
    is retried with a halved dt.

    Recording stops early, with `truncated=True`, if SOH falls to
    `soh_floor` or an electrode runs out of active material.
    """
    params = params.validated()
    if cell_id is None:
        cell_id = f"{protocol.batch_id}_cell"
    total = protocol.total_throughput
    n_rec = total / record_interval_ah
    if abs(n_rec - round(n_rec)) > 1e-6:
        raise ParameterError(
            f"record_interval_ah={record_interval_ah} must divide the "
            f"protocol throughput {total}"
        )
    if steps_per_half_cycle < 1:
        raise ParameterError(
            f"steps_per_half_cycle must be >= 1; got {steps_per_half_cycle}"
        )

    segments = protocol.segments
    nseg = len(segments)
    rt = const.gas * const.temperature
    # Per-cell constants, hoisted out of the step loop.  The per-step
    # arithmetic below mirrors step_degradation exactly (same formulas on
    # the same pre-step state); only constant subexpressions are hoisted.
    q_nom = params.q_nominal
    eps_n0 = params.eps_am_n
    eps_p0 = params.eps_am_p
    lam_n = params.k_am_n * 3.0 * params.r_n / (params.area * params.l_n)
    lam_p = params.k_am_p * 3.0 * params.r_p / (params.area * params.l_p)
    arr_n = math.exp(-params.e_am_n / rt)
    arr_p = math.exp(-params.e_am_p / rt)
    sei_k = const.faraday * params.k_fs * params.c_ec  # exchange scale [A/m^2]
    sei_b = params.beta_s * const.faraday / rt  # 1/V
    vol_n = params.area * params.l_n
    r_part_n = params.r_n
    k_res = params.k_res

    eps_n = params.eps_am_n
    eps_p = params.eps_am_p
    q_li = q_nom
    r_sei = params.r_sei_0
    soc = 1.0
    thr = 0.0  # Ah

    rec_thr: list[float] = []
    rec_soh: list[float] = []
    rec_dis: list[float] = []
    rec_ch: list[float] = []
    truncated = False

    si = 0
    seg_end = segments[0][2]
    next_rec = 0.0
    discharging = True
    math_exp = math.exp

    try:
        while True:
            # Segment switch first so records at a shared boundary carry
            # the rates of the block they start.
            if thr >= seg_end - 1e-9 and si + 1 < nseg:
                si += 1
                seg_end += segments[si][2]
                continue
            if thr >= next_rec - 1e-9:
                q_n = q_nom * (eps_n / eps_n0)
                q_p = q_nom * (eps_p / eps_p0)
                q_now = min(q_n, q_p, q_li)
                soh = q_now / q_nom
                if not math.isfinite(soh):
                    raise NumericError(
                        f"{cell_id}: non-finite state at {thr:.1f} Ah"
                    )
                rec_thr.append(next_rec / 1000.0)
                rec_soh.append(soh)
                rec_dis.append(segments[si][0])
                rec_ch.append(segments[si][1])
                if soh <= soh_floor:
                    truncated = True
                    break
                next_rec += record_interval_ah
                continue
            if thr >= total - 1e-9:
                break
            if discharging and soc <= 1e-12:
                discharging = False
                continue
            if not discharging and soc >= 1.0 - 1e-12:
                discharging = True
                continue

            c_dis, c_ch, _ = segments[si]
            rate = c_dis if discharging else c_ch
            i_abs = rate * q_nom  # A

            q_n = q_nom * (eps_n / eps_n0)
            q_p = q_nom * (eps_p / eps_p0)
            q_now = min(q_n, q_p, q_li)

            # Candidate dt: nominal pace, clipped to the nearest event.
            dt_pace = 3600.0 * q_now / (i_abs * steps_per_half_cycle)
            span = soc if discharging else 1.0 - soc
            t_bound = 3600.0 * q_now * span / i_abs
            t_rec = 3600.0 * (next_rec - thr) / i_abs
            t_seg = (
                3600.0 * (seg_end - thr) / i_abs if si + 1 < nseg else math.inf
            )
            t_end = 3600.0 * (total - thr) / i_abs
            dt = min(dt_pace, t_bound, t_rec, t_seg, t_end)

            while True:
                d_eps_n = dt * lam_n * i_abs * arr_n / eps_n
                d_eps_p = dt * lam_p * i_abs * arr_p / eps_p
                dq_side = 0.0
                if not discharging:
                    area_rxn = 3.0 * eps_n / r_part_n * vol_n
                    i_t = i_abs / area_rxn
                    over = ocp(soc) - 2.0 * r_sei * i_t
                    dq_side = (
                        sei_k * math_exp(-sei_b * over) * area_rxn * dt / 3600.0
                    )
                if (
                    d_eps_n <= rel_change_limit * eps_n
                    and d_eps_p <= rel_change_limit * eps_p
                    and dq_side <= rel_change_limit * q_li
                ):
                    break
                dt *= 0.5
                if dt < 1e-9:
                    raise NumericError(
                        f"{cell_id}: step size collapsed at {thr:.1f} Ah"
                    )

            eps_n -= d_eps_n
            eps_p -= d_eps_p
            if eps_n <= 0.0 or eps_p <= 0.0:
                truncated = True
                break
            q_li -= dq_side
            r_sei += k_res * dq_side
            delta_ah = i_abs * dt / 3600.0
            if discharging:
                soc -= delta_ah / q_now
            else:
                soc += delta_ah / q_now
            thr += delta_ah
            # Snap to the event this step was cut to, avoiding float drift.
            if dt == t_rec:
                thr = next_rec
            elif dt == t_seg:
                thr = seg_end
            elif dt == t_end:
                thr = total
            if dt == t_bound:
                soc = 0.0 if discharging else 1.0
    except OverflowError as exc:
        raise NumericError(f"{cell_id}: overflow at {thr:.1f} Ah") from exc

    return SOHTrajectory(
        cell_id=cell_id,
        batch_id=protocol.batch_id,
        throughput_kah=np.asarray(rec_thr, dtype=np.float64),
        soh=np.asarray(rec_soh, dtype=np.float64),
        c_rate_dis=np.asarray(rec_dis, dtype=np.float64),
        c_rate_ch=np.asarray(rec_ch, dtype=np.float64),
        truncated=truncated,
        params=params,
    )
