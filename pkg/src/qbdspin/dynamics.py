"""Memory storage and recall as symmetry breaking plus damped magnon decay.

Storage: a Monte Carlo quench below the ordering temperature leaves the
system with a spontaneously chosen magnetization direction - that
direction is the stored content.  Recall: a local pulse tilts a few spins,
exciting spin waves.  The excitation then relaxes under damped precession

    dS_i/dt = -S_i x h_i - alpha S_i x (S_i x h_i),

the Landau-Lifshitz form with dimensionless damping alpha and h_i the
exchange field of the model module.  The damping term is a strict
Lyapunov drain (dH/dt = -alpha sum_i [|h_i|^2 - (S_i.h_i)^2] <= 0), so
with alpha > 0 the pulse energy decays back toward the stored state;
alpha = 0 recovers conservative precession.

Integration is the explicit midpoint rule in rotational form: the
equation is dS_i/dt = omega_i x S_i with the generator
omega_i = h_i + alpha S_i x h_i, so each step rotates S_i about
omega_i evaluated at a half-step predictor (second order), followed by
the contractual per-step renormalization (a no-op at machine precision,
since rotations preserve norms exactly).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import model
from .errors import DomainError, InsufficientDataError, StepSizeError
from .lattice import CouplingTable, Lattice, SpinConfig
from .montecarlo import ChainParams, run_chain

__all__ = [
    "MemoryRecord",
    "Trajectory",
    "RecallReport",
    "store_memory",
    "recall_pulse",
    "evolve_damped",
    "measure_recall",
    "smoothed_excess",
    "save_trajectory_csv",
]


@dataclass
class MemoryRecord:
    order_direction: np.ndarray   # unit 3-vector: the stored content
    order_magnitude: float
    T_store: float


@dataclass
class Trajectory:
    t: np.ndarray
    energy: np.ndarray
    excess: np.ndarray            # energy above the relaxed reference
    m: np.ndarray                 # (n, 3)
    dt: float
    alpha: float

    @property
    def n_frames(self) -> int:
        return self.t.shape[0]


@dataclass
class RecallReport:
    decay_time: float             # None when the excess never decays (alpha=0)
    direction_fidelity: float
    no_decay: bool


def store_memory(lattice: Lattice, table: CouplingTable, T_store: float,
                 params: ChainParams):
    """Equilibrate from a random start at T_store (caller asserts it lies
    below the ordering temperature) and return the final configuration
    with its order direction and magnitude."""
    if table.sign != 1:
        raise DomainError("store_memory expects a ferromagnetic (sign=+1) table")
    params = dataclasses.replace(params, T=T_store)
    _, config = run_chain(lattice, table, params, start="random",
                          return_config=True)
    m = config.magnetization()
    mag = float(np.linalg.norm(m))
    direction = m / mag if mag > 1e-12 else np.array([0.0, 0.0, 1.0])
    return config, MemoryRecord(order_direction=direction,
                                order_magnitude=mag, T_store=T_store)


def recall_pulse(config: SpinConfig, sites, tilt_angle: float,
                 order_direction=None) -> SpinConfig:
    """Rotate the listed spins by tilt_angle about a fixed axis
    perpendicular to the order direction (default: the configuration's
    own magnetization direction).  Norm preserving."""
    sites = np.atleast_1d(np.asarray(sites, dtype=np.int64))
    if sites.size == 0:
        raise DomainError("recall pulse needs a nonempty site set")
    if not (0.0 < tilt_angle <= math.pi / 2.0):
        raise DomainError(f"tilt_angle must lie in (0, pi/2], got {tilt_angle}")
    n = config.spins.shape[0]
    if np.any(sites < 0) or np.any(sites >= n):
        raise DomainError("pulse site index out of range")
    if order_direction is None:
        m = config.magnetization()
        nm = np.linalg.norm(m)
        order_direction = m / nm if nm > 1e-12 else np.array([0.0, 0.0, 1.0])
    order_direction = np.asarray(order_direction, dtype=float)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(order_direction[0]) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    axis = np.cross(order_direction, ref)
    axis /= np.linalg.norm(axis)

    out = config.copy()
    c, s = math.cos(tilt_angle), math.sin(tilt_angle)
    v = out.spins[sites]
    # Rodrigues rotation about `axis`
    out.spins[sites] = (v * c + np.cross(axis, v) * s
                        + np.outer(v @ axis, axis) * (1.0 - c))
    norms = np.linalg.norm(out.spins[sites], axis=1)
    out.spins[sites] /= norms[:, None]
    return out


def _torque(spins: np.ndarray, h: np.ndarray, alpha: float) -> np.ndarray:
    sxh = np.cross(spins, h)
    if alpha == 0.0:
        return -sxh
    return -sxh - alpha * np.cross(spins, sxh)


def _rotate(spins: np.ndarray, omega: np.ndarray, dt: float) -> np.ndarray:
    """Rodrigues rotation of each spin about its generator omega by
    |omega| dt."""
    theta = np.linalg.norm(omega, axis=1)
    axis = omega / np.maximum(theta, 1e-300)[:, None]
    c = np.cos(theta * dt)[:, None]
    s = np.sin(theta * dt)[:, None]
    return (spins * c + np.cross(axis, spins) * s
            + axis * (axis * spins).sum(axis=1)[:, None] * (1.0 - c))


def evolve_damped(config: SpinConfig, table: CouplingTable, alpha: float,
                  dt: float, steps: int, reference_energy: float = None) -> Trajectory:
    """Integrate the damped precession for `steps` midpoint steps of size
    dt, recording a frame per step (plus the initial one).

    reference_energy defines the "relaxed" baseline for the excess-energy
    observable; it defaults to the initial energy.  With alpha > 0 an
    excess growth beyond 10% aborts with StepSizeError carrying the
    partial trajectory.
    """
    if not (dt > 0.0):
        raise DomainError(f"dt must be > 0, got {dt}")
    if alpha < 0.0:
        raise DomainError(f"alpha must be >= 0, got {alpha}")
    if steps < 1:
        raise DomainError("steps must be >= 1")
    spins = config.spins.copy()
    n = spins.shape[0]
    e0 = model.total_energy(SpinConfig(spins), table).total
    ref = e0 if reference_energy is None else float(reference_energy)

    t = np.zeros(steps + 1)
    energy = np.zeros(steps + 1)
    excess = np.zeros(steps + 1)
    mag = np.zeros((steps + 1, 3))
    energy[0] = e0
    excess[0] = e0 - ref
    mag[0] = spins.mean(axis=0)
    growth_limit = 1.1 * excess[0] + 1e-9 * max(1.0, abs(e0))

    W = table.sparse()
    sign2 = 2.0 * table.sign

    def fields(S):
        return sign2 * W.dot(S)

    def generator(S):
        h = fields(S)
        return h + alpha * np.cross(S, h) if alpha != 0.0 else h

    for step in range(1, steps + 1):
        mid = spins + (0.5 * dt) * _torque(spins, fields(spins), alpha)
        mid /= np.linalg.norm(mid, axis=1)[:, None]
        spins = _rotate(spins, generator(mid), dt)
        spins /= np.linalg.norm(spins, axis=1)[:, None]
        e = model.total_energy(SpinConfig(spins), table).total
        t[step] = step * dt
        energy[step] = e
        excess[step] = e - ref
        mag[step] = spins.mean(axis=0)
        if alpha > 0.0 and excess[step] > growth_limit:
            partial = Trajectory(t=t[:step + 1], energy=energy[:step + 1],
                                 excess=excess[:step + 1], m=mag[:step + 1],
                                 dt=dt, alpha=alpha)
            raise StepSizeError(
                f"excess energy grew from {excess[0]:g} to {excess[step]:g} "
                f"at t={t[step]:g} despite alpha={alpha}: reduce dt",
                trajectory=partial)

    config.spins[:] = spins
    return Trajectory(t=t, energy=energy, excess=excess, m=mag, dt=dt,
                      alpha=alpha)


def smoothed_excess(traj: Trajectory, window: int = 10) -> np.ndarray:
    """Moving average of the excess energy (window frames)."""
    if window <= 1:
        return traj.excess.copy()
    kernel = np.ones(window) / window
    return np.convolve(traj.excess, kernel, mode="valid")


def measure_recall(traj: Trajectory, record: MemoryRecord) -> RecallReport:
    """Decay time (first 1/e crossing of the excess, linear interpolation)
    and the overlap of the final magnetization direction with the stored
    one.  A trajectory whose excess never decays (alpha=0) reports
    no_decay instead of failing."""
    if traj.n_frames < 100:
        raise InsufficientDataError(
            f"measure_recall needs >= 100 frames, got {traj.n_frames}")
    e0 = traj.excess[0]
    threshold = e0 / math.e
    decay_time = None
    if e0 > 0.0:
        below = np.nonzero(traj.excess <= threshold)[0]
        if below.size:
            k = int(below[0])
            if k == 0:
                decay_time = 0.0
            else:
                f = (traj.excess[k - 1] - threshold) / (traj.excess[k - 1] - traj.excess[k])
                decay_time = float(traj.t[k - 1] + f * (traj.t[k] - traj.t[k - 1]))
    m_final = traj.m[-1]
    nm = np.linalg.norm(m_final)
    fidelity = float(np.dot(m_final / nm, record.order_direction)) if nm > 0 else 0.0
    return RecallReport(decay_time=decay_time, direction_fidelity=fidelity,
                        no_decay=decay_time is None)


def save_trajectory_csv(traj: Trajectory, path, provenance=None) -> None:
    """CSV columns: t, energy, excess, mx, my, mz."""
    lines = [f"# {k}={v}" for k, v in (provenance or {}).items()]
    lines.append("t,energy,excess,mx,my,mz")
    for k in range(traj.n_frames):
        lines.append(",".join(
            [repr(float(traj.t[k])), repr(float(traj.energy[k])),
             repr(float(traj.excess[k]))] +
            [repr(float(v)) for v in traj.m[k]]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
