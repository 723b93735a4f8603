"""Heisenberg energy, local exchange fields and single-spin updates.

Convention fixed once for the whole package: the Hamiltonian runs over
ordered pairs,

    H = - sum_{i != j} (sign * J_ij) S_i . S_j
      = - 2 sum_{i < j} (sign * J_ij) S_i . S_j,

the local field is h_i = 2 sum_{j != i} (sign * J_ij) S_j, so that
replacing S_i by S_i' costs exactly dE = -(S_i' - S_i) . h_i and the
identity sum_i S_i . h_i = -2 H holds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, SizeMismatchError
from .lattice import CouplingTable, SpinConfig

__all__ = ["EnergyReport", "total_energy", "local_field", "local_fields",
           "energy_delta"]


@dataclass(frozen=True)
class EnergyReport:
    total: float
    per_site: float


def _check_sizes(config: SpinConfig, table: CouplingTable) -> None:
    n = table.lattice.n_sites
    if config.spins.shape != (n, 3):
        raise SizeMismatchError(
            f"config has shape {config.spins.shape}, table lattice has "
            f"{n} sites")


def total_energy(config: SpinConfig, table: CouplingTable) -> EnergyReport:
    """Exact ordered-pair energy, summed in stored pair order."""
    _check_sizes(config, table)
    S = config.spins
    if table.n_pairs:
        dots = np.einsum("pc,pc->p", S[table.pair_i], S[table.pair_j])
        total = -2.0 * table.sign * float(np.dot(table.J, dots))
    else:
        total = 0.0
    return EnergyReport(total=total, per_site=total / table.lattice.n_sites)


def local_field(config: SpinConfig, table: CouplingTable, i: int) -> np.ndarray:
    """h_i = 2 sum_j (sign*J_ij) S_j for one site."""
    _check_sizes(config, table)
    n = table.lattice.n_sites
    if not (0 <= i < n):
        raise DomainError(f"site index {i} outside 0..{n - 1}")
    offsets, sites, J = table.neighbors()
    lo, hi = offsets[i], offsets[i + 1]
    if hi == lo:
        return np.zeros(3)
    return 2.0 * table.sign * (J[lo:hi, None] * config.spins[sites[lo:hi]]).sum(axis=0)


def local_fields(config: SpinConfig, table: CouplingTable) -> np.ndarray:
    """All local fields at once, h = 2*sign*(W @ S) with W the symmetric
    coupling matrix.  Used by the dynamics integrator."""
    _check_sizes(config, table)
    return 2.0 * table.sign * table.sparse().dot(config.spins)


def energy_delta(config: SpinConfig, table: CouplingTable, i: int,
                 new_spin: np.ndarray) -> float:
    """Energy change of replacing S_i by new_spin (must be unit length)."""
    new_spin = np.asarray(new_spin, dtype=float)
    if new_spin.shape != (3,):
        raise DomainError("new_spin must be a 3-vector")
    if abs(np.linalg.norm(new_spin) - 1.0) > 1e-12:
        raise DomainError("new_spin must be unit length within 1e-12")
    h = local_field(config, table, i)
    return float(-np.dot(new_spin - config.spins[i], h))
