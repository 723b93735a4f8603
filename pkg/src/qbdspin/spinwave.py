"""Linear spin-wave (magnon) dispersions from a coupling table.

Against the ordered-pair Hamiltonian convention of the model module
(H = -sum_{i != j} sign*J_ij S_i.S_j, unit spins scaled by the magnitude
parameter S), the harmonic mode frequencies are

    ferromagnet   (sign=+1):  omega(k) = 2 S (Jt(0) - Jt(k))
    antiferromagnet (sign=-1): omega(k) = 2 S sqrt(Jt(0)^2 - Jt(k)^2)

with Jt(k) = sum_{r != 0} J(r) exp(i k.r) over the truncated displacement
set of one site.  Both branches are gapless at k=0 (the broken-symmetry
Goldstone mode); the AFM branch additionally vanishes at the ordering
vector and is only defined for bipartite displacement sets, so tables
with same-sublattice couplings are refused rather than approximated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, DomainError, FitError, LswtInstabilityError,
                     OrderError, StructureError, UnsupportedOrderError)
from .lattice import CouplingTable

__all__ = [
    "DispersionCurve",
    "displacement_weights",
    "lattice_fourier_J",
    "fm_dispersion",
    "afm_dispersion",
    "smallk_exponent",
    "smallk_curve",
    "parse_k_path",
    "zone_edge",
    "save_dispersion_csv",
]


@dataclass
class DispersionCurve:
    k_points: np.ndarray    # (n, dim)
    omega: np.ndarray       # (n,)
    order: str              # "FM" | "AFM"
    S: float
    path_t: np.ndarray = None   # cumulative path parameter, when on a path


def displacement_weights(table: CouplingTable):
    """Displacement vectors and coupling weights seen from any one site.

    Validates translation invariance (every site must see the identical
    displacement -> J map); minimum-image ties at half the box are split
    evenly so the set is inversion symmetric.  Returns (disp, w) with
    disp of shape (M, dim).  Cached on the table.
    """
    cached = getattr(table, "_disp_weights", None)
    if cached is not None:
        return cached
    lat = table.lattice
    spacing = lat.spacing
    site_maps = [dict() for _ in range(lat.n_sites)]

    def add(site, vec, w):
        key = tuple(int(round(c / spacing)) for c in vec)
        site_maps[site][key] = site_maps[site].get(key, 0.0) + w

    for i, j, J in zip(table.pair_i, table.pair_j, table.J):
        vecs = lat.min_image_vectors(int(i), int(j))
        w = float(J) / len(vecs)
        for v in vecs:
            add(int(i), v, w)
            add(int(j), -v, w)

    ref = site_maps[0]
    for s, m in enumerate(site_maps[1:], start=1):
        if m.keys() != ref.keys():
            raise StructureError(
                f"table is not translation invariant: site {s} sees a "
                "different displacement set than site 0")
        for key, w in m.items():
            if abs(w - ref[key]) > 1e-12 * max(1.0, abs(ref[key])):
                raise StructureError(
                    f"table is not translation invariant: coupling at "
                    f"displacement {key} differs between site 0 and site {s}")

    keys = sorted(ref.keys())
    disp = np.array(keys, dtype=float) * spacing
    w = np.array([ref[k] for k in keys])
    table._disp_weights = (disp, w)
    return disp, w


def lattice_fourier_J(table: CouplingTable, k) -> float:
    """Jt(k) = sum_r J(r) cos(k.r); the sine part must vanish by the
    inversion symmetry of the displacement set."""
    disp, w = displacement_weights(table)
    k = np.asarray(k, dtype=float)
    if k.shape != (table.lattice.dim,):
        raise DomainError(
            f"k must have {table.lattice.dim} components, got shape {k.shape}")
    phase = disp @ k
    odd = float(np.dot(w, np.sin(phase)))
    scale = max(1.0, float(np.abs(w).sum()))
    if abs(odd) > 1e-12 * scale:
        raise StructureError(
            f"displacement set is not inversion symmetric (sine part {odd:g})")
    return float(np.dot(w, np.cos(phase)))


def _fourier_many(table, k_points):
    disp, w = displacement_weights(table)
    k_points = np.atleast_2d(np.asarray(k_points, dtype=float))
    if k_points.shape[1] != table.lattice.dim:
        raise DomainError(
            f"k points must have {table.lattice.dim} components")
    phase = k_points @ disp.T
    return phase, w, k_points


def fm_dispersion(table: CouplingTable, k_path, S: float = 1.0) -> DispersionCurve:
    """omega(k) = 2 S (Jt(0) - Jt(k)) for a ferromagnetic table."""
    if table.sign != 1:
        raise OrderError("ferromagnetic dispersion needs a sign=+1 table")
    phase, w, k_points = _fourier_many(table, k_path)
    jt = np.cos(phase) @ w
    j0 = float(w.sum())
    omega = 2.0 * S * (j0 - jt)
    omega = np.where(np.abs(omega) <= 1e-12, np.abs(omega), omega)
    return DispersionCurve(k_points=k_points, omega=omega, order="FM", S=S)


def afm_dispersion(table: CouplingTable, k_path, S: float = 1.0) -> DispersionCurve:
    """omega(k) = 2 S sqrt(Jt(0)^2 - Jt(k)^2) about two-sublattice order.

    Requires sign=-1, a bipartite lattice (even lengths on periodic axes)
    and a displacement set connecting opposite sublattices only.
    """
    if table.sign != -1:
        raise OrderError("antiferromagnetic dispersion needs a sign=-1 table")
    lat = table.lattice
    for ax in range(lat.dim):
        if lat.periodic[ax] and lat.lengths[ax] % 2 != 0:
            raise UnsupportedOrderError(
                f"lattice is not bipartite: odd periodic axis {ax}")
    disp, w = displacement_weights(table)
    n_int = np.round(disp / lat.spacing).astype(int)
    if np.any(n_int.sum(axis=1) % 2 == 0):
        raise UnsupportedOrderError(
            "displacement set contains same-sublattice couplings; "
            "two-sublattice spin-wave theory does not apply")
    phase, w, k_points = _fourier_many(table, k_path)
    jt = np.cos(phase) @ w
    j0 = float(w.sum())
    arg = j0 * j0 - jt * jt
    if np.any(arg < -1e-10):
        raise LswtInstabilityError(
            f"omega^2 reached {arg.min():g} < -1e-10: assumed order is "
            "not the harmonic ground state of this table")
    omega = 2.0 * S * np.sqrt(np.clip(arg, 0.0, None))
    return DispersionCurve(k_points=k_points, omega=omega, order="AFM", S=S)


def smallk_exponent(curve: DispersionCurve) -> float:
    """Least-squares slope of log omega versus log |k| over the curve.

    The caller supplies points inside the small-k fit window (a decade
    below 10% of the zone edge); all frequencies must be positive.
    """
    kabs = np.linalg.norm(curve.k_points, axis=1)
    if curve.k_points.shape[0] < 5:
        raise FitError("need at least 5 k-points for the exponent fit")
    if np.any(kabs <= 0.0):
        raise FitError("fit window must exclude k=0")
    if np.any(curve.omega <= 0.0):
        raise FitError("fit window contains non-positive frequencies")
    slope, _ = np.polyfit(np.log(kabs), np.log(curve.omega), 1)
    return float(slope)


def zone_edge(table: CouplingTable) -> float:
    return math.pi / table.lattice.spacing


def smallk_curve(table: CouplingTable, direction, order: str, S: float = 1.0,
                 n: int = 9, k_edge: float = None) -> DispersionCurve:
    """Log-spaced |k| samples in [0.01, 0.1] of the zone edge along a
    fixed direction, for the small-k exponent fit."""
    if n < 5:
        raise DomainError("need at least 5 points")
    direction = np.asarray(direction, dtype=float)
    direction = direction / np.linalg.norm(direction)
    if k_edge is None:
        k_edge = zone_edge(table)
    kabs = np.geomspace(0.01 * k_edge, 0.1 * k_edge, n)
    k_points = kabs[:, None] * direction[None, :]
    if order.upper() == "FM":
        return fm_dispersion(table, k_points, S=S)
    if order.upper() == "AFM":
        return afm_dispersion(table, k_points, S=S)
    raise DomainError(f"unknown order {order!r}")


_ZONE_POINTS = {
    1: {"G": (0.0,), "X": (1.0,)},
    2: {"G": (0.0, 0.0), "X": (1.0, 0.0), "M": (1.0, 1.0)},
    3: {"G": (0.0, 0.0, 0.0), "X": (1.0, 0.0, 0.0), "M": (1.0, 1.0, 0.0),
        "R": (1.0, 1.0, 1.0)},
}


def parse_k_path(path: str, dim: int, spacing: float,
                 points_per_segment: int = 40):
    """Map a path string like "G-X-M-G" onto wavevectors.

    Labels are the standard hypercubic zone points (in units of pi over
    the lattice constant).  Returns (k_points (n, dim), path_t (n,)).
    """
    table = _ZONE_POINTS[dim]
    labels = [p.strip() for p in path.split("-")]
    if len(labels) < 2:
        raise ConfigError(f"path {path!r} needs at least two points")
    for lab in labels:
        if lab not in table:
            raise ConfigError(
                f"unknown zone point {lab!r} for dim={dim}; "
                f"known: {sorted(table)}")
    scale = math.pi / spacing
    nodes = [scale * np.array(table[lab]) for lab in labels]
    ks, ts = [], []
    t = 0.0
    for a, b in zip(nodes[:-1], nodes[1:]):
        seg = np.linspace(0.0, 1.0, points_per_segment, endpoint=False)
        for f in seg:
            ks.append(a + f * (b - a))
            ts.append(t + f * np.linalg.norm(b - a))
        t += float(np.linalg.norm(b - a))
    ks.append(nodes[-1])
    ts.append(t)
    return np.array(ks), np.array(ts)


def save_dispersion_csv(curve: DispersionCurve, path, provenance=None) -> None:
    """CSV columns: path_t, kx, ky, kz, omega (k padded to 3 components)."""
    n, dim = curve.k_points.shape
    k3 = np.zeros((n, 3))
    k3[:, :dim] = curve.k_points
    t = curve.path_t if curve.path_t is not None else np.zeros(n)
    lines = [f"# {k}={v}" for k, v in (provenance or {}).items()]
    lines.append("path_t,kx,ky,kz,omega")
    for i in range(n):
        lines.append(",".join([repr(float(t[i]))] +
                              [repr(float(v)) for v in k3[i]] +
                              [repr(float(curve.omega[i]))]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
