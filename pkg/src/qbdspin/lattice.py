"""Hypercubic lattices, spin configurations and truncated coupling tables.

Sites live on a d-dimensional grid (chain, square, cubic) with per-axis
periodic flags and minimum-image distances.  A CouplingTable stores one
entry per unordered site pair within a cutoff radius, with the coupling
evaluated from a kernel.KernelSpec at the minimum-image separation, plus a
certified bound on the total coupling weight the truncation discards.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FrustrationError, GeometryError
from .kernel import KernelSpec, closed_form, closed_form_array

__all__ = [
    "Lattice",
    "SpinConfig",
    "CouplingTable",
    "build_lattice",
    "build_coupling_table",
    "nn_table",
    "random_config",
    "reference_config",
    "save_table_json",
    "load_table_json",
    "save_config_json",
    "load_config_json",
]

TABLE_FORMAT = "qbdspin.coupling_table.v1"
CONFIG_FORMAT = "qbdspin.spin_config.v1"


@dataclass(frozen=True)
class Lattice:
    dim: int
    lengths: tuple
    spacing: float
    periodic: tuple
    coords: np.ndarray = field(repr=False)   # (N, dim) integer site coordinates

    @property
    def n_sites(self) -> int:
        return self.coords.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.coords * self.spacing

    def parity(self) -> np.ndarray:
        """+1/-1 checkerboard by coordinate-sum parity."""
        return 1 - 2 * (self.coords.sum(axis=1) % 2)

    def wrap_deltas(self, dn: np.ndarray) -> np.ndarray:
        """Apply the minimum-image convention to integer coordinate
        differences (last axis = spatial axis).  Even-length ties resolve
        to the negative representative."""
        dn = np.array(dn, copy=True)
        for ax in range(self.dim):
            if self.periodic[ax]:
                L = self.lengths[ax]
                dn[..., ax] = (dn[..., ax] + L // 2) % L - L // 2
        return dn

    def min_image_displacement(self, i: int, j: int) -> np.ndarray:
        """Canonical minimum-image displacement vector from site i to j."""
        dn = self.wrap_deltas(self.coords[j] - self.coords[i])
        return dn * self.spacing

    def min_image_distance(self, i: int, j: int) -> float:
        return float(np.linalg.norm(self.min_image_displacement(i, j)))

    def min_image_vectors(self, i: int, j: int) -> list:
        """All displacement vectors from i to j realizing the minimum-image
        distance.  More than one only on even-length periodic axes where
        the separation is exactly half the box."""
        dn = self.wrap_deltas(self.coords[j] - self.coords[i])
        axis_choices = []
        for ax in range(self.dim):
            m = int(dn[ax])
            choices = [m]
            if self.periodic[ax]:
                L = self.lengths[ax]
                if abs(m) * 2 == L:
                    choices = [-abs(m), abs(m)]
            axis_choices.append(choices)
        return [np.array(c, dtype=float) * self.spacing
                for c in itertools.product(*axis_choices)]

    def digest(self) -> str:
        key = json.dumps([self.dim, list(self.lengths), self.spacing,
                          list(map(bool, self.periodic))])
        return hashlib.sha256(key.encode()).hexdigest()[:16]


def build_lattice(dim, lengths, spacing=1.0, periodic=True) -> Lattice:
    """Construct a hypercubic lattice.

    lengths: int or per-axis sequence of site counts (each >= 2).
    periodic: bool or per-axis sequence of flags.
    """
    if dim not in (1, 2, 3):
        raise DomainError(f"dim must be 1, 2 or 3, got {dim}")
    if np.isscalar(lengths):
        lengths = (int(lengths),) * dim
    else:
        lengths = tuple(int(v) for v in lengths)
    if len(lengths) != dim:
        raise DomainError(f"lengths {lengths} does not match dim={dim}")
    if any(L < 2 for L in lengths):
        raise DomainError(f"every axis needs >= 2 sites, got {lengths}")
    if not (spacing > 0.0 and math.isfinite(spacing)):
        raise DomainError(f"spacing must be > 0, got {spacing}")
    if isinstance(periodic, (bool, np.bool_)):
        periodic = (bool(periodic),) * dim
    else:
        periodic = tuple(bool(v) for v in periodic)
    if len(periodic) != dim:
        raise DomainError("periodic flags must match dim")
    grids = np.meshgrid(*[np.arange(L) for L in lengths], indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)
    return Lattice(dim=dim, lengths=lengths, spacing=float(spacing),
                   periodic=periodic, coords=coords)


@dataclass
class SpinConfig:
    """Unit 3-vector spins, one row per site."""

    spins: np.ndarray

    def validate(self, tol: float = 1e-12) -> None:
        norms = np.linalg.norm(self.spins, axis=1)
        bad = np.abs(norms - 1.0) > tol
        if bad.any():
            raise DomainError(
                f"{int(bad.sum())} spins deviate from unit norm beyond {tol}")

    def magnetization(self) -> np.ndarray:
        return self.spins.mean(axis=0)

    def staggered_magnetization(self, lattice: Lattice) -> np.ndarray:
        return (lattice.parity()[:, None] * self.spins).mean(axis=0)

    def copy(self) -> "SpinConfig":
        return SpinConfig(self.spins.copy())


def spins_from_uniforms(u: np.ndarray) -> np.ndarray:
    """Map uniforms u in [0,1)^(n,2) to points uniform on the unit sphere
    (z uniform in [-1,1], azimuth uniform).  Shared with the Metropolis
    proposal so that all sphere draws use one documented scheme."""
    z = 2.0 * u[:, 0] - 1.0
    phi = 2.0 * math.pi * u[:, 1]
    s = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    return np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)


def random_config(lattice: Lattice, seed: int) -> SpinConfig:
    """Spins i.i.d. uniform on the unit sphere; deterministic in (lattice, seed)."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    u = rng.random((lattice.n_sites, 2))
    return SpinConfig(spins_from_uniforms(u))


def reference_config(lattice: Lattice, kind: str) -> SpinConfig:
    """kind='aligned': all spins +z.  kind='neel': +z/-z checkerboard,
    which requires even lengths on every periodic axis."""
    n = lattice.n_sites
    if kind == "aligned":
        spins = np.zeros((n, 3))
        spins[:, 2] = 1.0
        return SpinConfig(spins)
    if kind == "neel":
        for ax in range(lattice.dim):
            if lattice.periodic[ax] and lattice.lengths[ax] % 2 != 0:
                raise FrustrationError(
                    f"neel order frustrated: odd periodic axis {ax} "
                    f"(length {lattice.lengths[ax]}) is not bipartite")
        spins = np.zeros((n, 3))
        spins[:, 2] = lattice.parity().astype(float)
        return SpinConfig(spins)
    raise DomainError(f"unknown reference kind {kind!r}")


@dataclass
class CouplingTable:
    """Exchange couplings J_ij > 0 over unordered pairs (i < j), a global
    sign (+1 ferromagnetic, -1 antiferromagnetic), and a certified
    per-site bound on everything the cutoff discarded.

    The spin Hamiltonian downstream uses the ordered-pair convention
    H = -sum_{i != j} (sign*J_ij) S_i.S_j = -2 sum_{i<j} (sign*J_ij) S_i.S_j.
    """

    lattice: Lattice
    spec: KernelSpec
    pair_i: np.ndarray
    pair_j: np.ndarray
    J: np.ndarray
    sign: int
    cutoff: float
    tail_bound: float
    _csr: tuple = field(default=None, repr=False, compare=False)

    @property
    def n_pairs(self) -> int:
        return self.J.shape[0]

    def neighbors(self):
        """CSR adjacency (offsets, sites, J) over both pair orientations."""
        if self._csr is None:
            n = self.lattice.n_sites
            ii = np.concatenate([self.pair_i, self.pair_j])
            jj = np.concatenate([self.pair_j, self.pair_i])
            vv = np.concatenate([self.J, self.J])
            order = np.lexsort((jj, ii))
            ii, jj, vv = ii[order], jj[order], vv[order]
            offsets = np.zeros(n + 1, dtype=np.int64)
            np.add.at(offsets, ii + 1, 1)
            offsets = np.cumsum(offsets)
            self._csr = (offsets, jj.astype(np.int64), vv.astype(float))
        return self._csr

    def sparse(self):
        """Symmetric scipy CSR matrix of the (unsigned) couplings."""
        from scipy.sparse import csr_matrix
        offsets, jj, vv = self.neighbors()
        n = self.lattice.n_sites
        indptr = offsets
        return csr_matrix((vv, jj, indptr), shape=(n, n))


def _decay_tail_bound(lat_dim: int, spacing: float, spec: KernelSpec,
                      cutoff: float) -> float:
    """Upper bound on sum_{lattice vectors v != 0, |v| > cutoff} J(|v|)
    for an infinite lattice, which dominates the finite-lattice omitted
    sum.  Groups sites into L-infinity shells m (count <= (2m+1)^d -
    (2m-1)^d, distance >= m*spacing) and uses that J is decreasing with
    J(r + a) <= J(r) exp(-sqrt(mu2) a)."""
    mu = math.sqrt(spec.mu2)
    decay = math.exp(-mu * spacing)

    def shell_count(m):
        return float((2 * m + 1) ** lat_dim - (2 * m - 1) ** lat_dim)

    # shell m spans Euclidean distances [m*a, m*a*sqrt(d)]; only shells with
    # m*a*sqrt(d) > cutoff can contain omitted sites
    m = max(1, int(math.floor(cutoff / (spacing * math.sqrt(lat_dim)))) + 1)
    total = 0.0
    term = shell_count(m) * abs(closed_form(max(m * spacing, cutoff), spec))
    while True:
        total += term
        ratio = (shell_count(m + 1) / shell_count(m)) * decay
        if ratio < 1.0 and term <= 1e-16 * total:
            total += term * ratio / (1.0 - ratio)
            return total
        m += 1
        term = shell_count(m) * abs(closed_form(m * spacing, spec))
        if m > 100000:
            raise DomainError("tail bound did not converge")


def _pairs_within_cutoff(lattice: Lattice, cutoff: float, collect_omitted=False):
    """Enumerate unordered pairs (i < j) by minimum-image distance, in
    lexicographic (i, j) order.  Optionally also return the omitted pairs
    (needed only for the exact mu2=0 tail sum)."""
    coords = lattice.coords
    n = lattice.n_sites
    keep_i, keep_j, keep_d = [], [], []
    omitted = []
    n_kept = 0
    block = 512
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        dn = coords[None, lo:hi, :] - coords[:, None, :]       # (n, b, d)
        dn = lattice.wrap_deltas(dn)
        dist = np.linalg.norm(dn * lattice.spacing, axis=2)
        for bi in range(hi - lo):
            i = lo + bi
            d_row = dist[i + 1:, bi]
            j_row = np.arange(i + 1, n)
            sel = d_row <= cutoff * (1.0 + 1e-12)
            n_kept += int(sel.sum())
            keep_i.append(np.full(int(sel.sum()), i, dtype=np.int64))
            keep_j.append(j_row[sel])
            keep_d.append(d_row[sel])
            if collect_omitted:
                omitted.append((i, j_row[~sel], d_row[~sel]))
    pair_i = np.concatenate(keep_i) if keep_i else np.empty(0, dtype=np.int64)
    pair_j = np.concatenate(keep_j) if keep_j else np.empty(0, dtype=np.int64)
    dists = np.concatenate(keep_d) if keep_d else np.empty(0)
    any_omitted = n_kept < n * (n - 1) // 2
    return pair_i, pair_j, dists, omitted, any_omitted


def build_coupling_table(lattice: Lattice, spec: KernelSpec,
                         cutoff: float = None, sign: int = 1) -> CouplingTable:
    """Build the truncated long-range coupling table.

    cutoff defaults to 6 screening lengths (relative tail < e^-6).  The
    tail bound uses the exponential decay envelope for mu2 > 0; for an
    unscreened kernel it falls back to the exact omitted sum on this
    finite lattice, and a cutoff beyond half the box is refused because
    no decay envelope exists.
    """
    if sign not in (1, -1):
        raise DomainError(f"sign must be +1 or -1, got {sign}")
    if cutoff is None:
        if spec.mu2 <= 0.0:
            raise DomainError("default cutoff needs mu2 > 0")
        cutoff = 6.0 / math.sqrt(spec.mu2)
    cutoff = float(cutoff)
    if cutoff < lattice.spacing:
        raise DomainError(
            f"cutoff {cutoff} is below the lattice spacing {lattice.spacing}: "
            "no pair would be stored")
    half_box = [L * lattice.spacing / 2.0 for L in lattice.lengths]
    for ax, h in enumerate(half_box):
        if not lattice.periodic[ax] and cutoff > h * (1.0 + 1e-12):
            raise GeometryError(
                f"cutoff {cutoff} exceeds half the box ({h}) on "
                f"non-periodic axis {ax}")
    if spec.mu2 == 0.0 and cutoff > min(half_box) * (1.0 + 1e-12):
        raise DomainError(
            "cutoff beyond half the box requires mu2 > 0 "
            "(tail bound needs decay)")

    pair_i, pair_j, dists, omitted, any_omitted = _pairs_within_cutoff(
        lattice, cutoff, collect_omitted=(spec.mu2 == 0.0))
    J = closed_form_array(dists, spec) if dists.size else np.empty(0)
    if np.any(J <= 0.0):
        raise DomainError("kernel produced non-positive couplings; "
                          "use the sign field for antiferromagnetic tables")

    if not any_omitted:
        tail = 0.0
    elif spec.mu2 > 0.0:
        tail = _decay_tail_bound(lattice.dim, lattice.spacing, spec, cutoff)
    else:
        # exact per-site omitted sum on this finite lattice (max over sites)
        per_site = np.zeros(lattice.n_sites)
        for i, js, ds in omitted:
            if js.size:
                vals = closed_form_array(ds, spec)
                per_site[i] += vals.sum()
                np.add.at(per_site, js, vals)
        tail = float(per_site.max())

    return CouplingTable(lattice=lattice, spec=spec, pair_i=pair_i,
                         pair_j=pair_j, J=J, sign=int(sign),
                         cutoff=cutoff, tail_bound=float(tail))


def nn_table(lattice: Lattice, j_bond: float = 1.0, sign: int = 1) -> CouplingTable:
    """Nearest-neighbor table with per-bond coupling j_bond.

    Under the ordered-pair Hamiltonian convention each stored pair
    contributes -2*J_ij, so J_ij = j_bond/2 reproduces the conventional
    per-bond energy -j_bond S_i.S_j.  Realized through an unscreened
    kernel with g chosen so J(spacing) = j_bond/2.
    """
    if j_bond <= 0.0:
        raise DomainError("j_bond must be > 0; use sign=-1 for AFM")
    g = 2.0 * math.pi * j_bond * lattice.spacing
    spec = KernelSpec(mu2=0.0, dim=3, g=g)
    return build_coupling_table(lattice, spec, cutoff=lattice.spacing, sign=sign)


def table_to_dict(table: CouplingTable) -> dict:
    lat = table.lattice
    return {
        "format": TABLE_FORMAT,
        "dim": lat.dim,
        "lengths": list(lat.lengths),
        "spacing": lat.spacing,
        "periodic": [bool(p) for p in lat.periodic],
        "kernel_dim": table.spec.dim,
        "mu2": table.spec.mu2,
        "g": table.spec.g,
        "sign": table.sign,
        "cutoff": table.cutoff,
        "tail_bound": table.tail_bound,
        "pairs": [[int(i), int(j), float(v)] for i, j, v in
                  zip(table.pair_i, table.pair_j, table.J)],
    }


def table_from_dict(doc: dict) -> CouplingTable:
    if doc.get("format") != TABLE_FORMAT:
        raise DomainError(f"unsupported table document: {doc.get('format')!r}")
    lattice = build_lattice(doc["dim"], doc["lengths"], doc["spacing"],
                            doc["periodic"])
    spec = KernelSpec(mu2=doc["mu2"], dim=doc["kernel_dim"], g=doc["g"])
    pairs = doc["pairs"]
    pair_i = np.array([p[0] for p in pairs], dtype=np.int64)
    pair_j = np.array([p[1] for p in pairs], dtype=np.int64)
    J = np.array([p[2] for p in pairs], dtype=float)
    return CouplingTable(lattice=lattice, spec=spec, pair_i=pair_i,
                         pair_j=pair_j, J=J, sign=int(doc["sign"]),
                         cutoff=float(doc["cutoff"]),
                         tail_bound=float(doc["tail_bound"]))


def save_table_json(table: CouplingTable, path) -> None:
    with open(path, "w") as fh:
        json.dump(table_to_dict(table), fh)


def load_table_json(path) -> CouplingTable:
    with open(path) as fh:
        return table_from_dict(json.load(fh))


def save_config_json(config: SpinConfig, path) -> None:
    doc = {"format": CONFIG_FORMAT,
           "spins": [[float(x) for x in row] for row in config.spins]}
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_config_json(path) -> SpinConfig:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CONFIG_FORMAT:
        raise DomainError(f"unsupported config document: {doc.get('format')!r}")
    return SpinConfig(np.array(doc["spins"], dtype=float))
