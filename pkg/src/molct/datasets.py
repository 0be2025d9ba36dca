"""Extended-XYZ / bond-file I/O, a toy molecular-mechanics oracle, and dataset splitting."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .featurize import DegeneracyError, MolecularGraph, VocabularyError

ELEMENTS = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl", "Ar",
    "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr",
]
ATOMIC_NUMBER = {sym: z for z, sym in enumerate(ELEMENTS, start=1)}
SYMBOL = {z: sym for sym, z in ATOMIC_NUMBER.items()}


class ParseError(ValueError):
    def __init__(self, message: str, path=None, lineno: int | None = None):
        where = f"{path}:{lineno}: " if lineno is not None else ""
        super().__init__(where + message)
        self.lineno = lineno


class ConfigurationError(ValueError):
    pass


@dataclass
class LabeledSample:
    graph: MolecularGraph
    energy: float
    forces: np.ndarray

    def __post_init__(self):
        self.energy = float(self.energy)
        self.forces = np.asarray(self.forces, dtype=np.float64).reshape(-1, 3)
        if len(self.forces) != self.graph.n_particles:
            raise ValueError(f"{len(self.forces)} force rows for {self.graph.n_particles} particles")
        if not (math.isfinite(self.energy) and np.all(np.isfinite(self.forces))):
            raise ValueError("labels must be finite")


# ---------------------------------------------------------------- extended XYZ

_ENERGY_RE = re.compile(r"(?:^|\s)energy=(\S+)")


def parse_extxyz(path, relational_edges: Sequence[tuple[int, int, int]] = ()) -> list[LabeledSample]:
    """Read frames of ``N`` / ``... energy=<float> ...`` / ``N x (symbol x y z fx fy fz)``."""
    lines = Path(path).read_text().splitlines()
    samples = []
    k = 0
    while k < len(lines):
        if not lines[k].strip():
            k += 1
            continue
        try:
            n = int(lines[k].strip())
        except ValueError:
            raise ParseError(f"expected an atom count, got {lines[k]!r}", path, k + 1) from None
        if n < 1:
            raise ParseError(f"atom count must be positive, got {n}", path, k + 1)
        if k + 1 >= len(lines):
            raise ParseError("missing properties line", path, k + 2)
        m = _ENERGY_RE.search(lines[k + 1])
        if not m:
            raise ParseError("properties line has no energy=<float>", path, k + 2)
        try:
            energy = float(m.group(1))
        except ValueError:
            raise ParseError(f"bad energy value {m.group(1)!r}", path, k + 2) from None
        species, coords, forces = [], [], []
        for a in range(n):
            ln = k + 2 + a
            if ln >= len(lines):
                raise ParseError(f"frame declares {n} atoms but the file ends after {a}", path, ln + 1)
            fields = lines[ln].split()
            if len(fields) != 7:
                raise ParseError(f"expected 7 fields (symbol x y z fx fy fz), got {len(fields)}", path, ln + 1)
            sym = fields[0]
            if sym not in ATOMIC_NUMBER:
                raise VocabularyError(f"{path}:{ln + 1}: unknown element {sym!r}")
            try:
                vals = [float(v) for v in fields[1:]]
            except ValueError:
                raise ParseError(f"non-numeric field in {lines[ln]!r}", path, ln + 1) from None
            species.append(ATOMIC_NUMBER[sym])
            coords.append(vals[:3])
            forces.append(vals[3:])
        nxt = k + 2 + n
        if nxt < len(lines) and lines[nxt].strip() and not _is_int(lines[nxt]):
            raise ParseError(f"frame declares {n} atoms but more atom lines follow", path, nxt + 1)
        try:
            graph = MolecularGraph(species, coords, list(relational_edges))
            samples.append(LabeledSample(graph, energy, np.array(forces)))
        except ValueError as exc:
            raise ParseError(str(exc), path, k + 1) from None
        k = nxt
    return samples


def _is_int(s: str) -> bool:
    try:
        int(s.strip())
        return True
    except ValueError:
        return False


def write_extxyz(samples: Sequence[LabeledSample], path) -> None:
    out = []
    for s in samples:
        g = s.graph
        out.append(str(g.n_particles))
        out.append(f'energy={float(s.energy)!r} Properties=species:S:1:pos:R:3:forces:R:3')
        for z, x, f in zip(g.species, g.coords, s.forces):
            vals = " ".join(repr(float(v)) for v in (*x, *f))
            out.append(f"{SYMBOL[int(z)]} {vals}")
    Path(path).write_text("\n".join(out) + "\n")


# ---------------------------------------------------------------- bond sidecar


def parse_bonds(path, n_particles: int | None = None) -> list[tuple[int, int, int]]:
    """Lines of ``i j type_id`` (0-based, undirected); ``#`` starts a comment."""
    edges = []
    seen = set()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) != 3:
            raise ParseError(f"expected 'i j type_id', got {raw!r}", path, lineno)
        try:
            i, j, t = (int(v) for v in fields)
        except ValueError:
            raise ParseError(f"non-integer field in {raw!r}", path, lineno) from None
        if i < 0 or j < 0 or t < 0 or (n_particles is not None and max(i, j) >= n_particles):
            raise ParseError(f"index out of range in {raw!r}", path, lineno)
        if i == j:
            raise ParseError(f"self bond {i}-{j}", path, lineno)
        key = (min(i, j), max(i, j))
        if key in seen:
            raise ParseError(f"duplicate bond {i}-{j}", path, lineno)
        seen.add(key)
        edges.append((i, j, t))
    return edges


def write_bonds(edges: Sequence[tuple[int, int, int]], path) -> None:
    Path(path).write_text("".join(f"{i} {j} {t}\n" for i, j, t in edges))


# ---------------------------------------------------------------- toy molecular mechanics


@dataclass
class ToyForceField:
    bonds: list[tuple[int, int, float, float]] = field(default_factory=list)  # i, j, k_b, r0
    angles: list[tuple[int, int, int, float, float]] = field(default_factory=list)  # i, j(centre), k, k_a, theta0
    charges: np.ndarray | None = None
    lj_epsilon: np.ndarray | None = None
    lj_sigma: np.ndarray | None = None
    exclusions: set = field(default_factory=set)

    def __post_init__(self):
        for i, j, kb, r0 in self.bonds:
            if kb < 0 or r0 <= 0:
                raise ValueError(f"bond {i}-{j}: need k_b >= 0 and r0 > 0")
        for i, j, k, ka, th in self.angles:
            if ka < 0:
                raise ValueError(f"angle {i}-{j}-{k}: need k_a >= 0")
        if self.lj_epsilon is not None and np.any(np.asarray(self.lj_epsilon) < 0):
            raise ValueError("LJ epsilon must be >= 0")
        if self.lj_sigma is not None and np.any(np.asarray(self.lj_sigma) <= 0):
            raise ValueError("LJ sigma must be > 0")
        self.exclusions = {(min(a, b), max(a, b)) for a, b in self.exclusions}
        if not self.exclusions:
            self.exclusions = self.default_exclusions()

    def default_exclusions(self) -> set:
        """1-2 (bonded) and 1-3 (angle end) pairs."""
        ex = {(min(i, j), max(i, j)) for i, j, *_ in self.bonds}
        ex |= {(min(i, k), max(i, k)) for i, _, k, *_ in self.angles}
        return ex

    def relational_edges(self, bond_type: int = 0) -> list[tuple[int, int, int]]:
        return [(i, j, bond_type) for i, j, *_ in self.bonds]

    def max_index(self) -> int:
        idx = [max(i, j) for i, j, *_ in self.bonds] + [max(i, j, k) for i, j, k, *_ in self.angles]
        for arr in (self.charges, self.lj_epsilon, self.lj_sigma):
            if arr is not None:
                idx.append(len(arr) - 1)
        return max(idx, default=-1)


def toy_mm_energy_forces(graph: MolecularGraph, ff: ToyForceField) -> tuple[float, np.ndarray]:
    """Harmonic bonds and angles, Lennard-Jones and bare Coulomb; forces are the analytic -dE/dx."""
    x = graph.coords
    n = graph.n_particles
    if ff.max_index() >= n:
        raise ValueError(f"force field references particle {ff.max_index()} but graph has {n}")
    energy = 0.0
    forces = np.zeros_like(x)
    for i, j, kb, r0 in ff.bonds:
        d = x[i] - x[j]
        r = float(np.linalg.norm(d))
        if r == 0.0:
            raise DegeneracyError(f"coincident bonded particles {i}, {j}")
        energy += kb * (r - r0) ** 2
        f = -2.0 * kb * (r - r0) * d / r
        forces[i] += f
        forces[j] -= f
    for i, j, k, ka, th0 in ff.angles:
        u = x[i] - x[j]
        v = x[k] - x[j]
        lu, lv = np.linalg.norm(u), np.linalg.norm(v)
        if lu == 0.0 or lv == 0.0:
            raise DegeneracyError(f"degenerate angle {i}-{j}-{k}")
        c = float(np.clip(u @ v / (lu * lv), -1.0, 1.0))
        th = math.acos(c)
        s = math.sqrt(max(1.0 - c * c, 1e-300))
        energy += ka * (th - th0) ** 2
        dE_dth = 2.0 * ka * (th - th0)
        dc_du = v / (lu * lv) - c * u / lu**2
        dc_dv = u / (lu * lv) - c * v / lv**2
        gi = dE_dth * (-1.0 / s) * dc_du
        gk = dE_dth * (-1.0 / s) * dc_dv
        forces[i] -= gi
        forces[k] -= gk
        forces[j] += gi + gk
    q, eps, sig = ff.charges, ff.lj_epsilon, ff.lj_sigma
    if q is not None or eps is not None:
        for i in range(n):
            for j in range(i + 1, n):
                if (i, j) in ff.exclusions:
                    continue
                d = x[i] - x[j]
                r = float(np.linalg.norm(d))
                if r == 0.0:
                    raise DegeneracyError(f"coincident particles {i}, {j}")
                dE_dr = 0.0
                if eps is not None:
                    e_ij = math.sqrt(eps[i] * eps[j])
                    s_ij = 0.5 * (sig[i] + sig[j])
                    sr6 = (s_ij / r) ** 6
                    energy += 4.0 * e_ij * (sr6 * sr6 - sr6)
                    dE_dr += 4.0 * e_ij * (-12.0 * sr6 * sr6 + 6.0 * sr6) / r
                if q is not None:
                    energy += q[i] * q[j] / r
                    dE_dr += -q[i] * q[j] / r**2
                f = -dE_dr * d / r
                forces[i] += f
                forces[j] -= f
    return energy, forces


def swap_labels(ff: ToyForceField, a: int, b: int) -> ToyForceField:
    """The same force field with particles a and b exchanged (bonded terms, charges, LJ)."""
    perm = {a: b, b: a}

    def m(i):
        return perm.get(i, i)

    def swap_arr(arr):
        if arr is None:
            return None
        arr = np.array(arr, dtype=np.float64)
        arr[[a, b]] = arr[[b, a]]
        return arr

    return ToyForceField(
        bonds=[(m(i), m(j), kb, r0) for i, j, kb, r0 in ff.bonds],
        angles=[(m(i), m(j), m(k), ka, th) for i, j, k, ka, th in ff.angles],
        charges=swap_arr(ff.charges),
        lj_epsilon=swap_arr(ff.lj_epsilon),
        lj_sigma=swap_arr(ff.lj_sigma),
        exclusions={(m(i), m(j)) for i, j in ff.exclusions},
    )


def find_relational_witness(graph: MolecularGraph, ff: ToyForceField, tol: float = 1e-9):
    """Find same-species particles (a, b) whose bond environments differ and whose exchange
    changes the oracle energy at the given coordinates. Returns (a, b, E, E_swapped) or None."""
    e_ref, _ = toy_mm_energy_forces(graph, ff)
    env = []
    for p in range(graph.n_particles):
        ends = [(j if i == p else i, t) for i, j, t in ff.relational_edges() if p in (i, j)]
        env.append(sorted((int(graph.species[o]), t) for o, t in ends))
    for a in range(graph.n_particles):
        for b in range(a + 1, graph.n_particles):
            if graph.species[a] != graph.species[b] or env[a] == env[b]:
                continue
            e_swap, _ = toy_mm_energy_forces(graph, swap_labels(ff, a, b))
            if abs(e_swap - e_ref) > tol:
                return a, b, e_ref, e_swap
    return None


def gen_toy_mm_dataset(template: MolecularGraph, ff: ToyForceField, n_samples: int = 2048,
                       noise: float = 0.08, seed: int = 0, r_min: float = 0.5,
                       require_witness: bool = True) -> list[LabeledSample]:
    """Gaussian perturbations of ``template`` labelled by the toy oracle; pairs closer than r_min are rejected."""
    if require_witness and find_relational_witness(template, ff) is None:
        raise ConfigurationError(
            "template has no same-species pair whose bond environments change the energy"
        )
    rng = np.random.default_rng(seed)
    n = template.n_particles
    iu = np.triu_indices(n, 1)
    samples = []
    tries = 0
    max_tries = max(100, 100 * n_samples)
    while len(samples) < n_samples:
        tries += 1
        if tries > max_tries:
            raise ConfigurationError(f"rejection rate above 99% ({len(samples)} of {tries} accepted)")
        x = template.coords + noise * rng.standard_normal((n, 3))
        d = np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)[iu]
        if d.size and d.min() < r_min:
            continue
        g = template.with_coords(x)
        e, f = toy_mm_energy_forces(g, ff)
        samples.append(LabeledSample(g, e, f))
    return samples


def toy_mm_system() -> tuple[MolecularGraph, ToyForceField]:
    """Five-atom C2OH2 toy whose geometry is mirror symmetric but whose bonding is not.

    C0 is bonded to O2 and H3 (with an O2-C0-H3 angle term); C1 is bonded only to H4.
    The mirror x -> -x maps C0 <-> C1 and H3 <-> H4, so perturbations around the
    template are equally likely in either labelling and only the bond list tells
    the two carbons apart.
    """
    coords = np.array([
        [1.2, 0.5, 0.0],
        [-1.2, 0.5, 0.0],
        [0.0, 0.0, 0.2],
        [1.7, 1.5, 0.3],
        [-1.7, 1.5, 0.3],
    ])
    species = [6, 6, 8, 1, 1]
    theta0 = _angle(coords[2], coords[0], coords[3])
    ff = ToyForceField(
        bonds=[(0, 2, 5.0, 1.30), (0, 3, 4.0, 1.10), (1, 4, 4.0, 1.10)],
        angles=[(2, 0, 3, 1.0, theta0 + 0.1)],
        charges=np.array([0.3, -0.1, -0.4, 0.1, 0.1]),
        lj_epsilon=np.array([0.1, 0.1, 0.15, 0.02, 0.02]),
        lj_sigma=np.array([1.0, 1.0, 0.9, 0.6, 0.6]),
    )
    graph = MolecularGraph(species, coords, ff.relational_edges())
    return graph, ff


def harmonic_diatomic(n_samples: int = 50, k_b: float = 1.0, r0: float = 1.0, noise: float = 0.1,
                      seed: int = 0) -> list[LabeledSample]:
    """A bonded pair of hydrogens with a single harmonic bond, randomly oriented."""
    graph = MolecularGraph([1, 1], [[0.0, 0.0, 0.0], [r0, 0.0, 0.0]], [(0, 1, 0)])
    ff = ToyForceField(bonds=[(0, 1, k_b, r0)])
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_samples):
        u = rng.standard_normal(3)
        u /= np.linalg.norm(u)
        r = r0 + noise * rng.standard_normal()
        g = graph.with_coords(np.stack([np.zeros(3), r * u]))
        e, f = toy_mm_energy_forces(g, ff)
        out.append(LabeledSample(g, e, f))
    return out


def _angle(a, centre, b) -> float:
    u, v = a - centre, b - centre
    return math.acos(float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v))))


# ---------------------------------------------------------------- force-field file

def write_force_field(ff: ToyForceField, path) -> None:
    lines = ["# toy molecular-mechanics force field"]
    lines += [f"bond = {i} {j} {kb!r} {r0!r}" for i, j, kb, r0 in ff.bonds]
    lines += [f"angle = {i} {j} {k} {ka!r} {th!r}" for i, j, k, ka, th in ff.angles]
    n = len(ff.charges) if ff.charges is not None else (len(ff.lj_sigma) if ff.lj_sigma is not None else 0)
    for a in range(n):
        q = float(ff.charges[a]) if ff.charges is not None else 0.0
        e = float(ff.lj_epsilon[a]) if ff.lj_epsilon is not None else 0.0
        s = float(ff.lj_sigma[a]) if ff.lj_sigma is not None else 1.0
        lines.append(f"atom = {a} {q!r} {e!r} {s!r}")
    lines += [f"exclude = {i} {j}" for i, j in sorted(ff.exclusions)]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_force_field(path) -> ToyForceField:
    bonds, angles, atoms, excl = [], [], {}, set()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = values', got {raw!r}", path, lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        f = val.split()
        try:
            if key == "bond" and len(f) == 4:
                bonds.append((int(f[0]), int(f[1]), float(f[2]), float(f[3])))
            elif key == "angle" and len(f) == 5:
                angles.append((int(f[0]), int(f[1]), int(f[2]), float(f[3]), float(f[4])))
            elif key == "atom" and len(f) == 4:
                atoms[int(f[0])] = (float(f[1]), float(f[2]), float(f[3]))
            elif key == "exclude" and len(f) == 2:
                excl.add((int(f[0]), int(f[1])))
            else:
                raise ParseError(f"unknown or malformed entry {raw!r}", path, lineno)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"non-numeric field in {raw!r}", path, lineno) from None
    kw = {}
    if atoms:
        n = max(atoms) + 1
        arr = np.array([atoms.get(a, (0.0, 0.0, 1.0)) for a in range(n)])
        kw = dict(charges=arr[:, 0], lj_epsilon=arr[:, 1], lj_sigma=arr[:, 2])
    return ToyForceField(bonds=bonds, angles=angles, exclusions=excl, **kw)


# ---------------------------------------------------------------- splitting and relabelling


def split(dataset: Sequence, n_train: int, n_val: int, seed: int = 0):
    """Seeded shuffle, then disjoint train/validation slices."""
    if n_train + n_val > len(dataset):
        raise ValueError(f"need {n_train + n_val} samples, dataset has {len(dataset)}")
    order = np.random.default_rng(seed).permutation(len(dataset))
    train = [dataset[k] for k in order[:n_train]]
    val = [dataset[k] for k in order[n_train:n_train + n_val]]
    return train, val


def bond_signature(graph: MolecularGraph, i: int) -> tuple:
    rel = graph.relation_matrix()
    neigh = sorted((int(graph.species[j]), int(rel[i, j])) for j in np.flatnonzero(rel[i] >= 0))
    return int(graph.species[i]), tuple(neigh)


def artificial_atom_types(samples: Sequence[LabeledSample], vocab: dict | None = None):
    """Replace species ids by ids of (species, sorted neighbour (species, bond type)) signatures.

    Returns the relabelled samples and the signature -> id vocabulary.
    """
    if vocab is None:
        sigs = sorted({bond_signature(s.graph, i) for s in samples for i in range(s.graph.n_particles)})
        vocab = {sig: k for k, sig in enumerate(sigs)}
    out = []
    for s in samples:
        g = s.graph
        ids = []
        for i in range(g.n_particles):
            sig = bond_signature(g, i)
            if sig not in vocab:
                raise VocabularyError(f"bond signature {sig} not in the artificial type vocabulary")
            ids.append(vocab[sig])
        g2 = MolecularGraph(ids, g.coords.copy(), list(g.relational_edges), g.directed)
        out.append(LabeledSample(g2, s.energy, s.forces.copy()))
    return out, vocab
