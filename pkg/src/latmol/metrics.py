"""Bond inference from 3D geometry and the stability/validity/uniqueness metrics.

Bonds are read off pairwise distances against a reference-length table:
for each atom pair the highest order whose window |d - ref| <= margin
contains the distance is assigned. Validity is a valency-satisfaction
proxy (every atom at or under its maximum valency and the bond graph
connected), not a cheminformatics-toolkit judgment. Uniqueness keys are
Weisfeiler-Lehman hashes over the typed bond graph.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

_MAX_ORDER = 3


@dataclass
class BondLengthTable:
    """(el_a, el_b, order) -> (reference length, margin), symmetric in the pair."""

    entries: dict

    @classmethod
    def from_text(cls, text):
        entries = {}
        for ln, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"bond table line {ln}: expected 5 columns")
            a, b, order, ref, margin = parts[0], parts[1], int(parts[2]), float(parts[3]), float(parts[4])
            if ref <= 0 or margin <= 0:
                raise ValueError(f"bond table line {ln}: lengths and margins must be positive")
            entries[(min(a, b), max(a, b), order)] = (ref, margin)
        return cls(entries)

    def lookup(self, a, b, order):
        return self.entries.get((min(a, b), max(a, b), order))

    def elements(self):
        return {a for a, _, _ in self.entries} | {b for _, b, _ in self.entries}


@dataclass
class ValencyTable:
    exact: dict
    maximum: dict

    @classmethod
    def from_text(cls, text):
        exact, maximum = {}, {}
        for ln, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"valency table line {ln}: expected 3 columns")
            exact[parts[0]] = int(parts[1])
            maximum[parts[0]] = int(parts[2])
        return cls(exact, maximum)


def _read_table(name):
    return resources.files("latmol.tables").joinpath(name).read_text()


def default_bond_table():
    return BondLengthTable.from_text(_read_table("bond_lengths.txt"))


def default_valency_table():
    return ValencyTable.from_text(_read_table("valencies.txt"))


@dataclass
class BondGraph:
    """Symmetric integer bond-order matrix with per-atom valency sums."""

    n: int
    order: np.ndarray

    @property
    def valency(self):
        return self.order.sum(axis=1)


@dataclass
class MetricsReport:
    atom_stability: float
    molecule_stability: float
    validity: float
    uniqueness: float
    validity_times_uniqueness: float
    sample_count: int

    def to_json(self):
        return json.dumps(asdict(self), indent=2)


def predict_bonds(coords, types, table=None):
    """Infer a BondGraph from coordinates and element symbols.

    Each unordered pair gets the highest bond order whose distance window
    accepts it; no window means no bond. Unknown elements are rejected.
    """
    table = table or default_bond_table()
    coords = np.asarray(coords, dtype=np.float64)
    if not np.isfinite(coords).all():
        raise ValueError("predict_bonds: non-finite coordinates")
    known = table.elements()
    for el in types:
        if el not in known:
            raise ValueError(f"predict_bonds: unknown element '{el}'")
    n = len(types)
    order = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.linalg.norm(coords[i] - coords[j]))
            for o in range(_MAX_ORDER, 0, -1):
                entry = table.lookup(types[i], types[j], o)
                if entry is not None and abs(d - entry[0]) <= entry[1]:
                    order[i, j] = order[j, i] = o
                    break
    return BondGraph(n=n, order=order)


def atom_stability(bond_graph, types, valency_table=None):
    """Fraction of atoms whose bond-order sum equals the reference valency."""
    vt = valency_table or default_valency_table()
    val = bond_graph.valency
    good = sum(1 for i, el in enumerate(types) if val[i] == vt.exact[el])
    return good / len(types)


def molecule_stability(bond_graph, types, valency_table=None):
    """1 iff every atom has exactly its reference valency."""
    return int(atom_stability(bond_graph, types, valency_table) == 1.0)


def _connected(bond_graph):
    n = bond_graph.n
    seen = {0}
    stack = [0]
    while stack:
        i = stack.pop()
        for j in np.nonzero(bond_graph.order[i])[0]:
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    return len(seen) == n


def validity_proxy(bond_graph, types, valency_table=None):
    """1 iff no atom exceeds its maximum valency and the graph is connected.

    This is a valency-satisfaction proxy, not equivalent to a chemistry
    toolkit's sanitization.
    """
    vt = valency_table or default_valency_table()
    val = bond_graph.valency
    if any(val[i] > vt.maximum[el] for i, el in enumerate(types)):
        return 0
    return int(_connected(bond_graph))


def canonical_key(bond_graph, types, rounds=3):
    """Permutation-invariant graph key.

    Combines the sorted element multiset with a Weisfeiler-Lehman color
    refinement (3 rounds) over the bond-order-labeled graph.
    """
    colors = list(types)
    for _ in range(rounds):
        new = []
        for i in range(bond_graph.n):
            neigh = sorted(
                f"{bond_graph.order[i, j]}:{colors[j]}"
                for j in np.nonzero(bond_graph.order[i])[0]
            )
            label = colors[i] + "|" + ",".join(neigh)
            new.append(hashlib.sha256(label.encode()).hexdigest()[:16])
        colors = new
    payload = ",".join(sorted(types)) + ";" + ",".join(sorted(colors))
    return hashlib.sha256(payload.encode()).hexdigest()


def uniqueness(bond_graphs_with_types):
    """Fraction of distinct canonical keys in a nonempty collection."""
    if not bond_graphs_with_types:
        raise ValueError("uniqueness: empty collection")
    keys = {canonical_key(bg, types) for bg, types in bond_graphs_with_types}
    return len(keys) / len(bond_graphs_with_types)


def evaluate_set(molecules, bond_table=None, valency_table=None):
    """Aggregate the four metrics over generated molecules."""
    if not molecules:
        raise ValueError("evaluate_set: empty molecule list")
    bond_table = bond_table or default_bond_table()
    valency_table = valency_table or default_valency_table()
    n_atoms_total = 0
    stable_atoms = 0
    stable_mols = 0
    valid = 0
    graphs = []
    for mol in molecules:
        bg = predict_bonds(mol.coords, mol.elements, bond_table)
        graphs.append((bg, mol.elements))
        frac = atom_stability(bg, mol.elements, valency_table)
        stable_atoms += round(frac * mol.n_atoms)
        n_atoms_total += mol.n_atoms
        stable_mols += int(frac == 1.0)
        valid += validity_proxy(bg, mol.elements, valency_table)
    uniq = uniqueness(graphs)
    validity = valid / len(molecules)
    return MetricsReport(
        atom_stability=stable_atoms / n_atoms_total,
        molecule_stability=stable_mols / len(molecules),
        validity=validity,
        uniqueness=uniq,
        validity_times_uniqueness=validity * uniq,
        sample_count=len(molecules),
    )
