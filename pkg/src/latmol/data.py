"""Molecule ingestion, featurization, size statistics, synthetic datasets.

Two on-disk formats are supported: multi-record XYZ for interchange and a
line-per-molecule manifest (see docs/FORMATS.md) for dependency-free
dataset files.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .egnn import random_rotation

DEFAULT_VOCABULARY = ("H", "C", "N", "O", "F")


class FormatError(ValueError):
    """Malformed XYZ or manifest input."""


@dataclass
class Molecule:
    elements: tuple
    coords: np.ndarray
    charges: np.ndarray
    s: float | None = None

    def __post_init__(self):
        self.elements = tuple(self.elements)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(len(self.elements), 3)
        if self.charges is None:
            self.charges = np.zeros(len(self.elements), dtype=np.int64)
        self.charges = np.asarray(self.charges, dtype=np.int64)
        if len(self.elements) < 1:
            raise ValueError("molecule must contain at least one atom")
        if self.charges.shape != (len(self.elements),):
            raise ValueError("charges length must match element count")

    @property
    def n_atoms(self):
        return len(self.elements)


@dataclass
class SizeDistribution:
    support: np.ndarray
    probabilities: np.ndarray

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=np.int64)
        self.probabilities = np.asarray(self.probabilities, dtype=np.float64)
        if self.support.size == 0:
            raise ValueError("size distribution needs nonempty support")
        if abs(self.probabilities.sum() - 1.0) > 1e-12:
            raise ValueError("size distribution probabilities must sum to 1")


def _check_vocabulary(element, vocabulary, where):
    if vocabulary is not None and element not in vocabulary:
        raise FormatError(f"{where}: unknown element '{element}'")


def parse_xyz(text, vocabulary=DEFAULT_VOCABULARY):
    """Parse multi-record XYZ text into molecules.

    Record layout: atom count line, comment line, then one ``El x y z``
    line per atom with an optional fifth numeric column holding an integer
    charge. Errors carry 1-based line numbers.
    """
    lines = text.splitlines()
    molecules = []
    i = 0
    while i < len(lines):
        if lines[i].strip() == "" and all(l.strip() == "" for l in lines[i:]):
            break
        try:
            count = int(lines[i].strip())
        except ValueError:
            raise FormatError(f"line {i + 1}: expected atom count, got {lines[i]!r}") from None
        if count < 1:
            raise FormatError(f"line {i + 1}: atom count must be >= 1")
        if i + 1 + count >= len(lines) + 1 and i + 1 + count > len(lines):
            raise FormatError(
                f"line {i + 1}: record claims {count} atoms but the file ends early"
            )
        elements, coords, charges = [], [], []
        for j in range(count):
            ln = i + 2 + j
            if ln >= len(lines):
                raise FormatError(
                    f"line {i + 1}: record claims {count} atoms but the file ends early"
                )
            parts = lines[ln].split()
            if len(parts) < 4:
                raise FormatError(f"line {ln + 1}: expected 'El x y z', got {lines[ln]!r}")
            el = parts[0]
            _check_vocabulary(el, vocabulary, f"line {ln + 1}")
            try:
                xyz = [float(v) for v in parts[1:4]]
                charge = int(float(parts[4])) if len(parts) >= 5 else 0
            except ValueError:
                raise FormatError(f"line {ln + 1}: non-numeric field in {lines[ln]!r}") from None
            elements.append(el)
            coords.append(xyz)
            charges.append(charge)
        molecules.append(Molecule(elements, coords, charges))
        i += 2 + count
    return molecules


def format_xyz(molecules, comments=None):
    out = []
    for mi, mol in enumerate(molecules):
        comment = "" if comments is None else comments[mi]
        out.append(str(mol.n_atoms))
        out.append(comment)
        write_charges = bool(np.any(mol.charges != 0))
        for el, xyz, q in zip(mol.elements, mol.coords, mol.charges):
            line = f"{el} {xyz[0]:.6f} {xyz[1]:.6f} {xyz[2]:.6f}"
            if write_charges:
                line += f" {int(q)}"
            out.append(line)
    return "\n".join(out) + ("\n" if out else "")


def write_xyz(molecules, path, comments=None):
    with open(path, "w") as fh:
        fh.write(format_xyz(molecules, comments))


def parse_manifest(text, vocabulary=DEFAULT_VOCABULARY):
    """Parse the line-per-molecule manifest format.

    Each non-comment line is ``elements | x y z ... | charges [| s]``.
    """
    molecules = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split("|")]
        if len(fields) not in (3, 4):
            raise FormatError(f"line {ln}: expected 3 or 4 '|'-separated fields")
        elements = fields[0].split()
        for el in elements:
            _check_vocabulary(el, vocabulary, f"line {ln}")
        n = len(elements)
        try:
            flat = [float(v) for v in fields[1].split()]
            charges = [int(v) for v in fields[2].split()]
            s = float(fields[3]) if len(fields) == 4 else None
        except ValueError:
            raise FormatError(f"line {ln}: non-numeric field") from None
        if len(flat) != 3 * n:
            raise FormatError(f"line {ln}: expected {3 * n} coordinates, got {len(flat)}")
        if len(charges) != n:
            raise FormatError(f"line {ln}: expected {n} charges, got {len(charges)}")
        molecules.append(Molecule(elements, np.array(flat).reshape(n, 3), charges, s=s))
    return molecules


def format_manifest(molecules):
    lines = []
    for mol in molecules:
        fields = [
            " ".join(mol.elements),
            " ".join(f"{v:.9f}" for v in mol.coords.reshape(-1)),
            " ".join(str(int(q)) for q in mol.charges),
        ]
        if mol.s is not None:
            fields.append(f"{mol.s:.9f}")
        lines.append(" | ".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def write_manifest(molecules, path):
    with open(path, "w") as fh:
        fh.write(format_manifest(molecules))


def load_dataset(path, vocabulary=DEFAULT_VOCABULARY):
    """Load molecules from a file, dispatching on the .xyz extension."""
    with open(path) as fh:
        text = fh.read()
    if str(path).endswith(".xyz"):
        return parse_xyz(text, vocabulary)
    return parse_manifest(text, vocabulary)


def featurize(molecule, vocabulary=DEFAULT_VOCABULARY):
    """Node features: one-hot element type concatenated with the charge."""
    n = molecule.n_atoms
    h = np.zeros((n, len(vocabulary) + 1))
    for i, el in enumerate(molecule.elements):
        if el not in vocabulary:
            raise ValueError(f"element '{el}' not in vocabulary {vocabulary}")
        h[i, vocabulary.index(el)] = 1.0
    h[:, -1] = molecule.charges
    return h


def type_indices(molecule, vocabulary=DEFAULT_VOCABULARY):
    return np.array([vocabulary.index(el) for el in molecule.elements], dtype=np.int64)


def size_distribution(dataset):
    sizes = np.array([m.n_atoms for m in dataset], dtype=np.int64)
    if sizes.size == 0:
        raise ValueError("cannot build a size distribution from an empty dataset")
    support, counts = np.unique(sizes, return_counts=True)
    return SizeDistribution(support, counts / counts.sum())


def sample_size(dist, rng):
    return int(rng.choice(dist.support, p=dist.probabilities))


def condition_value(molecule):
    """Radius of gyration in Angstrom: rms distance of atoms from the CoG."""
    centered = molecule.coords - molecule.coords.mean(axis=0)
    return float(np.sqrt(np.mean(np.sum(centered**2, axis=1))))


# --- synthetic template datasets ---------------------------------------------


@dataclass
class Template:
    name: str
    elements: tuple
    coords: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.coords = self.coords - self.coords.mean(axis=0)


def default_templates():
    """Three rigid reference geometries: HF, bent water, tetrahedral methane."""
    hf = Template("hf", ("H", "F"), [[0.0, 0.0, 0.0], [0.92, 0.0, 0.0]])
    ang = np.deg2rad(104.5)
    water = Template(
        "h2o",
        ("O", "H", "H"),
        [[0.0, 0.0, 0.0],
         [0.96, 0.0, 0.0],
         [0.96 * np.cos(ang), 0.96 * np.sin(ang), 0.0]],
    )
    r = 1.09 / np.sqrt(3.0)
    methane = Template(
        "ch4",
        ("C", "H", "H", "H", "H"),
        [[0.0, 0.0, 0.0],
         [r, r, r], [r, -r, -r], [-r, r, -r], [-r, -r, r]],
    )
    return [hf, water, methane]


@dataclass
class SyntheticConfig:
    templates: list = field(default_factory=default_templates)
    jitter: float = 0.02
    count: int = 100


def gen_synthetic_templates(config, rng):
    """Rotated, centered, jittered copies of rigid templates.

    Returns (molecules, template_ids); each molecule carries its radius of
    gyration as the condition value ``s``.
    """
    if len(config.templates) < 2:
        raise ValueError("need at least 2 templates")
    molecules, ids = [], []
    for _ in range(config.count):
        ti = int(rng.integers(len(config.templates)))
        tpl = config.templates[ti]
        rot = random_rotation(rng)
        coords = tpl.coords @ rot.T
        coords = coords - coords.mean(axis=0)
        if config.jitter > 0:
            coords = coords + rng.normal(scale=config.jitter, size=coords.shape)
        mol = Molecule(tpl.elements, coords, np.zeros(len(tpl.elements), dtype=np.int64))
        mol.s = condition_value(mol)
        molecules.append(mol)
        ids.append(ti)
    return molecules, ids


def distance_multiset(coords):
    """Sorted pairwise Euclidean distances."""
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    out = []
    for i in range(n):
        for j in range(i + 1, n):
            out.append(float(np.linalg.norm(coords[i] - coords[j])))
    return np.array(sorted(out))


def matches_template(molecule, template, tol=0.15):
    """Same element multiset and pairwise-distance multiset within tol per entry."""
    if sorted(molecule.elements) != sorted(template.elements):
        return False
    a = distance_multiset(molecule.coords)
    b = distance_multiset(template.coords)
    if a.shape != b.shape:
        return False
    return bool(np.all(np.abs(a - b) <= tol))
