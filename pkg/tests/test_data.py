import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latmol.data import (
    DEFAULT_VOCABULARY,
    FormatError,
    Molecule,
    SyntheticConfig,
    condition_value,
    default_templates,
    distance_multiset,
    featurize,
    format_manifest,
    format_xyz,
    gen_synthetic_templates,
    parse_manifest,
    parse_xyz,
    sample_size,
    size_distribution,
)
from latmol.rng import derive_rng


def test_parse_single_hydrogen():
    mols = parse_xyz("1\n\nH 0 0 0\n")
    assert len(mols) == 1
    assert mols[0].elements == ("H",)
    assert mols[0].charges[0] == 0


def test_xyz_round_trip_six_decimals():
    rng = np.random.default_rng(0)
    mols = [
        Molecule(("C", "H", "O"), rng.normal(size=(3, 3)) * 3, [0, 0, -1]),
        Molecule(("H",), [[0.123456789, -2, 4]], [0]),
    ]
    text = format_xyz(mols)
    back = parse_xyz(text)
    for a, b in zip(mols, back):
        assert a.elements == b.elements
        np.testing.assert_allclose(a.coords, b.coords, atol=1e-6)
        np.testing.assert_array_equal(a.charges, b.charges)
    # parse . write . parse is a fixed point
    assert format_xyz(back) == format_xyz(parse_xyz(format_xyz(back)))


def test_truncated_record_names_position():
    with pytest.raises(FormatError) as err:
        parse_xyz("3\n\nH 0 0 0\nH 1 0 0\n")
    assert "3 atoms" in str(err.value)


def test_bad_count_line_rejected():
    with pytest.raises(FormatError) as err:
        parse_xyz("x\n\nH 0 0 0\n")
    assert "line 1" in str(err.value)


def test_unknown_element_rejected_with_line():
    with pytest.raises(FormatError) as err:
        parse_xyz("1\n\nXe 0 0 0\n")
    assert "Xe" in str(err.value) and "line 3" in str(err.value)


def test_write_empty_list_is_empty_file():
    assert format_xyz([]) == ""


def test_single_atom_record_is_three_lines():
    text = format_xyz([Molecule(("H",), [[0, 0, 0]], [0])])
    assert len(text.strip("\n").split("\n")) == 3


def test_featurize_hydrogen():
    mol = Molecule(("H",), [[0, 0, 0]], [0])
    np.testing.assert_array_equal(featurize(mol), [[1, 0, 0, 0, 0, 0]])


def test_featurize_oxygen_anion():
    mol = Molecule(("O",), [[0, 0, 0]], [-1])
    np.testing.assert_array_equal(featurize(mol), [[0, 0, 0, 1, 0, -1]])


def test_feature_width_is_vocab_plus_charge():
    mol = Molecule(("C", "N", "F"), np.zeros((3, 3)), [0, 1, 0])
    assert featurize(mol).shape == (3, len(DEFAULT_VOCABULARY) + 1)


def test_featurize_rejects_out_of_vocabulary():
    mol = Molecule(("H",), [[0, 0, 0]], [0])
    with pytest.raises(ValueError):
        featurize(mol, vocabulary=("C", "N"))


@settings(max_examples=50, deadline=None)
@given(
    st.lists(
        st.tuples(st.sampled_from(DEFAULT_VOCABULARY), st.integers(-2, 2)),
        min_size=1, max_size=6,
    )
)
def test_featurize_injective_on_type_and_charge(pairs):
    mols = [
        Molecule((el,), [[0, 0, 0]], [q]) for el, q in pairs
    ]
    rows = [tuple(featurize(m)[0]) for m in mols]
    for (el1, q1), r1 in zip(pairs, rows):
        for (el2, q2), r2 in zip(pairs, rows):
            if (el1, q1) != (el2, q2):
                assert r1 != r2


def test_size_distribution_counts():
    mols = [Molecule(("H",) * n, np.zeros((n, 3)), [0] * n) for n in (2, 2, 3)]
    dist = size_distribution(mols)
    np.testing.assert_array_equal(dist.support, [2, 3])
    np.testing.assert_allclose(dist.probabilities, [2 / 3, 1 / 3])


def test_size_sampling_frequencies_converge():
    mols = [Molecule(("H",) * n, np.zeros((n, 3)), [0] * n) for n in (2, 2, 3)]
    dist = size_distribution(mols)
    rng = derive_rng(0, "test-sizes")
    draws = np.array([sample_size(dist, rng) for _ in range(100_000)])
    assert abs(np.mean(draws == 2) - 2 / 3) < 0.01


def test_singleton_support_always_sampled():
    mols = [Molecule(("H", "H"), np.zeros((2, 3)), [0, 0])]
    dist = size_distribution(mols)
    rng = derive_rng(1, "test-sizes")
    assert all(sample_size(dist, rng) == 2 for _ in range(50))


def test_default_template_geometry():
    by_name = {t.name: t for t in default_templates()}
    hf = by_name["hf"]
    assert abs(np.linalg.norm(hf.coords[0] - hf.coords[1]) - 0.92) < 1e-12
    water = by_name["h2o"]
    v1 = water.coords[1] - water.coords[0]
    v2 = water.coords[2] - water.coords[0]
    assert abs(np.linalg.norm(v1) - 0.96) < 1e-12
    assert abs(np.linalg.norm(v2) - 0.96) < 1e-12
    angle = np.degrees(np.arccos(v1 @ v2 / (0.96 * 0.96)))
    assert abs(angle - 104.5) < 1e-9
    methane = by_name["ch4"]
    for i in range(1, 5):
        assert abs(np.linalg.norm(methane.coords[i] - methane.coords[0]) - 1.09) < 1e-12


def test_zero_jitter_preserves_distance_multisets():
    rng = derive_rng(2, "test-syn")
    config = SyntheticConfig(jitter=0.0, count=30)
    mols, ids = gen_synthetic_templates(config, rng)
    for mol, ti in zip(mols, ids):
        tpl = config.templates[ti]
        np.testing.assert_allclose(
            distance_multiset(mol.coords), distance_multiset(tpl.coords), atol=1e-9
        )


def test_rotation_preserves_distance_multiset():
    from latmol.egnn import random_rotation

    rng = derive_rng(3, "test-rot")
    coords = rng.normal(size=(5, 3))
    rot = random_rotation(rng)
    np.testing.assert_allclose(
        distance_multiset(coords), distance_multiset(coords @ rot.T), atol=1e-12
    )


def test_synthetic_generation_is_seed_deterministic():
    a, ids_a = gen_synthetic_templates(SyntheticConfig(count=10), derive_rng(5, "syn"))
    b, ids_b = gen_synthetic_templates(SyntheticConfig(count=10), derive_rng(5, "syn"))
    assert ids_a == ids_b
    for ma, mb in zip(a, b):
        np.testing.assert_array_equal(ma.coords, mb.coords)


def test_synthetic_needs_two_templates():
    config = SyntheticConfig(templates=default_templates()[:1], count=3)
    with pytest.raises(ValueError):
        gen_synthetic_templates(config, derive_rng(0, "syn"))


def test_condition_value_single_atom_is_zero():
    assert condition_value(Molecule(("H",), [[4.0, 5.0, 6.0]], [0])) == 0.0


def test_condition_value_two_atoms_two_angstrom():
    mol = Molecule(("H", "H"), [[0, 0, 0], [2.0, 0, 0]], [0, 0])
    assert abs(condition_value(mol) - 1.0) < 1e-12


def test_condition_value_rigid_motion_invariant():
    from latmol.egnn import random_rotation

    rng = derive_rng(6, "test-cond")
    mol = Molecule(("C", "H", "H"), rng.normal(size=(3, 3)), [0, 0, 0])
    rot = random_rotation(rng)
    moved = Molecule(mol.elements, mol.coords @ rot.T + [1.0, 2.0, 3.0], mol.charges)
    assert abs(condition_value(mol) - condition_value(moved)) < 1e-12


def test_manifest_round_trip():
    rng = np.random.default_rng(7)
    mols = [
        Molecule(("C", "H"), rng.normal(size=(2, 3)), [0, 1], s=1.25),
        Molecule(("O",), rng.normal(size=(1, 3)), [0]),
    ]
    back = parse_manifest(format_manifest(mols))
    for a, b in zip(mols, back):
        assert a.elements == b.elements
        np.testing.assert_allclose(a.coords, b.coords, atol=1e-9)
        np.testing.assert_array_equal(a.charges, b.charges)
        assert (a.s is None) == (b.s is None)


def test_manifest_rejects_wrong_coordinate_count():
    with pytest.raises(FormatError) as err:
        parse_manifest("H H | 0 0 0 | 0 0\n")
    assert "line 1" in str(err.value)
