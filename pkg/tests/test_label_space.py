import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crossres.label_space import (
    LabelError, LabelSpace, UnificationTable, default_table, inverse_unify, load_table,
    permute_target, table_from_text, unify, validate_table,
)


@pytest.fixture
def table():
    return default_table()


def ids(table, *names):
    return [table.source.id_of(n) for n in names]


def test_default_table_entries(table):
    assert table.name_mapping["Open water"] == "Water"
    assert table.name_mapping["Developed high"] == "Built-up"
    assert table.name_mapping["Barren land"] == "Tree canopy"
    assert table.name_mapping["Cultivated crops"] == "Low vegetation"


def test_default_table_is_valid(table):
    assert validate_table(table) == (True, [])


def test_preimage_sizes_and_reserved_nodata(table):
    sizes = [len(table.preimage(t)) for t in table.target.class_ids]
    assert sizes == [4, 5, 4, 2]
    # 15 named classes plus the reserved no-data id make 16 source codes
    assert table.source.ignore_id == 0
    assert len(table.source.class_ids) + 1 == 16
    assert table.source.class_ids == tuple(range(1, 16))


def test_unify_water_pair(table):
    grid = np.array([ids(table, "Open water", "Herbaceous wetlands")])
    water = table.target.id_of("Water")
    np.testing.assert_array_equal(unify(grid, table), [[water, water]])


def test_unify_all_ignore(table):
    grid = np.zeros((3, 4), dtype=np.int64)
    assert (unify(grid, table) == table.target.ignore_id).all()


def test_unify_one_per_group(table):
    grid = np.array([ids(table, "Developed low", "Mixed forest"),
                     ids(table, "Grassland", "Open water")])
    expected = np.array([[table.mapping[v] for v in row] for row in grid])
    out = unify(grid, table)
    np.testing.assert_array_equal(out, expected)
    assert sorted(out.ravel().tolist()) == [0, 1, 2, 3]


def test_unify_rejects_unknown_value(table):
    grid = np.ones((2, 3), dtype=np.int64)
    grid[1, 2] = 42
    with pytest.raises(LabelError, match=r"42 at pixel \(1, 2\)"):
        unify(grid, table)


def test_validate_unmapped(table):
    mapping = dict(table.mapping)
    del mapping[table.source.id_of("Grassland")]
    ok, violations = validate_table(UnificationTable(table.source, table.target, mapping))
    assert not ok and violations == ["unmapped: Grassland"]


def test_validate_unreached(table):
    water = table.target.id_of("Water")
    built = table.target.id_of("Built-up")
    mapping = {s: (built if t == water else t) for s, t in table.mapping.items()}
    ok, violations = validate_table(UnificationTable(table.source, table.target, mapping))
    assert not ok and violations == ["unreached: Water"]


def test_label_space_invariants():
    with pytest.raises(ValueError):
        LabelSpace("x", (1, 1), ("a", "b"))
    with pytest.raises(ValueError):
        LabelSpace("x", (1, 2), ("a", "b"), ignore_id=2)
    with pytest.raises(ValueError):
        LabelSpace("x", (1, 2), ("a",))


def test_text_round_trip(table, tmp_path):
    table.save(tmp_path / "table.tsv")
    again = load_table(tmp_path / "table.tsv")
    assert again.name_mapping == table.name_mapping
    assert again.mapping == table.mapping
    assert (tmp_path / "table.tsv").read_text().splitlines()[0] == "Developed open space\tBuilt-up"


def test_singleton_table_inverse_is_exact():
    t = table_from_text("a\tA\nb\tB\nc\tC\n")
    y = np.array([[0, 1, 2], [2, 2, 0]])
    src = inverse_unify(y, t, seed=3)
    np.testing.assert_array_equal(src, y + 1)
    np.testing.assert_array_equal(unify(src, t), y)


def test_inverse_unify_water_members(table):
    water = table.target.id_of("Water")
    out = inverse_unify(np.full((10, 10), water), table, seed=0)
    assert set(np.unique(out)) <= set(ids(table, "Herbaceous wetlands", "Open water"))


def test_inverse_unify_frequencies(table):
    built = table.target.id_of("Built-up")
    out = inverse_unify(np.full((100, 100), built), table, seed=11)
    for s in table.preimage(built):
        assert abs((out == s).mean() - 0.25) <= 0.02


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 12), st.integers(1, 12))
def test_unify_inverse_round_trip(seed, h, w):
    table = default_table()
    y = np.random.default_rng(seed).integers(0, 4, size=(h, w))
    np.testing.assert_array_equal(unify(inverse_unify(y, table, seed), table), y)


@settings(max_examples=50, deadline=None)
@given(st.permutations([0, 1, 2, 3]), st.integers(0, 2**32 - 1))
def test_unify_commutes_with_target_permutation(perm, seed):
    table = default_table()
    rng = np.random.default_rng(seed)
    grid = rng.integers(0, 16, size=(6, 7))
    permuted = permute_target(table, perm)
    lut = np.array(list(perm) + [table.target.ignore_id] * 252)
    np.testing.assert_array_equal(unify(grid, permuted), lut[unify(grid, table)])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_unify_preserves_shape_and_ignore(seed):
    table = default_table()
    rng = np.random.default_rng(seed)
    grid = rng.integers(0, 16, size=(rng.integers(1, 9), rng.integers(1, 9)))
    out = unify(grid, table)
    assert out.shape == grid.shape
    np.testing.assert_array_equal(out == table.target.ignore_id, grid == 0)
