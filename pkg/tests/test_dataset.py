import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedapm.dataset import (
    FEATURE_DIM,
    Interaction,
    MalformedLineError,
    UserProfile,
    age_bucket,
    build_shards,
    extract_features,
    leave_one_out_split,
    load_movielens,
    rating_entropy,
    sample_negatives,
    synthetic_movielens,
)

from conftest import requires_ml100k


def write(tmp_path, name, lines):
    p = tmp_path / name
    p.write_text("".join(l + "\n" for l in lines))
    return p


PROFILES = ["1|24|M|technician|85711", "2|53|F|other|94043", "3|40|M|writer|32067"]


# ---------------------------------------------------------------- loading
@requires_ml100k
def test_ml100k_counts(data_dir):
    inter, profiles, stats = load_movielens(data_dir / "ml-100k/u.data", data_dir / "ml-100k/u.user")
    assert (stats.n_users, stats.n_items, stats.n_interactions) == (943, 1682, 100000)
    assert len(profiles) == 943 and len(stats.occupations) == 21
    assert stats.duplicates == 0 and stats.rejected_ratings == 0


def test_empty_files(tmp_path):
    inter, profiles, stats = load_movielens(write(tmp_path, "u.data", []), write(tmp_path, "u.user", []))
    assert inter == [] and profiles == []
    assert stats.n_users == stats.n_items == stats.n_interactions == 0


def test_duplicate_pair_last_write_wins(tmp_path, caplog):
    data = write(tmp_path, "u.data", ["1\t10\t3\t100", "2\t10\t4\t200", "1\t10\t5\t300"])
    inter, _, stats = load_movielens(data, write(tmp_path, "u.user", PROFILES))
    assert len(inter) == 2 and stats.duplicates == 1
    kept = [it for it in inter if it.user_id == 0]
    assert kept[0].rating == 5 and kept[0].timestamp == 300
    assert "duplicate" in caplog.text


def test_out_of_range_ratings_rejected(tmp_path):
    data = write(tmp_path, "u.data", ["1\t10\t0\t100", "1\t11\t6\t100", "1\t12\t5\t100"])
    inter, _, stats = load_movielens(data, write(tmp_path, "u.user", PROFILES))
    assert len(inter) == 1 and stats.rejected_ratings == 2


def test_malformed_line_reports_position(tmp_path):
    data = write(tmp_path, "u.data", ["1\t10\t3\t100", "1\tabc\t3\t100"])
    with pytest.raises(MalformedLineError) as err:
        load_movielens(data, write(tmp_path, "u.user", PROFILES))
    assert err.value.lineno == 2


def test_reindexing_is_contiguous(tmp_path):
    data = write(tmp_path, "u.data", ["3\t500\t3\t1", "1\t20\t4\t2", "3\t20\t2\t3"])
    inter, profiles, stats = load_movielens(data, write(tmp_path, "u.user", PROFILES))
    assert stats.user_index == {1: 0, 3: 1}
    assert stats.item_index == {20: 0, 500: 1}
    assert [p.user_id for p in profiles] == [0, 1]


def test_ml1m_format(tmp_path):
    data = write(tmp_path, "ratings.dat", ["1::1193::5::978300760", "2::661::3::978302109"])
    users = write(tmp_path, "users.dat", ["1::F::1::10::48067", "2::M::56::16::70072"])
    inter, profiles, stats = load_movielens(data, users, "double-colon-1m")
    assert stats.n_users == 2 and stats.n_items == 2
    assert profiles[0] == UserProfile(0, 1, 0, 10)
    assert profiles[1].gender == 1 and profiles[1].age == 56


# ---------------------------------------------------------------- features
@pytest.mark.parametrize(
    "counts, expected",
    [((0, 0, 7, 0, 0), 0.0), ((1, 1, 1, 1, 1), math.log(5)), ((2, 0, 0, 0, 2), math.log(2))],
)
def test_rating_entropy(counts, expected):
    assert rating_entropy(counts) == pytest.approx(expected, abs=1e-12)


@given(st.lists(st.integers(0, 50), min_size=5, max_size=5).filter(lambda c: sum(c) > 0))
def test_entropy_bounds(counts):
    h = rating_entropy(counts)
    assert -1e-12 <= h <= math.log(5) + 1e-12


@pytest.mark.parametrize("age, bucket", [(30, 0), (34, 0), (35, 1), (40, 1), (45, 1), (46, 2), (50, 2)])
def test_age_bucket(age, bucket):
    assert age_bucket(age) == bucket


def test_feature_one_hots():
    x = extract_features([4, 5, 1], UserProfile(0, 40, 0, 3), max_count=10)
    assert x.shape == (FEATURE_DIM,)
    np.testing.assert_array_equal(x[18:20], [1, 0])
    np.testing.assert_array_equal(x[20:41], np.eye(21)[3])
    np.testing.assert_array_equal(x[41:44], [0, 1, 0])


def test_feature_statistics():
    x = extract_features([4, 5, 1, 4], UserProfile(0, 20, 1, 0), max_count=8)
    assert x[0] == pytest.approx(0.5)
    np.testing.assert_allclose(x[1:6], np.array([1, 0, 0, 2, 1]) / 8)
    np.testing.assert_allclose(x[6:11], np.array([1, 0, 0, 2, 1]) / 4)
    assert x[11] == pytest.approx(0.75) and x[12] == pytest.approx(0.25)
    np.testing.assert_allclose(x[14:18], np.array([4, 1, 5, 3.5]) / 5)


@settings(max_examples=50)
@given(st.lists(st.integers(1, 5), min_size=1, max_size=40), st.integers(0, 80), st.integers(0, 1), st.integers(0, 20))
def test_feature_invariants(ratings, age, gender, occ):
    x = extract_features(ratings, UserProfile(0, age, gender, occ), max_count=40)
    assert np.all(np.isfinite(x))
    assert x[6:11].sum() == pytest.approx(1.0)
    assert x[18:20].sum() == x[20:41].sum() == x[41:44].sum() == 1


# ---------------------------------------------------------------- split and negatives
def test_leave_one_out_latest():
    inter = [Interaction(0, 7, 3, 1), Interaction(0, 9, 3, 9)]
    assert leave_one_out_split(inter) == {0: 9}


def test_leave_one_out_tie_takes_larger_item():
    inter = [Interaction(0, 4, 3, 5), Interaction(0, 2, 3, 5), Interaction(0, 1, 3, 1),
             Interaction(1, 8, 3, 2), Interaction(1, 3, 3, 2)]
    # oracle: sort by (timestamp, item) and take the last
    expected = {u: max((it.timestamp, it.item_id) for it in inter if it.user_id == u)[1] for u in (0, 1)}
    assert leave_one_out_split(inter) == expected == {0: 4, 1: 8}


def test_single_interaction_user_not_held_out():
    assert leave_one_out_split([Interaction(5, 1, 4, 1)]) == {}


def test_negatives_exhaust_pool(rng):
    negs = sample_negatives(0, {0}, range(5), 4, rng)
    assert sorted(i for i, _ in negs) == [1, 2, 3, 4]
    assert all(y == 0 for _, y in negs)


def test_negatives_avoid_positives(rng):
    positives = {0, 3, 5, 9}
    negs = sample_negatives(0, positives, range(20), 1, rng, held_out=9)
    assert len(negs) == 3
    assert not {i for i, _ in negs} & positives


def test_negatives_deterministic():
    a = sample_negatives(0, {1, 2}, range(50), 4, np.random.default_rng(5))
    b = sample_negatives(0, {1, 2}, range(50), 4, np.random.default_rng(5))
    assert a == b


def test_shards_consistent():
    inter, profiles = synthetic_movielens(15, 40, seed=1)
    shards = build_shards(inter, profiles, 40, q=2, seed=1)
    assert [s.user_id for s in shards] == sorted(s.user_id for s in shards)
    for s in shards:
        assert s.held_out_item in s.positives
        assert s.held_out_item not in s.neighbors
        assert s.held_out_item not in s.examples_items
        pos = s.examples_items[s.examples_labels == 1]
        neg = s.examples_items[s.examples_labels == 0]
        assert set(pos) == set(s.neighbors)
        assert not set(neg) & s.positives
        assert len(neg) == min(2 * len(pos), 40 - len(s.positives))
