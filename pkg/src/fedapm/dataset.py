"""MovieLens ingestion, user feature extraction and client shard construction."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from .rng import substream

logger = logging.getLogger(__name__)

FEATURE_DIM = 44
N_OCCUPATIONS = 21
N_AGE_GROUPS = 3

# slice layout of the user feature vector
SLICE_COUNT = slice(0, 1)
SLICE_LEVEL_COUNTS = slice(1, 6)
SLICE_LEVEL_PCT = slice(6, 11)
SLICE_POS_NEG = slice(11, 13)
SLICE_ENTROPY = slice(13, 14)
SLICE_STATS = slice(14, 18)
SLICE_GENDER = slice(18, 20)
SLICE_OCCUPATION = slice(20, 41)
SLICE_AGE = slice(41, 44)

FORMATS = ("tab-separated-100k", "double-colon-1m")
GENDERS = {"F": 0, "M": 1}

# ML-100K u.occupation, in file order
ML100K_OCCUPATIONS = (
    "administrator", "artist", "doctor", "educator", "engineer", "entertainment",
    "executive", "healthcare", "homemaker", "lawyer", "librarian", "marketing",
    "none", "other", "programmer", "retired", "salesman", "scientist", "student",
    "technician", "writer",
)


class MalformedLineError(ValueError):
    def __init__(self, path: Path | str, lineno: int, line: str, reason: str) -> None:
        super().__init__(f"{path}:{lineno}: {reason}: {line!r}")
        self.path = str(path)
        self.lineno = lineno


class Interaction(NamedTuple):
    user_id: int
    item_id: int
    rating: int
    timestamp: int


class UserProfile(NamedTuple):
    user_id: int
    age: int
    gender: int  # 0 = F, 1 = M
    occupation: int


@dataclass(frozen=True)
class PrivateLabels:
    age_group: int
    gender: int

    def get(self, attribute: str) -> int:
        if attribute == "age":
            return self.age_group
        if attribute == "gender":
            return self.gender
        raise KeyError(f"unknown attribute {attribute!r}")


@dataclass
class LoadStats:
    n_users: int = 0
    n_items: int = 0
    n_interactions: int = 0
    rejected_ratings: int = 0
    duplicates: int = 0
    user_index: dict[int, int] = field(default_factory=dict)
    item_index: dict[int, int] = field(default_factory=dict)
    occupations: tuple[str, ...] = ()

    def write_occupation_sidecar(self, path: Path | str) -> None:
        Path(path).write_text(json.dumps({name: i for i, name in enumerate(self.occupations)}, indent=1))


@dataclass(frozen=True)
class UserShard:
    """One simulated client.

    ``neighbors`` is the sorted training neighbourhood (positives minus the
    held-out item); ``examples_items``/``examples_labels`` hold the implicit
    training set with sampled negatives.
    """

    user_id: int
    positives: frozenset[int]
    neighbors: np.ndarray
    examples_items: np.ndarray
    examples_labels: np.ndarray
    features: np.ndarray
    labels: PrivateLabels
    held_out_item: int | None

    @property
    def examples(self) -> list[tuple[int, int]]:
        return [(int(i), int(y)) for i, y in zip(self.examples_items, self.examples_labels)]


def _split(line: str, fmt: str) -> list[str]:
    if fmt == "tab-separated-100k":
        return line.split("\t")
    return line.split("::")


def _read_lines(path: Path):
    with open(path, encoding="latin-1") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\r\n")
            if line.strip():
                yield lineno, line


def load_movielens(
    data_path: Path | str,
    profile_path: Path | str,
    format: str = "tab-separated-100k",
) -> tuple[list[Interaction], list[UserProfile], LoadStats]:
    """Parse a MovieLens ratings file and its user profile file.

    Users and items are reindexed to contiguous 0-based ids in ascending raw-id
    order.  Ratings outside 1..5 are dropped and counted; a repeated
    (user, item) pair keeps the last occurrence.  Users without a profile are
    dropped, as are profiles without ratings.
    """
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    data_path, profile_path = Path(data_path), Path(profile_path)
    stats = LoadStats()

    raw_profiles: dict[int, tuple[int, str, str]] = {}
    for lineno, line in _read_lines(profile_path):
        parts = line.split("|") if format == "tab-separated-100k" else line.split("::")
        if len(parts) < 4:
            raise MalformedLineError(profile_path, lineno, line, "expected at least 4 fields")
        try:
            uid = int(parts[0])
            if format == "tab-separated-100k":
                age, gender, occ = int(parts[1]), parts[2].strip(), parts[3].strip()
            else:
                gender, age, occ = parts[1].strip(), int(parts[2]), parts[3].strip()
        except ValueError as exc:
            raise MalformedLineError(profile_path, lineno, line, str(exc)) from None
        if gender not in GENDERS:
            raise MalformedLineError(profile_path, lineno, line, f"unknown gender {gender!r}")
        raw_profiles[uid] = (age, gender, occ)

    if format == "tab-separated-100k":
        sidecar = profile_path.with_name("u.occupation")
        if sidecar.exists():
            vocab = tuple(l.strip() for _, l in _read_lines(sidecar))
        else:
            seen = {occ for _, _, occ in raw_profiles.values()}
            vocab = ML100K_OCCUPATIONS if seen <= set(ML100K_OCCUPATIONS) else tuple(sorted(seen))
        occ_index = {name: i for i, name in enumerate(vocab)}
    else:
        vocab = tuple(str(i) for i in range(N_OCCUPATIONS))
        occ_index = {name: i for i, name in enumerate(vocab)}
    if len(vocab) > N_OCCUPATIONS:
        raise ValueError(f"occupation vocabulary has {len(vocab)} entries, at most {N_OCCUPATIONS} supported")
    stats.occupations = vocab

    records: dict[tuple[int, int], tuple[int, int]] = {}
    for lineno, line in _read_lines(data_path):
        parts = _split(line, format)
        if len(parts) != 4:
            raise MalformedLineError(data_path, lineno, line, "expected 4 fields")
        try:
            u, i, r, t = (int(p) for p in parts)
        except ValueError as exc:
            raise MalformedLineError(data_path, lineno, line, str(exc)) from None
        if not 1 <= r <= 5:
            stats.rejected_ratings += 1
            continue
        if (u, i) in records:
            stats.duplicates += 1
            del records[(u, i)]  # keeps insertion order = last write
        records[(u, i)] = (r, t)
    if stats.rejected_ratings:
        logger.warning("%s: rejected %d ratings outside 1..5", data_path, stats.rejected_ratings)
    if stats.duplicates:
        logger.warning("%s: %d duplicate (user, item) pairs, kept last", data_path, stats.duplicates)

    missing = {u for u, _ in records} - raw_profiles.keys()
    if missing:
        logger.warning("dropping ratings of %d users without profile", len(missing))
        records = {k: v for k, v in records.items() if k[0] not in missing}

    users = sorted({u for u, _ in records})
    items = sorted({i for _, i in records})
    stats.user_index = {u: k for k, u in enumerate(users)}
    stats.item_index = {i: k for k, i in enumerate(items)}

    interactions = [
        Interaction(stats.user_index[u], stats.item_index[i], r, t) for (u, i), (r, t) in records.items()
    ]
    profiles = []
    for u in users:
        age, gender, occ = raw_profiles[u]
        if occ not in occ_index:
            raise ValueError(f"user {u}: occupation {occ!r} not in vocabulary")
        profiles.append(UserProfile(stats.user_index[u], age, GENDERS[gender], occ_index[occ]))

    stats.n_users, stats.n_items, stats.n_interactions = len(users), len(items), len(interactions)
    logger.info("loaded %d interactions, %d users, %d items", stats.n_interactions, stats.n_users, stats.n_items)
    return interactions, profiles, stats


def rating_entropy(level_counts: Sequence[int]) -> float:
    """Entropy (nats) of the rating-level distribution given per-level counts."""
    counts = np.asarray(level_counts, dtype=float)
    if counts.shape != (5,):
        raise ValueError("expected 5 rating-level counts")
    total = counts.sum()
    if total <= 0:
        raise ValueError("entropy undefined for a user without ratings")
    p = counts[counts > 0] / total
    return float(-(p * np.log(p)).sum())


def age_bucket(age: int) -> int:
    if age < 0:
        raise ValueError("age must be non-negative")
    if age < 35:
        return 0
    if age <= 45:
        return 1
    return 2


def extract_features(ratings: Sequence[int], profile: UserProfile, max_count: int) -> np.ndarray:
    """Build the 44-dimensional feature vector of one user.

    ``ratings`` are the user's rating values; ``max_count`` is the largest
    per-user interaction count in the dataset and scales the count slots.
    """
    r = np.asarray(ratings, dtype=float)
    n = r.size
    if n == 0:
        raise ValueError(f"user {profile.user_id} has no interactions")
    if max_count < n:
        raise ValueError("max_count smaller than the user's interaction count")
    x = np.zeros(FEATURE_DIM)
    level_counts = np.array([(r == lvl).sum() for lvl in range(1, 6)], dtype=float)
    x[SLICE_COUNT] = n / max_count
    x[SLICE_LEVEL_COUNTS] = level_counts / max_count
    x[SLICE_LEVEL_PCT] = level_counts / n
    x[11] = level_counts[3:].sum() / n
    x[12] = level_counts[:2].sum() / n
    x[13] = rating_entropy(level_counts)
    x[SLICE_STATS] = np.array([np.median(r), r.min(), r.max(), r.mean()]) / 5.0
    x[18 + profile.gender] = 1.0
    x[20 + profile.occupation] = 1.0
    x[41 + age_bucket(profile.age)] = 1.0
    return x


def leave_one_out_split(interactions: Sequence[Interaction]) -> dict[int, int]:
    """Hold out each user's most recent item; ties go to the larger item id."""
    latest: dict[int, tuple[int, int]] = {}
    counts: dict[int, int] = defaultdict(int)
    for it in interactions:
        counts[it.user_id] += 1
        key = (it.timestamp, it.item_id)
        if it.user_id not in latest or key > latest[it.user_id]:
            latest[it.user_id] = key
    return {u: item for u, (_, item) in latest.items() if counts[u] >= 2}


def sample_negatives(
    user_id: int,
    positives: set[int] | frozenset[int],
    item_universe: Sequence[int] | np.ndarray,
    q: int,
    rng: np.random.Generator,
    held_out: int | None = None,
) -> list[tuple[int, int]]:
    """Draw ``q`` negatives per training positive from never-interacted items."""
    if q < 1:
        raise ValueError("q must be >= 1")
    n_pos = len(set(positives) - {held_out}) if held_out is not None else len(positives)
    universe = np.unique(np.asarray(item_universe, dtype=np.int64))
    pool = universe[~np.isin(universe, np.fromiter(positives, dtype=np.int64, count=len(positives)))]
    if pool.size == 0:
        logger.warning("user %d: empty negative pool", user_id)
        return []
    k = min(q * n_pos, pool.size)
    chosen = rng.choice(pool, size=k, replace=False)
    return [(int(i), 0) for i in chosen]


def build_shards(
    interactions: Sequence[Interaction],
    profiles: Sequence[UserProfile],
    n_items: int,
    q: int,
    seed: int,
) -> list[UserShard]:
    """Assemble one :class:`UserShard` per user, sorted by user id."""
    by_user: dict[int, list[Interaction]] = defaultdict(list)
    for it in interactions:
        by_user[it.user_id].append(it)
    held = leave_one_out_split(interactions)
    max_count = max((len(v) for v in by_user.values()), default=1)
    universe = np.arange(n_items)
    shards = []
    for prof in sorted(profiles, key=lambda p: p.user_id):
        rows = by_user.get(prof.user_id)
        if not rows:
            continue
        positives = frozenset(it.item_id for it in rows)
        h = held.get(prof.user_id)
        train_pos = sorted(positives - {h})
        negs = sample_negatives(prof.user_id, positives, universe, q, substream(seed, "negatives", prof.user_id), h)
        items = np.array(train_pos + [i for i, _ in negs], dtype=np.int64)
        labels = np.concatenate([np.ones(len(train_pos)), np.zeros(len(negs))])
        shards.append(
            UserShard(
                user_id=prof.user_id,
                positives=positives,
                neighbors=np.array(train_pos, dtype=np.int64),
                examples_items=items,
                examples_labels=labels,
                features=extract_features([it.rating for it in rows], prof, max_count),
                labels=PrivateLabels(age_bucket(prof.age), prof.gender),
                held_out_item=h,
            )
        )
    return shards



def synthetic_movielens(
    n_users: int, n_items: int, seed: int, min_items: int = 8, max_items: int = 40
) -> tuple[list[Interaction], list[UserProfile]]:
    """Small MovieLens-shaped dataset whose tastes depend on gender and age.

    Half of the catalogue is favoured by each gender and older users rate
    higher on average, so attacks and recommenders have signal to find.
    """
    rng = substream(seed, "synthetic")
    max_items = min(max_items, n_items - 1)
    min_items = min(min_items, max_items)
    item_pop = rng.dirichlet(np.full(n_items, 0.5))
    favour = np.arange(n_items) % 2
    profiles, interactions = [], []
    for u in range(n_users):
        gender = int(rng.integers(2))
        age = int(rng.choice([22, 30, 40, 52]))
        profiles.append(UserProfile(u, age, gender, int(rng.integers(N_OCCUPATIONS))))
        w = item_pop * np.where(favour == gender, 4.0, 1.0)
        k = int(rng.integers(min_items, max_items + 1))
        items = rng.choice(n_items, size=k, replace=False, p=w / w.sum())
        base = 2.5 + 0.5 * age_bucket(age) + 0.5 * gender
        ratings = np.clip(np.rint(rng.normal(base, 1.0, k)), 1, 5).astype(int)
        t0 = int(rng.integers(10**8, 2 * 10**8))
        for j, (i, r) in enumerate(zip(items, ratings)):
            interactions.append(Interaction(u, int(i), int(r), t0 + 60 * j))
    return interactions, profiles
