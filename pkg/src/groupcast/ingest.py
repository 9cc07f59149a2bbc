"""Interaction logs, group membership, the group relationship graph, and
temporal snapshot splitting.

All CSV inputs are UTF-8 with LF line endings:

* interactions: header ``group_id,item_id,timestamp[,weight]``
* memberships:  header ``group_id,user_id``
* tags:         header ``entity_id,tag`` (one tag per row)
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Interaction",
    "Dataset",
    "GroupGraph",
    "TemporalSplit",
    "MalformedRow",
    "EmptyFile",
    "InsufficientData",
    "load_interactions",
    "load_memberships",
    "load_tags",
    "build_group_graph",
    "split_temporal",
    "featurize_tags",
    "dataset_stats",
    "synthetic_dataset",
]


class MalformedRow(ValueError):
    """A CSV row is missing fields or carries a non-integer timestamp."""

    def __init__(self, line_number, message=""):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}" if message else f"line {line_number}")


class EmptyFile(ValueError):
    """An input file contains a header but zero data rows."""


class InsufficientData(ValueError):
    """Fewer interactions than requested snapshots."""


@dataclass(frozen=True)
class Interaction:
    """One timestamped group-item event."""

    group_id: str
    item_id: str
    timestamp: int
    weight: float = 1.0


@dataclass
class Dataset:
    """Interaction log plus group membership and tag side information.

    ``interactions`` is kept sorted nondecreasing by timestamp (stable, so
    equal timestamps keep file order). Duplicate rows are retained; each is
    an event.
    """

    interactions: list[Interaction] = field(default_factory=list)
    group_members: dict[str, set[str]] = field(default_factory=dict)
    item_tags: dict[str, list[str]] = field(default_factory=dict)
    group_tags: dict[str, list[str]] = field(default_factory=dict)

    def groups(self) -> list[str]:
        seen = dict.fromkeys(g for g in self.group_members)
        for it in self.interactions:
            seen.setdefault(it.group_id)
        return list(seen)

    def items(self) -> list[str]:
        seen = dict.fromkeys(it.item_id for it in self.interactions)
        for item in self.item_tags:
            seen.setdefault(item)
        return list(seen)


@dataclass
class GroupGraph:
    """Undirected weighted graph over groups, built from shared members.

    ``adjacency`` mirrors ``edges`` symmetrically and never contains
    self-loops. Edge weights are positive shared-member counts.
    """

    nodes: set[str] = field(default_factory=set)
    edges: dict[frozenset, float] = field(default_factory=dict)
    adjacency: dict[str, set[str]] = field(default_factory=dict)

    def add_node(self, g: str) -> None:
        self.nodes.add(g)
        self.adjacency.setdefault(g, set())

    def add_edge(self, a: str, b: str, weight: float) -> None:
        if a == b:
            raise ValueError("self-loops are not allowed")
        if weight <= 0:
            raise ValueError("edge weight must be positive")
        self.nodes.update((a, b))
        self.edges[frozenset((a, b))] = weight
        self.adjacency.setdefault(a, set()).add(b)
        self.adjacency.setdefault(b, set()).add(a)

    def neighbors(self, g: str) -> set[str]:
        return self.adjacency.get(g, set())

    def degree(self, g: str) -> int:
        return len(self.adjacency.get(g, ()))

    def edge_list(self) -> list[tuple[str, str]]:
        """Edges as ordered pairs (a < b), sorted for reproducible iteration."""
        pairs = [tuple(sorted(e)) for e in self.edges]
        pairs.sort()
        return pairs


@dataclass
class TemporalSplit:
    """Chronological train/test split with the training prefix cut into
    contiguous equal-count snapshots (the last absorbs the remainder)."""

    snapshots: list[list[Interaction]]
    test_set: list[Interaction]
    train_fraction: float

    @property
    def num_snapshots(self) -> int:
        return len(self.snapshots)

    def train_interactions(self) -> list[Interaction]:
        out: list[Interaction] = []
        for snap in self.snapshots:
            out.extend(snap)
        return out


def load_interactions(path, fmt="csv") -> Dataset:
    """Load an interaction CSV into a Dataset (sorted by timestamp).

    Raises MalformedRow (with 1-based line number) on short rows or
    non-integer timestamps, EmptyFile when only a header is present.
    """
    if fmt != "csv":
        raise ValueError(f"unsupported format: {fmt!r}")
    interactions = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(str(path))
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 3:
                raise MalformedRow(lineno, "expected group_id,item_id,timestamp[,weight]")
            group_id, item_id = row[0].strip(), row[1].strip()
            if not group_id or not item_id:
                raise MalformedRow(lineno, "empty group_id or item_id")
            try:
                timestamp = int(row[2])
            except ValueError:
                raise MalformedRow(lineno, f"non-integer timestamp {row[2]!r}") from None
            if timestamp < 0:
                raise MalformedRow(lineno, "negative timestamp")
            weight = 1.0
            if len(row) >= 4 and row[3].strip():
                try:
                    weight = float(row[3])
                except ValueError:
                    raise MalformedRow(lineno, f"non-numeric weight {row[3]!r}") from None
                if weight < 0:
                    raise MalformedRow(lineno, "negative weight")
            interactions.append(Interaction(group_id, item_id, timestamp, weight))
    if not interactions:
        raise EmptyFile(str(path))
    interactions.sort(key=lambda it: it.timestamp)
    return Dataset(interactions=interactions)


def load_memberships(path, dataset: Dataset | None = None) -> Dataset:
    """Load a ``group_id,user_id`` CSV into ``dataset.group_members``."""
    ds = dataset if dataset is not None else Dataset()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(str(path))
        count = 0
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise MalformedRow(lineno, "expected group_id,user_id")
            group_id, user_id = row[0].strip(), row[1].strip()
            if not group_id or not user_id:
                raise MalformedRow(lineno, "empty group_id or user_id")
            ds.group_members.setdefault(group_id, set()).add(user_id)
            count += 1
    if count == 0:
        raise EmptyFile(str(path))
    return ds


def load_tags(path, kind, dataset: Dataset | None = None) -> Dataset:
    """Load an ``entity_id,tag`` CSV into item or group tags.

    ``kind`` is ``"item"`` or ``"group"``; the file itself does not say
    which entity space it describes.
    """
    if kind not in ("item", "group"):
        raise ValueError(f"kind must be 'item' or 'group', got {kind!r}")
    ds = dataset if dataset is not None else Dataset()
    target = ds.item_tags if kind == "item" else ds.group_tags
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(str(path))
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) < 2:
                raise MalformedRow(lineno, "expected entity_id,tag")
            entity, tag = row[0].strip(), row[1].strip()
            if not entity or not tag:
                raise MalformedRow(lineno, "empty entity_id or tag")
            target.setdefault(entity, []).append(tag)
    return ds


def build_group_graph(dataset: Dataset, min_shared_users: int = 1) -> GroupGraph:
    """Connect two groups iff they share at least ``min_shared_users``
    members; the edge weight is the shared-member count.

    Groups that only appear in the interaction log (no membership row) become
    isolated nodes. An empty graph is legal.
    """
    if min_shared_users < 1:
        raise ValueError("min_shared_users must be >= 1")
    graph = GroupGraph()
    graph.nodes.update(dataset.groups())
    for g in graph.nodes:
        graph.adjacency.setdefault(g, set())
    # Invert membership so only groups sharing a user get compared.
    by_user: dict[str, list[str]] = {}
    for g, members in dataset.group_members.items():
        for u in members:
            by_user.setdefault(u, []).append(g)
    candidate_pairs = set()
    for groups in by_user.values():
        groups = sorted(groups)
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                candidate_pairs.add((groups[i], groups[j]))
    for a, b in sorted(candidate_pairs):
        shared = len(dataset.group_members[a] & dataset.group_members[b])
        if shared >= min_shared_users:
            graph.add_edge(a, b, float(shared))
    return graph


def split_temporal(dataset, train_fraction: float, num_snapshots: int) -> TemporalSplit:
    """Cut the chronological log into a training prefix and a test suffix,
    then partition training into ``num_snapshots`` contiguous subsets.

    Accepts a Dataset or a plain interaction sequence. The training prefix
    holds the earliest floor(train_fraction * n) events (equivalently, the
    most recent ceil((1 - train_fraction) * n) are held out). Each snapshot
    gets train_count // num_snapshots events; the last absorbs the
    remainder.
    """
    if not (0 < train_fraction <= 1):
        raise ValueError("train_fraction must be in (0, 1]")
    if num_snapshots < 1:
        raise ValueError("num_snapshots must be >= 1")
    events = dataset.interactions if hasattr(dataset, "interactions") else list(dataset)
    n = len(events)
    test_count = int(np.ceil((1.0 - train_fraction) * n - 1e-9))
    train_count = n - test_count
    if train_count < num_snapshots:
        raise InsufficientData(
            f"{train_count} training interactions cannot fill {num_snapshots} snapshots"
        )
    train = events[:train_count]
    base = train_count // num_snapshots
    snapshots = []
    for t in range(num_snapshots):
        lo = t * base
        hi = (t + 1) * base if t < num_snapshots - 1 else train_count
        snapshots.append(list(train[lo:hi]))
    return TemporalSplit(
        snapshots=snapshots,
        test_set=list(events[train_count:]),
        train_fraction=train_fraction,
    )


def _tag_unit_vector(tag: str, dim: int, seed: int) -> np.ndarray:
    # Stable across runs and platforms: the tag digest seeds a PCG64 stream.
    digest = hashlib.blake2b(
        tag.encode("utf-8"), digest_size=8, key=str(seed).encode("utf-8")
    ).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    vec = rng.standard_normal(dim)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        vec[0] = 1.0
        norm = 1.0
    return vec / norm


def featurize_tags(tags, dim: int, seed: int) -> np.ndarray:
    """Mean of per-tag hashed unit vectors; the empty list maps to zero.

    Deterministic in (tags, dim, seed). Repeated tags contribute repeatedly,
    so the mean of k copies of one tag equals that tag's vector.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    out = np.zeros(dim, dtype=np.float64)
    if not tags:
        return out
    for tag in tags:
        out += _tag_unit_vector(tag, dim, seed)
    out /= len(tags)
    return out


def dataset_stats(dataset: Dataset) -> dict:
    """Corpus counts for the ``stats`` subcommand."""
    users = set()
    for members in dataset.group_members.values():
        users.update(members)
    items = {it.item_id for it in dataset.interactions}
    items.update(dataset.item_tags)
    groups = set(dataset.groups())
    timestamps = [it.timestamp for it in dataset.interactions]
    return {
        "num_users": len(users),
        "num_items": len(items),
        "num_groups": len(groups),
        "num_interactions": len(dataset.interactions),
        "first_timestamp": min(timestamps) if timestamps else None,
        "last_timestamp": max(timestamps) if timestamps else None,
    }


def synthetic_dataset(
    num_groups: int,
    num_items: int,
    num_users: int,
    num_interactions: int,
    seed: int,
    members_per_group: int = 4,
    num_tags: int = 12,
    num_communities: int = 0,
) -> Dataset:
    """Generate a desk-scale corpus with community structure.

    Groups are assigned to communities; members are drawn mostly from the
    community's user pool (so the group graph has dense intra-community
    connectivity) and interactions prefer a community-specific item block
    (so preferences are learnable).
    """
    if num_communities <= 0:
        num_communities = max(1, num_groups // 10)
    rng = np.random.default_rng(seed)
    groups = [f"g{i:04d}" for i in range(num_groups)]
    items = [f"v{i:04d}" for i in range(num_items)]
    users = [f"u{i:04d}" for i in range(num_users)]
    tags = [f"tag{i}" for i in range(num_tags)]

    community_of = rng.integers(0, num_communities, size=num_groups)
    users_per_comm = max(members_per_group + 1, num_users // num_communities)

    ds = Dataset()
    for gi, g in enumerate(groups):
        comm = int(community_of[gi])
        lo = (comm * users_per_comm) % num_users
        pool = [users[(lo + k) % num_users] for k in range(users_per_comm)]
        size = members_per_group + int(rng.integers(0, 3))
        chosen = rng.choice(len(pool), size=min(size, len(pool)), replace=False)
        ds.group_members[g] = {pool[int(c)] for c in chosen}
        ds.group_tags[g] = [tags[comm % num_tags], tags[int(rng.integers(0, num_tags))]]

    for vi, v in enumerate(items):
        ds.item_tags[v] = [tags[vi % num_tags], tags[int(rng.integers(0, num_tags))]]

    block = max(1, num_items // num_communities)
    ts = 1_000_000
    for _ in range(num_interactions):
        gi = int(rng.integers(0, num_groups))
        comm = int(community_of[gi])
        if rng.random() < 0.8:
            vi = (comm * block + int(rng.integers(0, block))) % num_items
        else:
            vi = int(rng.integers(0, num_items))
        ts += int(rng.integers(1, 20))
        ds.interactions.append(Interaction(groups[gi], items[vi], ts))
    ds.interactions.sort(key=lambda it: it.timestamp)
    return ds
