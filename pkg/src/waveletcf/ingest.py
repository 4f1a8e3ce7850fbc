"""Loading, filtering, splitting, and persisting implicit-feedback data.

Raw logs are delimiter-separated text with columns user, item, and
optionally rating and timestamp. Ratings are only carried through parsing;
everything downstream is binarized interactions on a user-item bipartite
graph with contiguous integer indices.
"""

import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError

CANONICAL_MAGIC = "wavelet-cf-dataset"
CANONICAL_VERSION = "v1"


@dataclass(frozen=True)
class RawInteraction:
    """One parsed log row. `weight` is discarded after binarization."""

    user_id: str
    item_id: str
    weight: Optional[float] = None
    timestamp: Optional[int] = None


@dataclass(frozen=True)
class SplitSpec:
    """Per-user train/test split parameters.

    `per_user_cap` further down-samples each user's training items to at
    most the cap (cold-start protocol); capped-out pairs are discarded.
    """

    train_fraction: float = 0.8
    seed: int = 0
    per_user_cap: Optional[int] = None

    def __post_init__(self):
        if not (0.0 < self.train_fraction < 1.0):
            raise DataError(
                f"train_fraction must lie strictly in (0,1), got {self.train_fraction}"
            )
        if self.per_user_cap is not None and self.per_user_cap < 1:
            raise DataError(f"per_user_cap must be >= 1, got {self.per_user_cap}")


@dataclass(eq=False)
class InteractionSet:
    """Binarized interaction matrix plus its id <-> index maps.

    `pairs` is an (nnz, 2) int64 array of (user, item) indices, sorted
    lexicographically and free of duplicates. `user_ids[u]` / `item_ids[i]`
    recover the external identifiers.
    """

    num_users: int
    num_items: int
    pairs: np.ndarray
    user_ids: tuple
    item_ids: tuple

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        order = np.lexsort((pairs[:, 1], pairs[:, 0]))
        pairs = pairs[order]
        pairs.setflags(write=False)
        self.pairs = pairs

    @property
    def num_pairs(self) -> int:
        return int(self.pairs.shape[0])

    @property
    def user_index(self) -> dict:
        return {uid: u for u, uid in enumerate(self.user_ids)}

    @property
    def item_index(self) -> dict:
        return {iid: i for i, iid in enumerate(self.item_ids)}

    def user_degrees(self) -> np.ndarray:
        return np.bincount(self.pairs[:, 0], minlength=self.num_users)

    def item_degrees(self) -> np.ndarray:
        return np.bincount(self.pairs[:, 1], minlength=self.num_items)

    def items_by_user(self) -> list:
        """Item index array per user, ascending, empty where a user has none."""
        out = [np.empty(0, dtype=np.int64)] * self.num_users
        if self.num_pairs == 0:
            return out
        users = self.pairs[:, 0]
        starts = np.searchsorted(users, np.arange(self.num_users))
        ends = np.searchsorted(users, np.arange(self.num_users), side="right")
        for u in range(self.num_users):
            out[u] = self.pairs[starts[u]:ends[u], 1].copy()
        return out

    def validate(self, require_coverage: bool = True) -> None:
        """Check index-range and duplicate invariants.

        `require_coverage` additionally demands that every user and item
        index occurs in at least one pair; split subsets share the parent
        maps and are validated without it.
        """
        if self.num_users < 1 or self.num_items < 1:
            raise DataError("dataset fully filtered")
        if len(self.user_ids) != self.num_users or len(self.item_ids) != self.num_items:
            raise DataError("id map sizes disagree with declared dimensions")
        if self.num_pairs:
            if self.pairs[:, 0].min() < 0 or self.pairs[:, 0].max() >= self.num_users:
                raise DataError("user index out of range")
            if self.pairs[:, 1].min() < 0 or self.pairs[:, 1].max() >= self.num_items:
                raise DataError("item index out of range")
            dup = np.all(self.pairs[1:] == self.pairs[:-1], axis=1)
            if dup.any():
                raise DataError("duplicate (user, item) pairs")
        if require_coverage:
            if self.num_pairs == 0:
                raise DataError("dataset fully filtered")
            if (self.user_degrees() == 0).any() or (self.item_degrees() == 0).any():
                raise DataError("orphan user or item index after filtering")

    def __eq__(self, other):
        if not isinstance(other, InteractionSet):
            return NotImplemented
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and np.array_equal(self.pairs, other.pairs)
            and tuple(self.user_ids) == tuple(other.user_ids)
            and tuple(self.item_ids) == tuple(other.item_ids)
        )


def _detect_delimiter(line: str) -> str:
    return "\t" if "\t" in line else ","


def load_interactions(path, fmt: str = "auto") -> list:
    """Parse a delimiter-separated interaction log.

    fmt is "auto" (per-file detection on the first data line), "tsv", or
    "csv". Lines starting with '#' are skipped. Each data row needs
    user and item columns; a third column is parsed as a float rating and a
    fourth as an integer timestamp.
    """
    if fmt not in ("auto", "tsv", "csv"):
        raise DataError(f"unknown format descriptor: {fmt!r}")
    delim = {"tsv": "\t", "csv": ","}.get(fmt)
    rows = []
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if delim is None:
                delim = _detect_delimiter(line)
            cols = line.split(delim)
            if len(cols) < 2:
                raise DataError(f"{path}: line {lineno}: expected at least 2 columns")
            user_id, item_id = cols[0].strip(), cols[1].strip()
            if not user_id or not item_id:
                raise DataError(f"{path}: line {lineno}: empty user or item id")
            weight = None
            timestamp = None
            if len(cols) >= 3 and cols[2].strip():
                try:
                    weight = float(cols[2])
                except ValueError:
                    raise DataError(
                        f"{path}: line {lineno}: unparseable rating {cols[2]!r}"
                    ) from None
            if len(cols) >= 4 and cols[3].strip():
                try:
                    timestamp = int(cols[3])
                except ValueError:
                    raise DataError(
                        f"{path}: line {lineno}: unparseable timestamp {cols[3]!r}"
                    ) from None
            rows.append(RawInteraction(user_id, item_id, weight, timestamp))
    return rows


def filter_by_activity(raw, min_user: int, min_item: int) -> InteractionSet:
    """Binarize and iteratively drop low-activity users/items to a fixed point.

    Users with fewer than `min_user` distinct items and items with fewer
    than `min_item` distinct users are removed; removals can cascade, so
    the two thresholds are re-applied until nothing changes. Surviving
    users/items get contiguous indices in first-appearance order.
    """
    if min_user < 1 or min_item < 1:
        raise DataError("activity thresholds must be >= 1")
    seen = set()
    unique = []
    for r in raw:
        key = (r.user_id, r.item_id)
        if key not in seen:
            seen.add(key)
            unique.append(key)

    user_items = {}
    item_users = {}
    for uid, iid in unique:
        user_items.setdefault(uid, set()).add(iid)
        item_users.setdefault(iid, set()).add(uid)

    changed = True
    while changed:
        changed = False
        dead_users = [u for u, its in user_items.items() if len(its) < min_user]
        for u in dead_users:
            for i in user_items.pop(u):
                item_users[i].discard(u)
            changed = True
        dead_items = [i for i, us in item_users.items() if len(us) < min_item]
        for i in dead_items:
            for u in item_users.pop(i):
                user_items[u].discard(i)
            changed = True

    if not user_items or not item_users:
        raise DataError("dataset fully filtered")

    user_ids, item_ids = [], []
    user_idx, item_idx = {}, {}
    pairs = []
    for uid, iid in unique:
        if uid not in user_items or iid not in item_users:
            continue
        if uid not in user_idx:
            user_idx[uid] = len(user_ids)
            user_ids.append(uid)
        if iid not in item_idx:
            item_idx[iid] = len(item_ids)
            item_ids.append(iid)
        pairs.append((user_idx[uid], item_idx[iid]))

    out = InteractionSet(
        num_users=len(user_ids),
        num_items=len(item_ids),
        pairs=np.array(pairs, dtype=np.int64),
        user_ids=tuple(user_ids),
        item_ids=tuple(item_ids),
    )
    out.validate(require_coverage=True)
    return out


def split(data: InteractionSet, spec: SplitSpec):
    """Partition interactions per user into train and test.

    Each user's items are randomly permuted under `spec.seed`; the first
    max(1, floor(n * train_fraction)) go to train, the rest to test. A user
    with a single interaction trains on it and contributes no test items.
    With `per_user_cap` set, each user's training items are further
    down-sampled to the cap and the capped-out pairs are discarded.

    Items that would end up with no training interaction are repaired by
    promoting one of their held-out pairs back into train (smallest user
    index first), so the training graph never has zero-degree nodes.
    """
    rng = np.random.default_rng(spec.seed)
    per_user = data.items_by_user()
    train_items = [None] * data.num_users
    test_items = [None] * data.num_users
    discarded = {}
    for u in range(data.num_users):
        items = per_user[u]
        n = len(items)
        if n == 0:
            train_items[u] = items
            test_items[u] = items
            continue
        perm = rng.permutation(n)
        n_train = max(1, int(math.floor(n * spec.train_fraction)))
        tr = items[perm[:n_train]]
        te = items[perm[n_train:]]
        if spec.per_user_cap is not None and len(tr) > spec.per_user_cap:
            for i in tr[spec.per_user_cap:]:
                discarded.setdefault(int(i), []).append(u)
            tr = tr[: spec.per_user_cap]
        train_items[u] = np.sort(tr)
        test_items[u] = np.sort(te)

    covered = np.zeros(data.num_items, dtype=bool)
    for t in train_items:
        covered[t] = True
    for i in np.flatnonzero(~covered):
        i = int(i)
        holders = sorted(discarded.get(i, []))
        if not holders:
            holders = sorted(
                u for u in range(data.num_users) if i in set(map(int, test_items[u]))
            )
        if not holders:
            continue  # item absent from this dataset altogether
        u = holders[0]
        train_items[u] = np.sort(np.append(train_items[u], i))
        mask = test_items[u] != i
        if mask.size and not mask.all():
            test_items[u] = test_items[u][mask]

    def assemble(item_lists):
        rows = []
        for u, its in enumerate(item_lists):
            for i in its:
                rows.append((u, int(i)))
        return InteractionSet(
            num_users=data.num_users,
            num_items=data.num_items,
            pairs=np.array(rows, dtype=np.int64).reshape(-1, 2),
            user_ids=data.user_ids,
            item_ids=data.item_ids,
        )

    train = assemble(train_items)
    test = assemble(test_items)
    train.validate(require_coverage=False)
    test.validate(require_coverage=False)
    return train, test


def _serialize(data: InteractionSet, seed: int) -> bytes:
    for ids, kind in ((data.user_ids, "user"), (data.item_ids, "item")):
        for ident in ids:
            if "\n" in ident or "\t" in ident:
                raise DataError(f"{kind} id {ident!r} contains a tab or newline")
    buf = io.StringIO()
    buf.write(
        f"{CANONICAL_MAGIC} {CANONICAL_VERSION} {data.num_users} "
        f"{data.num_items} {data.num_pairs} {seed}\n"
    )
    for u, i in data.pairs:
        buf.write(f"{u}\t{i}\n")
    buf.write("#users\n")
    for uid in data.user_ids:
        buf.write(uid + "\n")
    buf.write("#items\n")
    for iid in data.item_ids:
        buf.write(iid + "\n")
    return buf.getvalue().encode("utf-8")


def dataset_hash(data: InteractionSet) -> str:
    """Content hash of a dataset, independent of any split seed."""
    return hashlib.sha256(_serialize(data, seed=0)).hexdigest()


def persist(data: InteractionSet, path, seed: int = 0) -> None:
    """Write the canonical dataset format (see README for the layout)."""
    payload = _serialize(data, seed)
    with open(path, "wb") as fh:
        fh.write(payload)


def load_canonical(path) -> InteractionSet:
    """Read a canonical dataset file; exact inverse of `persist`."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    lines = text.split("\n")
    if not lines or not lines[0]:
        raise DataError(f"{path}: empty file")
    head = lines[0].split(" ")
    if len(head) != 6 or head[0] != CANONICAL_MAGIC:
        raise DataError(f"{path}: not a canonical dataset file")
    if head[1] != CANONICAL_VERSION:
        raise DataError(
            f"{path}: version mismatch: file has {head[1]!r}, "
            f"expected {CANONICAL_VERSION!r}"
        )
    try:
        m, k, nnz, _seed = (int(x) for x in head[2:])
    except ValueError:
        raise DataError(f"{path}: malformed header counts") from None
    if m < 1 or k < 1 or nnz < 1:
        raise DataError("dataset fully filtered")
    expected = 1 + nnz + 1 + m + 1 + k
    body = lines[1:]
    if len(body) < expected - 1 or (len(body) >= expected and body[expected - 1] != ""):
        raise DataError(f"{path}: truncated or trailing content")
    pairs = np.empty((nnz, 2), dtype=np.int64)
    for r in range(nnz):
        cols = body[r].split("\t")
        if len(cols) != 2:
            raise DataError(f"{path}: line {r + 2}: malformed pair")
        pairs[r, 0] = int(cols[0])
        pairs[r, 1] = int(cols[1])
    if body[nnz] != "#users":
        raise DataError(f"{path}: missing #users section")
    user_ids = tuple(body[nnz + 1: nnz + 1 + m])
    if body[nnz + 1 + m] != "#items":
        raise DataError(f"{path}: missing #items section")
    item_ids = tuple(body[nnz + 2 + m: nnz + 2 + m + k])
    out = InteractionSet(
        num_users=m, num_items=k, pairs=pairs, user_ids=user_ids, item_ids=item_ids
    )
    out.validate(require_coverage=True)
    return out


def canonical_header(path) -> dict:
    """Header fields of a canonical dataset file without loading the body."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            head = fh.readline().rstrip("\n").split(" ")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if len(head) != 6 or head[0] != CANONICAL_MAGIC:
        raise DataError(f"{path}: not a canonical dataset file")
    return {
        "version": head[1],
        "num_users": int(head[2]),
        "num_items": int(head[3]),
        "num_pairs": int(head[4]),
        "seed": int(head[5]),
    }
