"""Interaction corpus: ingestion, leave-one-out splitting, batching, sampling, augmentation.

Item ids are dense and start at 1; id 0 is the padding token and id
``catalog_size + 1`` is reserved for the augmentation mask token.
All randomness flows through splittable per-(seed, purpose, index) streams,
so any sampler is a pure function of its inputs and seed.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD_ID = 0

# Purpose tags keeping derived seed streams disjoint.
TAG_SHUFFLE = 1
TAG_TRAIN_NEG = 2
TAG_EVAL_NEG = 3
TAG_AUG_MASK = 4
TAG_AUG_REORDER = 5
TAG_TWO_POS = 6
TAG_DROPOUT = 7

FORMATS = ("tsv-triples", "sequence-lines")


def stream(seed: int, *key: int) -> np.random.Generator:
    """Independent RNG stream addressed by (seed, *key); same address, same stream."""
    parts = [int(seed)] + [int(k) for k in key]
    if any(p < 0 for p in parts):
        raise ValueError(f"seed-stream key must be non-negative, got {parts}")
    return np.random.default_rng(parts)


def derive_seed(seed: int, *key: int) -> int:
    """Collapse a stream address into a single integer seed (for torch generators)."""
    return int(np.random.SeedSequence([int(seed)] + [int(k) for k in key]).generate_state(1)[0])


@dataclass(frozen=True)
class UserSequence:
    """One user's chronologically ordered item ids."""

    user: int
    items: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.items)


@dataclass
class InteractionLog:
    """Densely remapped interaction records plus the raw-id mapping tables.

    records hold dense ids (user, item, timestamp); raw ids are recoverable
    through the injective user_map / item_map.
    """

    records: list[tuple[int, int, int]]
    user_map: dict[str, int]
    item_map: dict[str, int]

    @property
    def n_users(self) -> int:
        return len(self.user_map)

    @property
    def n_items(self) -> int:
        return len(self.item_map)

    @property
    def n_actions(self) -> int:
        return len(self.records)


@dataclass
class SequenceBatch:
    """Left-padded next-item training batch.

    inputs[b][t] predicts targets[b][t]; valid_mask marks positions with a
    real (non-padding) target.
    """

    inputs: np.ndarray  # [B, L] int64
    targets: np.ndarray  # [B, L] int64
    valid_mask: np.ndarray  # [B, L] bool
    users: list[int]

    def __post_init__(self) -> None:
        if not (self.inputs.shape == self.targets.shape == self.valid_mask.shape):
            raise ValueError("batch arrays must share one [B, L] shape")


def _parse_tsv_triples(path: Path) -> list[tuple[str, str, int]]:
    raw = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}: line {lineno}: expected user<TAB>item<TAB>timestamp")
            user, item, ts = parts
            try:
                raw.append((user, item, int(ts)))
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: timestamp {ts!r} is not an integer") from None
    return raw


def _parse_sequence_lines(path: Path) -> list[tuple[str, str, int]]:
    # Pre-sorted per-user lines; position in line stands in for the timestamp.
    raw = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 2:
                raise ValueError(f"{path}: line {lineno}: expected `user item1 item2 ...`")
            user = parts[0]
            for pos, item in enumerate(parts[1:]):
                raw.append((user, item, pos))
    return raw


def ingest(path: str | Path, format: str = "tsv-triples", min_interactions: int = 5) -> InteractionLog:
    """Read raw interactions, drop light users once, and remap ids densely.

    Users keep dense ids in [0, n_users); items in [1, n_items] (0 is padding).
    The min_interactions filter is a single pass over users, not iterative k-core.
    """
    path = Path(path)
    if format not in FORMATS:
        raise ValueError(f"unknown format {format!r}; expected one of {FORMATS}")
    if not path.exists():
        raise FileNotFoundError(path)
    raw = _parse_tsv_triples(path) if format == "tsv-triples" else _parse_sequence_lines(path)

    counts: dict[str, int] = {}
    for user, _, _ in raw:
        counts[user] = counts.get(user, 0) + 1
    kept = [r for r in raw if counts[r[0]] >= min_interactions]
    if not kept:
        raise ValueError(f"{path}: no users with >= {min_interactions} interactions")

    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    records: list[tuple[int, int, int]] = []
    for user, item, ts in kept:
        if user not in user_map:
            user_map[user] = len(user_map)
        if item not in item_map:
            item_map[item] = len(item_map) + 1
        records.append((user_map[user], item_map[item], ts))
    return InteractionLog(records=records, user_map=user_map, item_map=item_map)


def user_sequences(log: InteractionLog) -> list[UserSequence]:
    """Per-user chronological sequences; timestamp ties keep input-file order."""
    per_user: dict[int, list[tuple[int, int, int]]] = {}
    for order, (user, item, ts) in enumerate(log.records):
        per_user.setdefault(user, []).append((ts, order, item))
    out = []
    for user in sorted(per_user):
        rows = sorted(per_user[user])  # (ts, file order) is a stable chronological key
        out.append(UserSequence(user=user, items=tuple(item for _, _, item in rows)))
    return out


def split(log: InteractionLog) -> tuple[list[UserSequence], list[tuple[UserSequence, int]]]:
    """Leave-one-out: the last item of each sequence is the test target."""
    train_sequences: list[UserSequence] = []
    test_pairs: list[tuple[UserSequence, int]] = []
    skipped = 0
    for seq in user_sequences(log):
        if len(seq) < 2:
            skipped += 1
            continue
        train = UserSequence(user=seq.user, items=seq.items[:-1])
        train_sequences.append(train)
        test_pairs.append((train, seq.items[-1]))
    if skipped:
        logger.warning("split: excluded %d users with a single interaction", skipped)
    return train_sequences, test_pairs


def dataset_manifest(log: InteractionLog) -> dict:
    n_u, n_i, n_a = log.n_users, log.n_items, log.n_actions
    return {
        "n_users": n_u,
        "n_items": n_i,
        "n_actions": n_a,
        "avg_actions_per_user": n_a / n_u,
        "density": n_a / (n_u * n_i),
    }


def write_manifest(log: InteractionLog, path: str | Path) -> None:
    Path(path).write_text(json.dumps(dataset_manifest(log), indent=2) + "\n")


def pack_window(items: Sequence[int], max_seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Left-padded (inputs, targets) for one sequence: inputs[t] predicts targets[t].

    Keeps the most recent max_seq_len + 1 items so the final input position
    always holds the latest item with a known target.
    """
    L = max_seq_len
    window = list(items[-(L + 1):])
    inputs = np.zeros(L, dtype=np.int64)
    targets = np.zeros(L, dtype=np.int64)
    n = len(window) - 1
    if n > 0:
        inputs[L - n:] = window[:-1]
        targets[L - n:] = window[1:]
    return inputs, targets


def make_batches(
    sequences: Sequence[UserSequence],
    batch_size: int,
    max_seq_len: int,
    seed: int,
) -> Iterator[SequenceBatch]:
    """Shuffled batches covering every sequence exactly once.

    A trailing single-sequence remainder is merged into the previous batch so
    every emitted batch has >= 2 rows (the batch-level DR loss needs that).
    """
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    order = stream(seed, TAG_SHUFFLE).permutation(len(sequences))
    bounds = list(range(0, len(sequences), batch_size)) + [len(sequences)]
    chunks = [order[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
    if len(chunks) >= 2 and len(chunks[-1]) == 1:
        chunks[-2] = np.concatenate([chunks[-2], chunks[-1]])
        chunks.pop()
    for chunk in chunks:
        rows = [sequences[i] for i in chunk]
        inputs = np.zeros((len(rows), max_seq_len), dtype=np.int64)
        targets = np.zeros((len(rows), max_seq_len), dtype=np.int64)
        for r, seq in enumerate(rows):
            inputs[r], targets[r] = pack_window(seq.items, max_seq_len)
        yield SequenceBatch(
            inputs=inputs,
            targets=targets,
            valid_mask=targets != PAD_ID,
            users=[seq.user for seq in rows],
        )


def sample_train_negatives(
    batch: SequenceBatch, n_neg: int, catalog_size: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform negatives in [1, catalog_size], resampled only on positive collisions.

    History items may appear as negatives; padded positions get placeholder
    draws that downstream losses mask out.
    """
    if n_neg < 1:
        raise ValueError("n_neg must be >= 1")
    if catalog_size < 2:
        raise ValueError("catalog_size must be >= 2 to sample a non-positive item")
    pos = batch.targets[..., None]
    neg = rng.integers(1, catalog_size + 1, size=(*batch.targets.shape, n_neg))
    collide = neg == pos
    while collide.any():
        neg[collide] = rng.integers(1, catalog_size + 1, size=int(collide.sum()))
        collide = neg == pos
    return neg


def sample_eval_negatives(
    user: UserSequence | int,
    held_out: int,
    count: int,
    catalog_size: int,
    seed: int,
    exclude_history: Sequence[int] = (),
) -> np.ndarray:
    """`count` distinct negatives for one user, uniform over the catalog minus the target.

    The stream is derived from (seed, user id) so evaluation order never
    changes the draw. History items are included unless explicitly excluded.
    """
    user_id = user.user if isinstance(user, UserSequence) else int(user)
    rng = stream(seed, TAG_EVAL_NEG, user_id)
    if exclude_history:
        pool = np.setdiff1d(np.arange(1, catalog_size + 1), np.append(exclude_history, held_out))
        if count > pool.size:
            raise ValueError(f"cannot draw {count} negatives from a pool of {pool.size}")
        return rng.choice(pool, size=count, replace=False)
    if count > catalog_size - 1:
        raise ValueError(f"cannot draw {count} distinct negatives from {catalog_size - 1} candidates")
    idx = rng.choice(catalog_size - 1, size=count, replace=False)
    ids = idx + 1
    ids[ids >= held_out] += 1
    return ids


def augment_mask(seq: UserSequence, ratio: float, rng: np.random.Generator, mask_id: int) -> UserSequence:
    """Replace floor(ratio * len) uniformly chosen positions by the mask token."""
    if not 0 <= ratio < 1:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    n = len(seq)
    k = int(ratio * n)
    if k == 0:
        return seq
    items = list(seq.items)
    for p in rng.choice(n, size=k, replace=False):
        items[p] = mask_id
    return UserSequence(user=seq.user, items=tuple(items))


def augment_reorder(seq: UserSequence, ratio: float, rng: np.random.Generator) -> UserSequence:
    """Uniformly permute one contiguous span of length floor(ratio * len)."""
    if not 0 <= ratio < 1:
        raise ValueError(f"reorder ratio must be in [0, 1), got {ratio}")
    n = len(seq)
    k = int(ratio * n)
    if k < 2:
        return seq
    start = int(rng.integers(0, n - k + 1))
    items = list(seq.items)
    span = items[start:start + k]
    perm = rng.permutation(k)
    items[start:start + k] = [span[i] for i in perm]
    return UserSequence(user=seq.user, items=tuple(items))


def sample_two_positives(seq: UserSequence, rng: np.random.Generator) -> tuple[int, int]:
    """Two items drawn without replacement over positions of one user history."""
    if len(seq) < 2:
        raise ValueError("two-positive sampling needs a sequence of length >= 2")
    i, j = rng.choice(len(seq), size=2, replace=False)
    return seq.items[int(i)], seq.items[int(j)]


def augment_batch_inputs(
    batch: SequenceBatch,
    kind: str,
    ratio: float,
    rng: np.random.Generator,
    mask_id: int,
) -> np.ndarray:
    """One augmented copy of batch.inputs; targets stay untouched (label-invariant)."""
    if kind not in ("mask", "reorder"):
        raise ValueError(f"augmentation kind must be mask|reorder, got {kind!r}")
    out = batch.inputs.copy()
    for r in range(out.shape[0]):
        valid = np.nonzero(out[r] != PAD_ID)[0]
        if valid.size == 0:
            continue
        row = UserSequence(user=batch.users[r], items=tuple(int(v) for v in out[r, valid]))
        if kind == "mask":
            row = augment_mask(row, ratio, rng, mask_id)
        else:
            row = augment_reorder(row, ratio, rng)
        out[r, valid] = row.items
    return out
