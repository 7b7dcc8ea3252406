"""Leave-one-out ranking evaluation: HR@k and NDCG@k over sampled negatives.

Ranking is pessimistic about ties (the target loses them), NDCG uses binary
relevance with an ideal DCG of 1, and per-user negative draws derive from
(seed, user id) so the report never depends on evaluation order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import UserSequence, pack_window, sample_eval_negatives
from .encoder import SequenceEncoder, score

TIE_RULE = "pessimistic"  # equal scores count against the target


@dataclass
class EvalProtocol:
    negatives: int = 500
    seed: int = 0
    ks: tuple[int, ...] = (1, 5, 10, 20)
    exclude_history: bool = False


@dataclass
class EvalReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    negatives: int
    seed: int
    tie_rule: str = TIE_RULE

    def __post_init__(self) -> None:
        for k in self.hr:
            if not 0.0 <= self.ndcg[k] <= self.hr[k] <= 1.0:
                raise ValueError(f"metric bounds violated at k={k}: ndcg={self.ndcg[k]}, hr={self.hr[k]}")

    def as_dict(self) -> dict:
        return {
            "hr": {str(k): v for k, v in self.hr.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "n_users": self.n_users,
            "negatives": self.negatives,
            "seed": self.seed,
            "tie_rule": self.tie_rule,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        ks = sorted(self.hr)
        head = "metric  " + "".join(f"@{k:<8}" for k in ks)
        hr_row = "HR      " + "".join(f"{self.hr[k]:<9.4f}" for k in ks)
        nd_row = "NDCG    " + "".join(f"{self.ndcg[k]:<9.4f}" for k in ks)
        tail = f"users={self.n_users} negatives={self.negatives} seed={self.seed} ties={self.tie_rule}"
        return "\n".join([head, hr_row, nd_row, tail])


def rank_of_target(
    rep: torch.Tensor, target: int, negatives, model: SequenceEncoder
) -> int:
    """1-based rank of the target among {target} + negatives; ties rank below."""
    negatives = [int(n) for n in negatives]
    if int(target) in negatives:
        raise ValueError("target must not appear among the negatives")
    logits = score(rep, [int(target)] + negatives, model)
    return _rank_from_scores(float(logits[0]), logits[1:])


def _rank_from_scores(target_score: float, negative_scores: torch.Tensor) -> int:
    greater = int((negative_scores > target_score).sum())
    equal = int((negative_scores == target_score).sum())
    return 1 + greater + equal


def metrics_from_rank(rank: int, k: int) -> tuple[int, float]:
    """(hit, ndcg) for a single relevant item; ideal DCG is 1."""
    if rank < 1 or k < 1:
        raise ValueError("rank and k are 1-based")
    if rank > k:
        return 0, 0.0
    return 1, 1.0 / np.log2(rank + 1)


def evaluate(
    model: SequenceEncoder,
    test_pairs: list[tuple[UserSequence, int]],
    protocol: EvalProtocol,
    catalog_size: int,
    batch_rows: int = 256,
) -> EvalReport:
    """Rank each user's held-out item against sampled negatives in eval mode."""
    if not test_pairs:
        raise ValueError("empty test set")
    if protocol.negatives > catalog_size - 1:
        raise ValueError(
            f"{protocol.negatives} negatives requested but catalog holds {catalog_size - 1} candidates"
        )
    L = model.config.max_seq_len
    users = np.array([seq.user for seq, _ in test_pairs])
    per_user_rank = np.zeros(len(test_pairs), dtype=np.int64)

    with torch.no_grad():
        for start in range(0, len(test_pairs), batch_rows):
            chunk = test_pairs[start: start + batch_rows]
            inputs = np.zeros((len(chunk), L), dtype=np.int64)
            for r, (seq, _) in enumerate(chunk):
                inputs[r, L - min(len(seq), L):] = seq.items[-L:]
            reps = model(torch.from_numpy(inputs), dropout_seed=None)[:, -1, :]
            for r, (seq, held_out) in enumerate(chunk):
                negs = sample_eval_negatives(
                    seq, held_out, protocol.negatives, catalog_size, protocol.seed,
                    exclude_history=seq.items if protocol.exclude_history else (),
                )
                ids = torch.from_numpy(np.concatenate([[held_out], negs]))
                logits = reps[r] @ model.item_emb[ids].T
                per_user_rank[start + r] = _rank_from_scores(float(logits[0]), logits[1:])

    # Fixed per-user aggregation order keeps the report order-independent.
    order = np.argsort(users, kind="stable")
    ranks = per_user_rank[order]
    hr, ndcg = {}, {}
    for k in protocol.ks:
        hits = ranks <= k
        hr[k] = float(hits.mean())
        ndcg[k] = float(np.where(hits, 1.0 / np.log2(ranks + 1), 0.0).mean())
    return EvalReport(
        hr=hr, ndcg=ndcg, n_users=len(test_pairs),
        negatives=protocol.negatives, seed=protocol.seed,
    )
