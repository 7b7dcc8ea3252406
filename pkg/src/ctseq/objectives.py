"""Training objectives: sampled softmax, bidirectional-KL consistency, auxiliary regularizers.

The two consistency terms compare the outputs of two dropout-independent
forward passes: one in the output space (per-step item probabilities) and one
in the representation space (per-user softmax over similarities to the other
users in the batch). Everything is differentiable through both passes; there
is no stop-gradient anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .corpus import SequenceBatch
from .encoder import PassOutput, SequenceEncoder

LOG_EPS = 1e-12

AUX_MODES = ("none", "cosine", "l2", "rep_kl")
CONSISTENCY_SOURCES = ("dropout", "augmentation")
AUGMENTATION_KINDS = ("mask", "reorder")
DR_SIMILARITIES = ("cosine", "dot")


@dataclass
class LossWeights:
    """Weights and switches for the composite training objective."""

    alpha: float = 1.0  # output-space consistency (RD)
    beta: float = 1.0  # representation-space consistency (DR)
    dr_temperature: float = 0.2
    aux_mode: str = "none"
    aux_weight: float = 0.0
    two_pos_weight: float = 0.0
    contrastive_weight: float = 0.0
    contrastive_temperature: float = 1.0
    consistency_source: str = "dropout"
    augmentation_kind: str = "mask"
    augmentation_ratio: float = 0.3
    dr_similarity: str = "cosine"
    dr_all_positions: bool = False

    def __post_init__(self) -> None:
        import math

        for name in ("alpha", "beta", "aux_weight", "two_pos_weight", "contrastive_weight"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")
        for name in ("dr_temperature", "contrastive_temperature"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.aux_mode not in AUX_MODES:
            raise ValueError(f"aux_mode must be one of {AUX_MODES}, got {self.aux_mode!r}")
        if self.consistency_source not in CONSISTENCY_SOURCES:
            raise ValueError(f"consistency_source must be one of {CONSISTENCY_SOURCES}")
        if self.augmentation_kind not in AUGMENTATION_KINDS:
            raise ValueError(f"augmentation_kind must be one of {AUGMENTATION_KINDS}")
        if not 0 <= self.augmentation_ratio < 1:
            raise ValueError(f"augmentation_ratio must be in [0, 1), got {self.augmentation_ratio}")
        if self.dr_similarity not in DR_SIMILARITIES:
            raise ValueError(f"dr_similarity must be one of {DR_SIMILARITIES}")


@dataclass
class LossBreakdown:
    basic: float = 0.0
    rd: float = 0.0
    dr: float = 0.0
    aux: float = 0.0
    two_pos: float = 0.0
    contrastive: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict:
        return {
            "basic": self.basic,
            "rd": self.rd,
            "dr": self.dr,
            "aux": self.aux,
            "two_pos": self.two_pos,
            "contrastive": self.contrastive,
            "total": self.total,
        }


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp_min(LOG_EPS))


def bidirectional_kl(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """0.5 * [KL(p||q) + KL(q||p)] along the last axis, logs clamped at 1e-12."""
    if p.shape[-1] != q.shape[-1]:
        raise ValueError(f"length mismatch: {p.shape[-1]} vs {q.shape[-1]}")
    lp, lq = _clamped_log(p), _clamped_log(q)
    kl_pq = (p * (lp - lq)).sum(-1)
    kl_qp = (q * (lq - lp)).sum(-1)
    return 0.5 * (kl_pq + kl_qp)


def sampled_softmax_loss(
    rep: torch.Tensor, positive: int, negatives, model: SequenceEncoder
) -> torch.Tensor:
    """-log softmax probability of the positive among {positive} + negatives (Gibbs form)."""
    negatives = [int(n) for n in negatives]
    if int(positive) in negatives:
        raise ValueError("positive id must not appear among the negatives")
    ids = torch.as_tensor([int(positive)] + negatives, dtype=torch.long)
    logits = rep @ model.item_emb[ids].T
    return -F.log_softmax(logits, dim=-1)[0]


def _candidate_logits(
    reps: torch.Tensor, targets: torch.Tensor, negatives: torch.Tensor, model: SequenceEncoder
) -> torch.Tensor:
    """[B, L, 1 + n_neg] logits; column 0 is the positive."""
    pos_e = model.item_emb[targets]  # [B, L, d]
    neg_e = model.item_emb[negatives]  # [B, L, n, d]
    pos_logit = (reps * pos_e).sum(-1, keepdim=True)
    neg_logit = torch.einsum("bld,blnd->bln", reps, neg_e)
    return torch.cat([pos_logit, neg_logit], dim=-1)


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not mask.any():
        raise ValueError("batch has no valid prediction positions")
    return values[mask].mean()


def basic_loss_two_pass(
    pass1: PassOutput,
    pass2: PassOutput,
    targets: torch.Tensor,
    negatives: torch.Tensor,
    model: SequenceEncoder,
    valid_mask: torch.Tensor,
) -> torch.Tensor:
    """Mean sampled-softmax loss over valid positions, averaged across the two passes."""
    if pass1.representations.shape != pass2.representations.shape:
        raise ValueError("the two passes must come from the same batch")
    l1 = -F.log_softmax(_candidate_logits(pass1.representations, targets, negatives, model), -1)[..., 0]
    l2 = -F.log_softmax(_candidate_logits(pass2.representations, targets, negatives, model), -1)[..., 0]
    return 0.5 * (_masked_mean(l1, valid_mask) + _masked_mean(l2, valid_mask))


def basic_loss_single(
    pass1: PassOutput,
    targets: torch.Tensor,
    negatives: torch.Tensor,
    model: SequenceEncoder,
    valid_mask: torch.Tensor,
) -> torch.Tensor:
    """Single-pass sampled-softmax loss (the plain backbone objective)."""
    logits = _candidate_logits(pass1.representations, targets, negatives, model)
    return _masked_mean(-F.log_softmax(logits, -1)[..., 0], valid_mask)


def rd_loss(
    pass1: PassOutput,
    pass2: PassOutput,
    targets: torch.Tensor,
    negatives: torch.Tensor,
    model: SequenceEncoder,
    valid_mask: torch.Tensor,
) -> torch.Tensor:
    """Output-space consistency: bidirectional KL between the passes' candidate softmaxes.

    Both distributions live on the identical {positive} + negatives support.
    """
    p1 = torch.softmax(_candidate_logits(pass1.representations, targets, negatives, model), -1)
    p2 = torch.softmax(_candidate_logits(pass2.representations, targets, negatives, model), -1)
    return _masked_mean(bidirectional_kl(p1, p2), valid_mask)


def _pairwise_similarity(reps: torch.Tensor, mode: str) -> torch.Tensor:
    if mode == "cosine":
        norms = reps.norm(dim=-1, keepdim=True)
        unit = torch.where(norms > 0, reps / norms.clamp_min(LOG_EPS), torch.zeros_like(reps))
        return unit @ unit.T
    return reps @ reps.T


def dr_similarity_distribution(
    reps: torch.Tensor, index: int, temperature: float, mode: str = "cosine"
) -> torch.Tensor:
    """Softmax over sim(rep_index, rep_j) / temperature for all j != index."""
    n = reps.shape[0]
    if n < 2:
        raise ValueError("similarity distribution needs >= 2 representations")
    sims = _pairwise_similarity(reps, mode)[index]
    others = torch.cat([sims[:index], sims[index + 1:]])
    return torch.softmax(others / temperature, dim=-1)


def _dr_distributions(reps: torch.Tensor, temperature: float, mode: str) -> torch.Tensor:
    """All per-user similarity distributions at once: [n, n-1], self-terms dropped."""
    n = reps.shape[0]
    sims = _pairwise_similarity(reps, mode)
    off_diag = sims.masked_select(~torch.eye(n, dtype=torch.bool)).view(n, n - 1)
    return torch.softmax(off_diag / temperature, dim=-1)


def final_valid_representations(
    representations: torch.Tensor, valid_mask: torch.Tensor | None
) -> torch.Tensor:
    """Representation at each row's last valid position; rows with none are dropped."""
    if valid_mask is None:
        return representations[:, -1, :]
    mask_t = torch.as_tensor(valid_mask, dtype=torch.bool)
    keep = mask_t.any(dim=1)
    flipped = torch.flip(mask_t[keep], dims=[1])
    last = mask_t.shape[1] - 1 - flipped.to(torch.int64).argmax(dim=1)
    return representations[keep][torch.arange(int(keep.sum())), last]


def dr_loss(
    pass1: PassOutput,
    pass2: PassOutput,
    temperature: float,
    valid_mask: torch.Tensor | None = None,
    mode: str = "cosine",
    all_positions: bool = False,
) -> torch.Tensor:
    """Representation-space consistency over in-batch similarity distributions.

    By default each user is represented by the final valid position; the
    all_positions variant averages the same construction over every time step
    at which >= 2 batch rows are valid.
    """
    if all_positions and valid_mask is not None:
        mask_t = torch.as_tensor(valid_mask, dtype=torch.bool)
        terms = []
        for t in range(mask_t.shape[1]):
            rows = mask_t[:, t]
            if int(rows.sum()) < 2:
                continue
            p1 = _dr_distributions(pass1.representations[rows, t], temperature, mode)
            p2 = _dr_distributions(pass2.representations[rows, t], temperature, mode)
            terms.append(bidirectional_kl(p1, p2))
        if not terms:
            raise ValueError("no time step with >= 2 valid rows for the DR loss")
        return torch.cat(terms).mean()

    r1 = final_valid_representations(pass1.representations, valid_mask)
    r2 = final_valid_representations(pass2.representations, valid_mask)
    if r1.shape[0] < 2:
        raise ValueError("DR loss needs >= 2 users in the batch")
    p1 = _dr_distributions(r1, temperature, mode)
    p2 = _dr_distributions(r2, temperature, mode)
    return bidirectional_kl(p1, p2).mean()


def _row_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    # Zero-norm rows get cosine 0 rather than NaN.
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    ok = (na > 0) & (nb > 0)
    cos = (a * b).sum(-1) / (na * nb).clamp_min(LOG_EPS)
    return torch.where(ok, cos, torch.zeros_like(cos))


def aux_cosine(
    pass1: PassOutput, pass2: PassOutput, valid_mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean of 1 - cosine between the passes' per-user final representations."""
    r1 = final_valid_representations(pass1.representations, valid_mask)
    r2 = final_valid_representations(pass2.representations, valid_mask)
    return (1.0 - _row_cosine(r1, r2)).mean()


def aux_l2(
    pass1: PassOutput, pass2: PassOutput, valid_mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean squared distance between final representations, normalized by dimension."""
    r1 = final_valid_representations(pass1.representations, valid_mask)
    r2 = final_valid_representations(pass2.representations, valid_mask)
    return ((r1 - r2) ** 2).sum(-1).mean() / r1.shape[-1]


def aux_rep_kl(
    pass1: PassOutput,
    pass2: PassOutput,
    temperature: float,
    valid_mask: torch.Tensor | None = None,
    mode: str = "cosine",
) -> torch.Tensor:
    """The representation-space KL regularizer evaluated standalone (same math as dr_loss)."""
    return dr_loss(pass1, pass2, temperature, valid_mask=valid_mask, mode=mode)


def two_positive_consistency(item_a, item_b, model: SequenceEncoder) -> torch.Tensor:
    """Mean of 1 - cosine between the embeddings of two positives per user."""
    a = torch.as_tensor(item_a, dtype=torch.long).reshape(-1)
    b = torch.as_tensor(item_b, dtype=torch.long).reshape(-1)
    return (1.0 - _row_cosine(model.item_emb[a], model.item_emb[b])).mean()


def in_batch_contrastive(
    reps_view1: torch.Tensor, reps_view2: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Symmetric InfoNCE over cosine similarities; row i's match is column i."""
    n = reps_view1.shape[0]
    if n < 2:
        raise ValueError("in-batch contrastive loss needs >= 2 rows")
    norm1 = reps_view1.norm(dim=-1, keepdim=True).clamp_min(LOG_EPS)
    norm2 = reps_view2.norm(dim=-1, keepdim=True).clamp_min(LOG_EPS)
    logits = (reps_view1 / norm1) @ (reps_view2 / norm2).T / temperature
    labels = torch.arange(n)
    return 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))


def total_loss(
    pass1: PassOutput,
    pass2: PassOutput,
    batch: SequenceBatch,
    negatives,
    weights: LossWeights,
    model: SequenceEncoder,
    two_pos_pairs: tuple | None = None,
) -> tuple[LossBreakdown, torch.Tensor]:
    """Weighted objective; zero-weight components are skipped, not computed.

    Returns the float breakdown plus the differentiable total for backward.
    """
    targets = torch.from_numpy(batch.targets)
    negatives_t = torch.as_tensor(negatives, dtype=torch.long)
    valid = torch.from_numpy(batch.valid_mask)

    breakdown = LossBreakdown()
    total = basic_loss_two_pass(pass1, pass2, targets, negatives_t, model, valid)
    breakdown.basic = float(total.detach())

    if weights.alpha > 0:
        rd = rd_loss(pass1, pass2, targets, negatives_t, model, valid)
        breakdown.rd = float(rd.detach())
        total = total + weights.alpha * rd
    if weights.beta > 0:
        dr = dr_loss(
            pass1,
            pass2,
            weights.dr_temperature,
            valid_mask=valid,
            mode=weights.dr_similarity,
            all_positions=weights.dr_all_positions,
        )
        breakdown.dr = float(dr.detach())
        total = total + weights.beta * dr
    if weights.aux_weight > 0 and weights.aux_mode != "none":
        if weights.aux_mode == "cosine":
            aux = aux_cosine(pass1, pass2, valid)
        elif weights.aux_mode == "l2":
            aux = aux_l2(pass1, pass2, valid)
        else:
            aux = aux_rep_kl(pass1, pass2, weights.dr_temperature, valid, weights.dr_similarity)
        breakdown.aux = float(aux.detach())
        total = total + weights.aux_weight * aux
    if weights.two_pos_weight > 0:
        if two_pos_pairs is None:
            raise ValueError("two_pos_weight > 0 requires sampled positive pairs")
        tp = two_positive_consistency(two_pos_pairs[0], two_pos_pairs[1], model)
        breakdown.two_pos = float(tp.detach())
        total = total + weights.two_pos_weight * tp
    if weights.contrastive_weight > 0:
        r1 = final_valid_representations(pass1.representations, valid)
        r2 = final_valid_representations(pass2.representations, valid)
        nce = in_batch_contrastive(r1, r2, weights.contrastive_temperature)
        breakdown.contrastive = float(nce.detach())
        total = total + weights.contrastive_weight * nce

    breakdown.total = float(total.detach())
    return breakdown, total
