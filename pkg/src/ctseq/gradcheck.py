"""Central finite-difference verification of every loss component's gradients.

Runs a d=8 model in double precision with frozen dropout seeds, so each check
is deterministic and the differentiated path can be compared against an
independent numerical derivative of the very same computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import corpus
from .corpus import SequenceBatch
from .encoder import EncoderConfig, SequenceEncoder, forward_pass
from .objectives import (
    LossWeights,
    aux_cosine,
    aux_l2,
    aux_rep_kl,
    basic_loss_two_pass,
    dr_loss,
    final_valid_representations,
    in_batch_contrastive,
    rd_loss,
    total_loss,
    two_positive_consistency,
)

COMPONENTS = ("basic", "rd", "dr", "cosine", "l2", "rep_kl", "two_pos", "contrastive", "total")

_SEED = 20240
_DROPOUT_SEEDS = (71, 72)
_CATALOG = 12


@dataclass
class Fixture:
    model: SequenceEncoder
    batch: SequenceBatch
    negatives: np.ndarray
    two_pos: tuple[np.ndarray, np.ndarray]
    weights: LossWeights


def build_fixture(seed: int = _SEED, dropout_rate: float = 0.5) -> Fixture:
    config = EncoderConfig(
        embed_dim=8, n_layers=2, n_heads=2, max_seq_len=5, dropout_rate=dropout_rate, ffn_dim=8
    )
    model = SequenceEncoder(config, _CATALOG, seed=seed, dtype=torch.float64)
    rng = corpus.stream(seed, 99)
    sequences = [
        corpus.UserSequence(user=u, items=tuple(int(v) for v in rng.integers(1, _CATALOG + 1, size=n)))
        for u, n in enumerate((4, 6, 3, 5))
    ]
    batch = next(corpus.make_batches(sequences, batch_size=4, max_seq_len=5, seed=seed))
    negatives = corpus.sample_train_negatives(batch, 3, _CATALOG, corpus.stream(seed, 98))
    pair_rng = corpus.stream(seed, 97)
    pairs = ([], [])
    for seq in sequences:
        a, b = corpus.sample_two_positives(seq, pair_rng)
        pairs[0].append(a)
        pairs[1].append(b)
    weights = LossWeights(
        alpha=1.0, beta=1.0, dr_temperature=0.2,
        aux_mode="cosine", aux_weight=0.5,
        two_pos_weight=0.5, contrastive_weight=0.5, contrastive_temperature=0.5,
    )
    return Fixture(
        model=model, batch=batch, negatives=negatives,
        two_pos=(np.asarray(pairs[0]), np.asarray(pairs[1])),
        weights=weights,
    )


def component_loss(component: str, fx: Fixture) -> torch.Tensor:
    """Recompute the named loss from scratch (fresh forwards, frozen dropout seeds)."""
    if component not in COMPONENTS:
        raise ValueError(f"unknown component {component!r}")
    if component == "two_pos":
        return two_positive_consistency(fx.two_pos[0], fx.two_pos[1], fx.model)
    p1 = forward_pass(fx.model, fx.batch, dropout_seed=_DROPOUT_SEEDS[0], dropout_id=1)
    p2 = forward_pass(fx.model, fx.batch, dropout_seed=_DROPOUT_SEEDS[1], dropout_id=2)
    targets = torch.from_numpy(fx.batch.targets)
    negs = torch.as_tensor(fx.negatives)
    valid = torch.from_numpy(fx.batch.valid_mask)
    w = fx.weights
    if component == "basic":
        return basic_loss_two_pass(p1, p2, targets, negs, fx.model, valid)
    if component == "rd":
        return rd_loss(p1, p2, targets, negs, fx.model, valid)
    if component == "dr":
        return dr_loss(p1, p2, w.dr_temperature, valid_mask=valid, mode=w.dr_similarity)
    if component == "cosine":
        return aux_cosine(p1, p2, valid)
    if component == "l2":
        return aux_l2(p1, p2, valid)
    if component == "rep_kl":
        return aux_rep_kl(p1, p2, w.dr_temperature, valid, w.dr_similarity)
    if component == "contrastive":
        r1 = final_valid_representations(p1.representations, valid)
        r2 = final_valid_representations(p2.representations, valid)
        return in_batch_contrastive(r1, r2, w.contrastive_temperature)
    _, total = total_loss(p1, p2, fx.batch, fx.negatives, w, fx.model, two_pos_pairs=fx.two_pos)
    return total


def check_component(
    component: str,
    fx: Fixture | None = None,
    h: float = 1e-4,
    corrupt: str | None = None,
) -> dict[str, float]:
    """Max relative error between autograd and central differences, per tensor.

    `corrupt` names a component whose autograd gradient gets deliberately
    poisoned; used to prove the harness actually detects mismatches.
    """
    fx = fx or build_fixture()
    fx.model.zero_grad(set_to_none=True)
    component_loss(component, fx).backward()
    analytic = {
        name: (p.grad.clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in fx.model.named_parameters()
    }
    if corrupt == component:
        first = next(iter(analytic))
        analytic[first] = analytic[first] + 1e-2

    errors: dict[str, float] = {}
    with torch.no_grad():
        for name, p in fx.model.named_parameters():
            fd = torch.zeros_like(p)
            flat = p.view(-1)
            fd_flat = fd.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = float(component_loss(component, fx))
                flat[i] = orig - h
                down = float(component_loss(component, fx))
                flat[i] = orig
                fd_flat[i] = (up - down) / (2 * h)
            a = analytic[name]
            scale = max(float(a.abs().max()), float(fd.abs().max()), 1e-8)
            errors[name] = float((a - fd).abs().max()) / scale
    return errors


def run(
    components: tuple[str, ...] = COMPONENTS,
    tolerance: float = 1e-4,
    h: float = 1e-4,
    corrupt: str | None = None,
) -> dict:
    """Full report: per component, the worst tensor error and a pass flag."""
    fx = build_fixture()
    report: dict = {"tolerance": tolerance, "components": {}, "passed": True}
    for component in components:
        errors = check_component(component, fx, h=h, corrupt=corrupt)
        worst = max(errors.values())
        ok = worst < tolerance
        report["components"][component] = {
            "max_rel_err": worst,
            "per_tensor": errors,
            "passed": ok,
        }
        report["passed"] = report["passed"] and ok
    return report
