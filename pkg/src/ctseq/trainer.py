"""Two-pass consistency training loop: seeded steps, Adam updates, checkpoints.

Every stochastic choice (batch order, negatives, dropout masks, augmentation)
is addressed by (seed, epoch, step), so a (config, seed, dataset) triple fully
determines the parameter trajectory and checkpoints can resume bit-exactly.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import corpus
from .corpus import (
    PAD_ID,
    TAG_AUG_MASK,
    TAG_AUG_REORDER,
    TAG_DROPOUT,
    TAG_TRAIN_NEG,
    TAG_TWO_POS,
    InteractionLog,
    SequenceBatch,
    UserSequence,
    derive_seed,
    stream,
)
from .encoder import EncoderConfig, SequenceEncoder, forward_pass, forward_two_pass, init_params
from .evaluator import EvalProtocol, EvalReport, evaluate
from .objectives import LossBreakdown, LossWeights, basic_loss_single, total_loss


class NonFiniteLossError(RuntimeError):
    """Raised when a training step produces NaN/Inf; carries the offending batch."""

    def __init__(self, message: str, batch: SequenceBatch, breakdown: LossBreakdown):
        super().__init__(message)
        self.batch = batch
        self.breakdown = breakdown


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 128
    max_epochs: int = 200
    early_stop_patience: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1
    n_train_negatives: int = 100
    two_pass: bool = True
    grad_clip_norm: float | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")
        if self.n_train_negatives < 1:
            raise ValueError("n_train_negatives must be >= 1")
        if not (0 < self.adam_beta1 < 1 and 0 < self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        w = self.weights
        if not self.two_pass and (
            w.alpha > 0 or w.beta > 0 or w.aux_weight > 0 or w.contrastive_weight > 0
        ):
            raise ValueError("single-pass training admits no consistency terms; zero their weights")


@dataclass
class TrainState:
    model: SequenceEncoder
    adam_m: dict[str, torch.Tensor]
    adam_v: dict[str, torch.Tensor]
    step: int = 0
    epoch: int = 0
    step_in_epoch: int = 0
    best_metric: float = float("-inf")
    best_epoch: int = -1
    evals_since_improve: int = 0
    seed: int = 0
    best_params: dict[str, torch.Tensor] | None = None


@dataclass
class PreparedData:
    """Split bundle: training cores, validation and test leave-one-out pairs."""

    train_sequences: list[UserSequence]
    val_pairs: list[tuple[UserSequence, int]]
    test_pairs: list[tuple[UserSequence, int]]
    catalog_size: int


def make_validation_split(
    train_sequences: list[UserSequence],
) -> tuple[list[UserSequence], list[tuple[UserSequence, int]]]:
    """Hold each training sequence's last item out for validation."""
    cores, val_pairs = [], []
    for seq in train_sequences:
        if len(seq) >= 2:
            core = UserSequence(user=seq.user, items=seq.items[:-1])
            cores.append(core)
            val_pairs.append((core, seq.items[-1]))
        else:
            cores.append(seq)
    return cores, val_pairs


def prepare_data(log: InteractionLog) -> PreparedData:
    train_sequences, test_pairs = corpus.split(log)
    cores, val_pairs = make_validation_split(train_sequences)
    return PreparedData(
        train_sequences=cores,
        val_pairs=val_pairs,
        test_pairs=test_pairs,
        catalog_size=log.n_items,
    )


def init_state(config: TrainConfig, catalog_size: int) -> TrainState:
    model = init_params(config.encoder, catalog_size, seed=config.seed)
    zeros = {name: torch.zeros_like(p) for name, p in model.named_parameters()}
    return TrainState(
        model=model,
        adam_m=zeros,
        adam_v={name: t.clone() for name, t in zeros.items()},
        seed=config.seed,
    )


def adam_update(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor | None],
    adam_m: dict[str, torch.Tensor],
    adam_v: dict[str, torch.Tensor],
    lr: float,
    step: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected Adam, in place, on every tensor with a gradient."""
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            m, v = adam_m[name], adam_v[name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = m / (1 - beta1**step)
            v_hat = v / (1 - beta2**step)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


def _two_positive_pairs(
    batch: SequenceBatch, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray] | None:
    first, second = [], []
    for r in range(batch.inputs.shape[0]):
        items = batch.inputs[r][batch.inputs[r] != PAD_ID]
        if items.size < 2:
            continue
        seq = UserSequence(user=batch.users[r], items=tuple(int(v) for v in items))
        a, b = corpus.sample_two_positives(seq, rng)
        first.append(a)
        second.append(b)
    if not first:
        return None
    return np.asarray(first), np.asarray(second)


def train_step(
    state: TrainState,
    batch: SequenceBatch,
    config: TrainConfig,
    catalog_size: int,
    epoch: int | None = None,
    batch_index: int | None = None,
) -> LossBreakdown:
    """One forward-twice / update-once step (or single-pass when configured)."""
    epoch = state.epoch if epoch is None else epoch
    batch_index = state.step_in_epoch if batch_index is None else batch_index
    model = state.model
    w = config.weights

    neg_rng = stream(config.seed, TAG_TRAIN_NEG, epoch, batch_index)
    negatives = corpus.sample_train_negatives(batch, config.n_train_negatives, catalog_size, neg_rng)
    seed1 = derive_seed(config.seed, TAG_DROPOUT, epoch, batch_index, 1)
    seed2 = derive_seed(config.seed, TAG_DROPOUT, epoch, batch_index, 2)

    if not config.two_pass:
        p1 = forward_pass(model, batch, dropout_seed=seed1)
        total = basic_loss_single(
            p1, torch.from_numpy(batch.targets), torch.as_tensor(negatives),
            model, torch.from_numpy(batch.valid_mask),
        )
        breakdown = LossBreakdown(basic=float(total.detach()), total=float(total.detach()))
    else:
        if w.consistency_source == "augmentation":
            # Two augmented views with one shared dropout seed isolate the
            # data-side inconsistency from the model-side one.
            tag = TAG_AUG_MASK if w.augmentation_kind == "mask" else TAG_AUG_REORDER
            mask_id = catalog_size + 1
            views = []
            for view in (1, 2):
                rng = stream(config.seed, tag, epoch, batch_index, view)
                inputs = corpus.augment_batch_inputs(batch, w.augmentation_kind, w.augmentation_ratio, rng, mask_id)
                views.append(SequenceBatch(inputs, batch.targets, batch.valid_mask, batch.users))
            p1 = forward_pass(model, views[0], dropout_seed=seed1, dropout_id=1)
            p2 = forward_pass(model, views[1], dropout_seed=seed1, dropout_id=2)
        else:
            p1, p2 = forward_two_pass(model, batch, seed1, seed2)
        pairs = None
        if w.two_pos_weight > 0:
            pairs = _two_positive_pairs(batch, stream(config.seed, TAG_TWO_POS, epoch, batch_index))
        breakdown, total = total_loss(p1, p2, batch, negatives, w, model, two_pos_pairs=pairs)

    if not math.isfinite(breakdown.total):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step + 1} (epoch {epoch}, batch {batch_index}): "
            f"{breakdown.as_dict()}", batch, breakdown,
        )

    model.zero_grad(set_to_none=True)
    total.backward()
    if config.grad_clip_norm is not None:
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
    state.step += 1
    params = dict(model.named_parameters())
    grads = {name: p.grad for name, p in params.items()}
    adam_update(
        params, grads, state.adam_m, state.adam_v,
        config.learning_rate, state.step,
        config.adam_beta1, config.adam_beta2, config.adam_eps,
    )
    with torch.no_grad():
        model.item_emb[PAD_ID].zero_()
        for name, p in params.items():
            if not torch.isfinite(p).all():
                raise NonFiniteLossError(f"non-finite parameter tensor {name!r} after update", batch, breakdown)
    state.step_in_epoch = batch_index + 1
    return breakdown


def _snapshot_params(model: SequenceEncoder) -> dict[str, torch.Tensor]:
    return {name: p.detach().clone() for name, p in model.named_parameters()}


def restore_params(model: SequenceEncoder, snapshot: dict[str, torch.Tensor]) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(snapshot[name])


def train(
    config: TrainConfig,
    data: PreparedData,
    protocol: EvalProtocol | None = None,
    run_dir: str | Path | None = None,
    state: TrainState | None = None,
) -> tuple[TrainState, list[dict]]:
    """Run epochs until max_epochs or early stop; keeps the best-NDCG@10 parameters.

    Per-step metric lines carry the loss breakdown; each epoch adds a summary
    line with wall-clock seconds. Passing a loaded state resumes mid-run.
    """
    config.validate()
    protocol = protocol or EvalProtocol()
    if 10 not in protocol.ks:
        raise ValueError("the training loop early-stops on NDCG@10; include k=10 in the protocol")
    if state is None:
        state = init_state(config, data.catalog_size)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
    log: list[dict] = []

    def log_line(epoch: int, breakdown: LossBreakdown, epoch_seconds: float | None) -> None:
        entry = {"epoch": epoch, "step": state.step}
        entry.update(breakdown.as_dict())
        entry["epoch_seconds"] = epoch_seconds
        entry["lr"] = config.learning_rate
        log.append(entry)

    while state.epoch < config.max_epochs:
        epoch = state.epoch
        started = time.perf_counter()
        epoch_losses: list[LossBreakdown] = []
        batches = corpus.make_batches(
            data.train_sequences, config.batch_size, config.encoder.max_seq_len,
            derive_seed(config.seed, corpus.TAG_SHUFFLE, epoch),
        )
        for bidx, batch in enumerate(batches):
            if bidx < state.step_in_epoch:
                continue  # resuming mid-epoch
            breakdown = train_step(state, batch, config, data.catalog_size, epoch, bidx)
            epoch_losses.append(breakdown)
            log_line(epoch, breakdown, None)
        seconds = time.perf_counter() - started
        if epoch_losses:
            mean = LossBreakdown(**{
                k: float(np.mean([b.as_dict()[k] for b in epoch_losses]))
                for k in epoch_losses[0].as_dict()
            })
            log_line(epoch, mean, seconds)
        state.epoch = epoch + 1
        state.step_in_epoch = 0

        if data.val_pairs and (epoch + 1) % config.eval_every == 0:
            report = evaluate(state.model, data.val_pairs, protocol, data.catalog_size)
            metric = report.ndcg[10]
            if metric > state.best_metric:
                state.best_metric = metric
                state.best_epoch = epoch
                state.evals_since_improve = 0
                state.best_params = _snapshot_params(state.model)
                if run_dir is not None:
                    save_checkpoint(state, run_dir / "checkpoints" / "best", config)
            else:
                state.evals_since_improve += 1
            log.append({
                "epoch": epoch, "step": state.step, "validation_ndcg10": metric,
                "best_ndcg10": state.best_metric, "best_epoch": state.best_epoch,
            })
            if state.evals_since_improve >= config.early_stop_patience:
                break

    if run_dir is not None:
        save_checkpoint(state, run_dir / "checkpoints" / "last", config)
    return state, log


def _tensor_entries(state: TrainState) -> list[tuple[str, torch.Tensor]]:
    entries = [(name, p.detach()) for name, p in state.model.named_parameters()]
    entries += [(f"adam_m/{name}", t) for name, t in state.adam_m.items()]
    entries += [(f"adam_v/{name}", t) for name, t in state.adam_v.items()]
    return entries


def save_checkpoint(state: TrainState, path: str | Path, config: TrainConfig) -> None:
    """manifest.json + tensors.bin (raw little-endian f32) + trainer_state.json."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = _tensor_entries(state)
    manifest, blobs, offset = [], [], 0
    for name, tensor in entries:
        if tensor.dtype != torch.float32:
            raise ValueError(f"checkpoint tensors must be f32, got {tensor.dtype} for {name!r}")
        raw = tensor.contiguous().numpy().astype("<f4", copy=False).tobytes()
        manifest.append({
            "name": name, "shape": list(tensor.shape), "dtype": "f32",
            "offset": offset, "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)
    (path / "tensors.bin").write_bytes(b"".join(blobs))
    (path / "manifest.json").write_text(
        json.dumps({"tensors": manifest, "total_bytes": offset}, indent=2, sort_keys=True) + "\n"
    )
    trainer_state = {
        "step": state.step,
        "epoch": state.epoch,
        "step_in_epoch": state.step_in_epoch,
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "evals_since_improve": state.evals_since_improve,
        "seed": state.seed,
        "catalog_size": state.model.catalog_size,
        "encoder": asdict(state.model.config),
        "rng": {"scheme": "counter-derived", "seed": state.seed},
    }
    (path / "trainer_state.json").write_text(json.dumps(trainer_state, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> TrainState:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        meta = json.loads((path / "trainer_state.json").read_text())
        blob = (path / "tensors.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"unreadable checkpoint at {path}: {exc}") from exc

    tensors: dict[str, torch.Tensor] = {}
    for entry in manifest["tensors"]:
        if entry["dtype"] != "f32":
            raise ValueError(f"unsupported tensor dtype {entry['dtype']!r}")
        raw = blob[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)

    encoder_cfg = EncoderConfig(**meta["encoder"])
    model = SequenceEncoder(encoder_cfg, meta["catalog_size"], seed=meta["seed"])
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise ValueError(f"checkpoint is missing tensor {name!r}")
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {tuple(tensors[name].shape)}, "
                    f"model {tuple(p.shape)}"
                )
            p.copy_(tensors[name])
    adam_m = {n: tensors[f"adam_m/{n}"] for n, _ in model.named_parameters()}
    adam_v = {n: tensors[f"adam_v/{n}"] for n, _ in model.named_parameters()}
    return TrainState(
        model=model,
        adam_m=adam_m,
        adam_v=adam_v,
        step=meta["step"],
        epoch=meta["epoch"],
        step_in_epoch=meta["step_in_epoch"],
        best_metric=meta["best_metric"],
        best_epoch=meta["best_epoch"],
        evals_since_improve=meta["evals_since_improve"],
        seed=meta["seed"],
    )
