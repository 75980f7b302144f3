"""Dense task fine-tuning with soft prompts.

Sequences are laid out [source; prompt; target]: the n virtual slots sit
between source and target and their token-embedding lookups are replaced
by trainable continuous embeddings (position embeddings apply normally).
The loss covers target positions only. Stages run in order with weights
carried forward from each stage's best-validation checkpoint; an optional
end-of-sequence token can be appended after the target for generation
termination.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .model import INIT_STD, ModelConfig, ParamStore, clone_params, forward_logits
from .tensor import Tensor
from .training import OptimizerState, Schedule, adamw_step, lr_at

# grid-search presets: (batch sizes, peak learning rates)
PUBMEDQA_GRID = ((8, 16, 32, 64), (2e-4, 1e-4, 5e-5, 2.5e-5))
HOC_GRID = ((16, 32, 64), (8e-5, 4e-5, 2e-5, 1e-5))

PUBMEDQA_PROMPT_LENGTH = 9
HOC_PROMPT_LENGTH = 1


@dataclass
class TaskExample:
    source: list[int]
    target: list[int]
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.source or not self.target:
            raise ContractError("TaskExample needs non-empty source and target")


@dataclass
class SoftPrompt:
    """n trainable continuous embeddings bound to reserved virtual ids."""

    embeddings: Tensor            # (n, d_model)
    virtual_ids: tuple[int, ...]

    def __post_init__(self):
        if len(self.virtual_ids) != self.embeddings.data.shape[0]:
            raise ContractError(
                f"{len(self.virtual_ids)} virtual ids for {self.embeddings.data.shape[0]} rows"
            )
        if len(set(self.virtual_ids)) != len(self.virtual_ids):
            raise ContractError("virtual ids must be distinct")

    @property
    def n(self):
        return self.embeddings.data.shape[0]


def init_soft_prompt(config: ModelConfig, n: int, virtual_ids, seed: int = 0,
                     dtype: str = "float32") -> SoftPrompt:
    """Rows drawn from the token-embedding init distribution (std 0.02)."""
    if n < 0:
        raise ContractError("prompt length must be >= 0")
    rng = np.random.default_rng(seed)
    emb = rng.normal(0.0, INIT_STD, size=(n, config.d_model))
    return SoftPrompt(embeddings=Tensor(emb, requires_grad=True, dtype=dtype),
                      virtual_ids=tuple(virtual_ids)[:n] if n else ())


def build_sequence(example: TaskExample, prompt: SoftPrompt | None = None,
                   context_window: int | None = None, eos_id: int | None = None):
    """[source ids][n virtual slots][target ids][eos?] plus a loss mask that
    is 1 exactly on target (and eos) positions."""
    virtual = list(prompt.virtual_ids) if prompt is not None else []
    ids = list(example.source) + virtual + list(example.target)
    mask = [0] * (len(example.source) + len(virtual)) + [1] * len(example.target)
    if eos_id is not None:
        ids.append(eos_id)
        mask.append(1)
    if context_window is not None and len(ids) > context_window:
        raise ContractError(
            f"sequence length {len(ids)} (source {len(example.source)} + prompt "
            f"{len(virtual)} + target {len(example.target)}) "
            f"exceeds context window {context_window}"
        )
    return np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=np.int8)


def prompt_slot_positions(ids, prompt: SoftPrompt):
    """(batch, n) column index of each virtual id, in prompt-row order."""
    ids = np.asarray(ids)
    positions = np.zeros((ids.shape[0], prompt.n), dtype=np.int64)
    for i, vid in enumerate(prompt.virtual_ids):
        hits = ids == vid
        counts = hits.sum(axis=1)
        if not np.all(counts == 1):
            raise ContractError(
                f"virtual id {vid} must appear exactly once per row, got counts {counts.tolist()}"
            )
        positions[:, i] = hits.argmax(axis=1)
    return positions


def prompt_forward(params: ParamStore, config: ModelConfig, prompt: SoftPrompt | None,
                   ids, masks=None) -> Tensor:
    """Forward pass with virtual positions read from the prompt matrix."""
    if prompt is None or prompt.n == 0:
        return forward_logits(params, config, ids, masks=masks)
    positions = prompt_slot_positions(ids, prompt)
    return forward_logits(params, config, ids, masks=masks,
                          prompt_embeddings=prompt.embeddings, prompt_positions=positions)


def sequence_loss(params, config, ids, loss_mask, prompt=None) -> Tensor:
    """Next-token cross-entropy restricted to positions where the (shifted)
    loss mask is 1."""
    ids = np.asarray(ids)
    loss_mask = np.asarray(loss_mask)
    if ids.shape != loss_mask.shape or ids.ndim != 2:
        raise ContractError(f"ids {ids.shape} / loss_mask {loss_mask.shape} must be equal 2-d shapes")
    bsz, seq = ids.shape
    logits = prompt_forward(params, config, prompt, ids)
    pred = T.reshape(T.narrow(logits, 1, 0, seq - 1), (bsz * (seq - 1), config.vocab_size))
    return T.cross_entropy(pred, ids[:, 1:].reshape(-1), loss_mask[:, 1:].reshape(-1))


def pad_batch(sequences, pad_id: int):
    """Right-pad (ids, mask) pairs to a rectangle; padding never enters the loss."""
    width = max(len(ids) for ids, _ in sequences)
    ids = np.full((len(sequences), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), width), dtype=np.int8)
    for row, (seq_ids, seq_mask) in enumerate(sequences):
        ids[row, : len(seq_ids)] = seq_ids
        mask[row, : len(seq_mask)] = seq_mask
    return ids, mask


@dataclass
class FinetuneStage:
    name: str
    train: list[TaskExample]
    val: list[TaskExample] | None = None
    epochs: int | None = None  # override of job.epochs


@dataclass
class FinetuneJob:
    stages: list[FinetuneStage]
    epochs: int = 5
    batch_size: int = 8
    peak_lr: float = 1e-4
    warmup_fraction: float = 0.10
    min_lr_fraction: float = 0.10
    weight_decay: float = 0.1
    patience: int | None = None          # early stopping off when None
    prompt_length: int = 0
    virtual_ids: tuple[int, ...] = ()
    use_prompt: bool = True              # ablation switch: drop the prompt arm
    freeze_base: bool = False            # prompt-only tuning
    pad_id: int = 1
    eos_id: int | None = None
    seed: int = 0
    prompt_seed: int = 0


@dataclass
class EpochRecord:
    stage: str
    epoch: int
    train_loss: float
    val_loss: float | None
    metric: float | None


@dataclass
class FinetuneResult:
    params: ParamStore
    prompt: SoftPrompt | None
    report: list[EpochRecord]
    best_val_loss: float | None
    final_metric: float | None


def _snapshot(trainable):
    return {path: t.data.copy() for path, t in trainable.items()}


def _restore(trainable, snapshot):
    for path, data in snapshot.items():
        trainable[path].data[...] = data


def _mean_loss(params, config, batches, prompt):
    total, rows = 0.0, 0
    with T.no_grad():
        for ids, mask in batches:
            loss = sequence_loss(params, config, ids, mask, prompt)
            total += loss.item() * ids.shape[0]
            rows += ids.shape[0]
    return total / rows


def _build_batches(examples, prompt, job, config, order=None):
    built = [build_sequence(ex, prompt, config.context_window, job.eos_id) for ex in examples]
    if order is None:
        order = range(len(built))
    batches = []
    chunk = []
    for i in order:
        chunk.append(built[i])
        if len(chunk) == job.batch_size:
            batches.append(pad_batch(chunk, job.pad_id))
            chunk = []
    if chunk:
        batches.append(pad_batch(chunk, job.pad_id))
    return batches


def finetune_dense(params: ParamStore, config: ModelConfig, job: FinetuneJob,
                   metric_fn=None) -> FinetuneResult:
    """Run the job's stages in order on `params` (mutated in place).

    All weights train (the dense increment has the full dimensionality of
    the model) unless freeze_base, in which case only the prompt moves.
    metric_fn(params, prompt, examples) -> float scores validation sets.
    """
    if not job.stages:
        raise ContractError("job has no stages")
    if job.pad_id >= config.vocab_size:
        raise ContractError(f"pad id {job.pad_id} outside vocab {config.vocab_size}")

    prompt = None
    if job.prompt_length > 0 and job.use_prompt:
        if len(job.virtual_ids) < job.prompt_length:
            raise ContractError(
                f"{job.prompt_length} prompt slots need {job.prompt_length} virtual ids, "
                f"got {len(job.virtual_ids)}"
            )
        prompt = init_soft_prompt(config, job.prompt_length, job.virtual_ids, job.prompt_seed)

    trainable = {}
    if not job.freeze_base:
        trainable.update(params)
    if prompt is not None:
        trainable["soft_prompt"] = prompt.embeddings
    if not trainable:
        raise ContractError("freeze_base without a prompt leaves nothing to train")

    rng = np.random.default_rng(job.seed)
    report: list[EpochRecord] = []
    best_val_loss = None

    for stage in job.stages:
        epochs = stage.epochs if stage.epochs is not None else job.epochs
        if job.patience is not None and stage.val is None:
            raise ContractError(f"stage {stage.name!r}: early stopping needs a validation split")
        if not stage.train:
            raise ContractError(f"stage {stage.name!r} has no training examples")

        steps_per_epoch = math.ceil(len(stage.train) / job.batch_size)
        schedule = Schedule(job.peak_lr, max(1, epochs * steps_per_epoch),
                            job.warmup_fraction, job.min_lr_fraction)
        opt = OptimizerState.for_params(trainable, weight_decay=job.weight_decay)
        val_batches = (_build_batches(stage.val, prompt, job, config)
                       if stage.val else None)

        best = None
        best_weights = None
        stalled = 0
        step = 0
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(stage.train))
            epoch_loss, rows = 0.0, 0
            for ids, mask in _build_batches(stage.train, prompt, job, config, order):
                step += 1
                for t in trainable.values():
                    t.grad = None
                loss = sequence_loss(params, config, ids, mask, prompt)
                T.backward(loss)
                grads = {p: t.grad for p, t in trainable.items() if t.grad is not None}
                adamw_step(trainable, grads, opt, lr_at(schedule, min(step, schedule.total_steps)))
                epoch_loss += loss.item() * ids.shape[0]
                rows += ids.shape[0]
            train_loss = epoch_loss / rows
            val_loss = (_mean_loss(params, config, val_batches, prompt)
                        if val_batches else None)
            metric = (metric_fn(params, prompt, stage.val)
                      if metric_fn is not None and stage.val else None)
            report.append(EpochRecord(stage.name, epoch, train_loss, val_loss, metric))

            selection = val_loss if val_loss is not None else train_loss
            if best is None or selection < best:
                best = selection
                best_weights = _snapshot(trainable)
                stalled = 0
            else:
                stalled += 1
                if job.patience is not None and stalled > job.patience:
                    break

        if best_weights is not None:
            _restore(trainable, best_weights)
        if best is not None and stage.val is not None:
            best_val_loss = best

    final_metric = None
    last_val = job.stages[-1].val
    if metric_fn is not None and last_val:
        final_metric = metric_fn(params, prompt, last_val)
    return FinetuneResult(params=params, prompt=prompt, report=report,
                          best_val_loss=best_val_loss, final_metric=final_metric)


def report_to_csv(report: list[EpochRecord]) -> str:
    lines = ["stage,epoch,train_loss,val_loss,metric"]
    for r in report:
        val = "" if r.val_loss is None else repr(r.val_loss)
        met = "" if r.metric is None else repr(r.metric)
        lines.append(f"{r.stage},{r.epoch},{r.train_loss!r},{val},{met}")
    return "\n".join(lines) + "\n"


@dataclass
class GridPoint:
    batch_size: int
    lr: float
    score: float
    val_loss: float | None
    metric: float | None


@dataclass
class GridResult:
    best_batch_size: int
    best_lr: float
    best: FinetuneResult
    table: list[GridPoint]


def grid_search(params: ParamStore, config: ModelConfig, job: FinetuneJob,
                batch_sizes, lrs, metric_fn=None) -> GridResult:
    """Exhaustive sweep; selection by metric when available, else negative
    validation loss. Ties keep the first point in declared order."""
    if not batch_sizes or not lrs:
        raise ContractError("grid space is empty")
    best_point = None
    best_result = None
    table = []
    for bs in batch_sizes:
        for lr in lrs:
            trial = dataclasses.replace(job, batch_size=bs, peak_lr=lr)
            result = finetune_dense(clone_params(params), config, trial, metric_fn)
            if result.final_metric is not None:
                score = result.final_metric
            elif result.best_val_loss is not None:
                score = -result.best_val_loss
            else:
                score = -result.report[-1].train_loss
            point = GridPoint(bs, lr, score, result.best_val_loss, result.final_metric)
            table.append(point)
            if best_point is None or point.score > best_point.score:
                best_point = point
                best_result = result
    return GridResult(best_batch_size=best_point.batch_size, best_lr=best_point.lr,
                      best=best_result, table=table)


def grid_to_csv(result: GridResult) -> str:
    lines = ["batch_size,lr,score,val_loss,metric"]
    for p in result.table:
        val = "" if p.val_loss is None else repr(p.val_loss)
        met = "" if p.metric is None else repr(p.metric)
        lines.append(f"{p.batch_size},{p.lr!r},{p.score!r},{val},{met}")
    return "\n".join(lines) + "\n"


def run_prompt_ablation(params: ParamStore, config: ModelConfig, job: FinetuneJob,
                        metric_fn=None) -> dict[str, FinetuneResult]:
    """Fine-tune twice from the same starting weights, with and without the
    soft prompt, so the two arms are directly comparable."""
    if job.prompt_length <= 0:
        raise ContractError("ablation needs a prompt_length > 0")
    arms = {}
    for label, use_prompt in (("with_prompt", True), ("without_prompt", False)):
        arm_job = dataclasses.replace(job, use_prompt=use_prompt)
        arms[label] = finetune_dense(clone_params(params), config, arm_job, metric_fn)
    return arms
