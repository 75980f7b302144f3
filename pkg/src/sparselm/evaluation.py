"""Classification evaluation by label-word scoring and constrained generation.

Single-label tasks are scored over the closed candidate set: each
candidate's token sequence is appended after [source; prompt] and its
summed conditional log-probability ranks it (deterministic; ties keep the
first declared label). Multi-label tasks use constrained greedy decoding
over the label vocabulary plus a stop token, since label-set sizes vary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError
from .finetune import SoftPrompt, prompt_forward
from .model import ModelConfig, ParamStore


@dataclass(frozen=True)
class LabelSpace:
    """Ordered candidate labels; order is the tie-break."""

    labels: tuple[str, ...]
    token_ids: tuple[tuple[int, ...], ...]
    multi_label: bool = False
    separator_ids: tuple[int, ...] = ()
    stop_id: int | None = None

    def __post_init__(self):
        if not self.labels:
            raise ContractError("label space is empty")
        if len(self.labels) != len(set(self.labels)):
            raise ContractError("duplicate candidate labels")
        if len(self.token_ids) != len(self.labels):
            raise ContractError("labels and token sequences must align")
        if any(not seq for seq in self.token_ids):
            raise ContractError("candidate token sequences must be non-empty")


def label_space_from_vocab(vocab, labels, multi_label=False, separator=" ") -> LabelSpace:
    return LabelSpace(
        labels=tuple(labels),
        token_ids=tuple(tuple(vocab.encode(label)) for label in labels),
        multi_label=multi_label,
        separator_ids=tuple(vocab.encode(separator)) if multi_label else (),
        stop_id=vocab.eod_id,
    )


def serialize_label_set(space: LabelSpace, chosen) -> list[int]:
    """Target serialization for multi-label training: chosen labels in
    canonical (declared) order, joined by the separator."""
    unknown = set(chosen) - set(space.labels)
    if unknown:
        raise ContractError(f"labels not in the space: {sorted(unknown)}")
    ids: list[int] = []
    for label, tokens in zip(space.labels, space.token_ids):
        if label in chosen:
            if ids:
                ids.extend(space.separator_ids)
            ids.extend(tokens)
    return ids


def log_softmax(row: np.ndarray) -> np.ndarray:
    m = row.max()
    z = row - m
    return z - np.log(np.exp(z).sum())


def score_labels(params: ParamStore, config: ModelConfig, prompt: SoftPrompt | None,
                 source_ids, space: LabelSpace) -> np.ndarray:
    """Per-candidate summed log-probability of the candidate's tokens
    appended after [source; prompt]."""
    source = [int(i) for i in source_ids]
    virtual = list(prompt.virtual_ids) if prompt is not None and prompt.n else []
    start = len(source) + len(virtual)
    scores = np.zeros(len(space.labels))
    with T.no_grad():
        for c, cand in enumerate(space.token_ids):
            ids = source + virtual + list(cand)
            if len(ids) > config.context_window:
                raise ContractError(
                    f"candidate {space.labels[c]!r}: sequence {len(ids)} exceeds "
                    f"context window {config.context_window}"
                )
            logits = prompt_forward(params, config, prompt, np.asarray([ids])).data[0]
            scores[c] = sum(
                log_softmax(logits[start + t - 1])[tok] for t, tok in enumerate(cand)
            )
    return scores


def predict_label(params, config, prompt, source_ids, space: LabelSpace) -> str:
    scores = score_labels(params, config, prompt, source_ids, space)
    return space.labels[int(np.argmax(scores))]  # argmax keeps the first tie


def accuracy(preds, golds) -> float:
    preds, golds = list(preds), list(golds)
    if len(preds) != len(golds):
        raise ContractError(f"{len(preds)} predictions vs {len(golds)} golds")
    if not preds:
        raise ContractError("accuracy of an empty list is undefined")
    return sum(p == g for p, g in zip(preds, golds)) / len(preds)


def micro_f1(pred_sets, gold_sets) -> float:
    """F1 over TP/FP/FN pooled across documents and labels; 0 when the
    pooled precision + recall denominator is empty."""
    pred_sets, gold_sets = list(pred_sets), list(gold_sets)
    if len(pred_sets) != len(gold_sets):
        raise ContractError(f"{len(pred_sets)} predictions vs {len(gold_sets)} golds")
    tp = fp = fn = 0
    for pred, gold in zip(pred_sets, gold_sets):
        pred, gold = set(pred), set(gold)
        tp += len(pred & gold)
        fp += len(pred - gold)
        fn += len(gold - pred)
    if 2 * tp + fp + fn == 0:
        return 0.0
    return 2 * tp / (2 * tp + fp + fn)


@dataclass
class GenerationOutcome:
    labels: tuple[str, ...]
    truncated: bool


def generate_labels(params, config, prompt, source_ids, space: LabelSpace,
                    max_steps: int = 8) -> GenerationOutcome:
    """Greedy constrained decoding: at each step the highest-scoring
    continuation among the candidate labels and the stop token is taken;
    emitted labels are deduplicated. Hitting max_steps without a stop sets
    the truncated flag."""
    if not space.multi_label:
        raise ContractError("generate_labels needs a multi_label space")
    if space.stop_id is None:
        raise ContractError("label space has no stop token")
    context = [int(i) for i in source_ids]
    if prompt is not None and prompt.n:
        context += list(prompt.virtual_ids)
    emitted: list[str] = []
    truncated = True
    with T.no_grad():
        for _ in range(max_steps):
            next_dist = log_softmax(
                prompt_forward(params, config, prompt, np.asarray([context])).data[0, -1]
            )
            stop_score = next_dist[space.stop_id]
            best_idx, best_score = None, -np.inf
            for c, cand in enumerate(space.token_ids):
                full = context + list(cand)
                if len(full) > config.context_window:
                    continue
                if len(cand) == 1:
                    score = next_dist[cand[0]]
                else:
                    logits = prompt_forward(params, config, prompt, np.asarray([full])).data[0]
                    score = sum(
                        log_softmax(logits[len(context) + t - 1])[tok]
                        for t, tok in enumerate(cand)
                    )
                if score > best_score:
                    best_idx, best_score = c, score
            if best_idx is None or stop_score >= best_score:
                truncated = False
                break
            label = space.labels[best_idx]
            if label not in emitted:
                emitted.append(label)
            context += list(space.token_ids[best_idx]) + list(space.separator_ids)
    return GenerationOutcome(labels=tuple(emitted), truncated=truncated)


def bind_accuracy_metric(config: ModelConfig, space: LabelSpace):
    """metric_fn for fine-tuning/grid selection: single-label accuracy with
    each example's first gold label as the reference."""
    def metric(params, prompt, examples):
        preds = [predict_label(params, config, prompt, ex.source, space) for ex in examples]
        golds = [ex.labels[0] if ex.labels else "" for ex in examples]
        return accuracy(preds, golds)

    return metric
