"""Supervised imitation of expert demonstrations (causal LM objective).

The loss covers only the generated segments of each rendered turn: everything
from the emotion cue onward except the database segment, which is computed by
the query step and never generated.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .backbone import pad_batch
from .ontology import Ontology
from .seqformat import TurnRecord, Vocabulary, render_sequence


class DegenerateBatchError(ValueError):
    """Raised when a batch selects no target tokens."""


class TrainingDivergedError(RuntimeError):
    """Raised when the loss stops being finite."""


LOSS_SEGMENTS = ("emotion", "domain", "state", "action", "conduct", "system")


def build_example(
    record: TurnRecord,
    ontology: Ontology,
    vocab: Vocabulary,
    history_exchanges: int = 5,
) -> tuple[list[int], list[bool]]:
    """Token ids plus per-token target mask for one record."""
    rendered = render_sequence(record, ontology, history_exchanges)
    ids = vocab.encode(rendered.tokens)
    mask = [False] * len(ids)
    for name in LOSS_SEGMENTS:
        a, b = rendered.spans[name]
        for i in range(a, b):
            mask[i] = True
    return ids, mask


def imitation_loss(
    backbone: torch.nn.Module, ids: torch.Tensor, target_mask: torch.Tensor
) -> torch.Tensor:
    """Mean negative log-likelihood over masked target positions.

    ``ids`` is [B, T]; ``target_mask`` marks which tokens count as prediction
    targets (position 0 can never be a target).
    """
    mask = target_mask.clone()
    mask[:, 0] = False
    if not bool(mask.any()):
        raise DegenerateBatchError("batch has no target tokens")
    logits = backbone(ids)
    logp = F.log_softmax(logits[:, :-1], dim=-1)
    targets = ids[:, 1:]
    token_logp = logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    tmask = mask[:, 1:]
    return -(token_logp * tmask).sum() / tmask.sum()


@dataclass
class SLConfig:
    lr: float = 1e-3
    epochs: int = 10
    batch_size: int = 32
    holdout_fraction: float = 0.1
    seed: int = 0
    grad_clip: float = 1.0


@dataclass
class SLResult:
    step_losses: list[float] = field(default_factory=list)
    holdout_perplexity: list[float] = field(default_factory=list)


def _batch_loss(
    backbone: torch.nn.Module,
    examples: list[tuple[list[int], list[bool]]],
    pad_id: int,
) -> torch.Tensor:
    ids, _ = pad_batch([e[0] for e in examples], pad_id)
    width = ids.size(1)
    mask = torch.zeros((len(examples), width), dtype=torch.bool)
    for i, (_, m) in enumerate(examples):
        mask[i, : len(m)] = torch.tensor(m, dtype=torch.bool)
    return imitation_loss(backbone, ids, mask)


def train_sl(
    backbone: torch.nn.Module,
    corpus: list[TurnRecord],
    ontology: Ontology,
    vocab: Vocabulary,
    config: SLConfig | None = None,
    history_exchanges: int = 5,
) -> SLResult:
    """Train in place; returns per-step losses and per-epoch held-out perplexity."""
    config = config or SLConfig()
    if not corpus:
        raise ValueError("corpus is empty")
    examples = [
        build_example(r, ontology, vocab, history_exchanges) for r in corpus
    ]
    rng = random.Random(config.seed)
    n_holdout = max(1, int(len(examples) * config.holdout_fraction))
    shuffled = list(examples)
    rng.shuffle(shuffled)
    holdout, train = shuffled[:n_holdout], shuffled[n_holdout:]
    if not train:
        raise ValueError("corpus too small for the configured holdout")

    optimizer = torch.optim.Adam(backbone.parameters(), lr=config.lr)
    steps_per_epoch = math.ceil(len(train) / config.batch_size)
    total_steps = max(1, steps_per_epoch * config.epochs)
    warmup = max(3, total_steps // 20)

    def lr_scale(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        span = max(1, total_steps - warmup)
        progress = min(1.0, (step - warmup) / span)
        return 0.1 + 0.9 * 0.5 * (1.0 + math.cos(math.pi * progress))

    scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lr_scale)
    result = SLResult()
    for epoch in range(config.epochs):
        order = list(range(len(train)))
        rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = [train[i] for i in order[start : start + config.batch_size]]
            loss = _batch_loss(backbone, batch, vocab.pad_id)
            if not math.isfinite(float(loss.detach())):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {len(result.step_losses)}"
                )
            optimizer.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(backbone.parameters(), config.grad_clip)
            optimizer.step()
            scheduler.step()
            result.step_losses.append(float(loss.detach()))
        result.holdout_perplexity.append(
            evaluate_perplexity(backbone, holdout, vocab.pad_id)
        )
    return result


@torch.no_grad()
def evaluate_perplexity(
    backbone: torch.nn.Module,
    examples: list[tuple[list[int], list[bool]]],
    pad_id: int,
    batch_size: int = 32,
) -> float:
    total_nll, total_tokens = 0.0, 0
    for start in range(0, len(examples), batch_size):
        batch = examples[start : start + batch_size]
        ids, _ = pad_batch([e[0] for e in batch], pad_id)
        width = ids.size(1)
        mask = torch.zeros((len(batch), width), dtype=torch.bool)
        for i, (_, m) in enumerate(batch):
            mask[i, : len(m)] = torch.tensor(m, dtype=torch.bool)
        mask[:, 0] = False
        logits = backbone(ids)
        logp = F.log_softmax(logits[:, :-1], dim=-1)
        token_logp = logp.gather(-1, ids[:, 1:].unsqueeze(-1)).squeeze(-1)
        tmask = mask[:, 1:]
        total_nll += float(-(token_logp * tmask).sum())
        total_tokens += int(tmask.sum())
    return math.exp(total_nll / max(total_tokens, 1))
