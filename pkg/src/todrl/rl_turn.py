"""Single-turn policy optimisation with token-level advantages.

A turn episode starts from the frozen context (history through the database
segment) and covers every generated token of the action, conduct, and
response segments. The terminal reward is the only non-zero reward; token
advantages come from generalised advantage estimation against the value head,
and the policy steps on a clipped surrogate with a KL penalty toward the
iteration-start policy.
"""

from __future__ import annotations

import copy
import math
import statistics
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .backbone import ValueHead, pad_batch
from .policy import TurnEpisode
from .seqformat import USER_EMOTIONS

DEFAULT_VALENCE = {
    "satisfied": 1,
    "dissatisfied": -1,
    "abusive": -1,
}


def valence(emotion: str, mapping: dict[str, int] | None = None) -> int:
    """Map an emotion token to {-1, 0, +1}."""
    if emotion not in USER_EMOTIONS:
        raise ValueError(f"unknown emotion token {emotion!r}")
    return (mapping or DEFAULT_VALENCE).get(emotion, 0)


def emotion_advantage(group: list[float]) -> list[float] | None:
    """Standardise a group of valences; a zero-variance group is dropped."""
    if len(group) < 2:
        raise ValueError("advantage groups need at least two samples")
    mean = statistics.fmean(group)
    var = statistics.fmean((x - mean) ** 2 for x in group)
    if var == 0.0:
        return None
    std = math.sqrt(var)
    return [(x - mean) / std for x in group]


def gae(
    rewards: list[float], values: list[float], gamma: float, lam: float
) -> list[float]:
    """Generalised advantage estimates with a zero terminal bootstrap."""
    if len(rewards) != len(values):
        raise ValueError("rewards and values must align")
    n = len(rewards)
    advantages = [0.0] * n
    running = 0.0
    for i in reversed(range(n)):
        next_value = values[i + 1] if i + 1 < n else 0.0
        delta = rewards[i] + gamma * next_value - values[i]
        running = delta + gamma * lam * running
        advantages[i] = running
    return advantages


def ppo_surrogate(
    old_logprobs: torch.Tensor,
    new_logprobs: torch.Tensor,
    advantages: torch.Tensor,
    epsilon: float,
    beta: float = 0.0,
    old_dist: torch.Tensor | None = None,
    new_dist: torch.Tensor | None = None,
) -> torch.Tensor:
    """Clipped-ratio policy loss plus a KL(old || new) penalty.

    Distributions, when given, are log-probability tensors [N, V] at the same
    token positions as the logprob vectors.
    """
    if not (0.0 < epsilon):
        raise ValueError("epsilon must be positive")
    ratio = torch.exp(new_logprobs - old_logprobs)
    if not torch.isfinite(ratio).all():
        raise FloatingPointError("non-finite probability ratio")
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - epsilon, 1.0 + epsilon) * advantages
    loss = -torch.minimum(unclipped, clipped).mean()
    if beta > 0.0 and old_dist is not None and new_dist is not None:
        kl = (old_dist.exp() * (old_dist - new_dist)).sum(-1)
        loss = loss + beta * kl.mean()
    return loss


@dataclass
class PPOConfig:
    lr: float = 1e-4
    batch_size: int = 16
    epsilon: float = 0.2
    beta: float = 0.02
    kl_ceiling: float = 2.0
    gamma_turn: float = 1.0
    lam: float = 0.99
    value_coef: float = 0.5
    grad_clip: float = 1.0


@dataclass
class PPOStats:
    mean_kl: float = 0.0
    clip_fraction: float = 0.0
    advantage_mean: float = 0.0
    advantage_std: float = 0.0
    loss: float = 0.0
    value_loss: float = 0.0
    batches: int = 0
    aborted_batches: int = 0

    def merge(self, other: "PPOStats") -> None:
        n, m = self.batches, other.batches
        if m == 0:
            return
        total = n + m
        for name in (
            "mean_kl", "clip_fraction", "advantage_mean", "advantage_std",
            "loss", "value_loss",
        ):
            mine, theirs = getattr(self, name), getattr(other, name)
            setattr(self, name, (mine * n + theirs * m) / total)
        self.batches = total
        self.aborted_batches += other.aborted_batches


class TurnPPOTrainer:
    """Owns the optimiser over the backbone and its value head."""

    def __init__(
        self,
        backbone: torch.nn.Module,
        value_head: ValueHead | None = None,
        config: PPOConfig | None = None,
        pad_id: int = 0,
    ):
        self.backbone = backbone
        self.config = config or PPOConfig()
        dtype = next(backbone.parameters()).dtype
        self.value_head = value_head or ValueHead(backbone.hidden_size, dtype=dtype)
        self.pad_id = pad_id
        self.optimizer = torch.optim.Adam(
            list(backbone.parameters()) + list(self.value_head.parameters()),
            lr=self.config.lr,
        )

    def update(self, episodes: list[TurnEpisode]) -> PPOStats:
        """One pass over the episodes in minibatches against a frozen reference."""
        if not episodes:
            return PPOStats()
        reference = copy.deepcopy(self.backbone)
        for p in reference.parameters():
            p.requires_grad_(False)
        stats = PPOStats()
        bs = self.config.batch_size
        for start in range(0, len(episodes), bs):
            batch = episodes[start : start + bs]
            stats.merge(self._step(batch, reference))
        return stats

    def _gather(
        self, episodes: list[TurnEpisode], model: torch.nn.Module
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Per-action-position (logprobs, log-distributions, values)."""
        seqs = [e.context + e.actions for e in episodes]
        ids, _ = pad_batch(seqs, self.pad_id)
        logits, hidden = model.forward_with_hidden(ids)
        logp = F.log_softmax(logits, dim=-1)
        values = self.value_head(hidden)
        lp_rows, dist_rows, value_rows = [], [], []
        for i, e in enumerate(episodes):
            pos = torch.arange(len(e.actions)) + len(e.context) - 1
            toks = torch.tensor(e.actions, dtype=torch.long)
            lp_rows.append(logp[i, pos, :].gather(-1, toks.unsqueeze(-1)).squeeze(-1))
            dist_rows.append(logp[i, pos, :])
            value_rows.append(values[i, pos])
        return torch.cat(lp_rows), torch.cat(dist_rows), torch.cat(value_rows)

    def _step(
        self, episodes: list[TurnEpisode], reference: torch.nn.Module
    ) -> PPOStats:
        cfg = self.config
        new_lp, new_dist, values = self._gather(episodes, self.backbone)
        with torch.no_grad():
            _, old_dist, _ = self._gather(episodes, reference)
        old_lp = torch.cat(
            [torch.tensor(e.logprobs, dtype=new_lp.dtype) for e in episodes]
        )

        advantages, returns = [], []
        values_detached = values.detach().tolist()
        offset = 0
        for e in episodes:
            n = len(e.actions)
            vals = values_detached[offset : offset + n]
            rewards = [0.0] * (n - 1) + [e.reward]
            advantages.extend(gae(rewards, vals, cfg.gamma_turn, cfg.lam))
            returns.extend(
                e.reward * cfg.gamma_turn ** (n - 1 - l) for l in range(n)
            )
            offset += n
        adv = torch.tensor(advantages, dtype=new_lp.dtype)
        ret = torch.tensor(returns, dtype=new_lp.dtype)

        with torch.no_grad():
            kl = (old_dist.exp() * (old_dist - new_dist)).sum(-1).mean()
            ratio = torch.exp(new_lp - old_lp)
            clip_frac = float(((ratio - 1.0).abs() > cfg.epsilon).float().mean())
        stats = PPOStats(
            mean_kl=float(kl),
            clip_fraction=clip_frac,
            advantage_mean=float(adv.mean()),
            advantage_std=float(adv.std(unbiased=False)),
            batches=1,
        )
        if float(kl) > cfg.kl_ceiling:
            stats.aborted_batches = 1
            return stats

        policy_loss = ppo_surrogate(
            old_lp, new_lp, adv, cfg.epsilon, cfg.beta, old_dist, new_dist
        )
        value_loss = F.mse_loss(values, ret)
        loss = policy_loss + cfg.value_coef * value_loss
        self.optimizer.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(
            list(self.backbone.parameters()) + list(self.value_head.parameters()),
            cfg.grad_clip,
        )
        self.optimizer.step()
        stats.loss = float(loss.detach())
        stats.value_loss = float(value_loss.detach())
        return stats
