"""Dialogue-level value critics over critic-formatted text.

Q scores a (state, action) text pair, V a state text; both are small
bidirectional encoders pooled at a reserved summary position with a linear
scalar head. Training follows temporal-difference targets computed from
slow-moving Polyak copies, and the resulting advantage Q - V is the
dialogue-level reward signal for the policy.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .seqformat import SEP, Vocabulary, tokenize


@dataclass
class Experience:
    """One dialogue-level transition for critic training."""

    state_text: str
    action_text: str
    reward: float
    next_state_text: str | None
    terminal: bool


def dialogue_reward(
    t: int,
    total_turns: int,
    success: bool,
    step_penalty: float = -1.0,
    success_bonus: float = 80.0,
    failure_penalty: float = -40.0,
) -> float:
    """Per-turn reward: a step penalty until the terminal turn's bonus."""
    if not (0 < t <= total_turns):
        raise ValueError(f"turn index {t} outside 1..{total_turns}")
    if t < total_turns:
        return step_penalty
    return success_bonus if success else failure_penalty


def combined_reward(advantage: float, terminal_reward: float, rho: float = 0.1) -> float:
    """Mix the dialogue advantage into the turn-level reward."""
    return rho * advantage + terminal_reward


@torch.no_grad()
def polyak(target_params, online_params, tau: float) -> None:
    """target <- (1 - tau) * target + tau * online, elementwise in place."""
    if not (0.0 < tau <= 1.0):
        raise ValueError("tau must lie in (0, 1]")
    targets, onlines = list(target_params), list(online_params)
    if len(targets) != len(onlines):
        raise ValueError("parameter lists differ in length")
    for t, o in zip(targets, onlines):
        if t.shape != o.shape:
            raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(o.shape)}")
        t.mul_(1.0 - tau).add_(o, alpha=tau)


class _BiAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=2)

        def heads(z: torch.Tensor) -> torch.Tensor:
            return z.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        att = att.masked_fill(~pad_mask[:, None, None, :], float("-inf"))
        y = F.softmax(att, dim=-1) @ v
        return self.proj(y.transpose(1, 2).contiguous().view(b, t, d))


class TextEncoder(nn.Module):
    """2-layer bidirectional encoder pooled at the leading summary token."""

    def __init__(
        self,
        vocab: Vocabulary,
        d_model: int = 64,
        n_heads: int = 4,
        n_layers: int = 2,
        max_len: int = 256,
        seed: int = 0,
    ):
        super().__init__()
        torch.manual_seed(seed)
        self.vocab = vocab
        self.max_len = max_len
        self.tok_emb = nn.Embedding(len(vocab), d_model)
        self.pos_emb = nn.Embedding(max_len, d_model)
        self.attn = nn.ModuleList(_BiAttention(d_model, n_heads) for _ in range(n_layers))
        self.norms1 = nn.ModuleList(nn.LayerNorm(d_model) for _ in range(n_layers))
        self.norms2 = nn.ModuleList(nn.LayerNorm(d_model) for _ in range(n_layers))
        self.mlps = nn.ModuleList(
            nn.Sequential(nn.Linear(d_model, 4 * d_model), nn.GELU(), nn.Linear(4 * d_model, d_model))
            for _ in range(n_layers)
        )
        self.ln_f = nn.LayerNorm(d_model)
        self._d_model = d_model

    @property
    def hidden_size(self) -> int:
        return self._d_model

    def encode_batch(self, texts: list[str]) -> torch.Tensor:
        rows = []
        for text in texts:
            ids = [self.vocab.sum_id] + self.vocab.encode(tokenize(text))
            rows.append(ids[: self.max_len])
        width = max(len(r) for r in rows)
        ids = torch.full((len(rows), width), self.vocab.pad_id, dtype=torch.long)
        mask = torch.zeros((len(rows), width), dtype=torch.bool)
        for i, r in enumerate(rows):
            ids[i, : len(r)] = torch.tensor(r, dtype=torch.long)
            mask[i, : len(r)] = True
        x = self.tok_emb(ids) + self.pos_emb(torch.arange(width))[None, :, :]
        for attn, n1, n2, mlp in zip(self.attn, self.norms1, self.norms2, self.mlps):
            x = x + attn(n1(x), mask)
            x = x + mlp(n2(x))
        return self.ln_f(x)[:, 0, :]


class TabularTextEncoder(nn.Module):
    """Exact one-hot featureiser over a closed, fixed set of texts.

    The text-to-index map is frozen at construction so that online and target
    copies of a critic agree on which head weight belongs to which text.
    """

    def __init__(self, texts: list[str]):
        super().__init__()
        self.index = {t: i for i, t in enumerate(dict.fromkeys(texts))}
        self._marker = nn.Parameter(torch.zeros(1), requires_grad=False)

    @property
    def hidden_size(self) -> int:
        return len(self.index)

    def encode_batch(self, texts: list[str]) -> torch.Tensor:
        out = torch.zeros((len(texts), len(self.index)))
        for i, text in enumerate(texts):
            if text not in self.index:
                raise KeyError(f"text not in the tabular closed set: {text!r}")
            out[i, self.index[text]] = 1.0
        return out


class Critic(nn.Module):
    """Scalar value of a state text, or of a state-action text pair."""

    def __init__(self, encoder: nn.Module, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.encoder = encoder
        self.head = nn.Linear(encoder.hidden_size, 1)
        nn.init.zeros_(self.head.bias)

    def forward(self, states: list[str], actions: list[str] | None = None) -> torch.Tensor:
        if actions is None:
            texts = states
        else:
            texts = [f"{s} {SEP} {a}" for s, a in zip(states, actions)]
        return self.head(self.encoder.encode_batch(texts)).squeeze(-1)


def q_loss(
    critic_q: Critic,
    target_v: Critic,
    batch: list[Experience],
    gamma_dial: float,
) -> torch.Tensor:
    """Mean squared TD error of Q against r + gamma * V_target(s')."""
    q = critic_q([e.state_text for e in batch], [e.action_text for e in batch])
    with torch.no_grad():
        rewards = torch.tensor([e.reward for e in batch], dtype=q.dtype)
        next_states = [e.next_state_text or "" for e in batch]
        v_next = target_v(next_states)
        live = torch.tensor([0.0 if e.terminal else 1.0 for e in batch], dtype=q.dtype)
        target = rewards + gamma_dial * v_next * live
    return F.mse_loss(q, target)


def v_loss(
    critic_v: Critic,
    target_q: Critic,
    batch: list[Experience],
    fresh_actions: list[list[str]] | None = None,
) -> torch.Tensor:
    """Bellman-consistency loss of V against Q_target under policy actions.

    Each state's target averages the stored action with any freshly sampled
    action texts supplied for it.
    """
    states = [e.state_text for e in batch]
    v = critic_v(states)
    with torch.no_grad():
        flat_states, flat_actions, owners = [], [], []
        for i, e in enumerate(batch):
            samples = [e.action_text]
            if fresh_actions is not None and fresh_actions[i]:
                samples.extend(fresh_actions[i])
            for a in samples:
                flat_states.append(e.state_text)
                flat_actions.append(a)
                owners.append(i)
        q = target_q(flat_states, flat_actions)
        target = torch.zeros(len(batch), dtype=v.dtype)
        counts = torch.zeros(len(batch), dtype=v.dtype)
        for j, owner in enumerate(owners):
            target[owner] += q[j]
            counts[owner] += 1.0
        target = target / counts
    return F.mse_loss(v, target)


def dialogue_advantage(
    critic_q: Critic, critic_v: Critic, state_text: str, action_text: str
) -> float:
    """How much better the taken action is than the state's expected value."""
    with torch.no_grad():
        q = float(critic_q([state_text], [action_text])[0])
        v = float(critic_v([state_text])[0])
    return q - v


@dataclass
class CriticConfig:
    lr: float = 5e-4
    batch_size: int = 32
    epochs: int = 5
    grad_clip: float = 40.0
    gamma_dial: float = 0.99
    tau: float = 0.01


class CriticTrainer:
    """Paired Q/V critics with delayed Polyak targets."""

    def __init__(
        self,
        critic_q: Critic,
        critic_v: Critic,
        config: CriticConfig | None = None,
    ):
        self.config = config or CriticConfig()
        self.q = critic_q
        self.v = critic_v
        self.q_target = copy.deepcopy(critic_q)
        self.v_target = copy.deepcopy(critic_v)
        for p in self.q_target.parameters():
            p.requires_grad_(False)
        for p in self.v_target.parameters():
            p.requires_grad_(False)
        self.opt_q = torch.optim.Adam(self.q.parameters(), lr=self.config.lr)
        self.opt_v = torch.optim.Adam(self.v.parameters(), lr=self.config.lr)

    def step(
        self,
        batch: list[Experience],
        fresh_actions: list[list[str]] | None = None,
    ) -> tuple[float, float]:
        """One TD step on each critic followed by target Polyak updates."""
        cfg = self.config
        lq = q_loss(self.q, self.v_target, batch, cfg.gamma_dial)
        self.opt_q.zero_grad()
        lq.backward()
        torch.nn.utils.clip_grad_norm_(self.q.parameters(), cfg.grad_clip)
        self.opt_q.step()

        lv = v_loss(self.v, self.q_target, batch, fresh_actions)
        self.opt_v.zero_grad()
        lv.backward()
        torch.nn.utils.clip_grad_norm_(self.v.parameters(), cfg.grad_clip)
        self.opt_v.step()

        polyak(self.q_target.parameters(), self.q.parameters(), cfg.tau)
        polyak(self.v_target.parameters(), self.v.parameters(), cfg.tau)
        return float(lq.detach()), float(lv.detach())

    def advantage(self, state_text: str, action_text: str) -> float:
        return dialogue_advantage(self.q, self.v, state_text, action_text)
