"""Trainable autoregressive backbones over the word-level vocabulary.

Two implementations of the same contract:

* :class:`TinyTransformer` — a 2-layer causal self-attention model, the
  default policy backbone. Supports incremental decoding with a per-layer
  key/value cache so rollouts cost O(tokens) rather than O(tokens^2) forwards.
* :class:`BigramBackbone` — a logit-table micro model (vocab^2 parameters)
  used for finite-difference gradient checks and bandit sanity runs.

The contract every consumer relies on: ``forward(idx) -> logits`` over the
full vocabulary at every position, ``forward_with_hidden`` additionally
returning the representation the value head projects, exact parameter
snapshot/restore, and log-probabilities that equal per-step log-softmax
scores under teacher forcing.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@contextmanager
def single_thread_inference():
    """Single-threaded torch for incremental decoding.

    Tiny per-token ops pay more in thread synchronisation than they gain in
    parallelism; rollouts run several times faster on one thread.
    """
    previous = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(previous)


@dataclass
class TransformerConfig:
    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 512
    max_len: int = 768


class KVCache:
    """Per-layer key/value tensors accumulated during incremental decode."""

    def __init__(self, n_layers: int):
        self.keys: list[torch.Tensor | None] = [None] * n_layers
        self.values: list[torch.Tensor | None] = [None] * n_layers
        self.length = 0

    def clone(self) -> "KVCache":
        c = KVCache(len(self.keys))
        c.keys = [k.clone() if k is not None else None for k in self.keys]
        c.values = [v.clone() if v is not None else None for v in self.values]
        c.length = self.length
        return c


class _Attention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(
        self,
        x: torch.Tensor,
        layer: int,
        cache: KVCache | None = None,
    ) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).split(d, dim=2)

        def heads(z: torch.Tensor) -> torch.Tensor:
            return z.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(q), heads(k), heads(v)
        offset = 0
        if cache is not None:
            if cache.keys[layer] is not None:
                k = torch.cat([cache.keys[layer], k], dim=2)
                v = torch.cat([cache.values[layer], v], dim=2)
            cache.keys[layer], cache.values[layer] = k, v
            offset = k.size(2) - t
        att = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        s = k.size(2)
        mask = torch.ones(t, s, dtype=torch.bool, device=x.device).tril(diagonal=offset)
        att = att.masked_fill(~mask, float("-inf"))
        y = F.softmax(att, dim=-1) @ v
        y = y.transpose(1, 2).contiguous().view(b, t, d)
        return self.proj(y)


class _Block(nn.Module):
    def __init__(self, cfg: TransformerConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = _Attention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.mlp = nn.Sequential(
            nn.Linear(cfg.d_model, cfg.d_ff),
            nn.GELU(),
            nn.Linear(cfg.d_ff, cfg.d_model),
        )

    def forward(
        self, x: torch.Tensor, layer: int, cache: KVCache | None = None
    ) -> torch.Tensor:
        x = x + self.attn(self.ln1(x), layer, cache)
        return x + self.mlp(self.ln2(x))


class TinyTransformer(nn.Module):
    """Small causal LM; width and depth sized for CPU-scale experiments."""

    def __init__(self, cfg: TransformerConfig, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.lm_head.weight = self.tok_emb.weight
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    @property
    def hidden_size(self) -> int:
        return self.cfg.d_model

    def _embed(self, idx: torch.Tensor, offset: int) -> torch.Tensor:
        t = idx.size(1)
        if offset + t > self.cfg.max_len:
            raise ValueError(
                f"sequence length {offset + t} exceeds max_len {self.cfg.max_len}"
            )
        pos = torch.arange(offset, offset + t, device=idx.device)
        return self.tok_emb(idx) + self.pos_emb(pos)[None, :, :]

    def forward_with_hidden(
        self, idx: torch.Tensor, cache: KVCache | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        offset = cache.length if cache is not None else 0
        x = self._embed(idx, offset)
        for layer, block in enumerate(self.blocks):
            x = block(x, layer, cache)
        if cache is not None:
            cache.length = offset + idx.size(1)
        hidden = self.ln_f(x)
        return self.lm_head(hidden), hidden

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        logits, _ = self.forward_with_hidden(idx)
        return logits

    # -- contract helpers ----------------------------------------------------

    @torch.no_grad()
    def next_token_logits(self, tokens: list[int]) -> torch.Tensor:
        idx = torch.tensor([tokens], dtype=torch.long)
        return self.forward(idx)[0, -1]

    @torch.no_grad()
    def per_token_logprobs(
        self, context: list[int], continuation: list[int]
    ) -> list[float]:
        """Teacher-forced log p(continuation_i | context, continuation_<i)."""
        full = torch.tensor([context + continuation], dtype=torch.long)
        logits = self.forward(full)[0]
        logp = F.log_softmax(logits, dim=-1)
        start = len(context) - 1
        out = []
        for i, tok in enumerate(continuation):
            out.append(float(logp[start + i, tok]))
        return out

    def sequence_logprob(self, context: list[int], continuation: list[int]) -> float:
        return float(sum(self.per_token_logprobs(context, continuation)))

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    def restore(self, snap: dict[str, torch.Tensor]) -> None:
        self.load_state_dict(snap)


class DecodeSession:
    """Incremental decoding over one growing sequence, with cache forking."""

    def __init__(self, backbone: TinyTransformer):
        self.backbone = backbone
        self.cache = KVCache(backbone.cfg.n_layers)
        self.tokens: list[int] = []
        self._last_logits: torch.Tensor | None = None

    def __len__(self) -> int:
        return len(self.tokens)

    @torch.no_grad()
    def feed(self, tokens: list[int]) -> torch.Tensor:
        """Append tokens; returns the next-token logits after the last one."""
        if not tokens:
            if self._last_logits is None:
                raise ValueError("cannot ask for logits of an empty session")
            return self._last_logits
        idx = torch.tensor([tokens], dtype=torch.long)
        logits, _ = self.backbone.forward_with_hidden(idx, self.cache)
        self.tokens.extend(tokens)
        self._last_logits = logits[0, -1]
        return self._last_logits

    def fork(self) -> "DecodeSession":
        s = DecodeSession(self.backbone)
        s.cache = self.cache.clone()
        s.tokens = list(self.tokens)
        s._last_logits = (
            self._last_logits.clone() if self._last_logits is not None else None
        )
        return s

    @torch.no_grad()
    def sample(
        self,
        temperature: float,
        stop_token: int,
        max_len: int,
        generator: torch.Generator | None = None,
        allowed: list[int] | None = None,
    ) -> tuple[list[int], list[float]]:
        """Sample until the stop token; returns tokens and untempered logprobs.

        ``temperature <= 0`` selects greedily. ``allowed`` restricts sampling
        to a candidate id set (logprobs stay full-vocabulary log-softmax).
        """
        out: list[int] = []
        logprobs: list[float] = []
        logits = self.feed([])
        for _ in range(max_len):
            full_logp = F.log_softmax(logits, dim=-1)
            if allowed is not None:
                masked = torch.full_like(logits, float("-inf"))
                masked[allowed] = logits[allowed]
                work = masked
            else:
                work = logits
            if temperature <= 0:
                tok = int(torch.argmax(work))
            else:
                probs = F.softmax(work / temperature, dim=-1)
                tok = int(
                    torch.multinomial(probs, num_samples=1, generator=generator)
                )
            out.append(tok)
            logprobs.append(float(full_logp[tok]))
            logits = self.feed([tok])
            if tok == stop_token:
                break
        return out, logprobs


class BigramBackbone(nn.Module):
    """Logit-table model: logits for position i depend on token i only."""

    def __init__(self, vocab_size: int, dtype: torch.dtype = torch.float64):
        super().__init__()
        self.vocab_size = vocab_size
        self.table = nn.Parameter(torch.zeros(vocab_size, vocab_size, dtype=dtype))

    @property
    def hidden_size(self) -> int:
        return self.vocab_size

    def forward_with_hidden(self, idx: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        logits = self.table[idx]
        return logits, logits

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        return self.table[idx]

    @torch.no_grad()
    def per_token_logprobs(self, context: list[int], continuation: list[int]) -> list[float]:
        full = torch.tensor([context + continuation], dtype=torch.long)
        logp = F.log_softmax(self.forward(full)[0], dim=-1)
        start = len(context) - 1
        return [float(logp[start + i, tok]) for i, tok in enumerate(continuation)]

    def sequence_logprob(self, context: list[int], continuation: list[int]) -> float:
        return float(sum(self.per_token_logprobs(context, continuation)))

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.state_dict().items()}

    def restore(self, snap: dict[str, torch.Tensor]) -> None:
        self.load_state_dict(snap)


class ValueHead(nn.Module):
    """Scalar projection of the backbone's final representation per position."""

    def __init__(self, hidden_size: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.proj = nn.Linear(hidden_size, 1, dtype=dtype)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.proj(hidden).squeeze(-1)


def pad_batch(
    sequences: list[list[int]], pad_id: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad to a rectangle; returns (ids, boolean real-token mask)."""
    width = max(len(s) for s in sequences)
    ids = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(sequences), width), dtype=torch.bool)
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        mask[i, : len(s)] = True
    return ids, mask
