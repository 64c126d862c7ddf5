"""Fixed-capacity dialogue buffer with reservoir retention and IS reweighting.

The buffer unit is a whole dialogue (its turns share TD targets). While the
buffer is below capacity every push appends; once full, a push replaces a
uniformly random slot with probability capacity/seen, giving every dialogue in
the stream an equal retention chance. At each training interval the oldest
dialogues are discarded to make room for fresh on-policy data.

Replayed (off-policy) rewards are scaled by a clipped likelihood ratio of the
dialogue-action intent and slot tokens under the current versus the behavior
policy.
"""

from __future__ import annotations

import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .backbone import pad_batch
from .policy import TurnEpisode
from .rl_dialogue import Experience


@dataclass
class BufferedTurn:
    episode: TurnEpisode
    experience: Experience | None = None
    candidates: list[TurnEpisode] = field(default_factory=list)


@dataclass
class BufferedDialogue:
    turns: list[BufferedTurn]
    success: bool = False
    version: int = 0
    sequence: int = 0  # insertion counter value at push time


class ReplayBuffer:
    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = random.Random(seed)
        self.dialogues: list[BufferedDialogue] = []
        self.counter = 0

    def __len__(self) -> int:
        return len(self.dialogues)

    def push(self, dialogue: BufferedDialogue) -> None:
        """Reservoir step: append while filling, then replace uniformly."""
        if not dialogue.turns:
            raise ValueError("refusing to buffer an empty dialogue")
        self.counter += 1
        dialogue.sequence = self.counter
        if len(self.dialogues) < self.capacity:
            self.dialogues.append(dialogue)
            return
        j = self.rng.randrange(self.counter)
        if j < self.capacity:
            self.dialogues[j] = dialogue

    def discard_oldest(self, k: int) -> int:
        """Drop the k oldest dialogues (by insertion order); returns count dropped."""
        if k <= 0 or not self.dialogues:
            return 0
        order = sorted(self.dialogues, key=lambda d: d.sequence)
        doomed = {id(d) for d in order[:k]}
        before = len(self.dialogues)
        self.dialogues = [d for d in self.dialogues if id(d) not in doomed]
        return before - len(self.dialogues)

    def experiences(self) -> list[Experience]:
        return [
            t.experience
            for d in self.dialogues
            for t in d.turns
            if t.experience is not None
        ]

    def save(self, path: str | Path) -> None:
        data = {
            "capacity": self.capacity,
            "counter": self.counter,
            "dialogues": [_dialogue_to_dict(d) for d in self.dialogues],
        }
        Path(path).write_text(json.dumps(data))

    @classmethod
    def load(cls, path: str | Path, seed: int = 0) -> "ReplayBuffer":
        data = json.loads(Path(path).read_text())
        buf = cls(data["capacity"], seed)
        buf.counter = data["counter"]
        buf.dialogues = [_dialogue_from_dict(d) for d in data["dialogues"]]
        return buf


def clipped_is_weight(new_logprob: float, old_logprob: float, eta: float = 0.9) -> float:
    """clip(exp(new - old), 1 - eta, 1 + eta)."""
    if not (0.0 <= eta <= 1.0):
        raise ValueError("eta must lie in [0, 1]")
    ratio = math.exp(new_logprob - old_logprob)
    return min(max(ratio, 1.0 - eta), 1.0 + eta)


@torch.no_grad()
def intent_slot_logprobs(
    backbone: torch.nn.Module,
    episodes: list[TurnEpisode],
    pad_id: int,
    batch_size: int = 32,
) -> list[float]:
    """Current-policy log-probability of each episode's intent+slot tokens."""
    out: list[float] = []
    for start in range(0, len(episodes), batch_size):
        chunk = episodes[start : start + batch_size]
        ids, _ = pad_batch([e.context + e.actions for e in chunk], pad_id)
        logits = backbone(ids)
        logp = F.log_softmax(logits, dim=-1)
        for i, e in enumerate(chunk):
            if e.logprobs is None or len(e.logprobs) != len(e.actions):
                raise ValueError("episode is missing behavior log-probabilities")
            total = 0.0
            base = len(e.context) - 1
            for pos in e.intent_slot_positions:
                total += float(logp[i, base + pos, e.actions[pos]])
            out.append(total)
    return out


def is_weight(
    backbone: torch.nn.Module,
    episode: TurnEpisode,
    pad_id: int,
    eta: float = 0.9,
) -> float:
    """Clipped intent+slot likelihood ratio for one stored episode."""
    new_lp = intent_slot_logprobs(backbone, [episode], pad_id)[0]
    return clipped_is_weight(new_lp, episode.intent_slot_logprob(), eta)


def replay_rewards(
    entries: list[tuple[TurnEpisode, float]],
    backbone: torch.nn.Module,
    current_version: int,
    pad_id: int,
    eta: float = 0.9,
) -> list[float]:
    """Effective rewards: off-policy entries scaled by their clipped IS weight."""
    off = [(i, e) for i, (e, _) in enumerate(entries) if e.policy_version != current_version]
    weights = [1.0] * len(entries)
    if off:
        new_lps = intent_slot_logprobs(backbone, [e for _, e in off], pad_id)
        for (i, e), new_lp in zip(off, new_lps):
            weights[i] = clipped_is_weight(new_lp, e.intent_slot_logprob(), eta)
    return [w * r for w, (_, r) in zip(weights, entries)]


def _episode_to_dict(e: TurnEpisode) -> dict:
    return {
        "context": e.context,
        "actions": e.actions,
        "logprobs": e.logprobs,
        "intent_slot_positions": e.intent_slot_positions,
        "reward": e.reward,
        "policy_version": e.policy_version,
    }


def _episode_from_dict(d: dict) -> TurnEpisode:
    return TurnEpisode(
        context=list(d["context"]),
        actions=list(d["actions"]),
        logprobs=list(d["logprobs"]),
        intent_slot_positions=list(d["intent_slot_positions"]),
        reward=d["reward"],
        policy_version=d["policy_version"],
    )


def _dialogue_to_dict(d: BufferedDialogue) -> dict:
    return {
        "success": d.success,
        "version": d.version,
        "sequence": d.sequence,
        "turns": [
            {
                "episode": _episode_to_dict(t.episode),
                "candidates": [_episode_to_dict(c) for c in t.candidates],
                "experience": (
                    {
                        "state_text": t.experience.state_text,
                        "action_text": t.experience.action_text,
                        "reward": t.experience.reward,
                        "next_state_text": t.experience.next_state_text,
                        "terminal": t.experience.terminal,
                    }
                    if t.experience is not None
                    else None
                ),
            }
            for t in d.turns
        ],
    }


def _dialogue_from_dict(data: dict) -> BufferedDialogue:
    turns = []
    for t in data["turns"]:
        exp = t["experience"]
        turns.append(
            BufferedTurn(
                episode=_episode_from_dict(t["episode"]),
                candidates=[_episode_from_dict(c) for c in t["candidates"]],
                experience=Experience(**exp) if exp else None,
            )
        )
    return BufferedDialogue(
        turns=turns,
        success=data["success"],
        version=data["version"],
        sequence=data["sequence"],
    )
