"""Shared test utilities: independent oracles and random-instance generators."""

from __future__ import annotations

import random

from todrl.ontology import (
    DONTCARE,
    UNKNOWN,
    Database,
    DialogueState,
    Entity,
    Ontology,
    normalize_value,
)
from todrl.rl_dialogue import Experience
from todrl.seqformat import TurnRecord


def linear_scan_query(db: Database, domain: str, state: DialogueState) -> list[Entity]:
    """Brute-force reference for the database query."""
    if domain == "general":
        return []
    out = []
    for e in db.entities(domain):
        keep = True
        for slot, value in state.slots.items():
            if value in (UNKNOWN, DONTCARE):
                continue
            if e.attributes.get(slot) != normalize_value(value):
                keep = False
                break
        if keep:
            out.append(e)
    return out


def random_state(ontology: Ontology, domain: str, rng: random.Random) -> DialogueState:
    state = DialogueState.empty(ontology, domain)
    spec = ontology.domain(domain)
    for slot in spec.slots:
        roll = rng.random()
        if roll < 0.4:
            state.slots[slot.name] = UNKNOWN
        elif roll < 0.55:
            state.slots[slot.name] = DONTCARE
        elif slot.kind == "categorical":
            state.slots[slot.name] = rng.choice(slot.values)
        else:
            state.slots[slot.name] = f"{rng.randint(5, 23):02d}:{rng.randint(0, 59):02d}"
    return state


_WORDS = (
    "please find me cheap nice cosy town centre thanks good evening table "
    "seat mill road maybe tomorrow morning quick lovely"
).split()

_INTENTS = ("inform", "request", "offer", "book", "nomatch", "greet", "bye")


def random_record(ontology: Ontology, rng: random.Random) -> TurnRecord:
    """A structurally valid random turn record over a small word pool."""
    domain = rng.choice([d for d in ontology.domain_names])
    n_hist = rng.choice([1, 3, 5])
    history = []
    for i in range(n_hist):
        speaker = "user" if (n_hist - 1 - i) % 2 == 0 else "system"
        history.append(
            (speaker, " ".join(rng.choice(_WORDS) for _ in range(rng.randint(1, 6))))
        )
    state = random_state(ontology, domain, rng)
    actions = []
    for _ in range(rng.randint(1, 3)):
        intent = rng.choice(_INTENTS)
        if intent in ("greet", "bye", "nomatch"):
            actions.append((intent, "none", "none"))
        elif intent == "request":
            spec = ontology.domain(domain)
            slot = rng.choice(spec.attribute_names) if spec.attributes else "none"
            actions.append((intent, slot, "?"))
        else:
            spec = ontology.domain(domain)
            slot = rng.choice(spec.attribute_names) if spec.attributes else "none"
            value = " ".join(rng.choice(_WORDS) for _ in range(rng.randint(1, 2)))
            actions.append((intent, slot, value))
    emotions = ("neutral", "fearful", "dissatisfied", "apologetic", "abusive",
                "excited", "satisfied")
    conducts = ("neutral", "compassionate", "apologetic", "enthusiastic",
                "appreciative")
    return TurnRecord(
        history=history,
        emotion=rng.choice(emotions),
        domain=domain,
        state=state,
        db_text="0 found :" if domain != "general" else "database not available",
        actions=actions,
        conduct=rng.choice(conducts),
        response=" ".join(rng.choice(_WORDS) for _ in range(rng.randint(1, 8))),
    )


def gae_direct_sum(rewards, values, gamma, lam):
    """O(L^2) double-sum reference for generalised advantage estimation."""
    n = len(rewards)
    deltas = []
    for i in range(n):
        next_v = values[i + 1] if i + 1 < n else 0.0
        deltas.append(rewards[i] + gamma * next_v - values[i])
    out = []
    for i in range(n):
        total = 0.0
        for j in range(n - i):
            total += (gamma * lam) ** j * deltas[i + j]
        out.append(total)
    return out


# ---------------------------------------------------------------------------
# 3-state chain MDP with a uniform-random behavior policy


CHAIN_STATES = ("s0", "s1", "s2")
CHAIN_ACTIONS = ("advance", "stay")

CHAIN_V_TEXTS = ["s0", "s1", "s2", ""]
CHAIN_Q_TEXTS = [
    f"{s} <sep> {a}" for s in ("s0", "s1") for a in CHAIN_ACTIONS
]


def chain_step(state: str, action: str) -> tuple[str, float, bool]:
    i = CHAIN_STATES.index(state)
    if action == "advance":
        nxt = CHAIN_STATES[i + 1]
        if nxt == "s2":
            return nxt, 80.0, True
        return nxt, -1.0, False
    return state, -1.0, False


def chain_analytic(gamma: float) -> tuple[dict, dict]:
    """Fixed-point iteration of the Bellman equations under a uniform policy."""
    q = {(s, a): 0.0 for s in ("s0", "s1") for a in CHAIN_ACTIONS}
    v = {"s0": 0.0, "s1": 0.0, "s2": 0.0}
    for _ in range(20000):
        for s in ("s0", "s1"):
            for a in CHAIN_ACTIONS:
                nxt, r, terminal = chain_step(s, a)
                q[(s, a)] = r + (0.0 if terminal else gamma * v[nxt])
        for s in ("s0", "s1"):
            v[s] = 0.5 * (q[(s, "advance")] + q[(s, "stay")])
    return q, v


def chain_experiences(n_episodes: int, seed: int) -> list[Experience]:
    rng = random.Random(seed)
    out = []
    for _ in range(n_episodes):
        state = "s0"
        for _ in range(200):
            action = rng.choice(CHAIN_ACTIONS)
            nxt, reward, terminal = chain_step(state, action)
            out.append(
                Experience(
                    state_text=state,
                    action_text=action,
                    reward=reward,
                    next_state_text=None if terminal else nxt,
                    terminal=terminal,
                )
            )
            if terminal:
                break
            state = nxt
    return out
