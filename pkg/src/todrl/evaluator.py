"""Dialogue-level evaluation: task success, sentiment, concept errors,
linguistic statistics, and the pairwise judge comparison client.

Success demands both halves of the goal contract: every requested attribute's
true value (from an entity consistent with the stated constraints) was
actually said by the system, and the entity the system last committed to per
domain satisfies every constraint.
"""

from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field

import requests

from .ontology import Database, DialogueState, Ontology, UserGoal, query
from .rl_turn import valence
from .seqformat import TurnRecord
from .user_sim import identifier_attribute


@dataclass
class LoggedTurn:
    record: TurnRecord
    user_utterance: str
    user_emotion: str


@dataclass
class DialogueLog:
    goal: UserGoal
    turns: list[LoggedTurn]
    completed: bool = False

    def to_dict(self) -> dict:
        return {
            "goal": self.goal.to_dict(),
            "completed": self.completed,
            "turns": [
                {
                    "user": t.user_utterance,
                    "user_emotion": t.user_emotion,
                    "record": t.record.to_dict(),
                }
                for t in self.turns
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DialogueLog":
        return cls(
            goal=UserGoal.from_dict(data["goal"]),
            completed=data["completed"],
            turns=[
                LoggedTurn(
                    record=TurnRecord.from_dict(t["record"]),
                    user_utterance=t["user"],
                    user_emotion=t["user_emotion"],
                )
                for t in data["turns"]
            ],
        )


def _contains_tokens(text: str, value: str) -> bool:
    return f" {value} " in f" {text} "


def _goal_state(ontology: Ontology, domain: str, informable: dict[str, str]) -> DialogueState:
    state = DialogueState.empty(ontology, domain)
    for slot, value in informable.items():
        state.slots[slot] = value
    return state


def check_success(log: DialogueLog, db: Database, ontology: Ontology) -> bool:
    """True iff every requested attribute was truthfully delivered and the
    final committed entity per domain satisfies the constraints."""
    responses = [t.record.response for t in log.turns]
    all_text = " . ".join(responses)

    offered_last: dict[str, str] = {}
    for t in log.turns:
        domain = t.record.domain
        if domain not in log.goal.domains:
            continue
        ident = identifier_attribute(ontology, domain)
        for intent, slot, value in t.record.actions:
            if not value or value in ("?", "none"):
                continue
            if intent in ("offer", "book") or (intent == "inform" and slot == ident):
                offered_last[domain] = value

    for domain, g in log.goal.domains.items():
        consistent = query(db, domain, _goal_state(ontology, domain, g.informable))
        if not consistent:
            return False
        for attr in g.requestable:
            truths = {e.attributes[attr] for e in consistent}
            if not any(_contains_tokens(all_text, v) for v in truths):
                return False
        if domain in offered_last:
            entity = db.find_by_name(domain, offered_last[domain])
            if entity is None:
                return False
            if any(
                entity.attributes.get(slot) != value
                for slot, value in g.informable.items()
            ):
                return False
    return True


def avg_sentiment(logs: list[DialogueLog]) -> float:
    """Mean per-turn valence of the simulated user across all dialogues."""
    values = [valence(t.user_emotion) for log in logs for t in log.turns]
    if not values:
        raise ValueError("no turns to score")
    return sum(values) / len(values)


def concept_errors(
    turn: TurnRecord,
    grounded: list,
    ontology: Ontology,
    db: Database | None = None,
) -> tuple[int, int]:
    """(hallucinated, missing) value counts for one system turn.

    A claim is hallucinated when its value does not appear among the grounded
    entities for its slot; an informed value is missing when it never surfaces
    in the response text. Response-surface values of requestable attributes
    are also screened against the grounding.
    """
    domain = turn.domain
    posed: set[tuple[str, str]] = set()
    informed: list[tuple[str, str]] = []
    if ontology.has_domain(domain) and domain != "general":
        ident = identifier_attribute(ontology, domain)
    else:
        ident = "name"
    for intent, slot, value in turn.actions:
        if not value or value in ("?", "none"):
            continue
        if intent in ("offer", "book"):
            slot = ident
        if intent in ("inform", "offer", "book"):
            posed.add((slot, value))
            informed.append((slot, value))

    if db is not None and ontology.has_domain(domain) and domain != "general":
        for attr in ontology.domain(domain).requestables:
            for value in db.value_pool(domain, attr):
                if _contains_tokens(turn.response, value):
                    posed.add((attr, value))

    hallucinated = 0
    for slot, value in posed:
        grounded_values = {
            e.attributes[slot] for e in grounded if slot in e.attributes
        }
        if value not in grounded_values:
            hallucinated += 1

    missing = sum(
        1 for slot, value in informed if not _contains_tokens(turn.response, value)
    )
    return hallucinated, missing


def error_rate(logs: list[DialogueLog], db: Database, ontology: Ontology) -> float:
    """Fraction of system turns carrying at least one concept error."""
    turns = 0
    errors = 0
    for log in logs:
        for t in log.turns:
            turns += 1
            grounded = query(db, t.record.domain, t.record.state)
            h, m = concept_errors(t.record, grounded, ontology, db)
            if h + m > 0:
                errors += 1
    return errors / max(turns, 1)


def linguistic_stats(logs: list[DialogueLog]) -> dict[str, float]:
    """Turn counts, response lengths, vocabulary, and log type-token ratio."""
    if not logs:
        raise ValueError("no logs")
    n_turns = [len(log.turns) for log in logs]
    sys_tokens: list[int] = []
    vocab: set[str] = set()
    logttrs: list[float] = []
    for log in logs:
        tokens = [tok for t in log.turns for tok in t.record.response.split()]
        for t in log.turns:
            sys_tokens.append(len(t.record.response.split()))
        vocab.update(tokens)
        if len(tokens) > 1:
            unique = len(set(tokens))
            logttrs.append(math.log(unique) / math.log(len(tokens)))
    return {
        "avg_turns": sum(n_turns) / len(n_turns),
        "avg_tokens_per_system_turn": sum(sys_tokens) / max(len(sys_tokens), 1),
        "vocab_size": float(len(vocab)),
        "avg_logttr": sum(logttrs) / len(logttrs) if logttrs else 0.0,
    }


class JudgeUnavailableError(RuntimeError):
    """The judge endpoint failed to return a parseable verdict."""


@dataclass
class JudgeVerdict:
    judgement: str  # "A" | "B" | "tie"
    explanation: str


JUDGE_PROMPT = """\
Two dialogue systems, system_A and system_B, each talked to the same user to \
complete the same information retrieval goal. Act as a judge and decide which \
system performed better overall, weighing task success, how informative the \
responses were, the emotional quality of the interaction, dialogue length, \
and language variety.

The dialogue with system_A as a json list:
{dialogue_a}

The dialogue with system_B as a json list:
{dialogue_b}

Reply with a json object of the form:
{{"judgement": "system_A, system_B, or tie", "explanation": "why"}}
"""


def serialize_dialogue(log: DialogueLog) -> str:
    rows = []
    for t in log.turns:
        rows.append({"speaker": "user", "text": t.user_utterance})
        rows.append({"speaker": "system", "text": t.record.response})
    return json.dumps(rows)


class JudgeClient:
    """Base judge transport; subclasses implement ``complete``."""

    model: str = "mock"
    retries: int = 2

    def complete(self, prompt: str) -> str:
        raise NotImplementedError


class HttpJudgeClient(JudgeClient):
    """POSTs {model, prompt} to an endpoint returning the verdict object."""

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: str | None = None,
        timeout: float = 30.0,
        retries: int = 2,
    ):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.timeout = timeout
        self.retries = retries

    def complete(self, prompt: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        response = requests.post(
            self.endpoint,
            json={"model": self.model, "prompt": prompt},
            headers=headers,
            timeout=self.timeout,
        )
        response.raise_for_status()
        return response.text


class CallableJudge(JudgeClient):
    """Wraps a plain function; used for mocks and offline judging."""

    def __init__(self, fn, retries: int = 2):
        self.fn = fn
        self.retries = retries

    def complete(self, prompt: str) -> str:
        return self.fn(prompt)


def _parse_verdict(raw: str) -> dict:
    start = raw.find("{")
    end = raw.rfind("}")
    if start < 0 or end <= start:
        raise ValueError("no json object in reply")
    data = json.loads(raw[start : end + 1])
    if "judgement" not in data:
        raise ValueError("missing judgement field")
    label = str(data["judgement"]).strip().lower()
    if label not in ("system_a", "system_b", "tie"):
        raise ValueError(f"unrecognised judgement {data['judgement']!r}")
    data["judgement"] = label
    return data


def judge_compare(
    log_a: DialogueLog,
    log_b: DialogueLog,
    client: JudgeClient,
    rng: random.Random | None = None,
) -> JudgeVerdict:
    """One judged comparison under randomized presentation order."""
    rng = rng or random.Random()
    swapped = rng.random() < 0.5
    first, second = (log_b, log_a) if swapped else (log_a, log_b)
    prompt = JUDGE_PROMPT.format(
        dialogue_a=serialize_dialogue(first), dialogue_b=serialize_dialogue(second)
    )
    last_error: Exception | None = None
    for _ in range(max(1, client.retries + 1)):
        try:
            data = _parse_verdict(client.complete(prompt))
        except Exception as e:  # malformed reply: retry, never default
            last_error = e
            continue
        label = data["judgement"]
        if label == "tie":
            verdict = "tie"
        elif label == "system_a":
            verdict = "B" if swapped else "A"
        else:
            verdict = "A" if swapped else "B"
        return JudgeVerdict(verdict, str(data.get("explanation", "")))
    raise JudgeUnavailableError(f"judge failed after retries: {last_error}")
