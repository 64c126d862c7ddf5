"""Rule-based expert system: the demonstration source for imitation learning.

The expert parses user turns with the template grammar, tracks a per-domain
state, answers information requests from the first matching database entity,
asks for missing constraints, and realises its acts through the same clause
templates the trainable policy is expected to learn.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .ontology import (
    DONTCARE,
    GENERAL_DOMAIN,
    UNKNOWN,
    Database,
    DialogueState,
    Ontology,
    describe_db_result,
    query,
)
from .seqformat import NOOP_ACTION, REQUEST_VALUE, TurnRecord
from .user_sim import EMOTION_MARKERS, identifier_attribute

CONDUCT_FOR_EMOTION = {
    "satisfied": "appreciative",
    "dissatisfied": "apologetic",
    "excited": "enthusiastic",
    "fearful": "compassionate",
}

CONDUCT_PREFIXES = {
    "neutral": "",
    "appreciative": "you are welcome .",
    "apologetic": "sorry about that .",
    "enthusiastic": "wonderful !",
    "compassionate": "i understand .",
}


def detect_emotion(user_utterance: str) -> str:
    """Surface-marker reading of the user's emotional state."""
    text = user_utterance.lower()
    for marker, emotion in EMOTION_MARKERS:
        if marker in text:
            return emotion
    return "neutral"


@dataclass
class ParsedUserTurn:
    announce: str | None = None
    informs: list[tuple[str, str]] = field(default_factory=list)
    dontcares: list[str] = field(default_factory=list)
    requests: list[str] = field(default_factory=list)
    bye: bool = False


def parse_user_utterance(utterance: str, ontology: Ontology) -> ParsedUserTurn:
    parsed = ParsedUserTurn()
    tokens = utterance.lower().split()
    clauses: list[list[str]] = [[]]
    for t in tokens:
        if t in (".", "?", "!"):
            clauses.append([])
        else:
            clauses[-1].append(t)
    domains = set(ontology.task_domains)
    for c in (c for c in clauses if c):
        if c == ["bye"]:
            parsed.bye = True
            continue
        if "looking" in c or "need" in c:
            for t in c:
                if t in domains:
                    parsed.announce = t
                    break
        for i in range(len(c) - 3):
            if c[i] == "the" and c[i + 2] == "should" and c[i + 3] == "be":
                parsed.informs.append((c[i + 1], " ".join(c[i + 4:])))
                break
        else:
            if len(c) >= 4 and c[0] == "any" and c[-2:] == ["is", "fine"]:
                parsed.dontcares.append(c[1])
            elif "what" in c:
                i = c.index("what")
                if c[i + 1 : i + 3] == ["is", "the"] and i + 3 < len(c):
                    parsed.requests.append(c[i + 3])
    return parsed


def render_system_acts(
    actions: list[tuple[str, str, str]], conduct: str, match_count: int | None = None
) -> str:
    """Realise action triples into clause-templated text."""
    parts = []
    prefix = CONDUCT_PREFIXES.get(conduct, "")
    if prefix:
        parts.append(prefix)
    for intent, slot, value in actions:
        if intent == "request":
            if match_count is not None:
                parts.append(f"there are {match_count} options .")
            parts.append(f"what {slot} would you like ?")
        elif intent == "inform":
            parts.append(f"the {slot} is {value} .")
        elif intent == "offer":
            parts.append(f"i recommend {value} .")
        elif intent == "book":
            parts.append(f"i have booked {value} for you .")
        elif intent == "nomatch":
            parts.append("there are no matching options .")
        elif intent == "reqmore":
            parts.append("is there anything else i can help with ?")
        elif intent == "bye":
            parts.append("thank you for using our service . goodbye .")
        elif intent == "greet":
            parts.append("hello , how can i help you ?")
    return " ".join(parts).strip()


class ScriptedExpert:
    """Deterministic reference system over one dialogue."""

    def __init__(self, ontology: Ontology, db: Database):
        self.ontology = ontology
        self.db = db
        self.states: dict[str, DialogueState] = {}
        self.domain = GENERAL_DOMAIN
        self.offered: set[str] = set()

    def _state(self, domain: str) -> DialogueState:
        if domain not in self.states:
            self.states[domain] = DialogueState.empty(self.ontology, domain)
        return self.states[domain]

    def step(self, history: list[tuple[str, str]]) -> TurnRecord:
        """Produce the expert's turn for a history ending in a user utterance."""
        user_utterance = history[-1][1]
        parsed = parse_user_utterance(user_utterance, self.ontology)
        emotion = detect_emotion(user_utterance)

        if parsed.announce:
            self.domain = parsed.announce
        if parsed.bye:
            domain = GENERAL_DOMAIN
            state = DialogueState.empty(self.ontology, domain)
            actions = [("bye", "none", "none")]
            conduct = CONDUCT_FOR_EMOTION.get(emotion, "neutral")
            response = render_system_acts(actions, conduct)
            return TurnRecord(
                history=list(history),
                emotion=emotion,
                domain=domain,
                state=state,
                db_text=describe_db_result([], self.ontology, domain),
                actions=actions,
                conduct=conduct,
                response=response,
            )

        domain = self.domain if self.domain != GENERAL_DOMAIN else GENERAL_DOMAIN
        if domain == GENERAL_DOMAIN:
            actions = [("greet", "none", "none")]
            state = DialogueState.empty(self.ontology, GENERAL_DOMAIN)
            conduct = CONDUCT_FOR_EMOTION.get(emotion, "neutral")
            return TurnRecord(
                history=list(history),
                emotion=emotion,
                domain=GENERAL_DOMAIN,
                state=state,
                db_text=describe_db_result([], self.ontology, GENERAL_DOMAIN),
                actions=actions,
                conduct=conduct,
                response=render_system_acts(actions, conduct),
            )

        state = self._state(domain)
        spec = self.ontology.domain(domain)
        for slot, value in parsed.informs:
            if slot in state.slots:
                state.slots[slot] = value
        for slot in parsed.dontcares:
            if slot in state.slots:
                state.slots[slot] = DONTCARE

        matches = query(self.db, domain, state)
        db_text = describe_db_result(matches, self.ontology, domain)
        ident = identifier_attribute(self.ontology, domain)
        requests = [r for r in parsed.requests if r in spec.requestables]

        actions: list[tuple[str, str, str]]
        match_count: int | None = None
        if requests:
            if not matches:
                actions = [("nomatch", "none", "none")]
            else:
                first = matches[0]
                actions = []
                if domain not in self.offered and ident not in requests:
                    actions.append(("offer", ident, first.attributes[ident]))
                    self.offered.add(domain)
                for r in requests:
                    if r == ident:
                        actions.append(("offer", ident, first.attributes[ident]))
                        self.offered.add(domain)
                    else:
                        actions.append(("inform", r, first.attributes[r]))
        else:
            unknown = [s for s in spec.slot_names if state.slots[s] == UNKNOWN]
            if unknown:
                actions = [("request", unknown[0], REQUEST_VALUE)]
                match_count = len(matches)
            elif matches:
                if domain not in self.offered:
                    actions = [("offer", ident, matches[0].attributes[ident])]
                    self.offered.add(domain)
                else:
                    actions = [("reqmore", "none", "none")]
            else:
                actions = [("nomatch", "none", "none")]

        conduct = CONDUCT_FOR_EMOTION.get(emotion, "neutral")
        response = render_system_acts(actions, conduct, match_count)
        return TurnRecord(
            history=list(history),
            emotion=emotion,
            domain=domain,
            state=state.copy(),
            db_text=db_text,
            actions=list(actions) or [NOOP_ACTION],
            conduct=conduct,
            response=response,
        )
