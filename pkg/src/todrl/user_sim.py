"""Agenda-driven emotional user simulator with an imperfect-parse channel.

The simulator keeps an ordered agenda of acts derived from its goal (announce
the domain, state each constraint, then ask each request), parses system
utterances with a keyword grammar, pushes reactions (answers, corrections,
repeated requests) ahead of the agenda, and emits each turn as templated text
prefixed with an emotion marker. A noise channel drops or swaps parsed slots
to emulate an imperfect natural-language-understanding front end.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field

from .ontology import DONTCARE, Database, Ontology, UserGoal, normalize_value
from .seqformat import USER_EMOTIONS


EMOTION_PREFIXES = {
    "neutral": "",
    "satisfied": "great , thank you .",
    "dissatisfied": "that is wrong .",
    "abusive": "this is ridiculous .",
    "excited": "wonderful !",
    "fearful": "oh no .",
    "apologetic": "sorry , my mistake .",
}

# surface markers the system side may use to recognise the user's emotion
EMOTION_MARKERS = [
    ("ridiculous", "abusive"),
    ("wrong", "dissatisfied"),
    ("wonderful", "excited"),
    ("oh no", "fearful"),
    ("my mistake", "apologetic"),
    ("great", "satisfied"),
]


def identifier_attribute(ontology: Ontology, domain: str) -> str:
    """The attribute that names an entity (name, or trainid for trains)."""
    reqs = ontology.domain(domain).requestables
    return "name" if "name" in reqs else reqs[0]


@dataclass(frozen=True)
class UserAct:
    kind: str  # announce | inform | dontcare | request
    domain: str
    slot: str = ""
    value: str = ""


@dataclass
class ParsedSystemAct:
    kind: str  # inform | offer | book | request | nomatch | greet | bye | reqmore
    slot: str = ""
    value: str = ""


@dataclass
class SystemTurnParse:
    acts: list[ParsedSystemAct] = field(default_factory=list)
    apology: bool = False

    @property
    def useful(self) -> bool:
        return bool(self.acts) or self.apology


class NoiseChannel:
    """Per-slot drop/swap corruption of parsed system acts."""

    def __init__(
        self,
        p_drop: float,
        p_swap: float,
        seed: int,
        value_pools: dict[tuple[str, str], list[str]] | None = None,
    ):
        if not (0.0 <= p_drop <= 1.0 and 0.0 <= p_swap <= 1.0):
            raise ValueError("noise probabilities must lie in [0, 1]")
        self.p_drop = p_drop
        self.p_swap = p_swap
        self.rng = random.Random(seed)
        self.value_pools = value_pools or {}

    @classmethod
    def for_database(
        cls, p_drop: float, p_swap: float, seed: int, db: Database
    ) -> "NoiseChannel":
        pools: dict[tuple[str, str], list[str]] = {}
        for domain in db.ontology.task_domains:
            for attr in db.ontology.domain(domain).attribute_names:
                pools[(domain, attr)] = db.value_pool(domain, attr)
        return cls(p_drop, p_swap, seed, pools)

    def corrupt(
        self, parsed: list[tuple[str, str]], domain: str = ""
    ) -> list[tuple[str, str]]:
        """Apply independent per-slot drop, then value swap, to (slot, value) pairs."""
        out: list[tuple[str, str]] = []
        for slot, value in parsed:
            if self.p_drop > 0 and self.rng.random() < self.p_drop:
                continue
            if self.p_swap > 0 and self.rng.random() < self.p_swap:
                pool = [
                    v for v in self.value_pools.get((domain, slot), []) if v != value
                ]
                if pool:
                    value = self.rng.choice(pool)
            out.append((slot, value))
        return out


@dataclass
class EmotionRules:
    """Optional extensions to the deterministic emotion mapping."""

    excited_on_streak: bool = False  # two fulfilments in a row
    fearful_on_nomatch: bool = False
    apologetic_on_restate: bool = False
    label_noise: float = 0.0


@dataclass
class TurnEvents:
    patience_exhausted: bool = False
    violated: bool = False
    ignored_repeat: bool = False
    grudge_active: bool = False
    fulfilled: bool = False
    done_success: bool = False
    nomatch: bool = False
    restated: bool = False
    fulfil_streak: int = 0


def emotion_rule(events: TurnEvents, rules: EmotionRules | None = None) -> str:
    """Deterministic event-to-emotion mapping (fixed priority order)."""
    rules = rules or EmotionRules()
    if events.patience_exhausted:
        return "abusive"
    if events.violated:
        return "dissatisfied"
    if events.ignored_repeat:
        return "dissatisfied"
    if events.grudge_active:
        return "dissatisfied"
    if rules.excited_on_streak and events.fulfil_streak >= 2:
        return "excited"
    if events.fulfilled or events.done_success:
        return "satisfied"
    if rules.fearful_on_nomatch and events.nomatch:
        return "fearful"
    if rules.apologetic_on_restate and events.restated:
        return "apologetic"
    return "neutral"


def parse_system_utterance(
    utterance: str, ontology: Ontology, domain: str
) -> SystemTurnParse:
    """Keyword-grammar reading of a system turn in the user's domain context."""
    parse = SystemTurnParse()
    tokens = utterance.split()
    slot_names = set(ontology.domain(domain).attribute_names) if domain else set()
    clause: list[str] = []
    clauses = []
    for t in tokens:
        if t in (".", "?", "!"):
            if clause:
                clauses.append(clause)
            clause = []
        else:
            clause.append(t)
    if clause:
        clauses.append(clause)
    for c in clauses:
        joined = " ".join(c)
        if "sorry" in c:
            parse.apology = True
        if "no matching" in joined or "no match" in joined:
            parse.acts.append(ParsedSystemAct("nomatch"))
            continue
        if "recommend" in c:
            i = c.index("recommend")
            value = " ".join(c[i + 1:])
            if value:
                parse.acts.append(ParsedSystemAct("offer", value=normalize_value(value)))
            continue
        if "booked" in c:
            i = c.index("booked")
            rest = c[i + 1:]
            if "for" in rest:
                rest = rest[: rest.index("for")]
            if rest:
                parse.acts.append(ParsedSystemAct("book", value=normalize_value(" ".join(rest))))
            continue
        if len(c) >= 3 and c[0] == "the" and c[1] in slot_names and c[2] == "is":
            value = " ".join(c[3:])
            if value:
                parse.acts.append(
                    ParsedSystemAct("inform", slot=c[1], value=normalize_value(value))
                )
            continue
        if "what" in c:
            i = c.index("what")
            if i + 1 < len(c) and c[i + 1] in slot_names:
                parse.acts.append(ParsedSystemAct("request", slot=c[i + 1]))
                continue
        if "anything else" in joined:
            parse.acts.append(ParsedSystemAct("reqmore"))
            continue
        if "goodbye" in c or "bye" in c:
            parse.acts.append(ParsedSystemAct("bye"))
            continue
        if "hello" in c or "welcome" in c:
            parse.acts.append(ParsedSystemAct("greet"))
            continue
    return parse


class UserSimulator:
    """One user per dialogue; deterministic given (goal, seed, system turns)."""

    def __init__(
        self,
        goal: UserGoal,
        ontology: Ontology,
        noise: NoiseChannel | None = None,
        patience: int = 3,
        rules: EmotionRules | None = None,
        seed: int = 0,
    ):
        self.goal = goal
        self.ontology = ontology
        self.noise = noise or NoiseChannel(0.0, 0.0, seed)
        self.rules = rules or EmotionRules()
        self.rng = random.Random(seed)
        self.patience = patience
        self.agenda: list[UserAct] = []
        for domain, g in goal.domains.items():
            self.agenda.append(UserAct("announce", domain))
            for slot, value in g.informable.items():
                self.agenda.append(UserAct("inform", domain, slot, value))
            for attr in g.requestable:
                self.agenda.append(UserAct("request", domain, attr))
        self.fulfilled: set[tuple[str, str]] = set()
        self.current_domain = next(iter(goal.domains))
        self.pending_request: tuple[str, str] | None = None
        self.ask_count = 0
        self.grudge = False
        self.fulfil_streak = 0
        self.last_emotion = "neutral"
        self.done = False
        self.succeeded = False
        self._announced = False

    # -- helpers -----------------------------------------------------------

    def _goal_informables(self, domain: str) -> dict[str, str]:
        g = self.goal.domains.get(domain)
        return g.informable if g else {}

    def _unfulfilled_requests(self, domain: str) -> list[str]:
        g = self.goal.domains.get(domain)
        if not g:
            return []
        return [r for r in g.requestable if (domain, r) not in self.fulfilled]

    def _mark_fulfilled(self, domain: str, attr: str) -> None:
        self.fulfilled.add((domain, attr))
        self.agenda = [
            a for a in self.agenda
            if not (a.kind == "request" and a.domain == domain and a.slot == attr)
        ]
        if self.pending_request == (domain, attr):
            self.pending_request = None
            self.ask_count = 0

    def _all_fulfilled(self) -> bool:
        return not self.agenda and self.pending_request is None

    # -- act rendering -----------------------------------------------------

    def _render_act(self, act: UserAct, first_announce: bool) -> str:
        if act.kind == "announce":
            verb = "i am looking for a" if first_announce else "i also need a"
            return f"{verb} {act.domain}"
        if act.kind == "inform":
            return f"the {act.slot} should be {act.value}"
        if act.kind == "dontcare":
            return f"any {act.slot} is fine"
        if act.kind == "request":
            return f"what is the {act.slot} ?"
        raise ValueError(f"unrenderable act {act.kind}")

    def _emit(self, acts: list[UserAct], emotion: str, done: bool = False) -> tuple[str, str, bool]:
        if self.rules.label_noise > 0 and self.rng.random() < self.rules.label_noise:
            emotion = self.rng.choice(USER_EMOTIONS)
        self.last_emotion = emotion
        prefix = EMOTION_PREFIXES[emotion]
        parts = [prefix] if prefix else []
        if done:
            parts.append("bye .")
        else:
            for act in acts:
                text = self._render_act(act, first_announce=not self._announced)
                if act.kind == "announce":
                    self._announced = True
                parts.append(text + (" ." if not text.endswith("?") else ""))
        self.done = self.done or done
        return " ".join(parts).strip(), emotion, done

    # -- public surface ------------------------------------------------------

    def start(self) -> tuple[str, str]:
        """First user turn: domain announcement plus the first constraint."""
        acts = [self.agenda.pop(0)]
        if self.agenda and self.agenda[0].kind == "inform":
            acts.append(self.agenda.pop(0))
        self.current_domain = acts[0].domain
        utt, emotion, _ = self._emit(acts, "neutral")
        return utt, emotion

    def respond(self, system_utterance: str) -> tuple[str, str, bool]:
        """Advance one exchange: parse, react, and emit the next user turn."""
        if self.done:
            raise RuntimeError("simulator is finished")
        events = TurnEvents()
        parse = parse_system_utterance(
            normalize_value(system_utterance), self.ontology, self.current_domain
        )

        informs = [
            (a.kind, a.slot, a.value)
            for a in parse.acts
            if a.kind in ("inform", "offer", "book")
        ]
        ident = identifier_attribute(self.ontology, self.current_domain) if (
            self.current_domain in self.goal.domains
        ) else ""
        slot_values = [
            (a_slot if kind == "inform" else ident, value)
            for kind, a_slot, value in informs
        ]
        slot_values = self.noise.corrupt(slot_values, self.current_domain)

        reactions: list[UserAct] = []
        goal_inf = self._goal_informables(self.current_domain)
        for slot, value in slot_values:
            if slot in goal_inf and normalize_value(value) != goal_inf[slot]:
                events.violated = True
                reactions.append(
                    UserAct("inform", self.current_domain, slot, goal_inf[slot])
                )
                continue
            if (self.current_domain, slot) not in self.fulfilled and slot in (
                self._unfulfilled_requests(self.current_domain)
            ):
                self._mark_fulfilled(self.current_domain, slot)
                events.fulfilled = True

        for act in parse.acts:
            if act.kind == "request":
                if act.slot in goal_inf:
                    reactions.append(
                        UserAct("inform", self.current_domain, act.slot, goal_inf[act.slot])
                    )
                    self.agenda = [
                        a for a in self.agenda
                        if not (
                            a.kind == "inform"
                            and a.domain == self.current_domain
                            and a.slot == act.slot
                        )
                    ]
                elif act.slot in self.ontology.domain(self.current_domain).slot_names:
                    reactions.append(UserAct("dontcare", self.current_domain, act.slot))
            elif act.kind == "nomatch":
                events.nomatch = True
                events.restated = True
                stated = [
                    UserAct("inform", self.current_domain, s, v)
                    for s, v in goal_inf.items()
                ]
                if stated:
                    reactions.append(stated[self.rng.randrange(len(stated))])

        unhelpful = not parse.useful
        if parse.acts and all(a.kind == "bye" for a in parse.acts) and not self._all_fulfilled():
            unhelpful = True

        if self.pending_request is not None and not events.fulfilled:
            answered = self.pending_request[1] in [s for s, _ in slot_values]
            if not answered:
                if self.ask_count >= 2:
                    events.ignored_repeat = True
                self.ask_count += 1
                self.patience -= 1

        if events.violated:
            self.grudge = True
            self.patience -= 1
        if events.nomatch or unhelpful:
            self.patience -= 1

        if parse.apology and self.grudge and not events.violated:
            self.grudge = False
        if events.fulfilled:
            self.grudge = False
            self.fulfil_streak += 1
        else:
            self.fulfil_streak = 0
        events.grudge_active = self.grudge and not events.violated
        events.fulfil_streak = self.fulfil_streak

        if self.patience <= 0:
            events.patience_exhausted = True
            emotion = emotion_rule(events, self.rules)
            self.succeeded = False
            return self._emit([], emotion, done=True)

        if not reactions and self._all_fulfilled():
            events.done_success = True
            emotion = emotion_rule(events, self.rules)
            self.succeeded = True
            return self._emit([], emotion, done=True)

        acts = reactions[:2]
        if self.pending_request is not None and not any(
            a.kind == "request" for a in acts
        ):
            acts.append(
                UserAct("request", self.pending_request[0], self.pending_request[1])
            )
        if (
            len(acts) < 2
            and self.pending_request is None
            and not events.violated
            and self.agenda
        ):
            act = self.agenda.pop(0)
            acts.append(act)
            if act.kind == "announce":
                self.current_domain = act.domain
                self.ask_count = 0
                if not acts[:-1] and self.agenda and self.agenda[0].kind == "inform":
                    acts.append(self.agenda.pop(0))
            elif act.kind == "request":
                self.pending_request = (act.domain, act.slot)
                self.ask_count = 1

        emotion = emotion_rule(events, self.rules)
        return self._emit(acts, emotion)

    def peek_respond(self, system_utterance: str) -> tuple[str, str, bool]:
        """Evaluate a candidate system turn without advancing the simulator."""
        probe = copy.deepcopy(self)
        return probe.respond(system_utterance)
