"""Canonical text and token representations for the generation pipeline.

Every training or inference sequence is laid out as the dialogue history
followed by cue-prefixed segments, each terminated by the shared
end-of-segment token:

    user : ... system : ... user : ...
    emotion : <e> <eos>
    domain : <d> <eos>
    state : slot : value ; ... <eos>
    db : N found : attr value ... <eos>
    action : intent slot value ; ... <eos>
    conduct : <c> <eos>
    system : ... <eos>

Tokens are whitespace-separated words over a closed vocabulary.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .ontology import (
    GENERAL_DOMAIN,
    UNKNOWN,
    DialogueState,
    Ontology,
    normalize_value,
)

USER_EMOTIONS = (
    "neutral", "fearful", "dissatisfied", "apologetic", "abusive", "excited",
    "satisfied",
)
SYSTEM_CONDUCTS = (
    "neutral", "compassionate", "apologetic", "enthusiastic", "appreciative",
)

PAD, UNK, EOS, SEP = "<pad>", "<unk>", "<eos>", "<sep>"
SUM = "<sum>"  # critic pooling position

SEGMENTS = ("emotion", "domain", "state", "db", "action", "conduct", "system")
NOOP_ACTION = ("none", "none", "none")
REQUEST_VALUE = "?"


class FormatError(ValueError):
    """Raised on malformed histories or unparseable generated sequences."""


def tokenize(text: str) -> list[str]:
    return text.split()


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


@dataclass
class TurnRecord:
    """One turn of supervision or logging: inputs plus all generated segments."""

    history: list[tuple[str, str]]
    emotion: str
    domain: str
    state: DialogueState
    db_text: str
    actions: list[tuple[str, str, str]]
    conduct: str
    response: str

    def validate(self, ontology: Ontology) -> None:
        if not self.history or self.history[-1][0] != "user":
            raise FormatError("history must end with a user turn")
        if self.emotion not in USER_EMOTIONS:
            raise FormatError(f"unknown emotion {self.emotion!r}")
        if self.conduct not in SYSTEM_CONDUCTS:
            raise FormatError(f"unknown conduct {self.conduct!r}")
        if not ontology.has_domain(self.domain):
            raise FormatError(f"unknown domain {self.domain!r}")
        if not self.actions:
            raise FormatError("actions must be non-empty (use the no-op action)")
        self.state.validate(ontology)

    def to_dict(self) -> dict:
        return {
            "history": [list(t) for t in self.history],
            "emotion": self.emotion,
            "domain": self.domain,
            "state": dict(self.state.slots),
            "db": self.db_text,
            "actions": [list(a) for a in self.actions],
            "conduct": self.conduct,
            "response": self.response,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TurnRecord":
        return cls(
            history=[(s, u) for s, u in data["history"]],
            emotion=data["emotion"],
            domain=data["domain"],
            state=DialogueState(data["domain"], dict(data["state"])),
            db_text=data["db"],
            actions=[tuple(a) for a in data["actions"]],
            conduct=data["conduct"],
            response=data["response"],
        )


class Vocabulary:
    """Total token <-> id bijection with reserved special tokens."""

    def __init__(self, tokens: list[str]):
        specials = [PAD, UNK, EOS, SEP, SUM]
        content = sorted(set(tokens) - set(specials))
        self._tokens = specials + content
        self._ids = {t: i for i, t in enumerate(self._tokens)}

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, self._ids[UNK])

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.id(t) for t in tokens]

    def decode(self, ids: list[int]) -> list[str]:
        return [self._tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    @property
    def sep_id(self) -> int:
        return self._ids[SEP]

    @property
    def sum_id(self) -> int:
        return self._ids[SUM]

    def content_tokens(self) -> list[str]:
        return self._tokens[5:]

    def to_list(self) -> list[str]:
        return list(self._tokens)

    @classmethod
    def from_list(cls, tokens: list[str]) -> "Vocabulary":
        v = cls([])
        v._tokens = list(tokens)
        v._ids = {t: i for i, t in enumerate(v._tokens)}
        return v


def encode_history(turns: list[tuple[str, str]], max_exchanges: int = 5) -> str:
    """Render alternating speaker-tagged utterances, ending with the user.

    Histories longer than ``max_exchanges`` user turns are truncated to the
    most recent exchanges.
    """
    if not turns:
        raise FormatError("history is empty")
    if turns[-1][0] != "user":
        raise FormatError("history must end with a user turn")
    for i, (speaker, _) in enumerate(turns):
        expected = "user" if (len(turns) - 1 - i) % 2 == 0 else "system"
        if speaker != expected:
            raise FormatError(f"history speaker parity broken at index {i}")
    keep = 2 * max_exchanges - 1
    turns = turns[-keep:]
    return " ".join(f"{speaker} : {utt}" for speaker, utt in turns)


def render_state(state: DialogueState, ontology: Ontology) -> str:
    spec = ontology.domain(state.domain)
    items = [f"{name} : {state.slots[name]}" for name in spec.slot_names]
    return " ; ".join(items)


def parse_state(tokens: list[str], ontology: Ontology, domain: str) -> DialogueState:
    state = DialogueState.empty(ontology, domain)
    if not tokens:
        return state
    for item in _split_on(tokens, ";"):
        if ":" not in item:
            continue
        ci = item.index(":")
        name = " ".join(item[:ci])
        value = " ".join(item[ci + 1:])
        if name in state.slots and value:
            state.slots[name] = value
    return state


def render_actions(actions: list[tuple[str, str, str]]) -> str:
    return " ; ".join(f"{i} {s} {v}".strip() for i, s, v in actions)


def parse_actions(tokens: list[str]) -> tuple[list[tuple[str, str, str]], int]:
    """Parse intent-slot-value triples; returns (triples, dropped_count)."""
    triples = []
    dropped = 0
    for item in _split_on(tokens, ";"):
        if len(item) < 2:
            if item:
                dropped += 1
            continue
        intent, slot = item[0], item[1]
        value = " ".join(item[2:]) if len(item) > 2 else ""
        triples.append((intent, slot, value))
    return triples, dropped


def _split_on(tokens: list[str], sep: str) -> list[list[str]]:
    out: list[list[str]] = [[]]
    for t in tokens:
        if t == sep:
            out.append([])
        else:
            out[-1].append(t)
    return [chunk for chunk in out if chunk]


@dataclass
class RenderedTurn:
    """Token sequence plus the half-open token span of each named segment.

    Segment spans cover "<cue> : ... <eos>" inclusive of cue and terminator;
    the span named "history" covers the leading context.
    """

    tokens: list[str]
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)

    def segment_tokens(self, name: str) -> list[str]:
        a, b = self.spans[name]
        return self.tokens[a:b]

    def segment_body(self, name: str) -> list[str]:
        """Segment tokens without the cue, colon, and end-of-segment."""
        a, b = self.spans[name]
        return self.tokens[a + 2 : b - 1]


def render_sequence(
    record: TurnRecord, ontology: Ontology, max_exchanges: int = 5
) -> RenderedTurn:
    """Serialize a record into the fixed segment order with cue prefixes."""
    tokens = tokenize(encode_history(record.history, max_exchanges))
    spans: dict[str, tuple[int, int]] = {"history": (0, len(tokens))}

    def seg(name: str, body: str) -> None:
        start = len(tokens)
        tokens.extend([name, ":"])
        tokens.extend(tokenize(body))
        tokens.append(EOS)
        spans[name] = (start, len(tokens))

    seg("emotion", record.emotion)
    seg("domain", record.domain)
    seg("state", render_state(record.state, ontology))
    seg("db", record.db_text)
    seg("action", render_actions(record.actions))
    seg("conduct", record.conduct)
    seg("system", record.response)
    return RenderedTurn(tokens, spans)


def parse_generated(tokens: list[str], ontology: Ontology) -> TurnRecord:
    """Invert :func:`render_sequence`. Raises naming the missing segment."""
    spans: dict[str, tuple[int, int]] = {}
    cursor = 0
    # history runs until the first "emotion :" cue at a segment boundary
    body: dict[str, list[str]] = {}
    idx = _find_cue(tokens, "emotion", 0)
    if idx is None:
        raise FormatError("missing segment: emotion")
    history_tokens = tokens[:idx]
    cursor = idx
    for name in SEGMENTS:
        if tokens[cursor : cursor + 2] != [name, ":"]:
            raise FormatError(f"missing segment: {name}")
        try:
            end = tokens.index(EOS, cursor)
        except ValueError:
            raise FormatError(f"unterminated segment: {name}") from None
        spans[name] = (cursor, end + 1)
        body[name] = tokens[cursor + 2 : end]
        cursor = end + 1

    history = _parse_history(history_tokens)
    domain = " ".join(body["domain"])
    if not ontology.has_domain(domain):
        raise FormatError(f"unknown domain {domain!r}")
    actions, _ = parse_actions(body["action"])
    if not actions:
        actions = [NOOP_ACTION]
    return TurnRecord(
        history=history,
        emotion=" ".join(body["emotion"]),
        domain=domain,
        state=parse_state(body["state"], ontology, domain),
        db_text=detokenize(body["db"]),
        actions=actions,
        conduct=" ".join(body["conduct"]),
        response=detokenize(body["system"]),
    )


def _find_cue(tokens: list[str], cue: str, start: int) -> int | None:
    for i in range(start, len(tokens) - 1):
        if tokens[i] == cue and tokens[i + 1] == ":":
            return i
    return None


def _parse_history(tokens: list[str]) -> list[tuple[str, str]]:
    turns: list[tuple[str, str]] = []
    current: list[str] | None = None
    speaker = ""
    i = 0
    while i < len(tokens):
        if tokens[i] in ("user", "system") and i + 1 < len(tokens) and tokens[i + 1] == ":":
            if current is not None:
                turns.append((speaker, detokenize(current)))
            speaker = tokens[i]
            current = []
            i += 2
            continue
        if current is None:
            raise FormatError("history does not start with a speaker cue")
        current.append(tokens[i])
        i += 1
    if current is not None:
        turns.append((speaker, detokenize(current)))
    if not turns:
        raise FormatError("empty history")
    return turns


def format_critic_state(
    ontology: Ontology,
    active_domain: str,
    state: DialogueState,
    db_count: int,
    prev_system_utterance: str,
    user_utterance: str,
) -> str:
    """Compact slot-status view of the turn for the dialogue-level critics."""
    items = []
    for d in ontology.task_domains:
        for slot in ontology.domain(d).slot_names:
            if d != active_domain:
                status = "inactive"
            elif state.slots.get(slot, UNKNOWN) == UNKNOWN:
                status = UNKNOWN
            else:
                status = "informed"
            items.append(f"{d} {slot} {status}")
    if active_domain == GENERAL_DOMAIN:
        db_part = "database not available"
    elif db_count == 0:
        db_part = "no entity found"
    else:
        db_part = f"{db_count} {active_domain} found"
    return (
        " ; ".join(items)
        + f" {SEP} {db_part}"
        + f" {SEP} system : {prev_system_utterance}"
        + f" {SEP} user : {user_utterance}"
    )


def format_critic_action(
    actions: list[tuple[str, str, str]], active_domain: str
) -> str:
    """Value-free action rendering for the state-action critic."""
    return " ; ".join(f"{active_domain} {intent} {slot}" for intent, slot, _ in actions)


def save_corpus(records: list[TurnRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict()) + "\n")


def load_corpus(path: str | Path) -> list[TurnRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TurnRecord.from_dict(json.loads(line)))
    return out


_EMOWOZ_LABELS = {
    0: "neutral", 1: "fearful", 2: "dissatisfied", 3: "apologetic",
    4: "abusive", 5: "excited", 6: "satisfied",
}


def load_emowoz_dialogues(path: str | Path, ontology: Ontology) -> list[TurnRecord]:
    """Map externally annotated dialogues into turn records.

    Accepts a JSON list of dialogues shaped like the public emotion-annotated
    MultiWOZ releases: a ``log`` list alternating user/system turns, where user
    turns carry an ``emotion`` label (index or name) and system turns carry
    ``dialog_act`` (``{"Domain-Intent": [[slot, value], ...]}``) and
    ``metadata`` (``{domain: {"semi": {slot: value}}}``) annotations. Slots
    and domains missing from the local ontology are skipped.
    """
    data = json.loads(Path(path).read_text())
    records: list[TurnRecord] = []
    for dialogue in data:
        log = dialogue.get("log", [])
        history: list[tuple[str, str]] = []
        for i in range(0, len(log) - 1, 2):
            user_turn, sys_turn = log[i], log[i + 1]
            history.append(("user", normalize_value(user_turn["text"])))
            emotion = user_turn.get("emotion", "neutral")
            if isinstance(emotion, list) and emotion:
                emotion = emotion[-1].get("emotion", 0)
            if isinstance(emotion, int):
                emotion = _EMOWOZ_LABELS.get(emotion, "neutral")
            if emotion not in USER_EMOTIONS:
                emotion = "neutral"
            actions: list[tuple[str, str, str]] = []
            domain = GENERAL_DOMAIN
            for act_name, pairs in (sys_turn.get("dialog_act") or {}).items():
                act_domain, _, intent = act_name.partition("-")
                act_domain = act_domain.lower()
                if ontology.has_domain(act_domain) and act_domain != GENERAL_DOMAIN:
                    domain = act_domain
                for slot, value in pairs:
                    actions.append(
                        (intent.lower(), slot.lower(), normalize_value(str(value)))
                    )
            state = DialogueState.empty(ontology, domain)
            semi = ((sys_turn.get("metadata") or {}).get(domain) or {}).get("semi", {})
            for slot, value in semi.items():
                slot = slot.lower()
                if slot in state.slots and value:
                    value = normalize_value(str(value))
                    state.slots[slot] = value if value != "not mentioned" else UNKNOWN
            records.append(
                TurnRecord(
                    history=list(history),
                    emotion=emotion,
                    domain=domain,
                    state=state,
                    db_text="database not available" if domain == GENERAL_DOMAIN else "",
                    actions=actions or [NOOP_ACTION],
                    conduct="neutral",
                    response=normalize_value(sys_turn["text"]),
                )
            )
            history.append(("system", normalize_value(sys_turn["text"])))
    return records
