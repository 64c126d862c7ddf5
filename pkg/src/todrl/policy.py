"""Seven-step generation pipeline over the autoregressive backbone.

Each turn: recognise the user emotion, pick the active domain, fill the
dialogue state for that domain, run the database query (computed, not
generated), then generate dialogue actions, conduct, and the final response.
Closed-set steps decode under candidate constraints; everything generated is
appended to the running context before the next step.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import torch

from .backbone import DecodeSession, TinyTransformer
from .ontology import (
    DONTCARE,
    UNKNOWN,
    Database,
    DialogueState,
    Ontology,
    describe_db_result,
    query,
)
from .seqformat import (
    EOS,
    NOOP_ACTION,
    SYSTEM_CONDUCTS,
    USER_EMOTIONS,
    TurnRecord,
    Vocabulary,
    detokenize,
    encode_history,
    parse_actions,
    tokenize,
)


class TurnError(RuntimeError):
    """A pipeline step failed; carries the step name."""

    def __init__(self, step: str, message: str):
        super().__init__(f"step {step!r}: {message}")
        self.step = step


@dataclass
class GenerationConfig:
    temperature_action: float = 0.5
    temperature_response: float = 0.9
    sample_size: int = 6
    history_exchanges: int = 5
    max_action_len: int = 24
    max_response_len: int = 40
    max_value_len: int = 6

    def __post_init__(self) -> None:
        if self.temperature_action <= 0 or self.temperature_response <= 0:
            raise ValueError("temperatures must be positive")


@dataclass
class TurnEpisode:
    """One sampled turn continuation: the PPO training unit.

    ``context`` holds the frozen initial-state tokens (history, emotion,
    domain, state, and database segments); ``actions`` every token from the
    action cue through the final end-of-segment of the response, with
    per-token behavior log-probabilities. ``intent_slot_positions`` indexes
    into ``actions`` marking the intent and slot tokens of the dialogue-action
    segment (the subsequence importance weights are computed over).
    """

    context: list[int]
    actions: list[int]
    logprobs: list[float]
    intent_slot_positions: list[int]
    reward: float = 0.0
    policy_version: int = 0

    def intent_slot_logprob(self) -> float:
        return float(sum(self.logprobs[i] for i in self.intent_slot_positions))


@dataclass
class TurnOutcome:
    record: TurnRecord
    s_t0: list[int]
    episode: TurnEpisode | None = None
    db_count: int = 0


def select_constrained(
    session: DecodeSession, vocab: Vocabulary, candidates: list[str]
) -> tuple[str, float]:
    """Argmax over candidate tokens; first declared wins ties.

    Returns the token and its full-vocabulary log-probability.
    """
    if not candidates:
        raise ValueError("empty candidate set")
    logits = session.feed([])
    logp = torch.log_softmax(logits, dim=-1)
    ids = [vocab.id(c) for c in candidates]
    best = 0
    for i in range(1, len(ids)):
        if logits[ids[i]] > logits[ids[best]]:
            best = i
    return candidates[best], float(logp[ids[best]])


def sample_constrained(
    session: DecodeSession,
    vocab: Vocabulary,
    candidates: list[str],
    temperature: float,
    generator: torch.Generator,
) -> tuple[str, float]:
    """Temperature-sample among candidate tokens; full-vocab logprob returned."""
    logits = session.feed([])
    logp = torch.log_softmax(logits, dim=-1)
    ids = torch.tensor([vocab.id(c) for c in candidates])
    probs = torch.softmax(logits[ids] / temperature, dim=-1)
    choice = int(torch.multinomial(probs, 1, generator=generator))
    return candidates[choice], float(logp[ids[choice]])


class DialoguePolicy:
    """Backbone plus vocabulary plus ontology: the runnable system."""

    def __init__(
        self,
        backbone: TinyTransformer,
        vocab: Vocabulary,
        ontology: Ontology,
        config: GenerationConfig | None = None,
    ):
        self.backbone = backbone
        self.vocab = vocab
        self.ontology = ontology
        self.config = config or GenerationConfig()

    # -- small helpers -------------------------------------------------------

    def _feed_text(self, session: DecodeSession, text: str) -> None:
        session.feed(self.vocab.encode(tokenize(text)))

    def _feed_forced(
        self, session: DecodeSession, tokens: list[str], sink: "_EpisodeSink | None"
    ) -> None:
        """Feed structural tokens, recording their logprobs when collecting."""
        for t in tokens:
            tok_id = self.vocab.id(t)
            if sink is not None:
                logits = session.feed([])
                logp = torch.log_softmax(logits, dim=-1)
                sink.add(tok_id, float(logp[tok_id]))
            session.feed([tok_id])

    def _decode_free(
        self,
        session: DecodeSession,
        stop_tokens: set[int],
        max_len: int,
        temperature: float,
        generator: torch.Generator | None,
        sink: "_EpisodeSink | None",
    ) -> list[int]:
        """Decode until (excluding) a stop token; totalized by ``max_len``."""
        out: list[int] = []
        for _ in range(max_len):
            logits = session.feed([])
            logp = torch.log_softmax(logits, dim=-1)
            if temperature <= 0 or generator is None:
                tok = int(torch.argmax(logits))
            else:
                probs = torch.softmax(logits / temperature, dim=-1)
                tok = int(torch.multinomial(probs, 1, generator=generator))
            if tok in stop_tokens:
                break
            out.append(tok)
            if sink is not None:
                sink.add(tok, float(logp[tok]))
            session.feed([tok])
        return out

    def generate_state(
        self,
        session: DecodeSession,
        domain: str,
        greedy: bool = True,
    ) -> DialogueState:
        """Fill every slot of the domain, constrained per slot kind."""
        state = DialogueState.empty(self.ontology, domain)
        spec = self.ontology.domain(domain)
        slots = spec.slots
        stop = {self.vocab.eos_id, self.vocab.id(";")}
        for i, slot in enumerate(slots):
            self._feed_forced(session, [slot.name, ":"], None)
            if slot.kind == "categorical":
                candidates = [UNKNOWN, DONTCARE, *slot.values]
                value, _ = select_constrained(session, self.vocab, candidates)
                self._feed_forced(session, [value], None)
            else:
                ids = self._decode_free(
                    session, stop, self.config.max_value_len, 0.0, None, None
                )
                value = detokenize(self.vocab.decode(ids)) or UNKNOWN
            state.slots[slot.name] = value
            self._feed_forced(session, [";"] if i < len(slots) - 1 else [], None)
        return state

    # -- the pipeline --------------------------------------------------------

    def run_context(
        self, history: list[tuple[str, str]], db: Database
    ) -> tuple[DecodeSession, TurnRecord, int]:
        """Steps 0-4: history, emotion, domain, state, database description.

        Returns the live session (positioned after the db segment), a partial
        record, and the match count.
        """
        session = DecodeSession(self.backbone)
        try:
            hist_text = encode_history(history, self.config.history_exchanges)
        except Exception as e:
            raise TurnError("history", str(e)) from e
        self._feed_text(session, hist_text)

        self._feed_forced(session, ["emotion", ":"], None)
        emotion, _ = select_constrained(session, self.vocab, list(USER_EMOTIONS))
        self._feed_forced(session, [emotion, EOS], None)

        self._feed_forced(session, ["domain", ":"], None)
        domain, _ = select_constrained(
            session, self.vocab, list(self.ontology.domain_names)
        )
        self._feed_forced(session, [domain, EOS], None)

        self._feed_forced(session, ["state", ":"], None)
        state = self.generate_state(session, domain)
        self._feed_forced(session, [EOS], None)

        matches = query(db, domain, state)
        db_text = describe_db_result(matches, self.ontology, domain)
        self._feed_forced(session, ["db", ":", *tokenize(db_text), EOS], None)

        record = TurnRecord(
            history=list(history),
            emotion=emotion,
            domain=domain,
            state=state,
            db_text=db_text,
            actions=[NOOP_ACTION],
            conduct="neutral",
            response="",
        )
        return session, record, len(matches)

    def complete_turn(
        self,
        session: DecodeSession,
        record: TurnRecord,
        mode: str = "greedy",
        generator: torch.Generator | None = None,
        collect: bool = False,
    ) -> TurnRecord | tuple[TurnRecord, TurnEpisode]:
        """Steps 5-7 from a prepared context: action, conduct, response."""
        sink = _EpisodeSink(list(session.tokens)) if collect else None
        greedy = mode == "greedy"
        t_act = 0.0 if greedy else self.config.temperature_action
        t_resp = 0.0 if greedy else self.config.temperature_response

        self._feed_forced(session, ["action", ":"], sink)
        body_start = len(sink.actions) if sink else 0
        action_ids = self._decode_free(
            session,
            {self.vocab.eos_id},
            self.config.max_action_len,
            t_act,
            generator,
            sink,
        )
        self._feed_forced(session, [EOS], sink)
        action_tokens = self.vocab.decode(action_ids)
        actions, _dropped = parse_actions(action_tokens)
        if not actions:
            actions = [NOOP_ACTION]
        if sink is not None:
            sink.mark_intent_slots(body_start, action_tokens)

        self._feed_forced(session, ["conduct", ":"], sink)
        if greedy:
            conduct, lp = select_constrained(
                session, self.vocab, list(SYSTEM_CONDUCTS)
            )
        else:
            conduct, lp = sample_constrained(
                session, self.vocab, list(SYSTEM_CONDUCTS), t_act, generator
            )
        if sink is not None:
            sink.add(self.vocab.id(conduct), lp)
        session.feed([self.vocab.id(conduct)])
        self._feed_forced(session, [EOS], sink)

        self._feed_forced(session, ["system", ":"], sink)
        resp_ids = self._decode_free(
            session,
            {self.vocab.eos_id},
            self.config.max_response_len,
            t_resp,
            generator,
            sink,
        )
        self._feed_forced(session, [EOS], sink)

        record.actions = actions
        record.conduct = conduct
        record.response = detokenize(self.vocab.decode(resp_ids))
        if sink is None:
            return record
        return record, sink.finish()

    def run_turn(
        self,
        history: list[tuple[str, str]],
        db: Database,
        mode: str = "greedy",
        generator: torch.Generator | None = None,
        collect: bool = False,
    ) -> TurnOutcome:
        """Full pipeline for one turn."""
        session, record, n = self.run_context(history, db)
        s_t0 = list(session.tokens)
        out = self.complete_turn(session, record, mode, generator, collect)
        if collect:
            record, episode = out
            return TurnOutcome(record, episode.context, episode, n)
        return TurnOutcome(out, s_t0, None, n)

    def sample_turn_candidates(
        self,
        history: list[tuple[str, str]],
        db: Database,
        n: int,
        seed: int,
    ) -> tuple[list[tuple[TurnRecord, TurnEpisode]], int, int]:
        """Sample n turn continuations from one frozen initial state.

        Returns (candidates, continuation_index, db_count). All candidates
        share the byte-identical context; the continuation index is uniform.
        """
        if n < 2:
            raise ValueError("candidate groups need n >= 2")
        base_session, base_record, db_count = self.run_context(history, db)
        candidates = []
        for i in range(n):
            gen = torch.Generator()
            gen.manual_seed((seed * 1_000_003 + i) % (2**63 - 1))
            session = base_session.fork()
            record = TurnRecord.from_dict(base_record.to_dict())
            rec, episode = self.complete_turn(
                session, record, mode="sample", generator=gen, collect=True
            )
            candidates.append((rec, episode))
        chooser = random.Random(seed ^ 0x5EED)
        return candidates, chooser.randrange(n), db_count


class _EpisodeSink:
    """Accumulates action tokens and logprobs during one turn completion."""

    def __init__(self, context: list[int]):
        self.context = context
        self.actions: list[int] = []
        self.logprobs: list[float] = []
        self.intent_slot_positions: list[int] = []

    def add(self, tok: int, logprob: float) -> None:
        self.actions.append(tok)
        self.logprobs.append(logprob)

    def mark_intent_slots(self, body_start: int, action_tokens: list[str]) -> None:
        """Mark intent and slot token offsets within the action segment body."""
        pos = body_start
        clause_index = 0  # 0 -> intent, 1 -> slot, >1 -> value
        for t in action_tokens:
            if t == ";":
                clause_index = 0
            else:
                if clause_index < 2:
                    self.intent_slot_positions.append(pos)
                clause_index += 1
            pos += 1

    def finish(self) -> TurnEpisode:
        return TurnEpisode(
            context=self.context,
            actions=self.actions,
            logprobs=self.logprobs,
            intent_slot_positions=self.intent_slot_positions,
        )
