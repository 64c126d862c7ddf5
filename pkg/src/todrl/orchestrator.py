"""End-to-end training and evaluation campaigns.

The full training run executes, in order: corpus bootstrapping from the
scripted expert, supervised pretraining of the actor, critic pretraining on
corpus-derived experiences (skipped for the sentiment-only reward scheme),
buffer filling through simulated dialogues, and then iterated cycles of
{refill, critic update, importance-weighted replay, actor update} with
periodic evaluation snapshots.
"""

from __future__ import annotations

import dataclasses
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .backbone import (
    DecodeSession,
    TinyTransformer,
    TransformerConfig,
    ValueHead,
    single_thread_inference,
)
from .checkpoint import load_policy, save_critics, save_policy
from .config import RunConfig, derive_seed
from .evaluator import (
    DialogueLog,
    LoggedTurn,
    avg_sentiment,
    check_success,
    error_rate,
    linguistic_stats,
    judge_compare,
)
from .ontology import (
    Database,
    GoalConfig,
    Ontology,
    UserGoal,
    default_ontology,
    generate_database,
    generate_goal,
)
from .policy import DialoguePolicy, GenerationConfig, TurnEpisode
from .replay import BufferedDialogue, BufferedTurn, ReplayBuffer, replay_rewards
from .rl_dialogue import (
    Critic,
    CriticConfig,
    CriticTrainer,
    Experience,
    TextEncoder,
    dialogue_reward,
)
from .rl_turn import PPOConfig, TurnPPOTrainer, emotion_advantage, valence
from .seqformat import (
    EOS,
    SYSTEM_CONDUCTS,
    USER_EMOTIONS,
    TurnRecord,
    Vocabulary,
    format_critic_action,
    format_critic_state,
    parse_actions,
    render_sequence,
    tokenize,
)
from .sl_trainer import SLConfig, SLResult, train_sl
from .expert import CONDUCT_PREFIXES, ScriptedExpert
from .user_sim import EMOTION_PREFIXES, NoiseChannel, UserSimulator


class PhaseError(RuntimeError):
    """A training phase failed; the run directory holds resumable state."""


@dataclass
class Environment:
    """Everything the dialogues run against."""

    ontology: Ontology
    db: Database
    p_drop: float = 0.0
    p_swap: float = 0.0
    patience: int = 3
    max_turns: int = 16
    goal_domains: tuple[int, int] = (1, 2)
    goal_constraints: tuple[int, int] = (1, 3)
    goal_requestables: tuple[int, int] = (1, 2)

    @classmethod
    def from_config(cls, config: RunConfig, zero_noise: bool = False) -> "Environment":
        ontology = default_ontology()
        db = generate_database(ontology, config.env.db_seed, config.env.db_size)
        env = config.env
        return cls(
            ontology=ontology,
            db=db,
            p_drop=0.0 if zero_noise else env.p_drop,
            p_swap=0.0 if zero_noise else env.p_swap,
            patience=env.patience,
            max_turns=env.max_turns,
            goal_domains=(env.goal_domains_min, env.goal_domains_max),
            goal_constraints=(env.goal_constraints_min, env.goal_constraints_max),
            goal_requestables=(env.goal_requestables_min, env.goal_requestables_max),
        )

    def make_goal(self, seed: int) -> UserGoal:
        rng = random.Random(derive_seed(seed, "goal"))
        cfg = GoalConfig(
            n_domains=rng.randint(*self.goal_domains),
            n_constraints=rng.randint(*self.goal_constraints),
            n_requestables=rng.randint(*self.goal_requestables),
        )
        return generate_goal(self.ontology, self.db, rng, cfg)

    def make_sim(self, seed: int) -> UserSimulator:
        goal = self.make_goal(seed)
        noise = NoiseChannel.for_database(
            self.p_drop, self.p_swap, derive_seed(seed, "noise"), self.db
        )
        return UserSimulator(
            goal,
            self.ontology,
            noise=noise,
            patience=self.patience,
            seed=derive_seed(seed, "sim"),
        )


def build_vocabulary(
    ontology: Ontology, db: Database, corpus: list[TurnRecord] | None = None
) -> Vocabulary:
    """Closed vocabulary: schema, database, templates, and corpus tokens."""
    tokens: set[str] = set()
    tokens.update(ontology.domain_names)
    for domain in ontology.task_domains:
        spec = ontology.domain(domain)
        tokens.update(spec.attribute_names)
        for slot in spec.slots:
            tokens.update(slot.values)
        count = len(db.entities(domain))
        tokens.update(str(i) for i in range(count + 1))
        for attr in spec.attribute_names:
            for value in db.value_pool(domain, attr):
                tokens.update(tokenize(value))
    tokens.update(USER_EMOTIONS)
    tokens.update(SYSTEM_CONDUCTS)
    tokens.update(("emotion", "domain", "state", "db", "action", "conduct",
                   "system", "user"))
    tokens.update((":", ";", ".", "?", "!", ",", "unknown", "dontcare", "none",
                   "found", "informed", "inactive", "entity", "not", "available",
                   "database", "no"))
    for text in EMOTION_PREFIXES.values():
        tokens.update(tokenize(text))
    for text in CONDUCT_PREFIXES.values():
        tokens.update(tokenize(text))
    tokens.update(
        "i am looking for a also the should be any is fine what bye thank you "
        "there are options would like recommend have booked matching hello how "
        "can help welcome using our service goodbye sorry about that understand "
        "wonderful anything else with my mistake still your name great oh "
        "ridiculous wrong this useless".split()
    )
    for record in corpus or []:
        tokens.update(render_sequence(record, ontology).tokens)
    tokens.discard("")
    return Vocabulary(sorted(tokens))


# ---------------------------------------------------------------------------
# rollouts


class TurnRunner:
    """Per-dialogue stateful producer of system turns."""

    def step(self, history: list[tuple[str, str]]) -> TurnRecord:
        raise NotImplementedError


class PolicyRunner(TurnRunner):
    def __init__(self, policy: DialoguePolicy, db: Database, mode: str = "greedy"):
        self.policy = policy
        self.db = db
        self.mode = mode

    def step(self, history: list[tuple[str, str]]) -> TurnRecord:
        return self.policy.run_turn(history, self.db, mode=self.mode).record


class ExpertRunner(TurnRunner):
    def __init__(self, ontology: Ontology, db: Database):
        self.expert = ScriptedExpert(ontology, db)

    def step(self, history: list[tuple[str, str]]) -> TurnRecord:
        return self.expert.step(history)


def rollout_dialogue(
    make_runner, env: Environment, seed: int, close_out: bool = True
) -> tuple[DialogueLog, bool]:
    """Run one dialogue to completion; returns the log and the sim's verdict."""
    with single_thread_inference():
        return _rollout_dialogue(make_runner, env, seed, close_out)


def _rollout_dialogue(
    make_runner, env: Environment, seed: int, close_out: bool = True
) -> tuple[DialogueLog, bool]:
    sim = env.make_sim(seed)
    runner: TurnRunner = make_runner()
    history: list[tuple[str, str]] = []
    utt, emotion = sim.start()
    history.append(("user", utt))
    turns: list[LoggedTurn] = []
    completed = False
    for _ in range(env.max_turns):
        record = runner.step(history)
        turns.append(LoggedTurn(record, history[-1][1], emotion))
        history.append(("system", record.response))
        utt, emotion, done = sim.respond(record.response)
        history.append(("user", utt))
        if done:
            if close_out:
                record = runner.step(history)
                turns.append(LoggedTurn(record, utt, emotion))
            completed = True
            break
    return DialogueLog(sim.goal, turns, completed), sim.succeeded


def simulate(
    make_runner,
    env: Environment,
    n_dialogues: int,
    seed: int,
) -> tuple[list[DialogueLog], dict[str, float]]:
    """Greedy evaluation campaign; returns logs and the metric table."""
    logs = []
    successes = 0
    for i in range(n_dialogues):
        log, _ = rollout_dialogue(make_runner, env, derive_seed(seed, f"dlg{i}"))
        logs.append(log)
        successes += check_success(log, env.db, env.ontology)
    metrics = {
        "success": successes / n_dialogues,
        "sentiment": avg_sentiment(logs),
        "error": error_rate(logs, env.db, env.ontology),
    }
    metrics.update(linguistic_stats(logs))
    return logs, metrics


# ---------------------------------------------------------------------------
# corpus bootstrapping


def bootstrap_corpus(
    ontology: Ontology,
    db: Database,
    n_dialogues: int,
    seed: int,
    env_config=None,
    max_failure_rate: float = 0.05,
) -> tuple[list[TurnRecord], list[list[TurnRecord]]]:
    """Expert demonstrations against the zero-noise simulator.

    Returns flattened records of the successful dialogues plus the per-dialogue
    grouping (used for critic pretraining). Aborts when the expert fails more
    than ``max_failure_rate`` of its dialogues.
    """
    env = Environment(ontology=ontology, db=db)
    if env_config is not None:
        env.patience = env_config.patience
        env.max_turns = env_config.max_turns
        env.goal_domains = (env_config.goal_domains_min, env_config.goal_domains_max)
        env.goal_constraints = (
            env_config.goal_constraints_min, env_config.goal_constraints_max,
        )
        env.goal_requestables = (
            env_config.goal_requestables_min, env_config.goal_requestables_max,
        )
    dialogues: list[list[TurnRecord]] = []
    failures = 0
    for i in range(n_dialogues):
        log, succeeded = rollout_dialogue(
            lambda: ExpertRunner(ontology, db), env, derive_seed(seed, f"boot{i}")
        )
        if succeeded:
            dialogues.append([t.record for t in log.turns])
        else:
            failures += 1
    if failures > max_failure_rate * n_dialogues:
        raise PhaseError(
            f"expert failed {failures}/{n_dialogues} dialogues; "
            "environment looks misconfigured"
        )
    records = [r for d in dialogues for r in d]
    return records, dialogues


# ---------------------------------------------------------------------------
# critic-side helpers


def db_count_from_text(db_text: str) -> int:
    head = db_text.split(" ", 1)[0]
    return int(head) if head.isdigit() else 0


def critic_state_text(record: TurnRecord, ontology: Ontology) -> str:
    prev_system = record.history[-2][1] if len(record.history) >= 2 else ""
    return format_critic_state(
        ontology,
        record.domain,
        record.state,
        db_count_from_text(record.db_text),
        prev_system,
        record.history[-1][1],
    )


def experiences_from_records(
    dialogue: list[TurnRecord], ontology: Ontology, success: bool
) -> list[Experience]:
    """Critic transitions from a completed dialogue's records."""
    out = []
    total = len(dialogue)
    states = [critic_state_text(r, ontology) for r in dialogue]
    for t, record in enumerate(dialogue, start=1):
        out.append(
            Experience(
                state_text=states[t - 1],
                action_text=format_critic_action(record.actions, record.domain),
                reward=dialogue_reward(t, total, success),
                next_state_text=states[t] if t < total else None,
                terminal=t == total,
            )
        )
    return out


def sample_action_text(
    policy: DialoguePolicy, context: list[int], temperature: float, seed: int
) -> str:
    """Fresh dialogue-action sample from a stored turn context."""
    session = DecodeSession(policy.backbone)
    session.feed(context)
    session.feed(policy.vocab.encode(["action", ":"]))
    gen = torch.Generator()
    gen.manual_seed(seed % (2**63 - 1))
    ids, _ = session.sample(
        temperature, policy.vocab.eos_id, policy.config.max_action_len, gen
    )
    body = [t for t in policy.vocab.decode(ids) if t != EOS]
    actions, _ = parse_actions(body)
    domain = "general"
    # recover the domain from the context's domain segment
    toks = policy.vocab.decode(context)
    for i in range(len(toks) - 2):
        if toks[i] == "domain" and toks[i + 1] == ":":
            domain = toks[i + 2]
            break
    return format_critic_action(actions, domain)


# ---------------------------------------------------------------------------
# the full training loop


@dataclass
class TrainResult:
    phases: list[str] = field(default_factory=list)
    sl_result: SLResult | None = None
    metrics_history: list[dict] = field(default_factory=list)
    checkpoint_dir: str = ""


class Orchestrator:
    """Owns one training run and its artifacts."""

    def __init__(self, config: RunConfig, outdir: str | Path):
        self.config = config.validate()
        self.outdir = Path(outdir)
        self.outdir.mkdir(parents=True, exist_ok=True)
        self.env = Environment.from_config(config)
        self.result = TrainResult(checkpoint_dir=str(self.outdir))

    # -- logging -------------------------------------------------------------

    def _log(self, kind: str, payload: dict) -> None:
        row = {"kind": kind, **payload}
        self.result.metrics_history.append(row)
        path = self.outdir / "metrics.jsonl"
        with open(path, "a") as fh:
            fh.write(json.dumps(row) + "\n")

    # -- phases ----------------------------------------------------------------

    def phase_bootstrap(self) -> tuple[list[TurnRecord], list[list[TurnRecord]]]:
        seed = derive_seed(self.config.seed, "bootstrap")
        records, dialogues = bootstrap_corpus(
            self.env.ontology,
            self.env.db,
            self.config.corpus_dialogues,
            seed,
            env_config=self.config.env,
        )
        self.result.phases.append("bootstrap")
        self._log("bootstrap", {"records": len(records), "dialogues": len(dialogues)})
        return records, dialogues

    def phase_sl(
        self, corpus: list[TurnRecord]
    ) -> tuple[DialoguePolicy, SLResult]:
        vocab = build_vocabulary(self.env.ontology, self.env.db, corpus)
        model_cfg = self.config.model
        backbone = TinyTransformer(
            TransformerConfig(
                vocab_size=len(vocab),
                d_model=model_cfg.d_model,
                n_heads=model_cfg.n_heads,
                n_layers=model_cfg.n_layers,
                d_ff=model_cfg.d_ff,
                max_len=model_cfg.max_len,
            ),
            seed=derive_seed(self.config.seed, "backbone-init"),
        )
        sl_cfg = SLConfig(
            lr=self.config.sl.lr,
            epochs=self.config.sl.epochs,
            batch_size=self.config.sl.batch_size,
            seed=derive_seed(self.config.seed, "sl"),
        )
        result = train_sl(
            backbone, corpus, self.env.ontology, vocab, sl_cfg,
            history_exchanges=self.config.actor.history_length,
        )
        gen = GenerationConfig(
            temperature_action=self.config.actor.temperature_action,
            temperature_response=self.config.actor.temperature_response,
            sample_size=self.config.actor.sample_size,
            history_exchanges=self.config.actor.history_length,
        )
        policy = DialoguePolicy(backbone, vocab, self.env.ontology, gen)
        save_policy(self.outdir / "policy-sl", policy, self.config)
        self.result.phases.append("sl")
        self.result.sl_result = result
        self._log(
            "sl",
            {
                "final_loss": result.step_losses[-1],
                "holdout_perplexity": result.holdout_perplexity[-1],
            },
        )
        return policy, result

    def phase_critic_pretrain(
        self,
        policy: DialoguePolicy,
        expert_dialogues: list[list[TurnRecord]],
    ) -> CriticTrainer:
        cfg = self.config
        trainer = self._new_critic_trainer(policy.vocab)
        experiences = [
            e
            for d in expert_dialogues
            for e in experiences_from_records(d, self.env.ontology, success=True)
        ]
        rng = random.Random(derive_seed(cfg.seed, "critic-pretrain"))
        bs = cfg.critic.batch_size
        for step in range(cfg.critic.pretrain_steps):
            batch = [experiences[rng.randrange(len(experiences))] for _ in range(bs)]
            lq, lv = trainer.step(batch)
            if step % 50 == 0:
                self._log("critic_pretrain", {"step": step, "q_loss": lq, "v_loss": lv})
        self.result.phases.append("critic_pretrain")
        return trainer

    def _new_critic_trainer(self, vocab: Vocabulary) -> CriticTrainer:
        cfg = self.config
        critic_cfg = CriticConfig(
            lr=cfg.critic.lr,
            batch_size=cfg.critic.batch_size,
            epochs=cfg.critic.epochs,
            grad_clip=cfg.critic.grad_clip,
            gamma_dial=cfg.rl.gamma_dial,
            tau=cfg.rl.tau,
        )
        seed_q = derive_seed(cfg.seed, "critic-q")
        seed_v = derive_seed(cfg.seed, "critic-v")
        q = Critic(TextEncoder(vocab, d_model=cfg.critic.d_model, seed=seed_q), seed=seed_q)
        v = Critic(TextEncoder(vocab, d_model=cfg.critic.d_model, seed=seed_v), seed=seed_v)
        return CriticTrainer(q, v, critic_cfg)

    # -- RL collection ---------------------------------------------------------

    def collect_dialogue(
        self,
        policy: DialoguePolicy,
        seed: int,
        scheme: str,
        version: int,
    ) -> tuple[BufferedDialogue, DialogueLog]:
        """One on-policy dialogue with sampled candidates and experiences."""
        with single_thread_inference():
            return self._collect_dialogue(policy, seed, scheme, version)

    def _collect_dialogue(
        self,
        policy: DialoguePolicy,
        seed: int,
        scheme: str,
        version: int,
    ) -> tuple[BufferedDialogue, DialogueLog]:
        env = self.env
        sim = env.make_sim(seed)
        history: list[tuple[str, str]] = []
        utt, emotion = sim.start()
        history.append(("user", utt))
        turns: list[BufferedTurn] = []
        logged: list[LoggedTurn] = []
        prev_experience: Experience | None = None
        done = False
        for t in range(env.max_turns):
            turn_seed = derive_seed(seed, f"turn{t}")
            if scheme in ("sent", "combined"):
                candidates, cont_idx, db_count = policy.sample_turn_candidates(
                    history, env.db, self.config.actor.sample_size, turn_seed
                )
                emotions = [
                    sim.peek_respond(rec.response)[1] for rec, _ in candidates
                ]
                advantages = emotion_advantage([float(valence(e)) for e in emotions])
                for j, (_, episode) in enumerate(candidates):
                    episode.reward = None if advantages is None else advantages[j]
                    episode.policy_version = version
                record, episode = candidates[cont_idx]
                group = [ep for _, ep in candidates]
            else:
                gen = torch.Generator()
                gen.manual_seed(turn_seed % (2**63 - 1))
                outcome = policy.run_turn(
                    history, env.db, mode="sample", generator=gen, collect=True
                )
                record, episode = outcome.record, outcome.episode
                episode.reward = None
                episode.policy_version = version
                db_count = outcome.db_count
                group = [episode]

            state_text = format_critic_state(
                env.ontology, record.domain, record.state, db_count,
                history[-2][1] if len(history) >= 2 else "", history[-1][1],
            )
            experience = Experience(
                state_text=state_text,
                action_text=format_critic_action(record.actions, record.domain),
                reward=0.0,
                next_state_text=None,
                terminal=False,
            )
            if prev_experience is not None:
                prev_experience.next_state_text = state_text
            prev_experience = experience

            logged.append(LoggedTurn(record, history[-1][1], emotion))
            turns.append(BufferedTurn(episode, experience, group))
            history.append(("system", record.response))
            utt, emotion, done = sim.respond(record.response)
            history.append(("user", utt))
            if done:
                break

        success = sim.succeeded
        total = len(turns)
        for t, turn in enumerate(turns, start=1):
            turn.experience.reward = dialogue_reward(t, total, success)
            turn.experience.terminal = t == total
        dialogue = BufferedDialogue(turns, success=success, version=version)
        return dialogue, DialogueLog(sim.goal, logged, completed=done)

    # -- RL update -------------------------------------------------------------

    def _critic_update(
        self,
        trainer: CriticTrainer,
        policy: DialoguePolicy,
        buffer: ReplayBuffer,
        iteration: int,
    ) -> None:
        cfg = self.config
        entries = [
            (t.experience, t.episode)
            for d in buffer.dialogues
            for t in d.turns
            if t.experience is not None
        ]
        if not entries:
            return
        rng = random.Random(derive_seed(cfg.seed, f"critic-it{iteration}"))
        fresh: dict[int, str] = {}
        with single_thread_inference():
            for i, (_, episode) in enumerate(entries):
                fresh[i] = sample_action_text(
                    policy,
                    episode.context,
                    cfg.actor.temperature_action,
                    derive_seed(cfg.seed, f"fresh{iteration}-{i}"),
                )
        indices = list(range(len(entries)))
        for _ in range(cfg.critic.epochs):
            rng.shuffle(indices)
            for start in range(0, len(indices), cfg.critic.batch_size):
                chunk = indices[start : start + cfg.critic.batch_size]
                batch = [entries[i][0] for i in chunk]
                fresh_actions = [[fresh[i]] for i in chunk]
                trainer.step(batch, fresh_actions)

    def _actor_update(
        self,
        ppo: TurnPPOTrainer,
        policy: DialoguePolicy,
        critics: CriticTrainer | None,
        buffer: ReplayBuffer,
        scheme: str,
        version: int,
        iteration: int,
    ) -> dict:
        cfg = self.config
        episodes: list[TurnEpisode] = []
        base_rewards: list[float] = []

        continuation: list[tuple[TurnEpisode, Experience]] = []
        for d in buffer.dialogues:
            for turn in d.turns:
                if scheme in ("sent", "combined"):
                    for cand in turn.candidates:
                        if cand.reward is None or cand is turn.episode:
                            continue
                        episodes.append(cand)
                        base_rewards.append(float(cand.reward))
                if turn.experience is not None:
                    continuation.append((turn.episode, turn.experience))

        if scheme == "sent":
            for episode, _ in continuation:
                if episode.reward is not None:
                    episodes.append(episode)
                    base_rewards.append(float(episode.reward))
        else:
            advs = [
                critics.advantage(exp.state_text, exp.action_text)
                for _, exp in continuation
            ]
            mean = sum(advs) / len(advs)
            var = sum((a - mean) ** 2 for a in advs) / len(advs)
            std = math.sqrt(var) if var > 0 else 1.0
            for (episode, _), adv in zip(continuation, advs):
                a_std = (adv - mean) / std
                if scheme == "succ":
                    reward = a_std
                else:
                    reward = cfg.rl.rho * a_std + float(episode.reward or 0.0)
                episodes.append(episode)
                base_rewards.append(reward)

        if not episodes:
            return {"episodes": 0}
        effective = replay_rewards(
            list(zip(episodes, base_rewards)),
            policy.backbone,
            current_version=version,
            pad_id=policy.vocab.pad_id,
            eta=cfg.rl.eta,
        )
        # stored rewards stay untouched; train on reward-substituted copies
        train_pool = [
            dataclasses.replace(e, reward=r) for e, r in zip(episodes, effective)
        ]
        rng = random.Random(derive_seed(cfg.seed, f"actor-it{iteration}"))
        rng.shuffle(train_pool)
        budget = cfg.actor.steps_per_iteration * cfg.actor.batch_size
        chosen = train_pool[:budget]
        stats = ppo.update(chosen)
        return {
            "episodes": len(chosen),
            "mean_kl": stats.mean_kl,
            "clip_fraction": stats.clip_fraction,
            "loss": stats.loss,
            "aborted_batches": stats.aborted_batches,
        }

    def phase_rl(
        self,
        policy: DialoguePolicy,
        critics: CriticTrainer | None,
    ) -> TurnPPOTrainer:
        cfg = self.config
        scheme = cfg.rl.reward
        value_head = ValueHead(policy.backbone.hidden_size)
        ppo = TurnPPOTrainer(
            policy.backbone,
            value_head,
            PPOConfig(
                lr=cfg.actor.lr,
                batch_size=cfg.actor.batch_size,
                epsilon=cfg.actor.epsilon,
                beta=cfg.actor.beta,
                kl_ceiling=cfg.actor.kl_ceiling,
                gamma_turn=cfg.rl.gamma_turn,
                lam=cfg.rl.lam,
            ),
            pad_id=policy.vocab.pad_id,
        )
        buffer = ReplayBuffer(cfg.rl.buffer_size, derive_seed(cfg.seed, "buffer"))
        version = 0
        collected = 0
        successes = 0
        since_eval = 0

        def collect_one() -> None:
            nonlocal collected, successes, since_eval
            dialogue, _ = self.collect_dialogue(
                policy, derive_seed(cfg.seed, f"rl{collected}"), scheme, version
            )
            buffer.push(dialogue)
            collected += 1
            since_eval += 1
            successes += dialogue.success

        while len(buffer) < cfg.rl.buffer_size and collected < cfg.rl.dialogues:
            collect_one()
        self._log("buffer_fill", {"dialogues": collected, "successes": successes})

        iteration = 0
        while collected < cfg.rl.dialogues:
            target = min(cfg.rl.training_interval, cfg.rl.dialogues - collected)
            for _ in range(target):
                collect_one()
            if critics is not None:
                self._critic_update(critics, policy, buffer, iteration)
            stats = self._actor_update(
                ppo, policy, critics, buffer, scheme, version, iteration
            )
            version += 1
            self._log(
                "rl_iteration",
                {
                    "iteration": iteration,
                    "collected": collected,
                    "success_rate_so_far": successes / max(collected, 1),
                    **stats,
                },
            )
            buffer.discard_oldest(cfg.rl.training_interval)
            iteration += 1
            if since_eval >= cfg.rl.eval_every:
                since_eval = 0
                save_policy(
                    self.outdir / f"policy-rl-{collected}", policy, cfg, value_head
                )

        save_policy(self.outdir / "policy-rl", policy, cfg, value_head)
        if critics is not None:
            save_critics(
                self.outdir / "critics",
                critics.q, critics.v, critics.q_target, critics.v_target, cfg,
            )
        buffer.save(self.outdir / "buffer.json")
        self.result.phases.append("rl")
        return ppo

    def train_full(self) -> TrainResult:
        """Run every phase in order; artifacts land in the run directory."""
        corpus, dialogues = self.phase_bootstrap()
        policy, _ = self.phase_sl(corpus)
        critics = None
        if self.config.rl.reward != "sent":
            critics = self.phase_critic_pretrain(policy, dialogues)
        self.phase_rl(policy, critics)
        return self.result


def compare_policies(
    policy_a: DialoguePolicy,
    policy_b: DialoguePolicy,
    env: Environment,
    n_pairs: int,
    judge,
    seed: int = 0,
) -> dict[str, int]:
    """Paired-goal rollouts judged pairwise; returns win/tie counts."""
    rng = random.Random(derive_seed(seed, "judge-order"))
    tally = {"a_wins": 0, "b_wins": 0, "ties": 0}
    for i in range(n_pairs):
        dseed = derive_seed(seed, f"pair{i}")
        log_a, _ = rollout_dialogue(
            lambda: PolicyRunner(policy_a, env.db), env, dseed
        )
        log_b, _ = rollout_dialogue(
            lambda: PolicyRunner(policy_b, env.db), env, dseed
        )
        verdict = judge_compare(log_a, log_b, judge, rng)
        if verdict.judgement == "A":
            tally["a_wins"] += 1
        elif verdict.judgement == "B":
            tally["b_wins"] += 1
        else:
            tally["ties"] += 1
    return tally
