"""Checkpoint containers: parameter blobs plus a manifest and vocabulary.

A checkpoint is a directory with ``manifest.json`` (kind, format version,
seed, config snapshot, vocabulary) and one or more ``*.pt`` parameter blobs.
Policy, critic, and experience-buffer checkpoints share the container format
and differ in the manifest ``kind``.
"""

from __future__ import annotations

import json
from pathlib import Path

import torch

from .backbone import TinyTransformer, TransformerConfig, ValueHead
from .config import RunConfig
from .ontology import Ontology
from .policy import DialoguePolicy, GenerationConfig
from .rl_dialogue import Critic, TextEncoder
from .seqformat import Vocabulary

FORMAT_VERSION = 1


def _write_manifest(path: Path, kind: str, manifest: dict) -> None:
    manifest = {"kind": kind, "format_version": FORMAT_VERSION, **manifest}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def read_manifest(path: str | Path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text())


def save_policy(
    path: str | Path,
    policy: DialoguePolicy,
    config: RunConfig,
    value_head: ValueHead | None = None,
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_manifest(
        path,
        "policy",
        {
            "seed": config.seed,
            "config": config.to_dict(),
            "vocab": policy.vocab.to_list(),
            "ontology": policy.ontology.to_dict(),
        },
    )
    torch.save(policy.backbone.state_dict(), path / "backbone.pt")
    if value_head is not None:
        torch.save(value_head.state_dict(), path / "value_head.pt")


def load_policy(path: str | Path) -> tuple[DialoguePolicy, RunConfig, ValueHead | None]:
    path = Path(path)
    manifest = read_manifest(path)
    if manifest["kind"] != "policy":
        raise ValueError(f"expected a policy checkpoint, got {manifest['kind']!r}")
    config = RunConfig.from_dict(manifest["config"])
    vocab = Vocabulary.from_list(manifest["vocab"])
    ontology = Ontology.from_dict(manifest["ontology"])
    backbone = TinyTransformer(
        TransformerConfig(
            vocab_size=len(vocab),
            d_model=config.model.d_model,
            n_heads=config.model.n_heads,
            n_layers=config.model.n_layers,
            d_ff=config.model.d_ff,
            max_len=config.model.max_len,
        )
    )
    backbone.load_state_dict(torch.load(path / "backbone.pt", weights_only=True))
    gen = GenerationConfig(
        temperature_action=config.actor.temperature_action,
        temperature_response=config.actor.temperature_response,
        sample_size=config.actor.sample_size,
        history_exchanges=config.actor.history_length,
    )
    policy = DialoguePolicy(backbone, vocab, ontology, gen)
    value_head = None
    head_path = path / "value_head.pt"
    if head_path.exists():
        value_head = ValueHead(backbone.hidden_size)
        value_head.load_state_dict(torch.load(head_path, weights_only=True))
    return policy, config, value_head


def save_critics(
    path: str | Path,
    critic_q: Critic,
    critic_v: Critic,
    q_target: Critic,
    v_target: Critic,
    config: RunConfig,
) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    _write_manifest(path, "critic", {"seed": config.seed, "config": config.to_dict()})
    torch.save(
        {
            "q": critic_q.state_dict(),
            "v": critic_v.state_dict(),
            "q_target": q_target.state_dict(),
            "v_target": v_target.state_dict(),
        },
        path / "critics.pt",
    )


def load_critics(path: str | Path, vocab: Vocabulary, config: RunConfig):
    path = Path(path)
    manifest = read_manifest(path)
    if manifest["kind"] != "critic":
        raise ValueError(f"expected a critic checkpoint, got {manifest['kind']!r}")
    blobs = torch.load(path / "critics.pt", weights_only=True)
    critics = []
    for key in ("q", "v", "q_target", "v_target"):
        critic = Critic(TextEncoder(vocab, d_model=config.critic.d_model))
        critic.load_state_dict(blobs[key])
        critics.append(critic)
    return tuple(critics)
