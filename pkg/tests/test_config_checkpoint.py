from __future__ import annotations

import json

import pytest
import torch

from todrl.checkpoint import (
    load_critics,
    load_policy,
    read_manifest,
    save_critics,
    save_policy,
)
from todrl.config import RunConfig, derive_seed


def test_config_roundtrip_yaml(tmp_path):
    cfg = RunConfig()
    cfg.seed = 42
    cfg.rl.reward = "sent"
    cfg.env.p_drop = 0.3
    path = tmp_path / "run.yaml"
    cfg.save(path)
    loaded = RunConfig.load(path)
    assert loaded.to_dict() == cfg.to_dict()


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("rl:\n  reward: sent\n  shiny_new_knob: 3\n")
    with pytest.raises(ValueError, match="shiny_new_knob"):
        RunConfig.load(path)
    path.write_text("not_a_section: {}\n")
    with pytest.raises(ValueError, match="not_a_section"):
        RunConfig.load(path)


def test_config_validates_ranges():
    cfg = RunConfig()
    cfg.rl.reward = "glory"
    with pytest.raises(ValueError):
        cfg.validate()
    cfg = RunConfig()
    cfg.rl.tau = 0.0
    with pytest.raises(ValueError):
        cfg.validate()
    cfg = RunConfig()
    cfg.actor.epsilon = 1.5
    with pytest.raises(ValueError):
        cfg.validate()
    cfg = RunConfig()
    cfg.env.p_drop = -0.2
    with pytest.raises(ValueError):
        cfg.validate()


def test_config_carries_paper_parity_keys():
    cfg = RunConfig().to_dict()
    assert cfg["rl"]["gamma_turn"] == 1.0
    assert cfg["rl"]["gamma_dial"] == 0.99
    assert cfg["rl"]["lam"] == 0.99
    assert cfg["rl"]["tau"] == 0.01
    assert cfg["rl"]["rho"] == 0.1
    assert cfg["rl"]["eta"] == 0.9
    assert cfg["rl"]["training_interval"] == 10
    assert cfg["rl"]["buffer_size"] == 50
    assert cfg["actor"]["sample_size"] == 6
    assert cfg["actor"]["temperature_action"] == 0.5
    assert cfg["actor"]["temperature_response"] == 0.9
    assert cfg["actor"]["history_length"] == 5
    assert cfg["actor"]["batch_size"] == 16
    assert cfg["sl"]["epochs"] == 10
    assert cfg["sl"]["batch_size"] == 32
    assert cfg["critic"]["epochs"] == 5
    assert cfg["critic"]["batch_size"] == 32
    assert cfg["critic"]["grad_clip"] == 40.0


def test_derive_seed_stable_and_distinct():
    assert derive_seed(1, "a") == derive_seed(1, "a")
    assert derive_seed(1, "a") != derive_seed(1, "b")
    assert derive_seed(1, "a") != derive_seed(2, "a")


def test_policy_checkpoint_roundtrip(tmp_path, ontology, generated_db):
    from todrl.backbone import TinyTransformer, TransformerConfig, ValueHead
    from todrl.orchestrator import build_vocabulary
    from todrl.policy import DialoguePolicy

    vocab = build_vocabulary(ontology, generated_db, [])
    cfg = RunConfig()
    cfg.model.d_model = 32
    cfg.model.d_ff = 64
    backbone = TinyTransformer(
        TransformerConfig(vocab_size=len(vocab), d_model=32, n_heads=4,
                          n_layers=2, d_ff=64, max_len=768),
        seed=7,
    )
    policy = DialoguePolicy(backbone, vocab, ontology)
    head = ValueHead(backbone.hidden_size)
    with torch.no_grad():
        head.proj.weight.fill_(0.25)
    save_policy(tmp_path / "ckpt", policy, cfg, value_head=head)

    manifest = read_manifest(tmp_path / "ckpt")
    assert manifest["kind"] == "policy"
    assert manifest["seed"] == cfg.seed
    assert manifest["format_version"] >= 1

    loaded, loaded_cfg, loaded_head = load_policy(tmp_path / "ckpt")
    assert loaded_cfg.to_dict() == cfg.to_dict()
    assert loaded.vocab.to_list() == vocab.to_list()
    assert torch.allclose(loaded_head.proj.weight, head.proj.weight)
    history = [("user", "i am looking for a restaurant .")]
    a = policy.run_turn(history, generated_db).record
    b = loaded.run_turn(history, generated_db).record
    assert a.to_dict() == b.to_dict()


def test_policy_checkpoint_kind_guard(tmp_path, ontology, generated_db):
    (tmp_path / "x").mkdir()
    (tmp_path / "x" / "manifest.json").write_text(json.dumps({"kind": "critic"}))
    with pytest.raises(ValueError, match="policy"):
        load_policy(tmp_path / "x")


def test_critic_checkpoint_roundtrip(tmp_path, ontology, generated_db):
    from todrl.orchestrator import build_vocabulary
    from todrl.rl_dialogue import Critic, CriticTrainer, TextEncoder

    vocab = build_vocabulary(ontology, generated_db, [])
    cfg = RunConfig()
    cfg.critic.d_model = 16
    trainer = CriticTrainer(
        Critic(TextEncoder(vocab, d_model=16), seed=0),
        Critic(TextEncoder(vocab, d_model=16), seed=1),
    )
    save_critics(tmp_path / "cr", trainer.q, trainer.v, trainer.q_target,
                 trainer.v_target, cfg)
    assert read_manifest(tmp_path / "cr")["kind"] == "critic"
    q, v, qt, vt = load_critics(tmp_path / "cr", vocab, cfg)
    text = "restaurant area informed"
    assert float(q([text], ["restaurant inform area"])[0]) == pytest.approx(
        float(trainer.q([text], ["restaurant inform area"])[0])
    )
    assert float(vt([text])[0]) == pytest.approx(float(trainer.v_target([text])[0]))


def test_cli_bootstrap_and_report(tmp_path, monkeypatch):
    from todrl.cli import main

    out = tmp_path / "corpus.jsonl"
    code = main([
        "bootstrap", "--dialogues", "8", "--seed", "3", "--out", str(out)
    ])
    assert code == 0
    lines = [l for l in out.read_text().splitlines() if l.strip()]
    assert len(lines) > 8  # several turns per dialogue
    json.loads(lines[0])

    rundir = tmp_path / "run"
    rundir.mkdir()
    (rundir / "metrics.jsonl").write_text(
        '{"kind": "sl", "final_loss": 0.5}\n{"kind": "rl_iteration", "loss": 0.1}\n'
    )
    code = main(["report", str(rundir), "--out", str(tmp_path / "report.csv")])
    assert code == 0
    text = (tmp_path / "report.csv").read_text()
    assert "kind" in text.splitlines()[0]
    assert len(text.splitlines()) == 3


def test_cli_parser_covers_subcommands():
    from todrl.cli import build_parser

    parser = build_parser()
    for cmd in ("bootstrap", "train-sl", "train-rl", "simulate", "chat",
                "compare", "report"):
        args = parser.parse_args([cmd] + (
            ["x"] if cmd in ("simulate", "chat") else
            ["x", "y"] if cmd == "compare" else
            ["r"] if cmd == "report" else []
        ))
        assert args.command == cmd
