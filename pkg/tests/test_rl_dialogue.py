from __future__ import annotations

import math
import random

import pytest
import torch

from todrl.rl_dialogue import (
    Critic,
    CriticConfig,
    CriticTrainer,
    Experience,
    TabularTextEncoder,
    TextEncoder,
    combined_reward,
    dialogue_advantage,
    dialogue_reward,
    polyak,
    q_loss,
    v_loss,
)
from todrl.seqformat import Vocabulary

from .helpers import (
    CHAIN_ACTIONS,
    CHAIN_Q_TEXTS,
    CHAIN_V_TEXTS,
    chain_analytic,
    chain_experiences,
)


def test_dialogue_reward_schedule():
    assert dialogue_reward(3, 10, True) == -1.0
    assert dialogue_reward(10, 10, True) == 80.0
    assert dialogue_reward(10, 10, False) == -40.0


def test_dialogue_reward_totals():
    for total in (1, 4, 9):
        for success in (True, False):
            s = sum(dialogue_reward(t, total, success) for t in range(1, total + 1))
            bonus = 80.0 if success else -40.0
            assert s == pytest.approx(-(total - 1) + bonus)


def test_dialogue_reward_bounds_checked():
    with pytest.raises(ValueError):
        dialogue_reward(0, 5, True)
    with pytest.raises(ValueError):
        dialogue_reward(6, 5, True)


def test_combined_reward_arithmetic():
    assert combined_reward(2.0, 0.5, rho=0.1) == pytest.approx(0.7)
    assert combined_reward(123.0, 0.5, rho=0.0) == pytest.approx(0.5)
    assert combined_reward(0.0, 0.5, rho=0.1) == pytest.approx(0.5)


def test_polyak_single_step():
    target = [torch.zeros(3)]
    online = [torch.ones(3)]
    polyak(target, online, tau=0.01)
    assert torch.allclose(target[0], torch.full((3,), 0.01))


def test_polyak_full_copy():
    target = [torch.zeros(2, 2)]
    online = [torch.randn(2, 2, generator=torch.Generator().manual_seed(0))]
    polyak(target, online, tau=1.0)
    assert torch.equal(target[0], online[0])


def test_polyak_geometric_closed_form():
    rng = random.Random(4)
    for _ in range(50):
        shape = (rng.randint(1, 4), rng.randint(1, 4))
        tau = rng.choice([0.01, 0.1, 0.3, 0.9])
        k = rng.randint(1, 40)
        online = torch.randn(shape, dtype=torch.float64)
        target = torch.zeros(shape, dtype=torch.float64)
        for _ in range(k):
            polyak([target], [online], tau)
        expected = online * (1.0 - (1.0 - tau) ** k)
        assert torch.allclose(target, expected, atol=1e-6)


def test_polyak_shape_mismatch_raises():
    with pytest.raises(ValueError):
        polyak([torch.zeros(2)], [torch.zeros(3)], 0.5)
    with pytest.raises(ValueError):
        polyak([torch.zeros(2)], [torch.zeros(2), torch.zeros(2)], 0.5)
    with pytest.raises(ValueError):
        polyak([torch.zeros(2)], [torch.zeros(2)], 0.0)


_Q_TEXTS = ["s <sep> a", "s1 <sep> a", "s2 <sep> a"]
_V_TEXTS = ["s", "s1", "s2", ""]


def _tabular_pair():
    q = Critic(TabularTextEncoder(_Q_TEXTS), seed=0)
    v = Critic(TabularTextEncoder(_V_TEXTS), seed=1)
    return q, v


def test_q_loss_zero_when_exact():
    q, v = _tabular_pair()
    batch = [Experience("s", "a", -1.0, "s2", False)]
    with torch.no_grad():
        v_val = float(v(["s2"])[0])
        target = -1.0 + 0.99 * v_val
        # force Q("s","a") to the exact target through the head bias
        feat = q.encoder.encode_batch(["s <sep> a"])
        current = float(q.head(feat)[0])
        q.head.bias += target - current
    assert float(q_loss(q, v, batch, 0.99)) == pytest.approx(0.0, abs=1e-10)


def test_q_loss_terminal_ignores_next_state():
    q, v = _tabular_pair()
    batch = [Experience("s", "a", 80.0, None, True)]
    with torch.no_grad():
        feat = q.encoder.encode_batch(["s <sep> a"])
        q.head.bias += 80.0 - float(q.head(feat)[0])
    assert float(q_loss(q, v, batch, 0.99)) == pytest.approx(0.0, abs=1e-8)


def test_q_loss_quadratic_in_constant_critic():
    """For a constant Q == c the loss is mean (c - target)^2, minimised at the
    mean target."""
    _, v = _tabular_pair()
    batch = [
        Experience("s1", "a", -1.0, "s2", False),
        Experience("s2", "a", 80.0, None, True),
    ]
    with torch.no_grad():
        targets = []
        for e in batch:
            boot = 0.0 if e.terminal else 0.99 * float(v([e.next_state_text])[0])
            targets.append(e.reward + boot)

    losses = {}
    for c in (-5.0, 0.0, sum(targets) / 2, 40.0):
        q = Critic(TabularTextEncoder(_Q_TEXTS), seed=0)
        with torch.no_grad():
            q.head.weight.zero_()
            q.head.bias.fill_(c)
        losses[c] = float(q_loss(q, v, batch, 0.99).detach())
        manual = sum((c - t) ** 2 for t in targets) / 2
        assert losses[c] == pytest.approx(manual, rel=1e-5)
    best = sum(targets) / 2
    assert losses[best] == min(losses.values())


def test_v_loss_zero_on_consistency():
    q, v = _tabular_pair()
    batch = [Experience("s", "a", -1.0, "s2", False)]
    with torch.no_grad():
        q_val = float(q(["s"], ["a"])[0])
        feat = v.encoder.encode_batch(["s"])
        v.head.bias += q_val - float(v.head(feat)[0])
    assert float(v_loss(v, q, batch)) == pytest.approx(0.0, abs=1e-10)


def test_v_loss_single_pair_arithmetic():
    q, v = _tabular_pair()
    with torch.no_grad():
        v.head.weight.zero_()
        v.head.bias.zero_()
        q.head.weight.zero_()
        q.head.bias.fill_(4.0)
    batch = [Experience("s", "a", 0.0, None, True)]
    assert float(v_loss(v, q, batch)) == pytest.approx(16.0)


def test_v_loss_gradient_flows_to_v_only():
    q, v = _tabular_pair()
    batch = [Experience("s", "a", -1.0, "s2", False)]
    loss = v_loss(v, q, batch)
    loss.backward()
    assert any(
        p.grad is not None and p.grad.abs().sum() > 0 for p in v.parameters()
    )
    assert all(p.grad is None or p.grad.abs().sum() == 0 for p in q.parameters())


def test_targets_never_receive_gradient():
    vocab = Vocabulary(["s0", "s1", "advance", "stay"])
    trainer = CriticTrainer(
        Critic(TextEncoder(vocab, d_model=16, max_len=8), seed=0),
        Critic(TextEncoder(vocab, d_model=16, max_len=8), seed=1),
        CriticConfig(lr=1e-3, tau=0.5),
    )
    batch = [Experience("s0", "advance", -1.0, "s1", False)]
    q_before = [p.clone() for p in trainer.q_target.parameters()]
    trainer.step(batch)
    # targets moved exactly by the polyak rule, not by gradients
    for before, after, online in zip(
        q_before, trainer.q_target.parameters(), trainer.q.parameters()
    ):
        expected = 0.5 * before + 0.5 * online.detach()
        assert torch.allclose(after, expected, atol=1e-7)
        assert after.grad is None or after.grad.abs().sum() == 0


def test_dialogue_advantage_arithmetic():
    q, v = _tabular_pair()
    with torch.no_grad():
        q.head.weight.zero_()
        q.head.bias.fill_(5.0)
        v.head.weight.zero_()
        v.head.bias.fill_(3.0)
    assert dialogue_advantage(q, v, "s", "a") == pytest.approx(2.0)
    with torch.no_grad():
        v.head.bias.fill_(5.0)
    assert dialogue_advantage(q, v, "s", "a") == pytest.approx(0.0)


def test_chain_mdp_critics_converge_to_analytic_values():
    """Tabular critics reach the uniform-policy Q/V of the 3-state chain
    within 5% in under 2000 TD steps."""
    gamma = 0.99
    q_true, v_true = chain_analytic(gamma)
    experiences = chain_experiences(400, seed=7)
    trainer = CriticTrainer(
        Critic(TabularTextEncoder(CHAIN_Q_TEXTS), seed=0),
        Critic(TabularTextEncoder(CHAIN_V_TEXTS), seed=1),
        CriticConfig(lr=0.2, tau=0.1, gamma_dial=gamma),
    )
    rng = random.Random(0)
    sampler = lambda: [rng.choice(CHAIN_ACTIONS)]
    steps = 0
    for _ in range(2000):
        batch = [experiences[rng.randrange(len(experiences))] for _ in range(32)]
        fresh = [sampler() for _ in batch]
        trainer.step(batch, fresh)
        steps += 1
        if steps % 100 == 0:
            ok = True
            for s in ("s0", "s1"):
                for a in CHAIN_ACTIONS:
                    got = float(trainer.q([s], [a])[0])
                    if abs(got - q_true[(s, a)]) > 0.05 * abs(q_true[(s, a)]):
                        ok = False
                got_v = float(trainer.v([s])[0])
                if abs(got_v - v_true[s]) > 0.05 * abs(v_true[s]):
                    ok = False
            if ok:
                break
    assert steps < 2000, "critics failed to converge within 2000 TD steps"
    for s in ("s0", "s1"):
        for a in CHAIN_ACTIONS:
            got = float(trainer.q([s], [a])[0])
            assert got == pytest.approx(q_true[(s, a)], rel=0.05)
        assert float(trainer.v([s])[0]) == pytest.approx(v_true[s], rel=0.05)


def test_chain_mdp_advantage_near_zero_after_convergence():
    gamma = 0.99
    experiences = chain_experiences(400, seed=11)
    trainer = CriticTrainer(
        Critic(TabularTextEncoder(CHAIN_Q_TEXTS), seed=2),
        Critic(TabularTextEncoder(CHAIN_V_TEXTS), seed=3),
        CriticConfig(lr=0.2, tau=0.1, gamma_dial=gamma),
    )
    rng = random.Random(1)
    for _ in range(1500):
        batch = [experiences[rng.randrange(len(experiences))] for _ in range(32)]
        fresh = [[rng.choice(CHAIN_ACTIONS)] for _ in batch]
        trainer.step(batch, fresh)
    rng2 = random.Random(2)
    advantages = []
    for _ in range(400):
        s = rng2.choice(("s0", "s1"))
        a = rng2.choice(CHAIN_ACTIONS)
        advantages.append(trainer.advantage(s, a))
    assert abs(sum(advantages) / len(advantages)) < 0.5


def test_text_encoder_critic_smoke():
    vocab = Vocabulary("restaurant area informed unknown found system user hello".split())
    critic = Critic(TextEncoder(vocab, d_model=32, max_len=32), seed=5)
    out = critic(["restaurant area informed", "restaurant area unknown"])
    assert out.shape == (2,)
    assert torch.isfinite(out).all()
    paired = critic(["restaurant area informed"], ["restaurant inform area"])
    assert paired.shape == (1,)
