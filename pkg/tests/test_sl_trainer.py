from __future__ import annotations

import math
import random

import pytest
import torch

from todrl.backbone import BigramBackbone, TinyTransformer, TransformerConfig
from todrl.ontology import default_ontology
from todrl.seqformat import Vocabulary, render_sequence
from todrl.sl_trainer import (
    DegenerateBatchError,
    SLConfig,
    build_example,
    imitation_loss,
    train_sl,
)

from .helpers import random_record


class _UniformModel(torch.nn.Module):
    """Constant-zero logits: every next token uniformly likely."""

    def __init__(self, vocab_size: int):
        super().__init__()
        self.vocab_size = vocab_size
        self.dummy = torch.nn.Parameter(torch.zeros(1))

    def forward(self, idx):
        b, t = idx.shape
        return torch.zeros(b, t, self.vocab_size) + 0.0 * self.dummy


def test_uniform_model_loss_is_log_vocab():
    vocab_size = 23
    model = _UniformModel(vocab_size)
    ids = torch.randint(0, vocab_size, (3, 12),
                        generator=torch.Generator().manual_seed(0))
    mask = torch.ones(3, 12, dtype=torch.bool)
    loss = imitation_loss(model, ids, mask)
    assert float(loss.detach()) == pytest.approx(math.log(vocab_size), abs=1e-6)


def test_perfect_model_loss_is_zero():
    model = BigramBackbone(3)
    with torch.no_grad():
        # token i deterministically followed by token (i + 1) % 3
        model.table.fill_(-40.0)
        for i in range(3):
            model.table[i, (i + 1) % 3] = 40.0
    ids = torch.tensor([[0, 1, 2, 0, 1]])
    mask = torch.ones_like(ids, dtype=torch.bool)
    loss = imitation_loss(model, ids, mask)
    assert float(loss.detach()) == pytest.approx(0.0, abs=1e-6)


def test_handbuilt_three_token_example_matches_formula():
    """Loss equals the analytic mean NLL on a hand-built 3-token sequence."""
    model = BigramBackbone(3)
    with torch.no_grad():
        model.table.copy_(torch.tensor(
            [[0.3, -0.2, 0.9], [1.0, 0.0, -1.0], [0.0, 0.5, 0.25]],
            dtype=torch.float64,
        ))
    ids = torch.tensor([[0, 2, 1]])
    mask = torch.ones_like(ids, dtype=torch.bool)
    loss = float(imitation_loss(model, ids, mask).detach())

    def logp(row, target):
        z = math.log(sum(math.exp(x) for x in row))
        return row[target] - z

    expected = -(logp([0.3, -0.2, 0.9], 2) + logp([0.0, 0.5, 0.25], 1)) / 2
    assert loss == pytest.approx(expected, abs=1e-6)


def test_gradient_matches_finite_differences():
    torch.manual_seed(1)
    model = BigramBackbone(3)
    with torch.no_grad():
        model.table.copy_(torch.randn(3, 3, dtype=torch.float64) * 0.4)
    ids = torch.tensor([[0, 1, 2, 0]])
    mask = torch.tensor([[True, True, False, True]])

    loss = imitation_loss(model, ids, mask)
    loss.backward()
    analytic = model.table.grad.clone()
    eps = 1e-6
    for i in range(3):
        for j in range(3):
            with torch.no_grad():
                model.table[i, j] += eps
                up = float(imitation_loss(model, ids, mask).detach())
                model.table[i, j] -= 2 * eps
                down = float(imitation_loss(model, ids, mask).detach())
                model.table[i, j] += eps
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(float(analytic[i, j])), 1e-8)
            assert abs(fd - float(analytic[i, j])) / denom <= 1e-4


def test_empty_mask_raises_degenerate_batch():
    model = BigramBackbone(3)
    ids = torch.tensor([[0, 1]])
    mask = torch.zeros_like(ids, dtype=torch.bool)
    with pytest.raises(DegenerateBatchError):
        imitation_loss(model, ids, mask)


def test_mask_covers_generated_segments_but_not_history_or_db():
    ontology = default_ontology()
    rng = random.Random(0)
    record = random_record(ontology, rng)
    rendered = render_sequence(record, ontology)
    vocab = Vocabulary(rendered.tokens)
    ids, mask = build_example(record, ontology, vocab)
    ha, hb = rendered.spans["history"]
    assert not any(mask[ha:hb])
    da, dbb = rendered.spans["db"]
    assert not any(mask[da:dbb])
    for name in ("emotion", "domain", "state", "action", "conduct", "system"):
        a, b = rendered.spans[name]
        assert all(mask[a:b]), name


def test_train_determinism_same_seed_same_parameters(ontology, generated_db):
    from todrl.orchestrator import bootstrap_corpus, build_vocabulary

    records, _ = bootstrap_corpus(ontology, generated_db, 12, 5)
    vocab = build_vocabulary(ontology, generated_db, records)

    def run():
        backbone = TinyTransformer(
            TransformerConfig(vocab_size=len(vocab), d_model=32, n_heads=4,
                              n_layers=1, d_ff=64, max_len=512),
            seed=9,
        )
        train_sl(backbone, records, ontology, vocab,
                 SLConfig(epochs=2, lr=1e-3, batch_size=8, seed=4))
        return backbone.snapshot()

    a, b = run(), run()
    for key in a:
        assert torch.equal(a[key], b[key])


def test_divergence_aborts(ontology, generated_db):
    from todrl.orchestrator import bootstrap_corpus, build_vocabulary
    from todrl.sl_trainer import TrainingDivergedError

    records, _ = bootstrap_corpus(ontology, generated_db, 6, 5)
    vocab = build_vocabulary(ontology, generated_db, records)
    backbone = TinyTransformer(
        TransformerConfig(vocab_size=len(vocab), d_model=16, n_heads=2,
                          n_layers=1, d_ff=32, max_len=512),
        seed=0,
    )
    with torch.no_grad():
        for p in backbone.parameters():
            p.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError):
        train_sl(backbone, records, ontology, vocab, SLConfig(epochs=1, seed=0))


def test_corpus_required(ontology):
    vocab = Vocabulary(["a"])
    backbone = BigramBackbone(len(vocab))
    with pytest.raises(ValueError):
        train_sl(backbone, [], ontology, vocab)


# -- convergence checks on the shared trained fixture -------------------------


def test_loss_decreases_smoothed(sl_small):
    losses = sl_small.result.step_losses
    window = 10
    smoothed = [
        sum(losses[i : i + window]) / window
        for i in range(0, len(losses) - window, window)
    ]
    violations = sum(
        1 for a, b in zip(smoothed, smoothed[1:]) if b > a + 0.02
    )
    assert violations <= max(1, len(smoothed) // 10), smoothed


def test_holdout_perplexity_below_threshold(sl_small):
    assert sl_small.result.holdout_perplexity[-1] < 1.5
