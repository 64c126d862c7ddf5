from __future__ import annotations

import pytest
import torch

from todrl.config import RunConfig
from todrl.ontology import (
    Database,
    Entity,
    default_ontology,
    generate_database,
)

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def ontology():
    return default_ontology()


@pytest.fixture(scope="session")
def casestudy_db(ontology):
    """Small hand-built database mirroring the judged case-study dialogue:
    a moderately priced centre restaurant with postcode cb21db and a thursday
    broxbourne-to-cambridge train tr0393."""
    db = Database(ontology)
    db.add(Entity("restaurant", {
        "name": "pizza express", "area": "centre", "pricerange": "moderate",
        "food": "italian", "postcode": "cb21db", "phone": "01223356354",
        "address": "12 mill road",
    }))
    db.add(Entity("restaurant", {
        "name": "golden wok", "area": "north", "pricerange": "cheap",
        "food": "chinese", "postcode": "cb41ep", "phone": "01223350688",
        "address": "9 king street",
    }))
    db.add(Entity("restaurant", {
        "name": "river bistro", "area": "centre", "pricerange": "expensive",
        "food": "french", "postcode": "cb12bd", "phone": "01223311053",
        "address": "4 bridge lane",
    }))
    db.add(Entity("hotel", {
        "name": "alpha lodge", "area": "east", "pricerange": "cheap",
        "type": "guesthouse", "parking": "yes", "postcode": "cb58rs",
        "phone": "01223525725",
    }))
    db.add(Entity("train", {
        "trainid": "tr0393", "departure": "broxbourne", "destination": "cambridge",
        "day": "thursday", "arriveby": "20:45", "leaveat": "05:32",
        "price": "17 pounds", "duration": "60 minutes",
    }))
    db.add(Entity("train", {
        "trainid": "tr8836", "departure": "ely", "destination": "london",
        "day": "monday", "arriveby": "09:15", "leaveat": "08:15",
        "price": "9 pounds", "duration": "45 minutes",
    }))
    return db


@pytest.fixture(scope="session")
def generated_db(ontology):
    return generate_database(ontology, seed=1, size=60)


@pytest.fixture(scope="session")
def run_config():
    return RunConfig()


@pytest.fixture(scope="session")
def sl_small(ontology):
    """SL run pinned by the convergence examples: 500 records, 10 epochs."""
    from types import SimpleNamespace

    from todrl.backbone import TinyTransformer, TransformerConfig
    from todrl.orchestrator import Environment, bootstrap_corpus, build_vocabulary
    from todrl.policy import DialoguePolicy
    from todrl.sl_trainer import SLConfig, train_sl

    cfg = RunConfig()
    env = Environment.from_config(cfg, zero_noise=True)
    records, _ = bootstrap_corpus(env.ontology, env.db, 95, 42, env_config=cfg.env)
    records = records[:500]
    vocab = build_vocabulary(env.ontology, env.db, records)
    backbone = TinyTransformer(
        TransformerConfig(vocab_size=len(vocab)), seed=1
    )
    result = train_sl(
        backbone, records, env.ontology, vocab,
        SLConfig(epochs=10, lr=cfg.sl.lr, seed=0),
    )
    return SimpleNamespace(
        env=env,
        records=records,
        result=result,
        policy=DialoguePolicy(backbone, vocab, env.ontology),
    )


@pytest.fixture(scope="session")
def sl_setup(ontology):
    """Converged SL policy at the default corpus size, with held-out dialogues."""
    from types import SimpleNamespace

    from todrl.backbone import TinyTransformer, TransformerConfig
    from todrl.orchestrator import Environment, bootstrap_corpus, build_vocabulary
    from todrl.policy import DialoguePolicy
    from todrl.sl_trainer import SLConfig, train_sl

    cfg = RunConfig()
    env = Environment.from_config(cfg, zero_noise=True)
    records, _ = bootstrap_corpus(
        env.ontology, env.db, cfg.corpus_dialogues, 42, env_config=cfg.env
    )
    vocab = build_vocabulary(env.ontology, env.db, records)
    backbone = TinyTransformer(
        TransformerConfig(vocab_size=len(vocab)), seed=1
    )
    result = train_sl(
        backbone, records, env.ontology, vocab,
        SLConfig(epochs=cfg.sl.epochs, lr=cfg.sl.lr, seed=0),
    )
    eval_records, _ = bootstrap_corpus(
        env.ontology, env.db, 40, 777, env_config=cfg.env
    )
    return SimpleNamespace(
        env=env,
        records=records,
        result=result,
        policy=DialoguePolicy(backbone, vocab, env.ontology),
        eval_records=eval_records,
    )
