import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from divdec.corpus import (
    DASchema,
    ReferenceIndex,
    Vocab,
    default_grammar,
    generate_corpus,
)
from divdec.generator import train_generator
from divdec.numkit import TrainConfig


@pytest.fixture(scope="session")
def grammar():
    return default_grammar()


@pytest.fixture(scope="session")
def small_corpus(grammar):
    """Small synthetic corpus used by integration-style unit tests."""
    return generate_corpus(grammar, seed=11, sizes=(200, 40, 40))


@pytest.fixture(scope="session")
def small_bundle(grammar, small_corpus):
    """A quickly trained generator over the small corpus, plus its encodings."""
    train, val, test = small_corpus
    vocab = Vocab.from_grammar(grammar)
    schema = DASchema.from_grammar(grammar)
    cfg = TrainConfig(epochs=14, patience=6, seed=3)
    model = train_generator(train, val, cfg, vocab, schema, hidden_size=32, embed_size=16)
    index = ReferenceIndex.build(train)
    return {
        "model": model,
        "vocab": vocab,
        "schema": schema,
        "index": index,
        "train": train,
        "val": val,
        "test": test,
    }
