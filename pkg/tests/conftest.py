import random

import numpy as np
import pytest

from textlayout.codec import ALPHABET, Vocabulary, WordBox
from textlayout.geometry import BBox


@pytest.fixture(scope="session")
def vocab():
    return Vocabulary()


def random_page(rng: random.Random, n_words: int | None = None) -> list[WordBox]:
    """Random words with random valid boxes (not rendered)."""
    n = n_words if n_words is not None else rng.randint(1, 40)
    words = []
    for _ in range(n):
        w = "".join(rng.choice(ALPHABET) for _ in range(rng.randint(1, 9)))
        x1, y1 = rng.randint(0, 990), rng.randint(0, 990)
        words.append(WordBox(w, BBox(x1, y1, rng.randint(x1, 1000), rng.randint(y1, 1000))))
    return words


MICRO = dict(d=8, n_heads=2, enc_layers=1, dec_layers=1, patch_size=8, image_h=16, image_w=16, M=8)


def micro_model(vocab: Vocabulary, seed: int = 0, scale: float = 10.0):
    """Tiny model whose weights are spread out enough for finite differences to see them."""
    from textlayout.model import Model, ModelConfig
    model = Model(ModelConfig(vocab_size=len(vocab), **MICRO), seed=seed)
    rng = np.random.default_rng(seed + 1)
    for p in model.params.values():
        p.data = p.data * scale + rng.normal(0.0, 0.01, size=p.shape)
    return model


def micro_image(seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).uniform(0.0, 1.0, size=(16, 16))


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
