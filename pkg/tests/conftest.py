import numpy as np
import pytest

from clipmap.data import SyntheticSpec, make_split
from clipmap.model import EncoderConfig, init_clip_model


def central_diff(f, x: np.ndarray, index, h: float = 1e-5) -> float:
    """d f / d x[index] by central differences; ``x`` is perturbed in place and restored."""
    old = x[index]
    x[index] = old + h
    up = f()
    x[index] = old - h
    down = f()
    x[index] = old
    return (up - down) / (2 * h)


def tiny_configs(width=16, depth=2, heads=4, embed_dim=8, seq_len=10, vocab=32, grid=4, patch=2):
    kw = dict(width=width, depth=depth, heads=heads, embed_dim=embed_dim, vocab_size=vocab, seq_len=seq_len,
              grid=grid, patch=patch)
    return EncoderConfig("image", **kw), EncoderConfig("text", **kw)


def tiny_spec(n_train=128, n_val=32, seed=0, **kw):
    base = dict(n_attributes=4, n_values=3, grid=4, patch=2, seq_len=10, vocab_size=32)
    base.update(kw)
    return SyntheticSpec(n_train=n_train, n_val=n_val, seed=seed, **base)


def perturb(model, seed=1, std=0.05):
    """Add noise to every tensor so structural zeros/ones do not hide bugs."""
    rng = np.random.default_rng(seed)
    for _, t in model.named_parameters():
        t.data = t.data + rng.normal(0, std, t.shape)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_teacher():
    img, txt = tiny_configs()
    return perturb(init_clip_model(img, txt, seed=3))


@pytest.fixture(scope="session")
def tiny_data():
    spec = tiny_spec()
    return spec, make_split(spec, "train"), make_split(spec, "val")


# -- acceptance reporting ------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
