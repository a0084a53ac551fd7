import numpy as np
import pytest
import torch

from afvoice.rvq import train_codebooks

ACCEPTANCE_LINES: dict[str, tuple[bool, str]] = {}


def record(criterion: str, passed: bool, detail: str) -> None:
    """Store the result of criterion ``criterion`` ("3", or a part such as "2b")."""
    ACCEPTANCE_LINES[criterion] = (bool(passed), detail)


def _mark(passed: bool) -> str:
    return "[PASS]" if passed else "[FAIL]"


def acceptance_report() -> list[str]:
    """One line per criterion; multi-part criteria list their parts indented below."""
    groups: dict[int, list[str]] = {}
    for key in ACCEPTANCE_LINES:
        groups.setdefault(int(key.rstrip("abcdef")), []).append(key)
    lines = []
    for number in sorted(groups):
        keys = sorted(groups[number])
        if keys == [str(number)]:
            passed, detail = ACCEPTANCE_LINES[keys[0]]
            lines.append(f"{_mark(passed)} criterion {number}: {detail}")
            continue
        results = [ACCEPTANCE_LINES[k][0] for k in keys]
        lines.append(f"{_mark(all(results))} criterion {number}: {sum(results)}/{len(results)} parts pass")
        lines += [f"    {_mark(ACCEPTANCE_LINES[k][0])} {k}: {ACCEPTANCE_LINES[k][1]}" for k in keys]
    return lines


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_report():
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield


@pytest.fixture(scope="session")
def toy_books():
    """L=8, K=64, D=24 codebooks trained on Gaussian data."""
    rng = np.random.default_rng(0)
    books, _ = train_codebooks(rng.standard_normal((4000, 24)).astype(np.float32), 8, 64, seed=0)
    return books


@pytest.fixture(scope="session")
def small_codec(toy_books):
    """Untrained toy codec with toy codebooks attached; enough for shape and streaming checks."""
    from afvoice.codec import NeuralCodec

    return NeuralCodec(random_state=1).initialize(toy_books)


@pytest.fixture(scope="session")
def tones():
    from afvoice.codec import synthetic_tones

    return synthetic_tones(100, 1.0, seed=0)


@pytest.fixture(scope="session")
def trained_codec(tones):
    """Toy codec trained 500 steps on 100 synthetic tones (fixed seed)."""
    from afvoice.codec import NeuralCodec

    return NeuralCodec(n_steps=500, random_state=0).fit(tones)


@pytest.fixture(scope="session")
def untrained_codec(tones):
    """Same architecture and seed as ``trained_codec``, codebooks fit on its untrained latents."""
    from afvoice.codec import NeuralCodec

    codec = NeuralCodec(random_state=0).initialize()
    return codec.fit_codebooks([t.samples for t in tones])
