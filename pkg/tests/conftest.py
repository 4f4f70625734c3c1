import numpy as np
import pytest

from malsmooth.corpus import ByteFile, SyntheticSpec, generate_synthetic_corpus
from malsmooth.model import Model, ModelConfig


TINY = ModelConfig(input_length=64, conv_window=8, conv_stride=8, num_filters=4)


def tiny_model(seed=0, dtype=np.float64, config=TINY):
    """Randomly initialized model with weights scaled up so every unit is active."""
    m = Model.initialize(config, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1000)
    for name, p in m.params.items():
        p[...] = rng.normal(0.0, 0.5, size=p.shape)
    return m


def constant_model(config, malware: bool):
    """A model whose score is fixed near 1 (malware) or near 0 (benign) for every input."""
    m = Model.initialize(config, seed=0)
    for p in m.params.values():
        p[...] = 0
    m.params["dense_bias"][...] = 8.0 if malware else -8.0
    return m


@pytest.fixture
def tiny():
    return tiny_model()


@pytest.fixture(scope="session")
def small_corpus():
    spec = SyntheticSpec(num_benign=40, num_malware=40, length_min=64, length_max=256, seed=3)
    return generate_synthetic_corpus(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_file(rng, k, label=1, fid="f"):
    return ByteFile(fid, rng.integers(0, 256, size=k, dtype=np.uint8).tobytes(), label)


# ---------------------------------------------------------------------------
# acceptance verdicts: one PASS/FAIL line per criterion in the terminal summary

_VERDICTS = []


@pytest.fixture
def verdict():
    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        _VERDICTS.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
