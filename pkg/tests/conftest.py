import numpy as np
import pytest

from kneurons.model import ModelConfig, MultimodalLM
from kneurons.vocab import DEFAULT_VOCAB

TINY = ModelConfig(n_layers=2, d_model=16, d_ff=32, n_heads=2, vocab_size=len(DEFAULT_VOCAB),
                   patch_grid=(4, 4), image_hw=(32, 32), d_enc=8, max_seq=32)


def tiny_model(seed: int = 0, scale: float = 1.0) -> MultimodalLM:
    """Small random model; ``scale`` inflates weights so activations are not tiny."""
    m = MultimodalLM.init(TINY, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for k, v in m.params.items():
        if k.endswith("_w") or k.endswith("emb"):
            m.params[k] = v + scale * rng.normal(0, 0.3, v.shape)
    return m


def random_image(seed: int) -> np.ndarray:
    return np.random.default_rng(seed).integers(0, 256, (32, 32, 3), dtype=np.uint8)


@pytest.fixture
def model():
    return tiny_model(0)


@pytest.fixture(scope="session")
def reference_model():
    from kneurons.pipeline import load_reference_model
    return load_reference_model()


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str = "") -> None:
    line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}"
    if detail:
        line += f"  [{detail}]"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
