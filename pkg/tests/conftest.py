import numpy as np
import pytest

from bapa_lab.model import ModelConfig, init_model
from bapa_lab.probe import gen_library, gen_probe


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    lib = gen_library(24, 6, seed=3)
    return gen_probe(lib, num_keys=4, seed=5, train_size=64)


@pytest.fixture(scope="session")
def tiny_cfg(small_dataset):
    return ModelConfig(
        embed_dim=16, head_dim=4, num_heads=4, num_layers=2, patch_dim=6,
        text_vocab_size=small_dataset.prompt.text_vocab_size, enc_hidden=8, mlp_hidden=24, seed=7,
    )


@pytest.fixture
def tiny_model(tiny_cfg):
    return init_model(tiny_cfg)


# acceptance criteria record their verdicts here; printed once at the end of the run
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(num: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[num] = (bool(ok), detail)
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
