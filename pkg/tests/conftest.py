import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))
from make_desk_corpus import write_corpus  # noqa: E402

from end2wm.core import RunConfig
from end2wm.data import CropDataset


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    """(train_dir, heldout_dir) of natural images."""
    return write_corpus(tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="session")
def natural_batch(corpus):
    """16 natural 32x32 crops in [0, 1]."""
    return CropDataset(corpus[1], (32, 32)).fixed_crops(16, seed=5)


@pytest.fixture
def small_config():
    return RunConfig(
        latent_dim=32,
        proj_dim=64,
        encoder_channels=8,
        decoder_channels=8,
        encoder_blocks=1,
        decoder_blocks=2,
        batch_size=4,
        steps=3,
    )


@pytest.fixture
def rand_images():
    g = torch.Generator().manual_seed(0)
    return torch.rand(4, 3, 32, 32, generator=g)


# -- acceptance reporting ---------------------------------------------------

_CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    _CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[n])
