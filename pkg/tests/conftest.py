import pytest

from nsggan.config import TrainConfig
from nsggan.datapipe import generate_synthetic_dataset

CRITERIA: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    CRITERIA[number] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


TINY = dict(image_size=32, base_channels=4, n_resblocks=1, injection_channels=4, disc_channels=4, batch_size=2)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic_dataset(3, (0, 1, 2, 3), 32, seed=0)


@pytest.fixture
def tiny_config():
    return TrainConfig(**TINY, epochs=1)
