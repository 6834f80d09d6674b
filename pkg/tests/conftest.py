import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_spec(variant="slca", **kw):
    from slca.config import BackboneConfig, EncoderConfig, ModelSpec

    return ModelSpec(variant=variant, encoder=EncoderConfig(input_size=32, num_blocks=2),
                     backbone=BackboneConfig(input_size=32, stem_channels=8, stage_channels=[8, 8, 16, 16],
                                             blocks_per_stage=1), **kw)


@pytest.fixture(scope="session")
def small_dataset():
    from slca.data import generate

    return generate(80, 32, 4, 5)


ACCEPTANCE: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        verdict, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {verdict} - {detail}")
