"""Shared test configuration: deterministic hypothesis runs and a tiny training setup."""

import pytest
from hypothesis import settings

from msdistill.model import EncoderConfig, HeadConfig
from msdistill.raster import generate_synthetic_dataset
from msdistill.teachers import FrozenTeacher, default_frozen_encoder
from msdistill.trainer import TrainConfig
from msdistill.views import AugConfig

settings.register_profile("repro", derandomize=True, deadline=None, print_blob=True)
settings.load_profile("repro")


def tiny_config(**kw) -> TrainConfig:
    """16x16 views, width 32, two blocks: a step takes a few tens of milliseconds."""
    enc = EncoderConfig(patch_size=4, embed_dim=32, depth=2, heads=2, mid_layer=1, image_size=16)
    base = dict(epochs=7, warmup_epochs=1, batch_size=8, aug=AugConfig(n=2, m=2, out_global=16, out_local=8),
                encoder=enc, heads=HeadConfig(64, 16, 32))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def tiny_data():
    return generate_synthetic_dataset(64, 10, 16, 16, 4, 0)


@pytest.fixture(scope="session")
def tiny_frozen():
    return FrozenTeacher.random(default_frozen_encoder(tiny_config().encoder, 32), 1)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
