import sys
import time
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from swinmark.core import make_generator, tiny_config  # noqa: E402
from swinmark.data import sample_images  # noqa: E402
from swinmark.networks import build_models  # noqa: E402
from swinmark.training import Trainer  # noqa: E402

settings.register_profile("default", max_examples=25, deadline=None)
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_models(tiny_cfg):
    return build_models(tiny_cfg, make_generator(0))


@pytest.fixture(scope="session")
def natural_images():
    """Ten natural 128x128 images bundled with scikit-image."""
    return sample_images(10, 128, 128)


@pytest.fixture(scope="session")
def overfit(tmp_path_factory):
    """Tiny model trained on 8 images with identity noise for 2000 steps (shared by tests)."""
    cfg = tiny_config(steps=2000)
    images = sample_images(8, cfg.height, cfg.width)
    out = tmp_path_factory.mktemp("overfit")
    start = time.perf_counter()
    trainer = Trainer(cfg, images, "identity", out)
    trainer.fit(log_every=0)
    seconds = time.perf_counter() - start
    path = trainer.save(out / "final.pt")
    return {"cfg": cfg, "images": images, "trainer": trainer, "checkpoint": path, "dir": out,
            "seconds": seconds}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
