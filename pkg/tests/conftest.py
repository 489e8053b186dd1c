import numpy as np
import pytest
from pathlib import Path

from landloop import harness, model

FIXTURE_DIR = Path(__file__).resolve().parents[1] / "build" / "test-fixtures"

BASE_SEED = 0
BASE_PATCHES = 200
BASE_EPOCHS = 20


@pytest.fixture(scope="session")
def desk_base():
    """The shared desk-profile base model, trained once and cached on disk.

    train_base is bit-deterministic for a seed, so the cache never goes
    stale for a fixed (seed, patches, epochs) key.
    """
    FIXTURE_DIR.mkdir(parents=True, exist_ok=True)
    path = FIXTURE_DIR / f"desk-base-s{BASE_SEED}-p{BASE_PATCHES}-e{BASE_EPOCHS}.glck"
    if path.exists():
        try:
            return model.load_checkpoint(path).params
        except Exception:
            path.unlink()
    params = harness.train_desk_base(seed=BASE_SEED, patches=BASE_PATCHES,
                                     epochs=BASE_EPOCHS)
    model.save_checkpoint(params, path,
                          provenance={"seed": BASE_SEED, "epochs": BASE_EPOCHS,
                                      "patches": BASE_PATCHES})
    return model.load_checkpoint(path).params


@pytest.fixture(scope="session")
def shifted_area():
    """One shifted-domain 256x256 area with ground truth."""
    return harness.target_area(100, 256)


@pytest.fixture(scope="session")
def small_area():
    """A quicker 128x128 shifted area for service-level tests."""
    return harness.target_area(100, 128)


@pytest.fixture(scope="session")
def source_patches():
    return harness.training_patches(20, 64, seed=9)
