"""
Shared fixtures and the `slow` marker for long acceptance runs
"""
import pytest
from prefect.testing.utilities import prefect_test_harness
from kforge.src.model import ModelConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long acceptance run, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(scope="session")
def prefect_harness():
    """
    Temporary prefect backend for tests that run whole flows
    """
    with prefect_test_harness():
        yield


@pytest.fixture
def tiny_config() -> ModelConfig:
    """
    Small 15-joint model that still walks every pyramid level
    """
    return ModelConfig(
        num_classes=3,
        pyramid="h36m15",
        channels=3,
        frames=8,
        latent_dim=6,
        embed_dim=4,
        w_dim=8,
        mapping_depth=2,
        widths=(6, 5, 4),
        kernel_size=3,
        classifier_widths=(4,),
    )


@pytest.fixture
def toy_config() -> ModelConfig:
    return ModelConfig(
        num_classes=2,
        pyramid="toy2",
        channels=2,
        frames=4,
        latent_dim=3,
        embed_dim=2,
        w_dim=4,
        mapping_depth=1,
        widths=(3, 3),
        kernel_size=3,
        batchnorm="none",
        classifier_widths=(3,),
    )
