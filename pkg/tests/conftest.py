import pytest
import torch


@pytest.fixture(scope="session")
def default_flow():
    # trained once on first use, then read from the on-disk cache
    from stinet.flow import default_flow_estimator

    return default_flow_estimator()


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
