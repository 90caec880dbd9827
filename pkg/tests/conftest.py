import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("batcall", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("batcall")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Four species, eight clips each, written once per session."""
    from batcall import datagen as dg

    root = tmp_path_factory.mktemp("corpus")
    manifest = dg.synth_chirp_dataset(root, num_species=4, clips_per_species=8, seed=5)
    return root, manifest


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
