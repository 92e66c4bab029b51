import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Five 64x64 tiles, shared read-only across tests."""
    from ddcmnet.data import SceneSpec, generate

    root = tmp_path_factory.mktemp("tiny")
    generate(root, SceneSpec(size=64, seed=3), 5)
    return root


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n].splitlines()[0])
