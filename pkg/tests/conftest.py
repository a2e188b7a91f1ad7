import os
import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=100,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=300,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


SMALL_RUN = {"offline": True, "seed": 7, "n_prompts": 50, "n_cycles": 3}


@pytest.fixture(scope="session")
def small_run(tmp_path_factory):
    """One 50-prompt, 3-cycle offline run shared by the pipeline tests."""
    from mocop.pipeline import run

    out = tmp_path_factory.mktemp("small-run")
    return run(dict(SMALL_RUN), out)


def pytest_terminal_summary(terminalreporter):
    try:
        import test_acceptance
    except ImportError:
        return
    lines = getattr(test_acceptance, "RESULTS", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines, key=lambda k: int(k[2:])):
            terminalreporter.write_line(lines[key])
