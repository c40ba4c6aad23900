import sys
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """Twelve 64-pixel synthetic scenes; enough for a holdout split."""
    from typodamage.synthgen import SceneSpec, generate_dataset

    root = tmp_path_factory.mktemp("small")
    spec = SceneSpec(side=64, n_buildings=4, min_building=8, max_building=16)
    return generate_dataset(12, 7, root, spec)


@pytest.fixture
def acceptance_log(request):
    """List collecting one pass/fail line per acceptance criterion."""
    if not hasattr(request.config, "_acceptance_lines"):
        request.config._acceptance_lines = []
    return request.config._acceptance_lines


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
