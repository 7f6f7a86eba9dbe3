import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def faces():
    """Eight 64-pixel synthetic faces with their polygons."""
    from semifragile.synthetic import synthetic_faces

    return synthetic_faces(8, 64, seed=7)


@pytest.fixture(scope="session")
def face128():
    from semifragile.synthetic import synthetic_face

    return synthetic_face(np.random.default_rng(3), 128)


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """``record(n, passed, detail)`` logs one acceptance line for the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, [])

    def _record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((n, line))
        print(line)
        return ok

    return _record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
