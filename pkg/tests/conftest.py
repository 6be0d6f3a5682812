import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


class ScriptedRng:
    """Stands in for a numpy Generator in scripted MAC scenarios.

    ``integers(high)`` pops the next scripted value (which must be < high);
    any other draw is a scripting error.
    """

    def __init__(self, values):
        self.values = list(values)
        self.calls = []

    def integers(self, high, *args, **kwargs):
        if not self.values:
            raise AssertionError(f"unscripted integers({high}) draw")
        v = self.values.pop(0)
        assert 0 <= v < high, f"scripted value {v} outside [0, {high})"
        self.calls.append(high)
        return v

    def random(self, *args, **kwargs):
        raise AssertionError("unscripted random() draw")

    def choice(self, *args, **kwargs):
        raise AssertionError("unscripted choice() draw")


@pytest.fixture
def scripted_rng():
    return ScriptedRng


@pytest.fixture
def rng():
    return np.random.default_rng(1234)



# one PASS/FAIL line per acceptance criterion, printed after the run
_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """``acceptance(n, title, ok, detail)`` records a criterion line, then asserts ``ok``."""
    results = request.config.stash.setdefault(_ACCEPTANCE, {})

    def check(n, title, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'} C{n:<2} {title}" + (f" ({detail})" if detail else "")
        results[n] = line
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    results = terminalreporter.config.stash.get(_ACCEPTANCE, {})
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
