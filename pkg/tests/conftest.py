import numpy as np
import pytest

from levelk.qnet import NetworkConfig


class TwoStateMDP:
    """Deterministic 2-state, 2-action chain used as a training oracle.

    Episodes are cut after ``horizon`` steps without termination, so the
    learned values are those of the discounted infinite-horizon problem.
    """

    rewards = np.array([[0.0, 1.0], [0.5, 0.0]])
    next_state = np.array([[0, 1], [0, 1]])
    net = NetworkConfig(ego_dim=2, slot_dim=1, n_slots=1, enc1=8, enc2=8, ego_hidden=16, trunk=32, n_actions=2)

    def __init__(self, horizon=20):
        self.horizon = horizon

    @classmethod
    def obs(cls, s):
        v = np.zeros(cls.net.input_dim)
        v[s] = 1.0
        return v

    def reset(self, rng):
        self.s = int(rng.integers(2))
        self.t = 0
        return self.obs(self.s)

    def step(self, a):
        r = self.rewards[self.s, a]
        self.s = int(self.next_state[self.s, a])
        self.t += 1
        return self.obs(self.s), r, False, self.t >= self.horizon, {}

    @classmethod
    def q_star(cls, gamma, iters=5000):
        q = np.zeros((2, 2))
        for _ in range(iters):
            q = cls.rewards + gamma * q.max(axis=1)[cls.next_state]
        return q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ----------------------------------------------------

_CRITERIA: dict[int, tuple[str, str, str]] = {}


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    if report.when == "call" or report.outcome != "passed":
        note = dict(report.user_properties).get("detail", "")
        _CRITERIA[number] = (title, "PASS" if report.outcome == "passed" else "FAIL", note)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        outcome.get_result().criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status, note = _CRITERIA[number]
        line = f"criterion {number} {status}: {title}"
        terminalreporter.write_line(line + (f" ({note})" if note else ""))
