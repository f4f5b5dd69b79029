import pytest
from hypothesis import HealthCheck, settings

from ddpm_inversion_lab.schedule import build_schedule, plan_timesteps

settings.register_profile("lab", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("lab")


@pytest.fixture(scope="session")
def schedule():
    return build_schedule()


@pytest.fixture(scope="session")
def default_plan(schedule):
    return plan_timesteps(schedule, K=4, t_start=599, delta=200)


def pytest_terminal_summary(terminalreporter):
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance" in rep.nodeid and rep.when == "call":
                detail = dict(rep.user_properties).get("criterion", "")
                name = rep.nodeid.split("::")[-1].removeprefix("test_")
                lines.append((name, f"{outcome.upper()[:4]:4} {name}: {detail}"))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines, key=lambda p: int(p[0].split("_")[1])):
            terminalreporter.write_line(line)
