import numpy as np
import pytest
from hypothesis import settings

from banlab.ingest import RiderHistory, SessionRecord

settings.register_profile("banlab", max_examples=40, deadline=None)
settings.load_profile("banlab")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def make_session(power, hr=None, index=1, day=1, temperature=15.0, interval=5, t=None):
    power = np.asarray(power, dtype=float)
    if hr is None:
        hr = np.full(len(power), np.nan)
    if t is None:
        t = np.arange(len(power)) * interval
    return SessionRecord(index, day, temperature, np.asarray(t, dtype=float), power, np.asarray(hr, dtype=float), interval)


def make_hr_history(a, b, c, n_samples=2000, noise_sd=0.0, seed=0, lag_s=15, interval=5, temperatures=None):
    """Sessions whose heart rate follows a + b * power(t - lag) + c * T * t + noise."""
    rng = np.random.default_rng(seed)
    shift = lag_s // interval
    sessions = []
    for k, (ak, bk) in enumerate(zip(a, b)):
        n = n_samples + shift
        levels = rng.uniform(100, 350, size=n // 60 + 1).repeat(60)[:n]
        p_full = np.round(levels + 15 * rng.standard_normal(n)).clip(0)
        temp = temperatures[k] if temperatures is not None else float(rng.uniform(5, 25))
        t = np.arange(n_samples) * interval
        hr = ak + bk * p_full[:n_samples] + c * temp * t + noise_sd * rng.standard_normal(n_samples)
        sessions.append(SessionRecord(k + 1, k + 1, temp, t, p_full[shift:], hr, interval))
    return RiderHistory("hr", tuple(sessions))


def standard_truth(sigma=8.0):
    from banlab.banister import BanisterParams
    from banlab.tp_model import TpParams

    return TpParams(200.0, 5.0, sigma, BanisterParams(2.0, 40.0, 12.0))


def metric_config(seed=0, exact=False, lam=25.0, sigma=8.0, n_sessions=150, n_days=300, **kw):
    from banlab.synth import ScheduleRecipe, SynthConfig

    return SynthConfig(
        truth=standard_truth(sigma),
        n_days=n_days,
        schedule=ScheduleRecipe(n_sessions=n_sessions),
        lambda_policy=lam,
        exact=exact,
        rng_seed=seed,
        **kw,
    )
