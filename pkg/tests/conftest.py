import numpy as np
import pytest

from amlsynth.model import AccountRef, PAYMENT_FORMATS, TransactionLog

# acceptance lines collected by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running full-scale check (opt in with AMLSYNTH_FULL=1)")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def random_log(rng: np.random.Generator, n_rows: int, n_accounts: int = 20, n_days: int = 3,
               origin: int = 1_672_531_200, p_laundering: float = 0.0) -> TransactionLog:
    """Time-sorted log with distinct endpoints, cent amounts and random formats."""
    accounts = [AccountRef(str(int(rng.integers(0, 5))), f"A{k:04d}") for k in range(n_accounts)]
    ts = np.sort(origin + rng.integers(0, n_days * 86400, size=n_rows))
    src = rng.integers(0, n_accounts, size=n_rows)
    dst = (src + rng.integers(1, n_accounts, size=n_rows)) % n_accounts
    amount = np.round(np.exp(rng.normal(4.0, 1.5, size=n_rows)), 2) + 0.01
    return TransactionLog(accounts, timestamp=ts, src=src, dst=dst, amount_paid=amount,
                          payment_format=rng.integers(0, len(PAYMENT_FORMATS), size=n_rows),
                          is_laundering=rng.random(n_rows) < p_laundering,
                          origin=origin, n_days=n_days)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
