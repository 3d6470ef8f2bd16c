"""Shared fixtures, including the session-wide bank of full-length runs.

The trend-level acceptance criteria need 2000-step runs across mechanisms,
potentials, statistics and seeds. They are computed once per session and
shared, with per-run wall times kept for the runtime criteria.
"""

from __future__ import annotations

import time

import pytest

from phibal.config import with_seed
from phibal.potentials import default_catalog
from phibal.training import BalanceConfig, TrainConfig, train

SEEDS = (0, 1, 2)


def _balance_for(label: str) -> BalanceConfig:
    if label == "st_moe":
        return BalanceConfig(mechanism="st_moe", phi=None)
    if label == "none":
        return BalanceConfig(mechanism="none", phi=None, alpha=0.0)
    if label.startswith("freq:"):
        return BalanceConfig(
            mechanism="phi", phi=label[len("freq:"):], statistic="frequency"
        )
    return BalanceConfig(mechanism="phi", phi=label)


def run_labels() -> list[str]:
    labels = ["none", "st_moe", "freq:neg_shannon"]
    labels += [spec.token() for spec in default_catalog()]
    return labels


@pytest.fixture(scope="session")
def run_bank():
    """{(label, seed): (RunRecord, seconds)} for every full-length run."""
    bank = {}
    for label in run_labels():
        for seed in SEEDS:
            cfg = with_seed(TrainConfig(balance=_balance_for(label)), seed)
            started = time.perf_counter()
            record = train(cfg)
            bank[(label, seed)] = (record, time.perf_counter() - started)
    return bank
