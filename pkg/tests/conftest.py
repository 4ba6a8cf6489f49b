"""Shared fixtures and the acceptance-criterion summary printer."""

from __future__ import annotations

import numpy as np
import pytest

from ofdmarl.config import CellConfig, QoSProfile
from ofdmarl.env import Observation


def tiny_cell(k: int = 4, n_prb: int = 4, slots: int = 4, **overrides) -> CellConfig:
    """Small, fast cell with one UE per class and modest traffic."""
    defaults = dict(
        k=k, n_prb=n_prb, buffer_slots=slots,
        qos_profiles=(
            QoSProfile(qi=1, gbr=20_000.0, pdb=10, packet_size=400,
                       arrival_period=4, penalty_weight=4.0),
            QoSProfile(qi=2, gbr=60_000.0, pdb=15, packet_size=1_200,
                       arrival_period=5, penalty_weight=3.0),
            QoSProfile(qi=3, gbr=40_000.0, pdb=30, packet_size=2_000,
                       arrival_period=0, poisson_mean=8.0, penalty_weight=2.0),
            QoSProfile(qi=4, gbr=20_000.0, pdb=50, packet_size=2_000,
                       arrival_period=0, poisson_mean=12.0, penalty_weight=1.0),
        ),
    )
    defaults.update(overrides)
    return CellConfig(**defaults)


def make_obs(sizes, ages, cqi=None, cqi_mean=None, qi=None, avg_throughput=None,
             prb_cursor=0, tti=0) -> Observation:
    """Hand-built observation for selector tests."""
    sizes = np.asarray(sizes, dtype=np.int64)
    ages = np.asarray(ages, dtype=np.int64)
    k = sizes.shape[0]
    if cqi is None:
        cqi = np.full(k, 9)
    if cqi_mean is None:
        cqi_mean = np.asarray(cqi, dtype=float)
    if qi is None:
        qi = np.array([i % 4 + 1 for i in range(k)])
    if avg_throughput is None:
        avg_throughput = np.full(k, 100.0)
    return Observation(
        cqi=np.asarray(cqi, dtype=np.int64),
        cqi_mean=np.asarray(cqi_mean, dtype=float),
        sizes=sizes,
        ages=ages,
        qi=np.asarray(qi, dtype=np.int64),
        avg_throughput=np.asarray(avg_throughput, dtype=float),
        prb_cursor=prb_cursor,
        tti=tti,
    )


@pytest.fixture
def cell():
    return tiny_cell()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    lines = []
    for status, marker in (("passed", "PASS"), ("failed", "FAIL"),
                           ("error", "FAIL")):
        for report in terminalreporter.stats.get(status, []):
            if "test_acceptance.py" in report.nodeid and report.when == "call":
                name = report.nodeid.split("::")[-1].replace("test_", "", 1)
                lines.append((name, marker))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, marker in sorted(lines):
            terminalreporter.write_line(f"{marker} {name}")
