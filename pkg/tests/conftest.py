"""Shared fixtures.

Every engine a test builds should persist into :func:`run_store`, so that
one directory ends up holding every run log the suite produced. The
acceptance module runs last and audits that directory; the session hook
audits it once more after everything has finished.
"""

from __future__ import annotations

import itertools
import os
import random
import tempfile
from pathlib import Path

import pytest

from dcaiflow.flow import AuditReport, RunStore, audit_directory, violations

RUN_LOG_ROOT = Path(os.environ.get("DCAIFLOW_TEST_RUNS") or tempfile.mkdtemp(prefix="dcaiflow-runs-"))
_dirs = itertools.count()


def run_log_dir() -> Path:
    """A fresh directory under the suite-wide run log root."""
    d = RUN_LOG_ROOT / f"s{next(_dirs):04d}"
    d.mkdir(parents=True)
    return d


def audit_tree(root: Path = RUN_LOG_ROOT) -> list[AuditReport]:
    dirs = sorted({p.parent for p in root.rglob("*.jsonl")})
    return [report for d in dirs for report in audit_directory(d)]


@pytest.fixture
def run_store() -> RunStore:
    return RunStore(run_log_dir())


@pytest.fixture
def seeded_ids():
    rng = random.Random(1234)
    return lambda: f"{rng.getrandbits(64):016x}"


def pytest_collection_modifyitems(session, config, items):
    # The run-log audit must see the logs of every other test.
    items.sort(key=lambda item: item.module.__name__.endswith("test_acceptance"))


def pytest_sessionfinish(session, exitstatus):
    if not RUN_LOG_ROOT.exists():
        return
    reports = audit_tree()
    bad = violations(reports)
    reporter = session.config.pluginmanager.get_plugin("terminalreporter")
    if reporter is not None:
        reporter.write_line(f"run-log audit: {len(reports)} logs under {RUN_LOG_ROOT}, {len(bad)} violations")
        for line in bad[:20]:
            reporter.write_line(f"  {line}")
    if bad and session.exitstatus == 0:
        session.exitstatus = 1
