import json
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from mtsh.network import HourglassConfig
from mtsh.synthetic import SyntheticFigureParams, generate_synthetic

torch.set_num_threads(1)

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def reference_tables():
    return json.loads((FIXTURES / "reference_tables.json").read_text())


@pytest.fixture
def tiny_config():
    # R=16, F=8: enough to exercise every code path in well under a second.
    return HourglassConfig(num_stacks=2, features=8, depth=2, resolution=16, input_resolution=64)


@pytest.fixture(scope="session")
def small_samples():
    return generate_synthetic(SyntheticFigureParams(seed=11, size=64, n_subjects=4), 12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion."""
    outcomes = {}
    for status in ("passed", "failed", "error", "xfailed", "xpassed", "skipped"):
        for rep in terminalreporter.stats.get(status, []):
            name = getattr(rep, "nodeid", "").split("::")[-1]
            if not name.startswith("test_criterion_") or getattr(rep, "when", "call") not in ("call", "setup"):
                continue
            num = int(name.split("_")[2])
            ok = status == "passed"
            outcomes.setdefault(num, []).append((name, ok, status))
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(outcomes):
        ok = all(o for _, o, _ in outcomes[num])
        detail = ", ".join(f"{n} {s}" for n, _, s in outcomes[num])
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'} ({detail})")
