import json
import time
from pathlib import Path

import pytest

from unirag.evalharness import SynthBenchConfig, SystemConfig, build_system, gen_bench, run_grid

FIXTURES = Path(__file__).parent / "fixtures"

# criterion number -> list of (passed, detail) parts; filled by test_acceptance.py
ACCEPTANCE: dict[int, list[tuple[bool, str]]] = {}


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE.setdefault(n, []).append((bool(ok), detail))


def load_fixture(name: str) -> dict:
    data = json.loads((FIXTURES / f"{name}.json").read_text())
    assert {"generator", "oracle", "seed", "version"} <= set(data["provenance"])
    return data


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[n]
        ok = all(p for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def default_bench():
    return gen_bench(SynthBenchConfig())


class TrainedSystem:
    def __init__(self, bench, sys_cfg):
        t0 = time.perf_counter()
        self.untrained, _ = build_system(bench, sys_cfg, trained=False)
        self.pipe, self.history = build_system(bench, sys_cfg, trained=True)
        self.report = run_grid(self.pipe, bench)
        self.untrained_report = run_grid(self.untrained, bench)
        self.seconds = time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained_default(default_bench):
    """The default bench trained with every default setting (deep insertion)."""
    return TrainedSystem(default_bench, SystemConfig())
