import pytest

from qffl.data import SyntheticSpec, generate_synthetic, split_dataset


@pytest.fixture(scope="session")
def small_raw():
    return generate_synthetic(SyntheticSpec(num_devices=8, seed=3, size_max=200))


@pytest.fixture(scope="session")
def small_ds(small_raw):
    return split_dataset(small_raw, 0)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance():
    """Recorder for one pass/fail line per acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
