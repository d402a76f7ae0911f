import pytest

from normalscreen.dataset import synth_dataset


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """20-patient synthetic set at 48x48, shared by the dataset and training tests."""
    return synth_dataset(tmp_path_factory.mktemp("synth"), 20, size=48, seed=5)


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, in criterion order."""
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) != "call":
                continue
            for key, value in getattr(rep, "user_properties", ()):
                if key == "criterion":
                    lines.append(value)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, status, title, detail in sorted(lines):
        terminalreporter.write_line(f"criterion {number:>2} {status}  {title}: {detail}")
