import pytest

from cvm_cervix.data import make_synthetic_dataset, scan_dataset, split


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Two-class colour-ramp dataset, 20 images per class at 32 px."""
    return make_synthetic_dataset(tmp_path_factory.mktemp("synth") / "data", num_classes=2, per_class=20)


@pytest.fixture(scope="session")
def synth_index(synth_root):
    return split(scan_dataset(synth_root), seed=0)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
