import pytest

from ictseg.config import build_config
from ictseg.data import generate_synthetic_dataset, write_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    path = tmp_path_factory.mktemp("small_ds")
    write_dataset(generate_synthetic_dataset(12, 2, 16, 16, 2, 0.2, seed=3), path)
    return path


@pytest.fixture
def small_config():
    return build_config(
        {
            "data.label_fraction": "0.25",
            "data.n_validation": "1",
            "data.n_test": "2",
            "train.total_iters": "12",
            "train.learning_rate": "1e-3",
            "train.batch_labelled": "2",
            "train.batch_unlabelled": "2",
            "train.eval_every": "5",
            "train.checkpoint_every": "6",
        }
    )


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(criterion: int, ok: bool, detail: str) -> None:
    _ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
