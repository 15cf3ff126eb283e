import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gplab import data as D  # noqa: E402

SYNTH_SEED = 7


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """The 600-image, 64x64, table-proportional synthetic tree."""
    root = tmp_path_factory.mktemp("synth") / "data"
    D.generate_synthetic(root, total=600, image_size=64, seed=SYNTH_SEED)
    return root


@pytest.fixture(scope="session")
def synth(synth_root):
    ds = D.ingest(synth_root)
    return ds, D.load_images(ds)


@pytest.fixture(scope="session")
def small_root(tmp_path_factory):
    """A 60-image, 32x32 tree for fast end-to-end runs."""
    root = tmp_path_factory.mktemp("small") / "data"
    D.generate_synthetic(root, total=60, proportions=(1, 1, 1, 1, 1, 1), image_size=32, seed=3)
    return root


@pytest.fixture(scope="session")
def small(small_root):
    ds = D.ingest(small_root)
    return ds, D.load_images(ds)



@pytest.fixture(scope="session")
def holdout(synth):
    ds, _ = synth
    return D.split_holdout(ds, 0.8, seed=SYNTH_SEED)


@pytest.fixture(scope="session")
def converged(synth, holdout, tmp_path_factory):
    """toy-B0 trained 30 epochs with the default hyperparameters on the 80% part."""
    from gplab.training import TrainConfig, train

    ds, images = synth
    out = tmp_path_factory.mktemp("converged")
    start = time.perf_counter()
    result = train("toy-B0", ds, holdout, TrainConfig(epochs=30, seed=SYNTH_SEED), out_dir=out, images=images)
    return result, out, time.perf_counter() - start


@pytest.fixture(scope="session")
def cv_run(synth, holdout, tmp_path_factory):
    """5-fold CV (3 epochs per fold) on the 80% part; members for ensembling."""
    from gplab.training import TrainConfig, train_cv

    ds, images = synth
    tr, va = holdout.train_val()
    sub = ds.subset(tr)
    out = tmp_path_factory.mktemp("cv")
    results = train_cv("toy-B0", sub, 5, TrainConfig(epochs=3, seed=SYNTH_SEED), out_dir=out, images=images[tr])
    return results, out, (images[va], ds.labels[va])


ACCEPTANCE: dict = {}


@pytest.fixture
def criterion():
    """``criterion(n, ok, detail)`` records one acceptance line and returns ``ok``."""
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
