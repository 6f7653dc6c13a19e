import numpy as np
import pytest

from xlab import datagen, modelzoo
from xlab.numcore import RngStream, SgdHyper


def small_task(seed=0, classes=3, n_per_class=40, dim=6, noise=0.3, concepts=8):
    fam = datagen.make_task_family(seed, dim, concepts, 1.0)
    return fam, datagen.sample_classification_task(fam, classes, seed + 1, noise, n_per_class)


def small_backbone(seed=0, dim=6, widths=(5, 4), pretrain_classes=4):
    spec = modelzoo.BackboneSpec(dim, widths, pretrain_classes, 20, "tanh", "shallow")
    bb = modelzoo.init_backbone(spec, RngStream(seed, ("bb",)))
    bb.freeze()
    return bb


def trained_model(seed=0, classes=3, mode="linear_probe", epochs=5):
    _, data = small_task(seed, classes)
    bb = small_backbone(seed)
    model, _ = modelzoo.train_model(bb, data, mode, SgdHyper(0.05), epochs, RngStream(seed))
    return model, data


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (name, passed, detail); filled by test_acceptance, printed at the end of the run
ACCEPTANCE = {}


def record_criterion(number, name, passed, detail=""):
    ACCEPTANCE[number] = (name, bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {name}. {detail}")
