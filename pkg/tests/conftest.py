import pathlib
import sys

import pytest

sys.path.insert(0, str(pathlib.Path(__file__).parent))

ROBOTS = pathlib.Path(__file__).resolve().parent.parent / "robots"

_CRITERION_LINES = []


def record_criterion(line):
    """Collect one verdict line per acceptance criterion for the summary."""
    _CRITERION_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERION_LINES:
            terminalreporter.line(line)


@pytest.fixture(scope="session")
def robots_dir():
    return ROBOTS


# Desk-scale training recipe shared by every checkpoint the suite builds.
TRAIN_RECORDS = 200_000
TRAIN_EPOCHS = 25
TRAIN_BATCH = 256
TRAIN_LR = 2e-3


class ModelZoo:
    """Lazily trains checkpoints the long-running tests share.

    One dataset is held in memory at a time; checkpoints and loss logs
    stay cached for the whole session under `root`.
    """

    def __init__(self, root):
        self.root = root
        self._data = (None, None)      # (robot name, dataset)
        self._done = {}

    def dataset(self, name):
        import diffik.kinematics as kin
        import diffik.datagen as datagen
        if self._data[0] != name:
            model = kin.parse_robot_file(ROBOTS / f"{name}.yaml")
            self._data = (name, datagen.generate(model, TRAIN_RECORDS, seed=0))
        return self._data[1]

    def trained(self, name, mode="tokens", p_drop=0.0, epochs=TRAIN_EPOCHS,
                batch=TRAIN_BATCH, lr=TRAIN_LR):
        import csv as _csv
        import time
        import diffik.kinematics as kin
        import diffik.denoiser as dn
        import diffik.diffusion as diffusion
        key = (name, mode, p_drop, epochs, batch, lr)
        if key in self._done:
            return self._done[key]
        model = kin.parse_robot_file(ROBOTS / f"{name}.yaml")
        ds = self.dataset(name)
        tag = f"{name}_{mode}_e{epochs}"
        log_path = self.root / f"{tag}_loss.csv"
        tcfg = diffusion.TrainConfig(epochs=epochs, batch_size=batch,
                                     learning_rate=lr, p_drop=p_drop, seed=0)
        t0 = time.monotonic()
        params = diffusion.train(ds, dn.ArchConfig(mode=mode), tcfg,
                                 diffusion.make_schedule(), log_path=log_path)
        seconds = time.monotonic() - t0
        dn.save_params(params, self.root / f"{tag}.ikdn")
        with open(log_path) as fh:
            losses = [float(row["loss"]) for row in _csv.DictReader(fh)]
        self._done[key] = (model, params, seconds, losses)
        return self._done[key]


@pytest.fixture(scope="session")
def zoo(tmp_path_factory):
    return ModelZoo(tmp_path_factory.mktemp("zoo"))
