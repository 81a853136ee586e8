import pytest

from beamfed.config import ExperimentConfig

TINY = {
    "scene.street_length": 40.0, "scene.street_width": 20.0, "scene.ue_rows": 6, "scene.ue_cols": 12,
    "scene.antennas_dl": 8, "scene.subcarriers_dl": 4, "scene.num_beams": 8, "scene.subcarriers_ul": 8,
    "model.flfilters1": 2, "model.flfilters2": 2, "model.flhiddenunits1": 8, "model.flhiddenunits2": 8,
    "federated.epochs": 3, "federated.local_bs": 16, "federated.fl_patience": 2, "federated.eps": 0.3,
    "finetuning.ft_epochs": 2, "moe.moe_epochs": 2, "local.loc_epochs": 3,
    "data.train_frac": 0.5, "data.n_data_test": 50,
    "optimizers": {"fedlion": {"federated.server_lr": 0.01}},
}


def tiny_config() -> ExperimentConfig:
    cfg = ExperimentConfig()
    cfg.update(TINY)
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_config()


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
