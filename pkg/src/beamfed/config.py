"""Experiment configuration.

Keys mirror the hyperparameter table names (``federated.local_ep``,
``moe.gatefilters1``, ...) so tables can be pasted into a TOML/JSON file.
Every section is a flat dataclass; ``ExperimentConfig.from_mapping`` accepts
either nested sections or dotted keys.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib


@dataclass
class SceneConfig:
    """Street geometry and radio parameters of the synthetic scene."""

    num_bs: int = 2
    street_length: float = 120.0
    street_width: float = 30.0
    bs_setback: float = 2.0
    bs_jitter: float = 0.0
    ue_rows: int = 30
    ue_cols: int = 60
    ue_margin: float = 1.0
    wall_gap: float = 4.0
    facades_per_side: int = 4
    num_scatterers: int = 4
    carrier_dl: float = 28e9
    carrier_ul: float = 3.5e9
    bandwidth_dl: float = 0.5e9
    bandwidth_ul: float = 0.02e9
    subcarriers_dl: int = 64
    subcarriers_ul: int = 64
    antennas_dl: int = 64
    antennas_ul: int = 4
    num_beams: int = 64
    num_paths_dl: int = 5
    num_paths_ul: int = 15
    # "global": every UL array shares the street axis while DL beam indices
    # follow each BS boresight; "boresight": both bands use the BS frame.
    ul_frame: str = "global"


@dataclass
class DataConfig:
    add_noise: str = "physics"
    snr: float = 80.0
    ue_tx_power_dBm: float = 23.0
    bs_tx_power_dBm: float = 34.0
    noise_figure_dB: float = 5.0
    train_frac: float = 0.1
    test_frac: float = 0.2
    val_frac: float = 0.1
    n_data_test: int = 5000
    phase_reference: bool = True


@dataclass
class ModelConfig:
    flfilters1: int = 8
    flfilters2: int = 8
    filtersize: int = 3
    flhiddenunits1: int = 32
    flhiddenunits2: int = 32


@dataclass
class FederatedConfig:
    server_optim: str = "FedLion"
    lr: float = 0.05
    server_lr: float = 1.0
    lmbda: float = 0.0
    fldropout: float = 0.0
    fl_weight_decay: float = 0.0
    server_lr_decay_rate: float = 0.0
    fl_local_lr_decay_rate: float = 0.0
    eps: float = 0.0351229
    epochs: int = 60
    fl_patience: int = 5
    eval_interval: int = 1
    clusters: int = 2
    frac: float = 1.0
    local_bs: int = 256
    local_ep: int = 3
    beta1: float = 0.95
    beta2: float = 0.98
    lion_convention: str = "descent"


@dataclass
class FinetuneConfig:
    ft_lr: float = 0.01
    ft_weight_decay: float = 0.0
    ft_lr_decay_rate: float = 0.0
    ft_patience: int = 10
    ft_epochs: int = 60
    ft_bs: int = 64


@dataclass
class MoeConfig:
    moe_lr: float = 0.05
    gate_dropout: float = 0.0
    moe_lr_decay_rate: float = 0.0
    gatefilters1: int = 4
    gatefilters2: int = 0
    gate_weight_decay: float = 0.0
    moe_epochs: int = 60
    gatehiddenunits1: int = 16
    gatehiddenunits2: int = 8
    gatefiltersize: int = 3
    moe_patience: int = 10
    moe_bs: int = 64


@dataclass
class LocalConfig:
    loc_epochs: int = 100
    local_lr: float = 0.05
    local_weight_decay: float = 0.0
    localdropout: float = 0.0
    local_lr_decay_rate: float = 0.0
    local_patience: int = 10
    local_bs: int = 64


_SECTIONS = {
    "scene": SceneConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "federated": FederatedConfig,
    "finetuning": FinetuneConfig,
    "moe": MoeConfig,
    "local": LocalConfig,
}


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    federated: FederatedConfig = field(default_factory=FederatedConfig)
    finetuning: FinetuneConfig = field(default_factory=FinetuneConfig)
    moe: MoeConfig = field(default_factory=MoeConfig)
    local: LocalConfig = field(default_factory=LocalConfig)
    # per-optimizer overrides, e.g. {"fedavg": {"federated.server_lr": 1.0}}
    optimizers: dict[str, dict[str, Any]] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Any]) -> "ExperimentConfig":
        cfg = cls()
        cfg.update(mapping)
        return cfg

    def update(self, mapping: Mapping[str, Any]) -> "ExperimentConfig":
        """Apply overrides given as nested sections or dotted keys, in place."""
        for key, value in mapping.items():
            if key == "optimizers":
                for opt, overrides in value.items():
                    self.optimizers.setdefault(opt.lower(), {}).update(_flatten(overrides))
                continue
            if isinstance(value, Mapping) and key in _SECTIONS:
                for sub, subval in value.items():
                    self.set(f"{key}.{sub}", subval)
            else:
                self.set(key, value)
        return self

    def set(self, dotted: str, value: Any) -> None:
        section, _, name = dotted.partition(".")
        if section not in _SECTIONS or not name:
            raise KeyError(f"unknown config key {dotted!r}")
        target = getattr(self, section)
        fields = {f.name: f for f in dataclasses.fields(target)}
        if name not in fields:
            raise KeyError(f"unknown config key {dotted!r}")
        current = getattr(target, name)
        if isinstance(current, bool):
            value = bool(value)
        elif isinstance(current, int) and not isinstance(value, bool):
            if float(value) != int(value):
                raise ValueError(f"{dotted} expects an integer, got {value!r}")
            value = int(value)
        elif isinstance(current, float):
            value = float(value)
        setattr(target, name, value)

    def get(self, dotted: str) -> Any:
        section, _, name = dotted.partition(".")
        return getattr(getattr(self, section), name)

    def with_overrides(self, **dotted: Any) -> "ExperimentConfig":
        """Copy with overrides; keyword names use ``__`` for the dot."""
        out = copy.deepcopy(self)
        for key, value in dotted.items():
            out.set(key.replace("__", "."), value)
        return out

    def for_optimizer(self, optimizer: str) -> "ExperimentConfig":
        """Copy with ``federated.server_optim`` set and that optimizer's overrides applied."""
        out = copy.deepcopy(self)
        out.set("federated.server_optim", optimizer)
        out.update(self.optimizers.get(optimizer.lower(), {}))
        return out

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {name: dataclasses.asdict(getattr(self, name)) for name in _SECTIONS}
        if self.optimizers:
            d["optimizers"] = copy.deepcopy(self.optimizers)
        return d

    def to_flat(self) -> dict[str, Any]:
        return {
            f"{sec}.{k}": v for sec in _SECTIONS for k, v in dataclasses.asdict(getattr(self, sec)).items()
        }


def _flatten(mapping: Mapping[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in mapping.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a TOML or JSON config file; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".json":
        mapping = json.loads(text)
    else:
        mapping = tomllib.loads(text)
    return ExperimentConfig.from_mapping(mapping)


def paper_config(optimizer: str = "FedLion") -> ExperimentConfig:
    """Full-scale configuration with the published hyperparameter tables.

    Not used by the test-suite; training at this scale takes hours on a CPU.
    """
    cfg = ExperimentConfig()
    cfg.update({
        "scene.num_bs": 8,
        "scene.street_length": 400.0,
        "scene.ue_rows": 40,
        "scene.ue_cols": 200,
        "model.flfilters1": 128,
        "model.flfilters2": 64,
        "model.filtersize": 5,
        "model.flhiddenunits1": 1024,
        "model.flhiddenunits2": 2048,
        "federated.epochs": 4000,
        "federated.local_bs": 256,
        "federated.local_ep": 3,
        "federated.fl_patience": 5,
        "federated.clusters": 2,
        "federated.frac": 1.0,
        "federated.beta1": 0.95,
        "federated.beta2": 0.98,
        "finetuning.ft_lr": 0.00011723,
        "finetuning.ft_weight_decay": 0.26246,
        "finetuning.ft_lr_decay_rate": 0.025521,
        "finetuning.ft_patience": 10,
        "finetuning.ft_epochs": 400,
        "local.loc_epochs": 400,
        "local.local_lr": 0.00109789,
        "local.local_weight_decay": 0.0236955,
        "local.localdropout": 0.694774,
        "local.local_lr_decay_rate": 0.0214379,
        "local.local_patience": 10,
        "moe.moe_epochs": 400,
        "moe.moe_patience": 10,
        "moe.gatefiltersize": 5,
    })
    if optimizer.lower() == "fedlion":
        cfg.update({
            "federated.server_optim": "FedLion",
            "federated.lr": 0.00341691,
            "federated.server_lr": 0.000272589,
            "federated.lmbda": 0.000463701,
            "federated.fldropout": 0.583516,
            "federated.fl_weight_decay": 2.10218e-06,
            "federated.server_lr_decay_rate": 4.6406e-05,
            "federated.fl_local_lr_decay_rate": 1.00885e-07,
            "federated.eps": 0.0351229,
            "moe.moe_lr": 5.12969e-06,
            "moe.gate_dropout": 0.413556,
            "moe.moe_lr_decay_rate": 0.00079047,
            "moe.gatefilters1": 16,
            "moe.gatefilters2": 0,
            "moe.gate_weight_decay": 2.15771e-06,
            "moe.gatehiddenunits1": 16,
            "moe.gatehiddenunits2": 8,
        })
    else:
        cfg.update({
            "federated.server_optim": "FedAvg",
            "federated.lr": 0.0179516,
            "federated.server_lr": 0.00132305,
            "federated.lmbda": 3.11622e-05,
            "federated.fldropout": 0.728812,
            "federated.fl_weight_decay": 1.34272e-07,
            "federated.server_lr_decay_rate": 0.000264015,
            "federated.fl_local_lr_decay_rate": 5.8123e-07,
            "federated.eps": 0.00502087,
            "moe.moe_lr": 8.15905e-06,
            "moe.gate_dropout": 0.554633,
            "moe.gatehiddenunits1": 4,
            "moe.moe_lr_decay_rate": 0.000202676,
            "moe.gatefilters1": 16,
            "moe.gatefilters2": 4,
            "moe.gate_weight_decay": 4.23931e-06,
            "moe.gatehiddenunits2": 8,
        })
    return cfg


def desk_config() -> ExperimentConfig:
    """Small mirrored two-BS scene used by the acceptance suite.

    Sixteen beams on a 16-element DL array keep the beam classes resolvable
    from a 4-antenna UL array; a CPU trains one federated pipeline in seconds.
    """
    cfg = ExperimentConfig()
    cfg.update({
        "scene.street_length": 80.0,
        "scene.ue_rows": 40,
        "scene.ue_cols": 100,
        "scene.antennas_dl": 16,
        "scene.subcarriers_dl": 16,
        "scene.num_beams": 16,
        "federated.eps": 0.2,
        "federated.fl_patience": 10,
        "finetuning.ft_lr": 0.03,
        "optimizers": {
            "fedavg": {"federated.server_lr": 1.0},
            "fedlion": {"federated.server_lr": 0.002},
        },
    })
    return cfg
