"""Federated mmWave beam selection from sub-6 GHz uplink channels.

Modules: ``channel`` (codebook, capacity, synthetic street scene), ``data``
(features, client partitions), ``nn`` (numpy autodiff CNNs), ``fed``
(FedAvg/FedLion rounds), ``cluster`` (IFCA), ``personalize`` (local,
fine-tuned and mixture-of-experts models) and ``harness`` (sweeps).
"""

from .config import ExperimentConfig, desk_config, load_config

__all__ = ["ExperimentConfig", "desk_config", "load_config"]
__version__ = "0.1.0"
