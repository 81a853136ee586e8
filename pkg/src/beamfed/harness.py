"""Sweeps over one experiment axis and the metrics they report.

A sweep cell is one (axis value, repeat) pair. Inside a cell the dataset is
generated once and every requested optimizer and method is trained and
evaluated on the same bootstrapped test draws. Cells are independent, so
they may run in worker processes; each cell pins BLAS to one thread, which
keeps its arithmetic identical whatever the worker count.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import traceback
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .cluster import ClusterEnsemble, best_cluster_model, init_ensemble, train_ifca
from .config import ExperimentConfig
from .data import FederatedDataset, bootstrap_test, generate_dataset, subsample_train
from .fed import FedConfig
from .nn.model import CnnArch, GateArch, ModelParams, predict_proba
from .personalize import MoeBundle, finetune, make_bundle, moe_predict_proba, moe_train, train_local_model

METHODS = ("local", "single_global", "ifca", "finetuned", "moe")
OPTIMIZERS = ("fedavg", "fedlion")
AXES = {
    "num_clusters": "federated.clusters",
    "train_fraction": "data.train_frac",
    "epsilon": "federated.eps",
    "ul_snr": "data.snr",
}
POOLED = "pooled"

_TAG_BOOT = 0xB007
_TAG_LOCAL = 0x10CA1
_TAG_FT = 0xF17E
_TAG_GATE = 0x6A7E


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple[float, ...]
    repeats: int = 1
    methods: tuple[str, ...] = METHODS
    optimizers: tuple[str, ...] = OPTIMIZERS

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}; expected one of {sorted(AXES)}")
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values:
            raise ValueError("a sweep needs at least one value")
        if self.repeats < 1:
            raise ValueError("repeats must be at least 1")
        bad = set(self.methods) - set(METHODS)
        if bad or not self.methods:
            raise ValueError(f"unknown methods {sorted(bad)}")
        opts = tuple(o.lower() for o in self.optimizers)
        if set(opts) - set(OPTIMIZERS) or not opts:
            raise ValueError(f"unknown optimizers {self.optimizers}")
        # canonical ordering keeps the CSV independent of how the spec was typed
        object.__setattr__(self, "methods", tuple(m for m in METHODS if m in self.methods))
        object.__setattr__(self, "optimizers", tuple(o for o in OPTIMIZERS if o in opts))

    def configure(self, base: ExperimentConfig, value: float) -> ExperimentConfig:
        cfg = base.with_overrides()
        cfg.set(AXES[self.axis], value)
        if self.axis == "ul_snr":
            cfg.set("data.add_noise", "fixed_snr")
        return cfg


METRIC_FIELDS = (
    "axis", "value", "optimizer", "method", "client_id", "repeat", "seed",
    "accuracy", "top3_accuracy", "mean_capacity", "local_epochs", "model_bytes",
    "n_eval", "error",
)


@dataclass
class MetricRow:
    axis: str
    value: float
    optimizer: str
    method: str
    client_id: str
    repeat: int
    seed: int
    accuracy: float = math.nan
    top3_accuracy: float = math.nan
    mean_capacity: float = math.nan
    local_epochs: int = 0
    model_bytes: int = 0
    n_eval: int = 0
    error: str = ""

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in METRIC_FIELDS}


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    top3_accuracy: float
    mean_capacity: float
    n_eval: int


# -- evaluation -------------------------------------------------------------------


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores per row; equal scores favour the lower index."""
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def score_metrics(scores: np.ndarray, labels: np.ndarray, capacities: np.ndarray,
                  bandwidth: float = 1.0) -> Metrics:
    """Top-1/top-3 accuracy and mean capacity of the predicted beams.

    ``capacities`` holds the per-beam capacity of every sample with unit
    bandwidth; ``bandwidth`` scales it to bits/s.
    """
    n = len(labels)
    if n == 0:
        return Metrics(math.nan, math.nan, math.nan, 0)
    top = top_k(scores, min(3, scores.shape[1]))
    pred = top[:, 0]
    acc = float(np.mean(pred == labels))
    top3 = float(np.mean((top == labels[:, None]).any(axis=1)))
    cap = float(bandwidth * np.mean(capacities[np.arange(n), pred]))
    return Metrics(acc, top3, cap, n)


Scorer = Callable[[np.ndarray], np.ndarray]


def model_scorer(params: ModelParams, arch: CnnArch) -> Scorer:
    return lambda X: predict_proba(params, arch, X)


def bundle_scorer(bundle: MoeBundle) -> Scorer:
    return lambda X: moe_predict_proba(bundle, X)


def evaluate(scorer: Scorer, dataset: FederatedDataset, indices: np.ndarray,
             bandwidth: float = 1.0) -> Metrics:
    """Metrics of ``scorer`` on the samples at ``indices`` (repeats allowed)."""
    indices = np.asarray(indices, dtype=np.int64)
    uniq, inv = np.unique(indices, return_inverse=True)
    scores = scorer(dataset.features[uniq])[inv] if len(uniq) else np.zeros((0, dataset.num_beams))
    s = dataset.samples
    return score_metrics(scores, s.label[indices], s.dl_capacity[indices], bandwidth)


# -- cached pipeline stages ------------------------------------------------------------

_CACHE: dict[str, object] = {}


def clear_cache() -> None:
    _CACHE.clear()


def _key(*parts) -> str:
    blob = json.dumps(parts, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _cached(key: str, build: Callable[[], object]):
    if key not in _CACHE:
        _CACHE[key] = build()
    return _CACHE[key]


def expert_arch(cfg: ExperimentConfig, dropout: float = 0.0) -> CnnArch:
    m, s = cfg.model, cfg.scene
    return CnnArch(
        conv1_filters=m.flfilters1, conv2_filters=m.flfilters2, filter_size=m.filtersize,
        fc1_units=m.flhiddenunits1, fc2_units=m.flhiddenunits2, dropout_rate=dropout,
        num_classes=s.num_beams, input_shape=(s.subcarriers_ul, s.antennas_ul),
    )


def gate_arch(cfg: ExperimentConfig) -> GateArch:
    g, s = cfg.moe, cfg.scene
    return GateArch(
        filters1=g.gatefilters1, filters2=g.gatefilters2, hidden1=g.gatehiddenunits1,
        hidden2=g.gatehiddenunits2, filter_size=g.gatefiltersize, dropout_rate=g.gate_dropout,
        input_shape=(s.subcarriers_ul, s.antennas_ul),
    )


def _sections(cfg: ExperimentConfig, *names: str) -> dict:
    d = cfg.to_dict()
    return {n: d[n] for n in names}


def cell_dataset(cfg: ExperimentConfig, seed: int) -> FederatedDataset:
    """Full dataset (before train subsampling) for a config and seed."""
    data = _sections(cfg, "scene", "data")
    data["data"].pop("train_frac")
    return _cached(_key("dataset", data, seed), lambda: generate_dataset(cfg, seed)[0])


@dataclass
class FlResult:
    ensemble: ClusterEnsemble
    history: list[dict]
    trace: list[dict]

    @property
    def local_epochs(self) -> int:
        return int(self.history[-1]["cumulative_local_epochs"]) if self.history else 0


def fed_config(cfg: ExperimentConfig, seed: int, num_clusters: int) -> FedConfig:
    arch = expert_arch(cfg, cfg.federated.fldropout)
    eps = cfg.federated.eps if num_clusters > 1 else 0.0
    return FedConfig.from_experiment(cfg, arch, seed, num_clusters=num_clusters, epsilon=eps)


def train_federated(cfg: ExperimentConfig, dataset: FederatedDataset, seed: int,
                    num_clusters: int) -> FlResult:
    """IFCA with ``num_clusters`` models; J=1 is plain federated training."""
    fc = fed_config(cfg, seed, num_clusters)
    fed = _sections(cfg, "scene", "data", "model", "federated")
    fed["federated"].update(clusters=num_clusters, eps=fc.epsilon)

    def build():
        clients = dataset.federated_clients()
        ens = init_ensemble(fc, dataset.num_clients)
        return FlResult(*train_ifca(ens, clients, fc))

    return _cached(_key("fl", fed, seed), build)


def train_locals(cfg: ExperimentConfig, dataset: FederatedDataset, seed: int
                 ) -> list[tuple[ModelParams, int]]:
    """Per client: (local model, epochs run)."""
    arch = expert_arch(cfg)

    def build():
        out = []
        for c in dataset.federated_clients():
            stats: dict = {}
            rng = np.random.default_rng([seed, _TAG_LOCAL, c.client_id])
            out.append((train_local_model(c, arch, cfg.local, rng, stats), stats["epochs"]))
        return out

    return _cached(_key("local", _sections(cfg, "scene", "data", "model", "local"), seed), build)


# -- per-method training ----------------------------------------------------------------


@dataclass
class MethodModels:
    """What one method produced for every client, plus its cost accounting.

    ``models[k]`` is a ``ModelParams`` (scored with ``arch``) or a ``MoeBundle``.
    ``epochs[k]`` counts the local epochs behind client k's model and
    ``total_epochs`` those behind all of them; ``model_bytes`` is the stored
    parameter footprint.
    """

    method: str
    models: list
    arch: CnnArch
    epochs: list[int]
    total_epochs: int
    model_bytes: int

    def scorers(self) -> list[Scorer]:
        return [bundle_scorer(m) if isinstance(m, MoeBundle) else model_scorer(m, self.arch)
                for m in self.models]


@dataclass
class Pipeline:
    """Lazily trained stages for one (config, optimizer, dataset, seed)."""

    cfg: ExperimentConfig
    dataset: FederatedDataset
    seed: int
    histories: dict[str, list[dict]] = field(default_factory=dict)
    traces: dict[str, list[dict]] = field(default_factory=dict)
    _stage: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.arch = expert_arch(self.cfg)
        self.clients = self.dataset.federated_clients()
        self.opt = self.cfg.federated.server_optim.lower()

    def _once(self, name, build):
        if name not in self._stage:
            try:
                self._stage[name] = build()
            except Exception as exc:
                self._stage[name] = exc
        out = self._stage[name]
        if isinstance(out, Exception):
            raise out
        return out

    def locals(self) -> list[tuple[ModelParams, int]]:
        return self._once("local", lambda: train_locals(self.cfg, self.dataset, self.seed))

    def federated(self, J: int) -> FlResult:
        def build():
            fl = train_federated(self.cfg, self.dataset, self.seed, J)
            self.histories[f"{self.opt}_J{J}"] = fl.history
            self.traces[f"{self.opt}_J{J}"] = fl.trace
            return fl
        return self._once(("fl", J), build)

    def ifca(self) -> tuple[FlResult, list[tuple[int, ModelParams]]]:
        def build():
            fl = self.federated(self.cfg.federated.clusters)
            return fl, [best_cluster_model(fl.ensemble, c, self.arch) for c in self.clients]
        return self._once("ifca", build)

    def train(self, method: str) -> MethodModels:
        return self._once(("method", method), lambda: self._train(method))

    def _train(self, method: str) -> MethodModels:
        K = len(self.clients)
        if method == "local":
            models = self.locals()
            ep = [e for _, e in models]
            return MethodModels(method, [p for p, _ in models], self.arch, ep, sum(ep),
                                models[0][0].values.nbytes)
        if method == "single_global":
            fl = self.federated(1)
            w = fl.ensemble.models[0].weights
            return MethodModels(method, [w] * K, self.arch, [fl.local_epochs] * K,
                                fl.local_epochs, w.values.nbytes)
        fl, picks = self.ifca()
        fl_ep = fl.local_epochs
        ens_bytes = sum(m.weights.values.nbytes for m in fl.ensemble.models)
        if method == "ifca":
            return MethodModels(method, [p for _, p in picks], self.arch, [fl_ep] * K, fl_ep, ens_bytes)
        if method == "finetuned":
            tuned, extra = [], []
            for c, (_, p) in zip(self.clients, picks):
                stats: dict = {}
                rng = np.random.default_rng([self.seed, _TAG_FT, c.client_id])
                tuned.append(finetune(p, c, self.arch, self.cfg.finetuning, rng, stats))
                extra.append(stats["epochs"])
            return MethodModels(method, tuned, self.arch, [fl_ep + e for e in extra],
                                fl_ep + sum(extra), ens_bytes)
        if method == "moe":
            models = self.locals()
            ga = gate_arch(self.cfg)
            bundles, extra = [], []
            for c, (_, p), (loc, loc_ep) in zip(self.clients, picks, models):
                stats = {}
                rng = np.random.default_rng([self.seed, _TAG_GATE, c.client_id])
                b = make_bundle(loc, p, self.arch, ga, rng)
                bundles.append(moe_train(b, c, self.cfg.moe, rng, stats))
                extra.append(loc_ep + stats["epochs"])
            nbytes = ens_bytes + 2 * models[0][0].values.nbytes + bundles[0].gate.values.nbytes
            return MethodModels(method, bundles, self.arch, [fl_ep + e for e in extra],
                                fl_ep + sum(extra), nbytes)
        raise ValueError(f"unknown method {method!r}")


def prepare_data(cfg: ExperimentConfig, seed: int, full: FederatedDataset | None = None
                 ) -> tuple[FederatedDataset, list[np.ndarray]]:
    """Train-subsampled dataset and the bootstrapped test draws of a run."""
    full = cell_dataset(cfg, seed) if full is None else full
    dataset = subsample_train(full, cfg.data.train_frac, seed)
    draws = bootstrap_test(dataset, cfg.data.n_data_test, np.random.default_rng([seed, _TAG_BOOT]))
    return dataset, draws


def dl_bandwidth(cfg: ExperimentConfig) -> float:
    """Subcarrier bandwidth that scales capacities to bits/s."""
    return cfg.scene.bandwidth_dl / cfg.scene.subcarriers_dl


def method_rows(base: MetricRow, mm: MethodModels, dataset: FederatedDataset,
                draws: Sequence[np.ndarray], bandwidth: float) -> list[MetricRow]:
    pc, pooled = _evaluate_clients(mm.scorers(), dataset, draws, bandwidth)
    return _metric_rows(base, pc, pooled, mm.epochs, mm.total_epochs, mm.model_bytes)


# -- a sweep cell ---------------------------------------------------------------------


@dataclass
class CellResult:
    rows: list[MetricRow]
    histories: dict[str, list[dict]] = field(default_factory=dict)
    traces: dict[str, list[dict]] = field(default_factory=dict)


def _metric_rows(base: MetricRow, per_client: Sequence[Metrics], pooled: Metrics,
                 epochs: Sequence[int], pooled_epochs: int, nbytes: int) -> list[MetricRow]:
    rows = []
    for k, m in enumerate(per_client):
        rows.append(replace(base, client_id=str(k), accuracy=m.accuracy, top3_accuracy=m.top3_accuracy,
                            mean_capacity=m.mean_capacity, local_epochs=int(epochs[k]),
                            model_bytes=nbytes, n_eval=m.n_eval))
    rows.append(replace(base, client_id=POOLED, accuracy=pooled.accuracy,
                        top3_accuracy=pooled.top3_accuracy, mean_capacity=pooled.mean_capacity,
                        local_epochs=int(pooled_epochs), model_bytes=nbytes, n_eval=pooled.n_eval))
    return rows


def _error_rows(base: MetricRow, num_clients: int, message: str) -> list[MetricRow]:
    ids = [str(k) for k in range(num_clients)] + [POOLED]
    return [replace(base, client_id=i, error=message) for i in ids]


def _evaluate_clients(scorers: Sequence[Scorer], dataset: FederatedDataset,
                      draws: Sequence[np.ndarray], bandwidth: float) -> tuple[list[Metrics], Metrics]:
    per_client = [evaluate(s, dataset, d, bandwidth) for s, d in zip(scorers, draws)]
    # pooled over samples: weight each client's metrics by its draw count
    n = sum(m.n_eval for m in per_client)
    pooled = Metrics(*(float(sum(getattr(m, f) * m.n_eval for m in per_client) / n)
                       for f in ("accuracy", "top3_accuracy", "mean_capacity")), n)
    return per_client, pooled


def run_cell(spec: SweepSpec, base: ExperimentConfig, value: float, repeat: int,
             root_seed: int) -> CellResult:
    """Train and evaluate every requested method for one axis value and repeat."""
    with threadpool_limits(1):
        return _run_cell(spec, base, value, repeat, root_seed)


def _run_cell(spec, base, value, repeat, root_seed) -> CellResult:
    seed = root_seed + repeat
    cfg = spec.configure(base, value)
    result = CellResult([])

    def row(opt: str, method: str) -> MetricRow:
        return MetricRow(spec.axis, float(value), opt, method, "", repeat, seed)

    try:
        dataset, draws = prepare_data(cfg, seed)
    except Exception as exc:  # the whole cell depends on the dataset
        msg = _describe(exc)
        for opt in spec.optimizers:
            for m in spec.methods:
                result.rows += _error_rows(row(opt, m), cfg.scene.num_bs, msg)
        return result

    shared_locals = None
    for opt in spec.optimizers:
        pipe = Pipeline(cfg.for_optimizer(opt), dataset, seed)
        if shared_locals is not None:   # local models do not depend on the optimizer
            pipe._stage["local"] = shared_locals
        for method in spec.methods:
            try:
                mm = pipe.train(method)
                result.rows += method_rows(row(opt, method), mm, dataset, draws, dl_bandwidth(cfg))
            except Exception as exc:
                result.rows += _error_rows(row(opt, method), dataset.num_clients, _describe(exc))
        shared_locals = pipe._stage.get("local", shared_locals)
        result.histories.update(pipe.histories)
        result.traces.update(pipe.traces)
    return result


def _describe(exc: BaseException) -> str:
    last = traceback.extract_tb(exc.__traceback__)[-1:] if exc.__traceback__ else []
    where = f" at {Path(last[0].filename).name}:{last[0].lineno}" if last else ""
    return f"{type(exc).__name__}: {exc}{where}".replace("\n", " ")


# -- sweeps -----------------------------------------------------------------------------


@dataclass
class SweepResult:
    spec: SweepSpec
    rows: list[MetricRow]
    cells: dict[tuple[float, int], CellResult]

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)


def _row_order(spec: SweepSpec) -> Callable[[MetricRow], tuple]:
    vi = {v: i for i, v in enumerate(spec.values)}
    oi = {o: i for i, o in enumerate(spec.optimizers)}
    mi = {m: i for i, m in enumerate(METHODS)}

    def key(r: MetricRow):
        client = (1, 0) if r.client_id == POOLED else (0, int(r.client_id))
        return (vi[r.value], oi[r.optimizer], mi[r.method], r.repeat, client)

    return key


def run_sweep(spec: SweepSpec, base: ExperimentConfig, seed: int = 0,
              workers: int = 1, out_dir: str | Path | None = None) -> SweepResult:
    """Run every (value, repeat) cell; repeat ``r`` uses seed ``seed + r``.

    Rows come back sorted by value, optimizer, method (fixed legend order),
    repeat and client, with the pooled row last, so the CSV does not depend
    on scheduling.
    """
    tasks = [(float(v), r) for v in spec.values for r in range(spec.repeats)]
    if workers > 1 and len(tasks) > 1:
        outs = Parallel(n_jobs=min(workers, len(tasks)), backend="loky")(
            delayed(run_cell)(spec, base, v, r, seed) for v, r in tasks)
    else:
        outs = [run_cell(spec, base, v, r, seed) for v, r in tasks]
    cells = dict(zip(tasks, outs))
    rows = sorted((row for c in outs for row in c.rows), key=_row_order(spec))
    result = SweepResult(spec, rows, cells)
    if out_dir is not None:
        write_sweep(result, out_dir)
    return result


def write_sweep(result: SweepResult, out_dir: str | Path) -> None:
    from .io import write_history_csv, write_trace_csv

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(result.to_csv())
    for (value, repeat), cell in result.cells.items():
        for name, hist in cell.histories.items():
            write_history_csv(hist, out / f"history_{result.spec.axis}={value:g}_r{repeat}_{name}.csv")
        for name, trace in cell.traces.items():
            write_trace_csv(trace, out / f"trace_{result.spec.axis}={value:g}_r{repeat}_{name}.csv")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def rows_to_csv(rows: Iterable[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([_fmt(getattr(r, f)) for f in METRIC_FIELDS])
    return buf.getvalue()


def read_metrics_csv(path: str | Path) -> list[MetricRow]:
    rows = []
    with open(path, newline="") as fh:
        for d in csv.DictReader(fh):
            rows.append(MetricRow(
                axis=d["axis"], value=float(d["value"]), optimizer=d["optimizer"],
                method=d["method"], client_id=d["client_id"], repeat=int(d["repeat"]),
                seed=int(d["seed"]), accuracy=float(d["accuracy"]),
                top3_accuracy=float(d["top3_accuracy"]), mean_capacity=float(d["mean_capacity"]),
                local_epochs=int(d["local_epochs"]), model_bytes=int(d["model_bytes"]),
                n_eval=int(d["n_eval"]), error=d["error"],
            ))
    return rows


def median_accuracy(rows: Iterable[MetricRow], *, value: float, optimizer: str, method: str,
                    client_id: str = POOLED) -> float:
    """Median over repeats of one (value, optimizer, method, client) accuracy."""
    acc = [r.accuracy for r in rows if r.value == value and r.optimizer == optimizer
           and r.method == method and r.client_id == client_id and not r.error]
    return float(np.median(acc)) if acc else math.nan
