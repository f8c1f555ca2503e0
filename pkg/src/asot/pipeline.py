"""
End-to-end runs: load and preprocess a dataset, fit an anchor model, map every
graph onto the anchors and fill the pairwise distance matrix.
"""

import os
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .anchor import AnchorSpace, anchor_cost, map_distribution
from .batch import ProblemSet, pairwise_matrix
from .datasets import load_dataset_cache, maxabs_scale, parse_tudataset, preprocess_dataset, synth_blobs
from .dictionary import DlModel, DlTrainConfig, dl_encode, train_dl
from .errors import InvalidArgumentError, ParseError
from .kmeans import KmeansConfig, encode_onehot_batch, fit_kmeans
from .metric_learning import MlModel, MlTrainConfig, ml_encode, train_ml, underflow_risk
from .transport import SinkhornConfig

METHODS = ("ot-emd", "eot", "bds-eot", "asot-ml", "asot-dl", "asot-k", "easot-ml", "easot-dl", "easot-k")
LEARNING = ("ml", "dl", "k")
DATA_ROOT_ENV = "ASOT_DATA_ROOT"


@dataclass
class RunConfig:
    dataset: str = "MUTAG"
    method: str = "asot-k"
    k: int = None
    epsilon: float = 0.1
    iterations: int = 50
    seed: int = 0
    epochs: int = 500
    batch_graphs: int = 500
    learning_rate: float = 0.01
    train_fraction: float = 0.9
    fit_on: str = "train"
    scale: str = "maxabs"
    gin_iters: int = 4
    threads: int = 1
    data_root: str = None
    out: str = None
    anchors: str = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise InvalidArgumentError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.k is not None and self.k < 1:
            raise InvalidArgumentError("k must be at least 1")
        if self.fit_on not in ("train", "all"):
            raise InvalidArgumentError("fit_on must be 'train' or 'all'")
        if self.scale not in ("maxabs", "none"):
            raise InvalidArgumentError("scale must be 'maxabs' or 'none'")
        if not 0 < self.train_fraction <= 1:
            raise InvalidArgumentError("train_fraction must lie in (0, 1]")
        if self.threads < 1:
            raise InvalidArgumentError("threads must be at least 1")

    @property
    def family(self):
        """Anchor learner (``ml``, ``dl``, ``k``) or None for direct OT methods."""
        if "asot-" not in self.method:
            return None
        return self.method.split("-", 1)[1]

    @property
    def entropic(self):
        return self.method in ("eot", "bds-eot") or self.method.startswith("easot-")

    def sinkhorn(self):
        return SinkhornConfig(epsilon=self.epsilon, iterations=self.iterations)

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name for f in fields(cls)}
        unknown = set(mapping) - known
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**mapping)

    def to_dict(self):
        return asdict(self)


@dataclass
class FittedAnchors:
    family: str
    space: AnchorSpace
    model: object = None
    trace: list = field(default_factory=list)
    train_time: float = 0.0

    def encode(self, X):
        if self.family == "k":
            return encode_onehot_batch(X, self.space)[0]
        if self.family == "ml":
            return ml_encode(self.model, X)
        return dl_encode(self.model, X)

    def model_record(self):
        record = {"kind": "k"} if self.model is None else self.model.to_record()
        record["trace"] = list(self.trace)
        record["train_time"] = self.train_time
        return record

    @classmethod
    def from_artifact(cls, space, record):
        record = record or {"kind": "k"}
        kind = record.get("kind", "k")
        model = None
        if kind == "ml":
            model = MlModel.from_record(record)
        elif kind == "dl":
            model = DlModel.from_record(record)
        elif kind != "k":
            raise ParseError(f"unknown model kind {kind!r}")
        return cls(kind, space, model, record.get("trace", []), record.get("train_time", 0.0))


@dataclass
class EvalReport:
    rmse: float
    mean_abs_error: float
    max_abs_error: float
    n_pairs: int
    train_time: float
    dist_time: float
    meta: dict = field(default_factory=dict)

    @property
    def total_time(self):
        return self.train_time + self.dist_time


def data_root(cfg=None):
    if cfg is not None and cfg.data_root:
        return Path(cfg.data_root)
    return Path(os.environ.get(DATA_ROOT_ENV, "data"))


def load_dataset(spec, root):
    """Resolve a dataset spec.

    * ``blobs:key=value,...`` builds a synthetic corpus (keys of
      :func:`synth_blobs`; ``nodes=lo-hi``),
    * a path to a ``.bin`` file loads a dataset cache,
    * anything else is a TUDataset name looked up in ``root/name/`` or ``root``.
    """
    if spec.startswith("blobs"):
        opts = {"n_graphs": 20, "nodes_range": (4, 8), "n_clusters": 3, "seed": 0}
        for item in filter(None, spec.partition(":")[2].split(",")):
            key, _, value = item.partition("=")
            if key == "nodes":
                lo, _, hi = value.partition("-")
                opts["nodes_range"] = (int(lo), int(hi or lo))
            elif key in ("n_graphs", "n_clusters", "seed", "dim"):
                opts[key] = int(value)
            elif key in ("spread", "edge_prob"):
                opts[key] = float(value)
            else:
                raise InvalidArgumentError(f"unknown blobs option {key!r}")
        return synth_blobs(**opts)
    if spec.endswith(".bin"):
        return load_dataset_cache(spec)
    root = Path(root)
    for base in (root / spec, root):
        if (base / f"{spec}_graph_indicator.txt").exists():
            return parse_tudataset(base, spec)
    raise ParseError(f"dataset {spec!r} not found under {root}", path=root)


def prepare_dataset(dataset, cfg):
    """GIN propagation followed by optional max-abs feature scaling."""
    out = preprocess_dataset(dataset, cfg.gin_iters)
    if cfg.scale == "maxabs":
        out = maxabs_scale(out)[0]
    return out


def train_indices(n, fraction, seed):
    if fraction >= 1:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    size = max(2, int(round(fraction * n)))
    return np.sort(rng.permutation(n)[:size])


def fit_anchors(dataset, cfg, k=None, init=None):
    """Train the anchor model of ``cfg.family`` on the training graphs."""
    family = cfg.family
    if family is None:
        raise InvalidArgumentError(f"method {cfg.method!r} does not learn anchors")
    k = k or cfg.k or dataset.max_nodes
    idx = np.arange(len(dataset)) if cfg.fit_on == "all" else train_indices(len(dataset), cfg.train_fraction, cfg.seed)
    graphs = [dataset.graphs[i].node_features for i in idx]
    start = time.perf_counter()
    if family == "k":
        space = fit_kmeans(np.vstack(graphs), KmeansConfig(k, seed=cfg.seed), init=init)
        fitted = FittedAnchors("k", space)
    elif family == "ml":
        mcfg = MlTrainConfig(k, epochs=cfg.epochs, batch_graphs=cfg.batch_graphs, seed=cfg.seed,
                             learning_rate=cfg.learning_rate)
        model, space, trace = train_ml(graphs, mcfg)
        fitted = FittedAnchors("ml", space, model, trace)
    else:
        dcfg = DlTrainConfig(k, epochs=cfg.epochs, batch_graphs=cfg.batch_graphs, seed=cfg.seed,
                             learning_rate=cfg.learning_rate)
        model, space, trace = train_dl(graphs, dcfg)
        fitted = FittedAnchors("dl", space, model, trace)
    fitted.train_time = time.perf_counter() - start
    return fitted


def distance_matrix(dataset, cfg, fitted=None):
    """Pairwise distances of every graph; returns ``(DistanceMatrix, seconds)``.

    The timed section covers encoding, mapping and solving, not training.
    """
    dists = dataset.distributions()
    sk = cfg.sinkhorn()
    start = time.perf_counter()
    if cfg.family is None:
        solver = {"ot-emd": "exact", "eot": "sinkhorn-one-by-one", "bds-eot": "bds-sinkhorn"}[cfg.method]
        out = pairwise_matrix(ProblemSet.all_pairs(dists), solver, sk, threads=cfg.threads)
    else:
        if fitted is None:
            raise InvalidArgumentError(f"method {cfg.method!r} needs a fitted anchor model")
        C_s = anchor_cost(fitted.space)
        if cfg.entropic:
            with warnings.catch_warnings():
                warnings.simplefilter("always", RuntimeWarning)
                underflow_risk(C_s, cfg.epsilon)
        mapped = [map_distribution(d, fitted.encode(d.samples)) for d in dists]
        solver = "easot-batched" if cfg.entropic else "exact"
        out = pairwise_matrix(ProblemSet.all_pairs(mapped), solver, sk, shared_cost=C_s, threads=cfg.threads)
    return out, time.perf_counter() - start


def upper_triangle_errors(approx, truth):
    approx, truth = np.asarray(approx, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    if approx.shape != truth.shape or approx.ndim != 2 or approx.shape[0] != approx.shape[1]:
        raise InvalidArgumentError(f"matrices must be square and equal-shaped: {approx.shape} vs {truth.shape}")
    iu = np.triu_indices(approx.shape[0], k=1)
    return approx[iu] - truth[iu]


def rmse(approx, truth):
    """Root mean square difference over the strict upper triangle."""
    err = upper_triangle_errors(approx, truth)
    if err.size == 0:
        return 0.0
    return float(np.sqrt(np.mean(err * err)))


def evaluate(approx, truth, train_time=0.0, dist_time=0.0, meta=None):
    err = upper_triangle_errors(approx, truth)
    absolute = np.abs(err)
    return EvalReport(
        rmse=rmse(approx, truth),
        mean_abs_error=float(absolute.mean()) if err.size else 0.0,
        max_abs_error=float(absolute.max()) if err.size else 0.0,
        n_pairs=int(err.size),
        train_time=float(train_time),
        dist_time=float(dist_time),
        meta=dict(meta or {}),
    )


def run(cfg, dataset=None, truth=None, fitted=None):
    """Fit (if needed), compute the distance matrix and compare with exact OT.

    Returns ``(EvalReport, values, truth, fitted)``; pass ``truth`` to reuse
    a ground-truth matrix across runs.
    """
    if dataset is None:
        dataset = prepare_dataset(load_dataset(cfg.dataset, data_root(cfg)), cfg)
    if cfg.family is not None and fitted is None:
        fitted = fit_anchors(dataset, cfg)
    dm, dist_time = distance_matrix(dataset, cfg, fitted)
    values = dm.to_dense(np.nan)
    if truth is None:
        exact_cfg = RunConfig(**{**cfg.to_dict(), "method": "ot-emd"})
        truth = distance_matrix(dataset, exact_cfg)[0].to_dense(np.nan)
    train_time = fitted.train_time if fitted is not None else 0.0
    meta = {"method": cfg.method, "seed": cfg.seed, "k": fitted.space.k if fitted else None,
            "failed_pairs": len(dm.errors)}
    return evaluate(values, truth, train_time, dist_time, meta), values, truth, fitted
