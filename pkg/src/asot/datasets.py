"""
Dataset ingestion and preprocessing.

* TUDataset flat files (``{name}_A.txt``, ``{name}_graph_indicator.txt``,
  ``{name}_node_labels.txt`` or ``{name}_node_attributes.txt``).
* GIN-style neighbourhood-sum feature propagation.
* MNIST images (IDX format) to 3-d point clouds.
* Seeded synthetic graph corpora.
* A versioned binary cache for preprocessed datasets.
"""

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, ParseError
from .transport import DiscreteDistribution


@dataclass
class Graph:
    """Undirected graph with per-node feature rows.

    ``edges`` is an ``E x 2`` array of 0-based node pairs with ``u < v`` for
    regular edges (self loops are kept as ``u == v``).
    """

    node_count: int
    edges: np.ndarray
    node_features: np.ndarray

    def __post_init__(self):
        self.node_count = int(self.node_count)
        edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= self.node_count):
            raise InvalidArgumentError("edge index out of range")
        feats = np.asarray(self.node_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.node_count:
            raise InvalidArgumentError(
                f"node_features must have {self.node_count} rows, got shape {feats.shape}"
            )
        if not np.isfinite(feats).all():
            raise InvalidArgumentError("node features must be finite")
        self.edges = edges
        self.node_features = feats

    def neighbour_sum(self, h):
        out = np.zeros_like(h)
        u, v = self.edges[:, 0], self.edges[:, 1]
        np.add.at(out, u, h[v])
        regular = u != v
        np.add.at(out, v[regular], h[u[regular]])
        return out

    def adjacency(self):
        A = np.zeros((self.node_count, self.node_count))
        A[self.edges[:, 0], self.edges[:, 1]] = 1.0
        A[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return A


@dataclass
class GraphDataset:
    graphs: list
    labels: list = None
    feature_dim: int = None
    name: str = ""
    listed_edge_count: int = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.feature_dim is None:
            self.feature_dim = self.graphs[0].node_features.shape[1] if self.graphs else 0
        for g in self.graphs:
            if g.node_features.shape[1] != self.feature_dim:
                raise InvalidArgumentError("graphs disagree on feature dimension")
        if self.labels is not None and len(self.labels) != len(self.graphs):
            raise InvalidArgumentError("one label per graph required")

    def __len__(self):
        return len(self.graphs)

    @property
    def max_nodes(self):
        return max(g.node_count for g in self.graphs)

    def pooled_features(self, indices=None):
        graphs = self.graphs if indices is None else [self.graphs[i] for i in indices]
        return np.vstack([g.node_features for g in graphs])

    def distributions(self):
        """Uniform-mass point clouds of node features, one per graph."""
        return [DiscreteDistribution.uniform(g.node_features) for g in self.graphs]


def _read_int_rows(path, width=None):
    path = Path(path)
    if not path.exists():
        raise ParseError("file not found", path=path)
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            tokens = [t for t in text.replace(",", " ").split()]
            try:
                values = [int(t) for t in tokens]
            except ValueError:
                raise ParseError(f"non-integer token in {text!r}", path=path, line=lineno) from None
            if width is not None and len(values) != width:
                raise ParseError(f"expected {width} values, found {len(values)}", path=path, line=lineno)
            rows.append((lineno, values))
    return rows


def _read_float_rows(path):
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                rows.append([float(t) for t in text.replace(",", " ").split()])
            except ValueError:
                raise ParseError(f"non-numeric token in {text!r}", path=path, line=lineno) from None
    return rows


def parse_tudataset(root, name, features="auto"):
    """Read a TUDataset corpus from ``root/{name}_*.txt``.

    Node ids in the edge file are 1-based and global across graphs. Directed
    duplicates ``(u, v)``/``(v, u)`` collapse into one undirected edge.
    ``features`` selects ``"labels"`` (one-hot, label values sorted
    ascending), ``"attributes"`` (raw float rows) or ``"auto"`` (labels when
    the file exists).
    """
    root = Path(root)
    prefix = root / name
    indicator_rows = _read_int_rows(f"{prefix}_graph_indicator.txt", width=1)
    indicator = np.array([v[0] for _, v in indicator_rows], dtype=np.int64)
    n_nodes = indicator.size
    if n_nodes == 0:
        raise ParseError("graph indicator file is empty", path=f"{prefix}_graph_indicator.txt")
    n_graphs = int(indicator.max())
    for (lineno, (gid,)), prev in zip(indicator_rows, np.concatenate([[1], indicator[:-1]])):
        if gid < 1 or gid < prev:
            raise ParseError(
                f"graph id {gid} out of range or out of order",
                path=f"{prefix}_graph_indicator.txt",
                line=lineno,
            )
    counts = np.bincount(indicator - 1, minlength=n_graphs)
    if np.any(counts == 0):
        raise ParseError(
            f"graph ids are not contiguous (graph {int(np.argmin(counts)) + 1} has no nodes)",
            path=f"{prefix}_graph_indicator.txt",
        )
    offsets = np.concatenate([[0], np.cumsum(counts)])

    edge_path = Path(f"{prefix}_A.txt")
    edge_rows = _read_int_rows(edge_path, width=2)
    edges_by_graph = [set() for _ in range(n_graphs)]
    for lineno, (u, v) in edge_rows:
        if not (1 <= u <= n_nodes and 1 <= v <= n_nodes):
            raise ParseError(f"node id out of range 1..{n_nodes}", path=edge_path, line=lineno)
        g = indicator[u - 1]
        if indicator[v - 1] != g:
            raise ParseError("edge joins nodes of different graphs", path=edge_path, line=lineno)
        a, b = sorted((u - 1 - offsets[g - 1], v - 1 - offsets[g - 1]))
        edges_by_graph[g - 1].add((a, b))

    label_path = Path(f"{prefix}_node_labels.txt")
    attr_path = Path(f"{prefix}_node_attributes.txt")
    if features == "auto":
        features = "labels" if label_path.exists() else "attributes"
    if features == "labels":
        label_rows = _read_int_rows(label_path)
        node_labels = np.array([v[0] for _, v in label_rows], dtype=np.int64)
        if node_labels.size != n_nodes:
            raise ParseError(f"{node_labels.size} node labels for {n_nodes} nodes", path=label_path)
        values, codes = np.unique(node_labels, return_inverse=True)
        feats = np.eye(values.size)[codes]
    elif features == "attributes":
        if not attr_path.exists():
            raise ParseError("file not found", path=attr_path)
        feats = np.array(_read_float_rows(attr_path), dtype=np.float64)
        if feats.shape[0] != n_nodes:
            raise ParseError(f"{feats.shape[0]} attribute rows for {n_nodes} nodes", path=attr_path)
    else:
        raise InvalidArgumentError(f"unknown feature source {features!r}")

    labels = None
    graph_label_path = Path(f"{prefix}_graph_labels.txt")
    if graph_label_path.exists():
        labels = [v[0] for _, v in _read_int_rows(graph_label_path, width=1)]
        if len(labels) != n_graphs:
            raise ParseError(f"{len(labels)} graph labels for {n_graphs} graphs", path=graph_label_path)

    graphs = []
    for g in range(n_graphs):
        edges = np.array(sorted(edges_by_graph[g]), dtype=np.int64).reshape(-1, 2)
        graphs.append(Graph(int(counts[g]), edges, feats[offsets[g]:offsets[g + 1]]))
    return GraphDataset(graphs, labels, feats.shape[1], name=name, listed_edge_count=len(edge_rows))


def gin_preprocess(g, iters=4, eps=0.0):
    """Concatenate ``[x, x', x'', ...]`` where ``x' = (1 + eps) x + sum of neighbours``."""
    h = g.node_features
    blocks = [h]
    for _ in range(iters):
        h = (1.0 + eps) * h + g.neighbour_sum(h)
        blocks.append(h)
    return Graph(g.node_count, g.edges, np.hstack(blocks))


def preprocess_dataset(dataset, iters=4, eps=0.0):
    graphs = [gin_preprocess(g, iters, eps) for g in dataset.graphs]
    return replace(dataset, graphs=graphs, feature_dim=(iters + 1) * dataset.feature_dim)


def maxabs_scale(dataset, scale=None):
    """Divide every feature column by its largest absolute value over the dataset.

    Returns ``(scaled_dataset, scale)``; all-zero columns keep scale 1.
    """
    if scale is None:
        scale = np.abs(dataset.pooled_features()).max(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
    graphs = [replace(g, node_features=g.node_features / scale) for g in dataset.graphs]
    return replace(dataset, graphs=graphs), scale


def image_to_distribution(pixels):
    """Point cloud of the non-zero pixels of a 28 x 28 image.

    The pixel at array index ``[r, c]`` with value ``p > 0`` becomes the sample
    ``[(r + 1) / 28, (c + 1) / 28, p / 256]``; every sample gets mass ``1/count``.
    """
    pixels = np.asarray(pixels)
    if pixels.shape != (28, 28):
        raise InvalidArgumentError(f"expected a 28 x 28 image, got {pixels.shape}")
    if pixels.min() < 0 or pixels.max() > 255:
        raise InvalidArgumentError("pixel values must lie in [0, 255]")
    r, c = np.nonzero(pixels)
    if r.size == 0:
        raise InvalidArgumentError("image has no non-zero pixels; distribution would be empty")
    samples = np.stack([(r + 1) / 28.0, (c + 1) / 28.0, pixels[r, c].astype(np.float64) / 256.0], axis=1)
    return DiscreteDistribution(samples, np.full(r.size, 1.0 / r.size))


_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path):
    """Load an IDX array (MNIST image/label files, optionally gzipped)."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ParseError("bad IDX magic number", path=path)
    dtype = _IDX_TYPES.get(raw[2])
    if dtype is None:
        raise ParseError(f"unknown IDX element type 0x{raw[2]:02x}", path=path)
    ndim = raw[3]
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    data = np.frombuffer(raw, dtype=dtype, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ParseError(f"IDX payload has {data.size} elements, header says {dims}", path=path)
    return data.reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    code = {np.dtype("uint8"): 0x08, np.dtype("int8"): 0x09}.get(array.dtype)
    if code is None:
        raise InvalidArgumentError("only uint8/int8 arrays are supported")
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def mnist_subset(labels, per_class=50, seed=0):
    """Indices of ``per_class`` randomly chosen images of every digit."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    picks = []
    for digit in range(10):
        pool = np.nonzero(labels == digit)[0]
        if pool.size < per_class:
            raise InvalidArgumentError(f"digit {digit} has only {pool.size} images")
        picks.append(np.sort(rng.choice(pool, per_class, replace=False)))
    return np.concatenate(picks)


def synth_blobs(n_graphs, nodes_range, n_clusters, seed, dim=2, spread=0.1, edge_prob=0.3):
    """Random graphs whose node features come from Gaussian blobs.

    Blob centres are drawn in ``[0, 1]^dim``; each node picks a blob uniformly
    and adds isotropic noise of scale ``spread``.
    """
    if n_graphs < 1 or n_clusters < 1 or dim < 1:
        raise InvalidArgumentError("n_graphs, n_clusters and dim must be positive")
    lo, hi = nodes_range
    if lo < 1 or hi < lo:
        raise InvalidArgumentError(f"bad nodes_range {nodes_range}")
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.0, 1.0, size=(n_clusters, dim))
    graphs, labels = [], []
    for _ in range(n_graphs):
        n = int(rng.integers(lo, hi + 1))
        which = rng.integers(n_clusters, size=n)
        feats = centres[which] + spread * rng.standard_normal((n, dim))
        iu, ju = np.triu_indices(n, k=1)
        keep = rng.random(iu.size) < edge_prob
        graphs.append(Graph(n, np.stack([iu[keep], ju[keep]], axis=1), feats))
        labels.append(int(np.bincount(which, minlength=n_clusters).argmax()))
    return GraphDataset(graphs, labels, dim, name=f"blobs-{seed}")


CACHE_MAGIC = b"ASOTDSC\x00"
CACHE_VERSION = 1


def save_dataset_cache(dataset, path):
    """Binary cache: header, then per-graph edge and row-major feature blocks.

    Layout (little endian): magic (8 bytes), version u32, n_graphs u32,
    feature_dim u32, has_labels u32; per graph node_count u32, edge_count u32,
    edges as int64 pairs, features as float64 rows; finally int64 labels.
    """
    parts = [
        CACHE_MAGIC,
        struct.pack("<IIII", CACHE_VERSION, len(dataset), dataset.feature_dim, dataset.labels is not None),
    ]
    for g in dataset.graphs:
        parts.append(struct.pack("<II", g.node_count, len(g.edges)))
        parts.append(g.edges.astype("<i8").tobytes())
        parts.append(np.ascontiguousarray(g.node_features, dtype="<f8").tobytes())
    if dataset.labels is not None:
        parts.append(np.asarray(dataset.labels, dtype="<i8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_dataset_cache(path):
    raw = Path(path).read_bytes()
    try:
        return _decode_cache(raw, path)
    except (struct.error, ValueError) as exc:
        raise ParseError(f"truncated or corrupt cache ({exc})", path=path) from None


def _decode_cache(raw, path):
    if raw[:8] != CACHE_MAGIC:
        raise ParseError("not a dataset cache file", path=path)
    version, n_graphs, dim, has_labels = struct.unpack_from("<IIII", raw, 8)
    if version != CACHE_VERSION:
        raise ParseError(f"unsupported cache version {version}", path=path)
    pos = 24
    graphs = []
    for _ in range(n_graphs):
        n, e = struct.unpack_from("<II", raw, pos)
        pos += 8
        edges = np.frombuffer(raw, "<i8", 2 * e, pos).reshape(e, 2).astype(np.int64)
        pos += 16 * e
        feats = np.frombuffer(raw, "<f8", n * dim, pos).reshape(n, dim).astype(np.float64)
        pos += 8 * n * dim
        graphs.append(Graph(n, edges, feats))
    labels = None
    if has_labels:
        labels = np.frombuffer(raw, "<i8", n_graphs, pos).astype(int).tolist()
    return GraphDataset(graphs, labels, dim)
