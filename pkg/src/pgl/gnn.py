"""Backbone, edge/node networks, classifier, discriminator and the graph forward pass.

All "convolutional" layers act on flat feature vectors, so they are affine
maps. Parameter names are ``<module>.<layer>.<W|b>``.
"""
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .params import ParameterSet, glorot_uniform


@dataclass
class ModelConfig:
    in_dim: int
    n_classes: int
    hidden: int = 256
    edge_hidden: int = 0
    disc_hidden: int = 0
    depth: int = 1
    dropout: float = 0.2
    slope: float = 0.01

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("GNN depth must be >= 1")
        if self.edge_hidden <= 0:
            self.edge_hidden = self.hidden
        if self.disc_hidden <= 0:
            self.disc_hidden = self.hidden


class ModelBundle:
    """Parameters of G_B, G_E^(l), G_N^(l), F and D plus the architecture config."""

    def __init__(self, config, seed=0):
        self.config = config
        self.params = ParameterSet()
        rng = np.random.default_rng(seed)
        c, h = config, config.hidden
        self._affine(rng, "backbone.0", c.in_dim, h, "backbone")
        self._affine(rng, "backbone.1", h, h, "backbone")
        for l in range(1, c.depth + 1):
            self._affine(rng, f"edge{l}.0", h, c.edge_hidden, "gnn")
            self._affine(rng, f"edge{l}.1", c.edge_hidden, 1, "gnn")
            self._affine(rng, f"node{l}.0", 2 * h, h, "gnn")
            self._affine(rng, f"node{l}.1", h, h, "gnn")
        self._affine(rng, "classifier", h, c.n_classes, "classifier")
        self._affine(rng, "disc.0", h, c.disc_hidden, "discriminator")
        self._affine(rng, "disc.1", c.disc_hidden, 1, "discriminator")

    def _affine(self, rng, name, fan_in, fan_out, group):
        self.params.add(f"{name}.W", glorot_uniform(rng, fan_in, fan_out), group)
        self.params.add(f"{name}.b", np.zeros(fan_out), group)

    def affine(self, name, x):
        return ad.matmul(x, self.params[f"{name}.W"]) + self.params[f"{name}.b"]

    def backbone(self, x):
        x = ad.as_tensor(x)
        hdn = ad.leaky_relu(self.affine("backbone.0", x), self.config.slope)
        return self.affine("backbone.1", hdn)

    def edge_net(self, l, diff):
        hdn = ad.leaky_relu(self.affine(f"edge{l}.0", diff), self.config.slope)
        return self.affine(f"edge{l}.1", hdn)

    def node_net(self, l, x, training=False, rng=None):
        hdn = ad.leaky_relu(self.affine(f"node{l}.0", x), self.config.slope)
        hdn = ad.dropout(hdn, self.config.dropout, rng=rng, training=training)
        return ad.leaky_relu(self.affine(f"node{l}.1", hdn), self.config.slope)

    def classify(self, v):
        return ad.softmax(self.affine("classifier", v))

    def discriminate(self, v):
        hdn = ad.leaky_relu(self.affine("disc.0", v), self.config.slope)
        return ad.sigmoid(self.affine("disc.1", hdn)).reshape(-1)


def edge_update(nodes, model, layer):
    """Normalized edge matrix ``E = D^-1/2 (A + I) D^-1/2`` from pairwise |v_i - v_j|.

    The network's own ``A_ii`` is discarded; self-loops come from ``+I`` only.
    """
    nodes = ad.as_tensor(nodes)
    n = nodes.shape[0]
    diff = ad.absdiff(nodes.reshape(n, 1, -1), nodes.reshape(1, n, -1))
    A = ad.sigmoid(model.edge_net(layer, diff).reshape(n, n))
    eye = np.eye(n)
    A_hat = A * (1.0 - eye) + eye
    d_inv_sqrt = ad.power(A_hat.sum(axis=1), -0.5)
    return d_inv_sqrt.reshape(n, 1) * A_hat * d_inv_sqrt.reshape(1, n)


def node_update(nodes, E, model, layer, training=False, rng=None):
    """``v_l = G_N([v; E v])``."""
    nodes = ad.as_tensor(nodes)
    agg = ad.matmul(ad.as_tensor(E), nodes)
    return model.node_net(layer, ad.concat([nodes, agg], axis=-1), training=training, rng=rng)


@dataclass
class GraphBatch:
    """Node arrays for one mini-batch graph.

    ``labels`` holds class indices for labeled nodes and -1 elsewhere;
    ``domain`` is 0 for source nodes and 1 for target nodes.
    """
    X: np.ndarray
    labels: np.ndarray
    domain: np.ndarray
    ids: list = field(default_factory=list)

    @property
    def n_nodes(self):
        return self.X.shape[0]

    @property
    def labeled_mask(self):
        return self.labels >= 0


@dataclass
class GraphState:
    node_embeddings: list
    edge_matrices: list

    @property
    def n_nodes(self):
        return self.node_embeddings[0].shape[0]


@dataclass
class GraphOutput:
    state: GraphState
    class_probs: list
    domain_probs: object


def forward_graph(batch, model, training=False, rng=None, grl_scale=1.0, with_domain=True):
    """Run the full graph model on one fully connected mini-batch graph."""
    X = batch.X if isinstance(batch, GraphBatch) else np.asarray(batch)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    v = model.backbone(X)
    nodes, edges, probs = [v], [], []
    for l in range(1, model.config.depth + 1):
        E = edge_update(nodes[-1], model, l)
        v_next = node_update(nodes[-1], E, model, l, training=training, rng=rng)
        edges.append(E)
        nodes.append(v_next)
        probs.append(model.classify(v_next))
    domain = model.discriminate(ad.grad_reverse(v, grl_scale)) if with_domain else None
    return GraphOutput(GraphState(nodes, edges), probs, domain)


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   8 bytes   magic b"PGLCKPT\0"
#   u32       format version (1)
#   u32       metadata length, then that many bytes of UTF-8 JSON (sorted keys)
#   u32       parameter count
#   per parameter:
#     u16 name length, name (UTF-8)
#     u16 group length, group (UTF-8)
#     u32 ndim, ndim x u32 dims
#     prod(dims) x float32 values, C order

MAGIC = b"PGLCKPT\0"
VERSION = 1


def save_checkpoint(path, model, groups=None, meta=None):
    params = model.params
    names = [n for n in params if groups is None or params.group_of(n) in groups]
    info = {"model": asdict(model.config), "groups": sorted({params.group_of(n) for n in names})}
    if meta:
        info.update(meta)
    blob = json.dumps(info, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(names)))
        for n in names:
            arr = params[n].data
            nb, gb = n.encode(), params.group_of(n).encode()
            fh.write(struct.pack("<H", len(nb)) + nb)
            fh.write(struct.pack("<H", len(gb)) + gb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f4").tobytes(order="C"))


def read_checkpoint(path):
    """Return ``(metadata, {name: (group, float64 array)})``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, mlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    meta = json.loads(data[off:off + mlen].decode())
    off += mlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, off)
        name = data[off + 2:off + 2 + ln].decode()
        off += 2 + ln
        (lg,) = struct.unpack_from("<H", data, off)
        group = data[off + 2:off + 2 + lg].decode()
        off += 2 + lg
        (ndim,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        arrays[name] = (group, arr.astype(np.float64))
    return meta, arrays


def load_checkpoint(path, seed=0, **overrides):
    """Rebuild a model from a checkpoint; groups absent from the file keep a fresh init."""
    meta, arrays = read_checkpoint(path)
    cfg = dict(meta["model"])
    cfg.update(overrides)
    model = ModelBundle(ModelConfig(**cfg), seed=seed)
    model.params.load_state_dict({n: a for n, (_, a) in arrays.items()})
    return model, meta
