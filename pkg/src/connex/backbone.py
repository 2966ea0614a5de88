"""Residual gated graph-convolution backbone with mean-pool readout.

One layer updates node i as

    x_i' = proj(x_i) + relu( x_i @ W_self + sum_{(i,j)} e_ij * g_ij * (x_j @ W_msg) )
    g_ij = sigmoid( x_i @ W_gate_self + x_j @ W_gate_nbr )

where e_ij is the retained (possibly mask-reweighted) edge weight and proj
is a learned linear map on the first layer (identity once widths match).
Dropout hits the relu branch at train time. The graph-level embedding is
the mean over node states; a linear head maps it to two logits.

Subjects are batched as disjoint unions: node indices are offset per graph
so one scatter pass covers the whole batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import BackboneConfig, stage_rng
from .data import ConnectomeGraph, build_graph
from .errors import ConfigError, DataError
from .optim import Adam
from .persist import load_named_tensors, save_named_tensors


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float64):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


@dataclass
class LayerParams:
    project: ad.Tensor | None  # input projection, None when widths already match
    self_w: ad.Tensor
    msg_w: ad.Tensor
    gate_self_w: ad.Tensor
    gate_nbr_w: ad.Tensor


@dataclass
class BackboneParams:
    layers: list
    head_w: ad.Tensor
    head_b: ad.Tensor
    in_dim: int = 5
    channels: int = 32
    dropout: float = 0.6

    def named(self) -> dict:
        out = {}
        for idx, layer in enumerate(self.layers):
            if layer.project is not None:
                out[f"layer{idx}.project"] = layer.project
            out[f"layer{idx}.self_w"] = layer.self_w
            out[f"layer{idx}.msg_w"] = layer.msg_w
            out[f"layer{idx}.gate_self_w"] = layer.gate_self_w
            out[f"layer{idx}.gate_nbr_w"] = layer.gate_nbr_w
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def tensors(self) -> list:
        return list(self.named().values())

    def freeze(self) -> "BackboneParams":
        for t in self.tensors():
            t.requires_grad = False
        return self

    def frozen(self) -> bool:
        return not any(t.requires_grad for t in self.tensors())

    def copy(self) -> "BackboneParams":
        def clone(t):
            return None if t is None else ad.parameter(t.data)

        layers = [
            LayerParams(
                project=clone(l.project),
                self_w=clone(l.self_w),
                msg_w=clone(l.msg_w),
                gate_self_w=clone(l.gate_self_w),
                gate_nbr_w=clone(l.gate_nbr_w),
            )
            for l in self.layers
        ]
        return BackboneParams(
            layers=layers,
            head_w=clone(self.head_w),
            head_b=clone(self.head_b),
            in_dim=self.in_dim,
            channels=self.channels,
            dropout=self.dropout,
        )

    def byte_signature(self) -> bytes:
        chunks = []
        for name, t in sorted(self.named().items()):
            chunks.append(name.encode())
            chunks.append(np.ascontiguousarray(t.data).tobytes())
        return b"".join(chunks)


def init_backbone(rng: np.random.Generator, cfg: BackboneConfig, in_dim: int = 5) -> BackboneParams:
    cfg.validate()
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    layers = []
    width = in_dim
    for _ in range(cfg.layers):
        out_w = cfg.channels
        project = None if width == out_w else ad.parameter(glorot(rng, width, out_w, dtype))
        layers.append(
            LayerParams(
                project=project,
                self_w=ad.parameter(glorot(rng, width, out_w, dtype)),
                msg_w=ad.parameter(glorot(rng, width, out_w, dtype)),
                gate_self_w=ad.parameter(glorot(rng, width, out_w, dtype)),
                gate_nbr_w=ad.parameter(glorot(rng, width, out_w, dtype)),
            )
        )
        width = out_w
    head_w = ad.parameter(glorot(rng, width, 2, dtype))
    head_b = ad.parameter(np.zeros(2, dtype=dtype))
    return BackboneParams(
        layers=layers,
        head_w=head_w,
        head_b=head_b,
        in_dim=in_dim,
        channels=cfg.channels,
        dropout=cfg.dropout,
    )


# ---------------------------------------------------------------------------
# batched forward
# ---------------------------------------------------------------------------


@dataclass
class GraphBatch:
    """Disjoint union of same-size graphs, ready for one forward pass."""

    node_features: np.ndarray  # (B*M, F)
    edges: np.ndarray  # (E, 2) global node indices
    base_weights: np.ndarray  # (E,)
    mask_flat_index: np.ndarray  # (E,) local i*M+j per edge, for mask gathers
    graph_index: np.ndarray  # (B*M,)
    num_graphs: int
    nodes_per_graph: int


def build_graph_batch(graphs: list, dtype=np.float64) -> GraphBatch:
    if not graphs:
        raise DataError("build_graph_batch: empty graph list")
    m = graphs[0].num_nodes
    feats, edges, weights, flat, gidx = [], [], [], [], []
    for slot, graph in enumerate(graphs):
        if graph.num_nodes != m:
            raise DataError("build_graph_batch: graphs differ in node count")
        feats.append(graph.node_features)
        edges.append(graph.edges + slot * m)
        weights.append(graph.edge_weights)
        flat.append(graph.edges[:, 0] * m + graph.edges[:, 1])
        gidx.append(np.full(m, slot, dtype=np.int64))
    return GraphBatch(
        node_features=np.concatenate(feats).astype(dtype),
        edges=np.concatenate(edges),
        base_weights=np.concatenate(weights).astype(dtype),
        mask_flat_index=np.concatenate(flat),
        graph_index=np.concatenate(gidx),
        num_graphs=len(graphs),
        nodes_per_graph=m,
    )


def rggcn_layer(
    x: ad.Tensor,
    batch: GraphBatch,
    layer: LayerParams,
    edge_weight_col: ad.Tensor,
    dropout_p: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> ad.Tensor:
    if x.shape[1] != layer.self_w.shape[0]:
        raise ConfigError(
            f"rggcn_layer: feature width {x.shape[1]} != layer input {layer.self_w.shape[0]}"
        )
    receivers = batch.edges[:, 0]
    neighbors = batch.edges[:, 1]
    # project at node level, gather per edge: gathers commute with linear maps
    gate = ad.sigmoid(
        ad.add(
            ad.gather_rows(ad.matmul(x, layer.gate_self_w), receivers),
            ad.gather_rows(ad.matmul(x, layer.gate_nbr_w), neighbors),
        )
    )
    messages = ad.multiply(gate, ad.gather_rows(ad.matmul(x, layer.msg_w), neighbors))
    out_dim = layer.self_w.shape[1]
    ones_row = ad.constant(np.ones((1, out_dim), dtype=x.dtype))
    weighted = ad.multiply(messages, ad.matmul(edge_weight_col, ones_row))
    aggregated = ad.scatter_sum(weighted, receivers, x.shape[0])
    branch = ad.relu(ad.add(ad.matmul(x, layer.self_w), aggregated))
    if train and dropout_p > 0.0:
        branch = ad.dropout(branch, dropout_p, rng, train=True)
    residual = x if layer.project is None else ad.matmul(x, layer.project)
    return ad.add(residual, branch)


def forward_batch(
    batch: GraphBatch,
    params: BackboneParams,
    mask_logits: ad.Tensor | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[ad.Tensor, ad.Tensor]:
    """Run the full backbone over a batch; returns (embeddings, logits)."""
    if train and params.dropout > 0.0 and rng is None:
        raise ConfigError("forward_batch: train mode with dropout needs an rng")
    dtype = params.head_w.dtype
    if mask_logits is None:
        edge_w = ad.constant(batch.base_weights.reshape(-1, 1))
    else:
        m = batch.nodes_per_graph
        flat = ad.reshape(ad.sigmoid(mask_logits), (m * m, 1))
        per_edge = ad.gather_rows(flat, batch.mask_flat_index)
        edge_w = ad.multiply(per_edge, ad.constant(batch.base_weights.reshape(-1, 1)))
    x = ad.constant(batch.node_features.astype(dtype))
    for layer in params.layers:
        x = rggcn_layer(x, batch, layer, edge_w, params.dropout, train, rng)
    pooled = ad.scatter_sum(x, batch.graph_index, batch.num_graphs)
    embedding = ad.multiply(pooled, 1.0 / batch.nodes_per_graph)
    logits = ad.add(ad.matmul(embedding, params.head_w), params.head_b)
    return embedding, logits


def backbone_forward(
    graph: ConnectomeGraph, params: BackboneParams, train_mode: bool = False,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Single-graph convenience wrapper; returns (embedding, logits) arrays."""
    batch = build_graph_batch([graph], dtype=params.head_w.data.dtype)
    emb, logits = forward_batch(batch, params, train=train_mode, rng=rng)
    return emb.data[0].copy(), logits.data[0].copy()


def embed_dataset(
    graphs: list, params: BackboneParams, batch_size: int = 32
) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode embeddings and logits for every graph, in order."""
    embs, logits = [], []
    for lo in range(0, len(graphs), batch_size):
        batch = build_graph_batch(graphs[lo : lo + batch_size], dtype=params.head_w.data.dtype)
        e, z = forward_batch(batch, params, train=False)
        embs.append(e.data)
        logits.append(z.data)
    return np.concatenate(embs), np.concatenate(logits)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _one_hot(labels: np.ndarray, dtype) -> np.ndarray:
    out = np.zeros((len(labels), 2), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def train_on_graphs(
    graphs: list,
    labels,
    cfg: BackboneConfig,
    rng: np.random.Generator,
    params: BackboneParams | None = None,
    lr: float | None = None,
    epochs: int | None = None,
    batch_size: int | None = None,
    patience: int | None = None,
) -> tuple[BackboneParams, list]:
    """Adam training loop shared by base training and fine-tuning."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(set(labels.tolist())) < 2:
        raise ConfigError("training requires both classes in the training set")
    cfg.validate()
    dtype = np.float32 if cfg.dtype == "float32" else np.float64
    if params is None:
        params = init_backbone(rng, cfg)
    lr = cfg.lr if lr is None else lr
    epochs = cfg.epochs if epochs is None else epochs
    batch_size = cfg.batch_size if batch_size is None else batch_size
    patience = cfg.patience if patience is None else patience

    opt = Adam(params.tensors(), lr=lr)
    n = len(graphs)
    trace = []
    best = np.inf
    stale = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, batch_size):
            sel = order[lo : lo + batch_size]
            batch = build_graph_batch([graphs[i] for i in sel], dtype=dtype)
            targets = _one_hot(labels[sel], dtype)
            opt.zero_grad()
            _, logits = forward_batch(batch, params, train=True, rng=rng)
            loss = ad.cross_entropy_logits(logits, targets)
            loss.backward()
            opt.step()
            total += loss.item() * len(sel)
        epoch_loss = total / n
        trace.append(epoch_loss)
        if epoch_loss < best - cfg.min_delta:
            best = epoch_loss
            stale = 0
        else:
            stale += 1
            if patience and stale >= patience:
                break
    return params, trace


def train_backbone(
    dataset: list,
    modality: str,
    cfg: BackboneConfig,
    k: int = 5,
    seed: int = 0,
    two_hop: bool = False,
    graphs: list | None = None,
) -> tuple[BackboneParams, list, list]:
    """Formulate graphs for one modality and fit the backbone from scratch."""
    if not dataset:
        raise ConfigError("train_backbone: empty dataset")
    if graphs is None:
        graphs = [build_graph(s.matrix(modality), k, two_hop=two_hop) for s in dataset]
    labels = np.array([s.label for s in dataset], dtype=np.int64)
    rng = stage_rng(seed, "backbone", modality)
    params, trace = train_on_graphs(graphs, labels, cfg, rng)
    return params, trace, graphs


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_backbone(path, params: BackboneParams, extra_meta: dict | None = None) -> None:
    named = {name: t.data for name, t in params.named().items()}
    meta = {
        "kind": "backbone",
        "in_dim": params.in_dim,
        "channels": params.channels,
        "num_layers": len(params.layers),
        "dropout": params.dropout,
    }
    if extra_meta:
        meta.update(extra_meta)
    save_named_tensors(path, named, meta)


def load_backbone(path) -> BackboneParams:
    arrays, meta = load_named_tensors(path)
    if meta.get("kind") != "backbone":
        raise DataError(f"checkpoint {path}: not a backbone checkpoint")
    num_layers = int(meta["num_layers"])
    channels = int(meta["channels"])
    in_dim = int(meta["in_dim"])
    layers = []
    width = in_dim
    for idx in range(num_layers):
        def grab(suffix, rows, cols, _idx=idx):
            key = f"layer{_idx}.{suffix}"
            if key not in arrays:
                raise DataError(f"checkpoint {path}: missing tensor {key}")
            if arrays[key].shape != (rows, cols):
                raise DataError(
                    f"checkpoint {path}: {key} has shape {arrays[key].shape}, "
                    f"expected {(rows, cols)}"
                )
            return ad.parameter(arrays[key])

        project = None
        if width != channels:
            project = grab("project", width, channels)
        layers.append(
            LayerParams(
                project=project,
                self_w=grab("self_w", width, channels),
                msg_w=grab("msg_w", width, channels),
                gate_self_w=grab("gate_self_w", width, channels),
                gate_nbr_w=grab("gate_nbr_w", width, channels),
            )
        )
        width = channels
    if arrays["head.w"].shape != (channels, 2) or arrays["head.b"].shape != (2,):
        raise DataError(f"checkpoint {path}: classifier head has wrong shape")
    return BackboneParams(
        layers=layers,
        head_w=ad.parameter(arrays["head.w"]),
        head_b=ad.parameter(arrays["head.b"]),
        in_dim=in_dim,
        channels=channels,
        dropout=float(meta.get("dropout", 0.6)),
    )
