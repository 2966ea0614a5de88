"""Globally shared edge masks: learning, application, and reporting.

A mask is one M x M matrix of pre-sigmoid logits per modality, shared by
every subject. Only the upper triangle is optimized; the matrix is kept
symmetric by mirroring and the diagonal is pinned to a large negative
constant so self-connections stay off. Applying a mask reweights the
retained edges of the already-sparsified graphs (topology and LDP features
are fixed at formulation time); connectivity reports apply it to the full
matrices.

Mask training maximizes prediction agreement with a frozen backbone: the
masked graph's class distribution is scored against the original graph's
predicted distribution (soft targets), plus sparsity and entropy penalties
that push mask entries toward a small, confident set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .backbone import BackboneParams, build_graph_batch, embed_dataset, forward_batch, train_on_graphs
from .config import BackboneConfig, FinetuneConfig, MaskConfig
from .data import ConnectomeGraph, read_matrix_csv, write_matrix_csv
from .errors import ConfigError, ContractError, DataError, ShapeError
from .optim import Adam

DIAGONAL_LOGIT = -30.0
GROUP_LABELS = {"HC": 0, "SZ": 1}


@dataclass
class GlobalEdgeMask:
    """Pre-sigmoid mask logits (symmetric, diagonal pinned) for one modality."""

    logits: np.ndarray  # (M, M)
    modality: str

    @property
    def num_nodes(self) -> int:
        return self.logits.shape[0]

    def gate(self) -> np.ndarray:
        """sigmoid(logits); entries lie strictly inside (0, 1)."""
        return 1.0 / (1.0 + np.exp(-self.logits))


def apply_mask(matrix: np.ndarray, mask: GlobalEdgeMask) -> np.ndarray:
    """Elementwise reweighting E * sigmoid(Y); symmetry is preserved."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.shape != mask.logits.shape:
        raise ShapeError(
            f"apply_mask: matrix {matrix.shape} vs mask {mask.logits.shape}"
        )
    return matrix * mask.gate()


def masked_graph(graph: ConnectomeGraph, mask: GlobalEdgeMask) -> ConnectomeGraph:
    """Same topology and features, edge weights multiplied by the mask gate."""
    gate = mask.gate()
    scale = gate[graph.edges[:, 0], graph.edges[:, 1]]
    return replace(graph, edge_weights=graph.edge_weights * scale)


def _effective_logits(raw: ad.Tensor, upper: np.ndarray, diag: np.ndarray) -> ad.Tensor:
    """Mirror the learned upper triangle and pin the diagonal."""
    learned = ad.multiply(raw, ad.constant(upper))
    return ad.add(ad.add(learned, ad.transpose(learned)), ad.constant(diag))


def init_mask_logits(num_nodes: int, rng: np.random.Generator, init_std: float) -> np.ndarray:
    raw = rng.normal(0.0, init_std, size=(num_nodes, num_nodes))
    upper = np.triu(np.ones((num_nodes, num_nodes)), k=1)
    return raw * upper + (raw * upper).T + np.eye(num_nodes) * DIAGONAL_LOGIT


def learn_global_mask(
    graphs: list,
    params: BackboneParams,
    cfg: MaskConfig,
    rng: np.random.Generator,
    modality: str = "sc",
) -> GlobalEdgeMask:
    """Fit the shared mask against a frozen backbone by prediction agreement."""
    cfg.validate()
    if not params.frozen():
        raise ContractError("learn_global_mask: backbone must be frozen first")
    if not graphs:
        raise ConfigError("learn_global_mask: empty graph list")
    m = graphs[0].num_nodes

    batch = build_graph_batch(graphs, dtype=np.float64)
    _, orig_logits = forward_batch(batch, params, train=False)
    orig_probs = np.exp(orig_logits.data - orig_logits.data.max(axis=1, keepdims=True))
    orig_probs /= orig_probs.sum(axis=1, keepdims=True)

    upper = np.triu(np.ones((m, m)), k=1)
    diag = np.eye(m) * DIAGONAL_LOGIT
    raw = ad.parameter(rng.normal(0.0, cfg.init_std, size=(m, m)) * upper)
    iu = np.triu_indices(m, k=1)
    flat_upper = (iu[0] * m + iu[1]).astype(np.int64)

    opt = Adam([raw], lr=cfg.lr)
    for _ in range(cfg.steps):
        opt.zero_grad()
        eff = _effective_logits(raw, upper, diag)
        _, masked_logits = forward_batch(batch, params, mask_logits=eff, train=False)
        agreement = ad.cross_entropy_logits(masked_logits, orig_probs)
        entries = ad.gather_rows(ad.reshape(eff, (m * m, 1)), flat_upper)
        sparsity = ad.mean(ad.sigmoid(entries))
        entropy = ad.mean(ad.binary_entropy_logits(entries))
        loss = ad.add(
            agreement,
            ad.add(
                ad.multiply(sparsity, cfg.sparsity_weight),
                ad.multiply(entropy, cfg.entropy_weight),
            ),
        )
        loss.backward()
        opt.step()

    eff = _effective_logits(raw, upper, diag)
    return GlobalEdgeMask(logits=np.array(eff.data), modality=modality)


def finetune_backbone(
    graphs: list,
    labels,
    mask: GlobalEdgeMask,
    params: BackboneParams,
    cfg: FinetuneConfig,
    backbone_cfg: BackboneConfig,
    rng: np.random.Generator,
) -> tuple[BackboneParams, np.ndarray, list]:
    """Continue supervised training on mask-reweighted graphs.

    Returns the refined parameters, eval-mode embeddings of every input
    graph (masked), and the training-loss trace. The input parameters are
    left untouched.
    """
    cfg.validate()
    tuned = params.copy()
    reweighted = [masked_graph(g, mask) for g in graphs]
    if cfg.epochs > 0:
        tuned, trace = train_on_graphs(
            reweighted,
            labels,
            backbone_cfg,
            rng,
            params=tuned,
            lr=cfg.lr,
            epochs=cfg.epochs,
            batch_size=cfg.batch_size,
            patience=cfg.patience,
        )
    else:
        trace = []
    embeddings, _ = embed_dataset(reweighted, tuned)
    return tuned, embeddings, trace


# ---------------------------------------------------------------------------
# group-level reporting
# ---------------------------------------------------------------------------


@dataclass
class ExplanationReport:
    """Top group-level connections, normalized to [0, 1] by the max weight."""

    group: str
    edges: list  # [(i, j, weight)] sorted by descending weight
    requested: int


def top_connections(
    subjects: list,
    mask: GlobalEdgeMask,
    group: str,
    n: int = 100,
    modality: str | None = None,
) -> ExplanationReport:
    """Average masked matrices over one group and rank the strongest pairs."""
    if group not in GROUP_LABELS:
        raise ConfigError(f"top_connections: group must be one of {sorted(GROUP_LABELS)}")
    label = GROUP_LABELS[group]
    modality = modality or mask.modality
    members = [s for s in subjects if s.label == label]
    if not members:
        raise DataError(f"top_connections: no subjects in group {group}")
    acc = np.zeros_like(mask.logits)
    for subject in members:
        acc += apply_mask(subject.matrix(modality), mask)
    acc /= len(members)
    peak = acc.max()
    if peak > 0:
        acc = acc / peak
    iu = np.triu_indices(acc.shape[0], k=1)
    ranked = sorted(
        zip(iu[0].tolist(), iu[1].tolist(), acc[iu].tolist()),
        key=lambda t: (-t[2], t[0], t[1]),
    )
    count = min(n, len(ranked))
    return ExplanationReport(group=group, edges=ranked[:count], requested=n)


# ---------------------------------------------------------------------------
# mask files: CSV logits plus a JSON sidecar
# ---------------------------------------------------------------------------


def save_mask(path, mask: GlobalEdgeMask, meta: dict | None = None) -> None:
    path = Path(path)
    write_matrix_csv(path, mask.logits)
    sidecar = {"modality": mask.modality}
    if meta:
        sidecar.update(meta)
    Path(str(path) + ".meta.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_mask(path) -> tuple[GlobalEdgeMask, dict]:
    path = Path(path)
    logits = read_matrix_csv(path)
    sidecar_path = Path(str(path) + ".meta.json")
    if not sidecar_path.exists():
        raise DataError(f"mask sidecar not found: {sidecar_path}")
    meta = json.loads(sidecar_path.read_text())
    if "modality" not in meta:
        raise DataError(f"mask sidecar {sidecar_path}: missing 'modality'")
    return GlobalEdgeMask(logits=logits, modality=meta["modality"]), meta
