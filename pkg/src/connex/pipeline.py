"""Joint loss, metrics, fusion training, cross-validation and ablations.

Each cross-validation fold runs the complete chain on its training split
only: per-modality backbone training, mask learning against the frozen
backbone, mask-guided fine-tuning, and fusion training on the fine-tuned
embeddings. Test subjects never enter any training stage; the audit trail
returned next to the metrics makes that checkable by id.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backbone import embed_dataset, train_on_graphs
from .config import (
    ABLATION_ROWS,
    FusionConfig,
    LossWeights,
    PipelineConfig,
    loss_weight_grid,
    stage_rng,
)
from .data import build_graph
from .errors import ConfigError, ContractError, DataError
from .explain import finetune_backbone, learn_global_mask, masked_graph
from .fusion import (
    FusionBatch,
    concat_forward,
    connex_forward,
    cross_att_forward,
    init_concat,
    init_cross_att_baseline,
    init_fusion,
    make_batches,
)
from .optim import Adam

BRANCH_ORDER = ("sc", "fnc", "uni", "fused")

#: ablation row -> (fusion variant, include unified branch); None = unimodal row
ROW_SPECS = {
    "SC/base": ("unimodal-base", "sc"),
    "SC/explained": ("unimodal-explained", "sc"),
    "FNC/base": ("unimodal-base", "fnc"),
    "FNC/explained": ("unimodal-explained", "fnc"),
    "SC+FNC/concat": ("concat", False),
    "SC+FNC/cross-att": ("cross_att", False),
    "SC+FNC/connex": ("connex", False),
    "SC+FNC/concat+unified": ("concat", True),
    "SC+FNC/cross-att+unified": ("cross_att", True),
    "SC+FNC/connex+unified": ("connex", True),
}


# ---------------------------------------------------------------------------
# loss, prediction, metrics
# ---------------------------------------------------------------------------


def branch_weights(weights: LossWeights, has_unified: bool) -> dict:
    """Per-branch loss weights; renormalized when the unified branch is off."""
    weights.validate()
    if has_unified:
        return {
            "sc": weights.sc_view,
            "fnc": weights.fnc_view,
            "uni": weights.unified_view,
            "fused": weights.fused,
        }
    total = weights.sc_view + weights.fnc_view + weights.fused
    if total <= 0:
        raise ConfigError("branch_weights: remaining weights sum to zero")
    return {
        "sc": weights.sc_view / total,
        "fnc": weights.fnc_view / total,
        "fused": weights.fused / total,
    }


def _one_hot(labels: np.ndarray) -> np.ndarray:
    out = np.zeros((len(labels), 2))
    out[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)] = 1.0
    return out


def joint_loss(logits: dict, labels, weights: dict, valid=None) -> ad.Tensor:
    """Weighted sum of per-branch mean cross-entropies over valid subjects."""
    if set(logits) != set(weights):
        raise ConfigError(
            f"joint_loss: branches {sorted(logits)} do not match weights {sorted(weights)}"
        )
    total_weight = sum(weights.values())
    if abs(total_weight - 1.0) > 1e-9:
        raise ConfigError(f"joint_loss: weights must sum to 1, got {total_weight!r}")
    targets = _one_hot(labels)
    total = None
    for branch in BRANCH_ORDER:  # fixed order: result is permutation-invariant
        if branch not in logits:
            continue
        term = ad.multiply(
            ad.cross_entropy_logits(logits[branch], targets, valid), float(weights[branch])
        )
        total = term if total is None else ad.add(total, term)
    return total


def predict(logits: np.ndarray) -> np.ndarray:
    """argmax over sigmoid-transformed logits; exact ties go to class 0."""
    logits = np.asarray(logits)
    if logits.ndim != 2 or logits.shape[1] != 2:
        raise ConfigError(f"predict: expected (n, 2) logits, got {logits.shape}")
    gate = 1.0 / (1.0 + np.exp(-logits))
    return (gate[:, 1] > gate[:, 0]).astype(np.int64)


def metrics(predictions, labels) -> tuple[float, float, float]:
    """(accuracy, precision, f1) with class 1 positive; 0/0 counts as 0."""
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.size == 0 or predictions.shape != labels.shape:
        raise DataError("metrics: empty or mismatched inputs")
    accuracy = float((predictions == labels).mean())
    tp = int(((predictions == 1) & (labels == 1)).sum())
    fp = int(((predictions == 1) & (labels == 0)).sum())
    fn = int(((predictions == 0) & (labels == 1)).sum())
    precision = tp / (tp + fp) if (tp + fp) else 0.0
    recall = tp / (tp + fn) if (tp + fn) else 0.0
    f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
    return accuracy, float(precision), float(f1)


# ---------------------------------------------------------------------------
# fusion training
# ---------------------------------------------------------------------------


def _init_variant(variant, unified, cfg: FusionConfig, channels, rng):
    if variant == "connex":
        return init_fusion(
            rng, cfg.batch_size, channels, cfg.token_count, cfg.model_dim, cfg.heads,
            unified=unified, dropout=cfg.dropout,
        )
    if variant == "concat":
        return init_concat(rng, cfg.batch_size, channels, unified)
    if variant == "cross_att":
        return init_cross_att_baseline(
            rng, cfg.batch_size, channels, cfg.token_count, cfg.model_dim, cfg.heads,
            unified=unified, dropout=cfg.dropout,
        )
    raise ConfigError(f"unknown fusion variant {variant!r}")


def _variant_loss(variant, params, batch: FusionBatch, weights: LossWeights, train, rng):
    if variant == "connex":
        outputs = connex_forward(batch, params, train=train, rng=rng)
        return joint_loss(
            outputs.logits, batch.labels, branch_weights(weights, params.has_unified),
            valid=batch.valid,
        )
    forward = concat_forward if variant == "concat" else cross_att_forward
    logits = forward(batch, params, train=train, rng=rng)
    return ad.cross_entropy_logits(logits, _one_hot(batch.labels), valid=batch.valid)


def train_fusion(
    sc_embeddings: np.ndarray,
    fnc_embeddings: np.ndarray,
    labels,
    cfg: FusionConfig,
    weights: LossWeights,
    rng: np.random.Generator,
    variant: str = "connex",
    unified: bool = True,
    backbones: list | None = None,
    epochs: int | None = None,
):
    """Adam-train one fusion variant on fixed embeddings.

    ``backbones`` (if given) are byte-compared before and after training;
    any change is a hard contract failure since fusion must never touch
    them.
    """
    channels = sc_embeddings.shape[1]
    cfg.validate(channels)
    labels = np.asarray(labels, dtype=np.int64)
    signatures = [b.byte_signature() for b in backbones] if backbones else None
    params = _init_variant(variant, unified, cfg, channels, rng)
    opt = Adam(params.tensors(), lr=cfg.lr)
    n = len(labels)
    epochs = cfg.epochs if epochs is None else epochs
    trace = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        count = 0
        for batch in make_batches(sc_embeddings, fnc_embeddings, labels, cfg.batch_size, order):
            opt.zero_grad()
            loss = _variant_loss(variant, params, batch, weights, True, rng)
            loss.backward()
            opt.step()
            n_valid = int(batch.valid.sum())
            total += loss.item() * n_valid
            count += n_valid
        trace.append(total / count)
    if signatures is not None:
        after = [b.byte_signature() for b in backbones]
        if after != signatures:
            raise ContractError("train_fusion: backbone parameters changed during fusion training")
    return params, trace


def evaluate_fusion(
    params, variant: str, sc_embeddings, fnc_embeddings, labels, cfg: FusionConfig
) -> np.ndarray:
    """Deterministic-order predictions for every subject (fused head)."""
    labels = np.asarray(labels, dtype=np.int64)
    preds = []
    for batch in make_batches(sc_embeddings, fnc_embeddings, labels, cfg.batch_size):
        if variant == "connex":
            logits = connex_forward(batch, params, train=False).logits["fused"]
        else:
            forward = concat_forward if variant == "concat" else cross_att_forward
            logits = forward(batch, params, train=False)
        preds.append(predict(logits.data)[batch.valid])
    return np.concatenate(preds)


def grid_search_loss_weights(
    sc_embeddings,
    fnc_embeddings,
    labels,
    cfg: FusionConfig,
    grid: list,
    rng: np.random.Generator,
    unified: bool = True,
    epochs: int | None = None,
) -> LossWeights:
    """Pick joint-loss weights by accuracy on a held-out fifth of the input."""
    labels = np.asarray(labels, dtype=np.int64)
    order = rng.permutation(len(labels))
    n_val = max(1, len(labels) // 5)
    val_idx, fit_idx = order[:n_val], order[n_val:]
    if len(set(labels[fit_idx].tolist())) < 2:
        raise ConfigError("grid_search_loss_weights: both classes required in the fit split")
    best = None
    for weights in grid:
        params, _ = train_fusion(
            sc_embeddings[fit_idx], fnc_embeddings[fit_idx], labels[fit_idx],
            cfg, weights, stage_rng(int(rng.integers(2**31)), "grid"),
            variant="connex", unified=unified, epochs=epochs,
        )
        preds = evaluate_fusion(
            params, "connex", sc_embeddings[val_idx], fnc_embeddings[val_idx],
            labels[val_idx], cfg,
        )
        acc = float((preds == labels[val_idx]).mean())
        if best is None or acc > best[0]:
            best = (acc, weights)
    return best[1]


# ---------------------------------------------------------------------------
# cross-validation
# ---------------------------------------------------------------------------


@dataclass
class MetricsRow:
    """Per-config fold aggregate, on the percent scale."""

    config: str
    accuracy_mean: float
    accuracy_std: float
    precision_mean: float
    precision_std: float
    f1_mean: float
    f1_std: float


def stratified_folds(labels, folds: int, rng: np.random.Generator) -> list:
    """Shuffled per-class splits; fold sizes differ by at most one per class."""
    labels = np.asarray(labels, dtype=np.int64)
    test_sets = [[] for _ in range(folds)]
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < folds:
            raise ConfigError(
                f"stratified_folds: class {cls} has {len(idx)} subjects, needs >= {folds}"
            )
        idx = idx[rng.permutation(len(idx))]
        for f, chunk in enumerate(np.array_split(idx, folds)):
            test_sets[f].extend(chunk.tolist())
    out = []
    all_idx = set(range(len(labels)))
    for f in range(folds):
        test = sorted(test_sets[f])
        train = sorted(all_idx - set(test))
        out.append((np.array(train, dtype=np.int64), np.array(test, dtype=np.int64)))
    return out


@dataclass
class FoldArtifacts:
    """Everything one fold's training split produced."""

    fold: int
    train_ids: list
    test_ids: list
    base_params: dict  # modality -> frozen BackboneParams
    masks: dict  # modality -> GlobalEdgeMask
    tuned_params: dict  # modality -> BackboneParams
    base_test_logits: dict  # modality -> (n_test, 2)
    tuned_test_logits: dict
    train_embeddings: dict  # modality -> (n_train, C)
    test_embeddings: dict
    labels_train: np.ndarray
    labels_test: np.ndarray


def run_fold(
    dataset: list,
    graphs: dict,
    train_idx: np.ndarray,
    test_idx: np.ndarray,
    cfg: PipelineConfig,
    fold: int,
) -> FoldArtifacts:
    """Train the per-modality chain on the fold's training split."""
    labels = np.array([s.label for s in dataset], dtype=np.int64)
    artifacts = FoldArtifacts(
        fold=fold,
        train_ids=[dataset[i].id for i in train_idx],
        test_ids=[dataset[i].id for i in test_idx],
        base_params={},
        masks={},
        tuned_params={},
        base_test_logits={},
        tuned_test_logits={},
        train_embeddings={},
        test_embeddings={},
        labels_train=labels[train_idx],
        labels_test=labels[test_idx],
    )
    tag = f"fold{fold}"
    for modality in ("sc", "fnc"):
        train_graphs = [graphs[modality][i] for i in train_idx]
        test_graphs = [graphs[modality][i] for i in test_idx]

        base, _ = train_on_graphs(
            train_graphs,
            labels[train_idx],
            cfg.backbone,
            stage_rng(cfg.seed, tag, "backbone", modality),
        )
        base.freeze()
        _, base_test_logits = embed_dataset(test_graphs, base)

        mask = learn_global_mask(
            train_graphs, base, cfg.mask, stage_rng(cfg.seed, tag, "mask", modality), modality
        )
        tuned, train_emb, _ = finetune_backbone(
            train_graphs,
            labels[train_idx],
            mask,
            base,
            cfg.finetune,
            cfg.backbone,
            stage_rng(cfg.seed, tag, "finetune", modality),
        )
        tuned.freeze()
        masked_test = [masked_graph(g, mask) for g in test_graphs]
        test_emb, tuned_test_logits = embed_dataset(masked_test, tuned)

        artifacts.base_params[modality] = base
        artifacts.masks[modality] = mask
        artifacts.tuned_params[modality] = tuned
        artifacts.base_test_logits[modality] = base_test_logits
        artifacts.tuned_test_logits[modality] = tuned_test_logits
        artifacts.train_embeddings[modality] = train_emb
        artifacts.test_embeddings[modality] = test_emb
    return artifacts


def evaluate_row(row: str, artifacts: FoldArtifacts, cfg: PipelineConfig) -> tuple:
    """(accuracy, precision, f1) of one ablation row on the fold's test split."""
    if row not in ROW_SPECS:
        raise ConfigError(f"unknown ablation row {row!r}")
    kind, detail = ROW_SPECS[row]
    if kind == "unimodal-base":
        preds = predict(artifacts.base_test_logits[detail])
        return metrics(preds, artifacts.labels_test)
    if kind == "unimodal-explained":
        preds = predict(artifacts.tuned_test_logits[detail])
        return metrics(preds, artifacts.labels_test)
    unified = bool(detail)
    weights = cfg.loss_weights
    if cfg.grid_search_weights and kind == "connex":
        weights = grid_search_loss_weights(
            artifacts.train_embeddings["sc"],
            artifacts.train_embeddings["fnc"],
            artifacts.labels_train,
            cfg.fusion,
            grid=loss_weight_grid(),
            rng=stage_rng(cfg.seed, f"fold{artifacts.fold}", "grid", row),
            unified=unified,
        )
    params, _ = train_fusion(
        artifacts.train_embeddings["sc"],
        artifacts.train_embeddings["fnc"],
        artifacts.labels_train,
        cfg.fusion,
        weights,
        stage_rng(cfg.seed, f"fold{artifacts.fold}", "fusion", row),
        variant=kind,
        unified=unified,
        backbones=[artifacts.tuned_params["sc"], artifacts.tuned_params["fnc"]],
    )
    preds = evaluate_fusion(
        params,
        kind,
        artifacts.test_embeddings["sc"],
        artifacts.test_embeddings["fnc"],
        artifacts.labels_test,
        cfg.fusion,
    )
    return metrics(preds, artifacts.labels_test)


def build_all_graphs(dataset: list, cfg: PipelineConfig) -> dict:
    return {
        modality: [
            build_graph(s.matrix(modality), cfg.knn_k, two_hop=cfg.ldp_two_hop) for s in dataset
        ]
        for modality in ("sc", "fnc")
    }


def cross_validate(
    dataset: list,
    cfg: PipelineConfig,
    rows: tuple | None = None,
    graphs: dict | None = None,
) -> tuple[list, list]:
    """Run the full per-fold pipeline; returns (MetricsRow list, audit list)."""
    cfg.validate()
    rows = tuple(rows) if rows is not None else tuple(cfg.rows)
    labels = np.array([s.label for s in dataset], dtype=np.int64)
    folds = stratified_folds(labels, cfg.folds, stage_rng(cfg.seed, "folds"))
    if graphs is None:
        graphs = build_all_graphs(dataset, cfg)
    per_row = {row: [] for row in rows}
    audit = []
    for fold, (train_idx, test_idx) in enumerate(folds):
        artifacts = run_fold(dataset, graphs, train_idx, test_idx, cfg, fold)
        for row in rows:
            per_row[row].append(evaluate_row(row, artifacts, cfg))
        train_ids = artifacts.train_ids
        audit.append(
            {
                "fold": fold,
                "test_ids": artifacts.test_ids,
                "stages": {
                    "backbone_sc": train_ids,
                    "backbone_fnc": train_ids,
                    "mask_sc": train_ids,
                    "mask_fnc": train_ids,
                    "finetune_sc": train_ids,
                    "finetune_fnc": train_ids,
                    "fusion": train_ids,
                },
            }
        )
    results = []
    for row in rows:
        scores = np.array(per_row[row], dtype=np.float64) * 100.0
        means = scores.mean(axis=0)
        stds = scores.std(axis=0)  # population std over folds
        results.append(
            MetricsRow(
                config=row,
                accuracy_mean=float(means[0]),
                accuracy_std=float(stds[0]),
                precision_mean=float(means[1]),
                precision_std=float(stds[1]),
                f1_mean=float(means[2]),
                f1_std=float(stds[2]),
            )
        )
    return results, audit


def run_ablations(dataset: list, cfg: PipelineConfig) -> tuple[list, list]:
    """Every in-scope ablation row with shared per-fold artifacts."""
    rows = tuple(cfg.rows) if cfg.rows else ABLATION_ROWS
    return cross_validate(dataset, cfg, rows=rows)


def write_metrics_csv(rows: list, path) -> None:
    lines = ["config,accuracy_mean,accuracy_std,precision_mean,precision_std,f1_mean,f1_std"]
    for row in rows:
        lines.append(
            f"{row.config},{row.accuracy_mean:.2f},{row.accuracy_std:.2f},"
            f"{row.precision_mean:.2f},{row.precision_std:.2f},"
            f"{row.f1_mean:.2f},{row.f1_std:.2f}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
