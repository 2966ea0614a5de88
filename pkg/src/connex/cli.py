"""Command-line pipeline orchestration.

Subcommands: synth, train-backbone, explain, finetune, train-fusion,
evaluate, ablate, report. Every run writes a reproducibility record (the
resolved options, the seed, SHA-256 hashes of all inputs) next to its
primary output; :func:`rerun_from_record` re-executes a stage from that
record alone. Exit codes: 0 success, 1 validation/usage error, 2
runtime or numeric error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .backbone import embed_dataset, load_backbone, save_backbone, train_backbone
from .config import PipelineConfig, stage_rng
from .data import SyntheticSpec, build_graph, load_dataset, save_dataset, synthesize_dataset
from .errors import ConfigError, ContractError, DataError, NumericError, ShapeError
from .explain import (
    finetune_backbone,
    learn_global_mask,
    load_mask,
    masked_graph,
    save_mask,
    top_connections,
)
from .fusion import load_fusion, save_fusion
from .persist import read_run_record, write_run_record
from .pipeline import (
    evaluate_fusion,
    metrics,
    predict,
    run_ablations,
    train_fusion,
    write_metrics_csv,
)
from .report import emit_connectivity_data


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); the contract wants 1
        raise CliUsageError(message)


def _load_config(path: str | None, seed=None, k=None, folds=None) -> PipelineConfig:
    cfg = PipelineConfig.from_json(path) if path else PipelineConfig()
    if seed is not None:
        cfg.seed = int(seed)
    if k is not None:
        cfg.knn_k = int(k)
    if folds is not None:
        cfg.folds = int(folds)
    return cfg.validate()


def _graphs(dataset, modality, cfg: PipelineConfig):
    return [build_graph(s.matrix(modality), cfg.knn_k, two_hop=cfg.ldp_two_hop) for s in dataset]


# ---------------------------------------------------------------------------
# handlers (pure functions of an options dict; used by main and by reruns)
# ---------------------------------------------------------------------------


def run_synth(opts: dict) -> list:
    spec = SyntheticSpec.from_json(opts["spec"])
    out_dir = Path(opts["out"])
    subjects = synthesize_dataset(spec)
    manifest = save_dataset(subjects, out_dir)
    record = write_run_record(
        out_dir / "run_record.json", "synth", opts, spec.seed, [opts["spec"]], [manifest]
    )
    return [manifest, record]


def run_train_backbone(opts: dict) -> list:
    cfg = _load_config(opts.get("config"), seed=opts.get("seed"), k=opts.get("k"))
    dataset = load_dataset(opts["manifest"])
    modality = opts["modality"]
    params, _, _ = train_backbone(
        dataset, modality, cfg.backbone, k=cfg.knn_k, seed=cfg.seed, two_hop=cfg.ldp_two_hop
    )
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_backbone(out, params, {"modality": modality, "seed": cfg.seed, "k": cfg.knn_k})
    inputs = [opts["manifest"]] + ([opts["config"]] if opts.get("config") else [])
    record = write_run_record(
        str(out) + ".run.json", "train-backbone", opts, cfg.seed, inputs, [out]
    )
    return [out, record]


def run_explain(opts: dict) -> list:
    cfg = _load_config(opts.get("config"), seed=opts.get("seed"), k=opts.get("k"))
    dataset = load_dataset(opts["manifest"])
    modality = opts["modality"]
    params = load_backbone(opts["backbone"]).freeze()
    graphs = _graphs(dataset, modality, cfg)
    mask = learn_global_mask(
        graphs, params, cfg.mask, stage_rng(cfg.seed, "mask", modality), modality
    )
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mask(
        out,
        mask,
        {
            "seed": cfg.seed,
            "lambda1": cfg.mask.sparsity_weight,
            "lambda2": cfg.mask.entropy_weight,
            "steps": cfg.mask.steps,
        },
    )
    inputs = [opts["manifest"], opts["backbone"]] + (
        [opts["config"]] if opts.get("config") else []
    )
    record = write_run_record(str(out) + ".run.json", "explain", opts, cfg.seed, inputs, [out])
    return [out, record]


def run_finetune(opts: dict) -> list:
    cfg = _load_config(opts.get("config"), seed=opts.get("seed"), k=opts.get("k"))
    dataset = load_dataset(opts["manifest"])
    modality = opts["modality"]
    params = load_backbone(opts["backbone"])
    mask, _ = load_mask(opts["mask"])
    graphs = _graphs(dataset, modality, cfg)
    labels = [s.label for s in dataset]
    tuned, _, _ = finetune_backbone(
        graphs, labels, mask, params, cfg.finetune, cfg.backbone,
        stage_rng(cfg.seed, "finetune", modality),
    )
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_backbone(out, tuned, {"modality": modality, "seed": cfg.seed, "finetuned": True})
    inputs = [opts["manifest"], opts["backbone"], opts["mask"]] + (
        [opts["config"]] if opts.get("config") else []
    )
    record = write_run_record(str(out) + ".run.json", "finetune", opts, cfg.seed, inputs, [out])
    return [out, record]


def _fusion_inputs(opts: dict, cfg: PipelineConfig):
    dataset = load_dataset(opts["manifest"])
    labels = np.array([s.label for s in dataset], dtype=np.int64)
    embeddings = {}
    backbones = []
    for modality, bb_key, mask_key in (
        ("sc", "sc_backbone", "sc_mask"),
        ("fnc", "fnc_backbone", "fnc_mask"),
    ):
        params = load_backbone(opts[bb_key]).freeze()
        mask, _ = load_mask(opts[mask_key])
        graphs = [masked_graph(g, mask) for g in _graphs(dataset, modality, cfg)]
        emb, _ = embed_dataset(graphs, params)
        embeddings[modality] = emb
        backbones.append(params)
    return dataset, labels, embeddings, backbones


def run_train_fusion(opts: dict) -> list:
    cfg = _load_config(opts.get("config"), seed=opts.get("seed"), k=opts.get("k"))
    variant = opts.get("variant", "connex").replace("-", "_")
    unified = bool(opts.get("unified", True))
    _, labels, embeddings, backbones = _fusion_inputs(opts, cfg)
    params, _ = train_fusion(
        embeddings["sc"],
        embeddings["fnc"],
        labels,
        cfg.fusion,
        cfg.loss_weights,
        stage_rng(cfg.seed, "fusion", variant),
        variant=variant,
        unified=unified,
        backbones=backbones,
    )
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_fusion(out, params, variant, {"seed": cfg.seed})
    inputs = [
        opts["manifest"], opts["sc_backbone"], opts["fnc_backbone"],
        opts["sc_mask"], opts["fnc_mask"],
    ] + ([opts["config"]] if opts.get("config") else [])
    record = write_run_record(str(out) + ".run.json", "train-fusion", opts, cfg.seed, inputs, [out])
    return [out, record]


def run_evaluate(opts: dict) -> list:
    cfg = _load_config(opts.get("config"), seed=opts.get("seed"), k=opts.get("k"))
    dataset, labels, embeddings, _ = _fusion_inputs(opts, cfg)
    fusion_params, variant, _ = load_fusion(opts["fusion"])
    preds = evaluate_fusion(
        fusion_params, variant, embeddings["sc"], embeddings["fnc"], labels, cfg.fusion
    )
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"n_subjects": int(len(labels)), "variant": variant}
    acc, prec, f1 = metrics(preds, labels)
    summary["fused"] = {"accuracy": acc, "precision": prec, "f1": f1}
    for modality, bb_key in (("sc", "sc_backbone"), ("fnc", "fnc_backbone")):
        params = load_backbone(opts[bb_key]).freeze()
        mask, _ = load_mask(opts[f"{modality}_mask"])
        graphs = [masked_graph(g, mask) for g in _graphs(dataset, modality, cfg)]
        _, logits = embed_dataset(graphs, params)
        acc, prec, f1 = metrics(predict(logits), labels)
        summary[modality] = {"accuracy": acc, "precision": prec, "f1": f1}
    metrics_path = out_dir / "metrics.json"
    metrics_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    preds_path = out_dir / "predictions.csv"
    lines = ["id,label,prediction"]
    for subject, pred in zip(dataset, preds):
        lines.append(f"{subject.id},{subject.label},{int(pred)}")
    preds_path.write_text("\n".join(lines) + "\n")
    inputs = [
        opts["manifest"], opts["sc_backbone"], opts["fnc_backbone"],
        opts["sc_mask"], opts["fnc_mask"], opts["fusion"],
    ] + ([opts["config"]] if opts.get("config") else [])
    record = write_run_record(
        out_dir / "run_record.json", "evaluate", opts, cfg.seed, inputs, [metrics_path, preds_path]
    )
    return [metrics_path, preds_path, record]


def run_ablate(opts: dict) -> list:
    with open(opts["config"]) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{opts['config']}: invalid JSON ({exc})") from exc
    unknown = set(payload) - {"dataset", "pipeline"}
    if unknown:
        raise ConfigError(f"ablate config: unknown keys {sorted(unknown)}")
    if "dataset" not in payload:
        raise ConfigError("ablate config: missing 'dataset'")
    cfg = PipelineConfig.from_dict(payload.get("pipeline", {}))
    if opts.get("seed") is not None:
        cfg.seed = int(opts["seed"])
    dataset_spec = payload["dataset"]
    if "manifest" in dataset_spec:
        manifest_path = Path(opts["config"]).parent / dataset_spec["manifest"]
        dataset = load_dataset(manifest_path)
        inputs = [opts["config"], manifest_path]
    elif "synthetic" in dataset_spec:
        dataset = synthesize_dataset(SyntheticSpec.from_dict(dataset_spec["synthetic"]))
        inputs = [opts["config"]]
    else:
        raise ConfigError("ablate config: dataset needs 'manifest' or 'synthetic'")
    rows, _ = run_ablations(dataset, cfg)
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(rows, out)
    record = write_run_record(str(out) + ".run.json", "ablate", opts, cfg.seed, inputs, [out])
    return [out, record]


def run_report(opts: dict) -> list:
    dataset = load_dataset(opts["manifest"])
    mask, _ = load_mask(opts["mask"])
    group = opts["group"]
    top = int(opts.get("top", 100))
    report = top_connections(dataset, mask, group, n=top)
    if opts.get("labels"):
        labels = json.loads(Path(opts["labels"]).read_text())
    else:
        labels = {i: "all" for i in range(mask.num_nodes)}
    out_dir = Path(opts["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"top_{group}_{mask.modality}"
    csv_path = out_dir / f"{stem}.csv"
    dot_path = out_dir / f"{stem}.dot"
    emit_connectivity_data(report, labels, csv_path, dot_path)
    inputs = [opts["manifest"], opts["mask"]] + ([opts["labels"]] if opts.get("labels") else [])
    record = write_run_record(
        out_dir / "run_record.json", "report", opts, 0, inputs, [csv_path, dot_path]
    )
    return [csv_path, dot_path, record]


HANDLERS = {
    "synth": run_synth,
    "train-backbone": run_train_backbone,
    "explain": run_explain,
    "finetune": run_finetune,
    "train-fusion": run_train_fusion,
    "evaluate": run_evaluate,
    "ablate": run_ablate,
    "report": run_report,
}


def rerun_from_record(record_path) -> list:
    """Re-execute a stage from its reproducibility record alone."""
    record = read_run_record(record_path)
    subcommand = record["subcommand"]
    if subcommand not in HANDLERS:
        raise DataError(f"run record: unknown subcommand {subcommand!r}")
    return HANDLERS[subcommand](record["options"])


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="connex", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="pipeline config JSON")
            p.add_argument("--seed", type=int, help="override the config seed")
            p.add_argument("--k", type=int, help="override the k-NN sparsity")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", required=True, help="synthetic spec JSON")
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train-backbone", help="train one modality backbone")
    p.add_argument("--manifest", required=True)
    p.add_argument("--modality", required=True, choices=["sc", "fnc"])
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    common(p)

    p = sub.add_parser("explain", help="learn the shared edge mask")
    p.add_argument("--manifest", required=True)
    p.add_argument("--modality", required=True, choices=["sc", "fnc"])
    p.add_argument("--backbone", required=True, help="frozen backbone checkpoint")
    p.add_argument("--out", required=True, help="mask CSV path")
    common(p)

    p = sub.add_parser("finetune", help="fine-tune a backbone on masked graphs")
    p.add_argument("--manifest", required=True)
    p.add_argument("--modality", required=True, choices=["sc", "fnc"])
    p.add_argument("--backbone", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    common(p)

    p = sub.add_parser("train-fusion", help="train the fusion network")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sc-backbone", required=True, dest="sc_backbone")
    p.add_argument("--fnc-backbone", required=True, dest="fnc_backbone")
    p.add_argument("--sc-mask", required=True, dest="sc_mask")
    p.add_argument("--fnc-mask", required=True, dest="fnc_mask")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="connex", choices=["connex", "concat", "cross-att"])
    p.add_argument("--no-unified", action="store_true", help="drop the unified branch")
    common(p)

    p = sub.add_parser("evaluate", help="evaluate trained artifacts on a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--sc-backbone", required=True, dest="sc_backbone")
    p.add_argument("--fnc-backbone", required=True, dest="fnc_backbone")
    p.add_argument("--sc-mask", required=True, dest="sc_mask")
    p.add_argument("--fnc-mask", required=True, dest="fnc_mask")
    p.add_argument("--fusion", required=True)
    p.add_argument("--out", required=True, help="output directory")
    common(p)

    p = sub.add_parser("ablate", help="run the cross-validated ablation matrix")
    p.add_argument("--config", required=True, help="JSON with 'dataset' and 'pipeline'")
    p.add_argument("--out", required=True, help="results CSV path")
    p.add_argument("--seed", type=int, help="override the config seed")

    p = sub.add_parser("report", help="export top group-level connections")
    p.add_argument("--mask", required=True)
    p.add_argument("--manifest", required=True, help="dataset manifest")
    p.add_argument("--group", required=True, choices=["HC", "SZ"])
    p.add_argument("--top", type=int, default=100)
    p.add_argument("--labels", help="JSON list of per-node network-group names")
    p.add_argument("--out", required=True, help="output directory")
    return parser


_PATH_KEYS = {
    "spec", "out", "manifest", "backbone", "mask", "config", "sc_backbone",
    "fnc_backbone", "sc_mask", "fnc_mask", "fusion", "labels",
}


def _namespace_to_options(args: argparse.Namespace) -> dict:
    opts = {}
    for key, value in vars(args).items():
        if key == "subcommand" or value is None:
            continue
        if key == "no_unified":
            opts["unified"] = not value
        elif key in _PATH_KEYS:
            opts[key] = str(Path(value).resolve())
        else:
            opts[key] = value
    return opts


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        options = _namespace_to_options(args)
        outputs = HANDLERS[args.subcommand](options)
        for path in outputs:
            print(path)
        return 0
    except CliUsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, ShapeError, ContractError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
