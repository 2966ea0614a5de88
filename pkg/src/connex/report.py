"""Plot-ready exports of group-level connection rankings.

``emit_connectivity_data`` tags every reported edge with the brain-network
group it lives in (both endpoints in the same group) or "inter", and writes
a CSV plus a Graphviz DOT file whose edge attributes carry the normalized
weight; downstream plotting maps the weight to line width.
"""

from __future__ import annotations

from pathlib import Path

from .errors import DataError
from .explain import ExplanationReport

INTER_GROUP = "inter"


def edge_tag(i: int, j: int, labels: dict) -> str:
    if i not in labels or j not in labels:
        missing = i if i not in labels else j
        raise DataError(f"node {missing} has no network group label")
    return labels[i] if labels[i] == labels[j] else INTER_GROUP


def _normalize_labels(network_labels) -> dict:
    if isinstance(network_labels, dict):
        return {int(k): str(v) for k, v in network_labels.items()}
    return {i: str(v) for i, v in enumerate(network_labels)}


def write_report_csv(report: ExplanationReport, path, labels: dict | None = None) -> None:
    lines = ["node_i,node_j,normalized_weight" + (",group" if labels is not None else "")]
    for i, j, weight in report.edges:
        row = f"{i},{j},{weight:.6f}"
        if labels is not None:
            row += f",{edge_tag(i, j, labels)}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def write_report_dot(report: ExplanationReport, path, labels: dict) -> None:
    nodes = sorted({n for i, j, _ in report.edges for n in (i, j)})
    lines = [f'graph "{report.group}_connections" {{', "  node [shape=circle];"]
    for n in nodes:
        lines.append(f'  {n} [group="{labels[n]}"];')
    for i, j, weight in report.edges:
        tag = edge_tag(i, j, labels)
        penwidth = 0.5 + 3.0 * weight
        lines.append(
            f'  {i} -- {j} [weight="{weight:.6f}", penwidth={penwidth:.3f}, group="{tag}"];'
        )
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n")


def emit_connectivity_data(
    report: ExplanationReport, network_labels, csv_path, dot_path
) -> None:
    """Write the CSV + DOT pair for one group report."""
    labels = _normalize_labels(network_labels)
    for i, j, _ in report.edges:
        edge_tag(i, j, labels)  # validate all labels up front
    write_report_csv(report, csv_path, labels)
    write_report_dot(report, dot_path, labels)
