"""Connectome datasets: manifest IO, k-NN graph formulation, LDP node
features, and a synthetic two-modality generator with planted class signal.

Matrices are plain-text CSV (M rows of M comma-separated reals, no header)
written with 17 significant digits so float64 values round-trip exactly.
A dataset manifest is JSON: ``{"num_nodes": M, "subjects": [{"id", "sc_path",
"fnc_path", "label"}, ...]}`` with paths relative to the manifest location.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import stage_rng
from .errors import ConfigError, DataError

SYMMETRY_TOL = 1e-9
MODALITIES = ("sc", "fnc")


@dataclass
class Subject:
    """One participant: two M x M connectivity matrices and a binary label."""

    id: str
    sc: np.ndarray
    fnc: np.ndarray
    label: int

    def matrix(self, modality: str) -> np.ndarray:
        if modality not in MODALITIES:
            raise ConfigError(f"unknown modality {modality!r}; expected one of {MODALITIES}")
        return self.sc if modality == "sc" else self.fnc


@dataclass
class ConnectomeGraph:
    """Sparsified weighted graph plus local-degree-profile node features.

    ``edges`` holds ordered pairs (i, j): node i aggregates messages from
    neighbor j. The edge set is closed under reversal (symmetric union).
    """

    num_nodes: int
    edges: np.ndarray  # (E, 2) int64
    edge_weights: np.ndarray  # (E,) float64, the retained E[i, j]
    node_features: np.ndarray  # (M, 5) float64


# ---------------------------------------------------------------------------
# matrix and manifest IO
# ---------------------------------------------------------------------------


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    lines = [",".join("%.17g" % v for v in row) for row in np.asarray(matrix, dtype=np.float64)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix_csv(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"matrix file not found: {path}")
    rows = []
    width = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        cells = line.split(",")
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise DataError(f"{path}: row {lineno} has {len(cells)} columns, expected {width}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise DataError(f"{path}: row {lineno} is not numeric ({exc})") from exc
    if not rows:
        raise DataError(f"{path}: empty matrix file")
    return np.array(rows, dtype=np.float64)


def _validate_matrix(matrix: np.ndarray, subject_id: str, modality: str, num_nodes=None):
    m = matrix.shape[0]
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1]:
        raise DataError(f"subject {subject_id} ({modality}): matrix is not square {matrix.shape}")
    if num_nodes is not None and m != num_nodes:
        raise DataError(f"subject {subject_id} ({modality}): {m} nodes, expected {num_nodes}")
    if not np.all(np.isfinite(matrix)):
        raise DataError(f"subject {subject_id} ({modality}): non-finite entries")
    if np.max(np.abs(matrix - matrix.T)) > SYMMETRY_TOL:
        raise DataError(f"subject {subject_id} ({modality}): matrix is not symmetric")
    if np.max(np.abs(np.diag(matrix))) > SYMMETRY_TOL:
        raise DataError(f"subject {subject_id} ({modality}): diagonal must be zero")


def load_dataset(manifest_path) -> list[Subject]:
    """Load and validate all subjects listed in a JSON manifest."""
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if "subjects" not in manifest or "num_nodes" not in manifest:
        raise DataError(f"{manifest_path}: manifest needs 'subjects' and 'num_nodes'")
    num_nodes = int(manifest["num_nodes"])
    base = manifest_path.parent
    subjects = []
    for entry in manifest["subjects"]:
        missing = {"id", "sc_path", "fnc_path", "label"} - set(entry)
        if missing:
            raise DataError(f"{manifest_path}: subject entry missing keys {sorted(missing)}")
        sid = str(entry["id"])
        label = entry["label"]
        if label not in (0, 1):
            raise DataError(f"subject {sid}: label {label!r} outside {{0, 1}}")
        sc = read_matrix_csv(base / entry["sc_path"])
        fnc = read_matrix_csv(base / entry["fnc_path"])
        _validate_matrix(sc, sid, "sc", num_nodes)
        _validate_matrix(fnc, sid, "fnc", num_nodes)
        subjects.append(Subject(id=sid, sc=sc, fnc=fnc, label=int(label)))
    return subjects


def save_dataset(subjects: list[Subject], out_dir) -> Path:
    """Write matrices and a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not subjects:
        raise DataError("save_dataset: empty subject list")
    num_nodes = subjects[0].sc.shape[0]
    entries = []
    for subject in subjects:
        sc_name = f"{subject.id}_sc.csv"
        fnc_name = f"{subject.id}_fnc.csv"
        write_matrix_csv(out_dir / sc_name, subject.sc)
        write_matrix_csv(out_dir / fnc_name, subject.fnc)
        entries.append(
            {"id": subject.id, "sc_path": sc_name, "fnc_path": fnc_name, "label": subject.label}
        )
    manifest = {"num_nodes": int(num_nodes), "subjects": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# graph formulation
# ---------------------------------------------------------------------------


def knn_sparsify(matrix: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Keep each node's k strongest neighbors, then symmetrize by union.

    Per node i the k largest off-diagonal weights E[i, j] win (ties broken
    toward the lower node index); the returned edge list contains both
    (i, j) and (j, i) for every selected pair, with weight E[i, j].
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    m = matrix.shape[0]
    if not 1 <= k < m:
        raise ConfigError(f"knn_sparsify: need 1 <= k < num_nodes, got k={k}, M={m}")
    pairs = set()
    cols = np.arange(m)
    for i in range(m):
        row = matrix[i].copy()
        row[i] = -np.inf  # no self-loops
        # lexsort: primary key descending weight, secondary ascending index
        order = np.lexsort((cols, -row))
        for j in order[:k]:
            pairs.add((i, int(j)))
            pairs.add((int(j), i))
    edges = np.array(sorted(pairs), dtype=np.int64)
    weights = matrix[edges[:, 0], edges[:, 1]]
    return edges, weights


def ldp_features(num_nodes: int, edges: np.ndarray, two_hop: bool = False) -> np.ndarray:
    """Local degree profile: [deg, mean, std, min, max] of neighbor degrees.

    Neighbor degrees are collected over the one-hop neighborhood by default
    (one entry per distinct neighbor). ``two_hop=True`` widens the collected
    set to all distinct nodes within two hops. Std is the population form;
    isolated nodes get an all-zero profile.
    """
    neighbors = [set() for _ in range(num_nodes)]
    for i, j in np.asarray(edges, dtype=np.int64):
        neighbors[int(i)].add(int(j))
    degree = np.array([len(n) for n in neighbors], dtype=np.float64)
    out = np.zeros((num_nodes, 5), dtype=np.float64)
    for q in range(num_nodes):
        pool = set(neighbors[q])
        if two_hop:
            for n in list(pool):
                pool.update(neighbors[n])
            pool.discard(q)
        if not pool:
            continue
        local = degree[sorted(pool)]
        out[q] = [degree[q], local.mean(), local.std(), local.min(), local.max()]
    return out


def build_graph(matrix: np.ndarray, k: int, two_hop: bool = False) -> ConnectomeGraph:
    edges, weights = knn_sparsify(matrix, k)
    features = ldp_features(matrix.shape[0], edges, two_hop=two_hop)
    return ConnectomeGraph(
        num_nodes=matrix.shape[0], edges=edges, edge_weights=weights, node_features=features
    )


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    """Generator settings for a two-modality dataset with planted edges.

    Subjects with label 1 get ``effect_size`` added onto the planted edge
    weights of each modality; everything else is half-normal noise. The two
    planted sets normally differ (partial overlap) so that fusing modalities
    has headroom over either alone.
    """

    num_subjects: int = 120
    num_nodes: int = 20
    planted_edges_sc: list = field(default_factory=list)  # [[i, j], ...]
    planted_edges_fnc: list = field(default_factory=list)
    effect_size: float = 0.3
    noise_std: float = 0.1
    class_balance: float = 0.5
    seed: int = 0

    def validate(self):
        if self.num_subjects < 2 or self.num_nodes < 2:
            raise ConfigError("synthetic: need >= 2 subjects and >= 2 nodes")
        if not 0.0 < self.class_balance < 1.0:
            raise ConfigError("synthetic: class_balance must be in (0, 1)")
        if self.effect_size < 0 or self.noise_std <= 0:
            raise ConfigError("synthetic: effect_size < 0 or noise_std <= 0")
        for name, planted in (
            ("planted_edges_sc", self.planted_edges_sc),
            ("planted_edges_fnc", self.planted_edges_fnc),
        ):
            for i, j in planted:
                if i == j:
                    raise ConfigError(f"synthetic: {name} contains diagonal pair ({i}, {j})")
                if not (0 <= i < self.num_nodes and 0 <= j < self.num_nodes):
                    raise ConfigError(f"synthetic: {name} pair ({i}, {j}) out of range")
        return self

    def to_dict(self) -> dict:
        return {
            "num_subjects": self.num_subjects,
            "num_nodes": self.num_nodes,
            "planted_edges_sc": [list(map(int, p)) for p in self.planted_edges_sc],
            "planted_edges_fnc": [list(map(int, p)) for p in self.planted_edges_fnc],
            "effect_size": self.effect_size,
            "noise_std": self.noise_std,
            "class_balance": self.class_balance,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "SyntheticSpec":
        known = set(cls().to_dict())
        unknown = set(payload) - known
        if unknown:
            raise ConfigError(f"synthetic spec: unknown keys {sorted(unknown)}")
        spec = cls(**payload)
        spec.planted_edges_sc = [tuple(p) for p in spec.planted_edges_sc]
        spec.planted_edges_fnc = [tuple(p) for p in spec.planted_edges_fnc]
        return spec.validate()

    @classmethod
    def from_json(cls, path) -> "SyntheticSpec":
        try:
            payload = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(payload)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def random_planted_spec(
    num_subjects: int = 120,
    num_nodes: int = 20,
    edges_per_modality: int = 10,
    overlap: int = 3,
    effect_size: float = 0.3,
    noise_std: float = 0.1,
    class_balance: float = 0.5,
    seed: int = 0,
) -> SyntheticSpec:
    """Draw two planted edge sets sharing ``overlap`` pairs."""
    if overlap > edges_per_modality:
        raise ConfigError("random_planted_spec: overlap exceeds edges_per_modality")
    rng = stage_rng(seed, "plant-edges")
    all_pairs = [(i, j) for i in range(num_nodes) for j in range(i + 1, num_nodes)]
    needed = 2 * edges_per_modality - overlap
    if needed > len(all_pairs):
        raise ConfigError("random_planted_spec: not enough node pairs")
    chosen = rng.choice(len(all_pairs), size=needed, replace=False)
    pool = [all_pairs[int(c)] for c in chosen]
    shared = pool[:overlap]
    sc_only = pool[overlap : edges_per_modality]
    fnc_only = pool[edges_per_modality :]
    return SyntheticSpec(
        num_subjects=num_subjects,
        num_nodes=num_nodes,
        planted_edges_sc=sorted(shared + sc_only),
        planted_edges_fnc=sorted(shared + fnc_only),
        effect_size=effect_size,
        noise_std=noise_std,
        class_balance=class_balance,
        seed=seed,
    ).validate()


def synthesize_dataset(spec: SyntheticSpec) -> list[Subject]:
    """Deterministically generate subjects according to ``spec``."""
    spec.validate()
    rng = stage_rng(spec.seed, "synthesize")
    m = spec.num_nodes
    n_pos = int(round(spec.num_subjects * spec.class_balance))
    n_pos = min(max(n_pos, 1), spec.num_subjects - 1)
    iu = np.triu_indices(m, k=1)
    subjects = []
    for idx in range(spec.num_subjects):
        label = 1 if idx < n_pos else 0
        matrices = {}
        for modality, planted in (
            ("sc", spec.planted_edges_sc),
            ("fnc", spec.planted_edges_fnc),
        ):
            mat = np.zeros((m, m), dtype=np.float64)
            mat[iu] = np.abs(rng.normal(0.0, spec.noise_std, size=iu[0].size))
            if label == 1:
                for i, j in planted:
                    lo, hi = min(i, j), max(i, j)
                    mat[lo, hi] += spec.effect_size
            mat = mat + mat.T
            matrices[modality] = mat
        subjects.append(
            Subject(id=f"subj{idx:04d}", sc=matrices["sc"], fnc=matrices["fnc"], label=label)
        )
    return subjects
