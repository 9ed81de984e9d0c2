"""Dataset ingestion, synthetic open-world generation, and split protocol.

An experiment is described by a manifest JSON listing modality CSV paths,
the label file, the known-class set, the split seed and an optional graph
source. Features are min-max normalized to [0, 1] at ingestion.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import GraphOperator
from .numerics import as_matrix, make_rng, minmax_normalize


class CsvFormatError(ValueError):
    """Malformed input file; carries the path and 1-based line number."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


@dataclass
class SplitMasks:
    labeled_train: np.ndarray
    unlabeled: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    def as_tuple(self):
        return (self.labeled_train, self.unlabeled, self.validation, self.test)


@dataclass
class OpenWorldDataset:
    """Features per modality, full ground-truth labels, and partition masks.

    ``labels`` holds every sample's true class; training code may only read
    them where ``masks.labeled_train`` is set (metrics read the rest).
    """

    modalities: list[np.ndarray]
    labels: np.ndarray
    known_classes: tuple[int, ...]
    masks: SplitMasks | None = None
    graphs: list[GraphOperator | None] | None = None

    def __post_init__(self):
        self.modalities = [as_matrix(x, f"modality[{i}]") for i, x in enumerate(self.modalities)]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = self.labels.shape[0]
        for i, x in enumerate(self.modalities):
            if x.shape[0] != n:
                raise ValueError(
                    f"modality {i} has {x.shape[0]} rows but there are {n} labels")
        self.known_classes = tuple(sorted(int(c) for c in self.known_classes))
        if self.masks is not None:
            stack = np.stack(self.masks.as_tuple())
            if stack.shape[1] != n:
                raise ValueError("masks must cover every sample")
            if np.any(stack.sum(axis=0) > 1):
                raise ValueError("partition masks overlap")
            known = np.isin(self.labels, self.known_classes)
            if np.any(self.masks.labeled_train & ~known):
                raise ValueError("labeled_train contains unknown-class samples")

    @property
    def n_samples(self) -> int:
        return self.labels.shape[0]

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def n_known(self) -> int:
        return len(self.known_classes)


def _parse_feature_csv(path) -> np.ndarray:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise CsvFormatError(path, 1, "file is empty")
    n_cols = len(lines[0].split(","))
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != n_cols:
            raise CsvFormatError(
                path, lineno, f"expected {n_cols} columns, found {len(cells)}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            bad = next(c for c in cells if not _is_float(c))
            raise CsvFormatError(path, lineno, f"non-numeric cell {bad.strip()!r}") from None
    if not rows:
        raise CsvFormatError(path, 2, "no data rows after header")
    return np.asarray(rows, dtype=np.float64)


def _is_float(s) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def _parse_labels(path) -> np.ndarray:
    labels = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            labels.append(int(line.strip()))
        except ValueError:
            raise CsvFormatError(path, lineno, f"non-integer label {line.strip()!r}") from None
    return np.asarray(labels, dtype=np.int64)


def load_csv(paths, label_path):
    """Parse modality CSVs (header + real cells) and the aligned label file.

    Returns (list of feature matrices, labels). Row counts must agree across
    all files; mismatches raise CsvFormatError naming both counts.
    """
    mats = [_parse_feature_csv(p) for p in paths]
    labels = _parse_labels(label_path)
    for p, m in zip(paths, mats):
        if m.shape[0] != labels.shape[0]:
            raise CsvFormatError(
                label_path, labels.shape[0],
                f"label count {labels.shape[0]} does not match {m.shape[0]} rows of {p}")
    return mats, labels


def make_blobs(n_per_class: int, k_known: int, k_unknown: int, d_feat: int,
               sep: float, m_modalities: int = 1, noise_modality: bool = False,
               rng: np.random.Generator | None = None) -> OpenWorldDataset:
    """Gaussian blob dataset with held-out unknown classes (pre-split).

    Class centers are rejection-sampled to pairwise distance >= sep (unit
    noise), modalities are independent random linear projections of a shared
    latent, and an optional final modality is pure label-free noise.
    Features are normalized to [0, 1].
    """
    if min(n_per_class, k_known, d_feat, m_modalities) < 1 or k_unknown < 0:
        raise ValueError("make_blobs: counts must be positive")
    if sep <= 0:
        raise ValueError("make_blobs: sep must be > 0")
    if rng is None:
        rng = make_rng(0)
    n_classes = k_known + k_unknown
    centers = []
    scale = max(sep, 1.0)
    attempts = 0
    while len(centers) < n_classes:
        cand = rng.standard_normal(d_feat) * scale
        if all(np.linalg.norm(cand - c) >= sep for c in centers):
            centers.append(cand)
        attempts += 1
        if attempts % 50 == 0:
            scale *= 1.5   # spread out if the draw keeps colliding
    centers = np.stack(centers)
    labels = np.repeat(np.arange(n_classes), n_per_class)
    latent = centers[labels] + rng.standard_normal((labels.size, d_feat))
    modalities = []
    n_informative = m_modalities - 1 if noise_modality else m_modalities
    for _ in range(n_informative):
        proj = rng.standard_normal((d_feat, d_feat)) / np.sqrt(d_feat)
        modalities.append(minmax_normalize(latent @ proj))
    if noise_modality:
        modalities.append(minmax_normalize(rng.standard_normal((labels.size, d_feat))))
    return OpenWorldDataset(modalities=modalities, labels=labels,
                            known_classes=tuple(range(k_known)))


def split_open_world(labels, known_classes, ratios=(0.1, 0.1, 0.8),
                     rng: np.random.Generator | None = None) -> SplitMasks:
    """Stratified open-world split.

    Known classes go labeled/validation/test at the given ratios per class.
    Unknown classes go 80% to test; the rest joins the unlabeled pool with
    labels hidden. All four masks are pairwise disjoint.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    if rng is None:
        rng = make_rng(0)
    labels = np.asarray(labels, dtype=np.int64)
    known = set(int(c) for c in known_classes)
    n = labels.shape[0]
    labeled = np.zeros(n, dtype=bool)
    unlabeled = np.zeros(n, dtype=bool)
    validation = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    for c in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == c)
        perm = idx[rng.permutation(idx.size)]
        if c in known:
            if idx.size < 3:
                raise ValueError(
                    f"known class {c} has only {idx.size} samples; need >= 3")
            n_lab = max(1, int(round(ratios[0] * idx.size)))
            n_val = max(1, int(round(ratios[1] * idx.size)))
            labeled[perm[:n_lab]] = True
            validation[perm[n_lab:n_lab + n_val]] = True
            test[perm[n_lab + n_val:]] = True
        else:
            n_unl = int(round((1.0 - ratios[2]) * idx.size))
            unlabeled[perm[:n_unl]] = True
            test[perm[n_unl:]] = True
    return SplitMasks(labeled_train=labeled, unlabeled=unlabeled,
                      validation=validation, test=test)


def apply_split(dataset: OpenWorldDataset, seed: int,
                ratios=(0.1, 0.1, 0.8)) -> OpenWorldDataset:
    masks = split_open_world(dataset.labels, dataset.known_classes, ratios,
                             make_rng(seed))
    return OpenWorldDataset(modalities=dataset.modalities, labels=dataset.labels,
                            known_classes=dataset.known_classes, masks=masks,
                            graphs=dataset.graphs)


# ---------------------------------------------------------------------------
# Experiment manifest

def write_manifest(path, modality_paths, label_path, known_classes, seed,
                   graph=None):
    doc = {
        "modalities": [str(p) for p in modality_paths],
        "labels": str(label_path),
        "known_classes": [int(c) for c in known_classes],
        "seed": int(seed),
        "graph": graph,
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def read_manifest(path) -> dict:
    doc = json.loads(Path(path).read_text())
    for key in ("modalities", "labels", "known_classes", "seed"):
        if key not in doc:
            raise ValueError(f"manifest {path} is missing required key {key!r}")
    doc.setdefault("graph", None)
    return doc


def load_dataset(manifest_path) -> OpenWorldDataset:
    """Build a normalized, split dataset from a manifest file."""
    doc = read_manifest(manifest_path)
    base = Path(manifest_path).parent
    paths = [base / p if not Path(p).is_absolute() else Path(p)
             for p in doc["modalities"]]
    label_path = Path(doc["labels"])
    if not label_path.is_absolute():
        label_path = base / label_path
    mats, labels = load_csv(paths, label_path)
    mats = [minmax_normalize(m) for m in mats]
    ds = OpenWorldDataset(modalities=mats, labels=labels,
                          known_classes=tuple(doc["known_classes"]))
    return apply_split(ds, int(doc["seed"]))


def save_dataset_csv(dataset: OpenWorldDataset, out_dir, split_seed: int = 0,
                     graph=None) -> dict:
    """Write modality CSVs, the label file and a manifest; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    modality_files = []
    for m, x in enumerate(dataset.modalities):
        name = f"modality_{m}.csv"
        header = ",".join(f"f{j}" for j in range(x.shape[1]))
        lines = [header]
        for row in x:
            lines.append(",".join(repr(float(v)) for v in row))
        (out / name).write_text("\n".join(lines) + "\n")
        modality_files.append(name)
    label_file = "labels.txt"
    (out / label_file).write_text("\n".join(str(int(v)) for v in dataset.labels) + "\n")
    return write_manifest(out / "manifest.json", modality_files, label_file,
                          dataset.known_classes, seed=split_seed, graph=graph)
