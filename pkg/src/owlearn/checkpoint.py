"""Model checkpoint serialization.

A checkpoint is a single self-describing JSON document:

    {
      "format": "owlearn.checkpoint", "version": 1,
      "seed": <int>,                      rng seed the run was started with
      "t_layers": <int>,
      "alpha": <float>,                   damping factor
      "prox_kind": "soft-threshold" | "row-group" | "identity",
      "fusion": {"kind": ..., "weights": [...]|null,
                 "logits": [...]|null, "query": [...]|null},
      "modalities": [{"n_classes": K, "n_features": D,
                      "f": [[...]], "w": [[...]], "u": [[...]],
                      "theta": [...]}, ...],
      "graph": {"mode": "none"|"knn"|"hypergraph", "k": <int>}
    }

Matrices are nested lists of float64 values (exact round-trip via repr).
Graph operators themselves are not stored; they are rebuilt
deterministically from the dataset named by the experiment manifest.
The layout is stable: readers must accept any document with version 1.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .fusion import FusionKind, FusionParams
from .prox import ProxKind
from .unroll import LayerParams, UnrolledModel

FORMAT = "owlearn.checkpoint"
VERSION = 1


def _arr(a):
    return None if a is None else np.asarray(a, dtype=np.float64).tolist()


def model_to_dict(model: UnrolledModel, graph_meta=None) -> dict:
    return {
        "format": FORMAT,
        "version": VERSION,
        "seed": int(model.seed),
        "t_layers": int(model.t_layers),
        "alpha": float(model.params[0].alpha),
        "prox_kind": model.params[0].prox_kind.value,
        "fusion": {
            "kind": model.fusion.kind.value,
            "weights": _arr(model.fusion.weights),
            "logits": _arr(model.fusion.logits),
            "query": _arr(model.fusion.query),
        },
        "modalities": [
            {
                "n_classes": p.n_classes,
                "n_features": p.n_features,
                "f": p.f.tolist(),
                "w": p.w.tolist(),
                "u": p.u.tolist(),
                "theta": p.theta.tolist(),
            }
            for p in model.params
        ],
        "graph": graph_meta if graph_meta is not None else {"mode": "none", "k": 0},
    }


def save_checkpoint(path, model: UnrolledModel, graph_meta=None) -> None:
    doc = model_to_dict(model, graph_meta)
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def model_from_dict(doc: dict) -> tuple[UnrolledModel, dict]:
    if doc.get("format") != FORMAT:
        raise ValueError(f"not a checkpoint (format={doc.get('format')!r})")
    if doc.get("version") != VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')!r}")
    prox = ProxKind.from_name(doc["prox_kind"])
    alpha = float(doc["alpha"])
    params = [
        LayerParams(
            f=np.asarray(m["f"], dtype=np.float64),
            w=np.asarray(m["w"], dtype=np.float64),
            u=np.asarray(m["u"], dtype=np.float64),
            theta=np.asarray(m["theta"], dtype=np.float64),
            alpha=alpha,
            prox_kind=prox,
        )
        for m in doc["modalities"]
    ]
    fdoc = doc["fusion"]
    fusion = FusionParams(
        kind=FusionKind.from_name(fdoc["kind"]),
        weights=None if fdoc.get("weights") is None else np.asarray(fdoc["weights"]),
        logits=None if fdoc.get("logits") is None else np.asarray(fdoc["logits"]),
        query=None if fdoc.get("query") is None else np.asarray(fdoc["query"]),
    )
    model = UnrolledModel(t_layers=int(doc["t_layers"]), params=params,
                          graphs=[None] * len(params), fusion=fusion,
                          seed=int(doc["seed"]))
    return model, doc.get("graph") or {"mode": "none", "k": 0}


def load_checkpoint(path) -> tuple[UnrolledModel, dict]:
    """Returns the model (graph slots empty) plus the graph rebuild metadata."""
    return model_from_dict(json.loads(Path(path).read_text()))
