"""Command-line surface.

Verbs: gen-data, train, eval, agent, grad-check, verify-contraction, sweep.
Config precedence: flags override --config file values override built-in
defaults. Exit codes: 0 success, 1 runtime failure, 2 configuration error.
Reports go to stdout, diagnostics to stderr; every file output is
byte-reproducible under a fixed --seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .data import (OpenWorldDataset, load_dataset, make_blobs,
                   read_manifest, save_dataset_csv)
from .graph import laplacian, load_edge_list
from .numerics import make_rng
from .prox import IstaProblem, ProxKind
from .train import (ModelSpec, TrainConfig, build_graphs, evaluate,
                    grad_check, make_grad_check_problem, run_protocol1,
                    run_protocol2)
from .unroll import init_from_ista, rescale_linear_part, verify_contraction

DEFAULTS = {
    "lr": 0.001,
    "epochs": 200,
    "layers": 3,
    "k": 10,
    "lambda1": 1.0,
    "lambda2": 1.0,
    "alpha": 0.5,
    "beta": 0.1,
    "prox": "soft-threshold",
    "fusion": "weighted-average",
    "optimizer": "adam",
    "graph": "knn",
    "seed": 0,
    "discard_frac": 0.1,
}


class ConfigError(Exception):
    pass


def _merge_config(args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags."""
    merged = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"config: cannot read {config_path}: {exc}") from exc
        for key, value in loaded.items():
            if key not in DEFAULTS:
                raise ConfigError(f"config: unknown key {key!r} in {config_path}")
            merged[key] = value
    for key in DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            merged[key] = value
    return merged


def _spec_and_cfg(opts: dict) -> tuple[ModelSpec, TrainConfig]:
    try:
        spec = ModelSpec(t_layers=int(opts["layers"]), prox=opts["prox"],
                         alpha=float(opts["alpha"]), beta=float(opts["beta"]),
                         graph=opts["graph"], knn_k=int(opts["k"]),
                         fusion=opts["fusion"])
        spec.prox_kind()
        spec.fusion_kind()
        cfg = TrainConfig(epochs=int(opts["epochs"]), lr=float(opts["lr"]),
                          lam1=float(opts["lambda1"]), lam2=float(opts["lambda2"]),
                          seed=int(opts["seed"]), optimizer=opts["optimizer"],
                          discard_frac=float(opts["discard_frac"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return spec, cfg


def _load_split_dataset(manifest_path) -> OpenWorldDataset:
    try:
        return load_dataset(manifest_path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"manifest {manifest_path}: {exc}") from exc


def _dataset_graph_opts(manifest_path, opts, k_flag):
    """Manifest graph block fills in k / edge list unless flags override."""
    try:
        doc = read_manifest(manifest_path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"manifest {manifest_path}: {exc}") from exc
    gdoc = doc.get("graph") or {}
    if "knn_k" in gdoc and k_flag is None:
        opts["k"] = int(gdoc["knn_k"])
    return gdoc


def _attach_edge_list_graph(dataset, gdoc, manifest_path):
    path = gdoc.get("edge_list_path")
    if not path:
        return dataset
    edge_path = Path(path)
    if not edge_path.is_absolute():
        edge_path = Path(manifest_path).parent / edge_path
    s = load_edge_list(edge_path, dataset.n_samples)
    op = laplacian(s)
    dataset.graphs = [op for _ in dataset.modalities]
    return dataset


def _write_trace_csv(path, trace):
    lines = ["epoch,l_k,l_u,l_total,acc_val"]
    for row in trace:
        lines.append(f"{row.epoch},{row.l_k!r},{row.l_u!r},"
                     f"{row.l_total!r},{row.acc_val!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def _metrics_doc(agent, metrics, final_loss=None) -> dict:
    doc = {"accuracy": metrics.accuracy,
           "unknown_recall": metrics.unknown_recall,
           "per_class_recall": {str(c): r for c, r in metrics.per_class_recall.items()},
           **agent.as_dict()}
    if final_loss is not None:
        doc.update({"l_k": final_loss.l_k, "l_u": final_loss.l_u,
                    "l_total": final_loss.l_total})
    return doc


def _print_kv(doc: dict, stream=None):
    stream = stream or sys.stdout
    for key in sorted(doc):
        value = doc[key]
        if isinstance(value, dict):
            for sub in sorted(value):
                print(f"{key}.{sub}={value[sub]!r}", file=stream)
        else:
            print(f"{key}={value!r}", file=stream)


# ---------------------------------------------------------------------------
# Verbs

def cmd_gen_data(args) -> int:
    opts = _merge_config(args)
    rng = make_rng(int(opts["seed"]))
    dataset = make_blobs(n_per_class=args.n, k_known=args.classes,
                         k_unknown=args.unknown, d_feat=args.dim, sep=args.sep,
                         m_modalities=args.modalities,
                         noise_modality=args.noise_modality, rng=rng)
    out = Path(args.out)
    save_dataset_csv(dataset, out, split_seed=int(opts["seed"]),
                     graph={"knn_k": int(opts["k"])})
    print(f"wrote {dataset.n_modalities} modality file(s), "
          f"{dataset.n_samples} samples, {dataset.n_known} known classes "
          f"to {out}")
    return 0


def cmd_train(args) -> int:
    opts = _merge_config(args)
    gdoc = _dataset_graph_opts(args.manifest, opts, args.k)
    spec, cfg = _spec_and_cfg(opts)
    dataset = _load_split_dataset(args.manifest)
    if gdoc.get("edge_list_path") and spec.graph != "none":
        _attach_edge_list_graph(dataset, gdoc, args.manifest)
    protocol = run_protocol1 if dataset.n_modalities == 1 else run_protocol2
    result = protocol(dataset, cfg, spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    graph_meta = {"mode": spec.graph, "k": spec.knn_k}
    ckpt.save_checkpoint(out / "checkpoint.json", result.model, graph_meta)
    _write_trace_csv(out / "trace.csv", result.trace)
    doc = _metrics_doc(result.agent, result.metrics, result.final_loss)
    (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    if result.final_loss.empty_selection:
        print("warning: unknown loss had an empty selection; l_u reported as 0",
              file=sys.stderr)
    _print_kv(doc)
    proto = 1 if dataset.n_modalities == 1 else 2
    print(f"protocol={proto} epochs={cfg.epochs} "
          f"modalities={dataset.n_modalities} out={out}")
    return 0


def _rebuild_for_eval(args, opts):
    dataset = _load_split_dataset(args.manifest)
    model, graph_meta = ckpt.load_checkpoint(args.checkpoint)
    spec = ModelSpec(t_layers=model.t_layers,
                     prox=model.params[0].prox_kind.value,
                     alpha=model.params[0].alpha,
                     graph=graph_meta.get("mode", "none"),
                     knn_k=int(graph_meta.get("k", opts["k"])))
    gdoc = read_manifest(args.manifest).get("graph") or {}
    if gdoc.get("edge_list_path") and spec.graph != "none":
        _attach_edge_list_graph(dataset, gdoc, args.manifest)
    model.graphs = build_graphs(dataset, spec)
    return dataset, model


def cmd_eval(args) -> int:
    opts = _merge_config(args)
    dataset, model = _rebuild_for_eval(args, opts)
    agent, metrics, _ = evaluate(model, dataset)
    doc = _metrics_doc(agent, metrics)
    _print_kv(doc)
    if args.json:
        Path(args.json).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return 0


def cmd_agent(args) -> int:
    opts = _merge_config(args)
    dataset, model = _rebuild_for_eval(args, opts)
    agent, _, _ = evaluate(model, dataset)
    _print_kv(agent.as_dict())
    return 0


def cmd_grad_check(args) -> int:
    opts = _merge_config(args)
    model, x_list, loss_cfg = make_grad_check_problem(
        prox=opts["prox"], use_graph=(opts["graph"] != "none"),
        fusion=opts["fusion"], seed=int(opts["seed"]))
    report = grad_check(model, x_list, loss_cfg, eps=args.eps, tol=args.tol)
    doc = report.as_dict()
    doc["kink_adjacent"] = [list(k) for k in report.kink_adjacent]
    print(json.dumps(doc, indent=1, sort_keys=True))
    print(f"grad-check {'PASS' if report.passed else 'FAIL'} "
          f"max_rel_err={report.max_rel_err:.3e} tol={report.tol:g} "
          f"kinks_excluded={len(report.kink_adjacent)}")
    return 0 if report.passed else 1


def cmd_verify_contraction(args) -> int:
    opts = _merge_config(args)
    seed = int(opts["seed"])
    rng = make_rng(seed)
    if args.checkpoint:
        model, graph_meta = ckpt.load_checkpoint(args.checkpoint)
        if graph_meta.get("mode", "none") != "none" and model.params[0].alpha > 0:
            raise ConfigError(
                "verify-contraction on a graph checkpoint needs --manifest "
                "to rebuild the graph; use the synthetic mode instead")
        report = verify_contraction(model, rng=rng)
    else:
        from .graph import knn_graph
        n, d_feat, k = 24, 6, 4
        x = rng.standard_normal((n, d_feat))
        graph = knn_graph(x, 4) if opts["graph"] != "none" else None
        alpha = float(opts["alpha"]) if graph is not None else 0.0
        problem = IstaProblem(x=x, d=None, alpha=alpha, beta=float(opts["beta"]),
                              graph=graph, prox_kind=ProxKind.from_name(opts["prox"]))
        model = init_from_ista(problem, int(opts["layers"]), rng, k_classes=k)
        model = rescale_linear_part(model, 0, n, args.target_norm)
        x_scaled = x / max(1.0, 4.0 * np.abs(x).max())
        report = verify_contraction(model, rng=make_rng(seed + 1), x=x_scaled)
    doc = report.as_dict()
    print(json.dumps(doc, indent=1, sort_keys=True))
    print(f"verify-contraction {'PASS' if report.passed else 'FAIL'} "
          f"max_ratio={report.max_ratio:.6f} bound={report.analytic_bound:.6f} "
          f"decay_rate={report.decay_rate:.6f} iters={report.fixed_point_iters}")
    return 0 if report.passed else 1


def cmd_sweep(args) -> int:
    opts = _merge_config(args)
    gdoc = _dataset_graph_opts(args.manifest, opts, args.k)
    spec, cfg = _spec_and_cfg(opts)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc
    if not values:
        raise ConfigError("--values: empty grid")
    dataset = _load_split_dataset(args.manifest)
    if gdoc.get("edge_list_path") and spec.graph != "none":
        _attach_edge_list_graph(dataset, gdoc, args.manifest)
    protocol = run_protocol1 if dataset.n_modalities == 1 else run_protocol2
    lines = ["lambda1,lambda2,accuracy"]
    for lam1 in values:
        for lam2 in values:
            run_cfg = TrainConfig(epochs=cfg.epochs, lr=cfg.lr, lam1=lam1,
                                  lam2=lam2, seed=cfg.seed,
                                  optimizer=cfg.optimizer,
                                  discard_frac=cfg.discard_frac)
            result = protocol(dataset, run_cfg, spec)
            lines.append(f"{lam1!r},{lam2!r},{result.metrics.accuracy!r}")
            print(f"lambda1={lam1} lambda2={lam2} "
                  f"accuracy={result.metrics.accuracy:.4f}", file=sys.stderr)
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {len(values) ** 2} sweep rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser

def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=None, help="rng seed (default 0)")
    p.add_argument("--config", type=str, default=None,
                   help="JSON config file; flags override its values")


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--lambda2", type=float, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--prox", choices=["soft-threshold", "row-group", "identity"],
                   default=None)
    p.add_argument("--graph", choices=["none", "knn", "hypergraph"], default=None)
    p.add_argument("--k", type=int, default=None, help="k-NN neighbourhood size")
    p.add_argument("--fusion", choices=["weighted-average", "auto-weight",
                                        "attention", "trusted"], default=None)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default=None)
    p.add_argument("--discard-frac", dest="discard_frac", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="owlearn",
        description="Unrolled proximal networks with open-world rejection")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic open-world dataset")
    p.add_argument("--classes", type=int, required=True, help="known classes")
    p.add_argument("--unknown", type=int, default=1, help="held-out classes")
    p.add_argument("--n", type=int, default=100, help="samples per class")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--sep", type=float, default=8.0)
    p.add_argument("--modalities", type=int, default=1)
    p.add_argument("--noise-modality", action="store_true",
                   help="make the last modality pure label-free noise")
    p.add_argument("--k", type=int, default=None,
                   help="k recorded in the manifest graph block")
    p.add_argument("--out", type=str, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the matching protocol end to end")
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--out", type=str, required=True)
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recompute metrics from a checkpoint")
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--json", type=str, default=None, help="also write a JSON report")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("agent", help="print the rejection threshold for a checkpoint")
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--checkpoint", type=str, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_agent)

    p = sub.add_parser("grad-check", help="finite-difference audit of the gradients")
    p.add_argument("--prox", choices=["soft-threshold", "row-group"], default=None)
    p.add_argument("--graph", choices=["none", "knn"], default=None)
    p.add_argument("--fusion", choices=["weighted-average", "auto-weight",
                                        "attention", "trusted"], default=None)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    _add_common(p)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("verify-contraction",
                       help="empirical audit of the fixed-point contraction")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--target-norm", type=float, default=0.9,
                   help="rescale the linear part to this spectral norm")
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--prox", choices=["soft-threshold", "row-group"], default=None)
    p.add_argument("--graph", choices=["none", "knn"], default=None)
    _add_common(p)
    p.set_defaults(func=cmd_verify_contraction)

    p = sub.add_parser("sweep", help="grid of (lambda1, lambda2) -> accuracy")
    p.add_argument("--manifest", type=str, required=True)
    p.add_argument("--values", type=str, default="0.001,0.01,0.1,1,10,100")
    p.add_argument("--out", type=str, required=True)
    _add_model_flags(p)
    _add_common(p)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
