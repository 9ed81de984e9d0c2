import numpy as np
import pytest

from owlearn.checkpoint import load_checkpoint, save_checkpoint
from owlearn.fusion import FusionKind, init_fusion
from owlearn.graph import knn_graph
from owlearn.numerics import make_rng
from owlearn.prox import (IstaProblem, ProxKind, ista_lipschitz, ista_step)
from owlearn.unroll import (LayerParams, UnrolledModel, init_from_ista,
                            layer_forward, linear_map_norm, model_forward,
                            random_dictionary, rescale_linear_part,
                            verify_contraction)


def _ista_setup(seed, n=12, d_feat=5, k=4, alpha=0.5, beta=0.2,
                kind=ProxKind.SOFT_THRESHOLD, with_graph=True):
    rng = make_rng(seed)
    x = rng.standard_normal((n, d_feat))
    graph = knn_graph(x, 3) if with_graph else None
    d = random_dictionary(k, d_feat, make_rng(seed + 1))
    problem = IstaProblem(x=x, d=d, alpha=alpha if with_graph else 0.0,
                          beta=beta, graph=graph, prox_kind=kind)
    return problem


def test_init_identity_dictionary_plug_in():
    x = make_rng(0).standard_normal((6, 4))
    problem = IstaProblem(x=x, d=np.eye(4), alpha=0.0, beta=0.3)
    model = init_from_ista(problem, 2)
    p = model.params[0]
    # L = 1 for the identity dictionary
    assert np.allclose(p.f, np.zeros((4, 4)), atol=1e-9)
    assert np.allclose(p.u, np.eye(4), atol=1e-9)
    assert np.allclose(p.theta, 0.3, atol=1e-9)


def test_init_draws_identical_dictionaries_for_equal_seeds():
    x = make_rng(1).standard_normal((8, 5))
    problem = IstaProblem(x=x, d=None, alpha=0.0, beta=0.1)
    m1 = init_from_ista(problem, 3, make_rng(42), k_classes=3)
    m2 = init_from_ista(problem, 3, make_rng(42), k_classes=3)
    assert np.array_equal(m1.params[0].u, m2.params[0].u)
    assert np.array_equal(m1.params[0].f, m2.params[0].f)


def test_init_requires_k_when_dictionary_missing():
    problem = IstaProblem(x=np.zeros((4, 3)), d=None, beta=0.1)
    with pytest.raises(ValueError):
        init_from_ista(problem, 2, make_rng(0))


def test_layer_forward_identity_configuration():
    k = 3
    params = LayerParams(f=np.eye(k), w=np.zeros((k, k)),
                         u=np.zeros((5, k)), theta=[0.0], alpha=0.0,
                         prox_kind=ProxKind.SOFT_THRESHOLD)
    z = make_rng(2).standard_normal((7, k))
    x = make_rng(3).standard_normal((7, 5))
    out = layer_forward(params, 0, z, x)
    assert np.allclose(out, z, atol=1e-12)


def test_layer_forward_matches_ista_step_without_graph():
    problem = _ista_setup(4, with_graph=False)
    model = init_from_ista(problem, 1)
    z = make_rng(5).standard_normal((12, 4))
    expect = ista_step(problem, z)
    got = layer_forward(model.params[0], 0, z, problem.x, None)
    assert np.allclose(got, expect, atol=1e-12)


def test_layer_forward_zero_input_zero_output():
    k = 3
    params = LayerParams(f=np.eye(k), w=np.zeros((k, k)),
                         u=np.zeros((5, k)), theta=[0.5], alpha=0.0,
                         prox_kind=ProxKind.SOFT_THRESHOLD)
    out = layer_forward(params, 0, np.zeros((6, k)), np.zeros((6, 5)))
    assert np.array_equal(out, np.zeros((6, k)))


def test_layer_forward_missing_graph_rejected():
    k = 2
    params = LayerParams(f=np.eye(k), w=np.eye(k), u=np.zeros((3, k)),
                         theta=[0.1], alpha=0.5,
                         prox_kind=ProxKind.SOFT_THRESHOLD)
    with pytest.raises(ValueError, match="graph"):
        layer_forward(params, 0, np.zeros((4, k)), np.zeros((4, 3)), None)


def test_model_forward_reduces_to_layer_iteration():
    problem = _ista_setup(6, with_graph=True)
    model = init_from_ista(problem, 3)
    z = np.zeros((12, 4))
    for t in range(3):
        z = layer_forward(model.params[0], t, z, problem.x, model.graphs[0])
    fused, z_list, _ = model_forward(model, [problem.x])
    assert np.allclose(fused, z, atol=1e-12)
    assert np.allclose(z_list[0], z, atol=1e-12)


def test_model_forward_identical_modalities_equal_weights():
    problem = _ista_setup(7, with_graph=False)
    base = init_from_ista(problem, 2)
    params = base.params[0]
    fusion = init_fusion(FusionKind.WEIGHTED_AVERAGE, 2, 4)
    model = UnrolledModel(t_layers=2, params=[params, params.copy()],
                          graphs=[None, None], fusion=fusion)
    fused, z_list, _ = model_forward(model, [problem.x, problem.x.copy()])
    assert np.allclose(fused, z_list[0], atol=1e-12)


@pytest.mark.parametrize("kind", [ProxKind.SOFT_THRESHOLD,
                                  ProxKind.ROW_GROUP_THRESHOLD])
@pytest.mark.parametrize("with_graph", [False, True])
def test_unrolling_equivalence_to_ista(kind, with_graph):
    problem = _ista_setup(8, kind=kind, with_graph=with_graph)
    t_layers = 4
    model = init_from_ista(problem, t_layers)
    lip = ista_lipschitz(problem)
    z = np.zeros((12, 4))
    for _ in range(t_layers):
        z = ista_step(problem, z, lipschitz=lip)
    fused, _, _ = model_forward(model, [problem.x])
    assert np.linalg.norm(fused - z) <= 1e-9


def test_model_forward_modality_count_mismatch():
    problem = _ista_setup(9, with_graph=False)
    model = init_from_ista(problem, 2)
    with pytest.raises(ValueError):
        model_forward(model, [problem.x, problem.x])


def test_layer_params_validation():
    with pytest.raises(ValueError):
        LayerParams(f=np.eye(2), w=np.eye(2), u=np.zeros((3, 2)),
                    theta=[-0.1], alpha=0.0,
                    prox_kind=ProxKind.SOFT_THRESHOLD)
    with pytest.raises(ValueError):
        LayerParams(f=np.eye(2), w=np.eye(2), u=np.zeros((3, 2)),
                    theta=[0.1], alpha=1.0,
                    prox_kind=ProxKind.SOFT_THRESHOLD)


def test_verify_contraction_constant_map():
    k = 3
    params = LayerParams(f=np.zeros((k, k)), w=np.zeros((k, k)),
                         u=0.1 * np.ones((4, k)), theta=[0.0], alpha=0.0,
                         prox_kind=ProxKind.SOFT_THRESHOLD)
    model = UnrolledModel(t_layers=1, params=[params], graphs=[None],
                          fusion=init_fusion(FusionKind.WEIGHTED_AVERAGE, 1, k))
    report = verify_contraction(model, trials=5, rng=make_rng(1))
    assert report.max_ratio == 0.0
    assert report.passed


@pytest.mark.parametrize("kind", [ProxKind.SOFT_THRESHOLD,
                                  ProxKind.ROW_GROUP_THRESHOLD])
def test_verify_contraction_rescaled_decay(kind):
    problem = _ista_setup(10, kind=kind, with_graph=True)
    model = init_from_ista(problem, 2)
    model = rescale_linear_part(model, 0, 12, 0.9)
    assert linear_map_norm(model.params[0], model.graphs[0], 12) == \
        pytest.approx(0.9, abs=1e-9)
    x_small = problem.x / (4.0 * np.abs(problem.x).max())
    report = verify_contraction(model, rng=make_rng(2), x=x_small)
    assert report.decay_rate <= 0.9 + 1e-6
    assert report.passed


def test_verify_contraction_fixed_point_within_geometric_bound():
    problem = _ista_setup(11, with_graph=True)
    model = init_from_ista(problem, 2)
    model = rescale_linear_part(model, 0, 12, 0.9)
    x_small = problem.x / (4.0 * np.abs(problem.x).max())
    report = verify_contraction(model, rng=make_rng(3), x=x_small)
    bound = int(np.ceil(np.log(1e-10) / np.log(0.9)))
    assert report.initial_gap <= 1.0
    assert report.fixed_point_gap < 1e-10
    assert report.fixed_point_iters <= bound


def test_lipschitz_bound_from_params():
    # empirical ratios never exceed ||F|| + alpha * ||G|| * ||W||
    problem = _ista_setup(12, with_graph=True)
    model = init_from_ista(problem, 2)
    report = verify_contraction(model, trials=40, rng=make_rng(4))
    assert report.max_ratio <= report.analytic_bound + 1e-9


def test_checkpoint_roundtrip(tmp_path):
    problem = _ista_setup(13, with_graph=True)
    model = init_from_ista(problem, 3)
    model.fusion = init_fusion(FusionKind.AUTO_WEIGHT, 1, 4)
    model.fusion.logits += 0.25
    path = tmp_path / "ckpt.json"
    save_checkpoint(path, model, {"mode": "knn", "k": 3})
    loaded, graph_meta = load_checkpoint(path)
    assert graph_meta == {"mode": "knn", "k": 3}
    assert loaded.t_layers == model.t_layers
    assert np.array_equal(loaded.params[0].f, model.params[0].f)
    assert np.array_equal(loaded.params[0].theta, model.params[0].theta)
    assert loaded.fusion.kind is FusionKind.AUTO_WEIGHT
    loaded.graphs = list(model.graphs)
    a, _, _ = model_forward(model, [problem.x])
    b, _, _ = model_forward(loaded, [problem.x])
    assert np.array_equal(a, b)


def test_checkpoint_rejects_foreign_document(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format": "something-else"}')
    with pytest.raises(ValueError):
        load_checkpoint(path)
