import numpy as np
import pytest

from owlearn.graph import (GraphKind, hypergraph_laplacian, knn_graph,
                           knn_similarity, laplacian, load_edge_list)
from owlearn.numerics import make_rng


def test_knn_colinear_points():
    x = np.array([[0.0], [1.0], [3.0]])
    s = knn_similarity(x, 1)
    expected = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    assert np.array_equal(s, expected)


def test_knn_complete_graph():
    rng = make_rng(0)
    x = rng.standard_normal((5, 2))
    s = knn_similarity(x, 4)
    assert np.array_equal(s, np.ones((5, 5)) - np.eye(5))


def test_knn_symmetric_with_zero_diagonal():
    rng = make_rng(1)
    x = rng.standard_normal((12, 3))
    s = knn_similarity(x, 3)
    assert np.array_equal(s, s.T)
    assert np.all(np.diag(s) == 0)


def test_knn_k_too_large_rejected():
    with pytest.raises(ValueError):
        knn_similarity(np.zeros((3, 2)), 3)


def test_knn_duplicate_points_tie_break_by_index():
    x = np.array([[0.0], [0.0], [0.0], [5.0]])
    s = knn_similarity(x, 1)
    # every duplicate picks the lowest other index; 3's nearest is 0
    assert s[0, 1] == 1 and s[1, 0] == 1 and s[2, 0] == 1 and s[3, 0] == 1


def test_laplacian_path_graph_textbook():
    s = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float)
    op = laplacian(s)
    unscaled = op.matrix * op.scale
    assert np.allclose(unscaled, [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])
    assert op.kind is GraphKind.LAPLACIAN


def test_laplacian_empty_graph():
    op = laplacian(np.zeros((4, 4)))
    assert np.array_equal(op.matrix, np.zeros((4, 4)))
    assert op.spectral_norm == 0.0
    assert op.scale == 0.0


def test_laplacian_scaled_norm_is_one():
    rng = make_rng(2)
    for seed in range(3):
        x = make_rng(seed).standard_normal((15, 4))
        op = knn_graph(x, 4)
        top = np.linalg.svd(op.matrix, compute_uv=False)[0]
        assert top == pytest.approx(1.0, abs=1e-6)


def test_laplacian_rejects_asymmetric():
    s = np.array([[0, 1.0], [0, 0]])
    with pytest.raises(ValueError):
        laplacian(s)


def test_laplacian_rows_sum_to_zero():
    rng = make_rng(3)
    x = rng.standard_normal((10, 3))
    op = knn_graph(x, 3)
    assert np.allclose((op.matrix * op.scale).sum(axis=1), 0.0, atol=1e-9)


def test_laplacian_quadratic_form_identity():
    rng = make_rng(4)
    x_pts = rng.standard_normal((9, 3))
    s = knn_similarity(x_pts, 3)
    op = laplacian(s)
    unscaled = op.matrix * op.scale
    for _ in range(5):
        v = rng.standard_normal(9)
        quad = float(v @ unscaled @ v)
        direct = 0.5 * float(np.sum(s * (v[:, None] - v[None, :]) ** 2))
        assert quad == pytest.approx(direct, abs=1e-9)


def test_hypergraph_two_nodes_hand_computed():
    x = np.array([[0.0], [1.0]])
    op = hypergraph_laplacian(x, 1)
    unscaled = op.matrix * op.scale
    assert np.allclose(unscaled, np.eye(2) - np.full((2, 2), 0.5), atol=1e-12)
    eig = np.sort(np.linalg.eigvalsh(unscaled))
    assert np.allclose(eig, [0.0, 1.0], atol=1e-12)
    assert op.kind is GraphKind.HYPERGRAPH_LAPLACIAN


@pytest.mark.parametrize("builder", [lambda x, k: knn_graph(x, k).matrix,
                                     lambda x, k: hypergraph_laplacian(x, k).matrix])
def test_operators_are_symmetric_psd(builder):
    for seed in range(20):
        x = make_rng(200 + seed).standard_normal((12, 4))
        m = builder(x, 3)
        assert np.allclose(m, m.T, atol=1e-12)
        assert np.linalg.eigvalsh(m).min() >= -1e-9


def test_hypergraph_constant_features_deterministic():
    x = np.zeros((6, 3))
    a = hypergraph_laplacian(x, 2).matrix
    b = hypergraph_laplacian(x, 2).matrix
    assert np.array_equal(a, b)


def test_stored_spectral_norm_bounded():
    for seed in range(5):
        x = make_rng(300 + seed).standard_normal((14, 3))
        for op in (knn_graph(x, 4), hypergraph_laplacian(x, 4)):
            assert op.spectral_norm <= 1.0 + 1e-9


def test_edge_list_roundtrip(tmp_path):
    p = tmp_path / "edges.txt"
    p.write_text("# comment\n0 1\n1 2\n\n2 0\n")
    s = load_edge_list(p, 4)
    expected = np.zeros((4, 4))
    for i, j in [(0, 1), (1, 2), (2, 0)]:
        expected[i, j] = expected[j, i] = 1.0
    assert np.array_equal(s, expected)
    op = laplacian(s)
    assert op.spectral_norm <= 1.0 + 1e-9


def test_edge_list_errors(tmp_path):
    p = tmp_path / "bad.txt"
    p.write_text("0 1 2\n")
    with pytest.raises(ValueError, match="bad.txt:1"):
        load_edge_list(p, 3)
    p.write_text("0 9\n")
    with pytest.raises(ValueError, match="out of range"):
        load_edge_list(p, 3)
