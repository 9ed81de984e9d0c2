import numpy as np
import pytest

from owlearn.fusion import (FusionKind, fuse, fuse_backward, init_fusion)
from owlearn.numerics import make_rng

ALL_KINDS = ["weighted-average", "auto-weight", "attention", "trusted"]


def _z_list(rng, m=3, n=6, k=4):
    return [rng.standard_normal((n, k)) for _ in range(m)]


def _params(kind_name, m, k, rng=None):
    params = init_fusion(FusionKind.from_name(kind_name), m, k)
    if rng is not None:
        if params.logits is not None:
            params.logits += rng.standard_normal(m) * 0.4
        if params.query is not None:
            params.query += rng.standard_normal(k) * 0.4
    return params


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_single_modality_passthrough(kind):
    rng = make_rng(0)
    z = rng.standard_normal((5, 3))
    params = _params(kind, 1, 3)
    fused, _ = fuse(params, [z])
    if kind == "trusted":
        # expected-probability transform of that single modality
        assert np.allclose(fused.sum(axis=1), 1.0, atol=1e-9)
        assert np.array_equal(fused.argmax(axis=1), z.argmax(axis=1))
    else:
        assert np.allclose(fused, z, atol=1e-12)


def test_weighted_average_identical_inputs():
    rng = make_rng(1)
    z = rng.standard_normal((4, 3))
    params = init_fusion(FusionKind.WEIGHTED_AVERAGE, 2, 3,
                         weights=[0.5, 0.5])
    fused, _ = fuse(params, [z, z.copy()])
    assert np.allclose(fused, z, atol=1e-12)


def test_trusted_vacuous_evidence_near_uniform():
    k = 4
    z = [np.full((5, k), -40.0), np.full((5, k), -40.0)]
    fused, _ = fuse(init_fusion(FusionKind.TRUSTED, 2, k), z)
    assert np.allclose(fused, 1.0 / k, atol=1e-6)


def test_trusted_rows_stochastic_nonnegative():
    rng = make_rng(2)
    zs = _z_list(rng, m=4, n=8, k=5)
    fused, _ = fuse(init_fusion(FusionKind.TRUSTED, 4, 5), zs)
    assert np.all(fused >= 0)
    assert np.allclose(fused.sum(axis=1), 1.0, atol=1e-9)


def _reference_dirichlet_combine(z_list, k):
    # independent transliteration of the standard evidential scheme:
    # softplus evidence -> Dirichlet alpha -> pairwise reduced Dempster rule
    # on (belief, uncertainty) -> expected probability alpha/S
    alphas = [np.logaddexp(0.0, z) + 1.0 for z in z_list]
    acc = alphas[0]
    for nxt in alphas[1:]:
        out = np.empty_like(acc)
        for i in range(acc.shape[0]):
            a1, a2 = acc[i], nxt[i]
            s1, s2 = a1.sum(), a2.sum()
            b1, b2 = (a1 - 1) / s1, (a2 - 1) / s2
            u1, u2 = k / s1, k / s2
            conflict = np.outer(b1, b2).sum() - float(b1 @ b2)
            b = (b1 * b2 + b1 * u2 + b2 * u1) / (1 - conflict)
            u = u1 * u2 / (1 - conflict)
            s = k / u
            out[i] = b * s + 1.0
        acc = out
    return acc / acc.sum(axis=1, keepdims=True)


def test_trusted_matches_reference_dirichlet_combination():
    rng = make_rng(10)
    for m in (2, 3, 4):
        zs = _z_list(rng, m=m, n=6, k=5)
        fused, _ = fuse(init_fusion(FusionKind.TRUSTED, m, 5), zs)
        expected = _reference_dirichlet_combine(zs, 5)
        assert np.allclose(fused, expected, atol=1e-10)


def test_weighted_average_backward_scales_upstream():
    rng = make_rng(3)
    zs = _z_list(rng, m=2)
    params = init_fusion(FusionKind.WEIGHTED_AVERAGE, 2, 4,
                         weights=[0.3, 0.7])
    fused, cache = fuse(params, zs)
    up = rng.standard_normal(fused.shape)
    dzs, grads = fuse_backward(params, cache, up)
    assert np.allclose(dzs[0], 0.3 * up)
    assert np.allclose(dzs[1], 0.7 * up)
    assert grads.learnable() == []


@pytest.mark.parametrize("kind,tol", [("weighted-average", 1e-6),
                                      ("auto-weight", 1e-5),
                                      ("attention", 1e-4),
                                      ("trusted", 1e-5)])
def test_backward_matches_finite_differences(kind, tol):
    rng = make_rng(4)
    m, n, k = 3, 5, 4
    zs = _z_list(rng, m=m, n=n, k=k)
    params = _params(kind, m, k, rng)
    up = rng.standard_normal((n, k))
    fused, cache = fuse(params, zs)
    dzs, grads = fuse_backward(params, cache, up)
    eps = 1e-6

    def loss():
        return float(np.sum(up * fuse(params, zs)[0]))

    worst = 0.0
    for mm in range(m):
        flat = zs[mm].reshape(-1)
        for i in range(0, flat.size, 3):
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss()
            flat[i] = orig - eps
            lm = loss()
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            an = dzs[mm].reshape(-1)[i]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    for arr, g in ((params.logits, grads.d_logits), (params.query, grads.d_query)):
        if arr is None:
            continue
        for i in range(arr.size):
            orig = arr[i]
            arr[i] = orig + eps
            lp = loss()
            arr[i] = orig - eps
            lm = loss()
            arr[i] = orig
            fd = (lp - lm) / (2 * eps)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-8))
    assert worst < tol


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_permutation_equivariance(kind):
    rng = make_rng(5)
    m, n, k = 3, 6, 4
    zs = _z_list(rng, m=m, n=n, k=k)
    params = _params(kind, m, k, rng)
    fused, _ = fuse(params, zs)
    perm = [2, 0, 1]
    zs_p = [zs[i] for i in perm]
    params_p = init_fusion(params.kind, m, k,
                           weights=None if params.weights is None
                           else params.weights[perm])
    if params.logits is not None:
        params_p.logits = params.logits[perm]
    if params.query is not None:
        params_p.query = params.query.copy()
    fused_p, _ = fuse(params_p, zs_p)
    assert np.allclose(fused, fused_p, atol=1e-12)


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_argmax_preserved_for_identical_modalities(kind):
    rng = make_rng(6)
    z = rng.standard_normal((10, 4))
    params = _params(kind, 3, 4, rng)
    fused, _ = fuse(params, [z, z.copy(), z.copy()])
    assert np.array_equal(fused.argmax(axis=1), z.argmax(axis=1))


def test_auto_weight_weights_row_stochastic():
    rng = make_rng(7)
    zs = _z_list(rng, m=4)
    params = _params("auto-weight", 4, 4, rng)
    _, cache = fuse(params, zs)
    assert cache["w"].sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(cache["w"] >= 0)


def test_attention_weights_row_stochastic():
    rng = make_rng(8)
    zs = _z_list(rng, m=3)
    params = _params("attention", 3, 4, rng)
    _, cache = fuse(params, zs)
    assert np.allclose(cache["w"].sum(axis=1), 1.0, atol=1e-12)


def test_fuse_rejects_empty_and_mismatched():
    params = init_fusion(FusionKind.WEIGHTED_AVERAGE, 1, 3)
    with pytest.raises(ValueError):
        fuse(params, [])
    params2 = init_fusion(FusionKind.WEIGHTED_AVERAGE, 2, 3)
    with pytest.raises(ValueError):
        fuse(params2, [np.zeros((3, 3)), np.zeros((4, 3))])


def test_backward_rejects_stale_cache():
    rng = make_rng(9)
    zs = _z_list(rng, m=2)
    p1 = _params("auto-weight", 2, 4, rng)
    p2 = _params("attention", 2, 4, rng)
    _, cache = fuse(p1, zs)
    with pytest.raises(ValueError):
        fuse_backward(p2, cache, np.zeros((5, 4)))
