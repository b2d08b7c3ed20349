import math

import numpy as np
import pytest

from deqlab import activations as A
from deqlab import gmm
from deqlab import kernels as K
from deqlab import scalar_system as S
from deqlab.errors import DivergentNTK, OutOfMemory, ParseError

SQ2PI = math.sqrt(2 * math.pi)


def deq(act, tau0, sa2=0.2, sb=1.0):
    return S.DeqConfig.from_variance(sa2, sb, act, tau0)


@pytest.fixture(scope="module")
def tiny():
    m = gmm.default_model(64, 2, n=6)
    s = gmm.sample_gmm(m, 2)
    return s.X, gmm.compute_stats(m, s).tau0


def test_linear_deq_kernel_is_scaled_gram(tiny):
    X, tau0 = tiny
    G, Gdot = K.implicit_ck_exact(deq(A.linear(), tau0), X)
    assert np.allclose(G.data, X.T @ X / 0.8, atol=1e-10, rtol=0)
    assert np.allclose(Gdot.data, 0.2, atol=1e-12)
    assert G.kind is K.KernelKind.ImplicitCK and G.method is K.Method.Quadrature


def test_ntk_identity_against_truncated_sum(tiny):
    X, tau0 = tiny
    c = deq(A.tanh(), tau0)
    G, Gdot = K.implicit_ck_exact(c, X)
    Kstar = K.implicit_ntk_from_ck(G, Gdot)
    Ktr = K.implicit_ntk_finite_depth(c, X, 300)
    assert np.max(np.abs(Kstar.data - Ktr.data)) < 1e-8


def test_divergent_ntk_guard():
    G = K.KernelMatrix(np.eye(2), K.KernelKind.ImplicitCK, K.Method.Quadrature)
    with pytest.raises(DivergentNTK):
        K.implicit_ntk_from_ck(G, K.KernelMatrix(np.full((2, 2), 1.0), G.kind, G.method))


def centred_relu_kernel(S0, shift):
    """E[(relu(u) - s)(relu(v) - s)] from the first-order arc-cosine kernel."""
    d = np.sqrt(np.diag(S0))
    r = np.outer(d, d)
    c = np.clip(S0 / r, -1, 1)
    th = np.arccos(c)
    k1 = r / (2 * math.pi) * (np.sin(th) + (math.pi - th) * c)
    mean = d / SQ2PI
    return k1 - shift * (mean[:, None] + mean[None, :]) + shift ** 2


def test_explicit_relu_layer_against_arccos(tiny):
    X, tau0 = tiny
    (S1,) = K.explicit_ck_exact([A.relu()], X, tau0=tau0)
    assert np.allclose(S1.data, centred_relu_kernel(X.T @ X, tau0 / SQ2PI), atol=1e-11)


def test_explicit_ntk_single_linear_layer(tiny):
    X, tau0 = tiny
    # identity layer: Sigma = X^T X, Sigmadot = 1, Theta = 2 X^T X
    Th = K.explicit_ntk_exact([A.linear()], X, tau0=tau0)
    assert np.allclose(Th.data, 2 * X.T @ X, atol=1e-12)


def test_montecarlo_matches_quadrature(small_gmm):
    _, smp, st = small_gmm
    c = deq(A.tanh(), st.tau0)
    G, _ = K.implicit_ck_exact(c, smp.X)
    m = 4096
    Gm = K.implicit_ck_montecarlo(c, smp.X, m=m, seed=1)
    assert np.max(np.abs(Gm.data - G.data)) < 4 / math.sqrt(m)
    assert Gm.meta["delta"] < 1e-10


def test_montecarlo_ntk_matches_quadrature(small_gmm):
    _, smp, st = small_gmm
    c = deq(A.relu(), st.tau0)
    G, Gd = K.implicit_ck_exact(c, smp.X)
    Kq = K.implicit_ntk_from_ck(G, Gd)
    Km = K.implicit_ntk_montecarlo(c, smp.X, m=4096, seed=0)
    assert np.max(np.abs(Km.data - Kq.data)) < 8 / 64


def test_explicit_montecarlo_matches_quadrature(small_gmm):
    _, smp, st = small_gmm
    layers = [A.leaky_relu(1.2, 0.3), A.hard_tanh(1.0, 0.7)]
    Sq = K.explicit_ck_exact(layers, smp.X, tau0=st.tau0)[-1]
    Sm = K.explicit_ck_montecarlo(layers, smp.X, m=4096, seed=3, tau0=st.tau0)
    assert np.max(np.abs(Sm.data - Sq.data)) < 4 / 64


def test_montecarlo_independent_of_thread_count(tiny):
    X, tau0 = tiny
    c = deq(A.swish(), tau0)
    a = K.implicit_ck_montecarlo(c, X, m=256, seed=4, threads=1)
    b = K.implicit_ck_montecarlo(c, X, m=256, seed=4, threads=3)
    assert a.data.tobytes() == b.data.tobytes()
    d = K.implicit_ck_montecarlo(c, X, m=256, seed=5)
    assert not np.array_equal(a.data, d.data)


def test_lazy_gaussian_is_linear_and_consistent(rng):
    L = K.LazyGaussian(300, 500, seed=9, tag=1, rep=0)
    Z1 = rng.standard_normal((500, 3))
    Z2 = rng.standard_normal((500, 2))
    A1 = L.apply(Z1)
    A2 = L.apply(Z2)
    assert L.rank == 5
    # once revealed, the same directions map the same way
    coef = rng.standard_normal((5, 4))
    Z = np.concatenate([Z1, Z2], axis=1) @ coef
    assert np.allclose(L.apply(Z), np.concatenate([A1, A2], axis=1) @ coef, atol=1e-10)
    assert L.rank == 5


def test_lazy_gaussian_has_standard_normal_law(rng):
    # A q for a unit vector q is N(0, I); pooled over many draws the variance is 1
    vals = []
    q = rng.standard_normal(200)
    q /= np.linalg.norm(q)
    for s in range(50):
        vals.append(K.LazyGaussian(400, 200, seed=s, tag=2, rep=0).apply(q[:, None]).ravel())
    v = np.concatenate(vals)
    assert v.mean() == pytest.approx(0, abs=4 / math.sqrt(v.size))
    assert v.var() == pytest.approx(1, abs=6 * math.sqrt(2 / v.size))


def test_lazy_and_dense_estimators_agree_in_law(tiny):
    X, tau0 = tiny
    c = deq(A.tanh(), tau0)
    G, _ = K.implicit_ck_exact(c, X)
    lazy = K.implicit_ck_montecarlo(c, X, m=2048, seed=0, mode="lazy")
    dense = K.implicit_ck_montecarlo(c, X, m=2048, seed=0, mode="dense")
    assert lazy.meta["lazy"] and not dense.meta["lazy"]
    for M in (lazy, dense):
        assert np.max(np.abs(M.data - G.data)) < 5 / math.sqrt(2048)


def test_memory_guard():
    assert K.choose_lazy(1 << 16)
    assert not K.choose_lazy(1024)
    with pytest.raises(OutOfMemory):
        K.choose_lazy(1 << 16, mode="dense")


def test_binary_round_trip(tmp_path, rng):
    M = rng.standard_normal((5, 5))
    M = M + M.T
    km = K.KernelMatrix(M, K.KernelKind.ApproxNTK, K.Method.RMTFormula)
    path = tmp_path / "k.bin"
    K.write_binary(km, path)
    raw = path.read_bytes()
    assert len(raw) == 16 + 8 * 25 and raw[:4] == b"DKLK"
    back = K.read_binary(path)
    assert back.kind is K.KernelKind.ApproxNTK and np.array_equal(back.data, M)
    path.write_bytes(raw[:-8])
    with pytest.raises(ParseError):
        K.read_binary(path)
