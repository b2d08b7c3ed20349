import numpy as np
import pytest

from deqlab import activations as A
from deqlab import gmm
from deqlab import kernels as K
from deqlab import rmt_equiv as R
from deqlab import scalar_system as S
from deqlab import spectra as sp
from deqlab.errors import DimensionMismatch


def setup(p, n, seed=0):
    m = gmm.default_model(p, 2, n=n)
    s = gmm.sample_gmm(m, seed)
    return s.X, gmm.compute_stats(m, s)


def test_linear_equivalent_is_exact():
    X, st = setup(64, 20)
    c = S.DeqConfig.from_variance(0.2, 1.0, A.linear(), st.tau0)
    Gbar = R.approx_implicit_ck(S.ck_coefficients(c), st, X)
    assert np.allclose(Gbar.data, X.T @ X / 0.8, atol=1e-12)
    Kbar = R.approx_implicit_ntk(S.ntk_coefficients(c), st, X)
    # K = G / (1 - sigma_a^2) entrywise for the linear DEQ
    assert np.allclose(Kbar.data, X.T @ X / 0.8 / 0.8, atol=1e-12)


def test_structure_is_low_rank_plus_gram_plus_identity():
    X, st = setup(128, 40)
    ck = S.ck_coefficients(S.DeqConfig.from_variance(0.2, 1.0, A.relu(), st.tau0))
    Gbar = R.approx_implicit_ck(ck, st, X).data
    assert np.array_equal(Gbar, Gbar.T)
    spec = R.ck_spec(ck, st.tau0)
    rest = Gbar - spec.coeff_linear * X.T @ X - spec.identity_shift * np.eye(40)
    sv = np.linalg.svd(rest, compute_uv=False)
    assert np.count_nonzero(sv > 1e-10 * sv[0]) <= st.K + 1


def test_core_matrix_layout():
    spec = R.EquivalentSpec(1.0, 2.0, 3.0, 0.5)
    st = gmm.GmmStats(1.0, np.eye(2), np.zeros(2), np.array([1.0, -1.0]),
                      np.array([[1.0, 0.5], [0.5, 2.0]]), np.zeros(2))
    C = spec.core(st)
    assert np.allclose(C, [[2 + 3, -2 + 1.5, 2], [-2 + 1.5, 2 + 6, -2], [2, -2, 2]])


def test_dimension_mismatch():
    X, st = setup(64, 20)
    ck = S.ck_coefficients(S.DeqConfig.from_variance(0.2, 1.0, A.tanh(), st.tau0))
    with pytest.raises(DimensionMismatch):
        R.approx_implicit_ck(ck, st, X[:, :10])


@pytest.mark.parametrize("act", [A.relu(), A.tanh()], ids=str)
def test_error_shrinks_with_dimension(act):
    # the equivalent is asymptotic: at fixed n the exact CK approaches it as p grows
    errs = []
    for p in (64, 1024):
        X, st = setup(p, 24)
        c = S.DeqConfig.from_variance(0.2, 1.0, act, st.tau0)
        G, _ = K.implicit_ck_exact(c, X, tol=1e-10)
        errs.append(sp.relative_spectral_error(G, R.approx_implicit_ck(S.ck_coefficients(c), st, X)))
    assert errs[1] < 0.5 * errs[0]


def test_explicit_equivalent_uses_final_layer_scalars():
    X, st = setup(64, 12)
    ex = S.explicit_coefficients([A.relu(), A.tanh()], st.tau0)
    spec = R.explicit_spec(ex, st.tau0)
    assert spec.coeff_linear == ex.alpha1[2] and spec.c2 == ex.alpha2[2]
    assert spec.identity_shift == pytest.approx(ex.tau[2] ** 2 - st.tau0 ** 2 * ex.alpha1[2])
    first = R.approx_explicit_ck(ex, st, X, layer=1).data
    assert not np.allclose(first, R.approx_explicit_ck(ex, st, X).data)
