import math

import numpy as np
import pytest
from scipy.linalg import expm

from fiberflow.bundles import tangent_bundle
from fiberflow.geometry import Euclidean, Sphere2
from fiberflow.holonomy import (appendix_c_check, appendix_c_suite, evolve_holonomy,
                                frame_generators, product_integral_truncation)
from fiberflow.paths import PathSample, sample_path
from fiberflow.potentials import PotentialSpec, ScalarField
from fiberflow.rng import RngKey

KEY = RngKey(99)
E2 = Euclidean(2)
PAULI_Z = np.diag([1.0, -1.0])
PAULI_X = np.array([[0.0, 1.0], [1.0, 0.0]])


class _Sine:
    def __init__(self, w, axis=0, shift=0.0):
        self.w, self.axis, self.shift = w, axis, shift

    def __call__(self, pts):
        return np.sin(self.w * np.asarray(pts)[..., self.axis]) + self.shift


def smooth_matrix_potential(scale=0.7):
    return PotentialSpec(rank=2, const=0.1 * np.eye(2),
                         terms=[(ScalarField(_Sine(2.0, 0, 0.5)), scale * PAULI_Z),
                                (ScalarField(_Sine(1.3, 1)), 0.6 * scale * PAULI_X)])


def smooth_curve_path(K, t=1.0):
    ts = np.linspace(0.0, t, K + 1)
    pts = np.stack([ts, np.sin(2.5 * ts)], axis=-1)
    return PathSample(model=E2, bundle=None, times=ts, points=pts,
                      increments=np.zeros((K, 2)),
                      transports=np.zeros((0, 1, 1), dtype=complex),
                      alive=True, death_index=None)


def test_zero_potential_identity():
    p = sample_path(E2, None, np.zeros(2), 0.2, 1e-3, KEY)
    tr = evolve_holonomy(p, PotentialSpec.zero(2))
    assert np.allclose(tr.values, np.eye(2))
    assert np.allclose(tr.inverses, np.eye(2))


def test_constant_scalar_matrix():
    p = sample_path(E2, None, np.zeros(2), 1.0, 1e-3, KEY)
    tr = evolve_holonomy(p, PotentialSpec(rank=2, const=0.9 * np.eye(2)))
    assert np.max(np.abs(tr.endpoint() - math.exp(-0.9) * np.eye(2))) < 1e-12


def test_constant_hermitian_vs_expm():
    P = np.array([[0.6, 0.2 - 0.1j], [0.2 + 0.1j, -0.4]])
    p = sample_path(E2, None, np.zeros(2), 1.0, 1e-3, KEY)
    tr = evolve_holonomy(p, PotentialSpec(rank=2, const=P))
    assert np.max(np.abs(tr.endpoint() - expm(-P))) < 1e-10


def test_trace_invariants():
    p = sample_path(E2, None, np.zeros(2), 0.5, 1e-3, KEY.child(1))
    V = smooth_matrix_potential()
    tr = evolve_holonomy(p, V)
    assert np.allclose(tr.values[0], np.eye(2))
    # inverses * values = identity
    err = np.max(np.abs(np.einsum("kij,kjl->kil", tr.inverses, tr.values) - np.eye(2)))
    assert err < 1e-9
    # discrete domination, every index: ||values[k]|| <= e^{-sum h floor}
    dts = np.diff(tr.times)
    floor = V.scalar_floor(p.points[:-1])
    partial = np.concatenate([[0.0], np.cumsum(dts * floor)])
    norms = np.linalg.norm(tr.values, ord=2, axis=(1, 2))
    assert np.max(norms - np.exp(-partial)) < 1e-9
    # upper bound a): ||values[k]|| <= e^{sum h ||W||}
    wn = np.linalg.norm(tr.frame_fields, ord=2, axis=(1, 2))
    upper = np.concatenate([[0.0], np.cumsum(dts * wn)])
    assert np.max(norms - np.exp(upper)) < 1e-9


def test_psd_potential_contraction():
    # W >= 0 everywhere implies ||values[k]|| <= 1 (absc c with c = 0)
    V = PotentialSpec(rank=2, const=0.5 * np.eye(2),
                      terms=[(ScalarField(_Sine(1.0, 0, 1.5)), 0.15 * PAULI_Z)])
    p = sample_path(E2, None, np.zeros(2), 0.5, 1e-3, KEY.child(2))
    tr = evolve_holonomy(p, V)
    norms = np.linalg.norm(tr.values, ord=2, axis=(1, 2))
    assert np.max(norms) <= 1.0 + 1e-9


def test_inverse_growth_bound():
    # ||V_k^{-1} V_K|| <= exp(int ||V^(2)||) over the window (absc d)
    p = sample_path(E2, None, np.zeros(2), 0.5, 1e-3, KEY.child(3))
    V = smooth_matrix_potential()
    tr = evolve_holonomy(p, V)
    dts = np.diff(tr.times)
    v2 = V.negative_norm(p.points[:-1])
    total = np.cumsum((dts * v2)[::-1])[::-1]  # int_{t_k}^{T}
    K = len(tr.values) - 1
    for k in range(0, K, 50):
        win = np.linalg.norm(tr.inverses[k] @ tr.values[K] @ np.eye(2), 2)
        # inverses[k] @ values[K] realizes V_k^{-1} V_K for the product scheme
        assert win <= math.exp(total[k]) + 1e-9


def test_sphere_bundle_conjugation_hermitian():
    s2 = Sphere2(1.0)
    p = sample_path(s2, tangent_bundle(), s2.origin(), 0.1, 1e-3, KEY)

    class _Z:
        def __call__(self, pts):
            return np.asarray(pts)[..., 2]

    V = PotentialSpec(rank=2, const=0.2 * np.eye(2),
                      terms=[(ScalarField(_Z()), 0.5 * PAULI_X)])
    W = frame_generators(p, V)
    assert np.max(np.abs(W - np.conj(np.transpose(W, (0, 2, 1))))) < 1e-12
    tr = evolve_holonomy(p, V)
    dts = np.diff(tr.times)
    floor = V.scalar_floor(p.points[:-1])
    partial = np.concatenate([[0.0], np.cumsum(dts * floor)])
    norms = np.linalg.norm(tr.values, ord=2, axis=(1, 2))
    assert np.max(norms - np.exp(-partial)) < 1e-9


# -- product-integral truncation -------------------------------------------


def test_truncation_order_zero_and_one():
    p = smooth_curve_path(200, t=1.0)
    V = PotentialSpec(rank=2, const=0.4 * np.eye(2))
    assert np.allclose(product_integral_truncation(p, V, 0), np.eye(2))
    t1 = product_integral_truncation(p, V, 1)
    assert np.max(np.abs(t1 - (np.eye(2) - 0.4 * np.eye(2)))) < 1e-10


def test_truncation_converges_to_holonomy():
    p = smooth_curve_path(4000, t=1.0)
    V = smooth_matrix_potential(scale=0.5)
    ref = evolve_holonomy(p, V).endpoint()
    dts = np.diff(p.times)
    W = frame_generators(p, V)[:-1]
    l1 = float(np.sum(dts * np.linalg.norm(W, ord=2, axis=(1, 2))))
    errs = [np.linalg.norm(product_integral_truncation(p, V, n) - ref, 2)
            for n in (2, 3, 4)]
    assert errs[0] > errs[1] > errs[2]
    # remainder bound of the exponential series at order 4
    bound = l1**5 * math.exp(l1) / math.factorial(5) + 5e-8
    assert errs[2] <= bound + 2e-4  # residual scheme error at this K


def test_truncation_guards():
    p = smooth_curve_path(100)
    V = PotentialSpec(rank=2, const=9.0 * np.eye(2))
    with pytest.raises(ValueError, match="too large"):
        product_integral_truncation(p, V, 4)
    with pytest.raises(ValueError, match="order"):
        product_integral_truncation(p, PotentialSpec.zero(2), 7)


def test_rank_cap():
    p = smooth_curve_path(10)
    with pytest.raises(ValueError, match="rank"):
        evolve_holonomy(p, PotentialSpec(rank=17, const=np.zeros((17, 17))))


# -- Richardson convergence order -------------------------------------------


def test_richardson_sequence_second_order():
    # the left-point product scheme is first order; its Richardson pair
    # R(h) = 2 E(h/2) - E(h) converges at second order (ratio ~ 4)
    V = smooth_matrix_potential()

    def endpoint(K):
        return evolve_holonomy(smooth_curve_path(K), V).endpoint()

    es = {K: endpoint(K) for K in (128, 256, 512, 1024)}
    R = {K: 2 * es[2 * K] - es[K] for K in (128, 256, 512)}
    d1 = np.linalg.norm(R[128] - R[256], 2)
    d2 = np.linalg.norm(R[256] - R[512], 2)
    assert 3.2 <= d1 / d2 <= 4.8


# -- the inequality suite ----------------------------------------------------


def test_appendix_zero_generator_equalities():
    K, d = 32, 3
    F = np.zeros((K, d, d), dtype=complex)
    out = appendix_c_check(F, np.linspace(0.0, 1.0, K + 1))
    # F = 0: Y = 1; bounds a and c hold with equality 1 vs 1
    assert abs(out["margins"]["a_norm"]) < 1e-12
    assert abs(out["margins"]["c_form_bound"]) < 1e-12
    assert abs(out["margins"]["b_dist_to_one"] - 1.0) < 1e-12
    assert not out["violations"]


def test_appendix_identical_pair_zero_distance():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((4, 4))
    F = np.broadcast_to(0.5 * (A + A.T), (16, 4, 4)).astype(complex)
    out = appendix_c_check(F, np.linspace(0, 1, 17), pair_F=F.copy())
    assert out["margins"]["schlesi_stability"] >= 0.0
    assert not out["violations"]


def test_appendix_c_suite_randomized():
    rep = appendix_c_suite(trials=60, d=4, t=1.0, grid_n=64, seed=7)
    assert rep["passed"], rep["violations"]
    assert all(v > -1e-8 for v in rep["worst_margins"].values())


def test_appendix_c_requires_c_for_nonhermitian():
    F = np.zeros((8, 2, 2), dtype=complex)
    F[:, 0, 1] = 1.0  # nilpotent, not Hermitian
    with pytest.raises(ValueError, match="Hermitian"):
        appendix_c_check(F, np.linspace(0, 1, 9))
    out = appendix_c_check(F, np.linspace(0, 1, 9), c=np.full(8, 1.0))
    assert not out["violations"]
