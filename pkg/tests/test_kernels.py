import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adaptive_kernel.kernels import (GramMatrix, KernelError, MlpState, gd_kernel, gram, h_kernel,
                                     k0_closed_form, k0_monte_carlo, mlp_forward, mlp_kernel,
                                     mlp_param_grads, numerical_rank, psd_chain_check)
from adaptive_kernel.model import (InitSpec, NetworkState, SignedAtomMeasure, init_network,
                                   to_signed_measure)
from oracles import k0_quadrature, mlp_fd_kernel, mlp_output


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


def random_unit_pairs(count, d, seed):
    rng = np.random.default_rng(seed)
    return [(unit(rng.standard_normal(d)), unit(rng.standard_normal(d))) for _ in range(count)]


# -- pointwise ----------------------------------------------------------------


def test_gd_kernel_one_neuron_hand_value():
    net = NetworkState(np.array([1.0]), np.array([[1.0, 0.0]]))
    e1 = np.array([1.0, 0.0])
    assert gd_kernel(net, e1, e1) == 2.0


def test_gd_kernel_vanishes_off_every_gate():
    rng = np.random.default_rng(0)
    U = np.abs(rng.standard_normal((6, 3)))
    net = NetworkState(rng.standard_normal(6), U)
    x = -np.array([1.0, 1.0, 1.0])  # x.u_j < 0 for all j
    for _ in range(5):
        assert gd_kernel(net, x, rng.standard_normal(3)) == 0.0


def test_gate_open_at_zero():
    # x.u = 0 exactly: relu term 0 but the gated linear term counts
    net = NetworkState(np.array([2.0]), np.array([[0.0, 1.0]]))
    x = np.array([1.0, 0.0])
    assert gd_kernel(net, x, x) == 4.0


def test_parameter_and_measure_forms_agree():
    rng = np.random.default_rng(1)
    net = init_network(InitSpec(seed=1, radius=1.7), 40, 4)
    mu = to_signed_measure(net)
    X = rng.standard_normal((20, 4))
    for tag in ("K", "K0part", "K1part", "H"):
        np.testing.assert_allclose(gram(tag, net, X).matrix, gram(tag, mu, X).matrix,
                                   rtol=1e-10, atol=1e-12)


def test_h_kernel_hand_values():
    mu = SignedAtomMeasure(np.array([1.0]), np.array([[1.0, 0.0]]))
    x = np.array([1.0, 0.0])
    assert h_kernel(mu, x, x) == 1.0
    zero = SignedAtomMeasure(np.array([1.0, -1.0]), np.zeros((2, 2)))
    assert h_kernel(zero, x, x) == 0.0


def test_h_kernel_weighting():
    # atom of norm 2 along x: ||Theta||^2 relu(2) relu(2) / m = 4 * 4 / 1
    mu = SignedAtomMeasure(np.array([-1.0]), np.array([[2.0, 0.0]]))
    assert h_kernel(mu, [1.0, 0.0], [1.0, 0.0]) == 16.0


def test_kernel_dimension_errors():
    net = NetworkState(np.ones(2), np.ones((2, 3)))
    with pytest.raises(KernelError):
        gd_kernel(net, np.ones(2), np.ones(3))
    with pytest.raises(KernelError):
        gd_kernel("not a net", np.ones(3), np.ones(3))


# -- K0 -----------------------------------------------------------------------


@pytest.mark.parametrize("t,want", [(1.0, 1.0), (-1.0, 0.0), (0.0, 1 / (2 * math.pi)),
                                    (0.5, 1 / 3 + math.sqrt(3) / (4 * math.pi))])
def test_k0_closed_form_values(t, want):
    x = np.array([1.0, 0.0, 0.0])
    z = np.array([t, math.sqrt(1 - t * t), 0.0])
    assert k0_closed_form(x, z) == pytest.approx(want, abs=1e-15)


@pytest.mark.parametrize("t", np.linspace(-1, 1, 9))
def test_k0_closed_form_matches_angular_quadrature(t):
    x = np.array([1.0, 0.0])
    z = np.array([t, math.sqrt(max(0.0, 1 - t * t))])
    assert k0_closed_form(x, z) == pytest.approx(k0_quadrature(t), abs=1e-5)


def test_k0_closed_form_needs_unit_vectors():
    with pytest.raises(KernelError):
        k0_closed_form(np.array([2.0, 0.0]), np.array([1.0, 0.0]))


def test_k0_clamps_roundoff():
    x = unit([1.0, 1e-9, 0.0])
    assert np.isfinite(k0_closed_form(x, x))
    assert k0_closed_form(x, x) == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("m_samples", [10_000, 100_000])
def test_k0_monte_carlo_within_three_standard_errors(m_samples):
    for k, (x, z) in enumerate(random_unit_pairs(20, 5, seed=m_samples)):
        mc, se = k0_monte_carlo(x, z, m_samples, seed=k, return_stderr=True)
        assert abs(mc - k0_closed_form(x, z)) < 3 * se


def test_k0_monte_carlo_deterministic():
    x, z = random_unit_pairs(1, 4, seed=3)[0]
    assert k0_monte_carlo(x, z, 5000, seed=11) == k0_monte_carlo(x, z, 5000, seed=11)
    assert k0_monte_carlo(x, z, 5000, seed=11) != k0_monte_carlo(x, z, 5000, seed=12)


def test_k0closed_gram_normalizes_rows():
    X = np.array([[2.0, 0.0], [0.0, 3.0]])
    G = gram("K0closed", None, X).matrix
    np.testing.assert_allclose(G, [[1.0, 1 / (2 * math.pi)], [1 / (2 * math.pi), 1.0]])


# -- Gram ---------------------------------------------------------------------


def test_gram_single_row_is_pointwise():
    net = init_network(InitSpec("gaussian-rademacher", seed=4), 10, 3)
    x = np.array([[0.3, -1.0, 2.0]])
    assert gram("K", net, x).matrix[0, 0] == pytest.approx(gd_kernel(net, x[0], x[0]))
    assert gram("H", net, x).matrix[0, 0] == pytest.approx(h_kernel(net, x[0], x[0]))


def test_gram_duplicate_rows():
    rng = np.random.default_rng(5)
    net = init_network(InitSpec("gaussian-rademacher", seed=5), 10, 3)
    X = rng.standard_normal((4, 3))
    X[2] = X[0]
    G = gram("K", net, X).matrix
    np.testing.assert_array_equal(G[0], G[2])
    np.testing.assert_array_equal(G[:, 0], G[:, 2])


def test_gram_split_identity():
    rng = np.random.default_rng(6)
    net = init_network(InitSpec("gaussian-rademacher", seed=6), 25, 4)
    X = rng.standard_normal((15, 4))
    K = gram("K", net, X).matrix
    np.testing.assert_allclose(K, gram("K0part", net, X).matrix + gram("K1part", net, X).matrix,
                               rtol=0, atol=1e-12 * np.max(np.abs(K)))


def test_gram_rejects_unknown_tag_and_nan():
    net = NetworkState(np.ones(1), np.ones((1, 2)))
    with pytest.raises(KernelError):
        gram("NTK", net, np.ones((2, 2)))
    with pytest.raises(KernelError):
        gram("K", net, np.array([[np.nan, 0.0]]))


def test_gram_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    net = init_network(InitSpec("gaussian-rademacher", seed=7), 10, 3)
    G = gram("H", net, rng.standard_normal((5, 3)), provenance={"seed": 7})
    G.save(tmp_path / "h.csv")
    back = GramMatrix.load(tmp_path / "h.csv")
    assert np.array_equal(back.matrix, G.matrix)
    assert back.tag == "H" and back.provenance == {"seed": 7}


@settings(max_examples=25, deadline=None)
@given(m=st.integers(1, 30), n=st.integers(1, 15), d=st.integers(1, 6),
       seed=st.integers(0, 10_000))
def test_grams_are_psd(m, n, d, seed):
    rng = np.random.default_rng(seed)
    net = NetworkState(rng.standard_normal(m), rng.standard_normal((m, d)))
    X = rng.standard_normal((n, d))
    for tag in ("K", "K0part", "K1part", "H"):
        assert gram(tag, net, X).is_psd()


# -- rank and PSD chain -------------------------------------------------------


def test_numerical_rank_hand_cases():
    assert numerical_rank(np.zeros((3, 3))) == 0
    v = np.array([1.0, 2.0, 0.0])
    assert numerical_rank(np.outer(v, v)) == 1
    assert numerical_rank(np.diag([1.0, 1e-11, 0.5])) == 2


@pytest.mark.parametrize("seed", range(5))
def test_one_neuron_rank_gap(seed):
    rng = np.random.default_rng(seed)
    d = 5
    net = NetworkState(rng.standard_normal(1), rng.standard_normal((1, d)))
    X = rng.standard_normal((20, d))
    active = int(np.sum(X @ net.U[0] >= 0))
    assert numerical_rank(gram("H", net, X)) <= 1
    assert numerical_rank(gram("K", net, X)) == min(d, active)


def test_psd_chain_scalar_instance():
    mu = SignedAtomMeasure(np.array([1.0]), np.array([[0.6, 0.8]]))
    x = np.array([[2.0, 1.0]])
    rep = psd_chain_check(mu, x, D=1.0)
    # by hand: x.Theta = 2, |Theta| = 1, |x|^2 = 5 -> K0part = 5, K1part = 4, H = 4
    assert rep["K-K0part"]["min_eig"] == pytest.approx(4.0)
    assert rep["K0part-K1part"]["min_eig"] == pytest.approx(1.0)
    assert rep["K1part-H/D2"]["min_eig"] == pytest.approx(0.0, abs=1e-14)
    assert rep["pass"]


@pytest.mark.parametrize("seed", range(3))
def test_psd_chain_random_measure(seed):
    rng = np.random.default_rng(seed)
    mu = SignedAtomMeasure(rng.choice([-1.0, 1.0], 50), rng.standard_normal((50, 5)))
    rep = psd_chain_check(mu, rng.standard_normal((30, 5)), mu.support_radius())
    assert rep["pass"]


def test_psd_chain_rejects_small_D():
    mu = SignedAtomMeasure(np.array([1.0]), np.array([[3.0, 4.0]]))
    with pytest.raises(KernelError, match="support radius"):
        psd_chain_check(mu, np.ones((2, 2)), D=4.0)


# -- MLP ----------------------------------------------------------------------


def test_mlp_forward_matches_loop_oracle():
    mlp = MlpState.random([4, 5, 3, 1], seed=2)
    x = np.random.default_rng(2).standard_normal(4)
    assert mlp_forward(mlp, x) == pytest.approx(mlp_output(mlp.weights, x), rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_mlp_depth2_equals_gd_kernel(seed):
    rng = np.random.default_rng(seed)
    net = NetworkState(rng.standard_normal(7), rng.standard_normal((7, 3)))
    x, z = rng.standard_normal(3), rng.standard_normal(3)
    assert mlp_kernel(MlpState.from_network(net), x, z) == pytest.approx(gd_kernel(net, x, z),
                                                                         rel=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_mlp_depth3_matches_fd_jacobian(seed):
    mlp = MlpState.random([4, 5, 3, 1], seed=seed)
    rng = np.random.default_rng(100 + seed)
    x, z = rng.standard_normal(4), rng.standard_normal(4)
    fd = mlp_fd_kernel(mlp.weights, x, z)
    assert mlp_kernel(mlp, x, z) == pytest.approx(fd, rel=1e-4)


def test_mlp_backprop_grads_match_fd():
    mlp = MlpState.random([3, 4, 2, 1], seed=9)
    x = np.random.default_rng(9).standard_normal(3)
    flat = np.concatenate([g.ravel() for g in mlp_param_grads(mlp, x)])
    from adaptive_kernel.verify import fd_param_grads

    np.testing.assert_allclose(flat, fd_param_grads(mlp, x), rtol=1e-6, atol=1e-8)


def test_mlp_kernel_zero_input():
    mlp = MlpState.random([3, 4, 4, 1], seed=1)
    assert mlp_kernel(mlp, np.zeros(3), np.ones(3)) == 0.0


def test_mlp_validation():
    with pytest.raises(KernelError):
        MlpState([np.ones((2, 3)), np.ones((2, 1))])
    with pytest.raises(KernelError):
        MlpState([np.ones((2, 2))])
    mlp = MlpState.random([2, 3, 1])
    with pytest.raises(KernelError):
        mlp_kernel(mlp, np.ones(3), np.ones(3))


def test_mlp_gram_is_symmetric_psd():
    mlp = MlpState.random([3, 6, 4, 1], seed=4)
    G = gram("MLP", mlp, np.random.default_rng(4).standard_normal((6, 3)))
    assert G.is_psd() and np.array_equal(G.matrix, G.matrix.T)
