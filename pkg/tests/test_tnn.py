import math

import numpy as np
import pytest
import torch

from tnnpde.autodiff import param_count
from tnnpde.quadrature import composite_grid, gauss_hermite
from tnnpde.tnn import DegenerateBasisError, Layout, eval_tables, init, raw_jets, value_at


def unit_layout(d, n_sub=10, n_pts=16, interval=(0.0, 1.0)):
    return Layout.from_grids([composite_grid(interval, n_sub, n_pts) for _ in range(d)])


def test_seeded_init_is_reproducible():
    a = init(3, 4, (5, 5), [(0.0, 1.0)] * 3, seed=7)
    b = init(3, 4, (5, 5), [(0.0, 1.0)] * 3, seed=7)
    assert np.array_equal(a.theta, b.theta) and np.array_equal(a.c, b.c)
    c = init(3, 4, (5, 5), [(0.0, 1.0)] * 3, seed=8)
    assert not np.array_equal(a.theta, c.theta)


def test_parameter_count():
    st = init(5, 50, (100, 100, 100), [(0.0, 1.0)] * 5, seed=0)
    expected = 100 * 1 + 100 + 2 * (100 * 100 + 100) + 50 * 100 + 50
    assert st.n_params == expected == param_count(st.arch)
    assert st.theta.shape == (5, expected)


def test_zero_network_is_degenerate():
    st = init(2, 1, (3,), [(0.0, 1.0)] * 2, seed=0)
    st.theta[:] = 0.0
    with pytest.raises(DegenerateBasisError):
        eval_tables(st, unit_layout(2, 2, 4))


def _sine_state(mask):
    st = init(1, 1, (1,), [(0.0, 1.0)], seed=0, mask=mask)
    st.theta[0] = [math.pi, 0.0, 1.0, 0.0]
    return st


def test_sine_factor_normalization():
    L = unit_layout(1)
    T = eval_tables(_sine_state(False), L)
    assert abs(T.norms.item() - math.sqrt(0.5)) <= 1e-12
    w = L.weights[0]
    assert abs(np.dot(w, T.V[0, :, 0].numpy() ** 2) - 1.0) <= 1e-12


def test_mask_vanishes_on_boundary_and_stays_positive():
    L = unit_layout(1, 4, 8)
    T = eval_tables(_sine_state(True), L)
    V = T.V[0, :, 0].numpy()
    n = L.n_nodes
    assert np.all(V[:n] > 0)
    assert np.allclose(V[n:], 0.0, atol=1e-15)


def test_value_at_examples():
    L = unit_layout(2, 2, 4)
    st = init(2, 3, (4,), [(0.0, 1.0)] * 2, seed=1)
    assert np.all(value_at(st, np.full((4, 2), 0.3), L, c=np.zeros(3)) == 0.0)
    const = init(1, 1, (1,), [(0.0, 1.0)], seed=0, mask=False)
    const.theta[0] = [0.0, 0.0, 0.0, 1.0]
    out = value_at(const, np.linspace(0, 1, 7)[:, None], unit_layout(1, 2, 4), c=[2.0])
    assert np.allclose(out, 2.0, atol=1e-14)
    with pytest.raises(ValueError):
        value_at(st, [1.5, 0.2], L)


@pytest.mark.parametrize("seed", range(3))
def test_tables_match_pointwise(seed):
    rng = np.random.default_rng(seed)
    L = unit_layout(3, 3, 6)
    st = init(3, 4, (6, 6), [(0.0, 1.0)] * 3, seed=seed)
    T = eval_tables(st, L)
    V = T.V.numpy()
    for _ in range(20):
        idx = rng.integers(0, L.n_nodes, size=3)
        x = L.rows[np.arange(3), idx]
        table = np.prod(V[np.arange(3), idx, :], axis=0) @ st.c
        assert abs(value_at(st, x, L) - table) <= 1e-12 * max(1.0, abs(table))


def test_table_derivatives_match_finite_differences():
    st = init(2, 3, (5,), [(-1.0, 1.0)] * 2, seed=4)
    L = Layout.from_grids([composite_grid((-1.0, 1.0), 2, 4)] * 2)
    T = eval_tables(st, L)
    h = 1e-5
    Lp = Layout(L.rows + h, L.weights, L.n_nodes, L.intervals)
    Lm = Layout(L.rows - h, L.weights, L.n_nodes, L.intervals)
    up = raw_jets(st, Lp.t_rows())[0] / T.norms[:, None, :]
    dn = raw_jets(st, Lm.t_rows())[0] / T.norms[:, None, :]
    assert torch.allclose(T.D1, (up - dn) / (2 * h), atol=1e-7)
    assert torch.allclose(T.D2, (up - 2 * T.V + dn) / h ** 2, atol=1e-3)


def test_hermite_layout_and_envelope():
    g = gauss_hermite(60)
    L = Layout.from_grids([g, g])
    assert not L.bounded and L.rows.shape == (2, 60)
    st = init(2, 2, (4,), [None, None], seed=0)
    T = eval_tables(st, L)
    w = L.weights
    assert np.allclose(np.einsum("drp,dr->dp", T.V.numpy() ** 2, w), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        L.face_weights(0, "a")


def test_layout_rejects_mixed_grids():
    with pytest.raises(ValueError):
        Layout.from_grids([composite_grid((0, 1), 2, 4), composite_grid((0, 1), 3, 4)])
    with pytest.raises(ValueError):
        eval_tables(init(2, 1, (2,), [(0.0, 2.0)] * 2), unit_layout(2, 2, 4))


def test_gradients_flow_through_tables():
    L = unit_layout(2, 2, 4)
    st = init(2, 2, (3,), [(0.0, 1.0)] * 2, seed=2)
    theta = torch.tensor(st.theta, requires_grad=True)
    T = eval_tables(st, L, theta)
    (T.D1 ** 2).sum().backward()
    assert theta.grad is not None and torch.all(torch.isfinite(theta.grad))
