import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from sair.errors import InvalidArgumentError, ShapeError
from sair.implicit import (
    build_neighborhood,
    build_query_batch,
    cell_centers,
    gather_cells,
    local_ensemble_query,
    make_coordinate_grid,
)


def identity(feats, offsets):
    return feats


def scipy_bilinear(fmap: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Reference: linear spline sampling at continuous cell indices, edge clamped."""
    C, h, w = fmap.shape
    u = (coords[:, 0] + 1) * h / 2 - 0.5
    v = (coords[:, 1] + 1) * w / 2 - 0.5
    return np.stack([ndimage.map_coordinates(fmap[c], [u, v], order=1, mode="nearest") for c in range(C)], -1)


class TestGrid:
    def test_cell_center_convention(self):
        g = make_coordinate_grid(3, 5, dtype=torch.float64)
        for i in range(3):
            for j in range(5):
                assert g.coords[i, j, 0] == pytest.approx(-1 + (2 * i + 1) / 3)
                assert g.coords[i, j, 1] == pytest.approx(-1 + (2 * j + 1) / 5)

    @given(st.integers(1, 64), st.integers(1, 64))
    def test_strictly_inside(self, h, w):
        c = make_coordinate_grid(h, w, dtype=torch.float64).coords
        assert c.shape == (h, w, 2)
        assert (c.abs() < 1).all()

    @pytest.mark.parametrize("h,w", [(0, 3), (3, 0), (-1, 2)])
    def test_bad_dims(self, h, w):
        with pytest.raises(InvalidArgumentError):
            make_coordinate_grid(h, w)

    def test_flat_is_row_major(self):
        g = make_coordinate_grid(2, 3)
        assert torch.equal(g.flat()[4], g.coords[1, 1])


class TestNeighborhood:
    def test_interior_weights_are_rectangle_areas(self):
        g = make_coordinate_grid(4, 4, dtype=torch.float64)
        p = torch.tensor([-0.3, 0.1], dtype=torch.float64)
        nb = build_neighborhood(g, p)
        areas = []
        for k in range(4):
            diag = nb.centers[3 - k]
            areas.append(abs(float((p[0] - diag[0]) * (p[1] - diag[1]))))
        areas = np.array(areas) / sum(areas)
        np.testing.assert_allclose(nb.weights.numpy(), areas, atol=1e-12)

    def test_neighbor_order_and_offsets(self):
        g = make_coordinate_grid(4, 8, dtype=torch.float64)
        p = torch.tensor([0.1, -0.2], dtype=torch.float64)
        nb = build_neighborhood(g, p)
        r0, c0 = nb.neighbors[0].tolist()
        assert nb.neighbors.tolist() == [[r0, c0], [r0, c0 + 1], [r0 + 1, c0], [r0 + 1, c0 + 1]]
        expect = (p - nb.centers) * torch.tensor([4.0, 8.0], dtype=torch.float64)
        torch.testing.assert_close(nb.offsets, expect)

    def test_exact_center_is_one_hot(self):
        g = make_coordinate_grid(5, 5, dtype=torch.float64)
        nb = build_neighborhood(g, g.coords[2, 3])
        k = int(nb.weights.argmax())
        assert nb.weights[k] == pytest.approx(1.0)
        assert nb.neighbors[k].tolist() == [2, 3]

    def test_border_clamps(self):
        g = make_coordinate_grid(4, 4)
        nb = build_neighborhood(g, torch.tensor([-1.0, 1.0]))
        assert nb.neighbors[:, 0].min() >= 0 and nb.neighbors[:, 1].max() <= 3
        assert nb.weights.sum() == pytest.approx(1.0)
        assert (nb.weights >= 0).all()

    def test_single_cell_grid(self):
        b = build_query_batch(torch.tensor([[0.7, -0.4]]), (1, 1))
        assert (b.index == 0).all()
        assert b.weights.sum().item() == pytest.approx(1.0)

    @pytest.mark.parametrize("bad", [[[1.5, 0.0]], [[float("nan"), 0.0]], [[0.0, float("inf")]]])
    def test_invalid_coords(self, bad):
        with pytest.raises(InvalidArgumentError):
            build_query_batch(torch.tensor(bad), (4, 4))

    def test_wrong_trailing_dim(self):
        with pytest.raises(ShapeError):
            build_query_batch(torch.zeros(3, 3), (4, 4))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 40),
           st.floats(-1, 1, allow_nan=False), st.floats(-1, 1, allow_nan=False))
    def test_simplex(self, h, w, y, x):
        b = build_query_batch(torch.tensor([[y, x]], dtype=torch.float64), (h, w))
        assert (b.weights >= 0).all()
        assert abs(float(b.weights.sum()) - 1) <= 1e-12
        assert int(b.index.max()) < h * w


class TestEnsemble:
    def test_matches_scipy_bilinear(self):
        rng = np.random.default_rng(1)
        fmap = rng.normal(size=(3, 6, 9))
        coords = rng.uniform(-1, 1, size=(500, 2))
        b = build_query_batch(torch.from_numpy(coords), (6, 9))
        out = local_ensemble_query(torch.from_numpy(fmap)[None], b, identity)[0].numpy()
        np.testing.assert_allclose(out, scipy_bilinear(fmap, coords), atol=1e-10)

    def test_constant_map_gives_constant(self):
        fmap = torch.full((1, 2, 5, 7), 0.25)
        coords = torch.rand(100, 2) * 2 - 1
        out = local_ensemble_query(fmap, build_query_batch(coords, (5, 7)), identity)
        torch.testing.assert_close(out, torch.full((1, 100, 2), 0.25))

    def test_continuity_across_cell_boundary(self):
        fmap = torch.randn(1, 4, 8, 8, dtype=torch.float64)
        # the bracketing cells change where a query crosses a cell-center line
        boundary = float(cell_centers(8, dtype=torch.float64)[3])
        eps = 1e-9
        for y in np.linspace(-0.99, 0.99, 17):
            c = torch.tensor([[y, boundary - eps], [y, boundary + eps]], dtype=torch.float64)
            out = local_ensemble_query(fmap, build_query_batch(c, (8, 8)), identity)[0]
            assert (out[0] - out[1]).abs().max() < 1e-7

    def test_grid_mismatch(self):
        b = build_query_batch(torch.zeros(4, 2), (4, 4))
        with pytest.raises(ShapeError):
            gather_cells(torch.zeros(1, 3, 5, 4), b)

    def test_batch_broadcast(self):
        fmap = torch.randn(3, 2, 4, 4)
        b = build_query_batch(torch.rand(10, 2) * 2 - 1, (4, 4))
        assert local_ensemble_query(fmap, b, identity).shape == (3, 10, 2)

    def test_decoder_sees_offsets(self):
        fmap = torch.zeros(1, 1, 4, 4)
        b = build_query_batch(torch.rand(20, 2) * 2 - 1, (4, 4))
        out = local_ensemble_query(fmap, b, lambda f, o: o)
        # the weighted mean offset is zero for bilinear weights away from borders
        inner = (b.coords[0].abs() < 0.75).all(-1)
        assert out[0, inner].abs().max() < 1e-5

    def test_cell_hint_passed_through(self):
        fmap = torch.zeros(1, 1, 4, 4)
        cell = torch.full((5, 2), 0.5)
        b = build_query_batch(torch.zeros(5, 2), (4, 4), cell=cell)
        out = local_ensemble_query(fmap, b, lambda f, o, c: c)
        torch.testing.assert_close(out[0], torch.full((5, 2), 2.0))

    def test_gradient_float64(self):
        fmap = torch.randn(1, 2, 3, 3, dtype=torch.float64, requires_grad=True)
        b = build_query_batch(torch.rand(7, 2, dtype=torch.float64) * 1.8 - 0.9, (3, 3))
        lin = torch.nn.Linear(4, 2).double()

        def decode(f, o):
            return torch.tanh(lin(torch.cat([f, o], -1)))

        assert torch.autograd.gradcheck(lambda m: local_ensemble_query(m, b, decode), (fmap,))


def test_cell_centers_symmetric():
    c = cell_centers(7, dtype=torch.float64)
    torch.testing.assert_close(c, -c.flip(0))
    assert math.isclose(float(c[3]), 0.0, abs_tol=1e-15)
