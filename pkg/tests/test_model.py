"""Grids, builtin models, diffusion weights, and the model self-check."""

import math

import numpy as np
import pytest

from sdepath.model import (
    DiscretePath,
    Diffusion,
    DriftModel,
    GridError,
    InitialDensity,
    TimeGrid,
    builtin_model,
    gaussian_measurement,
    make_uniform_grid,
    refine_grid,
    validate_model,
)


class TestUniformGrid:
    def test_plain_uniform(self):
        grid = make_uniform_grid(1.0, 2)
        np.testing.assert_array_equal(grid.times, [0.0, 0.5, 1.0])
        assert grid.meas_index.size == 0
        assert grid.n_segments == 2

    def test_measurement_on_existing_point_snaps(self):
        grid = make_uniform_grid(5.0, 5, meas_times=[5.0])
        np.testing.assert_array_equal(grid.times, [0.0, 1.0, 2.0, 3.0, 4.0, 5.0])
        np.testing.assert_array_equal(grid.meas_index, [5])

    def test_measurement_off_grid_is_inserted(self):
        grid = make_uniform_grid(1.0, 2, meas_times=[0.3])
        np.testing.assert_allclose(grid.times, [0.0, 0.3, 0.5, 1.0])
        np.testing.assert_array_equal(grid.meas_index, [1])
        # Insertion grows the grid; the base points survive bitwise.
        assert grid.times.size == 4
        assert 0.5 in grid.times

    def test_duplicate_measurement_times_collapse(self):
        grid = make_uniform_grid(1.0, 4, meas_times=[0.25, 0.25])
        np.testing.assert_array_equal(grid.meas_index, [1])

    def test_deterministic_construction(self):
        a = make_uniform_grid(16.0, 1600, meas_times=np.arange(0.1, 16.0, 0.1))
        b = make_uniform_grid(16.0, 1600, meas_times=np.arange(0.1, 16.0, 0.1))
        np.testing.assert_array_equal(a.times, b.times)
        np.testing.assert_array_equal(a.meas_index, b.meas_index)

    def test_bad_inputs(self):
        with pytest.raises(GridError):
            make_uniform_grid(-1.0, 4)
        with pytest.raises(GridError):
            make_uniform_grid(1.0, 0)
        with pytest.raises(GridError):
            make_uniform_grid(1.0, 4, meas_times=[1.5])

    def test_uneven_partition_rejected(self):
        # 100 segments crammed into [0, 0.5] plus one long tail segment:
        # N * max(delta) = 101 * 0.5 > 10 * T.
        times = np.concatenate([np.linspace(0.0, 0.5, 101), [1.0]])
        with pytest.raises(GridError):
            TimeGrid(times)

    def test_decreasing_times_rejected(self):
        with pytest.raises(GridError):
            TimeGrid(np.array([0.0, 0.5, 0.4, 1.0]))


class TestRefineGrid:
    def test_halving(self):
        grid = make_uniform_grid(1.0, 2)
        fine = refine_grid(grid, 2)
        np.testing.assert_array_equal(fine.times, [0.0, 0.25, 0.5, 0.75, 1.0])

    def test_nested_bitwise(self):
        grid = make_uniform_grid(5.0, 7, meas_times=[1.3])
        fine = refine_grid(refine_grid(grid, 2), 2)
        # Every coarse point appears bitwise in the refined grid.
        assert np.all(np.isin(grid.times, fine.times))

    def test_measurement_index_scales(self):
        grid = make_uniform_grid(1.0, 2, meas_times=[0.3])
        fine = refine_grid(grid, 4)
        np.testing.assert_array_equal(fine.meas_index, grid.meas_index * 4)
        t_meas = fine.times[fine.meas_index[0]]
        assert t_meas == grid.times[grid.meas_index[0]]

    def test_factor_one_is_identity(self):
        grid = make_uniform_grid(1.0, 3)
        assert refine_grid(grid, 1) is grid

    def test_bad_factor(self):
        with pytest.raises(GridError):
            refine_grid(make_uniform_grid(1.0, 2), 0)


class TestDiscretePath:
    def test_interp_matches_nodes_and_midpoints(self):
        grid = make_uniform_grid(1.0, 2)
        path = DiscretePath(grid, np.array([0.0, 1.0, 4.0]))
        np.testing.assert_allclose(path.interp(0.5), [1.0])
        np.testing.assert_allclose(path.interp(0.75), [2.5])
        np.testing.assert_allclose(path.interp([0.0, 1.0]), [[0.0], [4.0]])

    def test_shape_mismatch(self):
        grid = make_uniform_grid(1.0, 2)
        with pytest.raises(ValueError):
            DiscretePath(grid, np.zeros(2))

    def test_vector_states_kept_2d(self):
        grid = make_uniform_grid(1.0, 1)
        path = DiscretePath(grid, np.array([[1.0, 2.0], [3.0, 4.0]]))
        assert path.dim == 2
        np.testing.assert_allclose(path.interp(0.5), [2.0, 3.0])


class TestDiffusion:
    def test_weight_is_inverse_of_ggt(self):
        g = np.array([[2.0, 0.0], [1.0, 1.0]])
        d = Diffusion.from_matrix(g)
        np.testing.assert_allclose(d.weight @ (g @ g.T), np.eye(2), atol=1e-12)

    def test_near_singular_rejected(self):
        with pytest.raises(ValueError):
            Diffusion.from_matrix(np.diag([1.0, 1e-13]))

    def test_non_square_rejected(self):
        with pytest.raises(ValueError):
            Diffusion.from_matrix(np.ones((2, 3)))


class TestBuiltinModels:
    def test_benes_drift_values(self):
        drift, diffusion, init = builtin_model("benes")
        assert drift.dim == 1
        np.testing.assert_allclose(drift.f(0.0, np.array([0.0])), [0.0])
        x = np.array([0.3])
        th = math.tanh(0.3)
        np.testing.assert_allclose(drift.f(0.0, x), [th])
        np.testing.assert_allclose(drift.div(0.0, x), 1.0 - th * th)
        np.testing.assert_allclose(diffusion.g, [[1.0]])
        assert init.log_nu(np.array([0.0])) == pytest.approx(
            -0.5 * math.log(2.0 * math.pi * 0.16))

    def test_vdp_drift_values(self):
        drift, diffusion, _ = builtin_model("vdp")
        assert drift.dim == 2
        x = np.array([0.5, -1.0])
        f = drift.f(0.0, x)
        np.testing.assert_allclose(f, [-1.0, -0.5 + 2.0 * 0.75 * (-1.0)])
        assert drift.div(0.0, np.zeros(2)) == pytest.approx(2.0)
        np.testing.assert_allclose(diffusion.g, 0.1 * np.eye(2))

    def test_ou_drift_values(self):
        drift, diffusion, init = builtin_model("ou", a=2.0, g=0.5, init_var=0.25)
        np.testing.assert_allclose(drift.f(0.0, np.array([1.5])), [-3.0])
        np.testing.assert_allclose(diffusion.weight, [[4.0]])
        np.testing.assert_allclose(init.mode, [0.0])

    def test_unknown_model_and_params(self):
        with pytest.raises(ValueError):
            builtin_model("heston")
        with pytest.raises(ValueError):
            builtin_model("benes", sigma=2.0)
        with pytest.raises(ValueError):
            builtin_model("ou", a=-1.0)

    @pytest.mark.parametrize("name", ["benes", "vdp", "ou"])
    def test_divergence_matches_jacobian_trace(self, name):
        drift, _, _ = builtin_model(name)
        rng = np.random.default_rng(7)
        for _ in range(50):
            t = float(rng.uniform(0.0, 10.0))
            x = rng.normal(size=drift.dim)
            j = np.asarray(drift.jac(t, x))
            assert abs(drift.div(t, x) - np.trace(j)) <= 1e-12

    @pytest.mark.parametrize("name", ["benes", "vdp", "ou"])
    def test_batch_rows_agree_with_scalar(self, name):
        drift, _, _ = builtin_model(name)
        rng = np.random.default_rng(3)
        ts = rng.uniform(0.0, 5.0, size=20)
        xs = rng.normal(size=(20, drift.dim))
        ws = rng.normal(size=(20, drift.dim, drift.dim))
        f_loop = np.stack([drift.f(t, x) for t, x in zip(ts, xs)])
        np.testing.assert_allclose(drift.f_rows(ts, xs), f_loop, atol=1e-13)
        j_loop = np.stack([drift.jac(t, x) for t, x in zip(ts, xs)])
        np.testing.assert_allclose(drift.jac_rows(ts, xs), j_loop, atol=1e-13)
        d_loop = np.array([drift.div(t, x) for t, x in zip(ts, xs)])
        np.testing.assert_allclose(drift.div_rows(ts, xs), d_loop, atol=1e-13)
        c_loop = np.stack([drift.jac_deriv_contract(t, x, w)
                           for t, x, w in zip(ts, xs, ws)])
        np.testing.assert_allclose(drift.jdc_rows(ts, xs, ws), c_loop, atol=1e-13)


class TestValidateModel:
    @pytest.mark.parametrize("name", ["benes", "vdp"])
    def test_builtins_pass(self, name):
        drift, _, _ = builtin_model(name)
        report = validate_model(drift)
        assert report.passed
        assert report.max_div_error <= 1e-12
        assert report.max_jac_rel_error <= 1e-6

    def test_wrong_divergence_is_caught(self):
        base, _, _ = builtin_model("benes")
        broken = DriftModel(dim=1, f=base.f, jac=base.jac,
                            div=lambda t, x: base.div(t, x) + 1.0)
        report = validate_model(broken)
        assert not report.passed
        assert report.max_div_error == pytest.approx(1.0, abs=1e-10)

    def test_wrong_jacobian_is_caught(self):
        base, _, _ = builtin_model("benes")
        broken = DriftModel(dim=1, f=base.f,
                            jac=lambda t, x: np.array([[0.5]]),
                            div=base.div)
        report = validate_model(broken)
        assert not report.passed
        assert report.max_jac_rel_error > 1e-3


class TestDensitiesAndMeasurements:
    def test_gaussian_initial_density(self):
        init = InitialDensity.gaussian([1.0], [[4.0]])
        assert init.log_nu(np.array([1.0])) == pytest.approx(
            -0.5 * math.log(2.0 * math.pi * 4.0))
        # log density drops by z^2/2 one standard deviation out.
        drop = init.log_nu(np.array([1.0])) - init.log_nu(np.array([3.0]))
        assert drop == pytest.approx(0.5)
        np.testing.assert_allclose(init.grad_log_nu(np.array([3.0])), [-0.5])
        np.testing.assert_allclose(init.mode, [1.0])

    def test_gaussian_measurement_scalar(self):
        m = gaussian_measurement(t=2.0, y=1.0, var=0.25)
        x = np.array([1.0])
        assert m.t == 2.0
        assert m.log_lik(m.y, x) == pytest.approx(-0.5 * math.log(2.0 * math.pi * 0.25))
        np.testing.assert_allclose(m.grad_log_lik(m.y, np.array([1.5])), [-2.0])

    def test_gaussian_measurement_picks_component(self):
        m = gaussian_measurement(t=0.0, y=0.0, var=1.0, component=1, dim=2)
        g = m.grad_log_lik(0.0, np.array([5.0, 1.0]))
        np.testing.assert_allclose(g, [0.0, -1.0])

    def test_nonpositive_variance_rejected(self):
        with pytest.raises(ValueError):
            gaussian_measurement(t=0.0, y=0.0, var=0.0)
