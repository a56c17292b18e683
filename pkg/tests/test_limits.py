import numpy as np
import pytest
from scipy import stats as sps
from scipy.integrate import cumulative_trapezoid

from gwiforest.errors import ConfigError, HorizonError
from gwiforest.limits import (
    DrivingPaths,
    GridPath,
    _band_occupation_kernel,
    build_left_height,
    build_limit_system,
    build_root_flow,
    first_passage_inverse,
    lamperti_solve,
    left_height_band_occupation,
    local_time_field,
    mcbi_sde,
    occupation_residual,
    sample_driving_paths,
    shift_by_stieltjes,
    simulate_brownian_height,
    simulate_height_batch,
    system_invariant_report,
    write_trajectory_csv,
)
from gwiforest.scaling import Mechanism
from gwiforest.stats import mean_trajectory

MECH1 = Mechanism(beta=(0.5,), alpha=((0.0,),), delta=(1.0,), x0=(0.0,))
MECH2 = Mechanism(
    beta=(0.5, 0.5),
    alpha=((0.0, 0.5), (0.5, 0.0)),
    delta=(1.0, 1.0),
    x0=(0.0, 0.0),
)


class TestGridPath:
    def test_length_must_match_horizon(self):
        GridPath(dt=0.5, values=np.zeros(5), t_max=2.0)
        with pytest.raises(ConfigError):
            GridPath(dt=0.5, values=np.zeros(4), t_max=2.0)

    def test_rejects_bad_step_and_nonfinite(self):
        with pytest.raises(ConfigError):
            GridPath(dt=0.0, values=np.zeros(3), t_max=1.0)
        with pytest.raises(ConfigError):
            GridPath(dt=0.5, values=np.array([0.0, np.nan, 0.0]), t_max=1.0)

    def test_times(self):
        gp = GridPath(dt=0.25, values=np.zeros(5), t_max=1.0)
        assert np.allclose(gp.times, [0, 0.25, 0.5, 0.75, 1.0])


class TestBrownianHeight:
    def test_shapes_and_structure(self):
        x, h, d = simulate_brownian_height(0.5, 0.0, 1e-3, 2.0, 42)
        assert x.values.size == 2001
        assert h.values[0] == 0.0
        assert np.all(h.values >= 0.0)
        assert np.all(np.diff(d.values) >= 0.0)
        assert d.values[0] == 0.0
        # the three paths are one identity: H = (X + descent)/beta
        assert np.allclose(h.values, (x.values + d.values) / 0.5)

    def test_descent_mean_reflection_oracle(self):
        # E[-min X] at t=1 for X = sqrt(2 beta) B is sqrt(2 beta) sqrt(2/pi)
        batch = simulate_height_batch(0.5, 0.0, 1e-3, 1.0, 99, 4_000)
        want = np.sqrt(2.0 / np.pi)
        got = batch.descent[:, -1].mean()
        assert abs(got - want) < 0.05

    def test_drift_shows_in_endpoint(self):
        batch = simulate_height_batch(0.5, -2.0, 1e-3, 1.0, 7, 4_000)
        assert abs(batch.path[:, -1].mean() + 2.0) < 0.07

    def test_deterministic_given_seed(self):
        a = simulate_brownian_height(0.5, 0.0, 1e-2, 1.0, 5)
        b = simulate_brownian_height(0.5, 0.0, 1e-2, 1.0, 5)
        assert np.array_equal(a[0].values, b[0].values)

    def test_rejects_bad_parameters(self):
        with pytest.raises(ConfigError):
            simulate_brownian_height(0.0, 0.0, 1e-3, 1.0, 0)
        with pytest.raises(ConfigError):
            simulate_brownian_height(0.5, 0.0, -1e-3, 1.0, 0)
        with pytest.raises(ConfigError):
            simulate_brownian_height(0.5, 0.0, 1e-3, 1e-4, 0)


class TestFirstPassage:
    def test_linear_path(self):
        gp = GridPath(dt=0.01, values=np.arange(201) * 0.01, t_max=2.0)
        times, ok = first_passage_inverse(gp, [0.5, 1.5])
        assert ok.all()
        # passage strictly above the level happens one step later
        assert np.allclose(times, [0.51, 1.51])

    def test_step_path_and_horizon_flag(self):
        vals = np.concatenate([np.zeros(100), np.full(101, 2.0)])
        gp = GridPath(dt=0.01, values=vals, t_max=2.0)
        times, ok = first_passage_inverse(gp, [1.0, 2.0, 5.0])
        assert list(ok) == [True, False, False]
        assert times[0] == pytest.approx(1.0)
        assert np.isnan(times[1]) and np.isnan(times[2])

    def test_rejects_decreasing_input(self):
        gp = GridPath(dt=0.5, values=np.array([0.0, 1.0, 0.5]), t_max=1.0)
        with pytest.raises(ConfigError):
            first_passage_inverse(gp, [0.2])

    def test_double_inverse_recovers_the_path(self):
        rng = np.random.default_rng(3)
        inc = rng.uniform(0.01, 0.1, 300)
        vals = np.concatenate([[0.0], np.cumsum(inc)])
        dt = 0.02
        gp = GridPath(dt=dt, values=vals, t_max=300 * dt)
        dlev = 0.005
        levels = np.arange(0.0, vals[-1] - 0.15, dlev)
        inv, ok = first_passage_inverse(gp, levels)
        assert ok.all()
        inv_path = GridPath(dt=dlev, values=inv, t_max=(levels.size - 1) * dlev)
        back, ok2 = first_passage_inverse(inv_path, gp.times[:-20])
        got = back[ok2]
        want = vals[: -20][ok2]
        # recovery is within one cell on each axis
        assert np.all(np.abs(got - want) <= inc.max() + dlev + 1e-9)


class TestRootFlow:
    def test_no_mass_means_affine(self):
        z = np.zeros((2, 101))
        flow = build_root_flow(MECH2, z, 0.01)
        grid = np.arange(101) * 0.01
        assert np.allclose(flow[0], grid)
        assert np.allclose(flow[1], grid)

    def test_single_type_ignores_own_mass(self):
        mech = Mechanism(beta=(0.5,), alpha=((-1.0,),), delta=(2.0,), x0=(0.3,))
        z = np.abs(np.random.default_rng(0).normal(1.0, 0.5, (1, 51)))
        flow = build_root_flow(mech, z, 0.02)
        assert np.allclose(flow[0], 0.3 + 2.0 * np.arange(51) * 0.02)

    def test_matches_quadrature_oracle(self):
        rng = np.random.default_rng(8)
        z = np.abs(rng.normal(1.0, 0.5, (2, 301)))
        dv = 0.005
        flow = build_root_flow(MECH2, z, dv)
        grid = np.arange(301) * dv
        for j in range(2):
            other = 1 - j
            cum = cumulative_trapezoid(z[other], dx=dv, initial=0.0)
            want = 0.0 + 1.0 * grid + 0.5 * cum
            assert np.abs(flow[j] - want).max() < 1e-10

    def test_slope_at_least_immigration_rate(self):
        rng = np.random.default_rng(1)
        z = np.abs(rng.normal(1.0, 0.5, (2, 301)))
        flow = build_root_flow(MECH2, z, 0.005)
        assert np.diff(flow, axis=1).min() / 0.005 >= 1.0 - 1e-9

    def test_batched_input(self):
        z = np.zeros((4, 2, 11))
        flow = build_root_flow(MECH2, z, 0.1)
        assert flow.shape == (4, 2, 11)

    def test_rejects_mismatched_shapes(self):
        with pytest.raises(ConfigError):
            build_root_flow(MECH2, np.zeros((3, 11)), 0.1)
        with pytest.raises(ConfigError):
            build_root_flow(MECH2, np.zeros((2, 11)), -0.1)


class TestMcbiSde:
    def test_zero_interaction_mean_is_affine(self):
        out = mcbi_sde(MECH1, 1e-3, 1.0, 31, n_paths=4_000)
        assert out.values.shape == (4_000, 1, 1001)
        got = out.values[:, 0, -1].mean()
        assert abs(got - 1.0) < 0.05
        assert out.clamp_fraction < 0.01
        assert np.all(out.values >= 0.0)

    def test_negative_drift_mean_tracks_the_flow_oracle(self):
        mech = Mechanism(beta=(0.5,), alpha=((-1.0,),), delta=(1.0,), x0=(0.0,))
        out = mcbi_sde(mech, 1e-3, 1.0, 13, n_paths=4_000)
        grid = [0.25, 0.5, 1.0]
        want = mean_trajectory(mech.alpha, mech.delta, mech.x0, grid)[:, 0]
        for g, w in zip(grid, want):
            got = out.values[:, 0, int(g * 1000)].mean()
            assert abs(got - w) < 0.04

    def test_coupled_mean_tracks_the_flow_oracle(self):
        out = mcbi_sde(MECH2, 1e-3, 0.5, 29, n_paths=3_000)
        want = mean_trajectory(MECH2.alpha, MECH2.delta, MECH2.x0, 0.5)[0]
        got = out.values[:, :, -1].mean(axis=0)
        assert np.all(np.abs(got - want) < 0.05)

    def test_deterministic_given_seed(self):
        a = mcbi_sde(MECH1, 1e-2, 0.5, 55, n_paths=10)
        b = mcbi_sde(MECH1, 1e-2, 0.5, 55, n_paths=10)
        assert np.array_equal(a.values, b.values)

    def test_rejects_zero_diffusion(self):
        mech = Mechanism(beta=(0.0,), alpha=((0.0,),), delta=(1.0,), x0=(0.0,))
        with pytest.raises(ConfigError):
            mcbi_sde(mech, 1e-3, 1.0, 0)


class TestLimitSystem:
    def test_shapes_and_invariants(self):
        for seed in (0, 1, 2):
            system = build_limit_system(
                MECH2, dt=1e-3, t_max=1.0, dv=1e-3, v_max=0.6, rng=seed
            )
            assert system.mass.shape == (2, 601)
            assert system.root_flow.shape == (2, 601)
            assert system.height.shape == (2, 1001)
            report = system_invariant_report(system)
            assert report.ok, report

    def test_deterministic_given_seed(self):
        a = build_limit_system(MECH2, dt=1e-2, t_max=0.5, dv=1e-2, v_max=0.3, rng=4)
        b = build_limit_system(MECH2, dt=1e-2, t_max=0.5, dv=1e-2, v_max=0.3, rng=4)
        assert np.array_equal(a.mass, b.mass)
        assert np.array_equal(a.path, b.path)


class TestLeftHeight:
    def test_single_type_shift_has_closed_form(self):
        # no cross terms: the root flow is exactly x + delta v, so the shift
        # is the grid version of max(0, (descent - x)/delta)
        mech = Mechanism(beta=(0.5,), alpha=((0.0,),), delta=(2.0,), x0=(0.4,))
        system = build_limit_system(
            mech, dt=1e-3, t_max=1.0, dv=1e-3, v_max=3.0, rng=11
        )
        lh = build_left_height(system, 1)
        descent = system.descent[0][: lh.n_valid]
        want = np.maximum(0.0, (descent - 0.4) / 2.0)
        assert np.all(lh.shift >= want - 1e-12)
        assert np.all(lh.shift <= want + 1e-3 + 1e-12)
        assert np.allclose(lh.values, system.height[0][: lh.n_valid] + lh.shift)

    def test_flat_while_descent_under_initial_mass(self):
        mech = Mechanism(beta=(0.5,), alpha=((0.0,),), delta=(1.0,), x0=(0.5,))
        system = build_limit_system(
            mech, dt=1e-3, t_max=0.5, dv=1e-3, v_max=2.0, rng=3
        )
        lh = build_left_height(system, 1)
        early = system.descent[0][: lh.n_valid] < 0.5
        assert np.all(lh.shift[early] == 0.0)
        assert np.array_equal(
            lh.values[early], system.height[0][: lh.n_valid][early]
        )

    def test_truncation_flag_when_flow_range_is_short(self):
        system = build_limit_system(
            MECH2, dt=1e-3, t_max=2.0, dv=1e-3, v_max=0.05, rng=19
        )
        lh = build_left_height(system, 1)
        assert lh.truncated
        assert lh.n_valid < system.descent[0].size
        assert lh.values.size == lh.n_valid

    def test_stieltjes_form_agrees_within_two_cells(self):
        for seed in (7, 8):
            system = build_limit_system(
                MECH2, dt=1e-3, t_max=2.0, dv=1e-3, v_max=0.6, rng=seed
            )
            for j in (1, 2):
                lh = build_left_height(system, j)
                other = shift_by_stieltjes(system, j)
                gap = np.abs(other[: lh.n_valid] - lh.shift).max()
                assert gap <= 2 * system.dv + 1e-12

    def test_type_index_validated(self):
        system = build_limit_system(
            MECH1, dt=1e-2, t_max=0.2, dv=1e-2, v_max=0.2, rng=0
        )
        with pytest.raises(ConfigError):
            build_left_height(system, 2)


class TestLocalTime:
    def test_tent_path_spends_two_units_per_level(self):
        dt = 1e-3
        tent = np.concatenate([np.arange(0, 1, dt), np.arange(1, 0, -dt)])
        # half-step offsets keep samples off the band edges, so the counts
        # are exact: 20 up-leg plus 20 down-leg samples per band
        levels = np.array([0.2, 0.5, 0.7]) + dt / 2
        est = local_time_field(tent, levels, 0.02, dt=dt)
        assert np.allclose(est, 2.0)

    def test_band_must_resolve_the_grid(self):
        with pytest.raises(ConfigError):
            local_time_field(np.zeros(10), [0.0], 1e-4, dt=1e-3)

    def test_occupation_residual_small_on_smooth_path(self):
        dt = 1e-3
        tent = np.concatenate([np.arange(0, 1, dt), np.arange(1, 0, -dt)])
        levels = np.arange(-0.2, 1.3, 0.01)
        res = occupation_residual(tent, levels, 0.02, lambda x: x * x + 1.0, dt=dt)
        duration = tent.size * dt
        assert res < 0.05 * duration

    def test_residual_halves_under_refinement(self):
        rng = np.random.default_rng(0)
        inc = rng.normal(0.0, np.sqrt(5e-4), 40_000)
        fine = np.concatenate([[0.0], np.cumsum(inc)])
        coarse = fine[::2]

        def residual(vals, dt, band, dlev):
            lo = vals.min() - 3 * band
            hi = vals.max() + 3 * band
            levels = np.arange(lo, hi, dlev)
            return occupation_residual(
                vals, levels, band, lambda x: x * x + 1.0, dt=dt
            )

        r_coarse = residual(coarse, 1e-3, 0.04, 0.01)
        r_fine = residual(fine, 5e-4, 0.02, 0.005)
        assert r_coarse / r_fine >= 1.5

    def test_residual_needs_uniform_levels(self):
        with pytest.raises(ConfigError):
            occupation_residual(
                np.zeros(10), np.array([0.0, 0.1, 0.3]), 0.05, lambda x: x, dt=1e-3
            )


class TestBandOccupation:
    def test_kernel_matches_vectorized_recount(self):
        rng = np.random.default_rng(0)
        inc = rng.normal(0.0, 0.02, 800)
        flow = 0.3 + np.arange(400) * 0.002 * 1.3
        levels = np.array([0.1, 0.4])
        band = 0.15
        occ = np.zeros(2)
        x, rmin, ptr, status = _band_occupation_kernel(
            inc, 0.5, flow, 0.002, levels, band, levels.max() + band,
            0.0, 0.0, 0, occ,
        )
        path = np.concatenate([[0.0], np.cumsum(inc)])
        rmins = np.minimum.accumulate(path)
        ptrs = np.searchsorted(flow, -rmins, side="right")
        vals = (path - rmins) / 0.5 + ptrs * 0.002
        want = np.array(
            [
                np.count_nonzero((lv < vals[1:]) & (vals[1:] <= lv + band))
                for lv in levels
            ],
            dtype=float,
        )
        assert status == 0
        assert np.array_equal(occ, want)

    def test_kernel_early_stop_matches_literal_replay(self):
        # a strongly descending walk clears the top level quickly; the
        # counts must cover exactly the steps before the stop
        rng = np.random.default_rng(15)
        inc = rng.normal(-0.01, 0.02, 4_000)
        flow = np.arange(400) * 0.002  # starts at 0, slope 1
        levels = np.array([0.05])
        band = 0.02
        occ = np.zeros(1)
        x, rmin, ptr, status = _band_occupation_kernel(
            inc, 0.5, flow, 0.002, levels, band, levels.max() + band,
            0.0, 0.0, 0, occ,
        )
        assert status == 1
        want = 0.0
        xx = rminx = 0.0
        p = 0
        for step in inc:
            xx += step
            if xx < rminx:
                rminx = xx
                while p < flow.size and flow[p] <= -rminx:
                    p += 1
                if p * 0.002 > levels[0] + band:
                    break
            v = (xx - rminx) / 0.5 + p * 0.002
            if levels[0] < v <= levels[0] + band:
                want += 1.0
        assert occ[0] == want

    def test_stops_once_levels_are_cleared(self):
        mech = Mechanism(beta=(0.5,), alpha=((0.0,),), delta=(1.0,), x0=(0.0,))
        system = build_limit_system(
            mech, dt=1e-3, t_max=0.1, dv=1e-3, v_max=5.0, rng=2
        )
        est, finished = left_height_band_occupation(
            system, 1, [0.05], 0.02, 200.0, np.random.default_rng(5)
        )
        assert finished
        assert est[0] > 0.0

    def test_unfinished_when_flow_horizon_too_short(self):
        system = build_limit_system(
            MECH2, dt=1e-3, t_max=0.1, dv=1e-3, v_max=0.02, rng=2
        )
        est, finished = left_height_band_occupation(
            system, 1, [0.5], 0.02, 5.0, np.random.default_rng(5)
        )
        assert not finished

    def test_deterministic_given_seed(self):
        system = build_limit_system(
            MECH1, dt=1e-3, t_max=0.1, dv=1e-3, v_max=3.0, rng=6
        )
        a = left_height_band_occupation(system, 1, [0.2], 0.02, 50.0, 123)
        b = left_height_band_occupation(system, 1, [0.2], 0.02, 50.0, 123)
        assert np.array_equal(a[0], b[0]) and a[1] == b[1]

    def test_band_must_resolve_the_grid(self):
        system = build_limit_system(
            MECH1, dt=1e-2, t_max=0.1, dv=1e-2, v_max=0.2, rng=0
        )
        with pytest.raises(ConfigError):
            left_height_band_occupation(system, 1, [0.1], 1e-3, 1.0, 0)


class TestLamperti:
    def test_zero_driving_is_exactly_affine(self):
        driving = DrivingPaths(dt=1e-3, values=np.zeros((1, 1, 5001)))
        out = lamperti_solve(MECH1, driving, 1e-3, 1.0)
        grid = np.arange(1001) * 1e-3
        assert np.abs(out.values[0, 0] - grid).max() == 0.0
        assert out.clamp_fraction == 0.0
        assert out.n_extensions == 0

    def test_deterministic_line_driving_solves_the_flow_ode(self):
        # driving -t makes the solution m' = -m + 1, m = 1 - exp(-v)
        mech = Mechanism(beta=(0.5,), alpha=((-1.0,),), delta=(1.0,), x0=(0.0,))
        tg = np.arange(3001) * 1e-3
        driving = DrivingPaths(dt=1e-3, values=(-tg)[None, None, :])
        out = lamperti_solve(mech, driving, 1e-3, 1.0)
        grid = np.arange(1001) * 1e-3
        want = 1.0 - np.exp(-grid)
        assert np.abs(out.values[0, 0] - want).max() < 5e-4

    def test_short_driving_extends_with_fresh_noise(self):
        rng = np.random.default_rng(12)
        driving = sample_driving_paths(MECH1, 0.25, 1e-3, rng, 40)
        out = lamperti_solve(MECH1, driving, 1e-3, 1.0, rng=rng, extend=True)
        assert out.n_extensions >= 1
        assert np.isfinite(out.values).all()
        assert np.all(out.values >= 0.0)

    def test_short_driving_fails_without_extension(self):
        driving = sample_driving_paths(MECH1, 0.25, 1e-3, 8, 40)
        with pytest.raises(HorizonError):
            lamperti_solve(MECH1, driving, 1e-3, 1.0, extend=False)
        with pytest.raises(HorizonError):
            lamperti_solve(MECH1, driving, 1e-3, 1.0, rng=None, extend=True)

    def test_agrees_with_direct_sde_in_law(self):
        rng = np.random.default_rng(44)
        driving = sample_driving_paths(MECH1, 2.0, 1e-3, rng, 3_000)
        lam = lamperti_solve(MECH1, driving, 1e-3, 1.0, rng=rng, extend=True)
        sde = mcbi_sde(MECH1, 1e-3, 1.0, rng, n_paths=3_000)
        ks = sps.ks_2samp(lam.values[:, 0, -1], sde.values[:, 0, -1])
        assert ks.statistic < 0.05

    def test_rejects_misshapen_driving(self):
        with pytest.raises(ConfigError):
            lamperti_solve(MECH2, DrivingPaths(dt=1e-3, values=np.zeros((1, 1, 100))), 1e-3, 0.05)


class TestTrajectoryCsv:
    def test_round_trip(self, tmp_path):
        target = tmp_path / "mass.csv"
        vals = np.array([[0.0, 1.0, 2.0], [5.0, 6.0, 7.0]])
        write_trajectory_csv(target, vals, 0.5, names=["a", "b"])
        lines = target.read_text().strip().splitlines()
        assert lines[0] == "time,a,b"
        assert lines[1] == "0.0,0.0,5.0"
        assert lines[3] == "1.0,2.0,7.0"
