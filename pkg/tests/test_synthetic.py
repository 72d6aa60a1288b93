import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from snpiv.operator import SpectralOperator, random_operator
from snpiv.synthetic import (
    Samples,
    SamplerError,
    Scenario,
    StructuralFunction,
    build_scenario,
    generate,
    load_scenario,
    make_decay,
    read_samples,
    rejection_sample,
    sample_outcomes,
    save_scenario,
    unit_structural_function,
    write_samples,
)


@pytest.fixture(scope="module")
def scenario_data():
    s = Scenario(c_sigma=0.5, c_alpha=0.5, seed_op=1, seed_data=2)
    op, h0 = build_scenario(s)
    return s, op, h0, generate(s, 100_000)


class TestMakeDecay:
    def test_flat(self):
        np.testing.assert_array_equal(make_decay(0.7, 1.0, 4), np.full(4, 0.7))

    def test_endpoints(self):
        np.testing.assert_allclose(make_decay(1.0, 0.0, 2), [1.0, 0.0])

    def test_midpoint(self):
        np.testing.assert_allclose(make_decay(1.0, 0.5, 3), [1.0, 0.75, 0.5])

    def test_single_entry(self):
        np.testing.assert_array_equal(make_decay(0.3, 0.2, 1), [0.3])

    @given(st.floats(0.01, 1.0), st.floats(0.0, 1.0), st.integers(2, 30))
    def test_formula_and_monotone(self, head, c, r):
        d = make_decay(head, c, r)
        i = np.arange(1, r + 1)
        np.testing.assert_allclose(d, head * (1 - (1 - c) * (i - 1) / (r - 1)), rtol=1e-12, atol=1e-15)
        assert np.all(np.diff(d) <= 1e-15)
        assert d[-1] == pytest.approx(c * head)

    def test_invalid(self):
        with pytest.raises(ValueError):
            make_decay(1.0, 1.5, 3)
        with pytest.raises(ValueError):
            make_decay(1.0, 0.5, 0)


class TestScenario:
    def test_invariants(self):
        for bad in (dict(d=1), dict(c_sigma=1.2), dict(c_alpha=-0.1), dict(noise_var=-1.0)):
            with pytest.raises(ValueError):
                Scenario(**bad)

    def test_uniform_alpha(self):
        _, h0 = build_scenario(Scenario(c_alpha=1.0))
        np.testing.assert_allclose(h0.alpha, np.full(10, 1 / math.sqrt(10)), rtol=1e-14)

    @given(st.floats(0.0, 1.0))
    @settings(max_examples=20, deadline=None)
    def test_alpha_unit_norm(self, c_alpha):
        _, h0 = build_scenario(Scenario(c_alpha=c_alpha, c_sigma=1.0))
        assert abs(np.linalg.norm(h0.alpha) - 1.0) <= 1e-12

    def test_pre_scale_sigma(self):
        op, _ = build_scenario(Scenario(d=11, c_sigma=0.1))
        np.testing.assert_allclose(op.sigma / op.scale, np.linspace(1.0, 0.1, 10), rtol=1e-12)

    def test_deterministic(self):
        a, b = build_scenario(Scenario(seed_op=7))[0], build_scenario(Scenario(seed_op=7))[0]
        np.testing.assert_array_equal(a.rot_x, b.rot_x)
        np.testing.assert_array_equal(a.sigma, b.sigma)

    def test_file_round_trip(self, tmp_path):
        s = Scenario(d=7, c_sigma=0.3, c_alpha=0.6, noise_var=0.05, seed_op=4, seed_data=9)
        save_scenario(s, tmp_path / "s.txt")
        assert load_scenario(tmp_path / "s.txt") == s

    def test_file_comments_and_defaults(self, tmp_path):
        (tmp_path / "s.txt").write_text("# good regime\nc_sigma = 1.0\nc_alpha=0.1  # aligned\n")
        assert load_scenario(tmp_path / "s.txt") == Scenario(c_sigma=1.0, c_alpha=0.1)

    def test_file_unknown_key(self, tmp_path):
        (tmp_path / "s.txt").write_text("c_sigma=1.0\nbogus=3\n")
        with pytest.raises(ValueError, match=":2:"):
            load_scenario(tmp_path / "s.txt")


class TestStructuralFunction:
    def test_image_is_t_h0(self, scenario_data):
        _, op, h0, _ = scenario_data
        z = np.linspace(0, 2 * math.pi, 11)
        np.testing.assert_allclose(h0.image(z), op.eval_left(z) @ (op.sigma * h0.alpha), atol=1e-15)

    def test_unit_normalization(self):
        op = random_operator([0.1, 0.1, 0.1], seed=0)
        assert np.linalg.norm(unit_structural_function([3.0, 4.0, 0.0], op).alpha) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            unit_structural_function(np.zeros(3), op)

    def test_length_checked(self):
        op = random_operator([0.1, 0.1], seed=0)
        with pytest.raises(ValueError):
            StructuralFunction(np.ones(3), op)


class TestRejectionSample:
    def test_independent_case_uniform(self):
        r = 4
        op = SpectralOperator(np.zeros(r), np.eye(r), np.eye(r))
        rng = np.random.default_rng(0)
        s = rejection_sample(op, 100_000, rng)
        counts, _, _ = np.histogram2d(s.x, s.z, bins=10, range=[[0, 2 * math.pi]] * 2)
        assert stats.chisquare(counts.ravel()).pvalue > 1e-3

    def test_in_domain(self, scenario_data):
        *_, data = scenario_data
        for col in (data.x, data.z):
            assert np.all((col >= 0) & (col < 2 * math.pi))

    def test_cross_moments(self, scenario_data):
        _, op, _, data = scenario_data
        v, u = op.eval_right(data.x)[:, :5], op.eval_left(data.z)[:, :5]
        prod = v[:, :, None] * u[:, None, :]
        est = prod.mean(axis=0)
        se = prod.std(axis=0) / math.sqrt(len(data))
        assert np.all(np.abs(est - np.diag(op.sigma[:5])) <= 4 * se)

    def test_singular_function_means(self, scenario_data):
        _, op, _, data = scenario_data
        v = op.eval_right(data.x)
        assert np.all(np.abs(v.mean(axis=0)) <= 4 * v.std(axis=0) / math.sqrt(len(data)))

    def test_marginals_uniform(self, scenario_data):
        *_, data = scenario_data
        for col in (data.x, data.z):
            assert stats.kstest(col / (2 * math.pi), "uniform").pvalue > 1e-3

    def test_low_acceptance_raises(self, monkeypatch):
        import snpiv.synthetic as syn
        op = random_operator([0.2, 0.1], seed=0)
        monkeypatch.setattr(syn, "MIN_ACCEPTANCE", 0.99)
        with pytest.raises(SamplerError, match="acceptance"):
            syn.rejection_sample(op, 1000, np.random.default_rng(0))

    def test_envelope_violation_raises(self):
        op = random_operator([0.5, 0.4], seed=0)
        # fake a too-small grid maximum so the envelope is violated
        object.__setattr__(op, "_extrema", (op.density_min, 0.5))
        with pytest.raises(SamplerError, match="envelope"):
            rejection_sample(op, 1000, np.random.default_rng(0))

    def test_deterministic(self):
        s = Scenario(seed_data=5)
        a, b = generate(s, 500), generate(s, 500)
        np.testing.assert_array_equal(a.x, b.x)
        np.testing.assert_array_equal(a.y, b.y)


class TestSampleOutcomes:
    def test_zero_everything(self):
        op = random_operator([0.3, 0.2], seed=0)
        h0 = StructuralFunction(np.zeros(2), op)
        pairs = rejection_sample(op, 100, np.random.default_rng(0))
        assert not np.any(sample_outcomes(h0, pairs, 0.0, np.random.default_rng(1)).y)

    def test_noiseless_is_image(self, scenario_data):
        _, op, h0, data = scenario_data
        pairs = data.subset(slice(0, 1000))
        y = sample_outcomes(h0, pairs, 0.0, np.random.default_rng(0)).y
        # independent evaluation: sum_i sigma_i alpha_i u_i(z)
        expected = np.sum(op.sigma * h0.alpha * op.eval_left(pairs.z), axis=1)
        assert np.abs(y - expected).max() <= 1e-12

    def test_outcome_moments(self, scenario_data):
        _, op, h0, data = scenario_data
        u = op.eval_left(data.z)
        prod = data.y[:, None] * u
        est, se = prod.mean(axis=0), prod.std(axis=0) / math.sqrt(len(data))
        assert np.all(np.abs(est - op.sigma * h0.alpha) <= 4 * se)

    def test_exogeneity(self, scenario_data):
        _, op, h0, data = scenario_data
        resid = data.y - h0(data.x)
        design = np.column_stack([np.ones(len(data)), op.eval_left(data.z)[:, :5]])
        coef, *_ = np.linalg.lstsq(design, resid, rcond=None)
        e = resid - design @ coef
        cov = np.linalg.inv(design.T @ design) * (e @ e / (len(data) - design.shape[1]))
        assert np.all(np.abs(coef) <= 4 * np.sqrt(np.diag(cov)))

    def test_noise_variance(self, scenario_data):
        s, _, h0, data = scenario_data
        v = data.y - h0.image(data.z)
        assert v.var() == pytest.approx(s.noise_var, rel=0.02)

    def test_negative_variance_rejected(self, scenario_data):
        _, op, h0, data = scenario_data
        with pytest.raises(ValueError):
            sample_outcomes(h0, data.subset(slice(0, 5)), -0.1, np.random.default_rng(0))


class TestSampleFiles:
    def test_round_trip_labeled(self, tmp_path, scenario_data):
        *_, data = scenario_data
        part = data.subset(slice(0, 50))
        write_samples(part, tmp_path / "d.csv")
        back = read_samples(tmp_path / "d.csv")
        for name in ("z", "x", "y"):
            np.testing.assert_array_equal(getattr(back, name), getattr(part, name))
        assert (tmp_path / "d.csv").read_text().startswith("z,x,y\n")

    def test_round_trip_unlabeled(self, tmp_path):
        s = Samples(np.array([0.1, 0.2]), np.array([1.0 / 3, 2.0]))
        write_samples(s, tmp_path / "u.csv")
        back = read_samples(tmp_path / "u.csv")
        assert back.y is None
        np.testing.assert_array_equal(back.x, s.x)

    def test_bad_row(self, tmp_path):
        (tmp_path / "b.csv").write_text("z,x\n0.1,0.2\n0.3\n")
        with pytest.raises(ValueError, match=":3:"):
            read_samples(tmp_path / "b.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "b.csv").write_text("a,b\n")
        with pytest.raises(ValueError):
            read_samples(tmp_path / "b.csv")
