import numpy as np
import pytest

from triadiff.diffusion import (
    LossWeights,
    add_noise,
    ddim_sample,
    ddim_stride,
    ddpm_sample,
    l1_loss,
    make_schedule,
    recover_clean,
    schedule_to_csv,
    total_loss,
)


class TestSchedule:
    def test_linear_endpoints(self):
        s = make_schedule("linear", 1000)
        assert s.betas[0] == pytest.approx(1e-4)
        assert s.betas[999] == pytest.approx(2e-2)

    def test_single_step(self):
        s = make_schedule("linear", 1)
        assert s.num_steps == 1
        assert np.allclose(s.alpha_bars, [1.0 - s.betas[0]])

    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_alpha_bar_monotone(self, kind):
        s = make_schedule(kind, 500)
        assert s.alpha_bars[-1] < s.alpha_bars[0]
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
        assert s.alpha_bars[0] == pytest.approx(1.0 - s.betas[0])

    def test_invalid_steps(self):
        with pytest.raises(ValueError):
            make_schedule("linear", 0)
        with pytest.raises(ValueError):
            make_schedule("weird", 10)

    def test_sin_cos_identity(self):
        s = make_schedule("linear", 1000)
        lhs = np.sqrt(s.alpha_bars) ** 2 + np.sqrt(1.0 - s.alpha_bars) ** 2
        assert np.all(np.abs(lhs - 1.0) < 1e-12)

    def test_csv_dump(self, tmp_path):
        s = make_schedule("linear", 5)
        path = tmp_path / "sched.csv"
        schedule_to_csv(s, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "step,beta,alpha,alpha_bar"
        assert len(lines) == 6


class TestAddNoise:
    def test_zero_noise(self):
        s = make_schedule("linear", 100)
        x0 = np.arange(4.0)
        xi = add_noise(x0, 17, np.zeros(4), s)
        assert np.allclose(xi, np.sqrt(s.alpha_bars[17]) * x0)

    def test_late_step_mostly_noise(self):
        s = make_schedule("linear", 1000)
        # Frozen from evaluating the default schedule: weight on x0 at the
        # last step is well under 0.15.
        assert np.sqrt(s.alpha_bars[999]) < 0.15

    def test_invertible(self):
        s = make_schedule("linear", 1000)
        rng = np.random.default_rng(3)
        x0 = rng.standard_normal(12)
        eps = rng.standard_normal(12)
        xi = add_noise(x0, 400, eps, s)
        assert np.allclose(recover_clean(xi, 400, eps, s), x0, atol=1e-9)

    def test_shape_mismatch(self):
        s = make_schedule("linear", 10)
        with pytest.raises(ValueError, match="shape"):
            add_noise(np.zeros(3), 0, np.zeros(4), s)

    @pytest.mark.parametrize("step", [100, 500, 999])
    def test_forward_variance(self, step):
        s = make_schedule("linear", 1000)
        rng = np.random.default_rng(7)
        draws = add_noise(np.zeros(100_000), step, rng.standard_normal(100_000), s)
        target = 1.0 - s.alpha_bars[step]
        assert abs(draws.var() / target - 1.0) < 0.02


def point_mass_eps_fn(mu, sched):
    """Analytic noise oracle for a point mass at mu."""

    def eps_fn(x, i, _cond):
        abar = sched.alpha_bars[i]
        return (x - np.sqrt(abar) * mu) / np.sqrt(1.0 - abar)

    return eps_fn


class TestSamplers:
    def test_ddpm_point_mass_oracle(self):
        sched = make_schedule("linear", 200)
        mu = np.array([0.7, -1.3])
        x = ddpm_sample(point_mass_eps_fn(mu, sched), None, (2,), sched,
                        np.random.default_rng(11))
        # The final ancestral step collapses exactly onto the mass.
        assert np.allclose(x, mu, atol=1e-8)

    def test_ddpm_single_step_closed_form(self):
        sched = make_schedule("linear", 1)
        rng = np.random.default_rng(0)
        x_init = np.random.default_rng(0).standard_normal(3)
        eps_hat = 0.5 * x_init
        got = ddpm_sample(lambda x, i, c: 0.5 * x, None, (3,), sched, rng)
        beta = sched.betas[0]
        expected = (x_init - beta / np.sqrt(1 - sched.alpha_bars[0]) * eps_hat) / np.sqrt(
            sched.alphas[0]
        )
        assert np.allclose(got, expected)

    def test_ddpm_deterministic_given_seed(self):
        sched = make_schedule("linear", 50)
        eps_fn = point_mass_eps_fn(np.zeros(4), sched)
        a = ddpm_sample(eps_fn, None, (4,), sched, np.random.default_rng(5))
        b = ddpm_sample(eps_fn, None, (4,), sched, np.random.default_rng(5))
        assert np.array_equal(a, b)

    def test_ddim_deterministic_eta0(self):
        sched = make_schedule("linear", 100)
        eps_fn = point_mass_eps_fn(np.array([1.0, 2.0]), sched)
        x_init = np.random.default_rng(9).standard_normal(2)
        a = ddim_sample(eps_fn, None, (2,), sched, 10, eta=0.0, x_init=x_init)
        b = ddim_sample(eps_fn, None, (2,), sched, 10, eta=0.0, x_init=x_init)
        assert np.array_equal(a, b)

    def test_ddim_point_mass(self):
        sched = make_schedule("linear", 1000)
        mu = np.array([0.25, -0.5, 1.0])
        x = ddim_sample(point_mass_eps_fn(mu, sched), None, (3,), sched, 20,
                        eta=0.0, rng=np.random.default_rng(2))
        assert np.allclose(x, mu, atol=1e-8)

    def test_ddim_stride(self):
        taus = ddim_stride(1000, 20)
        assert taus[0] == 999 and taus[-1] == 0
        assert len(taus) == 20
        with pytest.raises(ValueError):
            ddim_stride(1000, 0)

    def test_ddim_full_matches_ddpm_statistics(self):
        # With eta=1 and every step used, DDIM reduces to the ancestral
        # sampler in distribution; compare sample means under the exact
        # posterior-mean noise predictor for x0 ~ N(mu, sigma^2 I).
        sched = make_schedule("linear", 60)
        mu, sigma = np.array([0.4]), 0.5

        def gauss_eps(x, i, _c):
            abar = sched.alpha_bars[i]
            return (
                np.sqrt(1.0 - abar)
                * (x - np.sqrt(abar) * mu)
                / (abar * sigma**2 + 1.0 - abar)
            )

        rng = np.random.default_rng(21)
        ddpm_draws = np.array(
            [ddpm_sample(gauss_eps, None, (1,), sched, rng)[0] for _ in range(300)]
        )
        ddim_draws = np.array(
            [
                ddim_sample(gauss_eps, None, (1,), sched, 60, eta=1.0, rng=rng)[0]
                for _ in range(300)
            ]
        )
        assert abs(ddpm_draws.mean() - ddim_draws.mean()) < 0.05


class TestLoss:
    def make_pairs(self, offset_pf=0.0):
        z = np.zeros((2, 3))
        preds = {"continuous": z, "keypose": z, "pointflow": z + offset_pf, "triad": z}
        targets = {"continuous": z, "keypose": z, "pointflow": z, "triad": z}
        return preds, targets

    def test_zero_when_equal(self):
        total, terms = total_loss(*self.make_pairs(), LossWeights())
        assert total == 0.0
        assert all(v == 0.0 for v in terms.values())

    def test_single_term_isolation(self):
        total, terms = total_loss(*self.make_pairs(offset_pf=1.0), LossWeights())
        assert terms["pointflow"] == pytest.approx(1.0)
        assert total == pytest.approx(1.0)

    def test_mixed_offsets_scalar_oracle(self):
        rng = np.random.default_rng(13)
        preds = {k: rng.standard_normal((3, 4)) for k in
                 ("continuous", "keypose", "pointflow", "triad")}
        targets = {k: rng.standard_normal((3, 4)) for k in preds}
        w = LossWeights(w_c=0.05, w_k=0.05, w_pf=1.0, w_triad=1.0)
        total, terms = total_loss(preds, targets, w)
        expected = (
            0.05 * np.abs(preds["continuous"] - targets["continuous"]).mean()
            + 0.05 * np.abs(preds["keypose"] - targets["keypose"]).mean()
            + 1.0 * np.abs(preds["pointflow"] - targets["pointflow"]).mean()
            + 1.0 * np.abs(preds["triad"] - targets["triad"]).mean()
        )
        assert total == pytest.approx(expected, rel=1e-12)

    def test_positivity_and_zero_iff_equal(self):
        rng = np.random.default_rng(14)
        a, b = rng.standard_normal(5), rng.standard_normal(5)
        assert l1_loss(a, b) > 0
        assert l1_loss(a, a) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1_loss(np.zeros(3), np.zeros(4))

    def test_negative_weight_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(w_c=-0.1)

    def test_default_weights(self):
        w = LossWeights()
        assert (w.w_c, w.w_k, w.w_pf, w.w_triad) == (0.05, 0.05, 1.0, 1.0)
