"""
Acceptance checks at full schedule length, run with ``pytest -m slow``.
"""

import dataclasses

import numpy as np
import pytest
from scipy import stats

from madiff.codecs import quantize
from madiff.dataset import generate_sprites
from madiff.denoiser import (
    Batch,
    ConditionId,
    GaussianDenoiser,
    analytic_gaussian_denoiser,
    loss,
)
from madiff.evaluation import Evaluator, job_seed
from madiff.geometry import circumcircle_violations, delaunay
from madiff.metrics import SSIM_K1, kid, psnr, ssim, to_pixels
from madiff.numerics import seeded_rng
from madiff.scheduler import make_schedule, posterior_variance, reverse_step, sigma
from madiff.translator import (
    TranslationOptions,
    build_components,
    ddim_makeup_transfer,
    encode,
    generate,
    makeup_transfer,
    prepare_transfer,
    translate,
)

from tests.test_helpers import gaussian_model, random_image, tiny_schedule

pytestmark = pytest.mark.slow

NON = ConditionId.non_makeup()
MAKEUP = ConditionId.makeup()


@pytest.fixture(scope="module")
def full_oracle():
    return gaussian_model(make_schedule(1000, 1e-4, 0.02), (32, 32, 3))


class TestRoundTrip:
    """Translating a domain onto itself reproduces the input."""

    @pytest.mark.parametrize("gamma", [0.0, 1.0])
    @pytest.mark.parametrize("K", [50, 180])
    def test_twenty_images(self, full_oracle, gamma, K):
        worst = 0.0
        for seed in range(20):
            x0 = random_image(seed, (32, 32, 3))
            opts = TranslationOptions(K=K, gamma=gamma, seed=seed)
            out = translate(x0, NON, NON, opts, full_oracle)
            worst = max(worst, float(np.max(np.abs(out - x0))))
        assert worst < 1e-4


class TestMaskPreservation:
    """Kept pixels survive bit-exactly after 8-bit quantisation."""

    def test_random_jobs(self, schedule):
        model = gaussian_model(schedule, (16, 16, 3))
        rng = np.random.default_rng(0)
        for job in range(10):
            x0 = random_image(100 + job)
            mask = (rng.uniform(size=(16, 16)) < 0.4).astype(float)
            mask[:5] = 1.0
            assert mask.mean() >= 0.3
            opts = TranslationOptions(K=int(rng.integers(5, 50)), seed=job)
            out = translate(x0, NON, ConditionId.makeup(), opts, model, mask)
            kept = mask == 1.0
            np.testing.assert_array_equal(quantize(out)[kept], quantize(x0)[kept])


class TestSchedulerIdentity:
    """Fully stochastic steps use the posterior variance."""

    def test_sigma_squared_is_posterior_variance(self, full_schedule):
        for t in range(2, full_schedule.T + 1):
            expected = posterior_variance(t, full_schedule)
            assert sigma(t, 1.0, full_schedule) ** 2 == pytest.approx(expected, rel=1e-10)


class TestDelaunayOracle:
    """Brute-force empty circumcircles over many random point sets."""

    def test_hundred_sets(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            n = int(rng.integers(3, 101))
            points = rng.uniform(0, 63, size=(n, 2))
            mesh = delaunay(points)
            assert circumcircle_violations(points, mesh) == []


class TestMetricOracles:
    """Closed forms and brute-force references for the metrics."""

    def test_psnr_one_level(self):
        a = np.full((8, 8, 3), 100.0)
        assert psnr(a, a + 1.0) == pytest.approx(48.13, abs=0.01)

    def test_constant_image_ssim(self):
        mu_a, mu_b = 60.0, 180.0
        c1 = (SSIM_K1 * 255.0) ** 2
        expected = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
        value = ssim(np.full((16, 16), mu_a), np.full((16, 16), mu_b))
        assert value == pytest.approx(expected, abs=1e-9)

    def test_kid_matches_brute_force(self):
        rng = np.random.default_rng(3)
        for n in (2, 5, 17, 50):
            x = rng.normal(size=(n, 6))
            y = rng.normal(loc=0.3, size=(n + 3, 6))
            assert kid(x, y) == pytest.approx(brute_force_kid(x, y), abs=1e-9)


def brute_force_kid(x, y):
    d = x.shape[1]

    def k(a, b):
        return (float(np.dot(a, b)) / d + 1.0) ** 3

    n, m = len(x), len(y)
    xx = sum(k(x[i], x[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    yy = sum(k(y[i], y[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    xy = sum(k(a, b) for a in x for b in y) / (n * m)
    return xx + yy - 2 * xy


class ZeroPredictor:
    """Predicts no noise at all."""

    vocabulary = ()

    def __init__(self, schedule, image_shape):
        self.schedule = schedule
        self.image_shape = tuple(image_shape)

    def row_for(self, cond):
        return 0

    def predict_batch(self, x_t, t, rows):
        return np.zeros(np.shape(x_t))


class TestGaussianOracle:
    """The exact predictor for N(m, s^2 I) data at d = 16."""

    MEAN = 0.3
    STD = 0.5
    SHAPE = (4, 4, 1)

    def test_reverse_chain_moments(self, full_schedule):
        gen = np.random.default_rng(11)
        x = gen.standard_normal((1000, 16))
        for t in range(full_schedule.T, 0, -1):
            eps_hat = analytic_gaussian_denoiser(self.MEAN, self.STD, t, x, full_schedule)
            x = reverse_step(x, eps_hat, t, 1.0, gen.standard_normal(x.shape), full_schedule)
        assert float(np.mean(x)) == pytest.approx(self.MEAN, rel=0.05)
        assert float(np.std(x)) == pytest.approx(self.STD, rel=0.05)

    def test_latent_codes_are_standard_normal(self, full_schedule):
        model = GaussianDenoiser(full_schedule, self.SHAPE, {NON: (self.MEAN, self.STD)})
        gen = np.random.default_rng(12)
        pooled = []
        for seed in range(4):
            x0 = self.MEAN + self.STD * gen.standard_normal(self.SHAPE)
            traj = encode(x0, NON, full_schedule.T, 1.0, model, seeded_rng(seed))
            # Near t = 1 the oracle's x0 uncertainty widens the codes; pool the rest
            pooled += [code.ravel() for t, code in traj.codes.items() if t > full_schedule.T // 10]
        assert stats.kstest(np.concatenate(pooled), "norm").pvalue > 0.01

    def test_zero_prediction_loss_is_dimension(self, full_schedule):
        model = ZeroPredictor(full_schedule, self.SHAPE)
        batch = Batch(np.zeros((4,) + self.SHAPE), (NON,) * 4)
        values = [loss(model, batch, full_schedule, seeded_rng(0, stream)) for stream in range(1000)]
        assert float(np.mean(values)) == pytest.approx(16.0, rel=0.05)


class TestLastKConsistency:
    """At K = T the last-K path and the from-noise path coincide on the same draws."""

    @pytest.mark.parametrize("gamma", [0.0, 1.0])
    def test_full_depth(self, full_oracle, gamma):
        x0 = random_image(5, (32, 32, 3))
        traj = encode(x0, NON, 1000, gamma, full_oracle, seeded_rng(5))
        from_noise = generate(None, MAKEUP, traj, full_oracle)
        last_k = generate(x0, MAKEUP, traj, full_oracle)
        np.testing.assert_array_equal(from_noise, last_k)


@pytest.fixture
def sprite_evaluator(tmp_path):
    corpus = generate_sprites(12, seed=5, size=16, out_dir=tmp_path / "data")
    model = gaussian_model(tiny_schedule(), (16, 16, 3))
    options = TranslationOptions(K=10, seed=4, t_c={"face": 9, "eyes": 5, "lips": 4, "eyebrows": 4})
    return Evaluator(model, corpus, options, max_pairs=6)


def lip_distance(output, source, reference):
    """Distance from the output's mean lip colour to the reference's."""
    target = reference.image[reference.masks["lips"] == 1.0].mean(axis=0)
    return float(np.linalg.norm(output[source.masks["lips"] == 1.0].mean(axis=0) - target))


def pair_options(evaluator, index, **changes):
    return dataclasses.replace(
        evaluator.options, seed=job_seed(evaluator.options.seed, index), **changes
    )


class TestCamDirection:
    """Component-aware masks keep the transferred lips closer to the reference."""

    def test_cam_on_beats_cam_off(self, sprite_evaluator):
        pairs = sprite_evaluator.pairs
        on, off = [], []
        for run in range(20):
            source, reference = pairs[run % len(pairs)]
            for cam, sink in (("default", on), ("off", off)):
                opts = dataclasses.replace(sprite_evaluator.options, seed=run, cam=cam)
                output = makeup_transfer(
                    source.image,
                    reference.image,
                    source.landmarks,
                    reference.landmarks,
                    build_components(source.masks, opts),
                    opts,
                    sprite_evaluator.model,
                )
                sink.append(lip_distance(output, source, reference))
        assert np.mean(on) <= np.mean(off)


class TestDdimAblation:
    """Skip-step DDIM transfer keeps less of the source than the last-K pipeline."""

    def test_ddim_is_worse(self, sprite_evaluator):
        wins = 0
        for index in range(6):
            source, reference = sprite_evaluator.pairs[index]
            opts = pair_options(sprite_evaluator, index, ddim_steps=20)
            components = build_components(source.masks, opts)
            args = (source.image, reference.image, source.landmarks, reference.landmarks, components, opts)
            last_k = makeup_transfer(*args, sprite_evaluator.model)
            ddim = ddim_makeup_transfer(*args, sprite_evaluator.model)
            original = to_pixels(source.image)
            wins += psnr(to_pixels(ddim), original) <= psnr(to_pixels(last_k), original)
        assert wins >= 5

    def test_ddim_changes_the_background(self, sprite_evaluator):
        source, reference = sprite_evaluator.pairs[0]
        opts = pair_options(sprite_evaluator, 0)
        components = build_components(source.masks, opts)
        args = (source.image, reference.image, source.landmarks, reference.landmarks, components, opts)
        _, validity = prepare_transfer(*args[:5])
        outside = validity == 0.0
        last_k = makeup_transfer(*args, sprite_evaluator.model)
        ddim = ddim_makeup_transfer(*args, sprite_evaluator.model)
        np.testing.assert_array_equal(quantize(last_k)[outside], quantize(source.image)[outside])
        assert np.any(quantize(ddim)[outside] != quantize(source.image)[outside])


def increasing_pairs(values):
    return sum(b > a for a, b in zip(values, values[1:]))


class TestKSweepTrend:
    """Growing K trades identity for style."""

    K_LIST = [2, 4, 6, 8, 10, 12]

    def test_trend(self, sprite_evaluator):
        evaluator = sprite_evaluator
        evaluator.options = dataclasses.replace(evaluator.options, gamma=0.0, cam="off")
        rows = evaluator.sweep_k(self.K_LIST)["rows"]
        identity = [row["identity_ssim"] for row in rows]
        assert increasing_pairs(identity[::-1]) >= 4

        # The makeup domain of the exact predictor is the brighter one
        style = []
        for K in self.K_LIST:
            shift = []
            for index, (source, _) in enumerate(evaluator.pairs):
                output = evaluator.transfer(index, pair_options(evaluator, index, K=K))
                face = sum(source.masks.values()) == 1.0
                shift.append(float(np.mean(output[face] - source.image[face])))
            style.append(np.mean(shift))
        assert increasing_pairs(style) >= 4
