import math
import time

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mapprior.exceptions import CapabilityError, ConfigurationError, ShapeError
from mapprior.layout import CorruptionParams, SoftLayout
from mapprior.pipeline import (
    MapPrior, PerceptionNet, SampleBundle, aggregate, perception_loss, predict_initial, refine, refine_one_step,
    train_perception_step,
)
from mapprior.presets import DEFAULT_CLASSES
from mapprior.sampler.sampling import SamplingParams
from oracles import loop_stats

CH = ("a", "b")


class TestAggregate:
    @settings(max_examples=200)
    @given(st.integers(0, 2**32 - 1), st.integers(1, 15))
    def test_against_loops(self, seed, K):
        s = np.random.default_rng(seed).random((K, 2, 3, 4))
        b = aggregate(s, CH, 1.0)
        mean, var = loop_stats(s)
        assert b.n_samples == K
        assert np.abs(b.confidence.data - mean).max() <= 1e-6
        assert np.abs(b.uncertainty.data - var).max() <= 1e-6
        assert b.uncertainty.data.max() <= 0.25 + 1e-7
        assert np.array_equal(b.final.data, (b.confidence.data >= 0.5).astype(np.uint8))
        # re-binarizing the final map is idempotent
        assert np.array_equal((b.final.data >= 0.5).astype(np.uint8), b.final.data)

    def test_flags(self):
        s = np.random.default_rng(0).random((5, 2, 3, 3))
        b = aggregate(s, CH, 1.0, binarized_confidence=True, soft_variance=True)
        assert np.allclose(b.confidence.data, (s >= 0.5).mean(0), atol=1e-6)
        assert np.allclose(b.uncertainty.data, s.var(0), atol=1e-6)

    def test_single_sample_zero_variance(self):
        b = aggregate(np.random.default_rng(0).random((1, 2, 3, 3)), CH, 1.0)
        assert not b.uncertainty.data.any()

    def test_bad_shape(self):
        with pytest.raises(ShapeError):
            aggregate(np.zeros((2, 3, 3)), CH, 1.0)
        with pytest.raises(ShapeError):
            aggregate(np.zeros((0, 2, 3, 3)), CH, 1.0)

    def test_bundle_round_trip(self, tmp_path):
        b = aggregate(np.random.default_rng(0).random((3, 2, 4, 4)), CH, 0.5, meta={"seed": 7})
        back = SampleBundle.load(b.save(tmp_path / "scene"))
        assert back == b
        assert back.meta["seed"] == 7 and back.meta["n_samples"] == 3
        assert sorted(p.name for p in (tmp_path / "scene").iterdir() if p.suffix == ".bml") == [
            "confidence.bml", "final.bml", "sample_0.bml", "sample_1.bml", "sample_2.bml", "uncertainty.bml"]


class TestPerception:
    def test_half_is_log2(self):
        gt = (torch.rand(2, 3, 5, 5) < 0.5).float()
        assert perception_loss(torch.full_like(gt, 0.5), gt).item() == pytest.approx(math.log(2), abs=1e-6)

    def test_perfect(self):
        gt = (torch.rand(2, 3, 5, 5) < 0.5).float()
        assert perception_loss(gt.clone(), gt).item() < 1e-5

    @settings(max_examples=100)
    @given(st.integers(0, 2**32 - 1), st.booleans())
    def test_loop_oracle(self, seed, one_sided):
        g = np.random.default_rng(seed)
        p, y = g.random((2, 3, 4)), (g.random((2, 3, 4)) < 0.5).astype(float)
        total = 0.0
        for idx in np.ndindex(*p.shape):
            q = min(max(p[idx], 1e-7), 1 - 1e-7)
            total += -y[idx] * math.log(q) - (0.0 if one_sided else (1 - y[idx]) * math.log(1 - q))
        got = perception_loss(torch.from_numpy(p), torch.from_numpy(y), one_sided).item()
        assert got == pytest.approx(total / p.size, abs=1e-6)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            perception_loss(torch.zeros(2, 2), torch.zeros(3, 2))

    def test_toy_net(self, toy_layouts):
        g = toy_layouts[0]
        noisy, x = predict_initial(g, params=CorruptionParams(seed=0))
        net = PerceptionNet()
        with pytest.raises(CapabilityError):
            predict_initial(x, "toy-net", net=net)
        opt = torch.optim.Adam(net.parameters(), 1e-3)
        loss = train_perception_step(torch.tensor(x.data[None]), torch.tensor(g.data[None]).float(), net, opt)
        assert loss >= 0
        out, _ = predict_initial(x, "toy-net", net=net)
        assert out.data.shape == g.data.shape and out.data.min() >= 0 and out.data.max() <= 1
        assert out.channels == DEFAULT_CLASSES

    def test_corruptor(self, toy_layouts):
        g = toy_layouts[1]
        noisy, x = predict_initial(g, params=CorruptionParams.zero())
        assert np.array_equal(noisy.data, g.data.astype(noisy.data.dtype))
        a, _ = predict_initial(g, params=CorruptionParams(seed=3))
        b, _ = predict_initial(g, params=CorruptionParams(seed=3))
        assert np.array_equal(a.data, b.data)
        with pytest.raises(ConfigurationError):
            predict_initial(g, "oracle")


class TestRefine:
    def test_greedy_single_sample(self, toy_pair):
        prior, sampler, x, _ = toy_pair
        noisy = x[0, :6]
        b = refine(noisy, x[0], prior, sampler, SamplingParams(p=1e-9, n_samples=1, seed=4))
        toks = sampler.sample(x[:1], params=SamplingParams(n_samples=1), greedy=True)[0]
        dec = prior.inverse_transform(toks)[0]
        assert np.array_equal(b.final.data, (dec >= 0.5).astype(np.uint8))
        assert not b.uncertainty.data.any()

    def test_mean_oracle_and_determinism(self, toy_pair):
        prior, sampler, x, _ = toy_pair
        p = SamplingParams(n_samples=15, seed=1)
        b = refine(x[1, :6], x[1], prior, sampler, p)
        assert b.n_samples == 15
        s = np.stack([k.data for k in b.samples]).astype(np.float64)
        assert np.abs(b.confidence.data - s.mean(0)).max() <= 1e-6
        b2 = refine(x[1, :6], x[1], prior, sampler, p)
        assert b == b2 and b.meta == b2.meta

    def test_one_step(self, toy_pair):
        prior, sampler, x, _ = toy_pair
        a = refine_one_step(x[0, :6], x[0], prior, sampler)
        assert isinstance(a, SoftLayout) and 0 <= a.data.min() and a.data.max() <= 1
        assert np.array_equal(a.data, refine_one_step(x[0, :6], x[0], prior, sampler).data)

    def test_one_step_faster(self, toy_pair):
        prior, sampler, x, _ = toy_pair

        def best(fn):
            out = []
            for _ in range(3):
                t0 = time.perf_counter()
                fn()
                out.append(time.perf_counter() - t0)
            return min(out)

        t1 = best(lambda: refine_one_step(x[0, :6], x[0], prior, sampler))
        tk = best(lambda: refine(x[0, :6], x[0], prior, sampler, SamplingParams(n_samples=1)))
        assert tk >= 2 * t1

    def test_preset_mismatch(self, toy_pair):
        prior, sampler, x, _ = toy_pair
        from mapprior.prior.estimator import VQPrior

        other = VQPrior(preset="paper")
        other.model_ = object()
        with pytest.raises(ConfigurationError):
            refine(x[0, :6], x[0], other, sampler)

    def test_estimator(self, toy_pair):
        prior, sampler, x, _ = toy_pair
        est = MapPrior.from_models(prior, sampler, n_samples=2, seed=5)
        proba = est.predict_proba(x[:2])
        pred = est.predict(x[:2])
        assert proba.shape == pred.shape == (2, 6, 64, 64)
        assert np.array_equal(pred, (proba >= 0.5).astype(np.uint8))
        assert est.predict_one_step(x[:1]).shape == (1, 6, 64, 64)
        with pytest.raises(ShapeError):
            est.predict(x[:1, :, :32])
