import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mapprior import checkpoint
from mapprior.exceptions import ConfigurationError, ShapeError
from mapprior.layout import generate_synthetic_layout
from mapprior.presets import PAPER, TOY, PriorArch
from mapprior.prior import losses
from mapprior.prior.estimator import VQPrior, decode, encode
from mapprior.prior.nn import Codebook, PriorModel
from mapprior.prior.quantize import TokenGrid, quantize, quantize_bchw
from mapprior.prior.training import PriorTrainer, VqTrainConfig
from oracles import brute_nearest, central_grad, rel_err


class TestQuantize:
    def test_worked_example(self):
        idx, zq = quantize(torch.tensor([[2.9, 4.2]], dtype=torch.float64),
                           torch.tensor([[0.0, 0.0], [3.0, 4.0]], dtype=torch.float64))
        assert idx.tolist() == [1]
        assert zq.tolist() == [[3.0, 4.0]]

    def test_exact_code(self):
        cb = torch.randn(5, 3, dtype=torch.float64)
        idx, zq = quantize(cb[2:3].clone(), cb)
        assert idx.item() == 2 and torch.equal(zq, cb[2:3])

    def test_tie_goes_to_smallest(self):
        cb = torch.tensor([[1.0, 0.0], [5.0, 5.0], [-1.0, 0.0]])
        idx, _ = quantize(torch.zeros(1, 2), cb)
        assert idx.item() == 0

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            quantize(torch.zeros(2, 3), torch.zeros(4, 2))

    @settings(max_examples=60)
    @given(st.integers(1, 40), st.integers(2, 64), st.integers(1, 8), st.integers(0, 2**31))
    def test_matches_brute_force(self, n, K, D, seed):
        g = np.random.default_rng(seed)
        # small integer grid makes exact ties common
        feats = g.integers(-3, 4, (n, D)).astype(np.float64)
        codes = g.integers(-3, 4, (K, D)).astype(np.float64)
        idx, zq = quantize(torch.from_numpy(feats), torch.from_numpy(codes))
        assert idx.tolist() == brute_nearest(feats, codes)
        np.testing.assert_array_equal(zq.numpy(), codes[idx.numpy()])

    def test_chunking_consistent(self):
        f, cb = torch.randn(300, 4), torch.randn(50, 4)
        assert torch.equal(quantize(f, cb)[0], quantize(f, cb, chunk=7)[0])

    def test_token_grid_range(self):
        with pytest.raises(IndexError):
            TokenGrid(np.array([[0, 4]]), 4)
        with pytest.raises(ShapeError):
            TokenGrid(np.array([0, 1]), 4)
        assert TokenGrid(np.array([[0, 3]]), 4) == TokenGrid(np.array([[0, 3]]), 4)


class TestLosses:
    def test_recon(self):
        y = torch.ones(2, 3, 4, 4)
        assert losses.recon_loss(y, y).item() == 0
        assert losses.recon_loss(y, torch.zeros_like(y)).item() == 1.0
        g = torch.Generator().manual_seed(0)
        a, b = torch.rand(2, 3, 5, 5, generator=g, dtype=torch.float64), torch.rand(2, 3, 5, 5, generator=g, dtype=torch.float64)
        oracle = sum((x - z) ** 2 for x, z in zip(a.flatten().tolist(), b.flatten().tolist())) / a.numel()
        assert losses.recon_loss(a, b).item() == pytest.approx(oracle, abs=1e-6)
        with pytest.raises(ShapeError):
            losses.recon_loss(a, b[:1])

    def test_latent_forward(self):
        zq, e = torch.randn(2, 4, 3, 3), torch.randn(2, 4, 3, 3)
        assert losses.latent_loss(zq, zq.clone()).item() == 0
        torch.testing.assert_close(losses.latent_loss(zq, e), 2 * ((zq - e) ** 2).mean())

    def test_gan_values(self):
        half = torch.full((1, 1, 4, 4), 0.5)
        assert losses.discriminator_loss(half, half).item() == pytest.approx(2 * math.log(2), abs=1e-6)
        for eps in (1e-2, 1e-4):
            d = losses.discriminator_loss(torch.full((4,), 1 - eps), torch.full((4,), eps), eps=1e-9)
            assert d.item() == pytest.approx(-2 * math.log(1 - eps), rel=1e-3)
        vals = [losses.generator_loss(torch.tensor([p])).item() for p in np.linspace(0.05, 0.95, 19)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_gan_losses_clamped_finite(self):
        disc = lambda y: y.sum(1, keepdim=True) * 1e4  # noqa: E731 saturating logits
        d, g = losses.gan_losses(torch.ones(1, 2, 2, 2), -torch.ones(1, 2, 2, 2), disc)
        assert math.isfinite(d.item()) and math.isfinite(g.item())

    def test_adaptive_weight(self):
        assert losses.adaptive_gan_weight(1.0, 2.0, 1e-6) == pytest.approx(0.5, abs=1e-5)
        assert losses.adaptive_gan_weight(1.0, 0.0, 1e-6) == losses.MAX_GAN_WEIGHT
        assert losses.adaptive_gan_weight(1e-3, 0.0, 1e-6, max_weight=1e9) == pytest.approx(1e3)
        with pytest.raises(ValueError):
            losses.adaptive_gan_weight(-1.0, 1.0, 1e-6)
        with pytest.raises(ValueError):
            losses.adaptive_gan_weight(1.0, 1.0, 0.0)
        t = losses.adaptive_gan_weight(torch.tensor(1.0), torch.tensor(2.0), 1e-6)
        assert not t.requires_grad and t.item() == pytest.approx(0.5, abs=1e-5)

    @given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
    def test_adaptive_weight_scale_invariant(self, a, b):
        lam1 = losses.adaptive_gan_weight(a, b, 1e-12, max_weight=1e12)
        lam2 = losses.adaptive_gan_weight(2 * a, 2 * b, 1e-12, max_weight=1e12)
        assert lam2 == pytest.approx(lam1, rel=1e-6)


class TestGradients:
    def test_recon_gradient(self):
        torch.manual_seed(0)
        w = torch.randn(6, 4, dtype=torch.float64, requires_grad=True)  # 24 parameters
        x = torch.randn(5, 4, dtype=torch.float64)
        y = (torch.rand(5, 6, dtype=torch.float64) > 0.5).double()
        f = lambda: losses.recon_loss(y, torch.sigmoid(x @ w.T))  # noqa: E731
        (auto,) = torch.autograd.grad(f(), w)
        assert rel_err(auto, central_grad(f, w)) < 1e-4

    def test_latent_routing(self):
        torch.manual_seed(1)
        code = torch.randn(1, 3, dtype=torch.float64, requires_grad=True)
        w = torch.randn(3, 3, dtype=torch.float64, requires_grad=True)
        x = torch.randn(1, 3, dtype=torch.float64)
        (g_code, g_w) = torch.autograd.grad(losses.latent_loss(code, x @ w.T), (code, w))
        # codebook only sees the first term, encoder only the second
        term1 = lambda: ((code - (x @ w.T).detach()) ** 2).mean()  # noqa: E731
        term2 = lambda: ((code.detach() - x @ w.T) ** 2).mean()  # noqa: E731
        assert rel_err(g_code, central_grad(term1, code)) < 1e-4
        assert rel_err(g_w, central_grad(term2, w)) < 1e-4
        # perturbing the code leaves the encoder-side gradient at the term-2 value
        with torch.no_grad():
            code += 0.1
        (g_w2,) = torch.autograd.grad(losses.latent_loss(code, x @ w.T), (w,))
        assert rel_err(g_w2, central_grad(term2, w)) < 1e-4

    def test_last_layer_norms(self):
        torch.manual_seed(2)
        last = torch.randn(2, dtype=torch.float64, requires_grad=True)  # 2-parameter decoder
        x = torch.randn(8, 2, dtype=torch.float64)
        y = (torch.rand(8, dtype=torch.float64) > 0.5).double()
        disc_w = torch.randn(1, dtype=torch.float64)

        def outputs():
            y_hat = torch.sigmoid(x @ last)
            rec = losses.recon_loss(y, y_hat)
            gan = losses.generator_loss(torch.sigmoid(disc_w * y_hat))
            return rec, gan

        rec, gan = outputs()
        n_rec, n_gan = losses.last_layer_grad_norms(rec, gan, last)
        fd_rec = central_grad(lambda: outputs()[0], last).norm().item()
        fd_gan = central_grad(lambda: outputs()[1], last).norm().item()
        assert n_rec.item() == pytest.approx(fd_rec, rel=1e-3)
        assert n_gan.item() == pytest.approx(fd_gan, rel=1e-3)


class TestModel:
    def test_toy_shapes(self):
        torch.manual_seed(0)
        m = PriorModel(TOY.prior).eval()
        y = torch.from_numpy(generate_synthetic_layout(0).data[None].astype(np.float32))
        with torch.no_grad():
            e = m.encoder(y)
            assert e.shape == (1, 64, 8, 8)
            idx, _ = quantize_bchw(e, m.codebook.weight)
            assert idx.shape == (1, 8, 8)
            out = m.decoder(m.codebook(idx).permute(0, 3, 1, 2))
        assert out.shape == (1, 6, 64, 64)
        assert 0 <= out.min() and out.max() <= 1

    def test_paper_latent_shape(self):
        torch.manual_seed(0)
        m = PriorModel(PAPER.prior).eval()
        assert m.codebook.weight.shape == (1024, 256)
        with torch.no_grad():
            e = m.encoder(torch.zeros(1, 6, 200, 200))
            assert e.shape == (1, 256, 12, 12)
            out = m.decoder(e)
        assert out.shape == (1, 6, 200, 200)

    def test_codebook_init(self):
        cb = Codebook(256, 64)
        assert cb.weight.abs().max().item() <= 1 / 256
        with pytest.raises(ValueError):
            Codebook(1, 4)

    def test_encode_decode_contracts(self):
        est = VQPrior(n_steps=1).init_model()
        g = generate_synthetic_layout(1)
        t1, t2 = est.encode(g), est.encode(g)
        assert t1 == t2 and t1.shape == (8, 8)
        s = est.decode(t1)
        assert s.shape == (6, 64, 64) and s.data.min() >= 0 and s.data.max() <= 1
        assert est.decode(t1) == s
        with pytest.raises(ConfigurationError):
            decode(TokenGrid(np.zeros((8, 8), dtype=np.int64), 128), est.model_)
        with pytest.raises(ShapeError):
            encode(np.zeros((6, 32, 32), dtype=np.float32), est.model_)


class TestTraining:
    def test_warmup_total(self):
        torch.manual_seed(0)
        m = PriorModel(TOY.prior)
        tr = PriorTrainer(m, VqTrainConfig(steps=100, gan_start=10))
        batch = torch.from_numpy(np.stack([generate_synthetic_layout(s).data for s in range(2)]).astype(np.float32))
        r = tr.step(batch)
        assert r["lambda_gan"] == 0 and r["gan_g"] == 0 and r["gan_d"] == 0
        assert r["total"] == pytest.approx(r["recon"] + r["latent"], abs=1e-7)

    def test_overfit_smoke(self):
        torch.manual_seed(0)
        m = PriorModel(TOY.prior)
        cfg = VqTrainConfig(steps=200, batch_size=4)
        tr = PriorTrainer(m, cfg)
        batch = torch.from_numpy(np.stack([generate_synthetic_layout(s).data for s in range(4)]).astype(np.float32))
        reports = [tr.step(batch) for _ in range(200)]
        assert all(math.isfinite(v) for r in reports for v in r.values())
        assert reports[-1]["recon"] < 0.25 * reports[0]["recon"]
        assert any(r["lambda_gan"] > 0 for r in reports[50:])

    def test_checkpoint_round_trip(self, tmp_path):
        est = VQPrior(n_steps=2, batch_size=2, seed=3).fit(
            np.stack([generate_synthetic_layout(s).data for s in range(3)]))
        est.save(tmp_path / "p.pt")
        back = VQPrior.load(tmp_path / "p.pt")
        assert back.state_hash() == est.state_hash()
        assert back.get_params() == est.get_params()
        payload = checkpoint.load_checkpoint(tmp_path / "p.pt")
        assert payload["preset"] == "toy" and payload["config_hash"] == est.config_hash_
        with pytest.raises(ConfigurationError):
            checkpoint.load_checkpoint(tmp_path / "p.pt", kind="sampler")

    def test_fit_deterministic(self):
        Y = np.stack([generate_synthetic_layout(s).data for s in range(3)])
        a = VQPrior(n_steps=3, batch_size=2, seed=1).fit(Y)
        b = VQPrior(n_steps=3, batch_size=2, seed=1).fit(Y)
        assert a.state_hash() == b.state_hash()

    def test_codebook_export(self, tmp_path):
        w = torch.randn(5, 3)
        checkpoint.write_codebook(tmp_path / "cb.bin", w)
        raw = (tmp_path / "cb.bin").read_bytes()
        assert raw[:8] == (5).to_bytes(4, "little") + (3).to_bytes(4, "little")
        np.testing.assert_array_equal(checkpoint.read_codebook(tmp_path / "cb.bin"), w.numpy())

    def test_nan_abort(self):
        from mapprior.exceptions import NumericAbort

        m = PriorModel(TOY.prior)
        tr = PriorTrainer(m, VqTrainConfig(steps=10))
        with pytest.raises(NumericAbort) as err:
            tr.step(torch.full((1, 6, 64, 64), float("nan")))
        assert "recon" in err.value.report


def test_arch_contract():
    assert TOY.prior.embed_dim == 64 and TOY.prior.n_codes == 256
    with pytest.raises(ConfigurationError):
        from mapprior.presets import get_preset

        get_preset("huge")
    assert isinstance(PriorArch(), PriorArch)
