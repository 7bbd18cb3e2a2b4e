"""Adversarial VQ training step for the map prior."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from mapprior.exceptions import NumericAbort
from mapprior.prior import losses
from mapprior.prior.nn import PriorModel
from mapprior.prior.quantize import quantize_bchw
from mapprior.seeding import torch_generator


@dataclass
class VqTrainConfig:
    lr: float = 4.5e-4
    disc_lr: float | None = None  # defaults to lr
    betas: tuple = (0.5, 0.9)
    sigma: float = 1e-4
    max_gan_weight: float = losses.MAX_GAN_WEIGHT
    disc_eps: float = losses.DISC_EPS
    batch_size: int = 8
    steps: int = 1200
    gan_start: int | None = None  # None -> first 25% of steps are warm-up
    dead_code_interval: int = 100
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")

    @property
    def gan_start_step(self) -> int:
        return self.steps // 4 if self.gan_start is None else self.gan_start


class PriorTrainer:
    """Holds optimizers and bookkeeping for alternating generator/discriminator updates."""

    def __init__(self, model: PriorModel, config: VqTrainConfig):
        self.model = model
        self.config = config
        self.opt_g = torch.optim.Adam(list(model.generator_parameters()), lr=config.lr, betas=config.betas)
        self.opt_d = torch.optim.Adam(
            model.discriminator.parameters(), lr=config.disc_lr or config.lr, betas=config.betas
        )
        self.step_count = 0
        self.code_usage = torch.zeros(model.codebook.n_codes, dtype=torch.long)
        self.generator = torch_generator(config.seed)
        self.reseeded = 0

    def step(self, batch: torch.Tensor) -> dict:
        """One update on a (B, C, H, W) batch; returns the loss report."""
        if batch.shape[0] == 0:
            raise ValueError("empty batch")
        cfg, model = self.config, self.model
        model.train()
        y = batch.float()
        e = model.encoder(y)
        idx, z_q = quantize_bchw(e, model.codebook.weight)
        # straight-through: decoder-input gradient is copied onto the encoder output
        z_st = e + (z_q - e).detach()
        y_hat = model.decoder(z_st)
        rec = losses.recon_loss(y, y_hat)
        lat = losses.latent_loss(z_q, e)
        gan_active = self.step_count >= cfg.gan_start_step
        if gan_active:
            p_fake = torch.sigmoid(model.discriminator(y_hat))
            g_loss = losses.generator_loss(p_fake, cfg.disc_eps)
            g_rec, g_gan = losses.last_layer_grad_norms(rec, g_loss, model.decoder.last_layer)
            lam = losses.adaptive_gan_weight(g_rec, g_gan, cfg.sigma, cfg.max_gan_weight)
            total = rec + lam * g_loss + lat
        else:
            g_loss = torch.zeros(())
            lam = torch.zeros(())
            total = rec + lat
        report = {
            "step": self.step_count,
            "recon": rec.item(),
            "gan_g": g_loss.item(),
            "latent": lat.item(),
            "lambda_gan": float(lam),
            "total": total.item(),
        }
        self._guard(report)
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()

        d_loss = torch.zeros(())
        if gan_active:
            self.opt_d.zero_grad(set_to_none=True)
            p_real = torch.sigmoid(model.discriminator(y))
            p_fake = torch.sigmoid(model.discriminator(y_hat.detach()))
            d_loss = losses.discriminator_loss(p_real, p_fake, cfg.disc_eps)
            d_loss.backward()
            self.opt_d.step()
        report["gan_d"] = d_loss.item()
        self._guard(report)

        self.code_usage += torch.bincount(idx.flatten(), minlength=model.codebook.n_codes)
        self.step_count += 1
        if cfg.dead_code_interval and self.step_count % cfg.dead_code_interval == 0:
            self._reseed_dead_codes(e.detach())
        return report

    def _guard(self, report: dict) -> None:
        if not all(math.isfinite(v) for v in report.values()):
            raise NumericAbort(f"non-finite prior loss at step {self.step_count}", report)

    def _reseed_dead_codes(self, e: torch.Tensor) -> None:
        dead = (self.code_usage == 0).nonzero().flatten()
        if len(dead):
            pool = e.permute(0, 2, 3, 1).reshape(-1, e.shape[1])
            pick = torch.randint(0, pool.shape[0], (len(dead),), generator=self.generator)
            with torch.no_grad():
                self.model.codebook.weight[dead] = pool[pick]
            self.reseeded += len(dead)
        self.code_usage.zero_()


def augment_batch(y: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Random quarter-turn rotation.

    Rotations map the scene generator's distribution onto itself (reflections
    would mirror which side of the road the stop lines sit on).
    """
    k = int(torch.randint(0, 4, (1,), generator=generator))
    return torch.rot90(y, k, dims=(-2, -1)).contiguous() if k else y
