"""Training step for the conditional sampler against a frozen prior."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from mapprior.exceptions import NumericAbort, ShapeError
from mapprior.prior.estimator import encode_tensor
from mapprior.prior.losses import recon_loss
from mapprior.prior.nn import PriorModel
from mapprior.sampler.gpt import SamplerModel
from mapprior.sampler.sampling import gumbel_softmax
from mapprior.seeding import torch_generator


@dataclass
class SamplerTrainConfig:
    lr: float = 3e-4
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    batch_size: int = 16
    steps: int = 800
    tau: float = 1.0
    out_multiplier: float = 100.0
    output_loss: bool = True
    guidance_dropout: float = 0.1
    one_step_weight: float = 1.0
    # fraction of teacher-forced input tokens replaced by the mask token
    token_dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not 0.0 <= self.guidance_dropout < 1.0:
            raise ValueError("guidance_dropout must lie in [0, 1)")
        if not 0.0 <= self.token_dropout < 1.0:
            raise ValueError("token_dropout must lie in [0, 1)")


def freeze(prior: PriorModel) -> PriorModel:
    prior.eval()
    for p in prior.parameters():
        p.requires_grad_(False)
    return prior


def soft_decode(logits: torch.Tensor, prior: PriorModel, tau: float, generator=None, noise=None):
    """Decode relaxed tokens: gumbel weights x codebook -> frozen decoder.

    ``logits`` is (B, N, K) in raster order; returns (B, C, H, W) probabilities.
    """
    arch = prior.arch
    weights = gumbel_softmax(logits, tau, generator=generator, noise=noise)
    emb = weights @ prior.codebook.weight
    B = logits.shape[0]
    z = emb.view(B, arch.latent_height, arch.latent_width, -1).permute(0, 3, 1, 2)
    return prior.decoder(z)


def output_loss(logits, y_gt, prior: PriorModel, tau: float, generator=None, noise=None):
    return recon_loss(y_gt, soft_decode(logits, prior, tau, generator, noise))


class SamplerTrainer:
    def __init__(self, model: SamplerModel, prior: PriorModel, config: SamplerTrainConfig):
        if model.arch.n_codes != prior.arch.n_codes:
            raise ShapeError("sampler vocabulary does not match the prior codebook size")
        self.model = model
        self.prior = freeze(prior)
        self.config = config
        decay, no_decay = [], []
        for name, p in model.named_parameters():
            (decay if p.dim() >= 2 and "emb" not in name else no_decay).append(p)
        self.opt = torch.optim.AdamW(
            [{"params": decay, "weight_decay": config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
            lr=config.lr, betas=config.betas,
        )
        self.generator = torch_generator(config.seed)
        self.step_count = 0

    def tokens(self, y_gt: torch.Tensor, noisy: torch.Tensor):
        B = y_gt.shape[0]
        z_gt = encode_tensor(self.prior, y_gt).view(B, -1)
        z_guide = encode_tensor(self.prior, noisy).view(B, -1)
        return z_gt, z_guide

    def step(self, y_gt: torch.Tensor, noisy: torch.Tensor, x: torch.Tensor | None, tokens=None) -> dict:
        """One update; returns ``{ce, out, total, ...}`` with ``total = ce + multiplier * out``.

        ``tokens`` may pass precomputed ``(z_gt, z_guide)`` for this batch.
        """
        cfg, model = self.config, self.model
        if y_gt.shape != noisy.shape or (x is not None and x.shape[0] != y_gt.shape[0]):
            raise ShapeError("batch shapes are inconsistent")
        z_gt, z_guide = tokens if tokens is not None else self.tokens(y_gt.float(), noisy.float())
        feats = x.float().clone() if (x is not None and model.features is not None) else None
        if cfg.guidance_dropout > 0:
            drop = torch.rand(z_gt.shape[0], generator=self.generator) < cfg.guidance_dropout
            z_guide = z_guide.clone()
            z_guide[drop] = model.null_index
            if feats is not None:
                feats[drop] = 0.0
        model.train()
        K = model.arch.n_codes
        z_in = z_gt
        if cfg.token_dropout > 0:
            hide = torch.rand(z_gt.shape, generator=self.generator) < cfg.token_dropout
            z_in = torch.where(hide, torch.full_like(z_gt, model.mask_index), z_gt)
        cond = model.condition(z_guide, feats)
        joint = model.arch.one_step and cfg.one_step_weight > 0
        if joint:
            logits, logits1 = model.forward_joint(z_guide, z_in, cond=cond)
        else:
            logits = model(z_guide, targets=z_in, cond=cond)
        ce = F.cross_entropy(logits.reshape(-1, K), z_gt.reshape(-1))
        if cfg.output_loss and cfg.out_multiplier > 0:
            out = output_loss(logits, y_gt.float(), self.prior, cfg.tau, generator=self.generator)
        else:
            out = torch.zeros(())
        total = ce + cfg.out_multiplier * out
        objective = total
        ce_one = torch.zeros(())
        if joint:
            ce_one = F.cross_entropy(logits1.reshape(-1, K), z_gt.reshape(-1))
            objective = total + cfg.one_step_weight * ce_one
        report = {
            "step": self.step_count,
            "ce": ce.item(),
            "out": out.item(),
            "total": total.item(),
            "ce_one_step": ce_one.item(),
            "objective": objective.item(),
        }
        if not all(math.isfinite(v) for v in report.values()):
            raise NumericAbort(f"non-finite sampler loss at step {self.step_count}", report)
        self.opt.zero_grad(set_to_none=True)
        objective.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        self.opt.step()
        self.step_count += 1
        return report
