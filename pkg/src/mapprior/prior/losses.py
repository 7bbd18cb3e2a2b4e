"""Training objectives of the vector-quantized prior.

All losses use mean reduction over cells and batch.
"""
from __future__ import annotations

import torch

from mapprior.exceptions import ShapeError

DISC_EPS = 1e-6
MAX_GAN_WEIGHT = 1e4


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape {tuple(a.shape)} != {tuple(b.shape)}")


def recon_loss(y: torch.Tensor, y_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between target and reconstruction."""
    _same_shape(y, y_hat, "recon_loss")
    return ((y_hat - y) ** 2).mean()


def latent_loss(z_q: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
    """Codebook term plus commitment term, each with one side detached.

    The first term only moves the codes, the second only the encoder output;
    their forward values are equal, so the total is ``2 * mean((z_q - e)**2)``.
    """
    _same_shape(z_q, e, "latent_loss")
    return ((z_q - e.detach()) ** 2).mean() + ((z_q.detach() - e) ** 2).mean()


def _clamped(p: torch.Tensor, eps: float) -> torch.Tensor:
    return p.clamp(eps, 1.0 - eps)


def discriminator_loss(p_real: torch.Tensor, p_fake: torch.Tensor, eps: float = DISC_EPS) -> torch.Tensor:
    """``-[log D(y) + log(1 - D(y_hat))]`` averaged over patch outputs."""
    return -(torch.log(_clamped(p_real, eps)) + torch.log(1.0 - _clamped(p_fake, eps))).mean()


def generator_loss(p_fake: torch.Tensor, eps: float = DISC_EPS) -> torch.Tensor:
    """Non-saturating generator loss ``-log D(y_hat)``."""
    return -torch.log(_clamped(p_fake, eps)).mean()


def gan_losses(y_real: torch.Tensor, y_fake: torch.Tensor, discriminator, eps: float = DISC_EPS):
    """Return ``(d_loss, g_loss)`` for a discriminator that emits patch logits."""
    _same_shape(y_real, y_fake, "gan_losses")
    p_real = torch.sigmoid(discriminator(y_real))
    p_fake = torch.sigmoid(discriminator(y_fake))
    return discriminator_loss(p_real, p_fake, eps), generator_loss(p_fake, eps)


def adaptive_gan_weight(g_rec, g_gan, sigma: float, max_weight: float = MAX_GAN_WEIGHT):
    """``g_rec / (g_gan + sigma)`` clamped to ``[0, max_weight]``.

    Works on floats or 0-d tensors; tensors come back detached.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if torch.is_tensor(g_rec) or torch.is_tensor(g_gan):
        g_rec = torch.as_tensor(g_rec).detach()
        g_gan = torch.as_tensor(g_gan).detach()
        if g_rec < 0 or g_gan < 0:
            raise ValueError("gradient norms must be non-negative")
        return (g_rec / (g_gan + sigma)).clamp(0.0, max_weight)
    if g_rec < 0 or g_gan < 0:
        raise ValueError("gradient norms must be non-negative")
    return min(max(g_rec / (g_gan + sigma), 0.0), max_weight)


def last_layer_grad_norms(rec: torch.Tensor, gan: torch.Tensor, last_layer: torch.Tensor):
    """L2 norms of d(rec)/d(last_layer) and d(gan)/d(last_layer)."""
    (g_rec,) = torch.autograd.grad(rec, last_layer, retain_graph=True)
    (g_gan,) = torch.autograd.grad(gan, last_layer, retain_graph=True)
    return g_rec.norm(), g_gan.norm()
