"""Token sampling: nucleus filtering, autoregressive and one-step decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from mapprior.exceptions import CapabilityError, ConfigurationError, ShapeError
from mapprior.prior.quantize import TokenGrid
from mapprior.sampler.gpt import SamplerModel
from mapprior.seeding import torch_generator

DIST_ATOL = 1e-6


@dataclass(frozen=True)
class SamplingParams:
    p: float = 0.9
    temperature: float = 1.0
    n_samples: int = 15
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.p <= 1.0:
            raise ConfigurationError(f"nucleus p must lie in (0, 1], got {self.p}")
        if not self.temperature > 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.temperature}")
        if self.n_samples < 1:
            raise ConfigurationError(f"n_samples must be >= 1, got {self.n_samples}")


@dataclass(frozen=True)
class GumbelParams:
    tau: float = 1.0
    out_multiplier: float = 100.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigurationError(f"gumbel tau must be > 0, got {self.tau}")
        if self.out_multiplier < 0:
            raise ConfigurationError("output-loss multiplier must be >= 0")


def _check_distribution(probs: torch.Tensor) -> None:
    if probs.numel() == 0 or not torch.isfinite(probs).all() or (probs < 0).any():
        raise ValueError("probs must be finite and non-negative")
    sums = probs.sum(-1)
    if not torch.allclose(sums, torch.ones_like(sums), atol=1e-4):
        raise ValueError("probs must sum to 1 along the last axis")


def nucleus_filter(probs, p: float):
    """Keep the smallest top-mass prefix reaching ``p`` and renormalize.

    Sorting is stable on descending probability, so equal values keep the
    smaller index first. Works on the last axis of numpy arrays or tensors.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in (0, 1], got {p}")
    as_numpy = not torch.is_tensor(probs)
    t = torch.as_tensor(np.asarray(probs, dtype=np.float64)) if as_numpy else probs
    _check_distribution(t)
    sorted_p, order = torch.sort(t, dim=-1, descending=True, stable=True)
    cum = sorted_p.cumsum(-1)
    # a position is kept while the mass before it is still short of p
    before = cum - sorted_p
    keep_sorted = before < p - 1e-12
    keep_sorted[..., 0] = True
    keep = torch.zeros_like(keep_sorted).scatter(-1, order, keep_sorted)
    out = torch.where(keep, t, torch.zeros_like(t))
    out = out / out.sum(-1, keepdim=True)
    return out.numpy() if as_numpy else out


def gumbel_softmax(logits: torch.Tensor, tau: float = 1.0, seed: int | None = None,
                   generator: torch.Generator | None = None, noise: torch.Tensor | None = None):
    """Relaxed one-hot sample ``softmax((logits + g) / tau)`` with Gumbel noise ``g``.

    Pass ``noise`` to reuse fixed Gumbel draws; otherwise they come from
    ``generator`` or a fresh generator seeded with ``seed``.
    """
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    if noise is None:
        noise = sample_gumbel(logits.shape, seed=seed, generator=generator).to(logits.dtype)
    return torch.softmax((logits + noise) / tau, dim=-1)


def sample_gumbel(shape, seed: int | None = None, generator: torch.Generator | None = None):
    if generator is None:
        generator = torch_generator(0 if seed is None else seed)
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    tiny = torch.finfo(torch.float64).tiny
    u = u.clamp(tiny, 1.0 - 1e-12)
    return -torch.log(-torch.log(u))


def _as_batch(guidance, features, model: SamplerModel):
    """Normalize TokenGrid / grid / array inputs to batched tensors."""
    N = model.n_target
    if isinstance(guidance, TokenGrid):
        if guidance.n_codes != model.arch.n_codes:
            raise ConfigurationError(f"guidance uses {guidance.n_codes} codes, sampler has {model.arch.n_codes}")
        g = torch.from_numpy(guidance.indices.reshape(1, -1).copy())
    else:
        g = torch.as_tensor(np.asarray(guidance) if not torch.is_tensor(guidance) else guidance).long()
        g = g.reshape(g.shape[0], -1) if g.dim() == 3 else g.reshape(1, -1) if g.dim() <= 2 and g.numel() == N else g
    if g.shape[-1] != N:
        raise ShapeError(f"guidance must hold {N} tokens, got {tuple(g.shape)}")
    if ((g < 0) | (g > model.null_index)).any():
        raise IndexError("guidance token out of range")
    f = None
    if model.features is not None:
        if features is None:
            raise ShapeError("sampler conditions on features but none were given")
        data = features.data if hasattr(features, "data") and not torch.is_tensor(features) else features
        f = torch.as_tensor(np.asarray(data) if not torch.is_tensor(data) else data).float()
        if f.dim() == 3:
            f = f[None]
        if f.shape[0] != g.shape[0]:
            if f.shape[0] == 1:
                f = f.expand(g.shape[0], -1, -1, -1)
            else:
                raise ShapeError("guidance and feature batch sizes differ")
    return g, f


@torch.no_grad()
def feature_tokens(x, model: SamplerModel) -> torch.Tensor:
    """(n_target, n_embd) feature tokens for one pseudo-sensor grid."""
    if model.features is None:
        raise CapabilityError("sampler was built without feature conditioning")
    model.eval()
    _, f = _as_batch(torch.zeros(model.n_target, dtype=torch.long), x, model)
    if f.shape[0] != 1:
        raise ShapeError("feature_tokens takes one grid")
    return model.features(f)[0]


@torch.no_grad()
def next_token_dist(prefix, guidance, features, model: SamplerModel, temperature: float = 1.0) -> np.ndarray:
    """Distribution over codes for target slot ``len(prefix)``.

    Computed with a full (non-cached) pass; positions after the prefix are
    filled with zeros, which the causal mask keeps invisible.
    """
    prefix = [int(t) for t in np.asarray(prefix).reshape(-1)]
    N = model.n_target
    if len(prefix) >= N:
        raise ValueError(f"prefix length {len(prefix)} must be < {N}")
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    model.eval()
    g, f = _as_batch(guidance, features, model)
    if g.shape[0] != 1:
        raise ShapeError("next_token_dist takes a single guidance grid")
    targets = torch.zeros(1, N, dtype=torch.long)
    targets[0, : len(prefix)] = torch.tensor(prefix, dtype=torch.long)
    logits = model(g, f, targets)[0, len(prefix)].double()
    return torch.softmax(logits / temperature, dim=-1).numpy()


def _pick(logits: torch.Tensor, params: SamplingParams, generator: torch.Generator) -> torch.Tensor:
    probs = torch.softmax(logits.double() / params.temperature, dim=-1)
    probs = nucleus_filter(probs, params.p)
    return torch.multinomial(probs, 1, generator=generator).squeeze(-1)


@torch.no_grad()
def sample_tokens(guidance, features, model: SamplerModel, params: SamplingParams,
                  n_samples: int | None = None, prefix: torch.Tensor | None = None,
                  greedy: bool = False) -> torch.Tensor:
    """Raster-order autoregressive sampling; returns (B, n_samples, n_target) tokens.

    ``prefix`` (B, P) pins the first P target tokens; they are fed to the
    model but never resampled.
    """
    model.eval()
    g, f = _as_batch(guidance, features, model)
    B, N = g.shape[0], model.n_target
    S = params.n_samples if n_samples is None else n_samples
    gen = torch_generator(params.seed)
    P = 0 if prefix is None else prefix.shape[1]
    if prefix is not None and (prefix.shape[0] != B or P > N):
        raise ShapeError("prefix must be (B, P) with P <= n_target")
    # the pinned prefix is shared by every sample, so feed it once per input
    logits, cache = model.start(g, f)
    for t in range(1, min(P, N - 1) + 1):
        logits = model.step(prefix[:, t - 1].long(), t, cache)
    logits = logits.repeat_interleave(S, dim=0)
    cache = cache.repeat(S)
    out = torch.zeros(B * S, N, dtype=torch.long)
    if P:
        out[:, :P] = prefix.long().repeat_interleave(S, dim=0)
    for t in range(P, N):
        if t > P:
            logits = model.step(out[:, t - 1], t, cache)
        out[:, t] = logits.argmax(-1) if greedy else _pick(logits, params, gen)
    return out.view(B, S, N)


def sample_autoregressive(guidance, x, params: SamplingParams, model: SamplerModel) -> list[TokenGrid]:
    """``params.n_samples`` token grids for one (guidance, pseudo-sensor) pair."""
    toks = sample_tokens(guidance, x, model, params)
    if toks.shape[0] != 1:
        raise ShapeError("sample_autoregressive takes one input; use sample_tokens for batches")
    h, w = model.arch.latent_height, model.arch.latent_width
    return [TokenGrid(t.view(h, w).numpy(), model.arch.n_codes) for t in toks[0]]


def greedy_decode(guidance, x, model: SamplerModel) -> TokenGrid:
    toks = sample_tokens(guidance, x, model, SamplingParams(n_samples=1), greedy=True)
    h, w = model.arch.latent_height, model.arch.latent_width
    return TokenGrid(toks[0, 0].view(h, w).numpy(), model.arch.n_codes)


@torch.no_grad()
def one_step_tokens(guidance, features, model: SamplerModel, mode: str = "argmax",
                    seed: int = 0) -> torch.Tensor:
    """All target tokens from a single pass; returns (B, n_target)."""
    if not model.arch.one_step:
        raise CapabilityError("sampler was built without the one-step head")
    model.eval()
    g, f = _as_batch(guidance, features, model)
    logits = model(g, f, one_step=True)
    if mode == "argmax":
        return logits.argmax(-1)
    if mode == "sample":
        probs = torch.softmax(logits.double(), -1)
        flat = torch.multinomial(probs.view(-1, probs.shape[-1]), 1, generator=torch_generator(seed))
        return flat.view(logits.shape[:2])
    raise ValueError(f"unknown one-step mode {mode!r}")


def sample_one_step(x, model: SamplerModel, guidance=None, mode: str = "argmax", seed: int = 0) -> TokenGrid:
    """One-pass token prediction; ``guidance=None`` uses the null guidance token."""
    if guidance is None:
        guidance = torch.full((1, model.n_target), model.null_index, dtype=torch.long)
    toks = one_step_tokens(guidance, x, model, mode, seed)
    h, w = model.arch.latent_height, model.arch.latent_width
    return TokenGrid(toks[0].view(h, w).numpy(), model.arch.n_codes)
