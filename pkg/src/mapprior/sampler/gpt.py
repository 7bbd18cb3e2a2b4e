"""Conditional GPT over latent tokens with a BEV feature extractor.

Input sequence::

    [feature tokens (h*w)] [guidance tokens (h*w)] [target inputs (h*w)]

Conditioning tokens attend to each other freely and never to the target
segment; target slot ``t`` sees all conditioning tokens and target slots
``<= t``. Target inputs are the ground-truth tokens shifted right by one
behind a start token, so the output at slot ``t`` predicts token ``t``.
In one-step mode every target slot holds a learned query embedding and
attends only to the conditioning segments and itself.
"""
from __future__ import annotations


import torch
import torch.nn as nn
import torch.nn.functional as F

from mapprior.exceptions import CapabilityError, ShapeError
from mapprior.presets import PriorArch, SamplerArch
from mapprior.prior.nn import Encoder


class FeatureExtractor(nn.Module):
    """Downsampling CNN turning a pseudo-sensor grid into h*w feature tokens."""

    def __init__(self, arch: SamplerArch):
        super().__init__()
        enc_arch = PriorArch(
            in_channels=arch.feature_channels,
            enc_levels=arch.feat_levels,
            norm_groups=arch.norm_groups,
        )
        self.encoder = Encoder(enc_arch, in_channels=arch.feature_channels, out_channels=arch.n_embd)
        self.latent_hw = (arch.latent_height, arch.latent_width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.encoder(x)
        if h.shape[-2:] != self.latent_hw:
            raise ShapeError(f"feature extractor produced {tuple(h.shape[-2:])}, expected {self.latent_hw}")
        return h.flatten(2).transpose(1, 2)


class KVCache:
    def __init__(self, n_layer: int):
        self.k = [None] * n_layer
        self.v = [None] * n_layer
        self.slot = None  # per-slot additive conditioning, (B, n_target, E) or None

    def append(self, layer: int, k, v):
        if self.k[layer] is not None:
            k = torch.cat([self.k[layer], k], dim=2)
            v = torch.cat([self.v[layer], v], dim=2)
        self.k[layer], self.v[layer] = k, v
        return k, v

    def repeat(self, n: int) -> "KVCache":
        out = KVCache(len(self.k))
        out.k = [t.repeat_interleave(n, dim=0) for t in self.k]
        out.v = [t.repeat_interleave(n, dim=0) for t in self.v]
        out.slot = None if self.slot is None else self.slot.repeat_interleave(n, dim=0)
        return out


class SelfAttention(nn.Module):
    def __init__(self, n_embd: int, n_head: int, dropout: float = 0.0):
        super().__init__()
        if n_embd % n_head:
            raise ValueError("n_embd must be divisible by n_head")
        self.n_head = n_head
        self.qkv = nn.Linear(n_embd, 3 * n_embd)
        self.proj = nn.Linear(n_embd, n_embd)
        self.drop = nn.Dropout(dropout)  # attention dropout, applied inside the fused kernel

    def forward(self, x, mask, cache: KVCache | None = None, layer: int = 0):
        B, T, C = x.shape
        q, k, v = self.qkv(x).split(C, dim=2)
        q, k, v = (t.view(B, T, self.n_head, C // self.n_head).transpose(1, 2) for t in (q, k, v))
        if cache is not None:
            k, v = cache.append(layer, k, v)
        p = self.drop.p if self.training else 0.0
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask, dropout_p=p)
        return self.proj(y.transpose(1, 2).reshape(B, T, C))


class Block(nn.Module):
    def __init__(self, n_embd: int, n_head: int, dropout: float = 0.0):
        super().__init__()
        self.ln1 = nn.LayerNorm(n_embd)
        self.attn = SelfAttention(n_embd, n_head, dropout)
        self.ln2 = nn.LayerNorm(n_embd)
        self.mlp = nn.Sequential(
            nn.Linear(n_embd, 4 * n_embd), nn.GELU(), nn.Linear(4 * n_embd, n_embd), nn.Dropout(dropout)
        )

    def forward(self, x, mask, cache=None, layer=0):
        x = x + self.attn(self.ln1(x), mask, cache, layer)
        return x + self.mlp(self.ln2(x))


def build_mask(n_cond: int, n_target: int, one_step: bool = False) -> torch.Tensor:
    """Boolean (L, L) attention mask, True where attention is allowed."""
    L = n_cond + n_target
    mask = torch.zeros(L, L, dtype=torch.bool)
    mask[:n_cond, :n_cond] = True
    mask[n_cond:, :n_cond] = True
    tgt = torch.eye(n_target, dtype=torch.bool) if one_step else torch.ones(n_target, n_target).tril().bool()
    mask[n_cond:, n_cond:] = tgt
    return mask


def build_joint_mask(n_cond: int, n_target: int) -> torch.Tensor:
    """Mask for ``[cond][shifted targets][one-step queries]`` in one pass.

    Each target segment sees exactly what it would in its own pass, so the
    conditioning segment is computed once for both.
    """
    L = n_cond + 2 * n_target
    mask = torch.zeros(L, L, dtype=torch.bool)
    mask[:, :n_cond] = True
    ar, one = slice(n_cond, n_cond + n_target), slice(n_cond + n_target, L)
    mask[ar, ar] = torch.ones(n_target, n_target).tril().bool()
    mask[one, one] = torch.eye(n_target, dtype=torch.bool)
    return mask


class SamplerModel(nn.Module):
    """Transformer T(z', x) producing per-position distributions over the codebook."""

    def __init__(self, arch: SamplerArch):
        super().__init__()
        self.arch = arch
        K, E = arch.n_codes, arch.n_embd
        self.start_index = K
        self.null_index = K
        self.mask_index = K + 1
        self.tok_emb = nn.Embedding(K + 2, E)
        self.guide_emb = nn.Embedding(K + 1, E)
        self.query_emb = nn.Parameter(torch.zeros(E))
        self.pos_emb = nn.Parameter(torch.zeros(1, arch.block_size, E))
        self.features = FeatureExtractor(arch) if arch.use_features else None
        self.drop = nn.Dropout(arch.dropout)
        self.blocks = nn.ModuleList(Block(E, arch.n_head, arch.dropout) for _ in range(arch.n_layer))
        self.ln_f = nn.LayerNorm(E)
        self.head = nn.Linear(E, K, bias=False)
        self.apply(self._init_weights)
        nn.init.normal_(self.pos_emb, std=0.02)
        nn.init.normal_(self.query_emb, std=0.02)
        self.forward_calls = 0

    @staticmethod
    def _init_weights(module):
        if isinstance(module, nn.Linear):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)
            if module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.Embedding):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    @torch.no_grad()
    def init_from_codebook(self, codebook: torch.Tensor, generator: torch.Generator | None = None) -> None:
        """Seed token, guidance and output embeddings from the code vectors.

        A fixed random projection maps each D-dim code to the model width, so
        codes that decode alike start with nearby embeddings and logits.
        """
        K, D = codebook.shape
        if K != self.arch.n_codes:
            raise ShapeError(f"codebook has {K} codes, sampler expects {self.arch.n_codes}")
        proj = torch.randn(D, self.arch.n_embd, generator=generator)
        base = codebook.detach().float() @ proj
        base = (base - base.mean(0)) / base.std().clamp_min(1e-12) * 0.02
        self.tok_emb.weight[:K] = base
        self.guide_emb.weight[:K] = base
        self.head.weight.copy_(base)

    @property
    def n_target(self) -> int:
        return self.arch.n_target

    @property
    def n_cond(self) -> int:
        return self.arch.n_feature_tokens + self.arch.n_target

    def condition(self, guidance: torch.Tensor, features: torch.Tensor | None) -> torch.Tensor:
        """Embed the conditioning segments; returns (B, n_cond, E) without positions."""
        B = guidance.shape[0]
        if guidance.shape[1:] != (self.n_target,):
            raise ShapeError(f"guidance must be (B, {self.n_target}), got {tuple(guidance.shape)}")
        parts = []
        if self.features is not None:
            if features is None:
                raise ShapeError("this sampler conditions on features; pass the pseudo-sensor grid")
            a = self.arch
            if features.shape[1:] != (a.feature_channels, a.feature_height, a.feature_width):
                raise ShapeError(f"features must be (B, {a.feature_channels}, {a.feature_height}, "
                                 f"{a.feature_width}), got {tuple(features.shape)}")
            parts.append(self.features(features.float()))
        parts.append(self.guide_emb(guidance))
        out = torch.cat(parts, dim=1)
        assert out.shape[:2] == (B, self.n_cond)
        return out

    def slot_inputs(self, cond: torch.Tensor) -> torch.Tensor | None:
        """Same-position conditioning added to target inputs, or None when disabled."""
        if not self.arch.slot_conditioning:
            return None
        Nf = self.arch.n_feature_tokens
        slot = cond[:, Nf:]
        return slot + cond[:, :Nf] if Nf else slot

    def _run(self, x, mask, cache=None):
        x = self.drop(x)
        for i, block in enumerate(self.blocks):
            x = block(x, mask, cache, i)
        return self.head(self.ln_f(x))

    def forward(self, guidance, features=None, targets=None, one_step: bool = False, cond=None):
        """Logits (B, n_target, K) for every target slot.

        With ``one_step=False`` the targets are teacher-forced (only tokens
        before each slot are visible). ``cond`` reuses the output of
        :meth:`condition` for the same inputs.
        """
        self.forward_calls += 1
        B, N = guidance.shape[0], self.n_target
        if cond is None:
            cond = self.condition(guidance, features)
        if one_step:
            if not self.arch.one_step:
                raise CapabilityError("sampler was built without the one-step head")
            tgt = self.query_emb.expand(B, N, -1)
        else:
            if targets is None or targets.shape != (B, N):
                raise ShapeError(f"targets must be (B, {N}) for teacher forcing")
            start = torch.full((B, 1), self.start_index, dtype=torch.long)
            tgt = self.tok_emb(torch.cat([start, targets[:, :-1]], dim=1))
        slot = self.slot_inputs(cond)
        if slot is not None:
            tgt = tgt + slot
        x = torch.cat([cond, tgt], dim=1) + self.pos_emb[:, : self.n_cond + N]
        mask = build_mask(self.n_cond, N, one_step)
        return self._run(x, mask)[:, self.n_cond :]

    def forward_joint(self, guidance, targets, features=None, cond=None):
        """Teacher-forced and one-step logits from a single pass; returns both (B, n_target, K)."""
        if not self.arch.one_step:
            raise CapabilityError("sampler was built without the one-step head")
        self.forward_calls += 1
        B, N = guidance.shape[0], self.n_target
        if targets is None or targets.shape != (B, N):
            raise ShapeError(f"targets must be (B, {N}) for teacher forcing")
        if cond is None:
            cond = self.condition(guidance, features)
        start = torch.full((B, 1), self.start_index, dtype=torch.long)
        ar = self.tok_emb(torch.cat([start, targets[:, :-1]], dim=1))
        one = self.query_emb.expand(B, N, -1)
        slot = self.slot_inputs(cond)
        if slot is not None:
            ar, one = ar + slot, one + slot
        pos = self.pos_emb[:, : self.n_cond + N]
        x = torch.cat([cond + pos[:, : self.n_cond], ar + pos[:, self.n_cond :], one + pos[:, self.n_cond :]], dim=1)
        out = self._run(x, build_joint_mask(self.n_cond, N))
        return out[:, self.n_cond : self.n_cond + N], out[:, self.n_cond + N :]

    def start(self, guidance, features=None):
        """Encode conditioning plus the start token; returns (logits for slot 0, cache)."""
        self.forward_calls += 1
        B = guidance.shape[0]
        cond = self.condition(guidance, features)
        start = self.tok_emb(torch.full((B, 1), self.start_index, dtype=torch.long))
        cache = KVCache(len(self.blocks))
        cache.slot = self.slot_inputs(cond)
        if cache.slot is not None:
            start = start + cache.slot[:, :1]
        L = self.n_cond + 1
        x = torch.cat([cond, start], dim=1) + self.pos_emb[:, :L]
        logits = self._run(x, build_mask(self.n_cond, 1), cache)
        return logits[:, -1], cache

    def step(self, prev_tokens, slot: int, cache: KVCache):
        """Feed token ``slot-1`` at target slot ``slot``; returns logits for that slot."""
        if not 0 < slot < self.n_target:
            raise ValueError(f"slot {slot} outside (0, {self.n_target})")
        self.forward_calls += 1
        pos = self.n_cond + slot
        x = self.tok_emb(prev_tokens.view(-1, 1)) + self.pos_emb[:, pos : pos + 1]
        if cache.slot is not None:
            x = x + cache.slot[:, slot : slot + 1]
        return self._run(x, None, cache)[:, -1]
