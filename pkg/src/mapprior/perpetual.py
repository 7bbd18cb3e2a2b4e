"""Sliding-window outpainting of an ever-growing layout strip.

The sampler emits tokens in row-major order, so context must come first
in that order. Generation therefore runs in the model's own frame as a
strip that grows downward: each new window takes the last ``w - s`` token
rows of the canvas as a fixed prefix and samples ``s`` new rows. The public
view (``TokenCanvas.tokens`` and the pixel strip) is that strip turned a
quarter turn counterclockwise, so it grows left to right. Scene statistics
are rotation invariant, so the turned strip is still an in-distribution
layout; token codes themselves keep their native orientation.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.utils.validation import check_is_fitted

from mapprior import bml
from mapprior.exceptions import CapabilityError, ConfigurationError
from mapprior.layout import SoftLayout
from mapprior.presets import get_preset
from mapprior.prior.estimator import VQPrior, decode_tensor
from mapprior.sampler.estimator import LatentSampler
from mapprior.sampler.sampling import SamplingParams, sample_tokens
from mapprior.seeding import derive_seed


@dataclass
class TokenCanvas:
    """Growing token strip plus its decoded pixels and a per-step log.

    ``native`` holds tokens in generation frame, shape (W_tok, h): row ``j``
    is strip position ``j``. ``pixels`` is the decoded strip in the same
    frame, (C, W_tok * patch, width).
    """

    native: np.ndarray
    pixels: np.ndarray
    window: int
    stride: int
    n_codes: int
    seed: int
    channels: tuple
    resolution: float
    steps_done: int = 0
    log: list = field(default_factory=list)

    @property
    def tokens(self) -> np.ndarray:
        """Public (h, W_tok) token grid; column ``j`` is strip position ``j``."""
        return np.rot90(self.native, 1).copy()

    @property
    def width_tokens(self) -> int:
        return self.native.shape[0]

    def strip(self) -> SoftLayout:
        """Decoded strip turned to grow left to right, (C, H, W_px)."""
        return SoftLayout(self.channels, np.rot90(self.pixels, 1, axes=(1, 2)).copy(), self.resolution)

    def seam_discrepancy(self) -> float:
        """Mean over steps of mean |new - old| on overlapping pixels."""
        vals = [e["seam_mean_abs"] for e in self.log if e.get("kind") == "extend"]
        return float(np.mean(vals)) if vals else 0.0

    def copy(self) -> "TokenCanvas":
        return dataclasses.replace(self, native=self.native.copy(), pixels=self.pixels.copy(),
                                   log=[dict(e) for e in self.log])


def _check_models(prior: VQPrior, sampler: LatentSampler):
    for est, name in ((prior, "prior"), (sampler, "sampler")):
        try:
            check_is_fitted(est, "model_")
        except Exception as exc:
            raise CapabilityError(f"perpetual generation needs a trained {name}") from exc
    if prior.preset != sampler.preset:
        raise ConfigurationError("prior and sampler presets differ")
    a = sampler.model_.arch
    if a.latent_height != a.latent_width:
        raise ConfigurationError("perpetual generation needs a square token window")


def _null_inputs(sampler: LatentSampler):
    m = sampler.model_
    a = m.arch
    guide = torch.full((1, m.n_target), m.null_index, dtype=torch.long)
    feats = torch.zeros(1, a.feature_channels, a.feature_height, a.feature_width) if m.features is not None else None
    return guide, feats


@torch.no_grad()
def _decode_window(prior: VQPrior, window_tokens: np.ndarray) -> np.ndarray:
    return decode_tensor(prior.model_, torch.from_numpy(window_tokens)[None])[0].clamp(0, 1).numpy()


def init_canvas(prior: VQPrior, sampler: LatentSampler, seed: int = 0, stride: int | None = None,
                params: SamplingParams | None = None) -> TokenCanvas:
    """Sample one unconditional window (null guidance, zero features)."""
    _check_models(prior, sampler)
    a = sampler.model_.arch
    w = a.latent_height
    s = w // 2 if stride is None else stride
    if not 0 < s < w:
        raise ConfigurationError(f"stride must satisfy 0 < s < w, got s={s}, w={w}")
    params = params or SamplingParams()
    step_seed = derive_seed(seed, "perpetual", "init")
    guide, feats = _null_inputs(sampler)
    toks = sample_tokens(guide, feats, sampler.model_, dataclasses.replace(params, seed=step_seed, n_samples=1))
    native = toks[0, 0].view(w, w).numpy().astype(np.int64)
    pixels = _decode_window(prior, native)
    preset = get_preset(prior.preset)
    canvas = TokenCanvas(native, pixels, w, s, a.n_codes, seed, preset.classes, preset.resolution)
    canvas.log.append({"kind": "init", "step": 0, "seed": step_seed, "window_start": 0,
                       "new_positions": [0, w]})
    return canvas


def extend(canvas: TokenCanvas, steps: int, prior: VQPrior, sampler: LatentSampler,
           seed: int | None = None, params: SamplingParams | None = None) -> TokenCanvas:
    """Append ``steps`` windows of ``stride`` new token columns each; returns a new canvas.

    Step ``k`` overall draws from ``derive_seed(seed, "perpetual", k)`` so
    extending by 10 then 20 equals extending by 30 once.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    w, s = canvas.window, canvas.stride
    if not 0 < s < w:
        raise ConfigurationError(f"stride must satisfy 0 < s < w, got s={s}, w={w}")
    out = canvas.copy()
    if steps == 0:
        return out
    _check_models(prior, sampler)
    seed = canvas.seed if seed is None else seed
    params = params or SamplingParams()
    guide, feats = _null_inputs(sampler)
    m = sampler.model_
    patch = out.pixels.shape[1] // out.native.shape[0]
    n_ctx = w - s
    for _ in range(steps):
        k = out.steps_done + 1
        step_seed = derive_seed(seed, "perpetual", k)
        start = out.native.shape[0] - n_ctx
        context = out.native[start:]
        prefix = torch.from_numpy(context.reshape(1, -1).copy())
        toks = sample_tokens(guide, feats, m, dataclasses.replace(params, seed=step_seed, n_samples=1),
                             prefix=prefix)
        window = toks[0, 0].view(w, w).numpy().astype(np.int64)
        context_equal = bool(np.array_equal(window[:n_ctx], context))
        if not context_equal:
            raise AssertionError(f"step {k}: window context diverged from canvas")
        decoded = _decode_window(prior, window)
        overlap_old = out.pixels[:, start * patch :]
        overlap_new = decoded[:, : n_ctx * patch]
        seam = float(np.abs(overlap_new - overlap_old).mean())
        out.native = np.concatenate([out.native, window[n_ctx:]], axis=0)
        # overwrite-with-newest on the overlapping pixel rows
        out.pixels = np.concatenate([out.pixels[:, : start * patch], decoded], axis=1)
        out.steps_done = k
        out.log.append({"kind": "extend", "step": k, "seed": step_seed, "window_start": start,
                        "context_positions": [start, start + n_ctx],
                        "new_positions": [start + n_ctx, start + w],
                        "context_equal": context_equal, "seam_mean_abs": seam})
    return out


def _render_png(channel: np.ndarray, path: Path) -> None:
    from PIL import Image

    Image.fromarray(np.round(np.clip(channel, 0, 1) * 255).astype(np.uint8)).save(path)


def export_strip(canvas: TokenCanvas, path) -> dict:
    """Write ``strip.bml``, one PNG per channel and ``steps.jsonl`` into directory ``path``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    strip = canvas.strip()
    bml.write_bml(strip, d / "strip.bml", provenance={
        "seed": canvas.seed, "steps": canvas.steps_done, "window": canvas.window, "stride": canvas.stride,
        "seam_mean_abs": canvas.seam_discrepancy(),
    })
    pngs = []
    for i, name in enumerate(strip.channels):
        p = d / f"strip_{i:02d}_{name}.png"
        _render_png(strip.data[i], p)
        pngs.append(p.name)
    np.save(d / "tokens.npy", canvas.tokens)
    with open(d / "steps.jsonl", "w") as fh:
        for entry in canvas.log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    return {"bml": "strip.bml", "png": pngs, "log": "steps.jsonl", "tokens": "tokens.npy",
            "width_px": strip.width, "width_tokens": canvas.width_tokens}
