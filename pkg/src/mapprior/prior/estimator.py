"""Estimator wrapper around the VQ prior: fit on layouts, transform to tokens."""
from __future__ import annotations

import logging

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from mapprior import checkpoint
from mapprior.exceptions import ConfigurationError, NumericAbort, ShapeError
from mapprior.layout import LayoutGrid, SoftLayout, _Grid
from mapprior.presets import PriorArch, get_preset
from mapprior.prior.nn import PriorModel
from mapprior.prior.quantize import TokenGrid, quantize_bchw
from mapprior.prior.training import PriorTrainer, VqTrainConfig, augment_batch
from mapprior.seeding import derive_seed, torch_generator
from mapprior.validation import batches, check_layout_array, check_token_array

log = logging.getLogger(__name__)


@torch.no_grad()
def encode_tensor(model: PriorModel, y: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) layouts -> (B, h, w) code indices."""
    model.eval()
    idx, _ = quantize_bchw(model.encoder(y.float()), model.codebook.weight)
    return idx


def decode_tensor(model: PriorModel, idx: torch.Tensor) -> torch.Tensor:
    """(B, h, w) code indices -> (B, C, H, W) probabilities."""
    if idx.numel() and (idx.min() < 0 or idx.max() >= model.codebook.n_codes):
        raise IndexError(f"token index out of range [0, {model.codebook.n_codes})")
    model.eval()
    z = model.codebook(idx).permute(0, 3, 1, 2)
    return model.decoder(z)


def encode(layout, model: PriorModel) -> TokenGrid:
    """Encode one layout (binary or soft) to its token grid."""
    arch = model.arch
    y = check_layout_array(layout, arch.in_channels, (arch.height, arch.width), name="layout")
    if y.shape[0] != 1:
        raise ShapeError("encode takes a single layout; use VQPrior.transform for batches")
    idx = encode_tensor(model, torch.from_numpy(y))
    return TokenGrid(idx[0].numpy(), arch.n_codes)


@torch.no_grad()
def decode(tokens: TokenGrid, model: PriorModel, channels=None, resolution: float = 1.0) -> SoftLayout:
    arch = model.arch
    if tokens.n_codes != arch.n_codes:
        raise ConfigurationError(f"token grid has {tokens.n_codes} codes, model has {arch.n_codes}")
    if tokens.shape != (arch.latent_height, arch.latent_width):
        raise ShapeError(f"token grid {tokens.shape} != latent dims {(arch.latent_height, arch.latent_width)}")
    probs = decode_tensor(model, torch.from_numpy(tokens.indices.copy())[None])[0].numpy()
    channels = channels or tuple(f"c{i}" for i in range(arch.in_channels))
    return SoftLayout(channels, np.clip(probs, 0.0, 1.0), resolution)


class VQPrior(TransformerMixin, BaseEstimator):
    """Vector-quantized generative prior over BEV layouts.

    ``fit`` trains encoder, decoder, codebook and patch discriminator on
    ground-truth layouts; ``transform`` maps layouts to (N, h, w) token
    grids and ``inverse_transform`` decodes token grids to probabilities.

    Parameters
    ----------
    preset : {"toy", "paper"}
    n_steps : int
        Optimizer steps.
    batch_size : int
    learning_rate : float or None
        ``None`` uses the preset default.
    sigma : float
        Stabilizer of the adaptive GAN weight.
    gan_start : int or None
        First step with a nonzero GAN weight; ``None`` means 25% of ``n_steps``.
    augment : bool
        Random quarter-turn rotations of training batches.
    seed : int
    """

    def __init__(self, preset="toy", n_steps=1200, batch_size=8, learning_rate=None, sigma=1e-4,
                 gan_start=None, augment=True, seed=0, verbose=0):
        self.preset = preset
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.sigma = sigma
        self.gan_start = gan_start
        self.augment = augment
        self.seed = seed
        self.verbose = verbose

    def _arch(self) -> PriorArch:
        return get_preset(self.preset).prior

    def _train_config(self) -> VqTrainConfig:
        return VqTrainConfig(
            lr=self.learning_rate or get_preset(self.preset).prior_lr,
            sigma=self.sigma,
            batch_size=self.batch_size,
            steps=self.n_steps,
            gan_start=self.gan_start,
            augment=self.augment,
            seed=derive_seed(self.seed, "prior-train"),
        )

    def init_model(self) -> "VQPrior":
        torch.manual_seed(derive_seed(self.seed, "prior-init"))
        self.model_ = PriorModel(self._arch())
        self.loss_history_ = []
        return self

    def fit(self, Y, y=None, callback=None):
        arch = self._arch()
        data = torch.from_numpy(check_layout_array(Y, arch.in_channels, (arch.height, arch.width)).copy())
        self.init_model()
        trainer = PriorTrainer(self.model_, self._train_config())
        g = torch_generator(derive_seed(self.seed, "prior-batches"))
        prev = None
        for step in range(self.n_steps):
            pick = torch.randint(0, data.shape[0], (min(self.batch_size, data.shape[0]),), generator=g)
            batch = data[pick]
            if self.augment:
                batch = augment_batch(batch, g)
            snap = checkpoint.snapshot(self.model_)
            try:
                report = trainer.step(batch)
            except NumericAbort:
                # the update before this step produced the bad weights; roll back past it
                self.model_.load_state_dict(prev if prev is not None else snap)
                self.model_.eval()
                raise
            prev = snap
            self.loss_history_.append(report)
            if callback is not None:
                callback(report)
            if self.verbose and step % 100 == 0:
                log.info("prior step %d %s", step, report)
        self.model_.eval()
        self.n_reseeded_codes_ = trainer.reseeded
        return self

    def transform(self, Y) -> np.ndarray:
        check_is_fitted(self, "model_")
        arch = self.model_.arch
        data = check_layout_array(Y, arch.in_channels, (arch.height, arch.width))
        out = [encode_tensor(self.model_, torch.from_numpy(data[s])) for s in batches(len(data), 64)]
        return torch.cat(out).numpy()

    @torch.no_grad()
    def inverse_transform(self, tokens) -> np.ndarray:
        check_is_fitted(self, "model_")
        arch = self.model_.arch
        idx = check_token_array(tokens, arch.n_codes, (arch.latent_height, arch.latent_width))
        out = [decode_tensor(self.model_, torch.from_numpy(idx[s])) for s in batches(len(idx), 64)]
        return torch.cat(out).numpy()

    def reconstruct(self, Y) -> np.ndarray:
        return self.inverse_transform(self.transform(Y))

    def encode(self, layout: _Grid) -> TokenGrid:
        check_is_fitted(self, "model_")
        return encode(layout, self.model_)

    def decode(self, tokens: TokenGrid, channels=None, resolution=None) -> SoftLayout:
        check_is_fitted(self, "model_")
        preset = get_preset(self.preset)
        return decode(tokens, self.model_, channels or preset.classes,
                      preset.resolution if resolution is None else resolution)

    @property
    def codebook_(self) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.codebook.weight.detach().numpy().copy()

    @property
    def config_hash_(self) -> str:
        return checkpoint.model_config_hash(self.preset, self._arch())

    def state_hash(self) -> str:
        check_is_fitted(self, "model_")
        return checkpoint.state_hash(self.model_.state_dict())

    def save(self, path, meta: dict | None = None):
        check_is_fitted(self, "model_")
        meta = {"params": self.get_params(deep=False), **(meta or {})}
        return checkpoint.save_checkpoint(
            path, checkpoint.build_payload("prior", self.preset, self._arch(), self.model_, meta)
        )

    @classmethod
    def load(cls, path) -> "VQPrior":
        payload = checkpoint.load_checkpoint(path, kind="prior")
        params = payload["meta"].get("params", {"preset": payload["preset"]})
        est = cls(**{k: v for k, v in params.items() if k in cls._get_param_names()})
        if checkpoint.model_config_hash(est.preset, est._arch()) != payload["config_hash"]:
            raise ConfigurationError(f"{path}: architecture does not match preset {est.preset!r}")
        est.model_ = PriorModel(est._arch())
        est.model_.load_state_dict(payload["state_dict"])
        est.model_.eval()
        est.loss_history_ = []
        return est


def layouts_from_array(arr: np.ndarray, channels, resolution: float, binary: bool = False):
    cls = LayoutGrid if binary else SoftLayout
    return [cls(tuple(channels), a >= 0.5 if binary else np.clip(a, 0, 1), resolution) for a in arr]
