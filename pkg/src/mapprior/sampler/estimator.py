"""Estimator wrapper for the conditional latent sampler."""
from __future__ import annotations

import dataclasses
import logging

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from mapprior import checkpoint
from mapprior.exceptions import ConfigurationError, NumericAbort, ShapeError
from mapprior.presets import SamplerArch, get_preset
from mapprior.prior.estimator import VQPrior
from mapprior.sampler.gpt import SamplerModel
from mapprior.sampler.sampling import SamplingParams, one_step_tokens, sample_tokens
from mapprior.sampler.training import SamplerTrainConfig, SamplerTrainer
from mapprior.seeding import derive_seed, torch_generator
from mapprior.validation import batches, check_layout_array

log = logging.getLogger(__name__)


def _rotate_pair(tensors, k: int):
    return [torch.rot90(t, k, dims=(-2, -1)).contiguous() if (t is not None and k) else t for t in tensors]


class LatentSampler(BaseEstimator):
    """Transformer over prior tokens conditioned on guidance tokens and sensor features.

    ``fit(X, Y)`` takes pseudo-sensor grids ``X`` (N, F, H, W) and
    ground-truth layouts ``Y`` (N, C, H, W). The noisy estimate used as
    guidance defaults to the first C channels of ``X``; pass ``noisy`` to
    override it. ``prior`` must be a fitted :class:`VQPrior` and stays frozen.
    """

    def __init__(self, prior=None, preset="toy", n_steps=800, batch_size=16, learning_rate=None,
                 tau=1.0, out_multiplier=100.0, output_loss=True, guidance_dropout=0.1,
                 condition_on_features=True, one_step=True, one_step_weight=1.0, token_dropout=0.0,
                 codebook_init=False, augment=True, seed=0, verbose=0):
        self.prior = prior
        self.preset = preset
        self.n_steps = n_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.tau = tau
        self.out_multiplier = out_multiplier
        self.output_loss = output_loss
        self.guidance_dropout = guidance_dropout
        self.condition_on_features = condition_on_features
        self.one_step = one_step
        self.one_step_weight = one_step_weight
        self.token_dropout = token_dropout
        self.codebook_init = codebook_init
        self.augment = augment
        self.seed = seed
        self.verbose = verbose

    def _arch(self) -> SamplerArch:
        base = get_preset(self.preset).sampler
        return dataclasses.replace(base, use_features=bool(self.condition_on_features), one_step=bool(self.one_step))

    def _check_prior(self) -> VQPrior:
        if self.prior is None:
            raise ConfigurationError("LatentSampler needs a fitted VQPrior")
        check_is_fitted(self.prior, "model_")
        if self.prior.preset != self.preset:
            raise ConfigurationError(f"prior preset {self.prior.preset!r} != sampler preset {self.preset!r}")
        return self.prior

    def _split(self, X, Y=None, noisy=None):
        preset = get_preset(self.preset)
        a = self._arch()
        X = check_layout_array(X, a.feature_channels, (a.feature_height, a.feature_width), name="X", finite_only=True)
        if noisy is None:
            noisy = np.clip(X[:, : preset.n_channels], 0.0, 1.0)
        noisy = check_layout_array(noisy, preset.n_channels, (preset.height, preset.width), name="noisy")
        if len(noisy) != len(X):
            raise ShapeError("X and noisy have different lengths")
        if Y is not None:
            Y = check_layout_array(Y, preset.n_channels, (preset.height, preset.width), name="Y")
            if len(Y) != len(X):
                raise ShapeError("X and Y have different lengths")
        return X, Y, noisy

    def init_model(self) -> "LatentSampler":
        torch.manual_seed(derive_seed(self.seed, "sampler-init"))
        self.model_ = SamplerModel(self._arch())
        if self.codebook_init:
            self.model_.init_from_codebook(self._check_prior().model_.codebook.weight,
                                           torch_generator(derive_seed(self.seed, "embed-init")))
        self.loss_history_ = []
        return self

    def fit(self, X, Y, noisy=None, callback=None):
        prior = self._check_prior()
        X, Y, noisy = self._split(X, Y, noisy)
        self.init_model()
        cfg = SamplerTrainConfig(
            lr=self.learning_rate or get_preset(self.preset).sampler_lr,
            batch_size=self.batch_size,
            steps=self.n_steps,
            tau=self.tau,
            out_multiplier=self.out_multiplier,
            output_loss=self.output_loss,
            guidance_dropout=self.guidance_dropout,
            one_step_weight=self.one_step_weight if self.one_step else 0.0,
            token_dropout=self.token_dropout,
            seed=derive_seed(self.seed, "sampler-train"),
        )
        trainer = SamplerTrainer(self.model_, prior.model_, cfg)
        Xt, Yt, Nt = (torch.from_numpy(a.copy()) for a in (X, Y, noisy))
        g = torch_generator(derive_seed(self.seed, "sampler-batches"))
        prev = None
        # the prior is frozen, so tokens of each (scene, rotation) are computed once;
        # one preallocated table avoids heap fragmentation from many small tensors
        table = torch.zeros(len(Xt), 4, 2, self.model_.n_target, dtype=torch.long)
        known = torch.zeros(len(Xt), 4, dtype=torch.bool)
        for step in range(self.n_steps):
            pick = torch.randint(0, len(Xt), (min(self.batch_size, len(Xt)),), generator=g)
            y, n, x = Yt[pick], Nt[pick], Xt[pick]
            k = int(torch.randint(0, 4, (1,), generator=g)) if self.augment else 0
            y, n, x = _rotate_pair((y, n, x), k)
            missing = (~known[pick, k]).nonzero().flatten()
            if len(missing):
                zg, zn = trainer.tokens(y[missing].float(), n[missing].float())
                table[pick[missing], k, 0], table[pick[missing], k, 1] = zg, zn
                known[pick[missing], k] = True
            tokens = (table[pick, k, 0], table[pick, k, 1])
            snap = checkpoint.snapshot(self.model_)
            try:
                report = trainer.step(y, n, x, tokens=tokens)
            except NumericAbort:
                self.model_.load_state_dict(prev if prev is not None else snap)
                self.model_.eval()
                raise
            prev = snap
            self.loss_history_.append(report)
            if callback is not None:
                callback(report)
            if self.verbose and step % 100 == 0:
                log.info("sampler step %d %s", step, report)
        self.model_.eval()
        self.prior_config_hash_ = prior.config_hash_
        self.prior_state_hash_ = prior.state_hash()
        return self

    def guidance_tokens(self, noisy) -> torch.Tensor:
        prior = self._check_prior()
        tok = prior.transform(noisy)
        return torch.from_numpy(tok.reshape(len(tok), -1))

    def sample(self, X, noisy=None, params: SamplingParams | None = None, greedy: bool = False) -> np.ndarray:
        """Token samples of shape (N, n_samples, h, w).

        Sample ``k`` of item ``i`` is drawn from a generator seeded with
        ``derive_seed(params.seed, i)``, so items are independent of batching.
        """
        check_is_fitted(self, "model_")
        params = params or SamplingParams()
        X, _, noisy = self._split(X, None, noisy)
        guide = self.guidance_tokens(noisy)
        a = self.model_.arch
        out = []
        for i in range(len(X)):
            p_i = dataclasses.replace(params, seed=derive_seed(params.seed, i))
            feats = torch.from_numpy(X[i : i + 1]) if a.use_features else None
            out.append(sample_tokens(guide[i : i + 1], feats, self.model_, p_i, greedy=greedy)[0])
        return torch.stack(out).view(len(X), -1, a.latent_height, a.latent_width).numpy()

    def predict_one_step(self, X, noisy=None, mode="argmax", seed=0) -> np.ndarray:
        """One-pass token grids (N, h, w)."""
        check_is_fitted(self, "model_")
        X, _, noisy = self._split(X, None, noisy)
        guide = self.guidance_tokens(noisy)
        a = self.model_.arch
        out = []
        for s in batches(len(X), 32):
            feats = torch.from_numpy(X[s]) if a.use_features else None
            out.append(one_step_tokens(guide[s], feats, self.model_, mode, seed))
        return torch.cat(out).view(len(X), a.latent_height, a.latent_width).numpy()

    @property
    def config_hash_(self) -> str:
        return checkpoint.model_config_hash(self.preset, self._arch())

    def state_hash(self) -> str:
        check_is_fitted(self, "model_")
        return checkpoint.state_hash(self.model_.state_dict())

    def save(self, path, meta: dict | None = None):
        check_is_fitted(self, "model_")
        params = {k: v for k, v in self.get_params(deep=False).items() if k != "prior"}
        meta = {
            "params": params,
            "prior_config_hash": getattr(self, "prior_config_hash_", self._check_prior().config_hash_),
            "prior_state_hash": getattr(self, "prior_state_hash_", None),
            **(meta or {}),
        }
        return checkpoint.save_checkpoint(
            path, checkpoint.build_payload("sampler", self.preset, self._arch(), self.model_, meta)
        )

    @classmethod
    def load(cls, path, prior: VQPrior) -> "LatentSampler":
        """Load a sampler checkpoint; refuses a prior with a different architecture."""
        payload = checkpoint.load_checkpoint(path, kind="sampler")
        meta = payload["meta"]
        params = meta.get("params", {"preset": payload["preset"]})
        est = cls(prior=prior, **{k: v for k, v in params.items() if k in cls._get_param_names() and k != "prior"})
        if checkpoint.model_config_hash(est.preset, est._arch()) != payload["config_hash"]:
            raise ConfigurationError(f"{path}: architecture does not match preset {est.preset!r}")
        check_is_fitted(prior, "model_")
        if prior.config_hash_ != meta.get("prior_config_hash"):
            raise ConfigurationError(f"{path}: sampler was trained against a different prior configuration")
        recorded = meta.get("prior_state_hash")
        if recorded is not None and recorded != prior.state_hash():
            raise ConfigurationError(f"{path}: sampler was trained against different prior weights")
        est.model_ = SamplerModel(est._arch())
        est.model_.load_state_dict(payload["state_dict"])
        est.model_.eval()
        est.prior_config_hash_ = meta.get("prior_config_hash")
        est.prior_state_hash_ = meta.get("prior_state_hash")
        est.loss_history_ = []
        return est
