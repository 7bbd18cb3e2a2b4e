"""Perception stand-in, generative refinement and sample aggregation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from mapprior import bml
from mapprior.exceptions import CapabilityError, ConfigurationError, DataError, NumericAbort, ShapeError
from mapprior.layout import CorruptionParams, LayoutGrid, PseudoSensor, SoftLayout, corrupt
from mapprior.presets import get_preset
from mapprior.prior.estimator import VQPrior, decode_tensor, encode_tensor
from mapprior.sampler.estimator import LatentSampler
from mapprior.sampler.sampling import SamplingParams, one_step_tokens, sample_tokens
from mapprior.seeding import derive_seed
from mapprior.validation import check_layout_array

BCE_EPS = 1e-7


@dataclass(frozen=True)
class SampleBundle:
    """K refined samples with their per-cell mean, variance and thresholded map."""

    samples: tuple
    confidence: SoftLayout
    uncertainty: SoftLayout
    final: LayoutGrid
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.samples) < 1:
            raise ValueError("a bundle needs at least one sample")

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, s in enumerate(self.samples):
            bml.write_bml(s, d / f"sample_{k}.bml")
        bml.write_bml(self.confidence, d / "confidence.bml")
        bml.write_bml(self.uncertainty, d / "uncertainty.bml")
        bml.write_bml(self.final, d / "final.bml")
        meta = {**self.meta, "n_samples": self.n_samples}
        (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1, default=str))
        return d

    @classmethod
    def load(cls, directory) -> "SampleBundle":
        d = Path(directory)
        meta_path = d / "meta.json"
        if not meta_path.exists():
            raise DataError(f"{d}: missing meta.json")
        meta = json.loads(meta_path.read_text())
        samples = tuple(bml.read_bml(d / f"sample_{k}.bml") for k in range(int(meta["n_samples"])))
        return cls(samples, bml.read_bml(d / "confidence.bml"), bml.read_bml(d / "uncertainty.bml"),
                   bml.read_bml(d / "final.bml"), meta)


def aggregate(sample_probs, channels, resolution: float, binarized_confidence: bool = False,
              soft_variance: bool = False, threshold: float = 0.5, meta: dict | None = None) -> SampleBundle:
    """Fold (K, C, H, W) decoded samples into a bundle.

    Confidence is the mean of the soft samples (or of the binarized ones);
    uncertainty is the population variance of the binarized samples (or of
    the soft ones); the final map thresholds the confidence.
    """
    probs = np.clip(np.asarray(sample_probs, dtype=np.float64), 0.0, 1.0)
    if probs.ndim != 4 or probs.shape[0] < 1:
        raise ShapeError(f"expected (K, C, H, W) samples, got {probs.shape}")
    hard = (probs >= threshold).astype(np.float64)
    conf = (hard if binarized_confidence else probs).mean(axis=0)
    var = (probs if soft_variance else hard).var(axis=0)
    channels = tuple(channels)
    samples = tuple(SoftLayout(channels, p.astype(np.float32), resolution) for p in probs)
    conf32 = conf.astype(np.float32)
    return SampleBundle(
        samples=samples,
        confidence=SoftLayout(channels, conf32, resolution),
        uncertainty=SoftLayout(channels, np.clip(var, 0.0, 1.0).astype(np.float32), resolution),
        final=LayoutGrid(channels, (conf32 >= threshold).astype(np.uint8), resolution),
        meta=dict(meta or {}),
    )


class PerceptionNet(nn.Module):
    """Small dilated conv net mapping pseudo-sensor grids to class probabilities."""

    def __init__(self, in_channels: int = 8, n_classes: int = 6, width: int = 32):
        super().__init__()
        layers, ch = [], in_channels
        for d in (1, 2, 4, 1):
            layers += [nn.Conv2d(ch, width, 3, padding=d, dilation=d), nn.GroupNorm(8, width), nn.ReLU()]
            ch = width
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(width, n_classes, 1)
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))

    def logits(self, x):
        return self.head(self.body(x))

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def perception_loss(pred: torch.Tensor, gt: torch.Tensor, one_sided: bool = False, eps: float = BCE_EPS):
    """Mean binary cross-entropy; ``one_sided`` keeps only the ``-y log p`` term."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and target {tuple(gt.shape)} differ")
    p = pred.clamp(eps, 1.0 - eps)
    loss = -gt * torch.log(p)
    if not one_sided:
        loss = loss - (1.0 - gt) * torch.log1p(-p)
    return loss.mean()


def train_perception_step(x: torch.Tensor, y_gt: torch.Tensor, net: PerceptionNet,
                          optimizer: torch.optim.Optimizer, one_sided: bool = False) -> float:
    net.train()
    loss = perception_loss(net(x.float()), y_gt.float(), one_sided)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericAbort("non-finite perception loss", {"bce": value})
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    net.trained.fill_(True)
    return value


def predict_initial(source, mode: str = "corruptor", params: CorruptionParams | None = None,
                    net: PerceptionNet | None = None) -> tuple[SoftLayout, PseudoSensor]:
    """Noisy layout estimate plus the pseudo-sensor grid it came with.

    ``corruptor`` corrupts a ground-truth :class:`LayoutGrid`. ``toy-net``
    runs a trained :class:`PerceptionNet` on a :class:`PseudoSensor`.
    """
    if mode == "corruptor":
        if not isinstance(source, LayoutGrid):
            raise TypeError("corruptor mode takes a ground-truth LayoutGrid")
        return corrupt(source, params)
    if mode == "toy-net":
        if not isinstance(source, PseudoSensor):
            raise TypeError("toy-net mode takes a PseudoSensor")
        if net is None or not bool(net.trained):
            raise CapabilityError("toy-net mode needs a trained PerceptionNet")
        net.eval()
        with torch.no_grad():
            probs = net(torch.from_numpy(source.data[None].copy()))[0].numpy()
        n_cls = probs.shape[0]
        names = tuple(c.split(":", 1)[-1] for c in source.channels[:n_cls])
        return SoftLayout(names, np.clip(probs, 0, 1), source.resolution), source
    raise ConfigurationError(f"unknown predictive mode {mode!r}")


def _check_pair(prior: VQPrior, sampler: LatentSampler):
    check_is_fitted(prior, "model_")
    check_is_fitted(sampler, "model_")
    if prior.preset != sampler.preset:
        raise ConfigurationError(f"prior preset {prior.preset!r} != sampler preset {sampler.preset!r}")
    expected = getattr(sampler, "prior_config_hash_", None)
    if expected is not None and expected != prior.config_hash_:
        raise ConfigurationError("sampler was trained against a different prior configuration")


def _inputs(noisy, x, prior: VQPrior, sampler: LatentSampler):
    preset = get_preset(prior.preset)
    y = check_layout_array(noisy, preset.n_channels, (preset.height, preset.width), name="noisy")
    guide = encode_tensor(prior.model_, torch.from_numpy(y)).view(len(y), -1)
    feats = None
    if sampler.model_.features is not None:
        a = sampler.model_.arch
        feats = torch.from_numpy(check_layout_array(
            x, a.feature_channels, (a.feature_height, a.feature_width), name="x", finite_only=True))
    return guide, feats


def refine(noisy, x, prior: VQPrior, sampler: LatentSampler, params: SamplingParams | None = None,
           binarized_confidence: bool = False, soft_variance: bool = False) -> SampleBundle:
    """Encode the noisy estimate, draw K token grids and decode them into a bundle."""
    _check_pair(prior, sampler)
    params = params or SamplingParams()
    guide, feats = _inputs(noisy, x, prior, sampler)
    if guide.shape[0] != 1:
        raise ShapeError("refine takes one scene")
    toks = sample_tokens(guide, feats, sampler.model_, params)[0]
    a = prior.model_.arch
    with torch.no_grad():
        probs = decode_tensor(prior.model_, toks.view(-1, a.latent_height, a.latent_width)).numpy()
    preset = get_preset(prior.preset)
    channels = noisy.channels if isinstance(noisy, SoftLayout) else preset.classes
    resolution = noisy.resolution if isinstance(noisy, SoftLayout) else preset.resolution
    meta = {
        "seed": params.seed, "p": params.p, "temperature": params.temperature, "n_samples": params.n_samples,
        "prior_state_hash": prior.state_hash(), "sampler_state_hash": sampler.state_hash(),
        "binarized_confidence": binarized_confidence, "soft_variance": soft_variance,
    }
    return aggregate(probs, channels, resolution, binarized_confidence, soft_variance, meta=meta)


def refine_one_step(noisy, x, prior: VQPrior, sampler: LatentSampler, mode: str = "argmax") -> SoftLayout:
    """Single-pass refinement; returns decoded probabilities (no uncertainty)."""
    _check_pair(prior, sampler)
    guide, feats = _inputs(noisy, x, prior, sampler)
    toks = one_step_tokens(guide, feats, sampler.model_, mode)
    a = prior.model_.arch
    with torch.no_grad():
        probs = decode_tensor(prior.model_, toks.view(-1, a.latent_height, a.latent_width))[0].numpy()
    preset = get_preset(prior.preset)
    channels = noisy.channels if isinstance(noisy, SoftLayout) else preset.classes
    resolution = noisy.resolution if isinstance(noisy, SoftLayout) else preset.resolution
    return SoftLayout(channels, np.clip(probs, 0.0, 1.0), resolution)


class MapPrior(BaseEstimator):
    """End-to-end layout refiner: VQ prior plus conditional latent sampler.

    ``fit(X, y)`` takes pseudo-sensor grids (N, F, H, W) whose first C
    channels are the noisy layout estimate, and ground-truth layouts
    (N, C, H, W). ``predict`` returns binary maps, ``predict_proba`` the
    sample-mean confidence and ``sample`` the full :class:`SampleBundle` list.
    """

    def __init__(self, preset="toy", prior_steps=1200, sampler_steps=800, prior_batch_size=8,
                 sampler_batch_size=16, n_samples=15, nucleus_p=0.9, temperature=1.0, output_loss=True,
                 condition_on_features=True, one_step=True, binarized_confidence=False,
                 soft_variance=False, seed=0, verbose=0):
        self.preset = preset
        self.prior_steps = prior_steps
        self.sampler_steps = sampler_steps
        self.prior_batch_size = prior_batch_size
        self.sampler_batch_size = sampler_batch_size
        self.n_samples = n_samples
        self.nucleus_p = nucleus_p
        self.temperature = temperature
        self.output_loss = output_loss
        self.condition_on_features = condition_on_features
        self.one_step = one_step
        self.binarized_confidence = binarized_confidence
        self.soft_variance = soft_variance
        self.seed = seed
        self.verbose = verbose

    def fit(self, X, y, noisy=None, prior: VQPrior | None = None):
        """Train both stages; pass a fitted ``prior`` to reuse it."""
        if prior is None:
            prior = VQPrior(self.preset, n_steps=self.prior_steps, batch_size=self.prior_batch_size,
                            seed=derive_seed(self.seed, "prior"), verbose=self.verbose).fit(y)
        self.prior_ = prior
        self.sampler_ = LatentSampler(
            prior=prior, preset=self.preset, n_steps=self.sampler_steps, batch_size=self.sampler_batch_size,
            output_loss=self.output_loss, condition_on_features=self.condition_on_features,
            one_step=self.one_step, seed=derive_seed(self.seed, "sampler"), verbose=self.verbose,
        ).fit(X, y, noisy)
        return self

    @classmethod
    def from_models(cls, prior: VQPrior, sampler: LatentSampler, **params) -> "MapPrior":
        _check_pair(prior, sampler)
        est = cls(preset=prior.preset, **params)
        est.prior_, est.sampler_ = prior, sampler
        return est

    def sampling_params(self, seed: int | None = None) -> SamplingParams:
        return SamplingParams(p=self.nucleus_p, temperature=self.temperature, n_samples=self.n_samples,
                              seed=self.seed if seed is None else seed)

    def _noisy(self, X, noisy):
        preset = get_preset(self.preset)
        X = check_layout_array(X, None, (preset.height, preset.width), name="X", finite_only=True)
        if noisy is None:
            noisy = np.clip(X[:, : preset.n_channels], 0.0, 1.0)
        return X, check_layout_array(noisy, preset.n_channels, (preset.height, preset.width), name="noisy")

    def sample(self, X, noisy=None) -> list:
        check_is_fitted(self, "sampler_")
        X, noisy = self._noisy(X, noisy)
        bundles = []
        for i in range(len(X)):
            params = self.sampling_params(derive_seed(self.seed, "refine", i))
            bundles.append(refine(noisy[i], X[i], self.prior_, self.sampler_, params,
                                  self.binarized_confidence, self.soft_variance))
        return bundles

    def predict_proba(self, X, noisy=None) -> np.ndarray:
        return np.stack([b.confidence.data for b in self.sample(X, noisy)])

    def predict(self, X, noisy=None) -> np.ndarray:
        return np.stack([b.final.data for b in self.sample(X, noisy)])

    def predict_one_step(self, X, noisy=None) -> np.ndarray:
        check_is_fitted(self, "sampler_")
        X, noisy = self._noisy(X, noisy)
        return np.stack([refine_one_step(noisy[i], X[i], self.prior_, self.sampler_).data
                         for i in range(len(X))])
