"""Run configuration, dataset I/O and the train/infer/eval steps behind the CLI."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import shutil
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from mapprior import bml
from mapprior.exceptions import ConfigurationError, DataError
from mapprior.layout import CorruptionParams, GeneratorSpec, LayoutGrid, PseudoSensor, SoftLayout, corrupt, \
    generate_synthetic_layout
from mapprior.metrics import EvalReport, evaluate
from mapprior.pipeline import SampleBundle, refine, refine_one_step
from mapprior.presets import config_hash, get_preset
from mapprior.prior.estimator import VQPrior
from mapprior.sampler.estimator import LatentSampler
from mapprior.sampler.sampling import SamplingParams
from mapprior.seeding import derive_seed

SPLITS = ("train", "test")


@dataclass(frozen=True)
class RunConfig:
    preset: str = "toy"
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "run"
    n_train: int = 1500
    n_test: int = 64
    # corruption strength of the simulated predictive stage
    corrupt_dropout_patch_rate: float = 0.15
    corrupt_patch_min: int = 6
    corrupt_patch_max: int = 14
    corrupt_boundary_jitter_px: float = 1.5
    corrupt_speckle_rate: float = 0.01
    corrupt_radial_attenuation: float = 0.6
    prior_steps: int = 1200
    prior_batch_size: int = 8
    prior_lr: float | None = None
    gan_sigma: float = 1e-4
    sampler_steps: int = 800
    sampler_batch_size: int = 16
    sampler_lr: float | None = None
    gumbel_tau: float = 1.0
    out_multiplier: float = 100.0
    guidance_dropout: float = 0.1
    output_loss: bool = True
    condition_on_features: bool = True
    one_step: bool = True
    n_samples: int = 15
    nucleus_p: float = 0.9
    temperature: float = 1.0
    binarized_confidence: bool = False
    soft_variance: bool = False
    infer_one_step: bool = True
    n_bins: int = 10
    perpetual_steps: int = 30
    perpetual_stride: int = 4
    threads: int = 1

    def __post_init__(self):
        get_preset(self.preset)
        for name in ("n_train", "n_test"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("prior_steps", "sampler_steps", "n_samples", "n_bins",
                     "prior_batch_size", "sampler_batch_size", "threads"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.perpetual_steps < 0:
            raise ConfigurationError("perpetual_steps must be >= 0")
        try:
            SamplingParams(self.nucleus_p, self.temperature, self.n_samples, self.seed)
            self.corruption(0)
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        clean = {}
        for k, v in d.items():
            default = known[k].default
            if isinstance(default, bool):
                if not isinstance(v, bool):
                    raise ConfigurationError(f"config key {k!r} must be a boolean")
            elif isinstance(default, int) and not isinstance(default, bool):
                if isinstance(v, bool) or not isinstance(v, int):
                    raise ConfigurationError(f"config key {k!r} must be an integer")
            elif isinstance(default, float) or k.endswith("_lr"):
                if v is not None and (isinstance(v, bool) or not isinstance(v, (int, float))):
                    raise ConfigurationError(f"config key {k!r} must be a number")
                v = None if v is None else float(v)
            elif isinstance(default, str) and not isinstance(v, str):
                raise ConfigurationError(f"config key {k!r} must be a string")
            clean[k] = v
        return cls(**clean)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigurationError(f"config file not found: {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(d, dict):
            raise ConfigurationError(f"{p}: config must be a JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def corruption(self, seed: int) -> CorruptionParams:
        return CorruptionParams(
            dropout_patch_rate=self.corrupt_dropout_patch_rate,
            patch_size_range=(self.corrupt_patch_min, self.corrupt_patch_max),
            boundary_jitter_px=self.corrupt_boundary_jitter_px,
            speckle_rate=self.corrupt_speckle_rate,
            radial_attenuation=self.corrupt_radial_attenuation,
            seed=seed,
        ).validate()

    def sampling(self) -> SamplingParams:
        return SamplingParams(self.nucleus_p, self.temperature, self.n_samples, self.seed)

    def data_hash(self) -> str:
        keys = ["preset", "seed", "n_train", "n_test"] + [f.name for f in fields(self) if f.name.startswith("corrupt_")]
        return config_hash({k: getattr(self, k) for k in keys})

    def tags(self) -> dict:
        return {"output_loss": "on" if self.output_loss else "off",
                "features": "on" if self.condition_on_features else "off"}


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=str) + "\n")
    return path


def write_manifest(directory, files, extra: dict | None = None, name: str = "manifest.json") -> Path:
    d = Path(directory)
    hashes = {str(Path(f).relative_to(d)): sha256_file(f) for f in sorted(files)}
    return write_json(d / name, {**(extra or {}), "files": hashes})


# -- data ---------------------------------------------------------------------------------------------------

def scene_seed(seed: int, split: str, i: int) -> int:
    return derive_seed(seed, "scene", split, i)


def make_triple(cfg: RunConfig, split: str, i: int, spec: GeneratorSpec | None = None):
    s = scene_seed(cfg.seed, split, i)
    gt = generate_synthetic_layout(s, spec)
    noisy, x = corrupt(gt, cfg.corruption(derive_seed(cfg.seed, "corrupt", split, i)))
    return gt, noisy, x


def generate_arrays(cfg: RunConfig, split: str, n: int):
    """In-memory (gt, noisy, x) float32 arrays for ``n`` scenes of ``split``."""
    spec = GeneratorSpec.from_preset(get_preset(cfg.preset))
    gts, ns, xs = [], [], []
    for i in range(n):
        gt, noisy, x = make_triple(cfg, split, i, spec)
        gts.append(gt.data)
        ns.append(noisy.data)
        xs.append(x.data)
    return np.stack(gts).astype(np.float32), np.stack(ns), np.stack(xs)


def gen_data(cfg: RunConfig) -> Path:
    """Write ``<data_dir>/<split>/<id>_{gt,noisy,x}.bml`` plus ``manifest.json``.

    Output is staged in a temporary directory and moved into place only
    when complete.
    """
    if cfg.n_train + cfg.n_test == 0:
        raise ConfigurationError("gen-data needs at least one scene (n_train + n_test == 0)")
    target = Path(cfg.data_dir)
    if target.exists() and any(target.iterdir()):
        raise DataError(f"data directory {target} already exists and is not empty")
    target.parent.mkdir(parents=True, exist_ok=True)
    spec = GeneratorSpec.from_preset(get_preset(cfg.preset))
    stage = Path(tempfile.mkdtemp(prefix=".gen-", dir=target.parent))
    try:
        files = []
        for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
            (stage / split).mkdir()
            for i in range(n):
                gt, noisy, x = make_triple(cfg, split, i, spec)
                for tag, grid in (("gt", gt), ("noisy", noisy), ("x", x)):
                    files.append(bml.write_bml(grid, stage / split / f"{i:05d}_{tag}.bml"))
        write_json(stage / "config.resolved.json", cfg.to_dict())
        files.append(stage / "config.resolved.json")
        write_manifest(stage, files, {
            "counts": {"train": cfg.n_train, "test": cfg.n_test},
            "data_hash": cfg.data_hash(),
            "generator_hash": spec.hash(),
        })
        if target.exists():
            target.rmdir()
        stage.replace(target)
    except BaseException:
        shutil.rmtree(stage, ignore_errors=True)
        raise
    return target


def read_manifest(data_dir) -> dict:
    p = Path(data_dir) / "manifest.json"
    if not p.exists():
        raise DataError(f"{data_dir}: no manifest.json (run gen-data first)")
    return json.loads(p.read_text())


def load_split(data_dir, split: str, limit: int | None = None):
    """Load (ids, gt, noisy, x) arrays of one split from a gen-data directory."""
    manifest = read_manifest(data_dir)
    n = manifest["counts"].get(split)
    if n is None:
        raise DataError(f"{data_dir}: manifest has no split {split!r}")
    n = n if limit is None else min(n, limit)
    d = Path(data_dir) / split
    ids, gts, ns, xs = [], [], [], []
    for i in range(n):
        ident = f"{i:05d}"
        try:
            gt = bml.read_bml(d / f"{ident}_gt.bml")
            noisy = bml.read_bml(d / f"{ident}_noisy.bml")
            x = bml.read_bml(d / f"{ident}_x.bml", as_sensor=True)
        except FileNotFoundError as exc:
            raise DataError(f"missing dataset file: {exc.filename}") from None
        if not isinstance(gt, LayoutGrid) or not isinstance(noisy, SoftLayout) or not isinstance(x, PseudoSensor):
            raise DataError(f"{d}/{ident}: unexpected grid types")
        ids.append(ident)
        gts.append(gt.data)
        ns.append(noisy.data)
        xs.append(x.data)
    if not ids:
        raise DataError(f"{data_dir}: split {split!r} is empty")
    return ids, np.stack(gts).astype(np.float32), np.stack(ns), np.stack(xs)


# -- training -----------------------------------------------------------------------------------------------

def write_loss_csv(path, history: list) -> Path:
    path = Path(path)
    keys = list(history[0]) if history else ["step"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return path


def make_prior(cfg: RunConfig) -> VQPrior:
    return VQPrior(cfg.preset, n_steps=cfg.prior_steps, batch_size=cfg.prior_batch_size,
                   learning_rate=cfg.prior_lr, sigma=cfg.gan_sigma, seed=derive_seed(cfg.seed, "prior"))


def make_sampler(cfg: RunConfig, prior: VQPrior) -> LatentSampler:
    return LatentSampler(prior=prior, preset=cfg.preset, n_steps=cfg.sampler_steps,
                         batch_size=cfg.sampler_batch_size, learning_rate=cfg.sampler_lr, tau=cfg.gumbel_tau,
                         out_multiplier=cfg.out_multiplier, output_loss=cfg.output_loss,
                         guidance_dropout=cfg.guidance_dropout, condition_on_features=cfg.condition_on_features,
                         one_step=cfg.one_step, seed=derive_seed(cfg.seed, "sampler"))


# -- inference and evaluation -------------------------------------------------------------------------------

def refine_seed(cfg: RunConfig, i: int) -> int:
    return derive_seed(cfg.seed, "refine", i)


def infer_scene(cfg: RunConfig, i: int, noisy: SoftLayout, x: PseudoSensor, prior, sampler) -> SampleBundle:
    params = dataclasses.replace(cfg.sampling(), seed=refine_seed(cfg, i))
    return refine(noisy, x, prior, sampler, params, cfg.binarized_confidence, cfg.soft_variance)


def evaluate_methods(cfg: RunConfig, gt, noisy, final, confidence, one_step=None) -> list[EvalReport]:
    """Rows for the noisy baseline, the refined output and (optionally) one-step."""
    classes = get_preset(cfg.preset).classes
    tags = cfg.tags()
    rows = [
        evaluate("noisy", noisy >= 0.5, gt, confidence=noisy, classes=classes, n_bins=cfg.n_bins, tags=tags),
        evaluate("mapprior", final, gt, confidence=confidence, classes=classes, n_bins=cfg.n_bins, tags=tags),
    ]
    if one_step is not None:
        rows.append(evaluate("mapprior-1step", one_step >= 0.5, gt, confidence=one_step, classes=classes,
                             n_bins=cfg.n_bins, tags=tags))
    return rows


def one_step_scene(noisy, x, prior, sampler) -> SoftLayout:
    return refine_one_step(noisy, x, prior, sampler)
