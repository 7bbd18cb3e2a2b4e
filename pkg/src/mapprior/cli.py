"""``mapprior`` command line.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from mapprior import bml, perpetual
from mapprior.exceptions import ConfigurationError, DataError, MapPriorError, NumericAbort
from mapprior.experiment import (
    RunConfig, evaluate_methods, gen_data, infer_scene, load_split, make_prior, make_sampler, one_step_scene,
    write_json, write_loss_csv, write_manifest,
)
from mapprior.layout import PseudoSensor, SoftLayout
from mapprior.metrics import EvalReport, reports_to_csv
from mapprior.pipeline import SampleBundle
from mapprior.presets import get_preset
from mapprior.prior.estimator import VQPrior
from mapprior.sampler.estimator import LatentSampler
from mapprior.seeding import seed_everything

log = logging.getLogger("mapprior")

COMMANDS = ("gen-data", "train-prior", "train-sampler", "infer", "eval", "perpetual", "report")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapprior", description="Generative refinement of BEV layouts.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("directory", nargs="?", help="run directory for `report` (defaults to out_dir)")
    parser.add_argument("--config", required=True, help="flat JSON config file")
    parser.add_argument("--seed", type=int, help="override the global seed")
    parser.add_argument("--preset", choices=("toy", "paper"), help="override the preset")
    parser.add_argument("--ablate-output-loss", action="store_true", help="train the sampler without the decoded-output loss")
    parser.add_argument("--no-feature-conditioning", action="store_true",
                        help="condition the sampler on guidance tokens only")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.preset is not None:
        over["preset"] = args.preset
    if args.ablate_output_loss:
        over["output_loss"] = False
    if args.no_feature_conditioning:
        over["condition_on_features"] = False
    return cfg.replace(**over) if over else cfg


def _out(cfg: RunConfig) -> Path:
    d = Path(cfg.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _prior_path(cfg):
    return Path(cfg.out_dir) / "prior.pt"


def _sampler_path(cfg):
    return Path(cfg.out_dir) / "sampler.pt"


def _load_prior(cfg: RunConfig) -> VQPrior:
    prior = VQPrior.load(_prior_path(cfg))
    if prior.preset != cfg.preset:
        raise ConfigurationError(f"prior checkpoint uses preset {prior.preset!r}, config says {cfg.preset!r}")
    return prior


def _load_models(cfg: RunConfig):
    prior = _load_prior(cfg)
    sampler = LatentSampler.load(_sampler_path(cfg), prior)
    flags = {"output_loss": sampler.output_loss, "condition_on_features": sampler.condition_on_features}
    want = {"output_loss": cfg.output_loss, "condition_on_features": cfg.condition_on_features}
    if flags != want:
        raise ConfigurationError(f"sampler checkpoint was trained with {flags}, config asks for {want}")
    return prior, sampler


def cmd_gen_data(cfg: RunConfig) -> list:
    target = gen_data(cfg)
    return [target / "manifest.json"]


def _train_with_checkpoint(est, fit, path: Path, csv_path: Path, cfg_hash: str):
    try:
        fit()
    except NumericAbort:
        if hasattr(est, "model_"):
            est.save(path.with_name(path.stem + ".last_good.pt"), {"aborted": True, "run_config_hash": cfg_hash})
        write_loss_csv(csv_path, getattr(est, "loss_history_", []))
        raise
    est.save(path, {"run_config_hash": cfg_hash})
    write_loss_csv(csv_path, est.loss_history_)


def cmd_train_prior(cfg: RunConfig) -> list:
    _, gt, _, _ = load_split(cfg.data_dir, "train", cfg.n_train)
    out = _out(cfg)
    prior = make_prior(cfg)
    path, csv_path = _prior_path(cfg), out / "prior_loss.csv"
    _train_with_checkpoint(prior, lambda: prior.fit(gt), path, csv_path, _cfg_hash(cfg))
    return [path, csv_path]


def cmd_train_sampler(cfg: RunConfig) -> list:
    if not _prior_path(cfg).exists():
        raise DataError(f"no prior checkpoint at {_prior_path(cfg)} (run train-prior first)")
    prior = _load_prior(cfg)
    _, gt, noisy, x = load_split(cfg.data_dir, "train", cfg.n_train)
    out = _out(cfg)
    sampler = make_sampler(cfg, prior)
    path, csv_path = _sampler_path(cfg), out / "sampler_loss.csv"
    _train_with_checkpoint(sampler, lambda: sampler.fit(x, gt, noisy), path, csv_path, _cfg_hash(cfg))
    return [path, csv_path]


def cmd_infer(cfg: RunConfig) -> list:
    prior, sampler = _load_models(cfg)
    ids, _, noisy, x = load_split(cfg.data_dir, "test", cfg.n_test)
    preset = get_preset(cfg.preset)
    pred = _out(cfg) / "predictions"
    files = []
    for i, ident in enumerate(ids):
        nz = SoftLayout(preset.classes, noisy[i], preset.resolution)
        xs = PseudoSensor(tuple(f"f{k}" for k in range(x.shape[1])), x[i], preset.resolution)
        bundle = infer_scene(cfg, i, nz, xs, prior, sampler)
        d = bundle.save(pred / ident)
        files += sorted(d.iterdir())
        if cfg.infer_one_step and cfg.one_step:
            files.append(bml.write_bml(one_step_scene(nz, xs, prior, sampler), d / "one_step.bml"))
    return files


def cmd_eval(cfg: RunConfig) -> list:
    ids, gt, noisy, _ = load_split(cfg.data_dir, "test", cfg.n_test)
    pred = Path(cfg.out_dir) / "predictions"
    finals, confs, ones = [], [], []
    for ident in ids:
        d = pred / ident
        try:
            bundle = SampleBundle.load(d)
        except FileNotFoundError as exc:
            raise DataError(f"missing prediction file: {exc.filename}") from None
        if bundle.final.shape != gt.shape[1:]:
            raise DataError(f"{d}/final.bml: shape {bundle.final.shape} != ground truth {gt.shape[1:]}")
        finals.append(bundle.final.data)
        confs.append(bundle.confidence.data)
        if (d / "one_step.bml").exists():
            ones.append(bml.read_bml(d / "one_step.bml").data)
    one = np.stack(ones) if len(ones) == len(ids) else None
    rows = evaluate_methods(cfg, gt, noisy, np.stack(finals), np.stack(confs), one)
    out = _out(cfg) / "eval"
    out.mkdir(exist_ok=True)
    files = []
    for r in rows:
        p = out / f"{r.method}.json"
        p.write_text(r.to_json() + "\n")
        files.append(p)
    files.append(out / "eval.csv")
    files[-1].write_text(reports_to_csv(rows))
    return files


def cmd_perpetual(cfg: RunConfig) -> list:
    prior, sampler = _load_models(cfg)
    canvas = perpetual.init_canvas(prior, sampler, cfg.seed, stride=cfg.perpetual_stride)
    canvas = perpetual.extend(canvas, cfg.perpetual_steps, prior, sampler)
    d = _out(cfg) / "perpetual"
    info = perpetual.export_strip(canvas, d)
    write_json(d / "summary.json", {**info, "seam_mean_abs": canvas.seam_discrepancy(),
                                    "steps": canvas.steps_done})
    return sorted(p for p in d.iterdir() if p.is_file())


def collect_reports(directory) -> list[EvalReport]:
    reports = []
    for p in sorted(Path(directory).rglob("eval/*.json")):
        try:
            reports.append(EvalReport.from_dict(json.loads(p.read_text())))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise DataError(f"{p}: not an eval report ({exc})") from None
    return reports


def cmd_report(cfg: RunConfig, directory=None) -> list:
    root = Path(directory or cfg.out_dir)
    reports = collect_reports(root)
    if not reports:
        raise DataError(f"no eval reports under {root}")
    (root / "report.csv").write_text(reports_to_csv(reports))
    with open(root / "reliability.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *sorted(reports[0].tags), "bin_lo", "bin_hi", "count", "accuracy", "confidence"])
        for r in reports:
            b = r.bins
            tag_vals = [r.tags[k] for k in sorted(r.tags)]
            for k in range(len(b["counts"])):
                w.writerow([r.method, *tag_vals, f"{b['edges'][k]:.2f}", f"{b['edges'][k + 1]:.2f}",
                            b["counts"][k], f"{b['accuracy'][k]:.6f}", f"{b['confidence'][k]:.6f}"])
    return [root / "report.csv", root / "reliability.csv"]


def _cfg_hash(cfg: RunConfig) -> str:
    from mapprior.presets import config_hash

    return config_hash(cfg.to_dict())


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    cfg = resolve_config(args)
    torch.set_num_threads(cfg.threads)
    seed_everything(cfg.seed)
    handlers = {
        "gen-data": cmd_gen_data, "train-prior": cmd_train_prior, "train-sampler": cmd_train_sampler,
        "infer": cmd_infer, "eval": cmd_eval, "perpetual": cmd_perpetual,
    }
    if args.command == "report":
        files = cmd_report(cfg, args.directory)
        out = Path(args.directory or cfg.out_dir)
    else:
        files = handlers[args.command](cfg)
        out = Path(cfg.data_dir) if args.command == "gen-data" else _out(cfg)
    if args.command != "gen-data":
        name = args.command.replace("-", "_")
        files.append(write_json(out / f"{name}.config.json", cfg.to_dict()))
        write_manifest(out, files, {"command": args.command, "config_hash": _cfg_hash(cfg)},
                       name=f"{name}.manifest.json")
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except MapPriorError as exc:
        print(f"mapprior: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, PermissionError) as exc:
        print(f"mapprior: error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
