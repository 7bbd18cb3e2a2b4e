import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def toy_layouts():
    from mapprior.layout import generate_synthetic_layout

    return [generate_synthetic_layout(s) for s in range(8)]


@pytest.fixture(scope="session")
def toy_pair(toy_layouts):
    """Untrained toy prior with a sampler fitted for two steps; exercises plumbing only."""
    from mapprior.layout import CorruptionParams, corrupt
    from mapprior.prior.estimator import VQPrior
    from mapprior.sampler.estimator import LatentSampler

    gt = np.stack([g.data for g in toy_layouts[:4]]).astype(np.float32)
    prior = VQPrior(preset="toy", seed=0).init_model()
    prior.model_.eval()
    x = np.stack([corrupt(g, CorruptionParams(seed=i))[1].data for i, g in enumerate(toy_layouts[:4])])
    sampler = LatentSampler(prior=prior, n_steps=2, batch_size=2, seed=0).fit(x, gt)
    return prior, sampler, x, gt


# -- acceptance bookkeeping ---------------------------------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    num, title = mark.args
    entry = _CRITERIA.setdefault(num, {"title": title, "ok": True, "details": []})
    if rep.failed:
        entry["ok"] = False
        msg = str(call.excinfo.value).strip().splitlines() if call.excinfo else ["failed"]
        entry["details"].append(f"{item.name}: {msg[0] if msg else 'failed'}")
    if rep.when == "call":
        entry["details"] += [f"{v}" for k, v in item.user_properties if k == "measured"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        status = "PASS" if e["ok"] else "FAIL"
        detail = "; ".join(e["details"])
        terminalreporter.write_line(f"criterion {num} {status}: {e['title']}" + (f" | {detail}" if detail else ""))


# -- trained toy models shared by the acceptance suite ------------------------------------------------------

@pytest.fixture(scope="session")
def trained_toy():
    """Toy prior and sampler trained with the default run config.

    Set ``MAPPRIOR_ACCEPTANCE_CACHE`` to a directory to reuse checkpoints
    across sessions; the recorded training time is reused with them.
    """
    import json
    import os
    import time
    from pathlib import Path
    from types import SimpleNamespace

    from mapprior.experiment import RunConfig, generate_arrays, make_prior, make_sampler
    from mapprior.presets import config_hash
    from mapprior.prior.estimator import VQPrior
    from mapprior.sampler.estimator import LatentSampler
    from mapprior.seeding import seed_everything

    cfg = RunConfig()
    seed_everything(cfg.seed)
    t0 = time.perf_counter()
    gt, noisy, x = generate_arrays(cfg, "train", cfg.n_train)
    test = generate_arrays(cfg, "test", cfg.n_test)
    gen_seconds = time.perf_counter() - t0

    cache = os.environ.get("MAPPRIOR_ACCEPTANCE_CACHE")
    key = config_hash(cfg.to_dict())[:16]
    paths = None
    if cache:
        d = Path(cache) / key
        paths = (d / "prior.pt", d / "sampler.pt", d / "timing.json")
    if paths and all(p.exists() for p in paths):
        prior = VQPrior.load(paths[0])
        sampler = LatentSampler.load(paths[1], prior)
        timing = json.loads(paths[2].read_text())
        cached = True
    else:
        t1 = time.perf_counter()
        prior = make_prior(cfg).fit(gt)
        t2 = time.perf_counter()
        sampler = make_sampler(cfg, prior).fit(x, gt, noisy)
        t3 = time.perf_counter()
        timing = {"prior_seconds": t2 - t1, "sampler_seconds": t3 - t2, "gen_seconds": gen_seconds}
        cached = False
        if paths:
            paths[0].parent.mkdir(parents=True, exist_ok=True)
            prior.save(paths[0])
            sampler.save(paths[1])
            paths[2].write_text(json.dumps(timing))
    return SimpleNamespace(cfg=cfg, prior=prior, sampler=sampler, test=test, timing=timing, cached=cached)
