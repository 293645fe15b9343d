import numpy as np
from hypothesis import settings

settings.register_profile("repro", derandomize=True)
settings.load_profile("repro")


def relative_error(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps partials that vanish analytically from producing 0/0.
    """
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def central_difference(f, arrays, step=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of the arrays (edited in place)."""
    out = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = f()
            flat[i] = old - step
            down = f()
            flat[i] = old
            gflat[i] = (up - down) / (2 * step)
        out.append(g)
    return out


import pytest  # noqa: E402

from rtfvae.evaluation import noisy_training_pairs  # noqa: E402
from rtfvae.rtf import RoomConfig, augment, build_dataset, default_grid, derive_seed  # noqa: E402
from rtfvae.vae import TrainingConfig, fine_tune, train  # noqa: E402

PIPELINE_SEED = 0
PIPELINE_T60 = 0.1


@pytest.fixture(scope="session")
def pipeline():
    """Dataset, trained model and fine-tuned model on the default 120-point grid."""
    import time

    t0 = time.perf_counter()
    room = RoomConfig(t60=PIPELINE_T60)
    ds = build_dataset(default_grid(), room, seed=PIPELINE_SEED)
    ds.augmented = augment(ds.train, seed=derive_seed(PIPELINE_SEED, 1))
    t1 = time.perf_counter()
    cfg = TrainingConfig(seed=PIPELINE_SEED)
    params, report = train(ds, cfg)
    t2 = time.perf_counter()
    pairs = noisy_training_pairs(ds, seed=derive_seed(PIPELINE_SEED, 2))
    params_ft, _ = fine_tune(params, pairs, ds.mean_rtf, cfg=cfg)
    return {"dataset": ds, "params": params, "params_ft": params_ft, "report": report, "pairs": pairs,
            "room": room, "build_s": t1 - t0, "train_s": t2 - t1}


ACCEPTANCE = {}


def record(criterion, ok, detail):
    """Store and print one acceptance verdict; the summary hook repeats them at the end."""
    line = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
