import time
from collections import OrderedDict

import pytest

from organqa.config import pelvis_desk_config
from organqa.nets import build_network
from organqa.phantom import anatomy_series, generate_anatomy
from organqa.pipeline import train

# Desk recipe: 20 pelvis phantoms (16 train / 4 val) on 32^3 grids at 3 mm,
# U-Net channels (8, 16, 32), strides (2, 2), Adam lr 1e-3, batch 4, left/right
# flip augmentation, at most 200 epochs.
DESK_TRAIN = dict(batch_size=4, max_epochs=200, patience=50, seed=0, lr=1e-3, flip_augment=True)
DESK_PHANTOM_SEED = 7

ACCEPTANCE = OrderedDict()


def record(key: str, passed: bool, detail: str) -> None:
    """Store one acceptance line; printed in the terminal summary."""
    ACCEPTANCE[key] = (passed, detail)
    print(f"{key} {'PASS' if passed else 'FAIL'}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if passed else 'FAIL'}: {detail}")


@pytest.fixture(scope="session")
def desk_phantoms():
    return [generate_anatomy(s) for s in anatomy_series(20, DESK_PHANTOM_SEED)]


@pytest.fixture(scope="session")
def desk_dae(desk_phantoms, tmp_path_factory):
    """Train the desk DAE once per session. Returns (model, result, cfg, out_dir, seconds)."""
    cfg = pelvis_desk_config(**DESK_TRAIN)
    out = tmp_path_factory.mktemp("desk_dae")
    model = build_network(cfg.network, cfg.model_dims, seed=cfg.train.seed)
    start = time.process_time()
    result = train(model, desk_phantoms[:16], desk_phantoms[16:], cfg, out, "dae")
    return model, result, cfg, out, time.process_time() - start
