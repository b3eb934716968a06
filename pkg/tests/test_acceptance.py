"""Acceptance criteria, one test each.

The summary at the end of the pytest run prints one pass/FAIL line per
criterion.  The overfit run is marked slow; beat-the-baseline
only runs with CSRNET_NIGHTLY=1.
"""

import csv
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from csrnet import degrade as dg
from csrnet.cli import ABLATION_VARIANTS, main
from csrnet.io import read_image, write_png
from csrnet.metrics import QualityReport, psnr, ssim
from csrnet.network import (
    VARIANTS,
    BlockState,
    NetConfig,
    build_network,
    count_params,
    csrb_forward,
    forward,
    make_variant,
    manifest_text,
    shallow_forward,
)
from csrnet.tensor import Tensor, grad_check, gradcheck_ops
from csrnet.train import TrainConfig, TrainLog, load_checkpoint, network_grad_check, train

GOLDEN = Path(__file__).parent / "golden" / "manifest_D8R6_dense.txt"

# overfit fixture: frozen once calibrated, see OVERFIT_CONFIG
OVERFIT_THRESHOLD = 0.5
OVERFIT_ITERATIONS = 2000
OVERFIT_CONFIG = dict(lr=2e-2, batch_size=4, lr_interval=400, clip_norm=1.0)


def run(*argv):
    return main([str(a) for a in argv])


def overfit_pairs():
    p = dg.synthetic_plane(64, 64, seed=0)
    return dg.extract_patches(dg.degrade_sr(p, 2), p, 32, 4, seed=1)


@pytest.mark.criterion("gradient suite")
def test_gradient_suite():
    start = time.perf_counter()
    errors = {op: grad_check(op) for op in gradcheck_ops()}
    for op, err in errors.items():
        assert err < 1e-4, (op, err)
    assert network_grad_check(seed=0) < 1e-3
    assert time.perf_counter() - start < 120


@pytest.mark.criterion("architecture conformance")
def test_architecture_conformance():
    assert manifest_text(NetConfig()) == GOLDEN.read_text()
    x = Tensor(np.random.default_rng(0).uniform(size=(1, 1, 24, 32)))
    for name in VARIANTS:
        net = build_network(make_variant(name))
        f1, f2 = shallow_forward(net, x)
        state = BlockState()
        for d in range(1, net.config.blocks + 1):
            out = csrb_forward(net, d, f2, state)
            for s, t in out.items():
                assert t.shape[2:] == (24 // 2 ** (s // 2), 32 // 2 ** (s // 2)), (name, d, s)
            state.append(out)
        assert forward(net, x).shape == (1, 1, 24, 32), name


def _loop_psnr(a, b):
    total = 0.0
    for x, y in zip(a.ravel(), b.ravel()):
        total += (float(x) - float(y)) ** 2
    return 10 * math.log10(255.0**2 / (total / a.size))


@pytest.mark.criterion("metric oracles")
def test_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    for _ in range(5):
        a, b = rng.uniform(0, 255, size=(2, 24, 31))
        assert abs(psnr(a, b) - _loop_psnr(a, b)) < 1e-9
    p = dg.synthetic_plane(32, 32, seed=1)
    assert abs(ssim(p, p) - 1) < 1e-9
    c1 = (0.01 * 255) ** 2
    assert abs(ssim(np.zeros((16, 16)), np.full((16, 16), 255.0)) - c1 / (255.0**2 + c1)) < 1e-9
    assert time.perf_counter() - start < 10


@pytest.mark.criterion("degradation oracles")
def test_degradation_oracles():
    for n in (17, 32, 48):
        for scale in (0.5, 0.25, 2, 4):
            w = dg.resize_weights(n, int(round(n * scale)), scale)
            assert np.abs(w.sum(axis=1) - 1).max() < 1e-12
    flat = np.full((32, 32), 128.0)
    for up in (2, 4, 8):
        assert np.abs(dg.degrade_sr(flat, up) - 128).max() < 1e-12
    assert np.abs(dg.jpeg_degrade(flat, 10) - 128).max() < 1e-12
    p = np.full((1000, 1000), 128.0)
    for sigma in (15, 30, 50):
        diff = dg.add_gaussian_noise(p, sigma, seed=sigma) - p
        # clamping to [0, 255] is at least 2.5 sigma away for these levels
        assert abs(diff.std() - sigma) < 0.1 * sigma
    for seed in range(10):
        img = dg.synthetic_plane(48, 48, seed=seed)
        assert psnr(dg.jpeg_degrade(img, 20), img) > psnr(dg.jpeg_degrade(img, 10), img), seed


@pytest.mark.slow
@pytest.mark.criterion("overfit smoke test")
def test_overfit_four_patches():
    pairs = overfit_pairs()
    cfg = TrainConfig(max_iterations=OVERFIT_ITERATIONS, eval_interval=100, **OVERFIT_CONFIG)
    start = time.perf_counter()
    _, log = train(build_network(NetConfig(blocks=2, resblocks=2), seed=0), pairs, cfg)
    elapsed = time.perf_counter() - start
    final = log.records[-1]
    print(f"overfit: loss {final.train_loss:.4f} after {final.iteration} iterations in {elapsed:.0f}s")
    assert final.iteration <= OVERFIT_ITERATIONS
    assert min(r.train_loss for r in log.records) < OVERFIT_THRESHOLD
    assert elapsed < 600


def _corpus(root: Path, count: int, size: int, offset: int) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    given = os.environ.get("CSRNET_CORPUS")
    if given:
        files = sorted(Path(given).glob("*.png"))[offset : offset + count]
        if len(files) < count:
            pytest.fail(f"CSRNET_CORPUS needs at least {offset + count} PNG files, found {len(files)}")
        for f in files:
            write_png(root / f.name, dg.luminance(read_image(f)))
    else:
        for i in range(count):
            write_png(root / f"img{i:03d}.png", dg.synthetic_plane(size, size, seed=offset + i))
    return root


@pytest.mark.nightly
@pytest.mark.criterion("beat the baseline")
def test_beat_bicubic_baseline(tmp_path):
    train_src = _corpus(tmp_path / "train_src", 100, 96, 0)
    test_src = _corpus(tmp_path / "test_src", 10, 96, 100)
    common = ["--task", "sr", "--param", 2, "--seed", 0]
    assert run("degrade", "--source", train_src, "--out", tmp_path / "train", "--patch-size", 40, "--count", 4000, *common) == 0
    assert run("degrade", "--source", test_src, "--out", tmp_path / "test", "--patch-size", 96, "--count", 10, *common) == 0
    args = ["--data", tmp_path / "train", "--out", tmp_path / "run", "--blocks", 4, "--resblocks", 3, "--variant", "Dense"]
    assert run("train", *args, "--iterations", 50_000, "--lr", 1e-2, "--lr-interval", 10_000, "--batch-size", 10, "--clip-norm", 1.0, "--eval-interval", 1000) == 0
    ck = tmp_path / "run" / "checkpoint.csrn"
    assert run("eval", "--data", tmp_path / "test", "--checkpoint", ck, "--out", tmp_path / "model") == 0
    assert run("eval", "--data", tmp_path / "test", "--baseline", "--out", tmp_path / "bicubic") == 0
    model = QualityReport.from_csv((tmp_path / "model" / "report.csv").read_text())
    base = QualityReport.from_csv((tmp_path / "bicubic" / "report.csv").read_text())
    print(f"model {model.avg_psnr:.3f} dB, bicubic {base.avg_psnr:.3f} dB")
    assert model.avg_psnr - base.avg_psnr >= 0.3


@pytest.fixture
def sources(tmp_path):
    d = tmp_path / "src"
    for i in range(2):
        write_png(d / f"img{i}.png", dg.synthetic_plane(40, 40, seed=i))
    return d


FAST = ["--batch-size", "2", "--lr", "1e-3", "--eval-interval", "2", "--iterations", "4"]


@pytest.mark.criterion("ablation harness")
def test_ablation_harness(tmp_path, sources):
    ds = tmp_path / "ds"
    assert run("degrade", "--source", sources, "--out", ds, "--task", "sr", "--param", 2, "--count", 6, "--patch-size", 16) == 0
    out = tmp_path / "abl"
    assert run("ablate", "--data", ds, "--out", out, "--blocks", 3, "--resblocks", 1, *FAST) == 0
    logs = [TrainLog.from_csv((out / v / "train_log.csv").read_text()) for v in ABLATION_VARIANTS]
    assert {tuple(r.iteration for r in lg.records) for lg in logs} == {(2, 4)}
    rows = list(csv.reader((out / "summary.csv").read_text().splitlines()))
    assert rows[0] == ["metric"] + [f"CSRnet-{v}" for v in ABLATION_VARIANTS]
    assert [r[0] for r in rows[1:]] == ["params", "ds PSNR", "ds SSIM"]
    counts = [int(c) for c in rows[1][1:]]
    assert all(a < b for a, b in zip(counts, counts[1:]))
    for v, n in zip(ABLATION_VARIANTS, counts):
        assert count_params(load_checkpoint(out / v / "checkpoint.csrn").config) == n


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def _primary(path: Path) -> list:
    return TrainLog.from_csv(path.read_text()).primary()


@pytest.mark.criterion("determinism")
def test_every_command_deterministic(tmp_path, sources, capsys):
    outs = []
    r = tmp_path / "run"
    for _ in range(2):
        ds = r / "ds"
        assert run("degrade", "--source", sources, "--out", ds, "--task", "denoise", "--param", 15, "--count", 6, "--patch-size", 16, "--seed", 3) == 0
        net = ["--blocks", 1, "--resblocks", 1]
        assert run("train", "--data", ds, "--out", r / "train", *net, *FAST, "--seed", 3) == 0
        ck = r / "train" / "checkpoint.csrn"
        assert run("eval", "--data", ds, "--checkpoint", ck, "--out", r / "eval") == 0
        assert run("restore", "--input", sources / "img0.png", "--checkpoint", ck, "--out", r / "restored.png") == 0
        assert run("ablate", "--data", ds, "--out", r / "abl", "--blocks", 3, "--resblocks", 1, *FAST) == 0
        capsys.readouterr()
        assert run("gradcheck", "--seed", 3) == 0
        outs.append(
            {
                "degrade": _tree(ds),
                "train": (ck.read_bytes(), _primary(r / "train" / "train_log.csv")),
                "eval": (r / "eval" / "report.csv").read_bytes(),
                "restore": (r / "restored.png").read_bytes(),
                "ablate": [(_primary(r / "abl" / v / "train_log.csv"), (r / "abl" / v / "checkpoint.csrn").read_bytes()) for v in ABLATION_VARIANTS]
                + [(r / "abl" / "summary.csv").read_bytes()],
                "gradcheck": capsys.readouterr().out,
            }
        )
    for name in outs[0]:
        assert outs[0][name] == outs[1][name], name
