"""One test per acceptance criterion; each prints a single PASS/FAIL line.

The desk-scale pretraining run is shared by criteria 9 through 12 and takes
several minutes on one core.
"""

import time
import warnings

import numpy as np
import pytest

from smir import autodiff as ad
from smir.autodiff import Tensor, grad_check
from smir.checkpoint import load_checkpoint
from smir.data import SynthSpec, foreground_patch_flags, generate_synthetic_arrays
from smir.masking import aggregate_loss, gen_samples, random_mask, select_top
from smir.metrics import MS_SSIM_WEIGHTS, TRAINING_PARAMS, ms_ssim, scale_weights, ssim_map, train_loss
from smir.patches import PatchGrid, PatchLossMap
from smir.pretrain import PretrainConfig, compute_selective_masks, full_grid, run_pretraining, validate_reconstruction
from smir.segmentation import (
    DEFAULT_SEEDS,
    DownstreamConfig,
    iou_report,
    jaccard_loss,
    report_from_predictions,
    train_downstream,
)
from smir.unet import UNet, UNetConfig, build_unet, transfer_weights

C1, C2 = 0.01**2, 0.03**2


def brute_ssim(x, y):
    out = np.zeros((x.shape[0] - 2, x.shape[1] - 2))
    for ch in range(x.shape[2]):
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                a, b = x[i:i + 3, j:j + 3, ch], y[i:i + 3, j:j + 3, ch]
                ma, mb = a.mean(), b.mean()
                va, vb = ((a - ma) ** 2).mean(), ((b - mb) ** 2).mean()
                cov = ((a - ma) * (b - mb)).mean()
                out[i, j] += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma**2 + mb**2 + C1) * (va + vb + C2))
    return out / x.shape[2]


def test_criterion_01_ssim(criterion):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    err = 0.0
    for _ in range(50):
        x, y = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        err = max(err, np.abs(ssim_map(x, y) - brute_ssim(x, y)).max())
    self_err = np.abs(ssim_map(x, x) - 1).max()
    const = ssim_map(np.full((8, 8, 3), 0.5), np.full((8, 8, 3), 0.25)).mean()
    closed = (2 * 0.125 + C1) / (0.3125 + C1)
    elapsed = time.perf_counter() - start
    ok = err <= 1e-6 and self_err <= 1e-9 and abs(const - closed) <= 1e-6 and abs(const - 0.80006) < 1e-4 \
        and elapsed < 5
    assert criterion(1, ok, f"ssim oracle err {err:.2e}, self {self_err:.1e}, constant {const:.6f}, {elapsed:.2f}s")


def test_criterion_02_ms_ssim(criterion):
    rng = np.random.default_rng(2)
    x = rng.random((32, 32, 3))
    y = np.clip(x + rng.normal(0, 0.2, x.shape), 0, 1)
    single = abs(ms_ssim(x, y, scales=1) - ssim_map(x, y, TRAINING_PARAMS).mean())
    five = abs(scale_weights(5).sum() - 1)
    reduced = max(abs(scale_weights(s).sum() - 1) for s in range(1, 5))
    ratios = max(np.abs(scale_weights(s) / scale_weights(s)[0] - np.array(MS_SSIM_WEIGHTS[:s]) / MS_SSIM_WEIGHTS[0]).max()
                 for s in range(1, 6))
    ok = single <= 1e-9 and five <= 1e-12 and reduced <= 1e-12 and ratios <= 1e-12
    assert criterion(2, ok, f"single-scale diff {single:.1e}, weight sums off by {max(five, reduced):.1e}")


def _primitive_checks(rng):
    x = rng.standard_normal((3, 4))
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    w = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, (3, 4))
    img = rng.standard_normal((1, 2, 5, 5))
    k = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    sq = lambda t: (t ** 2.0).sum()
    yield "relu", lambda t: (ad.relu(t) * Tensor(w)).sum(), x
    yield "sigmoid", lambda t: (ad.sigmoid(t) * Tensor(w)).sum(), x
    yield "abs", lambda t: (ad.tabs(t) * Tensor(w)).sum(), x
    yield "exp", lambda t: (ad.exp(t) * Tensor(w)).sum(), x
    yield "log", lambda t: ad.log(t).sum(), pos
    yield "pow", lambda t: (t ** 3.0 * Tensor(w)).sum(), x
    yield "add", lambda t: sq(t + Tensor(w)), x
    yield "sub", lambda t: sq(Tensor(w) - t), x
    yield "mul", lambda t: sq(t * Tensor(w)), x
    yield "div", lambda t: sq(Tensor(w) / t), pos
    yield "scalar", lambda t: sq((t * 2.5 + 1.0) / 3.0), x
    yield "mean", lambda t: sq(ad.mean(t, axis=1)), x
    yield "sum", lambda t: sq(ad.tsum(t, axis=0)), x
    yield "softmax", lambda t: (ad.softmax(t.reshape(1, 3, 2, 2)) * Tensor(w.reshape(1, 3, 2, 2))).sum(), x
    yield "conv2d input", lambda t: sq(ad.conv2d(t, Tensor(k), Tensor(b), padding=1)), img
    yield "conv2d kernel", lambda t: sq(ad.conv2d(Tensor(img), t, Tensor(b), padding=1)), k
    yield "conv2d bias", lambda t: sq(ad.conv2d(Tensor(img), Tensor(k), t, padding=1)), b
    yield "conv2d stride", lambda t: sq(ad.conv2d(t, Tensor(k), stride=2)), img
    yield "maxpool2", lambda t: sq(ad.maxpool2(t)), rng.standard_normal((1, 1, 4, 4))
    yield "avgpool2", lambda t: sq(ad.avgpool2(t)), rng.standard_normal((1, 2, 4, 4))
    yield "upsample2", lambda t: (ad.upsample_nearest2(t) ** 3.0).sum(), rng.standard_normal((1, 2, 3, 3))
    other = Tensor(rng.standard_normal((1, 1, 3, 3)))
    yield "concat", lambda t: (ad.concat_channels(t, other) ** 3.0).sum(), rng.standard_normal((1, 2, 3, 3))
    nw = Tensor(rng.standard_normal((1, 2, 4, 4)))
    yield "instance_norm", lambda t: (ad.instance_norm(t) * nw).sum(), rng.standard_normal((1, 2, 4, 4))
    yield "sigmoid(x*x)", lambda t: ad.sigmoid(t * t).sum(), x


def test_criterion_03_gradients(criterion):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    worst_prim, worst_name = 0.0, ""
    for name, f, x in _primitive_checks(rng):
        e = grad_check(f, x)
        if e > worst_prim:
            worst_prim, worst_name = e, name

    cfg = UNetConfig(depth=2, base_channels=4, seed=3)
    model = build_unet(cfg, dtype=np.float64)
    x = rng.random((1, 3, 32, 32))
    target = rng.random((1, 3, 32, 32))

    def through(name):
        def f(w):
            params = dict(model.params)
            params[name] = w
            return train_loss(UNet(cfg, params)(x), target)
        return f

    worst_loss = 0.0
    # conv biases feeding instance norm have an identically zero gradient, so they are probed without norm
    for name in ("enc0.conv1.weight", "bottleneck.conv1.weight", "dec0.conv2.weight", "head.weight", "head.bias"):
        worst_loss = max(worst_loss, grad_check(through(name), model.params[name].data, sample=25))
    worst_loss = max(worst_loss, grad_check(lambda t: train_loss(model(t), target), x, sample=40))
    plain_cfg = UNetConfig(depth=2, base_channels=4, norm_kind="none", seed=3)
    plain = build_unet(plain_cfg, dtype=np.float64)

    def bias_loss(w):
        params = dict(plain.params)
        params["enc1.conv2.bias"] = w
        return train_loss(UNet(plain_cfg, params)(x), target)

    worst_loss = max(worst_loss, grad_check(bias_loss, plain.params["enc1.conv2.bias"].data))
    elapsed = time.perf_counter() - start
    ok = worst_prim <= 1e-4 and worst_loss <= 1e-3 and elapsed < 120
    assert criterion(3, ok, f"primitive max rel err {worst_prim:.1e} ({worst_name}), "
                            f"U-Net loss {worst_loss:.1e}, {elapsed:.1f}s")


def test_criterion_04_random_masks(criterion):
    # max deviation over 512 patches exceeds 0.02 for ~3% of seeds even with an unbiased sampler
    grid = PatchGrid(16, 32, 3, 3)
    rng = np.random.default_rng(0)
    counts = np.zeros(512)
    exact = True
    for _ in range(10_000):
        m = random_mask(grid, 0.5, rng)
        exact &= m.count == 256
        counts += m.masked
    dev = np.abs(counts / 10_000 - 0.5).max()
    assert criterion(4, exact and dev <= 0.02, f"all masks exactly 256: {exact}, max frequency deviation {dev:.4f}")


def test_criterion_05_coverage(criterion):
    grid = PatchGrid(8, 8, 3, 3)
    img = np.random.default_rng(0).random((24, 24, 3))
    worst = np.inf
    for trial in range(1000):
        samples = gen_samples(img, grid, np.random.default_rng(trial), k=5)
        worst = min(worst, np.sum([s.mask.masked for s in samples], axis=0).min())
    assert criterion(5, worst >= 2, f"minimum times any patch was masked: {worst}")


def test_criterion_06_selection(criterion):
    rng = np.random.default_rng(6)
    grid = PatchGrid(16, 32, 3, 3)
    mismatches = ties = 0
    agg_exact = True
    for trial in range(1000):
        vals = rng.integers(0, 8, 512).astype(float) if trial % 2 else rng.random(512)
        ties += len(np.unique(vals)) < 512
        order = sorted(range(512), key=lambda i: (-vals[i], i))[:256]
        got = select_top(PatchLossMap(grid, vals), 0.5).indices()
        mismatches += list(got) != sorted(order)
        maps = [PatchLossMap(grid, rng.random(512)) for _ in range(5)]
        direct = maps[0].values + maps[1].values + maps[2].values + maps[3].values + maps[4].values
        agg_exact &= np.array_equal(aggregate_loss(maps).values, direct)
    ok = mismatches == 0 and agg_exact
    assert criterion(6, ok, f"{mismatches} mismatches in 1000 maps ({ties} with ties), aggregation exact: {agg_exact}")


def test_criterion_07_transfer(criterion):
    src = build_unet(UNetConfig(seed=7))
    dst = transfer_weights(src, src.config.for_segmentation(21, seed=70))
    rng = np.random.default_rng(7)
    same = 0
    with ad.no_grad():
        for _ in range(20):
            x = rng.random((1, 3, 32, 32)).astype(np.float32)
            same += np.array_equal(src.features(x).data, dst.features(x).data)
    assert criterion(7, same == 20, f"{same}/20 inputs with bitwise-identical pre-head activations")


def _set_iou(pred, label, c):
    out = []
    for k in range(c):
        p = set(np.flatnonzero(pred.ravel() == k))
        t = set(np.flatnonzero(label.ravel() == k))
        out.append(len(p & t) / len(p | t) if p | t else np.nan)
    return np.array(out)


def test_criterion_08_iou(criterion):
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(100):
        c = int(rng.integers(2, 6))
        pred, label = rng.integers(0, c, (12, 12)), rng.integers(0, c, (12, 12))
        rep = report_from_predictions([pred], [label], c)
        oracle = _set_iou(pred, label, c)
        if not np.array_equal(np.isnan(rep.iou), np.isnan(oracle)):
            worst = np.inf
        worst = max(worst, np.nanmax(np.abs(rep.iou - oracle)), abs(rep.miou - np.nanmean(oracle)))
    perfect = report_from_predictions([label], [label], c).miou
    labels = rng.integers(0, 3, (2, 6, 6))
    scores = np.where(np.arange(3)[None, :, None, None] == labels[:, None], 40.0, -40.0)
    jac = jaccard_loss(Tensor(scores), labels).item()
    ok = worst <= 1e-12 and perfect == 1.0 and jac <= 1e-6
    assert criterion(8, ok, f"oracle max diff {worst:.1e}, perfect mIoU {perfect}, saturated Jaccard loss {jac:.1e}")


# -- desk-scale run ---------------------------------------------------------------------

DESK = PretrainConfig()  # 10 partitions, 30 epochs, depth-3 base-16 U-Net, 64 patches on 64x64 crops


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    images, _ = generate_synthetic_arrays(SynthSpec(count=160, size=64, num_classes=4, seed=0))
    ids = [f"synth_{i:05d}" for i in range(len(images))]
    root = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    full = run_pretraining(DESK, ids, list(images), root / "full")
    elapsed = time.perf_counter() - start
    return {"ids": ids, "images": list(images), "root": root, "result": full, "seconds": elapsed}


@pytest.mark.slow
def test_criterion_09_desk_run(desk_run, criterion):
    res = desk_run["result"]
    descended = [r.loss_history[-1] < r.loss_history[0] for r in res.reports]
    cut = desk_run["root"] / "cut"
    first = run_pretraining(DESK, desk_run["ids"], desk_run["images"], cut, stop_after=4)
    resumed = run_pretraining(DESK, desk_run["ids"], desk_run["images"], cut)
    final = desk_run["root"] / "full" / "partition_09.smir"
    bitwise = (cut / "partition_09.smir").read_bytes() == final.read_bytes()
    minutes = desk_run["seconds"] / 60
    ok = (res.completed and all(descended) and not first.completed and resumed.resumed_from == 4
          and bitwise and minutes < 30)
    assert criterion(9, ok, f"{minutes:.1f} min, {sum(descended)}/10 partitions descended, "
                            f"resume after partition 4 bitwise identical: {bitwise}")


@pytest.mark.slow
def test_criterion_10_mask_concentration(desk_run, criterion):
    model = load_checkpoint(desk_run["root"] / "full" / "partition_00.smir").model()
    images, labels = generate_synthetic_arrays(SynthSpec(count=100, size=64, num_classes=4, seed=10))
    ids = [f"probe_{i}" for i in range(100)]
    masks = compute_selective_masks(model.reconstruct, ids, list(images), DESK, 1)
    grid = full_grid(DESK, (64, 64))
    flags = [foreground_patch_flags(lbl, grid) for lbl in labels]
    masked_fg = float(np.mean([f[m.masked].mean() for f, m in zip(flags, masks)]))
    data_fg = float(np.mean(flags))
    ok = masked_fg >= data_fg + 0.05
    assert criterion(10, ok, f"foreground fraction of selected patches {masked_fg:.3f} vs dataset {data_fg:.3f}")


@pytest.mark.slow
def test_criterion_11_validation_loss_direction(desk_run, criterion):
    model = desk_run["result"].final.model()
    held, _ = generate_synthetic_arrays(SynthSpec(count=20, size=64, num_classes=4, seed=99))
    sel = validate_reconstruction(model, list(held), "selective", DESK)
    rnd = validate_reconstruction(model, list(held), "random", DESK)
    assert criterion(11, sel >= rnd, f"final checkpoint, held-out loss under selective masks {sel:.4f} "
                                     f"vs random masks {rnd:.4f}")


@pytest.mark.slow
def test_criterion_12_downstream_soft(desk_run, criterion):
    train_x, train_y = generate_synthetic_arrays(SynthSpec(count=32, size=64, num_classes=4, seed=7))
    val_x, val_y = generate_synthetic_arrays(SynthSpec(count=32, size=64, num_classes=4, seed=8))
    source = desk_run["result"].final.model()
    cfg = DownstreamConfig(epochs=30, batch_size=8)
    scores = {"scratch": [], "selective": []}
    for seed in DEFAULT_SEEDS:
        inits = {
            "scratch": build_unet(DESK.model.for_segmentation(4, seed=seed)),
            "selective": transfer_weights(source, source.config.for_segmentation(4, seed=seed)),
        }
        for name, init in inits.items():
            best, _ = train_downstream(init, list(train_x), list(train_y), list(val_x), list(val_y), cfg, seed=seed)
            scores[name].append(iou_report(best.model(), list(val_x), list(val_y)).miou)
    sel, scr = float(np.mean(scores["selective"])), float(np.mean(scores["scratch"]))
    ok = sel >= scr
    criterion(12, ok, f"mean mIoU over seeds {list(DEFAULT_SEEDS)}: selective-pretrained {sel:.4f} "
                      f"vs scratch {scr:.4f} (non-gating)", gating=False)
    if not ok:
        warnings.warn(f"downstream soft target missed: selective {sel:.4f} < scratch {scr:.4f}", stacklevel=1)
