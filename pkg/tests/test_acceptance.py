"""Release acceptance gate: ten checks, one test each, in a fixed order.

Each test prints a single "[criterion N] PASS/FAIL" summary line (run with
`pytest tests/test_acceptance.py -s` to see them) and then asserts on the
same condition, so a red line always has a matching red test. The heavier
checks train real models on synthetic corpora; everything is seeded,
single-threaded float32 and sized for a laptop CPU.
"""

import contextlib
import io
import math
import time
from pathlib import Path

import numpy as np
import pytest

from sweeps import conditioned_decoder, fused_cases, primitive_cases
from xraymim import autodiff as ad
from xraymim.autodiff import Param, Var, no_grad
from xraymim.checkpoint import load_checkpoint, save_checkpoint
from xraymim.cli import main as cli_main
from xraymim.datasets import (
    image_stack,
    label_matrix,
    loc_arrays,
    mask_stack,
    normalize_batch,
    rows_for_split,
    single_ids,
    train_mean_std,
)
from xraymim.errors import BadMagicError, ConfigError, TruncatedFileError
from xraymim.finetune import evaluate_cls, finetune_cls, finetune_seg
from xraymim.gradcheck import grad_check
from xraymim.heads import build_pyramid, cls_forward, cls_loss, llrd_groups, make_cls_head, upernet_forward
from xraymim.interpret import grad_cam
from xraymim.manifest import load_cls_manifest, load_loc_manifest, load_seg_manifest, subsample_train
from xraymim.metrics import accuracy, cam_localize, confusion_from_binary, dice, jaccard, roc_auc
from xraymim.imaging import flip_coin, hflip
from xraymim.optim import cosine_lr
from xraymim.pretrain import make_projection, masks_to_bool, mim_loss, pretrain_run, sample_mask
from xraymim.rng import stream_root
from xraymim.synth import generate_corpus, render_sample
from xraymim.vit import ViT, ViTConfig, preset_config, vit_from_parts, vit_meta, vit_to_tensors


def _verdict(num: int, ok: bool, detail: str) -> None:
    word = "PASS" if ok else "FAIL"
    print(f"\n[criterion {num:2d}] {word} - {detail}")
    assert ok, f"criterion {num}: {detail}"


def _flip_aug(gen, img):
    return hflip(img[0])[None] if flip_coin(gen) else img


def _quiet_cli(argv: list[str]) -> int:
    with contextlib.redirect_stdout(io.StringIO()):
        return cli_main(argv)


def _load_backbone(path) -> ViT:
    tensors, meta = load_checkpoint(path)
    return vit_from_parts(tensors, meta["vit"])


def _load_cls(path):
    tensors, meta = load_checkpoint(path)
    backbone = vit_from_parts(tensors, meta["vit"])
    head = {
        "head.w": Param(tensors["head.w"].copy(), "head.w"),
        "head.b": Param(tensors["head.b"].copy(), "head.b"),
    }
    return backbone, head


def _cls_split(rows, split: str, side: int, stats):
    picked = rows_for_split(rows, split)
    x = normalize_batch(image_stack([r.path for r in picked], side), *stats)
    y = single_ids(label_matrix(picked, "zero"))
    return x, y


# -- criterion 1: gradient correctness -----------------------------------------


def _mim_pipeline_err(seed: int) -> float:
    """Mask substitution -> student encoder -> projection -> cosine loss."""
    rng = np.random.default_rng(1000 + seed)
    cfg = ViTConfig(dim=16, depth=1, heads=2, grid=2)
    model = ViT.build(cfg, seed)
    n = cfg.grid * cfg.grid
    side = cfg.grid * cfg.patch
    images = rng.normal(0.0, 1.0, size=(1, 1, side, side)).astype(np.float32)
    mask = masks_to_bool([sample_mask(n, 0.5, rng)], n)
    targets = rng.normal(0.0, 1.0, size=(1, n, 12)).astype(np.float32)
    proj_w = (0.2 * rng.normal(size=(cfg.dim, 12))).astype(np.float32)
    proj_b = (0.1 * rng.normal(size=(12,))).astype(np.float32)
    # check at a healthy-scale mask token: the 0.02-norm init leaves masked
    # rows nearly zero, and layer norm's curvature there breaks central diffs
    mask_tok = (0.5 * rng.normal(size=(cfg.dim,))).astype(np.float32)

    def fn(vs):
        model.params["mask_token"] = vs[1]
        model.params["blocks.0.attn.q.w"] = vs[2]
        feats = model.forward_features(vs[0], mask=mask)
        return mim_loss(model.image_tokens(feats), targets, mask, vs[3], vs[4])

    point = [
        images,
        mask_tok,
        model.params["blocks.0.attn.q.w"].value,
        proj_w,
        proj_b,
    ]
    return grad_check(fn, point, eps=1e-3, max_coords=8, seed=seed)


def _cls_pipeline_err(seed: int) -> float:
    """Backbone -> pooled linear head -> classification loss."""
    rng = np.random.default_rng(2000 + seed)
    cfg = ViTConfig(dim=16, depth=1, heads=2, grid=2)
    backbone = ViT.build(cfg, seed)
    head = make_cls_head(cfg.dim, 3, seed)
    side = cfg.grid * cfg.patch
    images = rng.normal(0.0, 1.0, size=(2, 1, side, side)).astype(np.float32)
    labels = np.zeros((2, 3), np.float32)
    labels[np.arange(2), rng.integers(0, 3, size=2)] = 1.0
    labels[0, rng.integers(0, 3)] = 1.0  # sometimes multi-hot
    names = ["patch_embed.w", "blocks.0.attn.v.w", "final_norm.g"]
    point = [backbone.params[n].value for n in names]
    point += [head["head.w"].value, head["head.b"].value]

    def fn(vs):
        for name, v in zip(names, vs):
            backbone.params[name] = v
        head["head.w"] = vs[3]
        head["head.b"] = vs[4]
        logits = cls_forward(backbone, head, images)
        return cls_loss(logits, labels, "multi")

    return grad_check(fn, point, eps=1e-3, max_coords=8, seed=seed)


def _seg_pipeline_err(seed: int) -> float:
    """Feature pyramid -> fusion decoder -> per-pixel cross-entropy."""
    rng = np.random.default_rng(3000 + seed)
    dec, grid = conditioned_decoder(8, 8, 2, 8, seed)
    hw = 16
    ids = rng.integers(0, 2, size=(hw * hw,))
    onehot = np.zeros((hw * hw, 2), np.float32)
    onehot[np.arange(hw * hw), ids] = 1.0
    names = ["seg.ppm.fuse.w", "seg.fpn.lat8.w", "seg.cls.w"]
    point = [grid] + [dec[n].value for n in names]

    def fn(vs):
        for name, v in zip(names, vs[1:]):
            dec[name] = v
        pyramid = build_pyramid(vs[0], dec)
        logits = upernet_forward(pyramid, dec, (hw, hw))
        flat = ad.reshape(ad.transpose(logits, (0, 2, 3, 1)), (hw * hw, 2))
        return ad.softmax_cross_entropy(flat, Var(onehot))

    return grad_check(fn, point, eps=1e-3, max_coords=8, seed=seed)


def test_criterion_01_gradients():
    """Analytic gradients of every op and of three full training pipelines
    agree with float64 central differences over 20 random seeds each."""
    t0 = time.monotonic()
    worst = 0.0
    for seed in range(20):
        for _, fn, point in primitive_cases(seed) + fused_cases(seed):
            worst = max(worst, grad_check(fn, point, eps=1e-3))
        worst = max(worst, _mim_pipeline_err(seed))
        worst = max(worst, _cls_pipeline_err(seed))
        worst = max(worst, _seg_pipeline_err(seed))
    elapsed = time.monotonic() - t0
    ok = worst < 1e-2 and elapsed < 120.0
    _verdict(1, ok, f"max rel err {worst:.2e} (tol 1e-2), ops + 3 pipelines x 20 seeds, {elapsed:.1f}s (budget 120s)")


# -- criterion 2: masking and reconstruction-loss contract ----------------------


def test_criterion_02_mask_and_loss_contract():
    """Masks hit exactly floor(n * ratio) tokens, unmasked tokens pass through
    bit-for-bit, and the loss is 0 iff projected features equal their targets."""
    gen = np.random.default_rng(5)
    count_ok = True
    for _ in range(200):
        n = int(gen.integers(2, 300))
        ratio = float(gen.uniform(0.02, 0.98))
        k = math.floor(n * ratio)
        if k == 0:
            with pytest.raises(ConfigError):
                sample_mask(n, ratio, gen)
            continue
        idx = sample_mask(n, ratio, gen).indices
        count_ok &= (
            idx.size == k
            and idx.min() >= 0
            and idx.max() < n
            and bool(np.all(np.diff(idx) > 0))
        )
    count_ok &= sample_mask(196, 0.3, gen).indices.size == 58

    # unmasked slots of the embedding are byte-identical with and without a mask
    model = ViT.build(ViTConfig(dim=32, depth=1, heads=2, grid=4), seed=3)
    images = np.random.default_rng(11).normal(0.0, 1.0, size=(3, 1, 64, 64)).astype(np.float32)
    plans = [sample_mask(16, 0.3, gen) for _ in range(3)]
    mask = masks_to_bool(plans, 16)
    with no_grad():
        x_masked = model.embed(images, mask)[0].value
        x_plain = model.embed(images)[0].value
    passthrough_ok, substituted_ok = True, False
    for b in range(3):
        for i in range(16):
            same = x_masked[b, 1 + i].tobytes() == x_plain[b, 1 + i].tobytes()
            if mask[b, i]:
                substituted_ok |= not same
            else:
                passthrough_ok &= same

    range_ok = True
    for t in range(50):
        r2 = np.random.default_rng(100 + t)
        b, n, d, dt = 2, int(r2.integers(4, 12)), 6, 5
        s = Var(r2.normal(size=(b, n, d)).astype(np.float32))
        targets = r2.normal(size=(b, n, dt)).astype(np.float32)
        w = Var(r2.normal(size=(d, dt)).astype(np.float32))
        bias = Var(r2.normal(size=(dt,)).astype(np.float32))
        m = masks_to_bool([sample_mask(n, float(r2.uniform(0.25, 0.9)), r2) for _ in range(b)], n)
        val = float(mim_loss(s, targets, m, w, bias).value)
        range_ok &= 0.0 <= val <= 2.0

    # identity projection + equal features: loss vanishes; nudging one masked
    # target breaks it (cosine ignores positive rescaling, so the probe is a
    # direction change, not a scale change)
    rng = np.random.default_rng(7)
    s = rng.normal(size=(2, 6, 8)).astype(np.float32)
    eq_mask = masks_to_bool([sample_mask(6, 0.4, rng) for _ in range(2)], 6)
    eye = Var(np.eye(8, dtype=np.float32))
    zero = Var(np.zeros((8,), np.float32))
    loss_eq = float(mim_loss(Var(s.copy()), s.copy(), eq_mask, eye, zero).value)
    bumped = s.copy()
    bi, ti = np.argwhere(eq_mask)[0]
    bumped[bi, ti] += rng.normal(0.0, 0.05, size=8).astype(np.float32)
    loss_neq = float(mim_loss(Var(s.copy()), bumped, eq_mask, eye, zero).value)

    ok = count_ok and passthrough_ok and substituted_ok and range_ok and loss_eq <= 1e-6 and loss_neq > 1e-6
    _verdict(
        2,
        ok,
        f"exact mask counts (196*0.3 -> 58), unmasked bytes identical, loss in [0,2], "
        f"equal-features loss {loss_eq:.1e} <= 1e-6, perturbed {loss_neq:.1e} > 1e-6",
    )


# -- criterion 3: metric oracles -------------------------------------------------


def _auc_oracle(scores, labels) -> float:
    scores = np.asarray(scores, np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (pos.size * neg.size)


def test_criterion_03_metric_oracles():
    """Ranking AUC equals the pairwise oracle exactly; the two overlap scores
    obey D = 2J / (1 + J); accuracy equals direct counting."""
    gen = np.random.default_rng(17)
    auc_ok = True
    for _ in range(200):
        n = int(gen.integers(2, 51))
        labels = gen.integers(0, 2, size=n)
        while labels.min() == labels.max():
            labels = gen.integers(0, 2, size=n)
        if gen.random() < 0.5:
            scores = gen.normal(size=n)
        else:
            scores = gen.integers(0, 4, size=n).astype(np.float64)  # force ties
        auc_ok &= roc_auc(scores, labels) == _auc_oracle(scores, labels)

    overlap_ok = True
    for t in range(1000):
        r2 = np.random.default_rng(4000 + t)
        p = r2.random((12, 17)) < r2.uniform(0.0, 0.6)
        q = r2.random((12, 17)) < r2.uniform(0.0, 0.6)
        j = jaccard(p, q)
        overlap_ok &= abs(dice(p, q) - 2.0 * j / (1.0 + j)) < 1e-12

    acc_ok = True
    for t in range(300):
        r3 = np.random.default_rng(5000 + t)
        m = int(r3.integers(1, 200))
        pred = r3.integers(0, 2, size=m)
        truth = r3.integers(0, 2, size=m)
        acc_ok &= accuracy(confusion_from_binary(pred, truth)) == float(np.mean(pred == truth))

    ok = auc_ok and overlap_ok and acc_ok
    _verdict(3, ok, "AUC == pairwise oracle on 200 draws, D = 2J/(1+J) within 1e-12 on 1000 pairs, accuracy == counting")


# -- criterion 4: pre-training convergence, bitwise reproducible -----------------


def _tiny_pretrain(workdir: Path):
    root = stream_root(42, "accept-mim")
    images = np.stack([render_sample(root.child(i), 64, i % 2, 0.08)[0][None] for i in range(8)])
    tokenizer = ViT.build(ViTConfig(dim=48, depth=1, heads=2, grid=4), seed=7)
    student = ViT.build(preset_config("micro", grid=4), seed=0)
    workdir.mkdir(parents=True, exist_ok=True)
    return pretrain_run(
        student,
        tokenizer,
        images,
        workdir / "pre.ckpt",
        workdir / "curve.csv",
        epochs=500,
        batch_size=8,
        base_lr=1e-3,
        mask_ratio=0.3,
        seed=0,
    )


def test_criterion_04_pretraining_converges_deterministically(tmp_path):
    """A micro student against a frozen random tokenizer drops the
    reconstruction loss >= 90% within 500 steps, twice, bit-for-bit."""
    t0 = time.monotonic()
    run_a = _tiny_pretrain(tmp_path / "a")
    run_b = _tiny_pretrain(tmp_path / "b")
    elapsed = time.monotonic() - t0

    first, last = float(run_a.losses[0]), float(run_a.losses[-1])
    drop = 1.0 - last / first
    identical = (
        np.array_equal(run_a.losses, run_b.losses)
        and (tmp_path / "a" / "pre.ckpt").read_bytes() == (tmp_path / "b" / "pre.ckpt").read_bytes()
        and (tmp_path / "a" / "curve.csv").read_bytes() == (tmp_path / "b" / "curve.csv").read_bytes()
    )
    ok = run_a.losses.size <= 500 and drop >= 0.9 and identical and elapsed < 300.0
    _verdict(
        4,
        ok,
        f"loss {first:.4f} -> {last:.4f} ({drop:.1%} drop over {run_a.losses.size} steps), "
        f"reruns bitwise identical: {identical}, {elapsed:.1f}s (budget 300s)",
    )


# -- criterion 5: transfer quality and label efficiency --------------------------


def test_criterion_05_transfer_and_label_efficiency(tmp_path):
    """On a 400-image presence corpus: near-perfect held-out accuracy with all
    labels, graceful degradation at a 0.1 label fraction, and a clear
    advantage of warm-started weights over random init at that fraction."""
    t0 = time.monotonic()
    manifest = generate_corpus(tmp_path / "corpus", "cls", count=400, size=64, seed=11)
    rows, _ = load_cls_manifest(manifest)
    train_rows = rows_for_split(rows, "train")
    stats = train_mean_std([r.path for r in train_rows], 64)
    train_x, train_y = _cls_split(rows, "train", 64, stats)
    val_x, val_y = _cls_split(rows, "val", 64, stats)
    test_x, test_y = _cls_split(rows, "test", 64, stats)

    tokenizer = ViT.build(ViTConfig(dim=48, depth=1, heads=2, grid=4), seed=7)
    pre = pretrain_run(
        ViT.build(preset_config("micro", grid=4), seed=0),
        tokenizer,
        train_x,
        tmp_path / "pre.ckpt",
        tmp_path / "pre.csv",
        epochs=200,
        batch_size=32,
        base_lr=1e-3,
        mask_ratio=0.3,
        seed=0,
    )

    def run_arm(tag: str, backbone: ViT, x, y, epochs: int, batch_size: int) -> dict:
        result = finetune_cls(
            backbone, x, y, val_x, val_y,
            tmp_path / f"{tag}.ckpt", tmp_path / f"{tag}.csv",
            task="single", epochs=epochs, batch_size=batch_size,
            lr=1e-3, dropout_p=0.1, seed=0, augment_fn=_flip_aug,
        )
        best_bb, best_head = _load_cls(result.checkpoint_path)
        return evaluate_cls(best_bb, best_head, test_x, test_y, "single")

    full = run_arm("full", _load_backbone(pre.checkpoint_path), train_x, train_y, 12, 32)

    frac_rows = rows_for_split(subsample_train(rows, 0.1, seed=0), "train")
    frac_x = normalize_batch(image_stack([r.path for r in frac_rows], 64), *stats)
    frac_y = single_ids(label_matrix(frac_rows, "zero"))
    warm = run_arm("warm", _load_backbone(pre.checkpoint_path), frac_x, frac_y, 40, 8)
    cold = run_arm("cold", ViT.build(preset_config("micro", grid=4), seed=0), frac_x, frac_y, 40, 8)

    elapsed = time.monotonic() - t0
    gap = warm["accuracy"] - cold["accuracy"]
    ok = (
        full["accuracy"] >= 0.95
        and full["mauc"] >= 0.99
        and warm["accuracy"] >= 0.85
        and gap >= 0.05
        and elapsed < 600.0
    )
    _verdict(
        5,
        ok,
        f"full: acc {full['accuracy']:.3f} (>= 0.95) mAUC {full['mauc']:.4f} (>= 0.99); "
        f"fraction 0.1 warm acc {warm['accuracy']:.3f} (>= 0.85), warm-cold gap {gap:+.3f} (>= 0.05); "
        f"{elapsed:.0f}s (budget 600s)",
    )


# -- criterion 6: segmentation capacity ------------------------------------------


def test_criterion_06_segmentation_overfit(tmp_path):
    """Backbone + fusion decoder drive train Dice >= 0.90 on 16 image/mask
    pairs at 128 px within 1000 iterations."""
    t0 = time.monotonic()
    manifest = generate_corpus(tmp_path / "corpus", "seg", count=16, size=128, seed=21, fractions=(1.0, 0.0, 0.0))
    rows = load_seg_manifest(manifest)
    paths = [r.path for r in rows]
    stats = train_mean_std(paths, 128)
    x = normalize_batch(image_stack(paths, 128), *stats)
    y = mask_stack(rows, 128)

    result = finetune_seg(
        ViT.build(preset_config("micro", grid=8), seed=0),
        x, y, x, y,
        tmp_path / "seg.ckpt", tmp_path / "seg.csv",
        iterations=400, batch_size=8, num_classes=2,
        decoder_dim=32, lr=2e-4, seed=0, eval_every=200,
    )
    elapsed = time.monotonic() - t0
    ok = result.best_metric >= 0.90 and elapsed < 600.0
    _verdict(
        6,
        ok,
        f"train Dice {result.best_metric:.3f} (>= 0.90) after <= 400 of 1000 allowed iterations, "
        f"{elapsed:.0f}s (budget 600s)",
    )


# -- criterion 7: weakly-supervised localization ----------------------------------


def test_criterion_07_cam_localization(tmp_path):
    """Activation maps from a presence classifier localize the planted
    findings: pointing accuracy >= 0.9 and mean IoU >= 0.3 at the best
    threshold of the configured sweep."""
    t0 = time.monotonic()
    manifest = generate_corpus(tmp_path / "corpus", "loc", count=60, size=128, seed=31)
    loc_rows = load_loc_manifest(manifest)
    cls_rows, _ = load_cls_manifest(tmp_path / "corpus" / "manifest_cls.csv")
    ctrain = rows_for_split(cls_rows, "train")
    stats = train_mean_std([r.path for r in ctrain], 128)
    train_x, train_y = _cls_split(cls_rows, "train", 128, stats)
    val_x, val_y = _cls_split(cls_rows, "val", 128, stats)

    tokenizer = ViT.build(ViTConfig(dim=48, depth=1, heads=2, grid=8), seed=7)
    pre = pretrain_run(
        ViT.build(preset_config("micro", grid=8), seed=0),
        tokenizer,
        train_x,
        tmp_path / "pre.ckpt",
        tmp_path / "pre.csv",
        epochs=100,
        batch_size=24,
        base_lr=1e-3,
        mask_ratio=0.3,
        seed=0,
    )
    ft = finetune_cls(
        _load_backbone(pre.checkpoint_path),
        train_x, train_y, val_x, val_y,
        tmp_path / "cls.ckpt", tmp_path / "cls.csv",
        task="single", epochs=20, batch_size=16,
        lr=1e-3, dropout_p=0.1, seed=0, augment_fn=_flip_aug,
    )
    backbone, head = _load_cls(ft.checkpoint_path)

    images, boxes, labels = loc_arrays(loc_rows, 128)
    images = normalize_batch(images, *stats)
    cams = [grad_cam(backbone, head, images[i], int(labels[i])).normalized for i in range(len(loc_rows))]
    thresholds = np.linspace(0.1, 0.6, 11)
    result = cam_localize(cams, np.asarray(boxes, np.float64), thresholds=thresholds)

    elapsed = time.monotonic() - t0
    grid_ok = np.array_equal(np.asarray(result.thresholds, np.float64), thresholds)
    ok = result.pointing >= 0.9 and result.iou_at_best >= 0.3 and grid_ok
    _verdict(
        7,
        ok,
        f"pointing {result.pointing:.3f} (>= 0.9), IoU {result.iou_at_best:.3f} at t*={result.best_t:.2f} "
        f"(>= 0.3), sweep grid returned verbatim: {grid_ok}, {elapsed:.0f}s",
    )


# -- criterion 8: checkpoint round-trip and corruption ----------------------------


def test_criterion_08_checkpoint_integrity(tmp_path):
    """Save -> load -> save is byte-identical; corrupting the magic or
    truncating the file raises the designated error types."""
    rng = np.random.default_rng(23)
    tensors = {
        "vit.patch_embed.w": rng.normal(size=(256, 64)).astype(np.float32),
        "head.b": rng.normal(size=(5,)).astype(np.float32),
        # awkward but finite float32 values must survive bit-for-bit
        "edge": np.array([0.0, -0.0, 1e-45, -1e-45, 3.4e38, -3.4e38, 1e-38], np.float32),
    }
    meta = {"kind": "demo", "nested": {"epochs": 3, "lr": 1e-3}, "tags": ["a", "b"]}
    p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
    save_checkpoint(p1, tensors, meta)
    loaded, meta2 = load_checkpoint(p1)
    round_ok = meta2 == meta and all(
        loaded[k].dtype == tensors[k].dtype and loaded[k].tobytes() == tensors[k].tobytes()
        for k in tensors
    )
    save_checkpoint(p2, loaded, meta2)
    round_ok &= p1.read_bytes() == p2.read_bytes()

    raw = bytearray(p1.read_bytes())
    bad_magic = tmp_path / "magic.ckpt"
    bad_magic.write_bytes(b"NOPE" + bytes(raw[4:]))
    truncated = tmp_path / "short.ckpt"
    truncated.write_bytes(bytes(raw[:-8]))

    errors_ok = True
    try:
        load_checkpoint(bad_magic)
        errors_ok = False
    except BadMagicError:
        pass
    try:
        load_checkpoint(truncated)
        errors_ok = False
    except TruncatedFileError:
        pass

    ok = round_ok and errors_ok
    _verdict(8, ok, f"round-trip bytes identical: {round_ok}; magic/size corruption raise their own types: {errors_ok}")


# -- criterion 9: schedule arithmetic ---------------------------------------------


def test_criterion_09_schedules_exact():
    """Cosine decay hits its endpoints and midpoint exactly, and layer-wise
    lr scales are exact powers of the decay factor."""
    cos_ok = (
        cosine_lr(0, 100, 3e-4, 0.0) == 3e-4
        and cosine_lr(50, 100, 3e-4, 0.0) == 1.5e-4
        and cosine_lr(100, 100, 3e-4, 0.0) == 0.0
        and cosine_lr(0, 2, 3e-4, 1e-5) == 3e-4
        and cosine_lr(1, 2, 3e-4, 1e-5) == (3e-4 + 1e-5) / 2.0
        and cosine_lr(2, 2, 3e-4, 1e-5) == 1e-5
    )

    backbone = ViT.build(preset_config("micro", grid=4), seed=0)  # depth 2
    head = make_cls_head(backbone.config.dim, 2, seed=0)
    llrd_ok = True
    for decay in (0.55, 0.85):
        scales = {}
        for group in llrd_groups(backbone, head, decay):
            label = group.name.removesuffix(".nodecay")
            previous = scales.setdefault(label, group.lr_scale)
            llrd_ok &= previous == group.lr_scale
        expected = {"embed": decay**3, "block0": decay**2, "block1": decay**1, "head": 1.0}
        llrd_ok &= scales == expected

    ok = cos_ok and llrd_ok
    _verdict(9, ok, f"cosine endpoints/midpoint exact: {cos_ok}; depth-scaled lr factors exact for 0.55 and 0.85: {llrd_ok}")


# -- criterion 10: CLI determinism -------------------------------------------------


def test_criterion_10_cli_bitwise_reruns(tmp_path):
    """Running pretraining and classification fine-tuning twice through the
    CLI with --threads 1 yields byte-identical curves, checkpoints and
    evaluation reports."""
    t0 = time.monotonic()
    corpus = tmp_path / "corpus"
    assert _quiet_cli(["synth", "--task", "cls", "--count", "12", "--size", "64",
                       "--seed", "1", "--out", str(corpus)]) == 0
    tok_path = tmp_path / "tokenizer.ckpt"
    tok = ViT.build(ViTConfig(dim=48, depth=1, heads=2, grid=4), seed=7)
    save_checkpoint(tok_path, vit_to_tensors(tok), {"kind": "tokenizer", "vit": vit_meta(tok.config)})

    runs = []
    for tag in ("a", "b"):
        pt, ft, ev = tmp_path / f"pt_{tag}", tmp_path / f"ft_{tag}", tmp_path / f"ev_{tag}"
        assert _quiet_cli(["pretrain", "--manifest", str(corpus / "manifest.csv"),
                           "--tokenizer-ckpt", str(tok_path), "--preset", "micro",
                           "--image-size", "64", "--epochs", "2", "--batch-size", "4",
                           "--seed", "0", "--threads", "1", "--out", str(pt)]) == 0
        assert _quiet_cli(["finetune-cls", "--manifest", str(corpus / "manifest.csv"),
                           "--ckpt", str(pt / "checkpoints" / "pretrain.ckpt"),
                           "--image-size", "64", "--epochs", "2", "--batch-size", "4",
                           "--seed", "0", "--threads", "1", "--out", str(ft)]) == 0
        assert _quiet_cli(["eval-cls", "--manifest", str(corpus / "manifest.csv"),
                           "--ckpt", str(ft / "checkpoints" / "finetune_cls.ckpt"),
                           "--split", "test", "--threads", "1", "--out", str(ev)]) == 0
        runs.append((pt, ft, ev))

    checks = [
        (0, "reports/pretrain_curve.csv"),
        (0, "checkpoints/pretrain.ckpt"),
        (1, "reports/finetune_cls.csv"),
        (1, "checkpoints/finetune_cls.ckpt"),
        (2, "reports/eval_cls.csv"),
    ]
    mismatched = [rel for slot, rel in checks
                  if (runs[0][slot] / rel).read_bytes() != (runs[1][slot] / rel).read_bytes()]
    elapsed = time.monotonic() - t0
    ok = not mismatched
    _verdict(10, ok, f"5 artifacts byte-identical across reruns (mismatches: {mismatched or 'none'}), {elapsed:.0f}s")
