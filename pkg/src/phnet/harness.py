"""Training, evaluation, and benchmarking harness.

Training samples foreground-biased patches per case each epoch, optimizes the
Dice+CE loss with AdamW under the batch-proportional learning-rate rule, logs
one line-delimited JSON record per optimizer step, and checkpoints whenever
the validation Dice improves.

Inference runs a sliding window at the training patch size with 50% overlap
and uniform logit averaging; windows are stitched in a canonical sorted order
so the result is independent of traversal order.  A window spanning the whole
volume reduces exactly to a single forward pass.
"""

import json
import math
import resource
import time
from pathlib import Path
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .data import (
    LabelVolume,
    Volume,
    read_manifest,
    read_volume,
    resample_to_grid,
    resample_to_spacing,
    sample_patches,
    zscore,
)
from .metrics import dice, dice_ce_loss, evaluate_case, write_report_csv
from .model import (
    PHNet,
    PHNetConfig,
    MLPPDefaults,
    config_from_dict,
    config_to_dict,
    count_params,
    load_checkpoint,
    read_checkpoint_meta,
    save_checkpoint,
)
from .optim import AdamW, TrainingError

__all__ = [
    "TrainConfig",
    "RunLog",
    "read_runlog",
    "load_dataset",
    "window_starts",
    "stitch_windows",
    "sliding_window_logits",
    "predict_label_volume",
    "train",
    "evaluate",
    "bench",
    "grad_check_suite",
    "BLOCK_GRAD_TOL",
    "E2E_GRAD_TOL",
]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    data_dir: str = "data"
    out_dir: str = "runs/default"
    epochs: int = 10
    batch_size: int = 2
    patches_per_case: int = 4
    patch_size: tuple = (64, 64, 32)      # (H, W, D)
    fg_bias: float = 0.7
    val_interval: int = 1
    seed: int = 0
    lr: float | None = None               # None -> batch-size rule
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    num_stages: int = 4
    base_channels: int = 8
    max_channels: int = 320
    blocks_per_stage: int = 2
    mlpp_num_layers: int = 2
    mlpp_stages: tuple | None = None      # None -> deepest two stages


def _patch_dhw(patch_size_hwd):
    h, w, d = (int(p) for p in patch_size_hwd)
    return d, h, w


def _model_config(cfg, num_classes, spacing_mm):
    return PHNetConfig(
        num_stages=cfg.num_stages,
        base_channels=cfg.base_channels,
        max_channels=cfg.max_channels,
        in_channels=1,
        num_classes=num_classes,
        voxel_spacing_mm=tuple(spacing_mm),
        patch_size=tuple(cfg.patch_size),
        mlpp_stages=cfg.mlpp_stages,
        mlpp=MLPPDefaults(num_layers=cfg.mlpp_num_layers),
        blocks_per_stage=cfg.blocks_per_stage,
    )


# ---------------------------------------------------------------------------
# run log
# ---------------------------------------------------------------------------

class RunLog:
    """Line-delimited JSON training log.  Step records must arrive with
    strictly increasing step ids; every record carries a wall-clock timestamp
    and elapsed seconds since the log was opened."""

    def __init__(self, path):
        self.path = str(path)
        self._f = open(self.path, "w", encoding="utf-8")
        self._t0 = time.monotonic()
        self._last_step = 0

    def _emit(self, record):
        record = {"timestamp": time.time(),
                  "wall_time_s": time.monotonic() - self._t0,
                  **record}
        self._f.write(json.dumps(record) + "\n")
        self._f.flush()

    def log_meta(self, **fields):
        self._emit({"kind": "meta", **fields})

    def log_step(self, step, epoch, loss, lr):
        if step != self._last_step + 1:
            raise ValueError(
                f"step ids must increase by 1: got {step} after {self._last_step}")
        self._last_step = step
        self._emit({"kind": "step", "step": step, "epoch": epoch,
                    "loss": float(loss), "lr": float(lr)})

    def log_epoch(self, epoch, val_dice, best_val_dice):
        self._emit({"kind": "epoch", "epoch": epoch,
                    "val_dice": None if val_dice is None else float(val_dice),
                    "best_val_dice": (None if best_val_dice is None
                                      else float(best_val_dice))})

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_runlog(path):
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

def load_dataset(data_dir):
    """Read every case referenced by the manifest; returns (cases, manifest)
    where each case is {id, split, image: Volume, labels: LabelVolume}."""
    root = Path(data_dir)
    manifest = read_manifest(root / "manifest.json")
    cases = []
    for entry in manifest["cases"]:
        cid = entry["id"]
        cases.append({
            "id": cid,
            "split": entry.get("split", "train"),
            "image": read_volume(root / f"{cid}_img"),
            "labels": read_volume(root / f"{cid}_lbl"),
        })
    return cases, manifest


# ---------------------------------------------------------------------------
# sliding-window inference
# ---------------------------------------------------------------------------

def window_starts(extent, patch):
    """Start offsets covering ``extent`` with ~50% overlap; the final window
    is clamped so the volume tail is always covered."""
    if patch > extent:
        raise ValueError(f"window size {patch} exceeds volume extent {extent}")
    if patch == extent:
        return [0]
    step = max(1, patch // 2)
    starts = list(range(0, extent - patch + 1, step))
    if starts[-1] != extent - patch:
        starts.append(extent - patch)
    return starts


def stitch_windows(shape, windows):
    """Uniformly average per-window logits into a full (K, D, H, W) float64
    grid.  Windows are accumulated in canonical (z, y, x) start order, so the
    output is bitwise independent of the order they are supplied in."""
    ordered = sorted(windows, key=lambda item: tuple(item[0]))
    k = ordered[0][1].shape[0]
    acc = np.zeros((k,) + tuple(shape), dtype=np.float64)
    cnt = np.zeros(tuple(shape), dtype=np.float64)
    for (z, y, x), logits in ordered:
        _, d, h, w = logits.shape
        acc[:, z:z + d, y:y + h, x:x + w] += logits.astype(np.float64)
        cnt[z:z + d, y:y + h, x:x + w] += 1.0
    if (cnt == 0).any():
        raise ValueError("windows do not cover the volume")
    return acc / cnt[None]


def sliding_window_logits(net, grid, patch_dhw, *, batch_free=True):
    """Averaged class logits (K, D, H, W) for a normalized (D, H, W) grid."""
    pd, ph, pw = patch_dhw
    starts = [window_starts(grid.shape[0], pd),
              window_starts(grid.shape[1], ph),
              window_starts(grid.shape[2], pw)]
    windows = []
    with ag.no_grad():
        for z in starts[0]:
            for y in starts[1]:
                for x in starts[2]:
                    patch = grid[z:z + pd, y:y + ph, x:x + pw]
                    t = ag.Tensor(patch[None, None].astype(np.float32))
                    windows.append(((z, y, x), net(t).data[0]))
    return stitch_windows(grid.shape, windows)


def predict_label_volume(net, vol, model_cfg):
    """Segment one case: resample to the model spacing, run the sliding
    window, argmax, and map labels back onto the case's native grid."""
    target = tuple(model_cfg.voxel_spacing_mm)
    native_spacing = tuple(vol.spacing_mm)
    work = vol if native_spacing == target else resample_to_spacing(vol, target)
    pd, ph, pw = _patch_dhw(model_cfg.patch_size)
    if any(p > s for p, s in zip((pd, ph, pw), work.grid.shape)):
        raise ValueError(
            f"patch {(pd, ph, pw)} larger than case grid {work.grid.shape} "
            f"after resampling to spacing {target}")
    logits = sliding_window_logits(net, zscore(work.grid), (pd, ph, pw))
    pred = LabelVolume(np.argmax(logits, axis=0).astype(np.uint8), target)
    if work is vol:
        return pred
    return resample_to_grid(pred, vol.grid.shape, native_spacing)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _validation_dice(net, model_cfg, val_cases):
    """Mean foreground Dice over validation cases; None when there are none."""
    if not val_cases:
        return None
    scores = []
    for case in val_cases:
        pred = predict_label_volume(net, case["image"], model_cfg)
        per_class = [dice(pred, case["labels"], c)
                     for c in range(1, model_cfg.num_classes)]
        scores.append(sum(per_class) / len(per_class))
    return sum(scores) / len(scores)


def train(cfg):
    """Full training run; returns a summary dict with the checkpoint path,
    best validation Dice, and total step count."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases, manifest = load_dataset(cfg.data_dir)
    train_cases = [c for c in cases if c["split"] == "train"]
    val_cases = [c for c in cases if c["split"] == "val"]
    if not train_cases:
        raise ValueError(f"{cfg.data_dir}: no cases with split 'train'")

    num_classes = int(manifest.get("num_classes", 2))
    spacing = tuple(manifest.get("spacing_mm")
                    or train_cases[0]["image"].spacing_mm)
    per_epoch_patches = len(train_cases) * cfg.patches_per_case
    if per_epoch_patches % cfg.batch_size != 0:
        raise ValueError(
            f"cases*patches_per_case ({per_epoch_patches}) must be divisible "
            f"by batch_size ({cfg.batch_size})")
    steps_per_epoch = per_epoch_patches // cfg.batch_size
    planned_steps = cfg.epochs * steps_per_epoch

    model_cfg = _model_config(cfg, num_classes, spacing)
    net = PHNet(model_cfg, seed=cfg.seed)
    opt = AdamW(net.parameters(), batch_size=cfg.batch_size, lr=cfg.lr,
                betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                weight_decay=cfg.weight_decay)

    # normalize once per volume; patches are cropped from the normalized grid
    norm_train = [(Volume(zscore(c["image"].grid), c["image"].spacing_mm),
                   c["labels"]) for c in train_cases]

    ckpt_path = out_dir / "best.ckpt"
    best = None
    step = 0
    patch_dhw = _patch_dhw(cfg.patch_size)
    with RunLog(out_dir / "runlog.jsonl") as log:
        log.log_meta(planned_steps=planned_steps,
                     steps_per_epoch=steps_per_epoch,
                     lr=opt.lr, param_count=count_params(net),
                     train_cases=len(train_cases), val_cases=len(val_cases),
                     config=asdict(cfg))
        for epoch in range(1, cfg.epochs + 1):
            rng = np.random.default_rng([cfg.seed, 9973, epoch])
            pool = []
            for vol, lab in norm_train:
                pool.extend(sample_patches(vol, lab, patch_dhw,
                                           cfg.patches_per_case,
                                           cfg.fg_bias, rng))
            order = rng.permutation(len(pool))
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                x = np.stack([pool[i][0] for i in idx])[:, None]
                y = np.stack([pool[i][1] for i in idx]).astype(np.int64)
                opt.zero_grad()
                logits = net(ag.Tensor(x))
                loss = dice_ce_loss(logits, y)
                loss_val = loss.item()
                step += 1
                if not math.isfinite(loss_val):
                    raise TrainingError(
                        f"non-finite loss {loss_val} at step {step} "
                        f"(epoch {epoch})")
                ag.backward(loss)
                opt.step()
                log.log_step(step, epoch, loss_val, opt.lr)
            if epoch % cfg.val_interval == 0 or epoch == cfg.epochs:
                val = _validation_dice(net, model_cfg, val_cases)
                improved = (val is None or best is None or val > best)
                if val is not None and (best is None or val > best):
                    best = val
                if improved:
                    save_checkpoint(net, ckpt_path, meta={
                        "model_config": config_to_dict(model_cfg),
                        "train_config": asdict(cfg),
                        "epoch": epoch,
                        "val_dice": val,
                    })
                log.log_epoch(epoch, val, best)
    return {"steps": step, "planned_steps": planned_steps,
            "best_val_dice": best, "checkpoint": str(ckpt_path),
            "runlog": str(out_dir / "runlog.jsonl")}


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(checkpoint_path, data_dir, out_csv=None, split="val",
             tolerance_mm=1.0, percentile=95):
    """Segment every case in ``split`` and compute all metrics per class on
    the case's native grid.  A case whose resampled grid is smaller than the
    inference window contributes an error row instead of metric rows."""
    meta = read_checkpoint_meta(checkpoint_path)
    if "model_config" not in meta:
        raise ValueError(f"{checkpoint_path}: checkpoint has no model_config")
    model_cfg = config_from_dict(meta["model_config"])
    net = PHNet(model_cfg, seed=0)
    load_checkpoint(net, checkpoint_path)

    cases, _ = load_dataset(data_dir)
    chosen = [c for c in cases if c["split"] == split]
    if not chosen:
        raise ValueError(f"{data_dir}: no cases with split {split!r}")

    pd, ph, pw = _patch_dhw(model_cfg.patch_size)
    target = tuple(model_cfg.voxel_spacing_mm)
    rows = []
    for case in chosen:
        vol = case["image"]
        work_shape = (vol.grid.shape if tuple(vol.spacing_mm) == target else
                      resample_to_spacing(vol, target).grid.shape)
        if any(p > s for p, s in zip((pd, ph, pw), work_shape)):
            rows.append({"case": case["id"], "class": "",
                         "error": (f"patch {(pd, ph, pw)} larger than case "
                                   f"grid {tuple(work_shape)} after resampling "
                                   f"to spacing {target}")})
            continue
        pred = predict_label_volume(net, vol, model_cfg)
        for r in evaluate_case(pred, case["labels"], model_cfg.num_classes,
                               tolerance_mm=tolerance_mm, percentile=percentile):
            rows.append({"case": case["id"], **r})
    if out_csv is not None:
        write_report_csv(out_csv, rows)
    return rows


# ---------------------------------------------------------------------------
# gradient verification suite
# ---------------------------------------------------------------------------

BLOCK_GRAD_TOL = 1e-5
E2E_GRAD_TOL = 1e-4


def grad_check_suite(seed=0):
    """Finite-difference verification of every differentiable building block
    plus the assembled network, all in float64.

    Objectives are random-weighted output sums (a J^T w probe); a plain
    scalar like the output mean is nearly invariant to the input for
    normalization layers, which makes its true gradient vanish and the
    finite-difference quotient numerically meaningless.

    Returns one record per check: name, max relative error, tolerance, and
    pass flag.
    """
    from .layers import (
        ChannelNorm,
        Conv,
        ConvTranspose,
        InstanceNorm,
        Linear,
        ResidualConvBlock,
        SeparableConvBlock,
        conv_nd,
        linear,
    )
    from .mlpp import MLPPBlock, MLPPConfig

    rng = np.random.default_rng(seed)
    f64 = np.float64

    def probe_for(module, x_shape):
        with ag.no_grad():
            out = module(ag.Tensor(rng.normal(size=x_shape)))
        return rng.normal(size=out.shape)

    def probed(module, x_shape):
        w = probe_for(module, x_shape)
        x = rng.normal(size=x_shape)
        return ag.grad_check(
            lambda t: (module(t) * ag.Tensor(w, requires_grad=False)).sum(),
            ag.Tensor(x))

    checks = []

    def add(name, err, tol):
        checks.append({"name": name, "max_rel_err": float(err),
                       "tolerance": tol, "passed": bool(err < tol)})

    mk = np.random.default_rng(seed + 1)
    add("conv3d_input",
        probed(Conv(2, 3, (2, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1),
                    bias=True, rng=mk, dtype=f64), (1, 2, 3, 6, 6)),
        BLOCK_GRAD_TOL)

    k = rng.normal(size=(3, 2, 2, 3, 3))
    xc = ag.Tensor(rng.normal(size=(1, 2, 3, 6, 6)), requires_grad=False)
    with ag.no_grad():
        out_shape = conv_nd(xc, ag.Tensor(k), stride=(1, 2, 2),
                            padding=(0, 1, 1)).shape
    wc = rng.normal(size=out_shape)
    add("conv3d_kernel",
        ag.grad_check(
            lambda t: (conv_nd(xc, t, stride=(1, 2, 2), padding=(0, 1, 1))
                       * ag.Tensor(wc, requires_grad=False)).sum(),
            ag.Tensor(k)),
        BLOCK_GRAD_TOL)

    add("conv_transpose_input",
        probed(ConvTranspose(2, 2, 2, stride=2, rng=mk, dtype=f64),
               (1, 2, 2, 3, 3)),
        BLOCK_GRAD_TOL)

    add("linear_input",
        probed(Linear(5, 4, rng=mk, dtype=f64), (3, 5)),
        BLOCK_GRAD_TOL)

    wl = rng.normal(size=(4, 5))
    xl = ag.Tensor(rng.normal(size=(3, 5)), requires_grad=False)
    pw = rng.normal(size=(3, 4))
    add("linear_weight",
        ag.grad_check(
            lambda t: (linear(xl, t) * ag.Tensor(pw, requires_grad=False)).sum(),
            ag.Tensor(wl)),
        BLOCK_GRAD_TOL)

    add("instance_norm_input",
        probed(InstanceNorm(3, dtype=f64), (2, 3, 3, 4, 4)),
        BLOCK_GRAD_TOL)

    add("channel_norm_input",
        probed(ChannelNorm(5, dtype=f64), (2, 5, 2, 3, 3)),
        BLOCK_GRAD_TOL)

    add("residual_block_input",
        probed(ResidualConvBlock(2, 4, stride=(1, 2, 2), rng=mk, dtype=f64),
               (1, 2, 2, 4, 4)),
        BLOCK_GRAD_TOL)

    add("separable_block_input",
        probed(SeparableConvBlock(3, rng=mk, dtype=f64), (1, 3, 3, 4, 4)),
        BLOCK_GRAD_TOL)

    add("mlpp_block_input",
        probed(MLPPBlock(MLPPConfig(channels=4, l_ip=2, l_aa=2, l_tp=2,
                                    num_layers=1), rng=mk, dtype=f64),
               (1, 4, 2, 4, 4)),
        BLOCK_GRAD_TOL)

    net_cfg = PHNetConfig(num_stages=2, base_channels=2, max_channels=4,
                          num_classes=2, voxel_spacing_mm=(1.0, 1.0, 4.0),
                          patch_size=(8, 8, 4), blocks_per_stage=1,
                          mlpp=MLPPDefaults(num_layers=1))
    net = PHNet(net_cfg, seed=seed, dtype=f64)
    add("network_end_to_end",
        probed(net, (1, 1, 4, 8, 8)),
        E2E_GRAD_TOL)

    return checks


# ---------------------------------------------------------------------------
# benchmarking
# ---------------------------------------------------------------------------

def bench(model_cfg, batch_size=1, repeats=3, seed=0):
    """Analytic cost plus measured forward throughput for one configuration.

    FLOPs come from the model's own accounting (multiply-accumulate based);
    throughput excludes one warmup forward; peak resident memory is
    best-effort from the OS accounting of this process.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    net = PHNet(model_cfg, seed=seed)
    d, h, w = _patch_dhw(model_cfg.patch_size)
    shape = (batch_size, model_cfg.in_channels, d, h, w)
    flops, out_shape = net.count_flops(shape)
    x = np.zeros(shape, dtype=np.float32)
    with ag.no_grad():
        net(ag.Tensor(x))                      # warmup, excluded from timing
        t0 = time.perf_counter()
        for _ in range(repeats):
            net(ag.Tensor(x))
        elapsed = time.perf_counter() - t0
    voxels = batch_size * d * h * w * repeats
    return {
        "params": count_params(net),
        "flops_per_forward": flops,
        "output_shape": tuple(out_shape),
        "input_shape": shape,
        "repeats": repeats,
        "seconds_per_forward": elapsed / repeats,
        "voxels_per_second": voxels / elapsed if elapsed > 0 else float("inf"),
        "peak_rss_bytes": resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024,
    }
