"""Pair-based training of the Siamese matcher.

One epoch here is one online minibatch: sample balanced positive and
negative sequence pairs, cut a random contiguous window from each
sequence, augment frame by frame, push every pair through the shared
model, and apply one RMSProp update from the summed gradients (clipped
elementwise first). Pairs inside a batch are independent, so they may be
farmed out to worker processes; gradients merge in pair order either
way, which keeps the single-worker and multi-worker loss streams
identical.

Checkpoints are directories of named tensors plus a JSON manifest
carrying the config, its hash, the epoch and the sampler state, which is
what makes an interrupted run resumable bit for bit.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import Dataset
from .siamese import SiameseModel, pair_loss, param_shapes
from .tensor import Tensor, load_tensor, save_tensor, zero_grad

__all__ = [
    "NanLossError",
    "PairSample",
    "TrainResult",
    "init_params",
    "sample_window",
    "transform_frames",
    "augment",
    "sample_pair",
    "sample_batch",
    "clip_gradients",
    "rmsprop_step",
    "save_checkpoint",
    "load_checkpoint",
    "latest_checkpoint",
    "train",
]

log = logging.getLogger(__name__)


class NanLossError(RuntimeError):
    """Training halted on a non-finite loss; carries the replay dump path."""

    def __init__(self, message: str, dump_path: Path | None = None):
        super().__init__(message)
        self.dump_path = dump_path


# -- initialization ----------------------------------------------------------


def _scaled_limit(shape) -> float:
    if len(shape) == 4:  # conv kernel [k1, k2, cin, cout]
        rf = shape[0] * shape[1]
        fan_in, fan_out = rf * shape[2], rf * shape[3]
    elif len(shape) == 2:
        fan_in, fan_out = shape
    elif len(shape) == 1:
        fan_in, fan_out = shape[0], 1
    else:
        fan_in = fan_out = 1
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(
    cfg: RunConfig, rng: np.random.Generator, requires_grad: bool = True
) -> dict[str, Tensor]:
    """Draw a fresh parameter set.

    Recurrent kernels follow the configured scheme: 'uniform' draws from
    U[-1, 1], 'scaled' from the fan-balanced uniform range. Everything
    else always uses the scaled range; biases and the head offset start
    at zero.
    """
    dtype = cfg.model.dtype
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(cfg.model).items():
        is_gru_kernel = name.startswith("layer") and len(shape) == 4
        is_bias = (
            name.endswith((".b", ".b_z", ".b_r"))
            or ".bias" in name
            or name.endswith((".b1", ".b2"))
            or name == "head.c"
        )
        if is_bias:
            arr = np.zeros(shape)
        elif is_gru_kernel and cfg.train.init == "uniform":
            arr = rng.uniform(-1.0, 1.0, size=shape)
        else:
            a = _scaled_limit(shape)
            arr = rng.uniform(-a, a, size=shape)
        params[name] = Tensor(arr, requires_grad=requires_grad, dtype=dtype)
    if cfg.train.freeze_encoder:
        for name in params:
            if name.startswith("encoder."):
                params[name].requires_grad = False
    return params


# -- sampling and augmentation -----------------------------------------------


@dataclass
class PairSample:
    frames_a: np.ndarray
    frames_b: np.ndarray
    label: int
    identity_a: str = ""
    identity_b: str = ""


def sample_window(frames: np.ndarray, window: int, rng: np.random.Generator) -> np.ndarray:
    """Random contiguous window; shorter sequences are used whole."""
    n = frames.shape[0]
    if n <= window:
        return frames
    start = int(rng.integers(0, n - window + 1))
    return frames[start : start + window]


def transform_frames(frames: np.ndarray, mirror: bool, dx: int, dy: int) -> np.ndarray:
    """Deterministic mirror / integer translation with zero-filled borders."""
    out = frames[:, :, ::-1, :] if mirror else frames
    if dx == 0 and dy == 0:
        return np.ascontiguousarray(out)
    h, w = out.shape[1:3]
    shifted = np.zeros_like(out)
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    ys_src = slice(max(-dy, 0), min(h - dy, h))
    xs_src = slice(max(-dx, 0), min(w - dx, w))
    shifted[:, ys, xs, :] = out[:, ys_src, xs_src, :]
    return shifted


def _round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def augment(frame: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random mirror plus a small integer translation for one [H, W, 3] frame.

    The shift is drawn uniformly from +-5% of each spatial extent and
    rounded half away from zero, so a 32-pixel axis moves by up to 2px.
    """
    h, w = frame.shape[:2]
    mirror = bool(rng.random() < 0.5)
    dy = _round_half_away(float(rng.uniform(-0.05 * h, 0.05 * h)))
    dx = _round_half_away(float(rng.uniform(-0.05 * w, 0.05 * w)))
    return transform_frames(frame[None], mirror, dx, dy)[0]


def _augment_window(frames: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment(frames[t], rng) for t in range(frames.shape[0])])


_warned_single_view: set[int] = set()


def _positive_candidates(dataset: Dataset) -> list[str]:
    good = [i for i in dataset.identities() if len(dataset.views(i)) >= 2]
    dropped = [i for i in dataset.identities() if len(dataset.views(i)) < 2]
    if dropped and id(dataset) not in _warned_single_view:
        _warned_single_view.add(id(dataset))
        log.warning(
            "identities with a single view excluded from positive pairs: %s",
            ", ".join(dropped),
        )
    return good


def sample_pair(
    dataset: Dataset,
    rng: np.random.Generator,
    window: int,
    positive: bool,
    do_augment: bool = True,
) -> PairSample:
    """One labelled pair of augmented windows.

    Positive pairs take the same identity seen from two different views;
    negative pairs take two different identities.
    """
    ids = dataset.identities()
    if len(ids) < 2:
        raise ConfigError(f"pair sampling needs at least 2 identities, got {len(ids)}")
    if positive:
        good = _positive_candidates(dataset)
        if not good:
            raise ConfigError("no identity has two views; positive pairs impossible")
        ident = good[int(rng.integers(len(good)))]
        views = dataset.views(ident)
        va, vb = (views[i] for i in rng.choice(len(views), size=2, replace=False))
        ia, ib = ident, ident
    else:
        pick = rng.choice(len(ids), size=2, replace=False)
        ia, ib = ids[int(pick[0])], ids[int(pick[1])]
        views_a, views_b = dataset.views(ia), dataset.views(ib)
        va = views_a[int(rng.integers(len(views_a)))]
        vb = views_b[int(rng.integers(len(views_b)))]
    seqs_a = dataset.sequences[ia][va]
    seqs_b = dataset.sequences[ib][vb]
    fa = sample_window(seqs_a[int(rng.integers(len(seqs_a)))], window, rng)
    fb = sample_window(seqs_b[int(rng.integers(len(seqs_b)))], window, rng)
    if do_augment:
        fa = _augment_window(fa, rng)
        fb = _augment_window(fb, rng)
    return PairSample(fa, fb, int(positive), ia, ib)


def sample_batch(
    dataset: Dataset,
    rng: np.random.Generator,
    window: int,
    n_pairs: int,
    do_augment: bool = True,
) -> list[PairSample]:
    """Alternating positive/negative pairs: a balanced minibatch."""
    return [
        sample_pair(dataset, rng, window, positive=(i % 2 == 0), do_augment=do_augment)
        for i in range(n_pairs)
    ]


# -- optimizer ---------------------------------------------------------------


def clip_gradients(params: dict[str, Tensor], clip: float) -> int:
    """Elementwise clip of every gradient into [-clip, clip]; returns how
    many entries were actually clipped."""
    events = 0
    for p in params.values():
        if p.grad is None:
            continue
        events += int(np.count_nonzero(np.abs(p.grad) > clip))
        np.clip(p.grad, -clip, clip, out=p.grad)
    return events


def rmsprop_step(
    params: dict[str, Tensor],
    acc: dict[str, np.ndarray],
    lr: float,
    decay: float,
    eps: float,
) -> int:
    """p -= lr * g / sqrt(acc + eps) with acc <- decay*acc + (1-decay)*g^2.

    Parameter blocks with a non-finite gradient are skipped (and counted)
    rather than poisoning the accumulator.
    """
    skipped = 0
    for name, p in params.items():
        if not p.requires_grad or p.grad is None:
            continue
        g = p.grad
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient for %s; update skipped", name)
            skipped += 1
            continue
        a = acc.get(name)
        if a is None:
            a = np.zeros_like(p.data)
        a = decay * a + (1.0 - decay) * (g * g)
        acc[name] = a
        p.data = p.data - lr * g / np.sqrt(a + eps)
    return skipped


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(
    path,
    cfg: RunConfig,
    params: dict[str, Tensor],
    acc: dict[str, np.ndarray],
    epoch: int,
    rng: np.random.Generator,
) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    tensors: dict[str, list[int]] = {}
    for name, p in params.items():
        save_tensor(path / f"{name}.stns", p.data)
        tensors[name] = list(p.shape)
    for name, a in acc.items():
        save_tensor(path / f"opt.{name}.stns", a)
    manifest = {
        "config": cfg.to_mapping(),
        "config_hash": cfg.config_hash(),
        "epoch": epoch,
        "rng_state": rng.bit_generator.state,
        "tensors": tensors,
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


def load_checkpoint(path):
    """Returns (cfg, params, acc, epoch, rng) rebuilt from a checkpoint dir."""
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    cfg = RunConfig.from_mapping(manifest["config"], source=str(manifest_path))
    params: dict[str, Tensor] = {}
    for name, shape in manifest["tensors"].items():
        arr = load_tensor(path / f"{name}.stns")
        if list(arr.shape) != list(shape):
            raise ValueError(
                f"{path}: tensor {name} is {arr.shape}, manifest says {shape}"
            )
        params[name] = Tensor(arr, requires_grad=True, dtype=cfg.model.dtype)
    if cfg.train.freeze_encoder:
        for name in params:
            if name.startswith("encoder."):
                params[name].requires_grad = False
    acc: dict[str, np.ndarray] = {}
    for name in manifest["tensors"]:
        opt_file = path / f"opt.{name}.stns"
        if opt_file.is_file():
            acc[name] = load_tensor(opt_file).astype(cfg.model.dtype)
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    return cfg, params, acc, int(manifest["epoch"]), rng


def latest_checkpoint(out_dir) -> Path | None:
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        return None
    ckpts = sorted(out_dir.glob("ckpt_*"))
    return ckpts[-1] if ckpts else None


# -- the loop ----------------------------------------------------------------


@dataclass
class TrainResult:
    loss_rows: list[tuple[int, float, int]]
    checkpoint: Path | None
    params: dict[str, Tensor]
    model: SiameseModel
    skipped_updates: int = 0


def _pair_step(model: SiameseModel, sample: PairSample, lam: float,
               dropout: float, drop_seed: int) -> tuple[float, int]:
    """Forward + backward for one pair; gradients land in model.params."""
    rng = np.random.default_rng(drop_seed)
    result = model.pair(
        sample.frames_a, sample.frames_b,
        train=True, rng=rng, dropout=dropout,
    )
    loss, clamped = pair_loss(result, sample.label, lam)
    loss.backward()
    return float(loss.data), clamped


def _worker_pair(payload):
    """Process-pool task: rebuild the model, run one pair, ship gradients back."""
    (cfg_map, arrays, frozen, sample, lam, dropout, drop_seed) = payload
    cfg = RunConfig.from_mapping(cfg_map)
    params = {
        name: Tensor(arr, requires_grad=name not in frozen, dtype=cfg.model.dtype)
        for name, arr in arrays.items()
    }
    model = SiameseModel(cfg.model, params)
    loss, clamped = _pair_step(model, sample, lam, dropout, drop_seed)
    grads = {
        name: p.grad for name, p in params.items()
        if p.requires_grad and p.grad is not None
    }
    return loss, clamped, grads


def _dump_nan_batch(out_dir: Path, epoch: int, batch: list[PairSample]) -> Path:
    dump = out_dir / f"nan_batch_epoch{epoch:05d}"
    dump.mkdir(parents=True, exist_ok=True)
    lines = [f"epoch = {epoch}"]
    for i, s in enumerate(batch):
        save_tensor(dump / f"pair{i:02d}_a.stns", s.frames_a)
        save_tensor(dump / f"pair{i:02d}_b.stns", s.frames_b)
        lines.append(f"pair = {i} {s.label} {s.identity_a} {s.identity_b}")
    (dump / "batch.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return dump


def train(
    dataset: Dataset,
    cfg: RunConfig,
    out_dir,
    resume: bool = False,
    workers: int = 1,
) -> TrainResult:
    """Run the training loop; returns the loss log and the final model.

    With resume=True the latest checkpoint under out_dir supplies the
    parameters, optimizer state and sampler state, and the loss stream
    continues exactly as if the run had never stopped.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dataset.identities() and (
        dataset.get(dataset.identities()[0], dataset.views(dataset.identities()[0])[0]).shape[1:3]
        != (cfg.model.frame_h, cfg.model.frame_w)
    ):
        got = dataset.get(dataset.identities()[0], dataset.views(dataset.identities()[0])[0]).shape
        raise ConfigError(
            f"dataset frames are {got[1]}x{got[2]}, config wants "
            f"{cfg.model.frame_h}x{cfg.model.frame_w}"
        )
    tr = cfg.train
    start_epoch = 0
    loss_rows: list[tuple[int, float, int]] = []
    if resume:
        ckpt = latest_checkpoint(out_dir)
        if ckpt is None:
            raise FileNotFoundError(f"no checkpoint to resume under {out_dir}")
        prev_cfg, params, acc, start_epoch, rng = load_checkpoint(ckpt)
        if prev_cfg.config_hash() != cfg.config_hash():
            raise ConfigError(
                f"checkpoint config hash {prev_cfg.config_hash()[:12]} does not "
                f"match the requested config {cfg.config_hash()[:12]}"
            )
        loss_rows = _read_loss_log(out_dir / "loss_log.csv", start_epoch)
    else:
        rng = np.random.default_rng(tr.seed)
        params = init_params(cfg, rng)
        acc = {}
    model = SiameseModel(cfg.model, params)
    frozen = frozenset(n for n, p in params.items() if not p.requires_grad)
    pool = None
    if workers > 1:
        pool = get_context("fork").Pool(processes=workers)
    skipped_total = 0
    checkpoint: Path | None = latest_checkpoint(out_dir) if resume else None
    try:
        for epoch in range(start_epoch + 1, tr.epochs + 1):
            batch = sample_batch(
                dataset, rng, tr.window, tr.batch_pairs, do_augment=tr.augment
            )
            drop_seeds = [int(s) for s in rng.integers(0, 2**62, size=tr.batch_pairs)]
            zero_grad(params.values())
            total_loss = 0.0
            clamp_events = 0
            if pool is None:
                for sample, seed in zip(batch, drop_seeds):
                    loss, clamped = _pair_step(model, sample, tr.lam, tr.dropout, seed)
                    total_loss += loss
                    clamp_events += clamped
            else:
                arrays = {name: p.data for name, p in params.items()}
                payloads = [
                    (cfg.to_mapping(), arrays, frozen, sample, tr.lam, tr.dropout, seed)
                    for sample, seed in zip(batch, drop_seeds)
                ]
                for loss, clamped, grads in pool.map(_worker_pair, payloads, chunksize=1):
                    total_loss += loss
                    clamp_events += clamped
                    for name, g in grads.items():
                        p = params[name]
                        if p.grad is None:
                            p.grad = np.zeros_like(p.data)
                        p.grad += g
            if not np.isfinite(total_loss):
                dump = _dump_nan_batch(out_dir, epoch, batch)
                raise NanLossError(
                    f"non-finite loss at epoch {epoch}; batch dumped to {dump}", dump
                )
            clip_events = clip_gradients(params, tr.clip)
            skipped_total += rmsprop_step(params, acc, tr.lr, tr.rms_decay, tr.rms_eps)
            loss_rows.append((epoch, total_loss / tr.batch_pairs, clip_events))
            if epoch % tr.checkpoint_every == 0 or epoch == tr.epochs:
                checkpoint = save_checkpoint(
                    out_dir / f"ckpt_{epoch:05d}", cfg, params, acc, epoch, rng
                )
                _write_loss_log(out_dir / "loss_log.csv", loss_rows)
    finally:
        if pool is not None:
            pool.close()
            pool.join()
    _write_loss_log(out_dir / "loss_log.csv", loss_rows)
    return TrainResult(
        loss_rows=loss_rows,
        checkpoint=checkpoint,
        params=params,
        model=model,
        skipped_updates=skipped_total,
    )


def _write_loss_log(path: Path, rows: list[tuple[int, float, int]]) -> None:
    lines = ["epoch,mean_loss,clip_events"]
    lines += [f"{e},{repr(l)},{c}" for e, l, c in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_loss_log(path: Path, up_to_epoch: int) -> list[tuple[int, float, int]]:
    if not path.is_file():
        return []
    rows: list[tuple[int, float, int]] = []
    for line in path.read_text(encoding="utf-8").splitlines()[1:]:
        e, l, c = line.split(",")
        if int(e) <= up_to_epoch:
            rows.append((int(e), float(l), int(c)))
    return rows
