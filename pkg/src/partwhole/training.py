"""Assembly losses, the min-of-N objective and the AdamW training loop.

Loss functions work on padded batches: translations ``(B, N, 3)``,
quaternions ``(B, N, 4)`` and a part mask ``(B, N)``; each returns one value
per shape, shape ``(B,)``. Unbatched inputs (no leading B) give a scalar.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .data import AssemblyShape
from .model import AssemblyModel, AssemblyPrediction, ModelConfig, ShapeBatch, make_batch, quaternion_to_matrix

LOG_COLUMNS = ("epoch", "mean_loss", "L_t", "L_r", "L_s", "wall_ms")
_CHUNK = 1 << 23   # distance-matrix entries per block


class NumericError(FloatingPointError):
    """Non-finite loss during training."""


@dataclass(frozen=True)
class LossWeights:
    lambda_t: float = 1.0
    lambda_r: float = 10.0
    lambda_s: float = 1.0

    def __post_init__(self):
        if min(self.lambda_t, self.lambda_r, self.lambda_s) < 0:
            raise ValueError(f"loss weights must be non-negative: {self}")


@dataclass
class TrainConfig:
    mon_samples: int = 5
    batch_size: int = 8
    epochs: int = 300
    lr: float = 1e-4
    weight_decay: float = 0.01
    seed: int = 0
    checkpoint_every: int = 0
    points_per_part: int = 1000
    lambda_t: float = 1.0
    lambda_r: float = 10.0
    lambda_s: float = 1.0

    def __post_init__(self):
        if int(self.mon_samples) < 1:
            raise ValueError(f"mon_samples must be >= 1, got {self.mon_samples}")
        if int(self.batch_size) < 1 or int(self.epochs) < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        self.weights  # validates

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_t, self.lambda_r, self.lambda_s)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown train config keys {sorted(unknown)}")
        return cls(**data)


# -- differentiable Chamfer -------------------------------------------------------
def _nn_min(x: np.ndarray, y: np.ndarray, ym: np.ndarray | None) -> np.ndarray:
    """Index into y of each x point's nearest valid neighbour: (R, n)."""
    r, n, _ = x.shape
    m = y.shape[1]
    out = np.empty((r, n), dtype=np.int64)
    step = max(1, _CHUNK // max(1, n * m))
    for s in range(0, r, step):
        xs, ys = x[s:s + step], y[s:s + step]
        d = (np.einsum("rnk,rnk->rn", xs, xs)[:, :, None] + np.einsum("rmk,rmk->rm", ys, ys)[:, None, :]
             - 2.0 * xs @ np.swapaxes(ys, 1, 2))
        if ym is not None:
            d = np.where(ym[s:s + step, None, :], d, np.inf)
        out[s:s + step] = d.argmin(axis=2)
    return out


def chamfer(x, y, x_mask: np.ndarray | None = None, y_mask: np.ndarray | None = None) -> Tensor:
    """Per-row Chamfer distance between point sets ``(R, n, 3)`` and ``(R, m, 3)``.

    ``mean_i min_j |x_i - y_j|^2 + mean_j min_i |x_i - y_j|^2`` over valid points.
    Nearest neighbours are found without gradient; the gradient then flows
    through the exact squared distances of the matched pairs.
    """
    x, y = ag.as_tensor(x), ag.as_tensor(y)
    if x.ndim != 3 or y.ndim != 3 or x.shape[0] != y.shape[0] or x.shape[2] != 3 or y.shape[2] != 3:
        raise ag.ShapeError(f"chamfer: expected (R, n, 3) and (R, m, 3), got {x.shape} and {y.shape}")
    r, n, _ = x.shape
    m = y.shape[1]
    xm = np.ones((r, n), bool) if x_mask is None else np.asarray(x_mask, bool)
    ymk = np.ones((r, m), bool) if y_mask is None else np.asarray(y_mask, bool)
    nx, ny = xm.sum(axis=1), ymk.sum(axis=1)
    if np.any(nx == 0) or np.any(ny == 0):
        raise ValueError("chamfer: empty point set")
    xd, yd = x.data.astype(np.float64), y.data.astype(np.float64)
    ix = _nn_min(xd, yd, None if y_mask is None else ymk)      # x -> y
    iy = _nn_min(yd, xd, None if x_mask is None else xm)      # y -> x
    rows = np.arange(r)[:, None]
    dx = xd - yd[rows, ix]                                    # (R, n, 3)
    dy = yd - xd[rows, iy]                                    # (R, m, 3)
    wx = xm / nx[:, None]
    wy = ymk / ny[:, None]
    value = (wx * np.sum(dx * dx, axis=2)).sum(axis=1) + (wy * np.sum(dy * dy, axis=2)).sum(axis=1)

    def backward(g):
        gx = 2.0 * (g[:, None] * wx)[..., None] * dx
        gy = 2.0 * (g[:, None] * wy)[..., None] * dy
        # scatter the partner terms back onto the matched points
        flat_x = (rows * n + iy).reshape(-1)
        flat_y = (rows * m + ix).reshape(-1)
        gx_total = gx.reshape(-1, 3).copy()
        gy_total = gy.reshape(-1, 3).copy()
        for k in range(3):
            gx_total[:, k] -= np.bincount(flat_x, gy[..., k].reshape(-1), minlength=r * n)
            gy_total[:, k] -= np.bincount(flat_y, gx[..., k].reshape(-1), minlength=r * m)
        return (gx_total.reshape(r, n, 3).astype(x.dtype), gy_total.reshape(r, m, 3).astype(y.dtype))

    return ag.custom_op(value.astype(x.dtype), (x, y), backward, "chamfer")


# -- losses -------------------------------------------------------------------------
def _batched(*arrays):
    single = ag.as_tensor(arrays[0]).ndim == 2

    def lift(a):
        if a is None or not single:
            return a
        return a.reshape(1, *a.shape) if isinstance(a, Tensor) else a[None]

    return single, [lift(a) for a in arrays]


def _check_len(op: str, a, b) -> None:
    if tuple(a.shape[:-1]) != tuple(b.shape[:-1]):
        raise ag.ShapeError(f"{op}: prediction covers {a.shape[:-1]} parts but ground truth {b.shape[:-1]}")


def _finish(single: bool, value: Tensor) -> Tensor:
    return value.reshape(()) if single else value


def translation_loss(pred_t, gt_t, mask: np.ndarray | None = None) -> Tensor:
    """Sum over real parts of the squared translation error."""
    pred_t = ag.as_tensor(pred_t)
    gt_t = np.asarray(getattr(gt_t, "data", gt_t))
    _check_len("translation_loss", pred_t, gt_t)
    single, (pred_t, gt_t, mask) = _batched(pred_t, gt_t, None if mask is None else np.asarray(mask))
    if mask is None:
        mask = np.ones(pred_t.shape[:2], bool)
    diff = pred_t - Tensor(gt_t.astype(pred_t.dtype))
    per_part = (diff * diff).sum(axis=-1) * Tensor(mask.astype(pred_t.dtype))
    return _finish(single, per_part.sum(axis=-1))


def _rotate(points, q) -> Tensor:
    """Rotate (B, N, d, 3) points by (B, N, 4) quaternions."""
    return ag.as_tensor(points) @ quaternion_to_matrix(ag.as_tensor(q)).transpose()


def rotation_loss(pred_q, gt_q, parts, mask: np.ndarray | None = None) -> Tensor:
    """Sum over real parts of the Chamfer distance between the part rotated by each quaternion."""
    pred_q = ag.as_tensor(pred_q)
    gt_q = np.asarray(getattr(gt_q, "data", gt_q))
    parts = np.asarray(parts)
    _check_len("rotation_loss", pred_q, gt_q)
    if parts.shape[:-2] != pred_q.shape[:-1]:
        raise ag.ShapeError(f"rotation_loss: {pred_q.shape[:-1]} quaternions for parts {parts.shape[:-2]}")
    single, (pred_q, gt_q, parts, mask) = _batched(pred_q, gt_q, parts, None if mask is None else np.asarray(mask))
    if mask is None:
        mask = np.ones(pred_q.shape[:2], bool)
    b, n, d, _ = parts.shape
    pts = parts.astype(pred_q.dtype)
    with ag.no_grad():
        target = _rotate(pts, gt_q.astype(pred_q.dtype)).data
    real = np.flatnonzero(mask.reshape(-1))
    pred = _rotate(pts, pred_q).reshape(b * n, d, 3)[real]
    per_part = chamfer(pred, Tensor(target.reshape(b * n, d, 3)[real]))
    scatter = np.zeros((b, len(real)), dtype=pred_q.dtype)
    scatter[real // n, np.arange(len(real))] = 1.0
    return _finish(single, (Tensor(scatter) @ per_part.reshape(len(real), 1)).reshape(b))


def place(parts, t, q) -> Tensor:
    """Posed parts ``R(q) p + t``: (B, N, d, 3)."""
    t = ag.as_tensor(t)
    return _rotate(parts, q) + t.reshape(*t.shape[:-1], 1, 3)


def shape_loss(pred_t, pred_q, gt_t, gt_q, parts, mask: np.ndarray | None = None) -> Tensor:
    """Chamfer distance between the predicted and ground-truth assemblies of real parts."""
    pred_t, pred_q = ag.as_tensor(pred_t), ag.as_tensor(pred_q)
    gt_t = np.asarray(getattr(gt_t, "data", gt_t))
    gt_q = np.asarray(getattr(gt_q, "data", gt_q))
    parts = np.asarray(parts)
    _check_len("shape_loss", pred_t, gt_t)
    _check_len("shape_loss", pred_q, gt_q)
    if parts.size == 0:
        raise ValueError("shape_loss: empty assembly")
    single, (pred_t, pred_q, gt_t, gt_q, parts, mask) = _batched(
        pred_t, pred_q, gt_t, gt_q, parts, None if mask is None else np.asarray(mask))
    if mask is None:
        mask = np.ones(pred_t.shape[:2], bool)
    b, n, d, _ = parts.shape
    pts = parts.astype(pred_t.dtype)
    with ag.no_grad():
        target = place(pts, gt_t.astype(pred_t.dtype), gt_q.astype(pred_t.dtype)).data.reshape(b, n * d, 3)
    pred = place(pts, pred_t, pred_q).reshape(b, n * d, 3)
    point_mask = np.repeat(mask, d, axis=1)
    full = bool(mask.all())
    return _finish(single, chamfer(pred, Tensor(target), None if full else point_mask, None if full else point_mask))


@dataclass
class LossTerms:
    total: Tensor
    l_t: Tensor
    l_r: Tensor
    l_s: Tensor


def total_loss(pred_t, pred_q, gt_t, gt_q, parts, mask=None, weights: LossWeights = LossWeights()) -> LossTerms:
    """Weighted sum of translation, rotation and shape losses, per shape."""
    l_t = translation_loss(pred_t, gt_t, mask)
    l_r = rotation_loss(pred_q, gt_q, parts, mask)
    l_s = shape_loss(pred_t, pred_q, gt_t, gt_q, parts, mask)
    total = weights.lambda_t * l_t + weights.lambda_r * l_r + weights.lambda_s * l_s
    return LossTerms(total, l_t, l_r, l_s)


# -- batches and MoN -------------------------------------------------------------------
@dataclass
class TargetBatch:
    translations: np.ndarray    # (B, N, 3)
    quaternions: np.ndarray     # (B, N, 4), identity for padding
    shape_ids: list[str]

    def repeat(self, k: int) -> "TargetBatch":
        idx = np.repeat(np.arange(len(self.shape_ids)), k)
        return TargetBatch(self.translations[idx], self.quaternions[idx], [self.shape_ids[i] for i in idx])


def batch_from_shapes(shapes: Sequence[AssemblyShape], config: ModelConfig, dtype=np.float32):
    batch = make_batch([s.points for s in shapes], [s.assignment for s in shapes], config, dtype=dtype)
    b, n = batch.part_mask.shape
    t = np.zeros((b, n, 3))
    q = np.zeros((b, n, 4))
    q[..., 0] = 1.0
    for i, s in enumerate(shapes):
        t[i, :s.num_parts] = s.gt_translations
        q[i, :s.num_parts] = s.gt_quaternions
    return batch, TargetBatch(t, q, [s.shape_id for s in shapes])


@dataclass
class MonResult:
    loss: Tensor                        # scalar, mean over shapes of the per-shape minimum
    terms: LossTerms                    # per-sample terms, (B * K,)
    best_index: np.ndarray              # (B,) winning sample per shape
    per_sample: np.ndarray              # (B, K)
    predictions: list[AssemblyPrediction] = field(default_factory=list)


def mon_loss(model: AssemblyModel, batch: ShapeBatch, targets: TargetBatch, num_samples: int = 5,
             rng: np.random.Generator | None = None, weights: LossWeights = LossWeights(),
             noise: np.ndarray | None = None) -> MonResult:
    """Min over ``num_samples`` noise draws of the total loss, averaged over shapes.

    Only the winning draw of each shape receives gradient.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    b = batch.size
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng()
        noise = rng.standard_normal((b * num_samples, model.config.noise_dim))
    out = model(batch, noise)
    rep = batch.repeat(num_samples) if num_samples > 1 else batch
    tgt = targets.repeat(num_samples) if num_samples > 1 else targets
    terms = total_loss(out.part_t, out.part_q, tgt.translations, tgt.quaternions, rep.points, rep.part_mask, weights)
    per = terms.total.reshape(b, num_samples)
    best = -(-per).max(axis=1)
    result = MonResult(best.mean(), terms, per.data.argmin(axis=1), per.data.copy())
    preds = model.predictions(out, batch)
    result.predictions = [preds[i * num_samples + j] for i, j in enumerate(result.best_index)]
    return result


# -- training loop -------------------------------------------------------------------
@dataclass
class TrainResult:
    history: list[dict]
    model: AssemblyModel
    optimizer: ag.AdamW


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def save_checkpoint(path, model: AssemblyModel, optimizer: ag.AdamW, train_config: TrainConfig,
                    epoch: int, rng: np.random.Generator) -> None:
    """Parameters in HAPW at ``path``, AdamW moments at ``path.optim``, metadata at ``path.json``."""
    path = Path(path)
    ag.save_parameters(path, model.state_dict())
    moments = {f"m/{k}": v for k, v in optimizer.state.exp_avg.items()}
    moments.update({f"v/{k}": v for k, v in optimizer.state.exp_avg_sq.items()})
    ag.save_parameters(str(path) + ".optim", moments)
    meta = {"model_config": asdict(model.config), "train_config": asdict(train_config), "epoch": epoch,
            "optimizer_step": optimizer.state.step, "rng_state": _rng_state(rng)}
    Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_model(path) -> AssemblyModel:
    """Rebuild a model from a checkpoint and its ``.json`` sidecar."""
    meta_path = Path(str(path) + ".json")
    if not meta_path.exists():
        raise ag.CheckpointError(f"{path}: missing metadata file {meta_path.name}")
    meta = json.loads(meta_path.read_text())
    model = AssemblyModel(ModelConfig.from_dict(meta["model_config"]))
    model.load_state_dict(ag.load_parameters(path))
    return model


def _resume(path, model: AssemblyModel, optimizer: ag.AdamW, rng: np.random.Generator) -> int:
    meta = json.loads(Path(str(path) + ".json").read_text())
    model.load_state_dict(ag.load_parameters(path))
    moments = ag.load_parameters(str(path) + ".optim")
    optimizer.state.step = int(meta["optimizer_step"])
    optimizer.state.exp_avg = {k[2:]: v for k, v in moments.items() if k.startswith("m/")}
    optimizer.state.exp_avg_sq = {k[2:]: v for k, v in moments.items() if k.startswith("v/")}
    rng.bit_generator.state = meta["rng_state"]
    return int(meta["epoch"])


def train(model: AssemblyModel, shapes: Sequence[AssemblyShape], config: TrainConfig = TrainConfig(),
          log_path=None, checkpoint_path=None, resume_from=None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Seeded mini-batch AdamW on the MoN objective.

    One generator, seeded from ``config.seed``, drives both the shuffle and
    the noise, so a run is reproducible and can be resumed exactly.
    """
    if len(shapes) == 0:
        raise ValueError("train: dataset is empty")
    rng = np.random.default_rng(config.seed)
    optimizer = ag.AdamW(model.named_parameters(), lr=config.lr, weight_decay=config.weight_decay)
    start = _resume(resume_from, model, optimizer, rng) if resume_from else 0
    weights = config.weights
    history = []
    log = None
    if log_path is not None:
        mode = "a" if resume_from and Path(log_path).exists() else "w"
        log = open(log_path, mode, newline="")
        writer = csv.writer(log)
        if mode == "w":
            writer.writerow(LOG_COLUMNS)
    try:
        for epoch in range(start + 1, config.epochs + 1):
            tic = time.perf_counter()
            order = rng.permutation(len(shapes))
            sums = np.zeros(4)
            for bi, s in enumerate(range(0, len(shapes), config.batch_size)):
                members = [shapes[i] for i in order[s:s + config.batch_size]]
                batch, targets = batch_from_shapes(members, model.config, model.dtype)
                result = mon_loss(model, batch, targets, config.mon_samples, rng, weights)
                value = float(result.loss.item())
                if not math.isfinite(value):
                    bad = [targets.shape_ids[i] for i in range(batch.size)
                           if not np.all(np.isfinite(result.per_sample[i]))]
                    raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}, shapes {bad or targets.shape_ids}")
                optimizer.zero_grad()
                result.loss.backward()
                optimizer.step()
                rows = np.arange(batch.size) * config.mon_samples + result.best_index
                sums += len(members) * np.array(
                    [value] + [float(t.data[rows].mean()) for t in (result.terms.l_t, result.terms.l_r, result.terms.l_s)])
            means = sums / len(shapes)
            row = {"epoch": epoch, "mean_loss": means[0], "L_t": means[1], "L_r": means[2], "L_s": means[3],
                   "wall_ms": (time.perf_counter() - tic) * 1000.0}
            history.append(row)
            if log is not None:
                writer.writerow([epoch] + [f"{row[c]:.9g}" for c in LOG_COLUMNS[1:-1]] + [f"{row['wall_ms']:.1f}"])
                log.flush()
            if on_epoch is not None:
                on_epoch(row)
            if checkpoint_path and config.checkpoint_every and epoch % config.checkpoint_every == 0:
                save_checkpoint(checkpoint_path, model, optimizer, config, epoch, rng)
    finally:
        if log is not None:
            log.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, model, optimizer, config, max(start, config.epochs), rng)
    return TrainResult(history, model, optimizer)


def read_loss_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
