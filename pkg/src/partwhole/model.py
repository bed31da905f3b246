"""Two-stage assembly network.

A super-part encoder predicts latent poses for groups of equivalent parts.
The parts are moved by those poses, re-encoded, fused with the super-part
features by cross-level attention, and refined by pose-conditioned
within-level attention before a head regresses every part pose.

All computation is batched: a batch holds B shapes padded to N parts and M
super-parts; masks keep padding out of every softmax.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import MLP, Linear, Module, Tensor, TransformerLayer
from .geometry import Pose6DoF
from .hierarchy import SuperPartAssignment


@dataclass
class ModelConfig:
    feat_dim: int = 256
    num_heads: int = 8
    super_encoder_layers: int = 2
    part_encoder_layers: int = 6
    instance_enc_dim: int = 40
    noise_dim: int = 80
    head_hidden: tuple = (256, 256, 1024)
    pointnet_hidden: tuple = (64, 128)
    ff_dim: int = 512
    max_parts: int = 32
    use_super_encoder: bool = True
    seed: int = 0
    instance_seed: int = 7

    def __post_init__(self):
        self.head_hidden = tuple(int(v) for v in self.head_hidden)
        self.pointnet_hidden = tuple(int(v) for v in self.pointnet_hidden)
        dims = [self.feat_dim, self.num_heads, self.instance_enc_dim, self.noise_dim, self.ff_dim, self.max_parts,
                *self.head_hidden, *self.pointnet_hidden]
        if any(int(d) <= 0 for d in dims):
            raise ValueError(f"all model dimensions must be positive: {self}")
        if self.feat_dim % self.num_heads:
            raise ValueError(f"feat_dim {self.feat_dim} not divisible by num_heads {self.num_heads}")
        if (self.feat_dim + self.instance_enc_dim) % self.num_heads:
            raise ValueError(f"feat_dim + instance_enc_dim = {self.feat_dim + self.instance_enc_dim} "
                             f"not divisible by num_heads {self.num_heads}")

    @property
    def part_dim(self) -> int:
        return self.feat_dim + self.instance_enc_dim

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise KeyError(f"unknown model config keys {sorted(unknown)}")
        return cls(**data)


@dataclass
class AssemblyPrediction:
    part_poses: list[Pose6DoF]
    super_poses: list[Pose6DoF]
    assignment: SuperPartAssignment

    def translations(self) -> np.ndarray:
        return np.array([p.translation for p in self.part_poses])

    def quaternions(self) -> np.ndarray:
        return np.array([p.quaternion for p in self.part_poses])


@dataclass
class ShapeBatch:
    """Padded numpy view of B shapes; constants for the tape."""

    points: np.ndarray          # (B, N, d, 3) canonical part clouds, zeros for padding
    part_mask: np.ndarray       # (B, N) bool
    membership: np.ndarray      # (B, M, N) 0/1, super-part s contains part n
    super_mask: np.ndarray      # (B, M) bool
    instance: np.ndarray        # (B, N, E) frozen instance codes
    num_parts: list[int]
    assignments: list[SuperPartAssignment]

    @property
    def size(self) -> int:
        return self.points.shape[0]

    def repeat(self, k: int) -> "ShapeBatch":
        """Each shape repeated k times in place (row b*k + j)."""
        idx = np.repeat(np.arange(self.size), k)
        return ShapeBatch(self.points[idx], self.part_mask[idx], self.membership[idx], self.super_mask[idx],
                          self.instance[idx], [self.num_parts[i] for i in idx],
                          [self.assignments[i] for i in idx])


def instance_table(config: ModelConfig) -> np.ndarray:
    """Frozen Gaussian code per within-group rank, shared by every shape."""
    rng = np.random.default_rng(config.instance_seed)
    return rng.standard_normal((config.max_parts, config.instance_enc_dim))


def instance_codes(assignment: SuperPartAssignment, config: ModelConfig) -> np.ndarray:
    return instance_table(config)[assignment.ranks()]


def make_batch(parts: Sequence[np.ndarray], assignments: Sequence[SuperPartAssignment], config: ModelConfig,
               instance: Sequence[np.ndarray] | None = None, dtype=np.float32) -> ShapeBatch:
    """Pad per-shape canonical parts ``(N_b, d, 3)`` into one batch."""
    counts = [len(p) for p in parts]
    if max(counts) > config.max_parts:
        raise ValueError(f"shape has {max(counts)} parts, model supports at most max_parts = {config.max_parts}")
    b = len(parts)
    n = max(counts)
    m = max(a.num_supers for a in assignments)
    d = parts[0].shape[1]
    points = np.zeros((b, n, d, 3), dtype=dtype)
    part_mask = np.zeros((b, n), dtype=bool)
    membership = np.zeros((b, m, n), dtype=dtype)
    super_mask = np.zeros((b, m), dtype=bool)
    codes = np.zeros((b, n, config.instance_enc_dim), dtype=dtype)
    for i, (p, a) in enumerate(zip(parts, assignments)):
        if a.num_parts != len(p):
            raise ValueError(f"assignment covers {a.num_parts} parts but shape has {len(p)}")
        if p.shape[1] != d:
            raise ValueError("all parts in a batch need the same point count")
        points[i, :len(p)] = p
        part_mask[i, :len(p)] = True
        membership[i, :a.num_supers, :len(p)] = a.membership_matrix()
        super_mask[i, :a.num_supers] = True
        codes[i, :len(p)] = instance[i] if instance is not None else instance_codes(a, config)
    return ShapeBatch(points, part_mask, membership, super_mask, codes, counts, list(assignments))


# -- differentiable pose helpers -----------------------------------------------
def quaternion_to_matrix(q: Tensor) -> Tensor:
    """(..., 4) unit quaternions -> (..., 3, 3) rotation matrices, on the tape."""
    r0, r1, r2, r3 = (q[..., i:i + 1] for i in range(4))
    entries = [
        1 - 2 * r2 * r2 - 2 * r3 * r3, 2 * r1 * r2 - 2 * r0 * r3, 2 * r1 * r3 + 2 * r0 * r2,
        2 * r1 * r2 + 2 * r0 * r3, 1 - 2 * r1 * r1 - 2 * r3 * r3, 2 * r2 * r3 - 2 * r0 * r1,
        2 * r1 * r3 - 2 * r0 * r2, 2 * r2 * r3 + 2 * r0 * r1, 1 - 2 * r1 * r1 - 2 * r2 * r2,
    ]
    return ag.concat(entries, axis=-1).reshape(*q.shape[:-1], 3, 3)


class PoseHead(Module):
    """MLP to 7 numbers: tanh translation (3) + unit quaternion (4).

    A raw quaternion of zero norm cannot be normalised; it is replaced by the
    identity rotation and counted in ``degenerate_count``.
    """

    def __init__(self, in_dim: int, hidden, rng, dtype=np.float32):
        self.mlp = MLP([in_dim, *hidden, 7], rng, dtype)
        self.degenerate_count = 0

    def forward(self, x: Tensor, mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        raw = self.mlp(x)
        t = ag.tanh(raw[..., :3])
        q = raw[..., 3:]
        n2 = (q * q).sum(axis=-1, keepdims=True)
        bad = n2.data <= 1e-24
        if bad.any():
            counted = bad[..., 0] if mask is None else bad[..., 0] & mask
            self.degenerate_count += int(counted.sum())
            keep = (~bad).astype(q.dtype)
            ident = np.zeros(q.shape, dtype=q.dtype)
            ident[..., 0] = 1.0
            q = q * keep + ident * (1 - keep)
            n2 = (q * q).sum(axis=-1, keepdims=True)
        return t, q / ag.sqrt(n2)


class PointNet(Module):
    """Shared per-point MLP (ReLU after every layer) followed by max-pool over points."""

    def __init__(self, dims, rng, dtype=np.float32):
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, points) -> Tensor:
        points = ag.as_tensor(points)
        r, d, _ = points.shape
        x = points.reshape(r * d, 3)
        for layer in self.layers:
            x = ag.relu(layer(x))
        return x.reshape(r, d, x.shape[-1]).max(axis=1)


@dataclass
class ModelOutput:
    part_t: Tensor                  # (B, N, 3)
    part_q: Tensor                  # (B, N, 4)
    super_t: Tensor | None          # (B, M, 3)
    super_q: Tensor | None          # (B, M, 4)
    attention: dict = field(default_factory=dict)


class AssemblyModel(Module):
    def __init__(self, config: ModelConfig | None = None, dtype=np.float32):
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(config.seed)
        f, h, e = config.feat_dim, config.num_heads, config.noise_dim
        pn_dims = (3, *config.pointnet_hidden, f)
        if config.use_super_encoder:
            self.super_pointnet = PointNet(pn_dims, rng, dtype)
            self.super_input = Linear(f + e, f, rng, dtype)
            self.super_layers = [TransformerLayer(f, h, rng, config.ff_dim, dtype=dtype)
                                 for _ in range(config.super_encoder_layers)]
            self.super_head = PoseHead(f, config.head_hidden, rng, dtype)
            self.cross_layer = TransformerLayer(f, h, rng, config.ff_dim, dtype=dtype)
        self.part_pointnet = PointNet(pn_dims, rng, dtype)
        self.part_input = Linear(f + e, f, rng, dtype)
        self.part_layers = [TransformerLayer(config.part_dim, h, rng, config.ff_dim, qk_extra=7, dtype=dtype)
                            for _ in range(config.part_encoder_layers)]
        self.part_head = PoseHead(config.part_dim, config.head_hidden, rng, dtype)

    @property
    def dtype(self):
        return self.part_input.weight.dtype

    # -- stages ------------------------------------------------------------
    def encode_parts(self, pointnet: PointNet, points, part_mask: np.ndarray) -> Tensor:
        """PointNet features for real parts, zeros for padded ones: (B, N, F)."""
        b, n = part_mask.shape
        real = np.flatnonzero(part_mask.reshape(-1))
        points = ag.as_tensor(points)
        flat = points.reshape(b * n, *points.shape[2:])
        feats = pointnet(flat[real])
        scatter = np.zeros((b * n, len(real)), dtype=feats.dtype)
        scatter[real, np.arange(len(real))] = 1.0
        return (Tensor(scatter) @ feats).reshape(b, n, feats.shape[-1])

    def super_part_encode(self, part_feats: Tensor, batch: ShapeBatch, noise: Tensor):
        """Mean-pool member features, add noise, self-attend, predict latent poses."""
        counts = batch.membership.sum(axis=2, keepdims=True)
        pool = Tensor(batch.membership / np.where(counts > 0, counts, 1))
        agg = pool @ part_feats
        m = batch.membership.shape[1]
        noise_m = ag.broadcast_to(noise.reshape(noise.shape[0], 1, noise.shape[1]), (noise.shape[0], m, noise.shape[1]))
        super_feats = self.super_input(ag.concat([agg, noise_m], axis=-1))
        h = super_feats
        weights = []
        for layer in self.super_layers:
            h = layer(h, key_mask=batch.super_mask)
            weights.append(layer.attn.last_weights)
        t, q = self.super_head(h, batch.super_mask)
        return super_feats, t, q, weights

    @staticmethod
    def transform_by_latent(points, batch: ShapeBatch, super_t: Tensor, super_q: Tensor) -> Tensor:
        """Move every part by its parent super-part's pose: (B, N, d, 3)."""
        gather = Tensor(np.swapaxes(batch.membership, 1, 2).astype(super_t.dtype))
        b, m = super_q.shape[:2]
        rot = quaternion_to_matrix(super_q).reshape(b, m, 9)
        n = gather.shape[1]
        part_rot = (gather @ rot).reshape(b, n, 3, 3)
        part_t = (gather @ super_t).reshape(b, n, 1, 3)
        return ag.as_tensor(points) @ part_rot.transpose() + part_t

    def forward(self, batch: ShapeBatch, noise) -> ModelOutput:
        """Poses for ``batch`` under ``noise`` of shape (B * k, noise_dim).

        When noise has k rows per shape, every shape is evaluated k times
        (rows ordered shape-major) and the noise-independent first PointNet
        runs once per shape.
        """
        cfg = self.config
        noise = Tensor(np.asarray(noise, dtype=self.dtype))
        if noise.shape[0] % batch.size or noise.shape[1] != cfg.noise_dim:
            raise ValueError(f"noise shape {noise.shape} does not fit batch of {batch.size} and dim {cfg.noise_dim}")
        k = noise.shape[0] // batch.size
        rep = batch.repeat(k) if k > 1 else batch
        points = rep.points.astype(self.dtype)
        attention = {}
        bk, n = rep.part_mask.shape
        if cfg.use_super_encoder:
            feats = self.encode_parts(self.super_pointnet, batch.points.astype(self.dtype), batch.part_mask)
            if k > 1:
                feats = feats[np.repeat(np.arange(batch.size), k)]
            super_feats, super_t, super_q, weights = self.super_part_encode(feats, rep, noise)
            attention["super"] = weights
            moved = self.transform_by_latent(points, rep, super_t, super_q)
        else:
            super_t = super_q = None
            moved = points
        part_feats = self.encode_parts(self.part_pointnet, moved, rep.part_mask)
        noise_n = ag.broadcast_to(noise.reshape(bk, 1, cfg.noise_dim), (bk, n, cfg.noise_dim))
        fused = self.part_input(ag.concat([part_feats, noise_n], axis=-1))
        if cfg.use_super_encoder:
            fused = self.cross_layer(fused, memory=super_feats, key_mask=rep.super_mask)
            attention["cross"] = self.cross_layer.attn.last_weights
            gather = Tensor(np.swapaxes(rep.membership, 1, 2).astype(self.dtype))
            cond = ag.concat([gather @ super_t, gather @ super_q], axis=-1)
        else:
            cond = Tensor(np.zeros((bk, n, 7), dtype=self.dtype))
        h = ag.concat([fused, Tensor(rep.instance.astype(self.dtype))], axis=-1)
        weights = []
        for layer in self.part_layers:
            h = layer(h, key_mask=rep.part_mask, cond=cond)
            weights.append(layer.attn.last_weights)
        attention["within"] = weights
        part_t, part_q = self.part_head(h, rep.part_mask)
        return ModelOutput(part_t, part_q, super_t, super_q, attention)

    def predictions(self, out: ModelOutput, batch: ShapeBatch) -> list[AssemblyPrediction]:
        """Unpad a forward result (rows may be repeats of ``batch``)."""
        k = out.part_t.shape[0] // batch.size
        rep = batch.repeat(k) if k > 1 else batch
        preds = []
        for i in range(out.part_t.shape[0]):
            n = rep.num_parts[i]
            a = rep.assignments[i]
            parts = [Pose6DoF(out.part_t.data[i, j], out.part_q.data[i, j]) for j in range(n)]
            if out.super_t is not None:
                supers = [Pose6DoF(out.super_t.data[i, s], out.super_q.data[i, s]) for s in range(a.num_supers)]
            else:
                supers = [Pose6DoF() for _ in range(a.num_supers)]
            preds.append(AssemblyPrediction(parts, supers, a))
        return preds

    def assemble(self, parts: np.ndarray, assignment: SuperPartAssignment, noise: np.ndarray,
                 instance: np.ndarray | None = None) -> list[AssemblyPrediction]:
        """Predictions for one shape under each noise row."""
        batch = make_batch([parts], [assignment], self.config, None if instance is None else [instance])
        with ag.no_grad():
            out = self(batch, np.atleast_2d(noise))
        return self.predictions(out, batch)
