"""Two branches, one set of weights.

Each branch encodes its frame sequence into feature cubes, walks the
recurrent stack while spatial attention picks where to look, and pools
the top-layer states over time into one vector. Both branches read the
same parameter dict, so the census below counts every weight once. The
similarity head squashes a weighted inner product of the two pooled
vectors through a sigmoid, and the objective adds a coverage penalty
that pushes every grid cell's attention mass, summed over the window,
toward one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import (
    blend,
    collapse,
    init_hidden,
    init_param_shapes,
    spatial_weights,
    uniform_weights,
)
from .config import ModelConfig
from .encoder import encode_sequence, encoder_param_shapes
from .pooling import attention_pool, max_pool, mean_pool, temporal_weights
from .recurrent import gru_param_shapes, stack_step
from .tensor import (
    ShapeError,
    Tensor,
    clamp,
    dropout_mask,
    log,
    matmul,
    sigmoid,
)

__all__ = [
    "param_shapes",
    "BranchResult",
    "PairResult",
    "SiameseModel",
    "similarity",
    "coverage_penalty",
    "pair_loss",
    "CLAMP_EPS",
]

CLAMP_EPS = 1e-7


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every learnable tensor of the model, in canonical order."""
    enc = cfg.encoder_config()
    stack = cfg.stack_config()
    shapes: dict[str, tuple[int, ...]] = {}
    shapes.update(encoder_param_shapes(enc))
    shapes.update(gru_param_shapes(stack))
    shapes.update(init_param_shapes(enc.depth, cfg.init_units, tuple(cfg.channels)))
    top_h, top_w, top_c = stack.hidden_shapes()[-1]
    top_flat = top_h * top_w * top_c
    shapes["attention.w_att"] = (top_flat, enc.n_locations)
    shapes["tpool.w"] = (top_flat,)
    shapes["head.v"] = (top_flat,)
    shapes["head.c"] = ()
    return shapes


@dataclass
class BranchResult:
    """Everything one branch produces for one sequence."""

    pooled: Tensor
    spatial: list[Tensor] = field(default_factory=list)
    alpha: Tensor | None = None
    tops: list[Tensor] = field(default_factory=list)


@dataclass
class PairResult:
    a: BranchResult
    b: BranchResult
    score: Tensor


def similarity(ha: Tensor, hb: Tensor, v: Tensor, c: Tensor) -> Tensor:
    """sigmoid(v . (ha * hb) + c); symmetric in the two inputs."""
    if ha.shape != hb.shape or ha.ndim != 1:
        raise ShapeError(f"pooled vectors must be equal rank-1, got {ha.shape}, {hb.shape}")
    if v.shape != ha.shape:
        raise ShapeError(f"head weight {v.shape} does not match pooled size {ha.shape}")
    return sigmoid(matmul(v, ha * hb) + c)


def coverage_penalty(spatial: list[Tensor]) -> Tensor:
    """sum_i (1 - sum_t m_t[i])^2 over one branch's attention trace."""
    if not spatial:
        raise ValueError("penalty needs at least one attention map")
    total = spatial[0]
    for m in spatial[1:]:
        total = total + m
    dev = 1.0 - total
    return (dev * dev).sum()


class SiameseModel:
    """Configuration plus one shared parameter dict."""

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        expected = param_shapes(cfg)
        missing = sorted(set(expected) - set(params))
        if missing:
            raise ShapeError(f"parameter dict lacks {missing}")
        for name, shape in expected.items():
            if tuple(params[name].shape) != tuple(shape):
                raise ShapeError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )
        self.enc_cfg = cfg.encoder_config()
        self.stack_cfg = cfg.stack_config()

    @property
    def dtype(self):
        return self.params["head.v"].dtype

    def census(self) -> int:
        """Total scalar count; shared tensors are counted exactly once."""
        seen: set[int] = set()
        total = 0
        for p in self.params.values():
            if id(p) not in seen:
                seen.add(id(p))
                total += p.size
        return total

    def branch(
        self,
        frames,
        train: bool = False,
        rng: np.random.Generator | None = None,
        dropout: float = 0.0,
    ) -> BranchResult:
        """Run one sequence through encoder, attention, stack and pooling."""
        cfg = self.cfg
        drop = None
        if train and dropout > 0.0:
            if rng is None:
                raise ValueError("dropout needs an rng")
            dt = self.dtype
            drop = lambda shape: dropout_mask(shape, dropout, rng, dt)
        cubes = encode_sequence(
            Tensor(np.asarray(frames), dtype=self.dtype), self.params, self.enc_cfg
        )
        states = init_hidden(cubes, self.params, self.stack_cfg.hidden_shapes())
        n_loc = self.enc_cfg.n_locations
        spatial: list[Tensor] = []
        tops: list[Tensor] = []
        for t in range(cubes.shape[0]):
            if cfg.mute_attention:
                m = uniform_weights(n_loc, self.dtype)
            else:
                m = spatial_weights(states[-1], self.params["attention.w_att"])
            cube_t = cubes[t]
            if cfg.collapses:
                x = collapse(cube_t, m).reshape(1, 1, -1)
            else:
                x = blend(cube_t, m)
            states, top = stack_step(x, states, self.stack_cfg, self.params, drop)
            spatial.append(m)
            tops.append(top)
        alpha = None
        mode = cfg.pool_mode
        if mode in ("attention", "fisher"):
            # Fisher encoding happens after training, so its training-time
            # surrogate is the learned attention pooling.
            alpha = temporal_weights(tops, self.params["tpool.w"])
            pooled = attention_pool(tops, alpha)
        elif mode == "mean":
            pooled = mean_pool(tops)
        elif mode == "max":
            pooled = max_pool(tops)
        else:  # pragma: no cover - rejected by ModelConfig
            raise ValueError(f"unknown pool_mode {mode!r}")
        return BranchResult(pooled=pooled, spatial=spatial, alpha=alpha, tops=tops)

    def pair(
        self,
        frames_a,
        frames_b,
        train: bool = False,
        rng: np.random.Generator | None = None,
        dropout: float = 0.0,
    ) -> PairResult:
        ra = self.branch(frames_a, train=train, rng=rng, dropout=dropout)
        rb = self.branch(frames_b, train=train, rng=rng, dropout=dropout)
        score = similarity(ra.pooled, rb.pooled, self.params["head.v"], self.params["head.c"])
        return PairResult(a=ra, b=rb, score=score)


def pair_loss(
    result: PairResult, label: int, lam: float
) -> tuple[Tensor, int]:
    """Penalized cross-entropy for one labelled pair.

    label 1 marks a same-identity pair. The score is clamped into
    [CLAMP_EPS, 1 - CLAMP_EPS] before the log; the returned int reports
    whether the clamp actually bit (a saturation event worth logging).
    Both branches contribute their coverage penalty, scaled by lam.
    """
    s = result.score
    s_c = clamp(s, CLAMP_EPS, 1.0 - CLAMP_EPS)
    clamped = int(s.data != s_c.data)
    if label == 1:
        ce = -log(s_c)
    elif label == 0:
        ce = -log(1.0 - s_c)
    else:
        raise ValueError(f"label must be 0 or 1, got {label!r}")
    if lam == 0.0:
        return ce, clamped
    penalty = coverage_penalty(result.a.spatial) + coverage_penalty(result.b.spatial)
    return lam * penalty + ce, clamped
