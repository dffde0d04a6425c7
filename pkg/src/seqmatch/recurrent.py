"""Gated recurrent layers that keep their spatial grid.

A convolutional gated recurrent cell replaces every dense transform of
the classic cell with a same-padded 2-D convolution, so the hidden state
stays a [H, W, C] map and neighbouring cells share weights. The dense
cell is the 1x1-kernel-on-a-1x1-grid special case, and ``fc_gru_step``
and ``conv_gru_step`` are written so that case agrees bit for bit under
weight reshaping. Cells are bias-free by default; a config switch adds
per-gate biases.

Layers stack with optional non-overlapping max pooling between them, and
closed-form parameter/flop counts cover every kernel geometry.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import (
    ShapeError,
    Tensor,
    conv2d,
    expand,
    matmul,
    max_pool2d,
    sigmoid,
    tanh,
)

__all__ = [
    "LayerSpec",
    "StackConfig",
    "gru_param_shapes",
    "fc_gru_param_shapes",
    "fc_gru_gates",
    "fc_gru_step",
    "conv_gru_gates",
    "conv_gru_step",
    "layer_params",
    "stack_step",
    "stack_forward",
    "param_count",
    "flop_estimate",
    "dense_equivalent_flops",
]

_GATE_NAMES = ("W_z", "W_r", "W", "U_z", "U_r", "U")


@dataclass(frozen=True)
class LayerSpec:
    channels: int
    kernel: tuple[int, int]

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError(f"layer channels must be positive, got {self.channels}")
        k1, k2 = self.kernel
        if k1 < 1 or k2 < 1:
            raise ValueError(f"kernel extents must be positive, got {self.kernel}")


@dataclass(frozen=True)
class StackConfig:
    """Geometry of the recurrent stack.

    input_hw/input_channels describe what the first layer consumes;
    pools holds the max-pooling window applied after each non-final layer
    (1 means identity, which small grids usually want).
    """

    input_hw: tuple[int, int]
    input_channels: int
    layers: tuple[LayerSpec, ...]
    pools: tuple[int, ...]
    bias: bool = False

    def __post_init__(self):
        if not self.layers:
            raise ValueError("stack needs at least one layer")
        if len(self.pools) != len(self.layers) - 1:
            raise ValueError(
                f"{len(self.layers)} layers need {len(self.layers) - 1} pool entries, "
                f"got {len(self.pools)}"
            )
        for g in self.grids():
            if g[0] < 1 or g[1] < 1:
                raise ValueError(f"pooling empties the grid: {self.grids()}")

    def grids(self) -> list[tuple[int, int]]:
        """Grid each layer runs on, after the preceding pooling."""
        h, w = self.input_hw
        out = [(h, w)]
        for p in self.pools:
            h, w = h // p, w // p
            out.append((h, w))
        return out

    def hidden_shapes(self) -> list[tuple[int, int, int]]:
        return [(g[0], g[1], spec.channels) for g, spec in zip(self.grids(), self.layers)]

    def layer_in_channels(self) -> list[int]:
        return [self.input_channels] + [s.channels for s in self.layers[:-1]]


def gru_param_shapes(cfg: StackConfig) -> dict[str, tuple[int, ...]]:
    """Canonical kernel names and shapes: layer<i>.{W_z, W_r, W, U_z, U_r, U}."""
    shapes: dict[str, tuple[int, ...]] = {}
    for i, (spec, cin) in enumerate(zip(cfg.layers, cfg.layer_in_channels()), start=1):
        k1, k2 = spec.kernel
        ch = spec.channels
        for name in ("W_z", "W_r", "W"):
            shapes[f"layer{i}.{name}"] = (k1, k2, cin, ch)
        for name in ("U_z", "U_r", "U"):
            shapes[f"layer{i}.{name}"] = (k1, k2, ch, ch)
        if cfg.bias:
            for name in ("b_z", "b_r", "b"):
                shapes[f"layer{i}.{name}"] = (ch,)
    return shapes


def fc_gru_param_shapes(c_in: int, c_hidden: int, bias: bool = False) -> dict[str, tuple[int, ...]]:
    """Dense-cell weights: W_* are [Cin, Ch], U_* are [Ch, Ch]."""
    shapes: dict[str, tuple[int, ...]] = {}
    for name in ("W_z", "W_r", "W"):
        shapes[name] = (c_in, c_hidden)
    for name in ("U_z", "U_r", "U"):
        shapes[name] = (c_hidden, c_hidden)
    if bias:
        for name in ("b_z", "b_r", "b"):
            shapes[name] = (c_hidden,)
    return shapes


def _bias_add(pre: Tensor, bias: Tensor | None) -> Tensor:
    if bias is None:
        return pre
    b = bias
    for axis, n in enumerate(pre.shape[:-1]):
        b = expand(b, axis, n)
    return pre + b


def fc_gru_gates(x: Tensor, h: Tensor, p: dict[str, Tensor]):
    """Update gate, reset gate and candidate state of the dense cell."""
    if x.ndim != 1 or h.ndim != 1:
        raise ShapeError(f"fc cell wants rank-1 state, got x {x.shape}, h {h.shape}")

    def mv(v: Tensor, m: Tensor) -> Tensor:
        # Promote to a one-row matrix so the product runs through the same
        # matrix kernel as a 1x1 convolution; keeps the two cells bit-equal.
        return matmul(v.reshape(1, -1), m).reshape(-1)

    z = sigmoid(_bias_add(mv(x, p["W_z"]) + mv(h, p["U_z"]), p.get("b_z")))
    r = sigmoid(_bias_add(mv(x, p["W_r"]) + mv(h, p["U_r"]), p.get("b_r")))
    cand = tanh(_bias_add(mv(x, p["W"]) + mv(r * h, p["U"]), p.get("b")))
    return z, r, cand


def fc_gru_step(x: Tensor, h: Tensor, p: dict[str, Tensor]) -> Tensor:
    """One dense gated recurrent step: h' = (1 - z) * h + z * candidate."""
    z, _r, cand = fc_gru_gates(x, h, p)
    return (1.0 - z) * h + z * cand


def conv_gru_gates(x: Tensor, h: Tensor, p: dict[str, Tensor]):
    """Gates of the convolutional cell; every transform is a same-padded conv."""
    if x.ndim != 3 or h.ndim != 3:
        raise ShapeError(f"conv cell wants [H, W, C] state, got x {x.shape}, h {h.shape}")
    if x.shape[:2] != h.shape[:2]:
        raise ShapeError(f"input grid {x.shape} and state grid {h.shape} disagree")
    z = sigmoid(_bias_add(conv2d(x, p["W_z"]) + conv2d(h, p["U_z"]), p.get("b_z")))
    r = sigmoid(_bias_add(conv2d(x, p["W_r"]) + conv2d(h, p["U_r"]), p.get("b_r")))
    cand = tanh(_bias_add(conv2d(x, p["W"]) + conv2d(r * h, p["U"]), p.get("b")))
    return z, r, cand


def conv_gru_step(x: Tensor, h: Tensor, p: dict[str, Tensor]) -> Tensor:
    """One convolutional gated recurrent step on a [H, W, C] state."""
    z, _r, cand = conv_gru_gates(x, h, p)
    return (1.0 - z) * h + z * cand


def layer_params(params: dict[str, Tensor], index: int) -> dict[str, Tensor]:
    """Subset of a flat parameter dict belonging to recurrent layer ``index``."""
    prefix = f"layer{index}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def stack_step(
    x: Tensor,
    states: list[Tensor],
    cfg: StackConfig,
    params: dict[str, Tensor],
    drop=None,
):
    """Advance every layer by one step.

    drop, when given, is a callable shape -> mask tensor implementing
    dropout on the upward path (what the next layer and the pooling see);
    the recurrent carry itself stays undropped. Returns (new_states,
    top_output).
    """
    if len(states) != len(cfg.layers):
        raise ShapeError(f"{len(cfg.layers)}-layer stack got {len(states)} states")
    inp = x
    new_states: list[Tensor] = []
    top = None
    for i in range(len(cfg.layers)):
        h = conv_gru_step(inp, states[i], layer_params(params, i + 1))
        new_states.append(h)
        if i < len(cfg.layers) - 1:
            up = max_pool2d(h, cfg.pools[i])
            if drop is not None:
                up = up * drop(up.shape)
            inp = up
        else:
            top = h if drop is None else h * drop(h.shape)
    return new_states, top


def stack_forward(
    xs,
    h0: list[Tensor],
    cfg: StackConfig,
    params: dict[str, Tensor],
    drop=None,
) -> list[list[Tensor]]:
    """Run the stack over a whole input sequence; returns states per step."""
    states = list(h0)
    history: list[list[Tensor]] = []
    for x in xs:
        states, _top = stack_step(x, states, cfg, params, drop)
        history.append(list(states))
    return history


def param_count(cfg: StackConfig) -> tuple[list[int], int]:
    """Closed-form weight count per layer: 3 * k1 * k2 * (Cx * Ch + Ch^2).

    The three gate transforms each pair an input-to-state kernel
    (k1 * k2 * Cx * Ch) with a state-to-state kernel (k1 * k2 * Ch^2).
    Optional biases add 3 * Ch per layer.
    """
    counts = []
    for spec, cin in zip(cfg.layers, cfg.layer_in_channels()):
        k1, k2 = spec.kernel
        ch = spec.channels
        n = 3 * k1 * k2 * (cin * ch + ch * ch)
        if cfg.bias:
            n += 3 * ch
        counts.append(n)
    return counts, sum(counts)


def flop_estimate(cfg: StackConfig, t_steps: int) -> tuple[list[int], int]:
    """Multiplication count for t_steps: 3 * T * H * W * k1 * k2 * (Cx*Ch + Ch^2)."""
    counts = []
    for spec, cin, grid in zip(cfg.layers, cfg.layer_in_channels(), cfg.grids()):
        k1, k2 = spec.kernel
        ch = spec.channels
        counts.append(3 * t_steps * grid[0] * grid[1] * k1 * k2 * (cin * ch + ch * ch))
    return counts, sum(counts)


def dense_equivalent_flops(cfg: StackConfig, t_steps: int) -> tuple[list[int], int]:
    """Cost of dense layers over the same flattened grids: the k1*k2 factor
    becomes H*W, i.e. every cell attends to every cell."""
    counts = []
    for spec, cin, grid in zip(cfg.layers, cfg.layer_in_channels(), cfg.grids()):
        ch = spec.channels
        hw = grid[0] * grid[1]
        counts.append(3 * t_steps * hw * hw * (cin * ch + ch * ch))
    return counts, sum(counts)
