"""Where to look: soft attention over the cells of a feature cube.

Each step scores every grid cell from the top recurrent layer's previous
hidden state, softmaxes the scores into location weights, and reweights
the cube with them. Two readings exist: ``blend`` rescales each cell in
place and keeps the grid (what the convolutional recurrent layers need),
``collapse`` sums the weighted cells into one vector (what dense
recurrent layers need). A small per-layer MLP over the time-and-space
averaged cube provides the initial hidden states.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor, expand, matmul, softmax, tanh

__all__ = [
    "spatial_weights",
    "uniform_weights",
    "blend",
    "collapse",
    "init_param_shapes",
    "init_hidden",
]


def spatial_weights(h_prev: Tensor, w_att: Tensor) -> Tensor:
    """Location softmax: weights = softmax(w_att^T flatten(h_prev)).

    h_prev is the top layer's previous hidden state (any shape); w_att is
    [size(h_prev), n_locations]. Returns a rank-1 tensor of n_locations
    positive weights summing to one.
    """
    if w_att.ndim != 2:
        raise ShapeError(f"w_att must be rank 2 [hidden, locations], got {w_att.shape}")
    flat = h_prev.flatten()
    if flat.shape[0] != w_att.shape[0]:
        raise ShapeError(
            f"hidden state {h_prev.shape} flattens to {flat.shape[0]}, "
            f"w_att expects {w_att.shape[0]}"
        )
    return softmax(matmul(flat, w_att))


def uniform_weights(n_locations: int, dtype) -> Tensor:
    """The muted-attention baseline: every cell weighted 1/n_locations."""
    return Tensor(np.full(n_locations, 1.0 / n_locations), dtype=dtype)


def _check_blend(cube: Tensor, weights: Tensor) -> tuple[int, int, int]:
    if cube.ndim != 3:
        raise ShapeError(f"expected a [K1, K2, D] cube, got {cube.shape}")
    k1, k2, d = cube.shape
    if weights.ndim != 1 or weights.shape[0] != k1 * k2:
        raise ShapeError(
            f"weights {weights.shape} do not cover the {k1}x{k2} grid ({k1 * k2} cells)"
        )
    return k1, k2, d


def blend(cube: Tensor, weights: Tensor) -> Tensor:
    """Rescale every cell vector by its location weight; grid shape is kept."""
    k1, k2, d = _check_blend(cube, weights)
    w = expand(weights.reshape(k1, k2), 2, d)
    return cube * w


def collapse(cube: Tensor, weights: Tensor) -> Tensor:
    """Weighted sum of cell vectors -> [D]; the grid is given up."""
    _check_blend(cube, weights)
    return blend(cube, weights).sum(axis=(0, 1))


def init_param_shapes(
    depth: int, hidden_units: int, layer_channels: tuple[int, ...]
) -> dict[str, tuple[int, ...]]:
    """Shapes of the per-layer init MLPs (one small head per recurrent layer)."""
    shapes: dict[str, tuple[int, ...]] = {}
    for i, c in enumerate(layer_channels, start=1):
        shapes[f"init.l{i}.w1"] = (depth, hidden_units)
        shapes[f"init.l{i}.b1"] = (hidden_units,)
        shapes[f"init.l{i}.w2"] = (hidden_units, c)
        shapes[f"init.l{i}.b2"] = (c,)
    return shapes


def init_hidden(
    cubes: Tensor,
    params: dict[str, Tensor],
    hidden_shapes: list[tuple[int, int, int]],
) -> list[Tensor]:
    """Initial hidden state per layer from the mean cell vector.

    cubes is the encoded sequence [T, K1, K2, D]; the average over time
    and grid gives one [D] summary, each layer's MLP head maps it to that
    layer's channel count, and the result is tiled over the layer's grid.
    """
    if cubes.ndim != 4:
        raise ShapeError(f"init_hidden expects [T, K1, K2, D] cubes, got {cubes.shape}")
    summary = cubes.mean(axis=(0, 1, 2))
    states: list[Tensor] = []
    for i, (h, w, _c) in enumerate(hidden_shapes, start=1):
        a = tanh(matmul(summary, params[f"init.l{i}.w1"]) + params[f"init.l{i}.b1"])
        v = tanh(matmul(a, params[f"init.l{i}.w2"]) + params[f"init.l{i}.b2"])
        states.append(expand(expand(v, 0, w), 0, h))
    return states
