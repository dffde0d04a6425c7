"""Per-frame feature extraction.

A small stand-in stack of strided 3x3 convolutions with tanh turns each
RGB frame into a spatial feature cube [K1, K2, D] whose cells keep their
grid arrangement, so downstream attention can address individual
locations. The stand-in is trainable end to end; freezing it restores the
fixed-extractor regime.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, conv2d, expand, tanh

__all__ = [
    "EncoderConfig",
    "encoder_param_shapes",
    "encode",
    "encode_sequence",
    "cube_slice",
]


@dataclass(frozen=True)
class EncoderConfig:
    """Geometry of the frame encoder.

    channels lists the output channels per conv layer; the last entry is
    the cube depth D. Every layer uses a kernel x kernel window with the
    given stride, so with 'same' padding each layer shrinks the grid by
    ceil(size / stride).
    """

    frame_h: int = 32
    frame_w: int = 32
    channels: tuple[int, ...] = (16, 32, 32)
    kernel: int = 3
    stride: int = 2
    padding: str = "same"

    def __post_init__(self):
        if not self.channels:
            raise ValueError("encoder needs at least one conv layer")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"unknown encoder padding {self.padding!r}")
        h, w = self.cube_hw()
        if h < 1 or w < 1:
            raise ValueError(
                f"encoder reduces {self.frame_h}x{self.frame_w} frames to an empty grid"
            )

    def cube_hw(self) -> tuple[int, int]:
        h, w = self.frame_h, self.frame_w
        for _ in self.channels:
            if self.padding == "same":
                h = -(-h // self.stride)
                w = -(-w // self.stride)
            else:
                h = (h - self.kernel) // self.stride + 1
                w = (w - self.kernel) // self.stride + 1
        return h, w

    @property
    def depth(self) -> int:
        return self.channels[-1]

    @property
    def n_locations(self) -> int:
        h, w = self.cube_hw()
        return h * w


def encoder_param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes for :func:`encode`."""
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 3
    for i, cout in enumerate(cfg.channels, start=1):
        shapes[f"encoder.conv{i}"] = (cfg.kernel, cfg.kernel, cin, cout)
        shapes[f"encoder.bias{i}"] = (cout,)
        cin = cout
    return shapes


def _run(x: Tensor, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    for i in range(1, len(cfg.channels) + 1):
        x = conv2d(x, params[f"encoder.conv{i}"], padding=cfg.padding, stride=cfg.stride)
        # Broadcast the per-channel bias across the grid (and batch) explicitly.
        b = params[f"encoder.bias{i}"]
        for axis, n in enumerate(x.shape[:-1]):
            b = expand(b, axis, n)
        x = tanh(x + b)
    return x


def encode(frame, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Map one [H, W, 3] frame with values in [0, 1] to a [K1, K2, D] cube."""
    t = frame if isinstance(frame, Tensor) else Tensor(np.asarray(frame))
    if t.ndim != 3 or t.shape[2] != 3:
        raise ShapeError(f"encode expects an [H, W, 3] frame, got {t.shape}")
    if t.shape[:2] != (cfg.frame_h, cfg.frame_w):
        raise ShapeError(
            f"frame is {t.shape[0]}x{t.shape[1]}, config says {cfg.frame_h}x{cfg.frame_w}"
        )
    return _run(t, params, cfg)


def encode_sequence(frames, params: dict[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Encode a whole [T, H, W, 3] stack in one batched pass -> [T, K1, K2, D]."""
    t = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
    if t.ndim != 4 or t.shape[3] != 3:
        raise ShapeError(f"encode_sequence expects [T, H, W, 3], got {t.shape}")
    if t.shape[1:3] != (cfg.frame_h, cfg.frame_w):
        raise ShapeError(
            f"frames are {t.shape[1]}x{t.shape[2]}, config says {cfg.frame_h}x{cfg.frame_w}"
        )
    return _run(t, params, cfg)


def cube_slice(cube: Tensor, location: int) -> Tensor:
    """Feature vector of one grid cell.

    Locations are numbered 1..K1*K2 in row-major order from the top-left
    cell, matching how attention weights are laid out.
    """
    if cube.ndim != 3:
        raise ShapeError(f"cube_slice expects [K1, K2, D], got {cube.shape}")
    k1, k2, _ = cube.shape
    if not 1 <= location <= k1 * k2:
        raise IndexError(f"location {location} outside 1..{k1 * k2}")
    row, col = divmod(location - 1, k2)
    return cube[row, col]
