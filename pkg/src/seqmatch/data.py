"""Synthetic two-view walking sequences, plus on-disk dataset plumbing.

Each identity is a latent appearance (torso/leg colours, body scale, gait
period). A sequence renders that appearance as a blocky walker over a
textured background: the legs scissor and the body sways with the walk
cycle, so single frames alias across phase while whole windows do not.
The second camera view applies one dataset-wide transform (per-channel
gain, brightness shift, translation, body rescale) and independent
sensor noise, which is what makes raw-pixel matching across views go
stale while a trained matcher can cope.

On disk a dataset is ``root/<identity>/<view>/seq_<i>/frame_<t>.ppm``
with 8-bit binary PPM frames and a manifest recording dims and counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, load_kv

__all__ = [
    "SynthSpec",
    "ViewTransform",
    "Dataset",
    "generate",
    "save",
    "load",
    "split",
    "write_ppm",
    "read_ppm",
]

VIEWS = ("a", "b")


@dataclass(frozen=True)
class SynthSpec:
    """Knobs of the generator; equal specs yield byte-identical datasets."""

    identities: int = 20
    sequences_per_view: int = 2
    min_frames: int = 30
    max_frames: int = 60
    frame_h: int = 32
    frame_w: int = 32
    noise: float = 0.05
    texture: float = 0.2
    color_shift: float = 0.3
    brightness: float = 0.2
    view_shift: int = 5
    view_scale: float = 0.25
    walk_period_min: int = 8
    walk_period_max: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.identities < 1:
            raise ConfigError("need at least one identity")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError(
                f"bad frame count range [{self.min_frames}, {self.max_frames}]"
            )
        if self.frame_h < 16 or self.frame_w < 16:
            raise ConfigError("frames below 16x16 cannot hold the walker")
        if not 2 <= self.walk_period_min <= self.walk_period_max:
            raise ConfigError("walk periods must be >= 2 and ordered")

    @classmethod
    def from_mapping(cls, mapping: dict[str, str], source: str = "<spec>") -> "SynthSpec":
        kw = {}
        for key, raw in mapping.items():
            if key not in _SPEC_FIELDS:
                raise ConfigError(f"{source}: unknown generator key {key!r}")
            try:
                kw[key] = _SPEC_FIELDS[key](raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"{source}: bad value for {key!r}: {e}") from e
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "SynthSpec":
        return cls.from_mapping(load_kv(path), source=str(path))


_SPEC_FIELDS = {
    "identities": int,
    "sequences_per_view": int,
    "min_frames": int,
    "max_frames": int,
    "frame_h": int,
    "frame_w": int,
    "noise": float,
    "texture": float,
    "color_shift": float,
    "brightness": float,
    "view_shift": int,
    "view_scale": float,
    "walk_period_min": int,
    "walk_period_max": int,
    "seed": int,
}


@dataclass(frozen=True)
class ViewTransform:
    """Dataset-wide camera difference applied to one view."""

    gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    brightness: float = 0.0
    dx: int = 0
    dy: int = 0
    scale: float = 1.0


@dataclass
class Dataset:
    """In-memory dataset: identity -> view -> list of [T, H, W, 3] float32 arrays."""

    frame_h: int
    frame_w: int
    sequences: dict[str, dict[str, list[np.ndarray]]] = field(default_factory=dict)

    def identities(self) -> list[str]:
        return sorted(self.sequences)

    def views(self, identity: str) -> list[str]:
        return sorted(self.sequences[identity])

    def get(self, identity: str, view: str, index: int = 0) -> np.ndarray:
        return self.sequences[identity][view][index]

    def add(self, identity: str, view: str, frames: np.ndarray) -> None:
        self.sequences.setdefault(identity, {}).setdefault(view, []).append(frames)

    def n_sequences(self) -> int:
        return sum(
            len(seqs) for views in self.sequences.values() for seqs in views.values()
        )


# -- rendering ---------------------------------------------------------------


@dataclass(frozen=True)
class _Appearance:
    torso: np.ndarray
    legs: np.ndarray
    head: np.ndarray
    period: int
    height: float  # body scale multiplier


def _paint(frame: np.ndarray, r0: float, r1: float, c0: float, c1: float, color) -> None:
    h, w = frame.shape[:2]
    ri0 = max(int(round(r0)), 0)
    ri1 = min(int(round(r1)), h)
    ci0 = max(int(round(c0)), 0)
    ci1 = min(int(round(c1)), w)
    if ri0 < ri1 and ci0 < ci1:
        frame[ri0:ri1, ci0:ci1] = color


def _render_frame(
    spec: SynthSpec,
    app: _Appearance,
    cycle: int,
    tf: ViewTransform,
    texture_field: np.ndarray,
    noise_rng: np.random.Generator,
) -> np.ndarray:
    h, w = spec.frame_h, spec.frame_w
    frame = np.full((h, w, 3), 0.45)
    frame += texture_field[:, :, None]
    phase = 2.0 * math.pi * cycle / app.period
    s = app.height * tf.scale
    sway = 1.5 * math.sin(phase)
    bob = 0.6 * math.cos(2.0 * phase)
    cx = w / 2.0 + tf.dx + sway
    cy = h / 2.0 + tf.dy + bob
    # head, torso, then the two scissoring legs
    _paint(frame, cy - 11 * s, cy - 7 * s, cx - 2 * s, cx + 2 * s, app.head)
    _paint(frame, cy - 7 * s, cy + 3 * s, cx - 4 * s, cx + 4 * s, app.torso)
    swing = 2.0 * s * math.sin(phase)
    _paint(
        frame, cy + 3 * s, cy + 11 * s, cx - 3 * s + swing, cx - 0.5 * s + swing, app.legs
    )
    _paint(
        frame, cy + 3 * s, cy + 11 * s, cx + 0.5 * s - swing, cx + 3 * s - swing, app.legs
    )
    frame = frame * np.asarray(tf.gains) + tf.brightness
    if spec.noise > 0:
        frame = frame + noise_rng.uniform(-spec.noise, spec.noise, size=frame.shape)
    frame = np.clip(frame, 0.0, 1.0)
    # 8-bit quantization, exactly the storage format's precision
    return np.round(frame * 255.0).astype(np.uint8).astype(np.float32) / np.float32(255.0)


def _draw_appearance(rng: np.random.Generator, taken: list[np.ndarray]) -> _Appearance:
    # Rejection-sample colours so identities stay separated in colour space.
    for _ in range(1000):
        torso = rng.uniform(0.1, 0.9, size=3)
        legs = rng.uniform(0.1, 0.9, size=3)
        sig = np.concatenate([torso, legs])
        if all(np.linalg.norm(sig - t) >= 0.5 for t in taken):
            taken.append(sig)
            break
    else:
        raise RuntimeError("could not place identities apart in colour space")
    head = np.array([0.82, 0.66, 0.52]) * rng.uniform(0.85, 1.15)
    return torso, legs, head


def generate(spec: SynthSpec) -> Dataset:
    """Deterministically render the whole dataset described by spec."""
    rng = np.random.default_rng(spec.seed)
    width = max(2, len(str(spec.identities - 1)))
    taken: list[np.ndarray] = []
    apps: dict[str, _Appearance] = {}
    for i in range(spec.identities):
        torso, legs, head = _draw_appearance(rng, taken)
        period = int(rng.integers(spec.walk_period_min, spec.walk_period_max + 1))
        height = float(rng.uniform(0.9, 1.1))
        apps[f"id{i:0{width}d}"] = _Appearance(torso, legs, head, period, height)
    transforms = {"a": ViewTransform()}
    # Magnitudes stay in the upper half of each knob's range so no seed
    # accidentally draws a near-identity second view.
    def signed(knob: float) -> float:
        return float(knob * rng.uniform(0.5, 1.0) * rng.choice((-1.0, 1.0)))

    def signed_int(knob: int) -> int:
        mag = int(rng.integers((knob + 1) // 2, knob + 1))
        return mag * int(rng.choice((-1, 1)))

    transforms["b"] = ViewTransform(
        gains=tuple(1.0 + signed(spec.color_shift) for _ in range(3)),
        brightness=signed(spec.brightness),
        dx=signed_int(spec.view_shift),
        dy=signed_int(spec.view_shift),
        scale=1.0 + signed(spec.view_scale),
    )
    ds = Dataset(frame_h=spec.frame_h, frame_w=spec.frame_w)
    for ident in sorted(apps):
        app = apps[ident]
        for view in VIEWS:
            for _ in range(spec.sequences_per_view):
                length = int(rng.integers(spec.min_frames, spec.max_frames + 1))
                phase0 = int(rng.integers(0, app.period))
                coarse = rng.uniform(-1.0, 1.0, size=(-(-spec.frame_h // 4), -(-spec.frame_w // 4)))
                tex = spec.texture * np.repeat(np.repeat(coarse, 4, 0), 4, 1)[
                    : spec.frame_h, : spec.frame_w
                ]
                frames = np.stack(
                    [
                        _render_frame(
                            spec, app, phase0 + t, transforms[view], tex, rng
                        )
                        for t in range(length)
                    ]
                )
                ds.add(ident, view, frames)
    return ds


# -- 8-bit image files -------------------------------------------------------


def write_ppm(path, frame: np.ndarray) -> None:
    """Binary P6 with maxval 255; expects [H, W, 3] floats in [0, 1]."""
    arr = np.round(np.clip(np.asarray(frame), 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"write_ppm wants [H, W, 3], got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(arr.tobytes())


def _read_netpbm_tokens(blob: bytes, count: int) -> tuple[list[bytes], int]:
    """Scan ``count`` whitespace-separated header tokens, honouring # comments.

    Returns the tokens and the offset of the first payload byte (one
    whitespace character past the last token).
    """
    tokens: list[bytes] = []
    i = 0
    n = len(blob)
    while len(tokens) < count:
        while i < n and blob[i : i + 1].isspace():
            i += 1
        if i < n and blob[i : i + 1] == b"#":
            while i < n and blob[i : i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not blob[i : i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError("truncated image header")
        tokens.append(blob[start:i])
    return tokens, i + 1


def read_ppm(path) -> np.ndarray:
    """Read binary P6 (colour) or P5 (grey, replicated to 3 channels)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] not in (b"P6", b"P5"):
        raise ValueError(f"{path}: not a binary PPM/PGM file (magic {blob[:2]!r})")
    tokens, offset = _read_netpbm_tokens(blob, 4)
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    payload = blob[offset : offset + need]
    if len(payload) != need:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, need {need}")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, channels)
    if channels == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr.astype(np.float32) / np.float32(255.0)


# -- dataset directory layout ------------------------------------------------


def save(dataset: Dataset, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = [
        f"frame_h = {dataset.frame_h}",
        f"frame_w = {dataset.frame_w}",
    ]
    for ident in dataset.identities():
        for view in dataset.views(ident):
            for s, frames in enumerate(dataset.sequences[ident][view]):
                seq_dir = root / ident / view / f"seq_{s:02d}"
                seq_dir.mkdir(parents=True, exist_ok=True)
                for t in range(frames.shape[0]):
                    write_ppm(seq_dir / f"frame_{t:05d}.ppm", frames[t])
                lines.append(f"sequence = {ident} {view} {s} {frames.shape[0]}")
    (root / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def load(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"no dataset manifest at {manifest}")
    frame_h = frame_w = None
    entries: list[tuple[str, str, int, int]] = []
    for lineno, raw in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key == "frame_h":
            frame_h = int(value)
        elif key == "frame_w":
            frame_w = int(value)
        elif key == "sequence":
            ident, view, s, n = value.split()
            entries.append((ident, view, int(s), int(n)))
        else:
            raise ValueError(f"{manifest}:{lineno}: unknown manifest key {key!r}")
    if frame_h is None or frame_w is None:
        raise ValueError(f"{manifest}: missing frame dimensions")
    ds = Dataset(frame_h=frame_h, frame_w=frame_w)
    for ident, view, s, n in sorted(entries):
        seq_dir = root / ident / view / f"seq_{s:02d}"
        frames = []
        for t in range(n):
            path = seq_dir / f"frame_{t:05d}.ppm"
            if not path.is_file():
                raise FileNotFoundError(f"missing frame {path}")
            frame = read_ppm(path)
            if frame.shape[:2] != (frame_h, frame_w):
                raise ValueError(
                    f"{path}: frame is {frame.shape[0]}x{frame.shape[1]}, "
                    f"manifest says {frame_h}x{frame_w}"
                )
            frames.append(frame)
        ds.add(ident, view, np.stack(frames))
    return ds


def split(dataset: Dataset, fraction: float, trial_seed: int) -> tuple[Dataset, Dataset]:
    """Identity-disjoint split; ``fraction`` of identities go to the first part."""
    ids = dataset.identities()
    if len(ids) < 2:
        raise ConfigError(f"cannot split {len(ids)} identities")
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(trial_seed)
    perm = [ids[i] for i in rng.permutation(len(ids))]
    n_first = int(round(fraction * len(ids)))
    n_first = min(max(n_first, 1), len(ids) - 1)
    first = set(perm[:n_first])
    a = Dataset(frame_h=dataset.frame_h, frame_w=dataset.frame_w)
    b = Dataset(frame_h=dataset.frame_h, frame_w=dataset.frame_w)
    for ident in ids:
        target = a if ident in first else b
        for view in dataset.views(ident):
            for frames in dataset.sequences[ident][view]:
                target.add(ident, view, frames)
    return a, b
