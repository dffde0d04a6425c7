"""Recognition evaluation: pooled representations, CMC curves, ablations.

The protocol is single-probe-per-identity: one pooled vector per
identity per view (the first sequence of that view), probes from one
view ranked against the gallery of the other by Euclidean distance.
Rank ties are broken by gallery index order, which keeps the curve
deterministic. Multi-trial evaluation retrains on identity-disjoint
splits and reports mean and spread per rank.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .data import Dataset, split
from .pooling import GmmModel, fisher_vector, fit_gmm, max_pool, mean_pool, temporal_weights, attention_pool
from .siamese import SiameseModel

__all__ = [
    "extract",
    "tta_conditions",
    "identity_representations",
    "pairwise_distances",
    "match_ranks",
    "cmc",
    "evaluate_model",
    "CmcAggregate",
    "multi_trial",
    "length_ablation",
    "pixel_mean_representations",
    "fit_state_gmm",
    "write_cmc_csv",
    "write_length_csv",
]

log = logging.getLogger(__name__)


def _pool_override(model: SiameseModel, tops, mode: str, gmm: GmmModel | None):
    if mode == "attention":
        return attention_pool(tops, temporal_weights(tops, model.params["tpool.w"])).data
    if mode == "mean":
        return mean_pool(tops).data
    if mode == "max":
        return max_pool(tops).data
    if mode == "fisher":
        if gmm is None:
            raise ConfigError("fisher pooling needs a fitted mixture")
        states = np.stack([t.data.reshape(-1) for t in tops])
        return fisher_vector(states, gmm)
    raise ConfigError(f"unknown pooling mode {mode!r}")


def extract(
    model: SiameseModel,
    frames: np.ndarray,
    max_len: int | None = None,
    pool: str | None = None,
    gmm: GmmModel | None = None,
) -> np.ndarray:
    """Deterministic evaluation-mode representation of one sequence."""
    if max_len is not None:
        if max_len < 1:
            raise ValueError(f"max_len must be positive, got {max_len}")
        frames = frames[:max_len]
    res = model.branch(frames, train=False)
    mode = pool or model.cfg.pool_mode
    return np.asarray(
        _pool_override(model, res.tops, mode, gmm), dtype=np.float64
    ).reshape(-1)


def tta_conditions(frame_w: int, frame_h: int) -> list[tuple[bool, int, int]]:
    """The six test-time conditions: mirror x {no shift, +-max 5% shift}."""
    dx = max(1, int(round(0.05 * frame_w)))
    dy = max(1, int(round(0.05 * frame_h)))
    out = []
    for mirror in (False, True):
        for sx, sy in ((0, 0), (dx, dy), (-dx, -dy)):
            out.append((mirror, sx, sy))
    return out


def identity_representations(
    model: SiameseModel,
    dataset: Dataset,
    view: str,
    max_len: int | None = None,
    pool: str | None = None,
    gmm: GmmModel | None = None,
    tta: bool = False,
    seq_index: int = 0,
) -> tuple[list[str], np.ndarray]:
    """One representation per identity carrying the view: (ids, [N, dim]).

    With tta=True the second axis becomes the six augmented conditions:
    [N, 6, dim], to be averaged at distance time.
    """
    from .training import transform_frames  # local import to avoid a cycle

    ids = [i for i in dataset.identities() if view in dataset.views(i)]
    if not ids:
        raise ConfigError(f"no identity carries view {view!r}")
    reps = []
    for ident in ids:
        frames = dataset.get(ident, view, seq_index)
        if tta:
            conds = tta_conditions(dataset.frame_w, dataset.frame_h)
            reps.append(
                np.stack(
                    [
                        extract(
                            model,
                            transform_frames(frames, mirror, dx, dy),
                            max_len=max_len,
                            pool=pool,
                            gmm=gmm,
                        )
                        for mirror, dx, dy in conds
                    ]
                )
            )
        else:
            reps.append(extract(model, frames, max_len=max_len, pool=pool, gmm=gmm))
    return ids, np.stack(reps)


def pairwise_distances(probe: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    """Euclidean distances [N_probe, N_gallery].

    Inputs are [N, dim], or [N, C, dim] for per-condition representations,
    in which case every probe/gallery condition pairing contributes and
    the C*C distances are averaged.
    """
    if probe.ndim == 2 and gallery.ndim == 2:
        d2 = (
            np.sum(probe**2, axis=1)[:, None]
            + np.sum(gallery**2, axis=1)[None, :]
            - 2.0 * probe @ gallery.T
        )
        return np.sqrt(np.maximum(d2, 0.0))
    if probe.ndim == 3 and gallery.ndim == 3:
        n, c, dim = probe.shape
        m = gallery.shape[0]
        out = np.zeros((n, m))
        for i in range(c):
            for j in range(gallery.shape[1]):
                out += pairwise_distances(probe[:, i, :], gallery[:, j, :])
        return out / (c * gallery.shape[1])
    raise ValueError(f"rank mismatch: probe {probe.shape} vs gallery {gallery.shape}")


def match_ranks(dist: np.ndarray) -> np.ndarray:
    """Rank of each probe's true match, ties resolved by gallery index.

    The matrix must be square with identities aligned, so the true match
    of probe i sits at gallery index i. Rank is 1-based.
    """
    if dist.ndim != 2 or dist.shape[0] != dist.shape[1]:
        raise ValueError(f"aligned square distance matrix required, got {dist.shape}")
    n = dist.shape[0]
    ranks = np.empty(n, dtype=np.int64)
    for i in range(n):
        row = dist[i]
        ranks[i] = 1 + int(np.sum(row < row[i])) + int(np.sum(row[:i] == row[i]))
    return ranks


def cmc(dist: np.ndarray, ranks: tuple[int, ...] = (1, 5, 10, 20)) -> list[float]:
    """Cumulative match rates (percent) at the requested ranks."""
    got = match_ranks(dist)
    n = got.shape[0]
    return [100.0 * float(np.sum(got <= r)) / n for r in ranks]


@dataclass
class CmcAggregate:
    """Per-rank mean and spread over repeated identity-disjoint trials."""

    ranks: tuple[int, ...]
    per_trial: list[list[float]] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def mean(self) -> list[float]:
        return list(np.mean(self.per_trial, axis=0)) if self.per_trial else []

    @property
    def std(self) -> list[float]:
        return list(np.std(self.per_trial, axis=0)) if self.per_trial else []

    @property
    def complete(self) -> bool:
        return not self.failures


def evaluate_model(
    model: SiameseModel,
    dataset: Dataset,
    ranks: tuple[int, ...] = (1, 5, 10, 20),
    max_len: int | None = None,
    pool: str | None = None,
    gmm: GmmModel | None = None,
    tta: bool = False,
) -> list[float]:
    """CMC of view-a probes against the view-b gallery on one dataset."""
    ids_p, probe = identity_representations(
        model, dataset, "a", max_len=max_len, pool=pool, gmm=gmm, tta=tta
    )
    ids_g, gallery = identity_representations(
        model, dataset, "b", max_len=max_len, pool=pool, gmm=gmm, tta=tta
    )
    common = [i for i in ids_p if i in set(ids_g)]
    if len(common) < 2:
        raise ConfigError("need at least 2 identities present in both views")
    sel_p = [ids_p.index(i) for i in common]
    sel_g = [ids_g.index(i) for i in common]
    dist = pairwise_distances(probe[sel_p], gallery[sel_g])
    return cmc(dist, ranks)


def multi_trial(
    dataset: Dataset,
    cfg: RunConfig,
    n_trials: int,
    base_seed: int = 0,
    train_fraction: float = 0.5,
    ranks: tuple[int, ...] = (1, 5, 10, 20),
    work_dir=None,
) -> CmcAggregate:
    """Repeated identity-disjoint trials: split, train afresh, evaluate.

    Trial i splits with trial_seed = base_seed + i and trains with the
    same derived seed. A trial that errors out is recorded as a failure
    and the aggregate is flagged incomplete rather than silently thinner.
    """
    import tempfile

    from dataclasses import replace as _replace

    from .training import train

    agg = CmcAggregate(ranks=ranks)
    for trial in range(n_trials):
        seed = base_seed + trial
        try:
            train_ds, test_ds = split(dataset, train_fraction, trial_seed=seed)
            trial_cfg = RunConfig(
                model=cfg.model, train=_replace(cfg.train, seed=seed)
            )
            with tempfile.TemporaryDirectory(dir=work_dir) as tmp:
                result = train(train_ds, trial_cfg, tmp)
            agg.per_trial.append(evaluate_model(result.model, test_ds, ranks))
        except Exception as e:  # noqa: BLE001 - partial failure is reported, not raised
            log.warning("trial %d failed: %s", trial, e)
            agg.failures.append(f"trial {trial}: {e}")
    return agg


def length_ablation(
    model: SiameseModel,
    dataset: Dataset,
    lengths: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64, 128),
    pool: str | None = None,
    gmm: GmmModel | None = None,
) -> np.ndarray:
    """Rank-1 (percent) for every probe/gallery max-length pairing."""
    probes = {}
    galleries = {}
    ids_ref: list[str] | None = None
    for ln in lengths:
        ids_p, probes[ln] = identity_representations(
            model, dataset, "a", max_len=ln, pool=pool, gmm=gmm
        )
        ids_g, galleries[ln] = identity_representations(
            model, dataset, "b", max_len=ln, pool=pool, gmm=gmm
        )
        if ids_p != ids_g:
            raise ConfigError("probe and gallery identity sets differ")
        ids_ref = ids_p
    out = np.zeros((len(lengths), len(lengths)))
    for i, lp in enumerate(lengths):
        for j, lg in enumerate(lengths):
            out[i, j] = cmc(pairwise_distances(probes[lp], galleries[lg]), (1,))[0]
    return out


def pixel_mean_representations(dataset: Dataset, view: str) -> tuple[list[str], np.ndarray]:
    """Raw-pixel baseline: each identity's mean frame, flattened."""
    ids = [i for i in dataset.identities() if view in dataset.views(i)]
    reps = [
        dataset.get(i, view, 0).mean(axis=0).reshape(-1).astype(np.float64) for i in ids
    ]
    return ids, np.stack(reps)


def fit_state_gmm(
    model: SiameseModel,
    dataset: Dataset,
    n_components: int,
    rng: np.random.Generator | None = None,
) -> GmmModel:
    """Fit the Fisher mixture on frame-level top states of every sequence."""
    descriptors = []
    for ident in dataset.identities():
        for view in dataset.views(ident):
            for frames in dataset.sequences[ident][view]:
                res = model.branch(frames, train=False)
                descriptors.extend(t.data.reshape(-1) for t in res.tops)
    gmm, _history = fit_gmm(np.stack(descriptors), n_components, rng=rng)
    return gmm


def write_cmc_csv(path, ranks, mean_rates, std_rates) -> None:
    lines = ["rank,mean_rate,std_rate"]
    for r, m, s in zip(ranks, mean_rates, std_rates):
        lines.append(f"{r},{repr(float(m))},{repr(float(s))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_length_csv(path, lengths, matrix: np.ndarray) -> None:
    header = "probe_len\\gallery_len," + ",".join(str(x) for x in lengths)
    lines = [header]
    for i, lp in enumerate(lengths):
        lines.append(f"{lp}," + ",".join(repr(float(v)) for v in matrix[i]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
