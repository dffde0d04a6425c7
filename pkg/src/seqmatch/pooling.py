"""Temporal pooling: squeeze a sequence of hidden states into one vector.

Three differentiable options share one interface: learned temporal
attention (a scalar score per step, softmaxed into a convex combination),
plain averaging, and elementwise max. Fisher-vector pooling is the
non-differentiable fourth option: fit a diagonal-covariance Gaussian
mixture to frame-level states after training, then encode a sequence by
its first- and second-order deviation statistics.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    expand,
    matmul,
    maximum,
    softmax,
    stack,
    load_tensor,
    save_tensor,
)

__all__ = [
    "temporal_weights",
    "attention_pool",
    "mean_pool",
    "max_pool",
    "GmmModel",
    "fit_gmm",
    "posteriors",
    "fisher_vector",
    "save_gmm",
    "load_gmm",
]

log = logging.getLogger(__name__)


def _flat_states(states) -> list[Tensor]:
    if not states:
        raise ValueError("pooling needs at least one state")
    flats = [s.flatten() for s in states]
    dim = flats[0].shape[0]
    for f in flats[1:]:
        if f.shape[0] != dim:
            raise ShapeError(
                f"states flatten to differing sizes {dim} and {f.shape[0]}"
            )
    return flats


def temporal_weights(states, w_score: Tensor) -> Tensor:
    """softmax over per-step scalar scores w_score . flatten(h_t) -> [T]."""
    flats = _flat_states(states)
    if w_score.ndim != 1 or w_score.shape[0] != flats[0].shape[0]:
        raise ShapeError(
            f"score vector {w_score.shape} does not match state size {flats[0].shape[0]}"
        )
    scores = stack([matmul(f, w_score) for f in flats])
    return softmax(scores)


def attention_pool(states, weights: Tensor) -> Tensor:
    """Convex combination of flattened states under the given weights."""
    flats = _flat_states(states)
    if weights.ndim != 1 or weights.shape[0] != len(flats):
        raise ShapeError(
            f"{len(flats)} states need {len(flats)} weights, got {weights.shape}"
        )
    dim = flats[0].shape[0]
    stacked = stack(flats)
    return (stacked * expand(weights, 1, dim)).sum(axis=0)


def mean_pool(states) -> Tensor:
    """Uniform-weight special case of :func:`attention_pool`."""
    flats = _flat_states(states)
    w = Tensor(np.full(len(flats), 1.0 / len(flats)), dtype=flats[0].dtype)
    return attention_pool(states, w)


def max_pool(states) -> Tensor:
    """Elementwise maximum over steps of the flattened states."""
    flats = _flat_states(states)
    out = flats[0]
    for f in flats[1:]:
        out = maximum(out, f)
    return out


# -- Fisher-vector pooling ---------------------------------------------------


@dataclass
class GmmModel:
    """Diagonal-covariance Gaussian mixture: means/sigmas are [C, D], priors [C]."""

    means: np.ndarray
    sigmas: np.ndarray
    priors: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.sigmas = np.asarray(self.sigmas, dtype=np.float64)
        self.priors = np.asarray(self.priors, dtype=np.float64)
        if self.means.shape != self.sigmas.shape or self.means.ndim != 2:
            raise ShapeError(
                f"means {self.means.shape} and sigmas {self.sigmas.shape} must be equal [C, D]"
            )
        if self.priors.shape != (self.means.shape[0],):
            raise ShapeError(
                f"priors {self.priors.shape} do not match {self.means.shape[0]} components"
            )

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]


def _log_density(gmm: GmmModel, x: np.ndarray) -> np.ndarray:
    """Per-component log densities, [N, C]."""
    diff = x[:, None, :] - gmm.means[None, :, :]
    var = gmm.sigmas**2
    quad = np.sum(diff**2 / var[None, :, :], axis=2)
    norm = np.sum(np.log(2.0 * np.pi * var), axis=1)
    return -0.5 * (quad + norm[None, :])


def posteriors(gmm: GmmModel, x: np.ndarray) -> np.ndarray:
    """Responsibilities q[n, k] of each component for each descriptor."""
    x = np.asarray(x, dtype=np.float64)
    lp = _log_density(gmm, x) + np.log(gmm.priors)[None, :]
    lp -= lp.max(axis=1, keepdims=True)
    q = np.exp(lp)
    q /= q.sum(axis=1, keepdims=True)
    return q


def fit_gmm(
    descriptors: np.ndarray,
    n_components: int,
    iterations: int = 50,
    rng: np.random.Generator | None = None,
    sigma_floor: float = 1e-3,
) -> tuple[GmmModel, list[float]]:
    """Expectation-maximization fit of a diagonal-covariance mixture.

    Means start at randomly chosen distinct descriptors, sigmas at the
    per-dimension data spread, priors uniform. A component whose total
    responsibility collapses is re-seeded from a random descriptor with a
    warning. Returns the model and the per-iteration mean log-likelihood.
    """
    x = np.asarray(descriptors, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"descriptors must be [N, D], got {x.shape}")
    n = x.shape[0]
    if n_components < 1:
        raise ValueError(f"need at least one component, got {n_components}")
    distinct = np.unique(x, axis=0)
    if distinct.shape[0] < n_components:
        raise ValueError(
            f"{n_components} components need that many distinct descriptors, "
            f"got {distinct.shape[0]}"
        )
    rng = rng or np.random.default_rng(0)
    pick = rng.choice(distinct.shape[0], size=n_components, replace=False)
    means = distinct[pick].copy()
    spread = np.maximum(x.std(axis=0), sigma_floor)
    sigmas = np.tile(spread, (n_components, 1))
    priors = np.full(n_components, 1.0 / n_components)
    history: list[float] = []
    for _ in range(iterations):
        gmm = GmmModel(means, sigmas, priors)
        lp = _log_density(gmm, x) + np.log(priors)[None, :]
        peak = lp.max(axis=1, keepdims=True)
        ll = peak[:, 0] + np.log(np.exp(lp - peak).sum(axis=1))
        history.append(float(ll.mean()))
        q = np.exp(lp - peak)
        q /= q.sum(axis=1, keepdims=True)
        mass = q.sum(axis=0)
        for k in np.flatnonzero(mass < 1e-8):
            log.warning("mixture component %d collapsed; re-seeding it", k)
            means[k] = x[rng.integers(n)]
            sigmas[k] = spread
            mass[k] = 1.0
            q[:, k] = 1.0 / n
        means = (q.T @ x) / mass[:, None]
        second = (q.T @ (x**2)) / mass[:, None]
        sigmas = np.sqrt(np.maximum(second - means**2, sigma_floor**2))
        priors = mass / mass.sum()
    return GmmModel(means, sigmas, priors), history


def fisher_vector(states: np.ndarray, gmm: GmmModel) -> np.ndarray:
    """Encode [T, D] frame descriptors against the mixture -> [2 * D * C].

    For component k with prior pi_k, mean mu_k and deviation sigma_k,
    with responsibilities q_kt:

        u_k = 1 / (T sqrt(pi_k))   * sum_t q_kt (h_t - mu_k) / sigma_k
        v_k = 1 / (T sqrt(2 pi_k)) * sum_t q_kt [((h_t - mu_k) / sigma_k)^2 - 1]

    The output concatenates all u_k, then all v_k.
    """
    x = np.asarray(states, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"states must be [T, D], got {x.shape}")
    if x.shape[1] != gmm.dim:
        raise ShapeError(f"states carry {x.shape[1]} dims, mixture wants {gmm.dim}")
    t = x.shape[0]
    q = posteriors(gmm, x)
    z = (x[:, None, :] - gmm.means[None, :, :]) / gmm.sigmas[None, :, :]
    u = np.einsum("tk,tkd->kd", q, z) / (t * np.sqrt(gmm.priors))[:, None]
    v = np.einsum("tk,tkd->kd", q, z**2 - 1.0) / (t * np.sqrt(2.0 * gmm.priors))[:, None]
    return np.concatenate([u.reshape(-1), v.reshape(-1)])


def save_gmm(prefix, gmm: GmmModel) -> None:
    """Persist a mixture as three tensors next to each other."""
    save_tensor(f"{prefix}.means.stns", gmm.means)
    save_tensor(f"{prefix}.sigmas.stns", gmm.sigmas)
    save_tensor(f"{prefix}.priors.stns", gmm.priors)


def load_gmm(prefix) -> GmmModel:
    return GmmModel(
        load_tensor(f"{prefix}.means.stns"),
        load_tensor(f"{prefix}.sigmas.stns"),
        load_tensor(f"{prefix}.priors.stns"),
    )
