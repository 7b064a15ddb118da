"""Constrained matrix factorization on top of encoded representations.

The objective couples three terms: squared reconstruction error of observed
ratings, a constraint pulling each course's predicted mean rating (uniform
transfer vector, every entry 1/m) toward the observed course average, and
Frobenius regularization of both factor matrices:

    L = sum((R - P)^2 over cells) + beta * ||r - colmean(P)||^2
        + gamma * (||E_s||_F^2 + ||E_c||_F^2),      P = E_s @ E_c^T

``masked`` (default) restricts the reconstruction sum to observed cells;
unmasked mode treats unobserved cells as zeros and sums over the full matrix.
Gradients are analytic and validated against finite differences.

Two coupling modes connect this objective to the encoder: ``end_to_end``
(default) takes E_s, E_c straight from the encoder and chains gradients
through it; ``warm_start`` initializes free factor matrices from encoder
outputs and updates them directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedcourse.datasets import RatingMatrix
from fedcourse.encoder import (
    EncoderGrads,
    NodeRepresentations,
    encode_backward,
    node_grad_from_factors,
    zero_shared_grads,
)
from fedcourse.errors import ConfigError, NumericsError

COUPLING_MODES = ("end_to_end", "warm_start")


@dataclass(frozen=True)
class ConMFConfig:
    beta: float = 0.1
    gamma: float = 0.01
    masked: bool = True

    def __post_init__(self) -> None:
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ConfigError("beta must be finite and nonnegative")
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ConfigError("gamma must be finite and nonnegative")


@dataclass
class ConMFState:
    """Factor matrices plus the rating data they are fit against."""

    student_factors: np.ndarray
    course_factors: np.ndarray
    ratings: RatingMatrix
    course_means: np.ndarray

    def __post_init__(self) -> None:
        m, n = self.ratings.shape
        if m < 1:
            raise ValueError("need at least one student")
        if self.student_factors.shape[0] != m or self.course_factors.shape[0] != n:
            raise ValueError("factor row counts must match the rating matrix")
        if self.student_factors.shape[1] != self.course_factors.shape[1]:
            raise ValueError("factor matrices disagree on latent dimension")
        if self.course_means.shape != (n,):
            raise ValueError("course averages must have one entry per course")

    @property
    def transfer(self) -> np.ndarray:
        """Uniform averaging vector; every entry exactly 1/m."""
        m = self.ratings.shape[0]
        return np.full(m, 1.0 / m)


def predict(student_factors: np.ndarray, course_factors: np.ndarray) -> np.ndarray:
    """Predicted ratings P[s, c] = <student s, course c>."""
    if student_factors.ndim != 2 or course_factors.ndim != 2:
        raise ValueError("factors must be 2-D")
    if student_factors.shape[1] != course_factors.shape[1]:
        raise ValueError(
            f"latent dims differ: {student_factors.shape[1]} vs {course_factors.shape[1]}"
        )
    return student_factors @ course_factors.T


def _recon_cells(state: ConMFState, cfg: ConMFConfig, cells: np.ndarray | None) -> np.ndarray | None:
    """Boolean cell selector for the reconstruction term; None = all cells."""
    if not cfg.masked:
        if cells is not None:
            raise ValueError("mini-batching requires masked reconstruction")
        return None
    if cells is None:
        return state.ratings.mask
    return state.ratings.mask & cells


def loss(state: ConMFState, cfg: ConMFConfig, cells: np.ndarray | None = None) -> float:
    p = predict(state.student_factors, state.course_factors)
    diff = p - state.ratings.values
    used = _recon_cells(state, cfg, cells)
    recon = float((diff**2).sum()) if used is None else float((diff[used] ** 2).sum())
    col_mean = state.transfer @ p
    constraint = cfg.beta * float(((state.course_means - col_mean) ** 2).sum())
    reg = cfg.gamma * float((state.student_factors**2).sum() + (state.course_factors**2).sum())
    total = recon + constraint + reg
    if not np.isfinite(total):
        raise NumericsError("non-finite factorization loss")
    return total


def grad(
    state: ConMFState, cfg: ConMFConfig, cells: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic gradients of :func:`loss` w.r.t. both factor matrices."""
    p = predict(state.student_factors, state.course_factors)
    diff = p - state.ratings.values
    used = _recon_cells(state, cfg, cells)
    dp = 2.0 * diff if used is None else 2.0 * diff * used
    m = state.ratings.shape[0]
    col_mean = state.transfer @ p
    dp = dp + (2.0 * cfg.beta / m) * (col_mean - state.course_means)[None, :]
    d_students = dp @ state.course_factors + 2.0 * cfg.gamma * state.student_factors
    d_courses = dp.T @ state.student_factors + 2.0 * cfg.gamma * state.course_factors
    return d_students, d_courses


def sgd_step(params, grads, lr: float):
    """One descent step ``params - lr * grads``; arrays or name->array dicts."""
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    if isinstance(params, dict):
        if set(params) != set(grads):
            raise ValueError("parameter and gradient names differ")
        return {name: params[name] - lr * grads[name] for name in params}
    return params - lr * grads


def backprop_through_encoder(
    d_students: np.ndarray,
    d_courses: np.ndarray,
    reps: NodeRepresentations,
    *,
    detached: bool = False,
) -> EncoderGrads:
    """Chain factor gradients through the encoder that produced E_s, E_c.

    ``detached`` short-circuits the chain rule: every encoder tensor (and the
    student table) gets an exactly-zero gradient.
    """
    if reps.cache is None:
        raise ValueError("missing forward cache; encode before backpropagating")
    if detached:
        gt = reps.cache.gt
        return EncoderGrads(
            shared=zero_shared_grads(reps.cache.params),
            student_table=np.zeros((len(gt.student_nodes), reps.cache.params.dim)),
        )
    d_out = node_grad_from_factors(reps, d_students, d_courses)
    return encode_backward(reps.cache, d_out)
