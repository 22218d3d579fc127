"""Group-robust objective: per-group losses, simplex weight dynamics, baselines.

Group weights live on the probability simplex and move by exponentiated
(mirror) ascent on the detached per-group losses.  Three update rules exist:

``vanilla_eg``
    ``w_g <- w_g exp(eta l_g) / Z``.  Groups missing from the batch have
    ``l_g = 0`` and lose mass through the renormalisation.
``kl_mirror``
    Mirror-ascent step on ``<l, w> - alpha KL(w || u)``:
    ``w_g <- w_g^b u_g^(1-b) exp(b eta l_g) / Z`` with ``b = 1 / (1 + eta alpha)``.
    Its fixed point under constant losses is ``u_g exp(l_g / alpha) / Z``;
    ``alpha = 0`` is exactly ``vanilla_eg`` and ``alpha -> inf`` pins ``w = u``.
``kl_gradient``
    ``vanilla_eg`` on the losses shifted by the KL gradient,
    ``l_g - alpha (log(w_g / u_g) + 1)``, clipped to ``[-50, 50]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

UPDATE_MODES = ("vanilla_eg", "kl_mirror", "kl_gradient")
SIMPLEX_TOL = 1e-9
KL_GRADIENT_CLIP = 50.0


@dataclass
class DroConfig:
    eta_dro: float = 0.01
    alpha: float = 0.5
    update_mode: str = "kl_mirror"

    def validate(self) -> "DroConfig":
        if not self.eta_dro > 0:
            raise ValueError(f"dro.eta_dro must be positive, got {self.eta_dro}")
        if not self.alpha >= 0:
            raise ValueError(f"dro.alpha must be >= 0, got {self.alpha}")
        if self.update_mode not in UPDATE_MODES:
            raise ValueError(f"dro.update_mode must be one of {UPDATE_MODES}, got {self.update_mode!r}")
        return self


@dataclass
class GroupWeights:
    w: np.ndarray

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)

    @classmethod
    def uniform(cls, num_groups: int) -> "GroupWeights":
        if num_groups < 1:
            raise ValueError("need at least one group")
        return cls(np.full(num_groups, 1.0 / num_groups))

    @property
    def group_count(self) -> int:
        return len(self.w)

    def check(self) -> None:
        if self.w.ndim != 1 or not np.all(np.isfinite(self.w)) or np.any(self.w < 0) \
                or abs(self.w.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"group weights are not on the simplex: {self.w.tolist()}")


@dataclass
class GroupLossReport:
    """Detached per-group mean losses and counts; ``node`` keeps the graph."""

    losses: np.ndarray
    counts: np.ndarray
    node: Tensor | None = field(default=None, repr=False)


def group_losses(per_sample, groups, num_groups: int) -> GroupLossReport:
    """Mean loss per group; absent groups report loss 0 and count 0.

    ``per_sample`` may be a plain vector or a :class:`Tensor`; in the latter case
    ``report.node`` is a differentiable ``[num_groups]`` tensor of the same means.
    """
    g = np.asarray(groups, dtype=np.int64).reshape(-1)
    if g.size and (g.min() < 0 or g.max() >= num_groups):
        raise ValueError(f"group ids must lie in [0, {num_groups}), got {sorted(set(g.tolist()))}")
    losses = per_sample if isinstance(per_sample, Tensor) else ad.Tensor(per_sample)
    if losses.data.reshape(-1).shape[0] != g.size:
        raise ValueError(f"{losses.data.size} losses for {g.size} group ids")
    counts = np.bincount(g, minlength=num_groups).astype(np.int64)
    if g.size == 0:
        node = ad.Tensor(np.zeros(num_groups))
    else:
        mask = (g[None, :] == np.arange(num_groups)[:, None]).astype(np.float64)
        sums = (losses.reshape(1, g.size) * mask).sum(axis=1)
        node = sums / np.maximum(counts, 1).astype(np.float64)
    return GroupLossReport(node.data.copy(), counts, node if isinstance(per_sample, Tensor) else None)


def _normalise(z: np.ndarray) -> np.ndarray:
    return z / z.sum()


def update_weights(state: GroupWeights, report: GroupLossReport | np.ndarray,
                   config: DroConfig) -> GroupWeights:
    """One multiplicative step of the group weights on detached losses."""
    state.check()
    losses = np.array(report.losses if isinstance(report, GroupLossReport) else report,
                      dtype=np.float64)
    if losses.shape != state.w.shape:
        raise ValueError(f"{losses.shape[0]} losses for {state.group_count} groups")
    w, eta, alpha = state.w, config.eta_dro, config.alpha
    if config.update_mode == "vanilla_eg":
        z = w * np.exp(eta * (losses - losses.max()))
    elif config.update_mode == "kl_mirror":
        beta = 1.0 / (1.0 + eta * alpha)
        u = 1.0 / state.group_count
        z = w ** beta * u ** (1.0 - beta) * np.exp(beta * eta * (losses - losses.max()))
    elif config.update_mode == "kl_gradient":
        u = 1.0 / state.group_count
        with np.errstate(divide="ignore"):
            shifted = losses - alpha * (np.log(w / u) + 1.0)
        shifted = np.clip(shifted, -KL_GRADIENT_CLIP, KL_GRADIENT_CLIP)
        z = w * np.exp(eta * (shifted - shifted.max()))
    else:
        raise ValueError(f"unknown update mode {config.update_mode!r}")
    return GroupWeights(_normalise(z))


def kl_divergence(w, u=None) -> float:
    """KL(w || u) with 0 log 0 = 0; ``u`` defaults to uniform."""
    w = np.asarray(w.w if isinstance(w, GroupWeights) else w, dtype=np.float64)
    u = np.full(w.shape, 1.0 / len(w)) if u is None else np.asarray(u, dtype=np.float64)
    nz = w > 0
    return float(max(np.sum(w[nz] * np.log(w[nz] / u[nz])), 0.0))


def total_loss(report: GroupLossReport, weights: GroupWeights, alpha: float) -> Tensor:
    """``sum_g w_g l_g + alpha KL(w || u)``.

    The weights and the KL term enter as constants, so the gradient to the
    model reaches it only through the per-group loss nodes.
    """
    node = report.node if report.node is not None else ad.Tensor(report.losses)
    weighted = (node * weights.w.copy()).sum()
    return weighted + alpha * kl_divergence(weights)


# baselines ------------------------------------------------------------------

def focal_loss(logits, labels, gamma: float = 2.0) -> Tensor:
    """Per-sample ``(1 - p_t)^gamma * -log p_t``."""
    if gamma < 0:
        raise ValueError(f"focal gamma must be >= 0, got {gamma}")
    logits = ad.tensor(logits)
    y = ad._check_labels(labels, logits.shape[1])
    log_pt = ad.take_along_last(ad.log_softmax(logits), y)
    if gamma == 0:
        return -log_pt
    return ((1.0 - ad.exp(log_pt)) ** gamma) * (-log_pt)


def inverse_frequency_weights(class_counts) -> np.ndarray:
    """``N / (C N_c)``: mean-one weights, larger for rarer classes."""
    counts = np.asarray(class_counts, dtype=np.float64)
    if np.any(counts <= 0):
        raise ValueError(f"every class needs a positive frequency, got {counts.tolist()}")
    return counts.sum() / (len(counts) * counts)


def weighted_ce_baseline(logits, labels, class_frequencies) -> Tensor:
    return ad.cross_entropy(logits, labels, inverse_frequency_weights(class_frequencies))


# group definitions -----------------------------------------------------------

def group_index_task2(gender: int, class_id: int, literal: bool = False) -> int:
    """Joint (gender, class) group id.

    The default ``4 * gender + class`` is a bijection onto ``0..7``.  With
    ``literal=True`` the ``2 * gender + class`` form is returned; it collides
    (e.g. (1, 0) and (0, 2) both give 2) and is kept only for comparison.
    """
    if gender not in (0, 1):
        raise ValueError(f"gender must be 0 or 1, got {gender}")
    if class_id not in (0, 1, 2, 3):
        raise ValueError(f"class id must lie in 0..3, got {class_id}")
    return 2 * gender + class_id if literal else 4 * gender + class_id
