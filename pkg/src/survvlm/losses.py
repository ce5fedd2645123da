"""Training objectives.

Language-model NLL on answer tokens, Cox partial likelihood and DeepHit
likelihood for the survival head, the two dispersion regularisers, the
alignment term and their weighted total.  All take and return
:class:`~survvlm.autodiff.Tensor` so gradients reach the model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .survstats import SurvivalRecord

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class TimeGrid:
    """K bins over event time; ``edges`` has K + 1 strictly increasing values."""

    edges: tuple[float, ...]

    def __post_init__(self):
        e = tuple(float(x) for x in self.edges)
        if len(e) < 2:
            raise ValueError("a time grid needs at least one bin")
        if e[0] != 0.0:
            raise ValueError("first edge must be 0")
        if any(b <= a for a, b in zip(e, e[1:])):
            raise ValueError("edges must be strictly increasing")
        object.__setattr__(self, "edges", e)

    @property
    def K(self) -> int:
        return len(self.edges) - 1

    def bin_of(self, t: float) -> int:
        """1-indexed bin k with edges[k-1] <= t < edges[k]; the last bin is closed."""
        if t < 0 or t > self.edges[-1]:
            raise ValueError(f"time {t} outside grid coverage [0, {self.edges[-1]}]")
        k = int(np.searchsorted(self.edges, t, side="right"))
        return min(k, self.K)


@dataclass(frozen=True)
class LossBreakdown:
    lm: float
    surv: float
    dispersion: float
    alignment: float
    total: float
    alpha: float
    graph: Tensor | None = None

    def as_dict(self) -> dict[str, float]:
        return {
            "lm": self.lm,
            "surv": self.surv,
            "dispersion": self.dispersion,
            "alignment": self.alignment,
            "total": self.total,
        }


def lm_loss(logits: Tensor, target_ids: Sequence[int], loss_mask: Sequence[bool]) -> Tensor:
    """Mean negative log-likelihood of the masked (answer) targets.

    Batched input ([B, L, V] logits with [B, L] targets and mask) averages
    over every masked position in the batch.
    """
    logits = ad.as_tensor(logits)
    targets = np.asarray(target_ids, dtype=np.int64)
    mask = np.asarray(loss_mask, dtype=bool)
    if logits.shape[-1] < 2:
        raise ValueError("vocabulary must have at least two entries")
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ValueError("logits, targets and mask disagree in shape")
    if not mask.any():
        raise ValueError("no supervised tokens")
    sel = np.nonzero(mask)
    tgt = targets[sel]
    if tgt.min() < 0 or tgt.max() >= logits.shape[-1]:
        raise ValueError("target id outside the vocabulary")
    logp = ad.log_softmax(logits[sel], axis=-1)
    picked = logp[np.arange(len(tgt)), tgt]
    return -picked.sum() * (1.0 / len(tgt))


def _stack_scalars(values) -> Tensor:
    if isinstance(values, Tensor):
        return values.reshape(-1)
    return ad.stack([ad.as_tensor(v).reshape(()) for v in values])


def cox_loss(risks, records: Sequence[SurvivalRecord]) -> Tensor:
    """Negative Cox partial log-likelihood averaged over events (Breslow ties)."""
    h = _stack_scalars(risks)
    if h.shape[0] != len(records):
        raise ValueError("one risk per record required")
    times = np.array([r.time for r in records])
    events = np.array([r.event for r in records], dtype=bool)
    n_events = int(events.sum())
    if n_events == 0:
        raise ValueError("no events for partial likelihood")
    at_risk = times[None, :] >= times[events][:, None]  # [E, N]
    scores = ad.where(at_risk, h.reshape(1, -1) + np.zeros(at_risk.shape), -np.inf)
    lse = ad.logsumexp(scores, axis=1)
    return -(h[np.nonzero(events)[0]] - lse).sum() * (1.0 / n_events)


def deephit_loss(probs: Tensor, records: Sequence[SurvivalRecord], grid: TimeGrid) -> Tensor:
    """Discrete-time likelihood: event bin mass for events, tail mass past the
    censoring bin for censored records (zero contribution when censored in
    the last bin)."""
    probs = ad.as_tensor(probs)
    N, K = probs.shape
    if N != len(records):
        raise ValueError("one probability row per record required")
    if K != grid.K:
        raise ValueError(f"probabilities have {K} bins, grid has {grid.K}")
    if np.abs(probs.data.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("probability rows must sum to 1")
    bins = np.array([grid.bin_of(r.time) for r in records]) - 1
    events = np.array([r.event for r in records], dtype=bool)
    terms = []
    ev = np.nonzero(events)[0]
    if len(ev):
        p_event = probs[ev, bins[ev]]
        terms.append(ad.log(ad.clamp_min(p_event, PROB_FLOOR)).sum())
    cens = np.nonzero(~events & (bins < K - 1))[0]
    if len(cens):
        tail_mask = (np.arange(K)[None, :] > bins[cens][:, None]).astype(np.float64)
        tail = (probs[cens] * tail_mask).sum(axis=1)
        terms.append(ad.log(ad.clamp_min(tail, PROB_FLOOR)).sum())
    if not terms:
        return Tensor(0.0) * probs.sum()
    total = terms[0] if len(terms) == 1 else terms[0] + terms[1]
    return -total * (1.0 / N)


def dispersion_continuous(embeddings: Tensor, times: Sequence[float], sigma: float) -> Tensor:
    """Time-similarity-weighted mean pairwise distance over ordered pairs."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    z = ad.as_tensor(embeddings)
    M = z.shape[0]
    if M <= 1:
        return Tensor(0.0)
    t = np.asarray(times, dtype=np.float64)
    if len(t) != M:
        raise ValueError("one time per embedding required")
    ii, jj = np.nonzero(~np.eye(M, dtype=bool))
    w = np.exp(-((t[ii] - t[jj]) ** 2) / (2.0 * sigma * sigma))
    dist = ad.norm(z[ii] - z[jj], axis=-1)
    return (dist * w).sum() * (1.0 / len(ii))


def dispersion_discrete(group_means: Tensor, tau: float) -> Tensor:
    """(1/K) sum_i log[(1/K) sum_{j != i} exp(mu_i . mu_j / tau)]."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    mu = ad.as_tensor(group_means)
    K = mu.shape[0]
    if K < 2:
        raise ValueError("need two groups")
    sims = (mu @ mu.T) * (1.0 / tau)
    off = ad.where(~np.eye(K, dtype=bool), sims, -np.inf)
    return (ad.logsumexp(off, axis=1) - math.log(K)).sum() * (1.0 / K)


def alignment_loss(z_surv: Tensor, z_pooled: Tensor) -> Tensor:
    z_surv, z_pooled = ad.as_tensor(z_surv), ad.as_tensor(z_pooled)
    if z_surv.shape != z_pooled.shape:
        raise ValueError(f"dimension mismatch: {z_surv.shape} vs {z_pooled.shape}")
    return ad.norm(z_surv - z_pooled, axis=-1)


def total_loss(lm, surv, dispersion, alignment, alpha: float) -> LossBreakdown:
    """L = lm + alpha * surv + dispersion + alignment.

    Terms may be tensors or plain numbers; the returned breakdown carries the
    differentiable total in ``graph``.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    lm, surv, dispersion, alignment = (ad.as_tensor(x).reshape(()) for x in (lm, surv, dispersion, alignment))
    graph = lm + surv * alpha + dispersion + alignment
    return LossBreakdown(
        lm=lm.item(),
        surv=surv.item(),
        dispersion=dispersion.item(),
        alignment=alignment.item(),
        total=graph.item(),
        alpha=float(alpha),
        graph=graph,
    )
