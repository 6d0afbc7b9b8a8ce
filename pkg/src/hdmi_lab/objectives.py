"""Entropy, mutual information and hypothesis-disparity objectives.

All quantities are in nats. Every log takes ``p + EPS`` as its argument.
The ``*_grad`` companions return d(value)/d(probabilities) so that callers
can chain through :func:`hdmi_lab.diffnet.softmax_backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

EPS = 1e-12
DIVERGENCES = ("cross_entropy", "kl")
REDUCTIONS = ("mean", "sum")
TARGET_OBJECTIVES = (
    "hdmi", "mi_ensemble", "mi_single", "hd_only", "cond_entropy_hd", "mi_l2", "mi_l2_source",
)


def _check_batch(p):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"probability batch must be 2-D, got shape {p.shape}")
    if p.shape[0] == 0:
        raise DomainError("empty batch")
    return p


def _entropy_terms(p):
    return -p * np.log(p + EPS)


def conditional_entropy(p):
    """Mean per-row entropy of a probability batch."""
    p = _check_batch(p)
    return float(np.sum(_entropy_terms(p)) / p.shape[0])


def conditional_entropy_grad(p):
    p = _check_batch(p)
    return (-np.log(p + EPS) - p / (p + EPS)) / p.shape[0]


def marginal_entropy(p):
    """Entropy of the column-mean (empirical label) distribution."""
    p = _check_batch(p)
    q = p.mean(axis=0)
    return float(np.sum(_entropy_terms(q)))


def marginal_entropy_grad(p):
    p = _check_batch(p)
    q = p.mean(axis=0)
    g = (-np.log(q + EPS) - q / (q + EPS)) / p.shape[0]
    return np.broadcast_to(g, p.shape).copy()


def mutual_information(p):
    return marginal_entropy(p) - conditional_entropy(p)


def mutual_information_grad(p):
    return marginal_entropy_grad(p) - conditional_entropy_grad(p)


def divergence(p, q, kind="cross_entropy"):
    """Batch mean of ``d(p_row, q_row)``."""
    p, q = _check_batch(p), _check_batch(q)
    if kind == "cross_entropy":
        rows = -np.sum(p * np.log(q + EPS), axis=1)
    elif kind == "kl":
        rows = np.sum(p * (np.log(p + EPS) - np.log(q + EPS)), axis=1)
    else:
        raise ConfigError(f"unknown divergence {kind!r}")
    return float(rows.mean())


def divergence_grads(p, q, kind="cross_entropy"):
    """Return ``(d/dp, d/dq)`` of :func:`divergence`."""
    n = p.shape[0]
    dq = -p / (q + EPS) / n
    if kind == "cross_entropy":
        dp = -np.log(q + EPS) / n
    elif kind == "kl":
        dp = (np.log(p + EPS) - np.log(q + EPS) + p / (p + EPS)) / n
    else:
        raise ConfigError(f"unknown divergence {kind!r}")
    return dp, dq


def _check_hd_args(ps, anchor, kind, reduction):
    if kind not in DIVERGENCES:
        raise ConfigError(f"unknown divergence {kind!r}")
    if reduction not in REDUCTIONS:
        raise ConfigError(f"unknown reduction {reduction!r}")
    if not 0 <= anchor < len(ps):
        raise DomainError(f"anchor {anchor} out of range for {len(ps)} hypotheses")
    shapes = {np.shape(p) for p in ps}
    if len(shapes) != 1:
        raise ShapeError(f"hypothesis batches differ in shape: {sorted(shapes)}")


def hypothesis_disparity(ps, anchor=0, kind="cross_entropy", reduction="mean"):
    """Disparity between the anchor and each other hypothesis.

    Pairs are ``d(anchor, other)``; ``reduction`` is over the M-1 pairs.
    """
    _check_hd_args(ps, anchor, kind, reduction)
    m = len(ps)
    if m == 1:
        return 0.0
    total = 0.0
    for j in range(m):
        if j != anchor:
            total += divergence(ps[anchor], ps[j], kind)
    return total / (m - 1) if reduction == "mean" else total


def hypothesis_disparity_grads(ps, anchor=0, kind="cross_entropy", reduction="mean",
                               stop_anchor_grad=False):
    _check_hd_args(ps, anchor, kind, reduction)
    m = len(ps)
    grads = [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in ps]
    if m == 1:
        return grads
    scale = 1.0 / (m - 1) if reduction == "mean" else 1.0
    for j in range(m):
        if j == anchor:
            continue
        dp, dq = divergence_grads(ps[anchor], ps[j], kind)
        if not stop_anchor_grad:
            grads[anchor] += scale * dp
        grads[j] += scale * dq
    return grads


@dataclass
class LossBreakdown:
    """Components of a target-phase objective.

    ``marginal_entropy`` is the mean over hypotheses that enter the MI
    term; ``conditional_entropy`` holds one value per such hypothesis.
    """

    objective: str
    total: float
    marginal_entropy: float
    conditional_entropy: np.ndarray
    hd: float
    reg: float
    lam: float
    extras: dict = field(default_factory=dict)

    @property
    def mi(self):
        return self.marginal_entropy - float(np.mean(self.conditional_entropy))

    def recombine(self):
        """Recompute ``total`` from the stored components."""
        cond = float(np.mean(self.conditional_entropy))
        if self.objective in ("hdmi", "mi_ensemble", "mi_single"):
            return cond - self.marginal_entropy + self.lam * self.hd
        if self.objective == "cond_entropy_hd":
            return cond + self.lam * self.hd
        if self.objective == "hd_only":
            return self.hd
        if self.objective in ("mi_l2", "mi_l2_source"):
            return cond - self.marginal_entropy + self.lam * self.reg
        raise ConfigError(f"unknown objective {self.objective!r}")

    def to_dict(self):
        return {
            "objective": self.objective,
            "total": self.total,
            "marginal_entropy": self.marginal_entropy,
            "conditional_entropy": [float(c) for c in self.conditional_entropy],
            "mi": self.mi,
            "hd": self.hd,
            "reg": self.reg,
            "lambda": self.lam,
        }


def _mi_ensemble_parts(ps):
    m = len(ps)
    marg = [marginal_entropy(p) for p in ps]
    cond = np.array([conditional_entropy(p) for p in ps])
    neg_mi = sum(c - h for c, h in zip(cond, marg)) / m
    return neg_mi, sum(marg) / m, cond


def hdmi_loss(ps, anchor=0, lam=0.5, kind="cross_entropy", reduction="mean"):
    """Mean negative MI over hypotheses plus ``lam`` times the disparity."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    neg_mi, marg, cond = _mi_ensemble_parts(ps)
    hd = hypothesis_disparity(ps, anchor, kind, reduction)
    total = neg_mi + lam * hd if lam else neg_mi
    return LossBreakdown("hdmi", total, marg, cond, hd, 0.0, lam)


def mi_ensemble_loss(ps):
    neg_mi, marg, cond = _mi_ensemble_parts(ps)
    return LossBreakdown("mi_ensemble", neg_mi, marg, cond, 0.0, 0.0, 0.0)


def conditional_entropy_loss(ps, lam=0.5, anchor=0, kind="cross_entropy", reduction="mean",
                             hd_only=False):
    """Conditional-entropy minimization with disparity; ``hd_only`` drops the entropy term."""
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}")
    cond = np.array([conditional_entropy(p) for p in ps])
    marg = sum(marginal_entropy(p) for p in ps) / len(ps)
    hd = hypothesis_disparity(ps, anchor, kind, reduction)
    if hd_only:
        return LossBreakdown("hd_only", hd, marg, cond, hd, 0.0, lam)
    mean_cond = float(np.sum(cond) / len(ps))
    total = mean_cond + lam * hd if lam else mean_cond
    return LossBreakdown("cond_entropy_hd", total, marg, cond, hd, 0.0, lam)


def ce_kl_identity_residual(ps, anchor=0, lam=0.5):
    """|L_CE - L_KL - lam (M-1) H(anchor)| with disparity summed over pairs."""
    if len(ps) < 2:
        raise DomainError("the identity needs at least two hypotheses")
    ce = hdmi_loss(ps, anchor, lam, "cross_entropy", "sum").total
    kl = hdmi_loss(ps, anchor, lam, "kl", "sum").total
    extra = lam * (len(ps) - 1) * conditional_entropy(ps[anchor])
    return abs(ce - kl - extra)


def l2_regularizer(values, reference=None):
    """Sum of squares of ``values`` (dict name -> array), or of deviations from ``reference``."""
    total = 0.0
    for name, w in values.items():
        d = w if reference is None else w - reference[name]
        total += float(np.sum(d * d))
    return total


def l2_regularizers(store_t, snapshot=None, mode="l2"):
    """L2 penalty over a parameter store.

    ``snapshot`` maps names to source values and is required for
    ``mode="l2_source"``.
    """
    values = {name: store_t.values(name) for name in store_t}
    if mode == "l2":
        return l2_regularizer(values)
    if mode == "l2_source":
        if snapshot is None:
            raise ConfigError("l2_source regularization needs a source snapshot")
        return l2_regularizer(values, snapshot)
    raise ConfigError(f"unknown regularizer mode {mode!r}")


def source_ce_loss(ps, labels):
    """Cross-entropy averaged over hypotheses and samples."""
    labels = np.asarray(labels)
    k = np.shape(ps[0])[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DomainError(f"labels must lie in [0, {k})")
    rows = np.arange(len(labels))
    total = 0.0
    for p in ps:
        p = _check_batch(p)
        total += float(np.mean(-np.log(p[rows, labels] + EPS)))
    return total / len(ps)


def source_ce_grads(ps, labels):
    labels = np.asarray(labels)
    m, n = len(ps), len(labels)
    rows = np.arange(n)
    grads = []
    for p in ps:
        g = np.zeros_like(p)
        g[rows, labels] = -1.0 / (p[rows, labels] + EPS) / (n * m)
        grads.append(g)
    return grads


def target_objective(objective, ps, anchor=0, lam=0.5, kind="cross_entropy", reduction="mean",
                     stop_anchor_grad=False):
    """Value and probability-gradients of a target-phase objective.

    Returns ``(LossBreakdown, grads)`` where ``grads[m]`` is d(total)/d(ps[m]).
    The L2 objectives return only their MI part here; the parameter
    penalty is added by the caller since it does not depend on ``ps``.
    """
    m = len(ps)
    if objective not in TARGET_OBJECTIVES:
        raise ConfigError(f"unknown objective {objective!r}")
    zeros = [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in ps]

    if objective == "mi_single":
        p = ps[anchor]
        b = mi_ensemble_loss([p])
        b.objective = "mi_single"
        grads = zeros
        grads[anchor] = -mutual_information_grad(p)
        return b, grads

    if objective in ("hdmi", "mi_ensemble", "mi_l2", "mi_l2_source"):
        grads = [-mutual_information_grad(p) / m for p in ps]
        if objective == "hdmi":
            b = hdmi_loss(ps, anchor, lam, kind, reduction)
            if lam:
                hd_g = hypothesis_disparity_grads(ps, anchor, kind, reduction, stop_anchor_grad)
                grads = [g + lam * h for g, h in zip(grads, hd_g)]
        else:
            b = mi_ensemble_loss(ps)
            b.objective = objective
            b.lam = lam
        return b, grads

    hd_g = hypothesis_disparity_grads(ps, anchor, kind, reduction, stop_anchor_grad)
    if objective == "hd_only":
        return conditional_entropy_loss(ps, lam, anchor, kind, reduction, hd_only=True), hd_g
    b = conditional_entropy_loss(ps, lam, anchor, kind, reduction)
    grads = [conditional_entropy_grad(p) / m for p in ps]
    if lam:
        grads = [g + lam * h for g, h in zip(grads, hd_g)]
    return b, grads
