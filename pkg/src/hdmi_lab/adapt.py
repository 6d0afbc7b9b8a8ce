"""Source training and unsupervised target adaptation loops."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .diffnet import sgd_step, softmax, softmax_backward
from .errors import ConfigError
from .hypotheses import (
    HypothesisSet, SourceSnapshot, build_set, default_architecture, ensemble_mean, predict_all,
    to_target,
)
from .objectives import (
    DIVERGENCES, REDUCTIONS, TARGET_OBJECTIVES, l2_regularizer, source_ce_grads, source_ce_loss,
    target_objective,
)
from .shiftdata import Dataset, cycle_batches, generate

# independent RNG streams derived from one seed
_STREAM_MODEL, _STREAM_SOURCE, _STREAM_TARGET, _STREAM_ANCHOR = 0, 1, 2, 3


@dataclass
class SourceConfig:
    M: int = 2
    variant: str = "IC"
    dropout_rate: float = 0.5
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-2
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    extractor_lr_multiplier: float = 1.0
    seed: int = 1
    eval_every: int = 25

    def validate(self):
        if self.M < 1:
            raise ConfigError("M must be >= 1")
        if self.steps < 0:
            raise ConfigError("source steps must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not self.extractor_lr_multiplier > 0:
            raise ConfigError("extractor_lr_multiplier must be > 0")
        return self


@dataclass
class AdaptConfig:
    objective: str = "hdmi"
    lam: float = 0.5
    divergence: str = "cross_entropy"
    reduction: str = "mean"
    anchor_policy: str | int = "seeded_random"
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    extractor_lr_multiplier: float = 1.0
    freeze_classifiers: bool = True
    shared_extractor: bool = True
    loss_dropout: bool = True
    stop_anchor_grad: bool = False
    seed: int = 1
    eval_every: int = 25

    def validate(self, snapshot_available=True):
        if self.objective not in TARGET_OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}; known: {', '.join(TARGET_OBJECTIVES)}")
        if self.divergence not in DIVERGENCES:
            raise ConfigError(f"unknown divergence {self.divergence!r}")
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"unknown reduction {self.reduction!r}")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.steps < 1:
            raise ConfigError("adaptation steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        if not (self.anchor_policy == "seeded_random" or isinstance(self.anchor_policy, int)):
            raise ConfigError(f"anchor policy must be 'seeded_random' or an index, got {self.anchor_policy!r}")
        if self.objective == "mi_l2_source" and not snapshot_available:
            raise ConfigError("objective mi_l2_source needs a source snapshot")
        return self


@dataclass
class RunRecord:
    step: int
    loss: dict
    acc_anchor: float | None = None
    acc_ensemble: float | None = None
    disagreement: float | None = None
    wall_time: float = 0.0


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def append(self, record):
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("run log steps must increase")
        self.records.append(record)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def write_csv(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "total", "mi", "hd", "acc_anchor", "acc_ensemble", "disagreement"])
            for r in self.records:
                w.writerow([r.step, repr(r.loss.get("total")), repr(r.loss.get("mi")),
                            repr(r.loss.get("hd")), repr(r.acc_anchor), repr(r.acc_ensemble),
                            repr(r.disagreement)])


def make_rng(seed, stream):
    return np.random.default_rng([int(seed), stream])


def resolve_anchor(policy, M, seed):
    if policy == "seeded_random":
        return int(make_rng(seed, _STREAM_ANCHOR).integers(M))
    if not 0 <= int(policy) < M:
        raise ConfigError(f"anchor index {policy} out of range for {M} hypotheses")
    return int(policy)


def new_source_set(in_dim, num_classes, cfg):
    ext, clf = default_architecture(in_dim, num_classes, cfg.dropout_rate)
    hset = build_set(ext, clf, cfg.M, cfg.variant, seed=cfg.seed)
    for store in hset.extractor_stores():
        store.set_lr_multiplier(cfg.extractor_lr_multiplier)
    return hset


def make_evaluator(x, labels):
    """Evaluation callback for the training loops; labels never reach the loop itself."""
    def evaluate(hset):
        ps = predict_all(hset, x, "eval")
        anchor = hset.anchor or 0
        ens = ensemble_mean(ps)
        dis = analysis.mean_disagreement(analysis.disagreement_rates(ps)[0]) if len(ps) > 1 else 0.0
        return analysis.accuracy(ps[anchor], labels), analysis.accuracy(ens, labels), dis
    return evaluate


def train_source(hset, source, cfg, evaluate=None):
    """Jointly minimize the mean cross-entropy of all heads on labeled source data."""
    cfg.validate()
    if not isinstance(source, Dataset) or source.y is None:
        raise ConfigError("source training needs a labeled dataset")
    log = RunLog()
    if evaluate is None:
        evaluate = make_evaluator(source.x, source.y)
    rng = make_rng(cfg.seed, _STREAM_SOURCE)
    batches = cycle_batches(len(source), cfg.batch_size, seed=int(rng.integers(2**31)))
    stores = hset.trainable_stores()
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        idx = next(batches)
        xb, yb = source.x[idx], source.y[idx]
        logits, ext_tapes, clf_tapes = hset.forward_heads(xb, "train", rng=rng)
        ps = [softmax(z) for z in logits]
        loss = source_ce_loss(ps, yb)
        dps = source_ce_grads(ps, yb)
        hset.backward_heads(ext_tapes, clf_tapes, [softmax_backward(p, d) for p, d in zip(ps, dps)])
        for store in stores:
            sgd_step(store, cfg.lr, cfg.momentum, cfg.nesterov, cfg.weight_decay)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc_a, acc_e, dis = evaluate(hset)
            log.append(RunRecord(step, {"total": loss, "mi": None, "hd": None}, acc_a, acc_e, dis,
                                 time.perf_counter() - t0))
    return hset, log


def target_loss_and_grads(hset, xb, cfg, anchor, snapshot=None, mode="train", rng=None):
    """Objective value for one batch; accumulates parameter grads into the set.

    Returns the :class:`LossBreakdown`. The L2 penalties run over the
    trainable stores only.
    """
    logits, ext_tapes, clf_tapes = hset.forward_heads(xb, mode, rng=rng, dropout=cfg.loss_dropout)
    ps = [softmax(z) for z in logits]
    breakdown, dps = target_objective(cfg.objective, ps, anchor, cfg.lam, cfg.divergence,
                                      cfg.reduction, cfg.stop_anchor_grad)
    hset.backward_heads(ext_tapes, clf_tapes, [softmax_backward(p, d) for p, d in zip(ps, dps)])
    if cfg.objective in ("mi_l2", "mi_l2_source"):
        keyed = dict((id(s), k) for k, s in hset.named_stores())
        reg = 0.0
        for store in hset.trainable_stores():
            values = {name: store.values(name) for name in store}
            ref = None
            if cfg.objective == "mi_l2_source":
                if snapshot is None:
                    raise ConfigError("objective mi_l2_source needs a source snapshot")
                ref = snapshot[keyed[id(store)]]
            reg += l2_regularizer(values, ref)
            for name in store:
                d = values[name] if ref is None else values[name] - ref[name]
                store.grads(name)[...] += 2.0 * cfg.lam * d
        breakdown.reg = reg
        breakdown.total = breakdown.total + cfg.lam * reg
    return breakdown


def adapt_target(hset, target, cfg, snapshot=None, evaluate=None):
    """Adapt a target set on unlabeled data by minimizing ``cfg.objective``.

    ``evaluate`` (optional) is called every ``cfg.eval_every`` steps with
    the set and returns (anchor acc, ensemble acc, disagreement); it is the
    only route by which labels can enter the run log.
    """
    cfg.validate(snapshot_available=snapshot is not None)
    if not isinstance(target, Dataset) or target.y is not None:
        raise ConfigError("target adaptation takes an unlabeled dataset")
    hset.frozen_classifiers = cfg.freeze_classifiers
    anchor = resolve_anchor(cfg.anchor_policy, hset.M, cfg.seed)
    hset.anchor = anchor
    for store in hset.extractor_stores():
        store.set_lr_multiplier(cfg.extractor_lr_multiplier)
    log = RunLog()
    rng = make_rng(cfg.seed, _STREAM_TARGET)
    batches = cycle_batches(len(target), cfg.batch_size, seed=int(rng.integers(2**31)))
    trainable = hset.trainable_stores()
    frozen = [] if not cfg.freeze_classifiers else hset.classifier_stores()
    t0 = time.perf_counter()
    for step in range(1, cfg.steps + 1):
        xb = target.x[next(batches)]
        breakdown = target_loss_and_grads(hset, xb, cfg, anchor, snapshot, "train", rng)
        for store in frozen:
            store.zero_grad()
        for store in trainable:
            sgd_step(store, cfg.lr, cfg.momentum, cfg.nesterov, cfg.weight_decay)
        if step % cfg.eval_every == 0 or step == cfg.steps:
            acc_a = acc_e = dis = None
            if evaluate is not None:
                acc_a, acc_e, dis = evaluate(hset)
            log.append(RunRecord(step, breakdown.to_dict(), acc_a, acc_e, dis, time.perf_counter() - t0))
    return hset, log


def source_only_summary(hset, x, labels):
    ps = predict_all(hset, x, "eval")
    rep = analysis.analyze(ps, labels, anchor=hset.anchor or 0)
    return rep, {
        "accuracy_anchor": rep.accuracy_anchor,
        "accuracy_ensemble": rep.accuracy_ensemble,
        "mean_disagreement": rep.mean_disagreement,
        "brier": rep.brier,
        "ece": rep.ece,
    }


def final_report(hset, x, labels, reference_profile=None):
    ps = predict_all(hset, x, "eval")
    return analysis.analyze(ps, labels, anchor=hset.anchor or 0, reference_profile=reference_profile)


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_report_artifacts(out, report, ps):
    out = Path(out)
    write_json(out / "report.json", report.to_dict())
    analysis.write_bins_csv(report.bins, out / "bins.csv")
    if report.disagreement is not None:
        analysis.write_matrix_csv(report.disagreement, out / "disagreement.csv")
        analysis.write_matrix_csv(report.kl, out / "klmatrix.csv")
    analysis.write_predictions_csv(ps, out / "predictions.csv")


def run_pipeline(spec, source_cfg, adapt_cfg, out_dir=None, source_set=None):
    """Generate data, train on source, adapt on target, analyze.

    ``source_set`` reuses an already trained source set (it is copied, not
    mutated). With ``out_dir`` every artifact of the run is written there.
    """
    source_cfg.validate()
    adapt_cfg.validate()
    pair = generate(spec)
    if source_set is None:
        source_set = new_source_set(pair.source.dim, spec.K, source_cfg)
        source_set, source_log = train_source(source_set, pair.source, source_cfg)
    else:
        source_log = RunLog()
    hset, snapshot = to_target(source_set, adapt_cfg.freeze_classifiers, adapt_cfg.shared_extractor)
    hset.anchor = resolve_anchor(adapt_cfg.anchor_policy, hset.M, adapt_cfg.seed)
    before, before_summary = source_only_summary(hset, pair.target.x, pair.target_labels)
    evaluate = make_evaluator(pair.target.x, pair.target_labels)
    hset, log = adapt_target(hset, pair.target, adapt_cfg, snapshot, evaluate)
    report = final_report(hset, pair.target.x, pair.target_labels, before.error_profile)
    acc_curve = log.column("acc_anchor")
    report.extra.update({
        "source_only": before_summary,
        "classifiers_match_source": snapshot.matches(hset, "classifier"),
        "runlog": "runlog.csv",
        "final_loss": log.records[-1].loss if log.records else None,
        "max_acc_anchor": max(acc_curve) if acc_curve else None,
        "config": {
            "shift": spec.to_dict(),
            "source": asdict(source_cfg),
            "adapt": asdict(adapt_cfg),
        },
    })
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", report.extra["config"])
        write_json(out / "source.ckpt.json", source_set.to_dict())
        write_json(out / "adapted.ckpt.json", hset.to_dict())
        log.write_csv(out / "runlog.csv")
        source_log.write_csv(out / "source_runlog.csv")
        write_report_artifacts(out, report, predict_all(hset, pair.target.x, "eval"))
    return report, hset, log


__all__ = [
    "AdaptConfig", "HypothesisSet", "RunLog", "RunRecord", "SourceConfig", "SourceSnapshot",
    "adapt_target", "new_source_set", "run_pipeline", "target_loss_and_grads", "train_source",
]
