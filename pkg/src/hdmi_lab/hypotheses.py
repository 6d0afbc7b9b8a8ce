"""Sets of hypotheses sharing a feature extractor.

A hypothesis is ``classifier_m(extractor(x))``. Two ways of building the
M classifier heads are supported:

* ``IC``: independently initialized heads, one parameter store each.
* ``MC``: one head whose M members differ only by a fixed dropout mask.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from .diffnet import FORMAT_VERSION, LayerSpec, Network, softmax
from .errors import ConfigError, DomainError, ShapeError

VARIANTS = ("IC", "MC")


def default_architecture(in_dim, num_classes, dropout_rate=0.5, width=64, bottleneck=32):
    extractor = [
        LayerSpec(in_dim, width, "relu"),
        LayerSpec(width, bottleneck, "relu"),
    ]
    classifier = [
        LayerSpec(bottleneck, bottleneck, "relu", dropout_rate),
        LayerSpec(bottleneck, num_classes, "identity"),
    ]
    return extractor, classifier


class HypothesisSet:
    """Extractor(s) plus M classifier heads.

    ``extractors`` has one network when the extractor is shared and M
    networks in the independent-extractor ablation.
    """

    def __init__(self, extractors, classifiers, variant="IC", num_classes=None, seed=0,
                 frozen_classifiers=False, anchor=None):
        if not classifiers:
            raise ConfigError("a hypothesis set needs at least one classifier")
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}")
        if len(extractors) not in (1, len(classifiers)):
            raise ConfigError("need one shared extractor or one per classifier")
        k = classifiers[0].out_dim
        for ext in extractors:
            for clf in classifiers:
                if clf.in_dim != ext.out_dim:
                    raise ShapeError("classifier input width differs from extractor output width")
                if clf.out_dim != k:
                    raise ShapeError("all classifiers must map to the same number of classes")
        if variant == "MC" and len({id(c.store) for c in classifiers}) != 1:
            raise ConfigError("MC heads must share a single parameter store")
        self.extractors = list(extractors)
        self.classifiers = list(classifiers)
        self.variant = variant
        self.num_classes = k if num_classes is None else int(num_classes)
        self.seed = int(seed)
        self.frozen_classifiers = bool(frozen_classifiers)
        self.anchor = anchor

    @property
    def M(self):
        return len(self.classifiers)

    @property
    def shared_extractor(self):
        return len(self.extractors) == 1

    @property
    def in_dim(self):
        return self.extractors[0].in_dim

    def extractor_for(self, m):
        return self.extractors[0] if self.shared_extractor else self.extractors[m]

    def mask_id(self, m):
        return m if self.variant == "MC" else None

    def _unique(self, nets):
        seen, out = set(), []
        for net in nets:
            if id(net.store) not in seen:
                seen.add(id(net.store))
                out.append(net.store)
        return out

    def extractor_stores(self):
        return self._unique(self.extractors)

    def classifier_stores(self):
        return self._unique(self.classifiers)

    def trainable_stores(self):
        stores = self.extractor_stores()
        if not self.frozen_classifiers:
            stores += self.classifier_stores()
        return stores

    def named_stores(self):
        """Stable ``(key, store)`` pairs covering every parameter once."""
        out = [(f"extractor.{i}", s) for i, s in enumerate(self.extractor_stores())]
        out += [(f"classifier.{i}", s) for i, s in enumerate(self.classifier_stores())]
        return out

    def num_params(self):
        return sum(s.num_params() for _, s in self.named_stores())

    def copy(self):
        return copy.deepcopy(self)

    def forward_heads(self, x, mode="eval", rng=None, dropout=True):
        """Forward every head; returns ``(logits, ext_tapes, clf_tapes)``.

        The shared extractor runs once. MC heads apply their fixed masks
        whenever ``dropout`` is on, in either mode; IC heads only drop out
        in train mode.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input (N, {self.in_dim}), got {x.shape}")
        feats, ext_tapes = [], []
        for ext in self.extractors:
            f, t = ext.forward(x, mode, rng=rng)
            feats.append(f)
            ext_tapes.append(t)
        logits, clf_tapes = [], []
        for m, clf in enumerate(self.classifiers):
            f = feats[0] if self.shared_extractor else feats[m]
            if self.variant == "MC":
                head_mode = "train" if dropout else "eval"
                z, t = clf.forward(f, head_mode, mask_id=m)
            else:
                head_mode = mode if dropout else "eval"
                z, t = clf.forward(f, head_mode, rng=rng)
            logits.append(z)
            clf_tapes.append(t)
        return logits, ext_tapes, clf_tapes

    def backward_heads(self, ext_tapes, clf_tapes, dlogits):
        """Backprop per-head logit cotangents through classifiers and extractor(s)."""
        dfeats = [clf.backward(t, d) for clf, t, d in zip(self.classifiers, clf_tapes, dlogits)]
        if self.shared_extractor:
            total = dfeats[0]
            for d in dfeats[1:]:
                total = total + d
            return [self.extractors[0].backward(ext_tapes[0], total)]
        return [ext.backward(t, d) for ext, t, d in zip(self.extractors, ext_tapes, dfeats)]

    def to_dict(self):
        if self.variant == "MC":
            classifiers = [self.classifiers[0].to_dict()]
        else:
            classifiers = [c.to_dict() for c in self.classifiers]
        return {
            "format_version": FORMAT_VERSION,
            "extractor": [e.to_dict() for e in self.extractors],
            "classifiers": classifiers,
            "num_hypotheses": self.M,
            "variant": self.variant,
            "num_classes": self.num_classes,
            "frozen_classifiers": self.frozen_classifiers,
            "anchor": self.anchor,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
        extractors = [Network.from_dict(d) for d in doc["extractor"]]
        if doc["variant"] == "MC":
            head = Network.from_dict(doc["classifiers"][0])
            classifiers = [head] + [
                Network(head.specs, head.store, head.seed, head.mask_seed, init=False)
                for _ in range(doc["num_hypotheses"] - 1)
            ]
        else:
            classifiers = [Network.from_dict(d) for d in doc["classifiers"]]
        return cls(extractors, classifiers, doc["variant"], doc["num_classes"], doc["seed"],
                   doc.get("frozen_classifiers", False), doc.get("anchor"))


def build_set(extractor_specs, classifier_specs, M=2, variant="IC", seed=0):
    """Build M hypotheses over one freshly initialized extractor."""
    if int(M) < 1:
        raise ConfigError(f"number of hypotheses must be >= 1, got {M}")
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    ss = np.random.SeedSequence(int(seed))
    ext_seed, *head_seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(M + 1)]
    extractor = Network(extractor_specs, seed=ext_seed)
    if variant == "IC":
        classifiers = [Network(classifier_specs, seed=s) for s in head_seeds]
    else:
        head = Network(classifier_specs, seed=head_seeds[0])
        classifiers = [head] + [
            Network(head.specs, head.store, head.seed, head.mask_seed, init=False)
            for _ in range(M - 1)
        ]
    return HypothesisSet([extractor], classifiers, variant, seed=seed)


def predict_all(hset, x, mode="eval", rng=None, dropout=True):
    """Label probabilities from every hypothesis."""
    logits, _, _ = hset.forward_heads(x, mode, rng=rng, dropout=dropout)
    return [softmax(z) for z in logits]


def ensemble_predict(hset, x, mode="eval", rng=None, dropout=True):
    ps = predict_all(hset, x, mode, rng, dropout)
    return ensemble_mean(ps)


def ensemble_mean(ps):
    total = ps[0]
    for p in ps[1:]:
        total = total + p
    return total / len(ps)


def anchor_predict(hset, x, anchor=None, mode="eval", rng=None, dropout=True):
    anchor = hset.anchor if anchor is None else anchor
    if anchor is None:
        anchor = 0
    if not 0 <= anchor < hset.M:
        raise DomainError(f"anchor {anchor} out of range for {hset.M} hypotheses")
    return predict_all(hset, x, mode, rng, dropout)[anchor]


@dataclass(frozen=True)
class SourceSnapshot:
    """Immutable copy of source parameter values, keyed like ``named_stores``."""

    values: MappingProxyType

    @classmethod
    def of(cls, hset):
        return cls(MappingProxyType({key: MappingProxyType(store.snapshot())
                                     for key, store in hset.named_stores()}))

    def __getitem__(self, key):
        return self.values[key]

    def matches(self, hset, keys=None):
        """True when the set's current values equal the snapshot exactly."""
        for key, store in hset.named_stores():
            if keys is not None and not key.startswith(keys):
                continue
            for name in store:
                if not np.array_equal(store.values(name), self.values[key][name]):
                    return False
        return True

    def to_dict(self):
        return {key: {name: v.ravel().tolist() for name, v in entries.items()}
                for key, entries in self.values.items()}

    @classmethod
    def from_dict(cls, doc, like):
        """Rebuild against a set ``like`` that supplies the array shapes."""
        out = {}
        for key, store in like.named_stores():
            out[key] = MappingProxyType({
                name: _readonly(np.array(doc[key][name], dtype=np.float64).reshape(store.values(name).shape))
                for name in store
            })
        return cls(MappingProxyType(out))


def _readonly(a):
    a.flags.writeable = False
    return a


def to_target(hset, freeze_classifiers=True, shared_extractor=True):
    """Copy a trained source set into an adaptation-ready target set.

    Optimizer velocities are cleared. With ``shared_extractor=False`` the
    extractor is duplicated per head, all copies starting from the same
    values. Returns ``(target_set, snapshot)``.
    """
    target = hset.copy()
    for _, store in target.named_stores():
        store.reset_velocity()
        store.zero_grad()
    if not shared_extractor and target.shared_extractor:
        base = target.extractors[0]
        target.extractors = [
            Network(base.specs, base.store.copy(), base.seed, base.mask_seed, init=False)
            for _ in range(target.M)
        ]
    target.frozen_classifiers = bool(freeze_classifiers)
    return target, SourceSnapshot.of(target)


__all__ = [
    "HypothesisSet", "SourceSnapshot", "anchor_predict", "build_set", "default_architecture",
    "ensemble_mean", "ensemble_predict", "predict_all", "to_target",
]
