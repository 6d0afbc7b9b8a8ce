"""Feed-forward networks with analytic backprop and an SGD optimizer.

Everything runs in float64. A :class:`Network` is a stack of dense layers
whose parameters live in a :class:`ParamStore`; several networks may share
one store (that is how MC-dropout heads are built).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeError

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "identity")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"
    dropout_rate: float = 0.0

    def __post_init__(self):
        if int(self.in_dim) < 1 or int(self.out_dim) < 1:
            raise ConfigError(f"layer dims must be >= 1, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def to_dict(self):
        return {
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "activation": self.activation,
            "dropout_rate": self.dropout_rate,
        }


@dataclass
class ParamEntry:
    values: np.ndarray
    grads: np.ndarray
    lr_multiplier: float = 1.0


class ParamStore:
    """Ordered collection of named parameter arrays with paired gradients.

    Optimizer velocity lives here too so that a store carries its full
    training state and can be checkpointed as one unit.
    """

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}
        self.velocity: dict[str, np.ndarray] = {}

    def add(self, name, values, lr_multiplier=1.0):
        if name in self._entries:
            raise ConfigError(f"duplicate parameter name {name!r}")
        if not lr_multiplier > 0:
            raise ConfigError(f"lr_multiplier must be > 0, got {lr_multiplier}")
        values = np.array(values, dtype=np.float64)
        self._entries[name] = ParamEntry(values, np.zeros_like(values), float(lr_multiplier))

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def entry(self, name) -> ParamEntry:
        return self._entries[name]

    def values(self, name) -> np.ndarray:
        return self._entries[name].values

    def grads(self, name) -> np.ndarray:
        return self._entries[name].grads

    def items(self):
        return self._entries.items()

    def set_lr_multiplier(self, value):
        if not value > 0:
            raise ConfigError(f"lr_multiplier must be > 0, got {value}")
        for e in self._entries.values():
            e.lr_multiplier = float(value)

    def zero_grad(self):
        for e in self._entries.values():
            e.grads[...] = 0.0

    def reset_velocity(self):
        self.velocity = {}

    def num_params(self):
        return sum(e.values.size for e in self._entries.values())

    def copy(self):
        out = ParamStore()
        for name, e in self._entries.items():
            out.add(name, e.values.copy(), e.lr_multiplier)
        out.velocity = {k: v.copy() for k, v in self.velocity.items()}
        return out

    def snapshot(self):
        """Read-only copies of all parameter values."""
        snap = {}
        for name, e in self._entries.items():
            v = e.values.copy()
            v.flags.writeable = False
            snap[name] = v
        return snap

    def flat_values(self):
        if not self._entries:
            return np.zeros(0)
        return np.concatenate([e.values.ravel() for e in self._entries.values()])

    def to_dict(self):
        return {
            "entries": [
                {
                    "name": name,
                    "lr_multiplier": e.lr_multiplier,
                    "shape": list(e.values.shape),
                    "values": e.values.ravel().tolist(),
                }
                for name, e in self._entries.items()
            ],
            "optimizer_state": {
                "velocity": {k: v.ravel().tolist() for k, v in self.velocity.items()}
            },
        }

    @classmethod
    def from_dict(cls, doc):
        store = cls()
        for item in doc["entries"]:
            values = np.array(item["values"], dtype=np.float64).reshape(item["shape"])
            store.add(item["name"], values, item.get("lr_multiplier", 1.0))
        for name, v in doc.get("optimizer_state", {}).get("velocity", {}).items():
            shape = store.values(name).shape
            store.velocity[name] = np.array(v, dtype=np.float64).reshape(shape)
        return store


@dataclass
class ForwardTape:
    inputs: list = field(default_factory=list)
    pre: list = field(default_factory=list)
    masks: list = field(default_factory=list)

    @property
    def depth(self):
        return len(self.pre)


def glorot_uniform(rng, in_dim, out_dim):
    a = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-a, a, size=(in_dim, out_dim))


def softmax(logits):
    """Row-wise softmax with per-row max subtraction."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise DomainError("softmax input must be finite")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(p, dp):
    """Pull a cotangent on probabilities back to logits."""
    return p * (dp - np.sum(dp * p, axis=1, keepdims=True))


class Network:
    """Dense layers over a (possibly shared) :class:`ParamStore`.

    ``mask_seed`` fixes the dropout masks drawn for a given ``mask_id``;
    ``rng`` drives resampled dropout when the caller does not supply one.
    """

    def __init__(self, specs, store=None, seed=0, mask_seed=None, init=True):
        specs = [s if isinstance(s, LayerSpec) else LayerSpec(**s) for s in specs]
        if not specs:
            raise ConfigError("a network needs at least one layer")
        for a, b in zip(specs, specs[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
        self.specs = tuple(specs)
        self.store = store if store is not None else ParamStore()
        self.seed = int(seed)
        self.mask_seed = self.seed if mask_seed is None else int(mask_seed)
        self.rng = np.random.default_rng([self.seed, 7])
        if init:
            rng = np.random.default_rng(self.seed)
            for i, s in enumerate(self.specs):
                if f"{i}.W" not in self.store:
                    self.store.add(f"{i}.W", glorot_uniform(rng, s.in_dim, s.out_dim))
                    self.store.add(f"{i}.b", np.zeros(s.out_dim))
        for i in range(len(self.specs)):
            if f"{i}.W" not in self.store or f"{i}.b" not in self.store:
                raise ShapeError(f"missing parameters for layer {i}")

    @property
    def in_dim(self):
        return self.specs[0].in_dim

    @property
    def out_dim(self):
        return self.specs[-1].out_dim

    def fixed_mask(self, mask_id, layer):
        """Inverted-dropout unit mask, a pure function of (mask_id, layer, mask_seed)."""
        s = self.specs[layer]
        rng = np.random.default_rng([self.mask_seed, int(mask_id), layer])
        keep = rng.random(s.out_dim) >= s.dropout_rate
        return keep / (1.0 - s.dropout_rate)

    def forward(self, x, mode="eval", mask_id=None, rng=None):
        """Return ``(logits, tape)``.

        In train mode dropout is applied: with ``mask_id`` set the unit mask
        is fixed, otherwise a fresh per-element mask is drawn from ``rng``.
        Eval mode is a pass-through.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"expected input (N, {self.in_dim}), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DomainError("network input must be finite")
        if mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {mode!r}")
        rng = self.rng if rng is None else rng
        tape = ForwardTape()
        h = x
        for i, s in enumerate(self.specs):
            tape.inputs.append(h)
            z = h @ self.store.values(f"{i}.W") + self.store.values(f"{i}.b")
            tape.pre.append(z)
            h = np.maximum(z, 0.0) if s.activation == "relu" else z
            mask = None
            if mode == "train" and s.dropout_rate > 0:
                if mask_id is not None:
                    mask = self.fixed_mask(mask_id, i)
                else:
                    keep = rng.random(h.shape) >= s.dropout_rate
                    mask = keep / (1.0 - s.dropout_rate)
                h = h * mask
            tape.masks.append(mask)
        return h, tape

    def backward(self, tape, dout):
        """Accumulate parameter grads into the store and return d(loss)/dx."""
        if tape.depth != len(self.specs):
            raise ShapeError(f"tape depth {tape.depth} does not match network depth {len(self.specs)}")
        d = np.asarray(dout, dtype=np.float64)
        if d.shape != tape.pre[-1].shape:
            raise ShapeError(f"cotangent shape {d.shape} does not match output {tape.pre[-1].shape}")
        for i in range(len(self.specs) - 1, -1, -1):
            s = self.specs[i]
            if tape.masks[i] is not None:
                d = d * tape.masks[i]
            if s.activation == "relu":
                d = d * (tape.pre[i] > 0)
            W = self.store.values(f"{i}.W")
            self.store.grads(f"{i}.W")[...] += tape.inputs[i].T @ d
            self.store.grads(f"{i}.b")[...] += d.sum(axis=0)
            d = d @ W.T
        return d

    def to_dict(self):
        doc = {
            "format_version": FORMAT_VERSION,
            "layer_specs": [s.to_dict() for s in self.specs],
            "seed": self.seed,
            "mask_seed": self.mask_seed,
        }
        doc.update(self.store.to_dict())
        return doc

    @classmethod
    def from_dict(cls, doc, store=None):
        if doc.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported checkpoint format_version {doc.get('format_version')!r}")
        if store is None:
            store = ParamStore.from_dict(doc)
        return cls(doc["layer_specs"], store, seed=doc.get("seed", 0),
                   mask_seed=doc.get("mask_seed"), init=False)


def sgd_step(store, base_lr, momentum=0.9, nesterov=True, weight_decay=5e-4):
    """One SGD update in place, then zero the grads.

    Weight decay enters as ``g + wd * w`` before the momentum buffer; the
    Nesterov form steps along ``g + momentum * v``.
    """
    if not 0.0 <= momentum < 1.0:
        raise ConfigError(f"momentum must be in [0, 1), got {momentum}")
    for name, e in store.items():
        g = e.grads
        if weight_decay:
            g = g + weight_decay * e.values
        if momentum:
            v = store.velocity.get(name)
            v = g.copy() if v is None else momentum * v + g
            store.velocity[name] = v
            step = g + momentum * v if nesterov else v
        else:
            step = g
        e.values -= (base_lr * e.lr_multiplier) * step
        e.grads[...] = 0.0
    return store
