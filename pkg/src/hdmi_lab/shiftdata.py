"""Synthetic source/target pairs with a label-preserving covariate shift."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError

GENERATORS = ("two_moons", "gauss_blobs")


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray | None = None
    num_classes: int = 2
    domain_tag: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            raise ConfigError(f"x must be 2-D, got shape {self.x.shape}")
        if not np.all(np.isfinite(self.x)):
            raise ConfigError("x must be finite")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.int64)
            if self.y.shape != (len(self.x),):
                raise ConfigError("labels must be a vector with one entry per row")
            if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
                raise ConfigError(f"labels must lie in [0, {self.num_classes})")
            counts = np.bincount(self.y, minlength=self.num_classes)
            empty = np.flatnonzero(counts == 0)
            if empty.size:
                raise ConfigError(f"class {int(empty[0])} has no samples")

    def __len__(self):
        return len(self.x)

    @property
    def dim(self):
        return self.x.shape[1]

    @property
    def labeled(self):
        return self.y is not None

    def unlabeled(self):
        return Dataset(self.x, None, self.num_classes, self.domain_tag)


@dataclass
class ShiftSpec:
    generator: str = "two_moons"
    n_source: int = 600
    n_target: int = 600
    noise_sd: float = 0.08
    rotation_deg: float | None = 40.0
    translation: list | None = None
    scale: float = 1.0
    K: int = 2
    seed: int = 1

    def validate(self):
        if self.generator not in GENERATORS:
            raise ConfigError(f"unknown generator {self.generator!r}")
        if self.generator == "two_moons" and self.K != 2:
            raise ConfigError("two_moons has exactly two classes")
        if self.K < 2:
            raise ConfigError("need at least two classes")
        if self.n_source < self.K or self.n_target < self.K:
            raise ConfigError("each domain needs at least one sample per class")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd must be >= 0")
        if self.rotation_deg is not None and self.translation is not None:
            raise ConfigError("give either a rotation or a translation shift, not both")
        if self.translation is not None and len(self.translation) != 2:
            raise ConfigError("translation must have two components")
        if not self.scale > 0:
            raise ConfigError("scale must be > 0")
        return self

    def to_dict(self):
        return asdict(self)


@dataclass
class DomainPair:
    source: Dataset
    target: Dataset
    target_labels: np.ndarray
    spec: ShiftSpec = field(default_factory=ShiftSpec)


def class_counts(n, k):
    base, rem = divmod(n, k)
    return [base + (1 if c < rem else 0) for c in range(k)]


def blob_means(k, radius=2.5):
    angles = 2 * np.pi * np.arange(k) / k
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _moon_curve(label, t):
    if label == 0:
        return np.stack([np.cos(t), np.sin(t)], axis=1)
    return np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)


def sample_clean(spec, n, rng):
    """Draw ``n`` class-balanced points from the unshifted process."""
    counts = class_counts(n, spec.K)
    xs, ys = [], []
    for c, cnt in enumerate(counts):
        if spec.generator == "two_moons":
            pts = _moon_curve(c, rng.uniform(0.0, np.pi, cnt))
        else:
            pts = np.broadcast_to(blob_means(spec.K)[c], (cnt, 2))
        xs.append(pts + spec.noise_sd * rng.standard_normal((cnt, 2)))
        ys.append(np.full(cnt, c))
    x, y = np.concatenate(xs), np.concatenate(ys)
    order = rng.permutation(n)
    return x[order], y[order]


def rotation_matrix(deg):
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])


def apply_shift(spec, x, center):
    if spec.translation is not None:
        return (x - center) * spec.scale + center + np.asarray(spec.translation, dtype=np.float64)
    deg = spec.rotation_deg or 0.0
    return (x - center) @ rotation_matrix(deg).T * spec.scale + center


def invert_shift(spec, x, center):
    if spec.translation is not None:
        return (x - center - np.asarray(spec.translation, dtype=np.float64)) / spec.scale + center
    deg = spec.rotation_deg or 0.0
    return ((x - center) / spec.scale) @ rotation_matrix(deg) + center


def process_center(spec):
    """Centroid of the noiseless generating process, used as the shift pivot."""
    if spec.generator == "two_moons":
        return np.array([0.5, 0.25])
    return blob_means(spec.K).mean(axis=0)


def generate(spec):
    """Source and target draws; target labels are kept apart for evaluation."""
    spec.validate()
    src_rng = np.random.default_rng([spec.seed, 0])
    tgt_rng = np.random.default_rng([spec.seed, 1])
    xs, ys = sample_clean(spec, spec.n_source, src_rng)
    xt, yt = sample_clean(spec, spec.n_target, tgt_rng)
    xt = apply_shift(spec, xt, process_center(spec))
    source = Dataset(xs, ys, spec.K, "source")
    target = Dataset(xt, None, spec.K, "target")
    return DomainPair(source, target, yt, spec)


def nearest_process_class(spec, x, resolution=2000):
    """Class whose noiseless generating set lies closest to each point."""
    if spec.generator == "two_moons":
        t = np.linspace(0.0, np.pi, resolution)
        dists = []
        for c in range(2):
            curve = _moon_curve(c, t)
            d = np.sqrt(((x[:, None, :] - curve[None, :, :]) ** 2).sum(-1)).min(axis=1)
            dists.append(d)
        return np.argmin(np.stack(dists, axis=1), axis=1)
    means = blob_means(spec.K)
    return np.argmin(((x[:, None, :] - means[None]) ** 2).sum(-1), axis=1)


def _fmt(v):
    return repr(float(v))


def save_csv(ds, path, labels_path=None):
    """Write features (and labels when present) as CSV.

    ``labels_path`` puts labels in a separate ``label`` file instead, the
    layout used for held-out target ground truth.
    """
    path = Path(path)
    header = [f"f{j}" for j in range(ds.dim)]
    inline = ds.y is not None and labels_path is None
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header + (["label"] if inline else []))
        for i, row in enumerate(ds.x):
            cells = [_fmt(v) for v in row]
            if inline:
                cells.append(str(int(ds.y[i])))
            w.writerow(cells)
    if labels_path is not None and ds.y is not None:
        save_labels(ds.y, labels_path)
    return path


def save_labels(y, path):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label"])
        for v in y:
            w.writerow([str(int(v))])


def _parse_label(cell, lineno, num_classes):
    try:
        v = int(cell)
    except ValueError:
        raise IngestionError(f"label {cell!r} is not an integer", lineno) from None
    if v < 0 or (num_classes is not None and v >= num_classes):
        raise IngestionError(f"label {v} out of range [0, {num_classes})", lineno)
    return v


def load_labels(path, num_classes=None):
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["label"]:
        raise IngestionError("expected header 'label'", 1)
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 1:
            raise IngestionError(f"expected 1 field, got {len(row)}", lineno)
        out.append(_parse_label(row[0], lineno, num_classes))
    return np.array(out, dtype=np.int64)


def load_csv(path, labeled=True, num_classes=None, domain_tag=""):
    """Read a dataset written by :func:`save_csv`.

    With ``labeled=False`` any label column is dropped. ``num_classes``
    defaults to ``max(label) + 1`` (or 2 for unlabeled files).
    """
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise IngestionError("empty file", 1)
    header = rows[0]
    has_label = bool(header) and header[-1] == "label"
    n_feat = len(header) - (1 if has_label else 0)
    if n_feat < 1 or header[:n_feat] != [f"f{j}" for j in range(n_feat)]:
        raise IngestionError("header must be f0,...,f{d-1}[,label]", 1)
    if labeled and not has_label:
        raise IngestionError("file has no label column", 1)
    xs, ys = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise IngestionError(f"expected {len(header)} fields, got {len(row)}", lineno)
        try:
            vals = [float(c) for c in row[:n_feat]]
        except ValueError:
            raise IngestionError("malformed number", lineno) from None
        if not all(np.isfinite(vals)):
            raise IngestionError("non-finite value", lineno)
        xs.append(vals)
        if has_label and labeled:
            ys.append(_parse_label(row[-1], lineno, num_classes))
    if not xs:
        raise IngestionError("no data rows", 2)
    x = np.array(xs, dtype=np.float64)
    if labeled:
        y = np.array(ys, dtype=np.int64)
        k = int(y.max()) + 1 if num_classes is None else int(num_classes)
        counts = np.bincount(y, minlength=k)
        if np.any(counts == 0):
            raise IngestionError(f"class {int(np.flatnonzero(counts == 0)[0])} has no samples")
        return Dataset(x, y, k, domain_tag)
    return Dataset(x, None, 2 if num_classes is None else int(num_classes), domain_tag)


def write_pair(pair, directory):
    """Write ``source.csv``, ``target.csv``, ``target.labels.csv`` and ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_csv(pair.source, d / "source.csv")
    save_csv(pair.target, d / "target.csv")
    save_labels(pair.target_labels, d / "target.labels.csv")
    manifest = {"spec": pair.spec.to_dict(), "files": ["source.csv", "target.csv", "target.labels.csv"]}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return d


def read_manifest(directory):
    doc = json.loads((Path(directory) / "manifest.json").read_text())
    return ShiftSpec(**doc["spec"])


def batch_iterator(data, batch_size, seed=0, shuffle=True, epoch=0):
    """Index batches for one epoch; the order depends only on (seed, epoch).

    ``data`` is a dataset (or anything with a length) or a sample count.
    The final short batch is kept.
    """
    n = data if isinstance(data, (int, np.integer)) else len(data)
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def cycle_batches(n, batch_size, seed=0, shuffle=True):
    """Endless stream of index batches across epochs."""
    epoch = 0
    while True:
        yield from batch_iterator(n, batch_size, seed, shuffle, epoch)
        epoch += 1
