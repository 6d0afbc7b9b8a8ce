"""Command-line entry point: ``hdmi-lab gen|train-source|adapt|eval|run|sweep|ablate``.

Configuration resolves in layers: built-in defaults, then the preset,
then a ``key = value`` config file, then command-line flags. Every
random stream derives from the single ``seed`` key.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adapt import (
    AdaptConfig, SourceConfig, adapt_target, final_report, make_evaluator, new_source_set,
    resolve_anchor, run_pipeline, source_only_summary, train_source, write_json,
    write_report_artifacts,
)
from .errors import ConfigError, HDMILabError
from .hypotheses import HypothesisSet, predict_all, to_target
from .objectives import TARGET_OBJECTIVES
from .shiftdata import (
    ShiftSpec, generate, load_csv, load_labels, write_pair,
)

OUT_ENV = "HDMI_LAB_OUT"


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if str(s).strip().lower() in ("", "none") else float(s)


def _floats(s):
    if s is None or str(s).strip().lower() in ("", "none"):
        return None
    return [float(v) for v in str(s).split(",")]


def _anchor(s):
    s = str(s).strip()
    return s if s == "seeded_random" else int(s)


# key -> (parser, default)
KEYS = {
    "preset": (str, "desk"),
    "seed": (int, 1),
    "generator": (str, "two_moons"),
    "n_source": (int, 600),
    "n_target": (int, 600),
    "noise_sd": (float, 0.08),
    "rotation_deg": (_opt_float, 40.0),
    "translation": (_floats, None),
    "scale": (float, 1.0),
    "k": (int, 2),
    "m": (int, 2),
    "variant": (str, "IC"),
    "dropout_rate": (float, 0.5),
    "source_steps": (int, 1000),
    "source_batch_size": (int, 64),
    "source_lr": (float, 1e-2),
    "objective": (str, "hdmi"),
    "lambda": (float, 0.5),
    "divergence": (str, "cross_entropy"),
    "reduction": (str, "mean"),
    "anchor": (_anchor, "seeded_random"),
    "steps": (int, 3000),
    "batch_size": (int, 64),
    "lr": (float, 1e-3),
    "momentum": (float, 0.9),
    "nesterov": (_bool, True),
    "weight_decay": (float, 5e-4),
    "extractor_lr_multiplier": (float, 1.0),
    "freeze_classifiers": (_bool, True),
    "shared_extractor": (_bool, True),
    "loss_dropout": (_bool, True),
    "stop_anchor_grad": (_bool, False),
    "eval_every": (int, 25),
}

PRESETS = {
    "desk": {},
    "blobs": {"generator": "gauss_blobs", "k": 3, "noise_sd": 0.8, "rotation_deg": None,
              "translation": [2.0, 0.0]},
}


@dataclass
class ResolvedConfig:
    values: dict
    provenance: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def to_dict(self):
        return {"values": dict(sorted(self.values.items())),
                "provenance": dict(sorted(self.provenance.items()))}

    @classmethod
    def from_dict(cls, doc):
        return cls(dict(doc["values"]), dict(doc["provenance"]))

    def shift_spec(self):
        v = self.values
        translation = v["translation"]
        rotation = None if translation is not None else v["rotation_deg"]
        return ShiftSpec(v["generator"], v["n_source"], v["n_target"], v["noise_sd"], rotation,
                         translation, v["scale"], v["k"], v["seed"])

    def source_config(self):
        v = self.values
        return SourceConfig(M=v["m"], variant=v["variant"], dropout_rate=v["dropout_rate"],
                            steps=v["source_steps"], batch_size=v["source_batch_size"],
                            lr=v["source_lr"], momentum=v["momentum"], nesterov=v["nesterov"],
                            weight_decay=v["weight_decay"], seed=v["seed"],
                            eval_every=v["eval_every"])

    def adapt_config(self):
        v = self.values
        return AdaptConfig(objective=v["objective"], lam=v["lambda"], divergence=v["divergence"],
                           reduction=v["reduction"], anchor_policy=v["anchor"], steps=v["steps"],
                           batch_size=v["batch_size"], lr=v["lr"], momentum=v["momentum"],
                           nesterov=v["nesterov"], weight_decay=v["weight_decay"],
                           extractor_lr_multiplier=v["extractor_lr_multiplier"],
                           freeze_classifiers=v["freeze_classifiers"],
                           shared_extractor=v["shared_extractor"], loss_dropout=v["loss_dropout"],
                           stop_anchor_grad=v["stop_anchor_grad"], seed=v["seed"],
                           eval_every=v["eval_every"])

    def validate(self):
        v = self.values
        if v["preset"] not in PRESETS:
            raise ConfigError(f"unknown preset {v['preset']!r}; known: {', '.join(PRESETS)}")
        if v["objective"] not in TARGET_OBJECTIVES:
            raise ConfigError(f"unknown objective {v['objective']!r}; known: {', '.join(TARGET_OBJECTIVES)}")
        if v["objective"] == "hd_only" and v["m"] < 2:
            raise ConfigError("objective hd_only needs m >= 2")
        if v["variant"] == "MC" and v["dropout_rate"] == 0:
            raise ConfigError("variant MC needs dropout_rate > 0")
        if not isinstance(v["anchor"], str) and not 0 <= v["anchor"] < v["m"]:
            raise ConfigError(f"anchor {v['anchor']} out of range for m={v['m']}")
        self.shift_spec().validate()
        self.source_config().validate()
        self.adapt_config().validate()
        return self


def parse_value(key, raw):
    if key not in KEYS:
        raise ConfigError(f"unknown key {key!r}; known keys: {', '.join(sorted(KEYS))}")
    try:
        return KEYS[key][0](raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None


def read_config_file(path):
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(key, raw)
    return out


def resolve(flags=None, config_file=None):
    """Merge defaults, preset, file and flags (later wins)."""
    flags = {k: v for k, v in (flags or {}).items() if v is not None}
    file_values = read_config_file(config_file) if config_file else {}
    values = {k: default for k, (_, default) in KEYS.items()}
    provenance = {k: "default" for k in KEYS}
    parsed_flags = {k: parse_value(k, v) for k, v in flags.items()}
    preset = parsed_flags.get("preset", file_values.get("preset", values["preset"]))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; known: {', '.join(PRESETS)}")
    values.update(PRESETS[preset])
    for layer, name in ((file_values, "file"), (parsed_flags, "flag")):
        for k, v in layer.items():
            values[k] = v
            provenance[k] = name
    if values["translation"] is not None:
        values["rotation_deg"] = None
    return ResolvedConfig(values, provenance).validate()


def output_root(arg=None):
    return Path(arg or os.environ.get(OUT_ENV) or "runs")


def run_dir_name(objective, m, lam, seed):
    return f"{objective}_m{m}_l{lam:g}_s{seed}"


def fresh_dir(root, name):
    d = Path(root) / name
    i = 0
    while d.exists():
        i += 1
        d = Path(root) / f"{name}_{i}"
    d.mkdir(parents=True)
    return d


def _load_json(path, what):
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"missing {what}: {p}")
    return json.loads(p.read_text())


def _load_target(data_dir, k):
    data_dir = Path(data_dir)
    target = load_csv(data_dir / "target.csv", labeled=False, num_classes=k, domain_tag="target")
    labels_path = data_dir / "target.labels.csv"
    labels = load_labels(labels_path, k) if labels_path.exists() else None
    return target, labels


def _data_dir(args, cfg, out):
    if args.data:
        d = Path(args.data)
        if not (d / "source.csv").exists() and not (d / "target.csv").exists():
            raise ConfigError(f"missing dataset files in {d}")
        return d
    return write_pair(generate(cfg.shift_spec()), out / "data")


def cmd_gen(args, cfg):
    out = Path(args.out) if args.out else output_root() / "data"
    pair = generate(cfg.shift_spec())
    write_pair(pair, out)
    print(f"wrote {out}")
    return 0


def cmd_train_source(args, cfg):
    out = Path(args.out) if args.out else output_root()
    out.mkdir(parents=True, exist_ok=True)
    data = _data_dir(args, cfg, out)
    source = load_csv(data / "source.csv", labeled=True, num_classes=cfg["k"], domain_tag="source")
    scfg = cfg.source_config()
    hset = new_source_set(source.dim, cfg["k"], scfg)
    hset, log = train_source(hset, source, scfg)
    write_json(out / "source.ckpt.json", hset.to_dict())
    log.write_csv(out / "source_runlog.csv")
    print(f"source accuracy {log.records[-1].acc_ensemble:.4f}" if log.records else "no steps")
    return 0


def cmd_adapt(args, cfg):
    out = Path(args.out) if args.out else output_root()
    ckpt_path = Path(args.source_ckpt) if args.source_ckpt else out / "source.ckpt.json"
    source_set = HypothesisSet.from_dict(_load_json(ckpt_path, "source checkpoint"))
    data = Path(args.data) if args.data else out / "data"
    if not (data / "target.csv").exists():
        raise ConfigError(f"missing target data: {data / 'target.csv'}")
    target, labels = _load_target(data, cfg["k"])
    acfg = cfg.adapt_config()
    hset, snapshot = to_target(source_set, acfg.freeze_classifiers, acfg.shared_extractor)
    hset.anchor = resolve_anchor(acfg.anchor_policy, hset.M, acfg.seed)
    evaluate = make_evaluator(target.x, labels) if labels is not None else None
    before = source_only_summary(hset, target.x, labels) if labels is not None else None
    hset, log = adapt_target(hset, target, acfg, snapshot, evaluate)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "adapted.ckpt.json", hset.to_dict())
    log.write_csv(out / "runlog.csv")
    if labels is not None:
        report = final_report(hset, target.x, labels, before[0].error_profile)
        report.extra.update({"source_only": before[1], "config": cfg.to_dict(), "runlog": "runlog.csv"})
        write_report_artifacts(out, report, predict_all(hset, target.x, "eval"))
    print(f"wrote {out / 'adapted.ckpt.json'}")
    return 0


def cmd_eval(args, cfg):
    out = Path(args.out) if args.out else output_root()
    ckpt = Path(args.ckpt) if args.ckpt else out / "adapted.ckpt.json"
    hset = HypothesisSet.from_dict(_load_json(ckpt, "checkpoint"))
    data = Path(args.data) if args.data else out / "data"
    target, labels = _load_target(data, cfg["k"])
    if labels is None:
        raise ConfigError(f"missing target labels: {data / 'target.labels.csv'}")
    report = final_report(hset, target.x, labels)
    out.mkdir(parents=True, exist_ok=True)
    write_report_artifacts(out, report, predict_all(hset, target.x, "eval"))
    print(f"accuracy anchor {report.accuracy_anchor:.4f} ensemble {report.accuracy_ensemble:.4f}")
    return 0


def execute_run(cfg, run_dir):
    """Full pipeline for one resolved config; returns the summary row."""
    report, _, _ = run_pipeline(cfg.shift_spec(), cfg.source_config(), cfg.adapt_config(), run_dir)
    doc = report.to_dict()
    doc["config"] = cfg.to_dict()
    write_json(Path(run_dir) / "report.json", doc)
    write_json(Path(run_dir) / "config.json", cfg.to_dict())
    return doc


def cmd_run(args, cfg):
    root = Path(args.out) if args.out else output_root()
    run_dir = fresh_dir(root, run_dir_name(cfg["objective"], cfg["m"], cfg["lambda"], cfg["seed"]))
    doc = execute_run(cfg, run_dir)
    print(f"{run_dir}: accuracy anchor {doc['accuracy_anchor']:.4f} "
          f"ensemble {doc['accuracy_ensemble']:.4f} source-only {doc['source_only']['accuracy_ensemble']:.4f}")
    return 0


SUMMARY_METRICS = ["acc_anchor", "acc_ensemble", "acc_source_only", "ece", "brier", "disagreement"]


def _row_from_report(doc):
    return {
        "acc_anchor": doc["accuracy_anchor"],
        "acc_ensemble": doc["accuracy_ensemble"],
        "acc_source_only": doc["source_only"]["accuracy_ensemble"],
        "ece": doc["ece"],
        "brier": doc["brier"],
        "disagreement": doc["mean_disagreement"],
    }


def _grid_worker(job):
    label, values, provenance, run_dir = job
    cfg = ResolvedConfig(values, provenance)
    try:
        cfg.validate()
        doc = execute_run(cfg, run_dir)
        return label, "ok", _row_from_report(doc)
    except Exception as exc:  # recorded per row; the sweep carries on
        return label, f"error: {type(exc).__name__}: {exc}", {}


def run_grid(jobs, workers=1):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_grid_worker, jobs))
    return [_grid_worker(j) for j in jobs]


def aggregate(results, key_fields):
    groups = {}
    for label, status, metrics in results:
        if status != "ok":
            continue
        key = tuple(label[f] for f in key_fields)
        groups.setdefault(key, []).append(metrics)
    out = []
    for key, rows in groups.items():
        agg = dict(zip(key_fields, key))
        agg["n"] = len(rows)
        for m in SUMMARY_METRICS:
            vals = np.array([r[m] for r in rows])
            agg[m] = float(vals.mean())
            agg[m + "_sd"] = float(vals.std(ddof=1)) if len(vals) > 1 else 0.0
        out.append(agg)
    return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else str(v)


def write_table(path, header, rows):
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(r.get(h)) for h in header])


def parse_list(s, conv):
    return [conv(v) for v in str(s).split(",") if v.strip()]


def cmd_sweep(args, cfg):
    root = Path(args.out) if args.out else output_root() / "sweep"
    root.mkdir(parents=True, exist_ok=True)
    lambdas = parse_list(args.lambdas, float) if args.lambdas else [cfg["lambda"]]
    ms = parse_list(args.ms, int) if args.ms else [cfg["m"]]
    objectives = parse_list(args.objectives, str) if args.objectives else [cfg["objective"]]
    seeds = parse_list(args.seeds, int) if args.seeds else [cfg["seed"]]
    if not (lambdas and ms and objectives and seeds):
        raise ConfigError("every sweep axis needs at least one value")
    jobs = []
    for obj, m, lam, seed in itertools.product(objectives, ms, lambdas, seeds):
        values = dict(cfg.values, objective=obj, m=m, seed=seed)
        values["lambda"] = lam
        prov = dict(cfg.provenance, objective="flag", m="flag", seed="flag")
        prov["lambda"] = "flag"
        run_dir = fresh_dir(root, run_dir_name(obj, m, lam, seed))
        label = {"objective": obj, "M": m, "lambda": lam, "seed": seed}
        jobs.append((label, values, prov, str(run_dir)))
    results = run_grid(jobs, args.workers)
    rows = [dict(label, kind="run", status=status, **metrics) for label, status, metrics in results]
    aggs = aggregate(results, ["objective", "M", "lambda"])
    rows += [dict(a, kind="aggregate", seed="all", status="ok") for a in aggs]
    header = ["kind", "objective", "M", "lambda", "seed", "status", "n"]
    header += [c for m in SUMMARY_METRICS for c in (m, m + "_sd")]
    write_table(root / "summary.csv", header, rows)
    print(f"wrote {root / 'summary.csv'} ({len(results)} runs, {len(aggs)} aggregates)")
    return 0


# Table 6 rows: name -> config overrides
ABLATIONS = [
    ("MI ensemble", {"objective": "mi_ensemble"}),
    ("HDMI", {"objective": "hdmi"}),
    ("HDMI with KL", {"objective": "hdmi", "divergence": "kl"}),
    ("MI ensemble (independent psi)", {"objective": "mi_ensemble", "shared_extractor": False}),
    ("HDMI (independent psi)", {"objective": "hdmi", "shared_extractor": False}),
    ("HD only", {"objective": "hd_only"}),
    ("Conditional Entropy + HD", {"objective": "cond_entropy_hd"}),
    ("MI ensemble + L2", {"objective": "mi_l2"}),
    ("MI ensemble + L2 source", {"objective": "mi_l2_source"}),
]


def cmd_ablate(args, cfg):
    root = Path(args.out) if args.out else output_root() / "ablation"
    root.mkdir(parents=True, exist_ok=True)
    seeds = parse_list(args.seeds, int) if args.seeds else [1, 2, 3, 4, 5]
    jobs = []
    for (name, overrides), seed in itertools.product(ABLATIONS, seeds):
        values = dict(cfg.values, seed=seed, **overrides)
        prov = dict(cfg.provenance, seed="flag", **{k: "flag" for k in overrides})
        slug = name.lower().replace(" ", "_").replace("+", "plus").replace("(", "").replace(")", "")
        run_dir = fresh_dir(root, f"{slug}_s{seed}")
        jobs.append(({"method": name, "seed": seed}, values, prov, str(run_dir)))
    results = run_grid(jobs, args.workers)
    aggs = aggregate(results, ["method"])
    by_name = {a["method"]: a for a in aggs}
    src = [m["acc_source_only"] for (label, status, m) in results
           if status == "ok" and label["method"] == "HDMI"]
    rows = []
    if src:
        rows.append({"method": "Source only", "n": len(src), "accuracy": float(np.mean(src)),
                     "accuracy_sd": float(np.std(src, ddof=1)) if len(src) > 1 else 0.0})
    for name, _ in ABLATIONS:
        a = by_name.get(name)
        if a is None:
            errs = [s for (label, s, _) in results if label["method"] == name and s != "ok"]
            rows.append({"method": name, "n": 0, "status": errs[0] if errs else "missing"})
            continue
        rows.append({"method": name, "n": a["n"], "accuracy": a["acc_anchor"],
                     "accuracy_sd": a["acc_anchor_sd"], "accuracy_ensemble": a["acc_ensemble"],
                     "ece": a["ece"], "brier": a["brier"], "disagreement": a["disagreement"],
                     "status": "ok"})
    header = ["method", "n", "accuracy", "accuracy_sd", "accuracy_ensemble", "ece", "brier",
              "disagreement", "status"]
    write_table(root / "ablation.csv", header, rows)
    print(f"wrote {root / 'ablation.csv'}")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train-source": cmd_train_source,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "run": cmd_run,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' config file")
    common.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./runs)")
    for key in KEYS:
        common.add_argument("--" + key.replace("_", "-"), dest="cfg_" + key, metavar="VALUE")
    parser = argparse.ArgumentParser(prog="hdmi-lab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("train-source", "adapt", "eval"):
            p.add_argument("--data", help="dataset directory written by 'gen'")
        if name == "adapt":
            p.add_argument("--source-ckpt", help="source checkpoint (default <out>/source.ckpt.json)")
        if name == "eval":
            p.add_argument("--ckpt", help="checkpoint to evaluate (default <out>/adapted.ckpt.json)")
        if name in ("sweep", "ablate"):
            p.add_argument("--seeds", help="comma-separated seeds")
            p.add_argument("--workers", type=int, default=1)
        if name == "sweep":
            p.add_argument("--lambdas", help="comma-separated lambda values")
            p.add_argument("--ms", help="comma-separated numbers of hypotheses")
            p.add_argument("--objectives", help="comma-separated objectives")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    try:
        cfg = resolve(flags, args.config)
        return COMMANDS[args.command](args, cfg)
    except (HDMILabError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
