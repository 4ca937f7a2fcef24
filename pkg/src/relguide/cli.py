"""Command-line surface: dataset generation, training, evaluation,
explanation, retrieval, and the two comparison experiments.

Every command resolves one flat JSON config (file keys, overridden by
flags), writes its artifacts plus a run manifest into --out, and never
mutates its inputs. A manifest file can be passed back as --config to
reproduce a run. Exit codes: 0 success, 1 usage error, 2 data/format
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .atlas import build_index, credibility, explain_pair, query_knn, save_index
from .bilrp import export_json
from .data import GeneratorConfig, generate, load_dataset, save_dataset
from .errors import ConfigError, FormatError, NumericalError, ScoreError, UsageError
from .lrp import LRPRuleConfig, input_relevance, render_heatmap
from .network import build_default_model, forward_inference, load_weights, save_weights
from .training import (
    METRICS_FLOOR,
    LossConfig,
    TrainConfig,
    evaluate,
    lesion_relevance_score,
    train,
    write_metrics_csv,
)

VAL_ID_OFFSET = 1_000_000

_GENERATOR_KEYS = {
    "seed", "height", "width", "samples_per_class", "val_per_class",
    "lesion_area_min", "lesion_area_max", "texture_contrast",
    "distractor_rho", "noise_sigma",
}
_MODEL_KEYS = {"conv_channels", "dense_units", "dropout_rate"}
_TRAIN_KEYS = {
    "seed", "threads", "epochs", "batch_size", "learning_rate",
    "beta1", "beta2", "adam_eps", "augment",
}
_LOSS_KEYS = {"loss", "power", "score_floor", "score_variant", "detach_score"}
_RULE_KEYS = {"rule", "epsilon", "alpha", "beta"}
_RETRIEVE_KEYS = {"layer", "k", "grid", "metric", "unit_cap"}

ALLOWED_KEYS = {
    "generate": _GENERATOR_KEYS,
    "train": _TRAIN_KEYS | _LOSS_KEYS | _RULE_KEYS | _MODEL_KEYS,
    "evaluate": _RULE_KEYS | {"score_variant", "score_floor"},
    "explain": _RULE_KEYS | {"score_variant", "score_floor"},
    "retrieve": _RETRIEVE_KEYS | _RULE_KEYS,
    "experiment1": _TRAIN_KEYS | _RULE_KEYS | _MODEL_KEYS | {"score_floor", "score_variant"},
    "experiment2": _TRAIN_KEYS | _RULE_KEYS | _MODEL_KEYS
    | {"score_floor", "score_variant", "iterations", "power"},
}

DEFAULTS = {
    "generate": {
        "height": 64, "width": 64, "samples_per_class": 400, "val_per_class": 100,
        "lesion_area_min": 0.05, "lesion_area_max": 0.15, "texture_contrast": 0.28,
        "distractor_rho": 0.9, "noise_sigma": 0.08,
    },
    "train": {
        "epochs": 20, "batch_size": 16, "learning_rate": 1e-3, "beta1": 0.9,
        "beta2": 0.999, "adam_eps": 1e-8, "augment": True, "threads": 1,
        "loss": "original", "power": 1.0, "score_floor": 1e-3,
        "score_variant": "unnormalized", "detach_score": False,
        "rule": None, "epsilon": 1e-6, "alpha": 1.0, "beta": 0.0,
        "conv_channels": [16, 32, 64, 128], "dense_units": 256, "dropout_rate": 0.25,
    },
    "evaluate": {
        "rule": None, "epsilon": 1e-6, "alpha": 1.0, "beta": 0.0,
        "score_variant": "unnormalized", "score_floor": 1e-3,
    },
    "explain": {
        "rule": None, "epsilon": 1e-6, "alpha": 1.0, "beta": 0.0,
        "score_variant": "unnormalized", "score_floor": 1e-3,
    },
    "retrieve": {
        "rule": None, "epsilon": 1e-6, "alpha": 1.0, "beta": 0.0,
        "k": 5, "grid": 8, "metric": "euclidean", "unit_cap": 512, "layer": None,
    },
}
DEFAULTS["experiment1"] = {
    k: v for k, v in DEFAULTS["train"].items() if k not in ("loss", "power", "detach_score")
}
DEFAULTS["experiment1"]["epochs"] = 6
DEFAULTS["experiment2"] = dict(DEFAULTS["experiment1"])
DEFAULTS["experiment2"].update({"iterations": 20, "power": 1.0})
del DEFAULTS["experiment2"]["epochs"]

_SEED_REQUIRED = {"generate", "train", "experiment1", "experiment2"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def resolve_config(args, command: str) -> dict:
    cfg = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        with open(args.config) as f:
            loaded = json.load(f)
        if isinstance(loaded, dict) and "command" in loaded and "config" in loaded:
            loaded = loaded["config"]  # manifest replay
        unknown = sorted(set(loaded) - ALLOWED_KEYS[command] - {"seed"})
        if unknown:
            raise UsageError(f"unknown config keys for {command}: {', '.join(unknown)}")
        cfg.update(loaded)
    for flag, key in (
        ("seed", "seed"), ("loss", "loss"), ("power", "power"), ("rule", "rule"),
        ("layer", "layer"), ("k", "k"), ("grid", "grid"), ("threads", "threads"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            cfg[key] = v
    if command in _SEED_REQUIRED and cfg.get("seed") is None:
        raise UsageError(f'missing required key "seed" for {command} (config or --seed)')
    return cfg


def rules_from_config(cfg: dict) -> LRPRuleConfig:
    kw = {"epsilon": cfg.get("epsilon", 1e-6), "alpha": cfg.get("alpha", 1.0), "beta": cfg.get("beta", 0.0)}
    rule = cfg.get("rule")
    if rule is None:
        return LRPRuleConfig(**kw)
    return LRPRuleConfig.uniform(rule, **kw)


def loss_config_from(cfg: dict, mode=None, power=None) -> LossConfig:
    return LossConfig(
        mode=mode if mode is not None else cfg.get("loss", "original"),
        power=power if power is not None else cfg.get("power", 1.0),
        rules=rules_from_config(cfg),
        score_floor=cfg.get("score_floor", 1e-3),
        score_variant=cfg.get("score_variant", "unnormalized"),
        detach_score=cfg.get("detach_score", False),
    )


def train_config_from(cfg: dict, epochs=None) -> TrainConfig:
    return TrainConfig(
        epochs=epochs if epochs is not None else int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        beta1=float(cfg["beta1"]),
        beta2=float(cfg["beta2"]),
        adam_eps=float(cfg["adam_eps"]),
        seed=int(cfg["seed"]),
        augment=bool(cfg["augment"]),
        threads=int(cfg.get("threads", 1)),
    )


def model_from_config(cfg: dict, input_shape, seed: int):
    return build_default_model(
        input_shape=input_shape,
        seed=seed,
        conv_channels=tuple(cfg.get("conv_channels", (16, 32, 64, 128))),
        dense_units=int(cfg.get("dense_units", 256)),
        dropout_rate=float(cfg.get("dropout_rate", 0.25)),
    )


def write_manifest(out_dir, command, cfg, artifacts, started, extra=None) -> str:
    payload = {
        "tool": "relguide",
        "version": __version__,
        "command": command,
        "seed": cfg.get("seed"),
        "config": cfg,
        "artifacts": sorted(artifacts),
        "duration_seconds": round(time.time() - started, 3),
    }
    if extra:
        payload.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    return path


def _ensure_out(args) -> str:
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _load_sets(args):
    train_set = load_dataset(args.data)
    val_set = load_dataset(args.val) if args.val else train_set
    return train_set, val_set


def _sample_by_id(samples, sample_id: int):
    for s in samples:
        if s.sample_id == sample_id:
            return s
    raise UsageError(f"sample id {sample_id} not found in dataset")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    started = time.time()
    cfg = resolve_config(args, "generate")
    out = _ensure_out(args)
    gen_keys = (
        "height", "width", "lesion_area_min", "lesion_area_max",
        "texture_contrast", "distractor_rho", "noise_sigma", "seed",
    )
    base = {k: cfg[k] for k in gen_keys}
    train_cfg = GeneratorConfig(samples_per_class=int(cfg["samples_per_class"]), **base)
    val_cfg = GeneratorConfig(samples_per_class=int(cfg["val_per_class"]), **base)
    train_path = os.path.join(out, "train.rgtd")
    val_path = os.path.join(out, "val.rgtd")
    save_dataset(generate(train_cfg), train_path)
    save_dataset(generate(val_cfg, id_offset=VAL_ID_OFFSET), val_path)
    write_manifest(out, "generate", cfg, ["train.rgtd", "val.rgtd"], started)
    print(f"wrote {train_path} ({2 * train_cfg.samples_per_class} samples) and "
          f"{val_path} ({2 * val_cfg.samples_per_class} samples)")
    return 0


def cmd_train(args) -> int:
    started = time.time()
    cfg = resolve_config(args, "train")
    out = _ensure_out(args)
    train_set, val_set = _load_sets(args)
    model = model_from_config(cfg, train_set[0].image.shape, int(cfg["seed"]))
    loss_cfg = loss_config_from(cfg)
    model, records = train(model, train_set, val_set, loss_cfg, train_config_from(cfg))
    weights_path = os.path.join(out, "weights.rgtw")
    metrics_path = os.path.join(out, "metrics.csv")
    save_weights(model, weights_path)
    write_metrics_csv(records, metrics_path)
    write_manifest(out, "train", cfg, ["weights.rgtw", "metrics.csv"], started)
    last = records[-1]
    print(f"trained {len(records)} epochs: accuracy {last.accuracy:.4f}, "
          f"f1 {last.f1_weighted:.4f}, scores {last.score_class0:.4f}/{last.score_class1:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    started = time.time()
    cfg = resolve_config(args, "evaluate")
    out = _ensure_out(args)
    dataset = load_dataset(args.data)
    model = load_weights(args.weights)
    acc, f1w, s0, s1 = evaluate(
        model, dataset, rules_from_config(cfg), cfg["score_variant"], cfg["score_floor"]
    )
    result = {"accuracy": acc, "f1_weighted": f1w, "score_class0": s0, "score_class1": s1}
    with open(os.path.join(out, "evaluation.json"), "w") as f:
        json.dump(result, f, indent=1)
    write_manifest(out, "evaluate", cfg, ["evaluation.json"], started)
    print(json.dumps(result))
    return 0


def cmd_explain(args) -> int:
    started = time.time()
    cfg = resolve_config(args, "explain")
    out = _ensure_out(args)
    dataset = load_dataset(args.data)
    sample = _sample_by_id(dataset, args.sample_id)
    model = load_weights(args.weights)
    rules = rules_from_config(cfg)
    logits, _, _ = forward_inference(model, sample.image)
    pred = int(np.argmax(logits))
    artifacts = []
    scores = {}
    for tag, target in (("pred", pred), ("true", sample.label)):
        rel = input_relevance(model, sample.image, target, rules)
        name = f"heatmap_{tag}_class{target}.pgm"
        render_heatmap(rel, os.path.join(out, name))
        artifacts += [name, name.replace(".pgm", ".csv")]
        scores[tag] = lesion_relevance_score(
            rel, sample.lesion_mask, sample.object_mask,
            cfg["score_variant"], cfg["score_floor"],
        )
    summary = {
        "sample_id": sample.sample_id,
        "true_label": sample.label,
        "predicted_label": pred,
        "score_pred": scores["pred"],
        "score_true": scores["true"],
        "rule": {"dense": rules.dense_rule, "conv": rules.conv_rule,
                 "epsilon": rules.epsilon, "alpha": rules.alpha, "beta": rules.beta},
    }
    with open(os.path.join(out, "explain.json"), "w") as f:
        json.dump(summary, f, indent=1)
    artifacts.append("explain.json")
    write_manifest(out, "explain", cfg, artifacts, started)
    print(f"sample {sample.sample_id}: predicted {pred} (true {sample.label}), "
          f"score_pred {scores['pred']:.6g}, score_true {scores['true']:.6g}")
    return 0


def cmd_retrieve(args) -> int:
    started = time.time()
    cfg = resolve_config(args, "retrieve")
    if cfg.get("layer") is None:
        raise UsageError("retrieve requires --layer (trace position of the embedding)")
    out = _ensure_out(args)
    atlas_set = load_dataset(args.atlas)
    query = _sample_by_id(atlas_set, args.query_id)
    model = load_weights(args.weights)
    rules = rules_from_config(cfg)
    layer = int(cfg["layer"])
    k = int(cfg["k"])
    if k > len(atlas_set):
        raise UsageError(f"k={k} exceeds atlas size {len(atlas_set)}")
    index = build_index(model, atlas_set, [layer], metric=cfg["metric"])[0]
    neighbors = query_knn(index, query.image, model, k)
    pred = int(np.argmax(forward_inference(model, query.image)[0]))
    cred = credibility(neighbors, pred)
    artifacts = []
    by_id = {s.sample_id: s for s in atlas_set}
    for nid, _, _ in neighbors:
        joint = explain_pair(
            model, query.image, by_id[nid], layer, rules,
            grid=int(cfg["grid"]), query_id=query.sample_id, unit_cap=cfg["unit_cap"],
        )
        name = f"bilrp_{query.sample_id}_{nid}.json"
        export_json(joint, os.path.join(out, name))
        artifacts.append(name)
    payload = {
        "query_id": query.sample_id,
        "layer": layer,
        "k": k,
        "metric": index.metric,
        "predicted_label": pred,
        "credibility": cred,
        "neighbors": [
            {"id": nid, "distance": dist, "label": label} for nid, dist, label in neighbors
        ],
    }
    with open(os.path.join(out, "neighbors.json"), "w") as f:
        json.dump(payload, f, indent=1)
    artifacts.append("neighbors.json")
    write_manifest(out, "retrieve", cfg, artifacts, started)
    print(f"query {query.sample_id}: {len(neighbors)} neighbors, credibility {cred:.3f}")
    return 0


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

EXPERIMENT1_ROWS = (
    ("Original", "original", 0.0),
    ("Penalization 1", "penalization", 1.0),
    ("Penalization 2", "penalization", 2.0),
    ("Penalization 3", "penalization", 3.0),
)
TABLE_HEADER = "loss_function,accuracy,f1_weighted,score_class0,score_class1"


def run_experiment1(train_set, val_set, cfg: dict, out_dir: str) -> list:
    """Train the four loss configurations from identical seeds and return
    [(row name, accuracy, f1, score0, score1)]."""
    rows = []
    seed = int(cfg["seed"])
    for name, mode, power in EXPERIMENT1_ROWS:
        model = model_from_config(cfg, train_set[0].image.shape, seed)
        loss_cfg = loss_config_from(cfg, mode=mode, power=power)
        model, records = train(model, train_set, val_set, loss_cfg, train_config_from(cfg))
        acc, f1w, s0, s1 = evaluate(
            model, val_set, loss_cfg.rules, cfg["score_variant"], METRICS_FLOOR
        )
        rows.append((name, acc, f1w, s0, s1))
        tag = name.lower().replace(" ", "")
        save_weights(model, os.path.join(out_dir, f"weights_{tag}.rgtw"))
        write_metrics_csv(records, os.path.join(out_dir, f"metrics_{tag}.csv"))
    return rows


def format_table(rows) -> str:
    lines = [f"{'loss_function':<16}{'accuracy':>10}{'f1_weighted':>13}"
             f"{'score_class0':>14}{'score_class1':>14}"]
    for name, acc, f1w, s0, s1 in rows:
        lines.append(f"{name:<16}{acc:>10.4f}{f1w:>13.4f}{s0:>14.4f}{s1:>14.4f}")
    return "\n".join(lines)


def cmd_experiment1(args) -> int:
    started = time.time()
    cfg = resolve_config(args, "experiment1")
    out = _ensure_out(args)
    train_set, val_set = _load_sets(args)
    rows = run_experiment1(train_set, val_set, cfg, out)
    with open(os.path.join(out, "table.csv"), "w") as f:
        f.write(TABLE_HEADER + "\n")
        for name, acc, f1w, s0, s1 in rows:
            f.write(f"{name},{acc:.9g},{f1w:.9g},{s0:.9g},{s1:.9g}\n")
    table = format_table(rows)
    with open(os.path.join(out, "table.txt"), "w") as f:
        f.write(table + "\n")
    artifacts = ["table.csv", "table.txt"]
    for name, _, _ in EXPERIMENT1_ROWS:
        tag = name.lower().replace(" ", "")
        artifacts += [f"weights_{tag}.rgtw", f"metrics_{tag}.csv"]
    write_manifest(out, "experiment1", cfg, artifacts, started)
    print(table)
    return 0


ITER_HEADER = "iteration,accuracy,mask_score,score_class0,score_class1"


def run_experiment2(train_set, val_set, cfg: dict):
    """Two aligned runs sharing seed and data order: conventional
    cross-entropy vs the guided loss. Returns (conventional records,
    guided records), one per iteration."""
    iterations = int(cfg["iterations"])
    out = []
    for mode, power in (("original", 0.0), ("penalization", float(cfg["power"]))):
        model = model_from_config(cfg, train_set[0].image.shape, int(cfg["seed"]))
        loss_cfg = loss_config_from(cfg, mode=mode, power=power)
        _, records = train(
            model, train_set, val_set, loss_cfg, train_config_from(cfg, epochs=iterations)
        )
        out.append(records)
    return out[0], out[1]


def write_iteration_csv(records, path) -> None:
    with open(path, "w") as f:
        f.write(ITER_HEADER + "\n")
        for r in records:
            mask_score = 0.5 * (r.score_class0 + r.score_class1)
            f.write(f"{r.epoch},{r.accuracy:.9g},{mask_score:.9g},"
                    f"{r.score_class0:.9g},{r.score_class1:.9g}\n")


def cmd_experiment2(args) -> int:
    started = time.time()
    cfg = resolve_config(args, "experiment2")
    out = _ensure_out(args)
    train_set, val_set = _load_sets(args)
    conventional, guided = run_experiment2(train_set, val_set, cfg)
    write_iteration_csv(conventional, os.path.join(out, "conventional.csv"))
    write_iteration_csv(guided, os.path.join(out, "guided.csv"))
    write_manifest(out, "experiment2", cfg, ["conventional.csv", "guided.csv"], started)
    for name, recs in (("conventional", conventional), ("guided", guided)):
        last = recs[-1]
        print(f"{name}: final accuracy {last.accuracy:.4f}, "
              f"mask score {(last.score_class0 + last.score_class1) / 2:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser / entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="relguide", description=__doc__)
    p.add_argument("--version", action="version", version=f"relguide {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat JSON config (or a manifest to replay)")
        sp.add_argument("--out", help="output directory (default: current)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--threads", type=int)

    sp = sub.add_parser("generate", help="write synthetic train/val datasets")
    common(sp)
    sp.set_defaults(fn=cmd_generate)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--data", required=True, help="training dataset (.rgtd)")
    sp.add_argument("--val", help="validation dataset (.rgtd), defaults to --data")
    sp.add_argument("--loss", choices=["original", "penalization"])
    sp.add_argument("--power", type=float)
    sp.add_argument("--rule", choices=["epsilon", "alphabeta"])
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="metrics of saved weights on a dataset")
    common(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--rule", choices=["epsilon", "alphabeta"])
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("explain", help="relevance heatmaps for one sample")
    common(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--sample-id", type=int, required=True)
    sp.add_argument("--rule", choices=["epsilon", "alphabeta"])
    sp.set_defaults(fn=cmd_explain)

    sp = sub.add_parser("retrieve", help="nearest atlas cases plus joint explanations")
    common(sp)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--atlas", required=True, help="atlas dataset (.rgtd)")
    sp.add_argument("--query-id", type=int, required=True)
    sp.add_argument("--layer", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--grid", type=int)
    sp.add_argument("--rule", choices=["epsilon", "alphabeta"])
    sp.set_defaults(fn=cmd_retrieve)

    sp = sub.add_parser("experiment1", help="four-loss comparison table")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--val", help="defaults to --data")
    sp.add_argument("--rule", choices=["epsilon", "alphabeta"])
    sp.set_defaults(fn=cmd_experiment1)

    sp = sub.add_parser("experiment2", help="conventional vs guided training curves")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--val", help="defaults to --data")
    sp.add_argument("--power", type=float)
    sp.add_argument("--rule", choices=["epsilon", "alphabeta"])
    sp.set_defaults(fn=cmd_experiment2)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except (UsageError, ConfigError, json.JSONDecodeError) as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (FormatError, FileNotFoundError, ScoreError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
