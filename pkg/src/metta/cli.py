"""Command-line pipeline: data generation, training, evaluation, analysis.

Every subcommand reads a JSON experiment config (falling back to built-in
defaults), talks to the other stages only through files in the output
directory, and is deterministic given the same config.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, gradcheck, metta_core, model
from . import tensor_engine as te
from .data_aug import (AugmentationPolicy, apply_transform, enumerate_group,
                       flip_group, gen_shapes_dataset, load_dataset, mix_seed,
                       rot90_group, save_dataset)
from .model import (Checkpoint, build_backbone, default_config, load_checkpoint,
                    save_checkpoint, train_backbone, train_linear_head)
from .tensor_engine import OptimizerState, Tensor

DEFAULT_CONFIG = {
    "out_dir": "metta_out",
    "dataset": {
        "seed": 7,
        "test_seed": 1007,
        "count": 600,
        "test_count": 150,
        "classes": 4,
        "image_size": 32,
    },
    "backbone": {
        "stages": [[16, 3, 2], [32, 3, 2], [64, 3, 2]],
        "embedding_dim": 64,
        "init_seed": 5,
    },
    "training": {
        "epochs": 8,
        "batch": 32,
        "lr": 0.05,
        "momentum": 0.9,
        "seed": 1,
        "policy": {"kind": "RandomResizedCropFlip", "in_size": 32, "out_size": 32,
                   "s_lo": 0.6, "s_hi": 1.0},
    },
    "linear": {
        "epochs": 8,
        "batch": 32,
        "lr": 0.4,
        "momentum": 0.9,
        "seed": 2,
    },
    "eval": {
        "methods": ["central", "tta", "metta"],
        "S": [10, 32],
        "seed": 3,
    },
    "analysis": {
        "alphas": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        "jitter_subset": 32,
        "S": 32,
        "seed": 4,
    },
    "retrieval": {
        "corpus": 120,
        "queries": 60,
        "k": 5,
        "scales": [0.7071067811865476, 1.0, 1.4142135623730951],
        "seed": 6,
    },
}

SEED_KEYS = ("dataset.seed", "dataset.test_seed", "backbone.init_seed",
             "training.seed", "linear.seed", "eval.seed", "analysis.seed",
             "retrieval.seed")


class CLIError(Exception):
    """Fatal, user-facing subcommand failure."""


def cfg_get(config: dict, dotted: str):
    node = config
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            raise CLIError(f"missing config key: {dotted}")
        node = node[part]
    return node


def load_config(path: str | None, seed_override: int | None) -> dict:
    if path is None:
        config = copy.deepcopy(DEFAULT_CONFIG)
    else:
        try:
            with open(path) as f:
                config = json.load(f)
        except FileNotFoundError:
            raise CLIError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise CLIError(f"config is not valid JSON: {exc}")
    if seed_override is not None:
        for dotted in SEED_KEYS:
            section, key = dotted.split(".")
            if section in config and isinstance(config[section], dict):
                config[section][key] = mix_seed(seed_override, dotted)
    return config


def _policy(config: dict, dotted: str) -> AugmentationPolicy:
    try:
        return AugmentationPolicy.from_dict(cfg_get(config, dotted))
    except (TypeError, ValueError) as exc:
        raise CLIError(f"bad policy at {dotted}: {exc}")


def _backbone_config(config: dict) -> model.BackboneConfig:
    stages = tuple(model.StageSpec(*s) for s in cfg_get(config, "backbone.stages"))
    image_size = int(cfg_get(config, "dataset.image_size"))
    return model.BackboneConfig((3, image_size, image_size), stages,
                                int(cfg_get(config, "backbone.embedding_dim")))


def _out_dir(config: dict, override: str | None) -> Path:
    out = Path(override) if override else Path(cfg_get(config, "out_dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_artifact(path: Path, loader, what: str, hint: str):
    if not path.exists():
        raise CLIError(f"missing {what}: {path} (run `metta {hint}` first)")
    return loader(path)


def _load_model(out: Path) -> tuple[Checkpoint, model.LinearHead]:
    ckpt = _load_artifact(out / "model.mtck", load_checkpoint,
                          "trained model checkpoint", "train-linear")
    head = ckpt.head
    if head is None:
        raise CLIError(f"checkpoint {out / 'model.mtck'} has no linear head "
                       "(run `metta train-linear` first)")
    return ckpt, head


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(config: dict, out: Path) -> int:
    ds = gen_shapes_dataset(int(cfg_get(config, "dataset.seed")),
                            int(cfg_get(config, "dataset.count")),
                            int(cfg_get(config, "dataset.classes")),
                            int(cfg_get(config, "dataset.image_size")))
    test = gen_shapes_dataset(int(cfg_get(config, "dataset.test_seed")),
                              int(cfg_get(config, "dataset.test_count")),
                              int(cfg_get(config, "dataset.classes")),
                              int(cfg_get(config, "dataset.image_size")))
    save_dataset(ds, out / "train.mtds")
    save_dataset(test, out / "test.mtds")
    print(f"wrote {out / 'train.mtds'} ({ds.size} images) and "
          f"{out / 'test.mtds'} ({test.size} images)")
    return 0


def cmd_train_backbone(config: dict, out: Path) -> int:
    ds = _load_artifact(out / "train.mtds", load_dataset, "training dataset", "gen-data")
    cfg = _backbone_config(config)
    policy = _policy(config, "training.policy")
    ckpt = build_backbone(cfg, int(cfg_get(config, "backbone.init_seed")))
    opt = OptimizerState(float(cfg_get(config, "training.lr")),
                         float(cfg_get(config, "training.momentum")))
    trained = train_backbone(ckpt, ds, policy,
                             int(cfg_get(config, "training.epochs")),
                             int(cfg_get(config, "training.batch")),
                             opt, int(cfg_get(config, "training.seed")))
    save_checkpoint(trained, out / "backbone.mtck")
    loss = model.dataset_loss(trained, ds, policy, int(cfg_get(config, "training.seed")))
    print(f"wrote {out / 'backbone.mtck'} (final augmented train loss {loss:.4f})")
    return 0


def cmd_train_linear(config: dict, out: Path) -> int:
    ds = _load_artifact(out / "train.mtds", load_dataset, "training dataset", "gen-data")
    ckpt = _load_artifact(out / "backbone.mtck", load_checkpoint,
                          "backbone checkpoint", "train-backbone")
    policy = _policy(config, "training.policy")
    opt = OptimizerState(float(cfg_get(config, "linear.lr")),
                         float(cfg_get(config, "linear.momentum")))
    head = train_linear_head(ckpt, ds, policy,
                             int(cfg_get(config, "linear.epochs")),
                             int(cfg_get(config, "linear.batch")),
                             opt, int(cfg_get(config, "linear.seed")))
    save_checkpoint(ckpt.with_head(head), out / "model.mtck")
    print(f"wrote {out / 'model.mtck'}")
    return 0


def cmd_eval(config: dict, out: Path) -> int:
    test = _load_artifact(out / "test.mtds", load_dataset, "test dataset", "gen-data")
    ckpt, head = _load_model(out)
    policy = _policy(config, "training.policy")
    seed = int(cfg_get(config, "eval.seed"))
    methods = cfg_get(config, "eval.methods")
    s_values = [int(s) for s in cfg_get(config, "eval.S")]
    rows = []
    report = None
    for method in methods:
        for s in (s_values if method != "central" else s_values[:1]):
            r = analysis.evaluate(ckpt, head, test, method, policy, s, seed)
            rows.extend(r.rows)
            report = r
    merged = analysis.EvalReport(rows, report.dataset, report.checkpoint, seed)
    analysis.emit_report(merged, out / "eval_report.csv", "csv")
    analysis.emit_report(merged, out / "eval_report.json", "json")
    for r in rows:
        print(f"{r.method:>8} S={r.S:<3d} top1={r.top1:.4f} nll={r.nll:.4f}")
    print(f"wrote {out / 'eval_report.csv'}")
    return 0


def cmd_interp(config: dict, out: Path) -> int:
    test = _load_artifact(out / "test.mtds", load_dataset, "test dataset", "gen-data")
    ckpt, head = _load_model(out)
    policy = _policy(config, "training.policy")
    alphas = cfg_get(config, "analysis.alphas")
    s = int(cfg_get(config, "analysis.S"))
    seed = int(cfg_get(config, "analysis.seed"))
    for kind, stem in (("central_crop", "interp_central"),
                       ("single_augmentation", "interp_single")):
        curve = analysis.interpolate_curve(ckpt, head, test, kind, alphas, s, seed,
                                           policy=policy)
        analysis.emit_report(curve, out / f"{stem}.csv", "csv")
        analysis.emit_report(curve, out / f"{stem}.json", "json")
        print(f"{kind}: nll(alpha=0)={curve.nll[0]:.4f} nll(alpha=1)={curve.nll[-1]:.4f}")
    print(f"wrote {out / 'interp_central.csv'} and {out / 'interp_single.csv'}")
    return 0


def cmd_jitter(config: dict, out: Path) -> int:
    test = _load_artifact(out / "test.mtds", load_dataset, "test dataset", "gen-data")
    ckpt, head = _load_model(out)
    policy = _policy(config, "training.policy")
    subset_size = min(int(cfg_get(config, "analysis.jitter_subset")), test.size)
    subset = test.subset(range(subset_size))
    profile = analysis.jitter_stats(ckpt, head, subset,
                                    policy, int(cfg_get(config, "analysis.S")),
                                    int(cfg_get(config, "analysis.seed")))
    analysis.emit_report(profile, out / "jitter.csv", "csv")
    analysis.emit_report(profile, out / "jitter.json", "json")
    _dump_jitter_samples(profile, out / "jitter_samples.csv")
    flips = {r.image_id: r.argmax_flips for r in profile.rows}
    print(f"images with argmax flips: {sum(1 for v in flips.values() if v > 0)}"
          f"/{len(flips)}")
    print(f"wrote {out / 'jitter.csv'}")
    return 0


def _dump_jitter_samples(profile: analysis.JitterProfile, path: Path) -> None:
    import csv as _csv
    with open(path, "w", newline="") as f:
        writer = _csv.writer(f)
        n_classes = next(iter(profile.per_sample_probs.values())).shape[1] \
            if profile.per_sample_probs else 0
        writer.writerow(["image_id", "sample_index"]
                        + [f"prob_{c}" for c in range(n_classes)])
        for image_id in sorted(profile.per_sample_probs):
            probs = profile.per_sample_probs[image_id]
            for s, row in enumerate(probs):
                writer.writerow([image_id, s] + [format(float(v), ".17g") for v in row])


def cmd_retrieve(config: dict, out: Path) -> int:
    test = _load_artifact(out / "test.mtds", load_dataset, "test dataset", "gen-data")
    ckpt, _head = _load_model(out)
    n_corpus = int(cfg_get(config, "retrieval.corpus"))
    n_queries = int(cfg_get(config, "retrieval.queries"))
    if n_corpus + n_queries > test.size:
        raise CLIError(f"retrieval needs {n_corpus + n_queries} test images, "
                       f"dataset has {test.size}")
    corpus = test.subset(range(n_corpus))
    queries = test.subset(range(n_corpus, n_corpus + n_queries))
    image_size = int(cfg_get(config, "dataset.image_size"))
    scales = [float(s) for s in cfg_get(config, "retrieval.scales")]
    seed = int(cfg_get(config, "retrieval.seed"))
    variants = [
        ("multi_scale", AugmentationPolicy("MultiScale", image_size, scales=tuple(scales))),
        ("single_scale", AugmentationPolicy("MultiScale", image_size, scales=(1.0,))),
    ]
    lines = []
    for name, policy in variants:
        index = metta_core.build_index(ckpt, corpus, policy, global_seed=seed)
        hits = 0
        for img, label in zip(queries.images, queries.labels):
            top = metta_core.query_index(index, ckpt, img, policy, 1, global_seed=seed)
            hits += int(corpus.labels[top[0][0]] == label)
        recall = hits / queries.size
        lines.append((name, recall))
        print(f"{name}: recall@1={recall:.4f} over {queries.size} queries")
    with open(out / "retrieval_report.csv", "w", newline="") as f:
        import csv as _csv
        writer = _csv.writer(f)
        writer.writerow(["policy", "corpus", "queries", "recall_at_1"])
        for name, recall in lines:
            writer.writerow([name, n_corpus, n_queries, format(recall, ".17g")])
    print(f"wrote {out / 'retrieval_report.csv'}")
    return 0


def cmd_grad_check(config: dict, out: Path) -> int:
    results = gradcheck.run_all(instances=100, seed=0)
    failed = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{r.name:>24}: max_rel_err={r.max_err:.3e} over {r.instances} "
              f"instances [{status}]")
        failed += 0 if r.passed else 1
    if failed:
        raise CLIError(f"{failed} op(s) failed the finite-difference check")
    return 0


def _random_head(rng, classes: int, dim: int) -> model.LinearHead:
    theta = Tensor(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(classes, dim)))
    bias = Tensor(rng.normal(0.0, 0.5, size=classes))
    return model.LinearHead(theta, bias)


def cmd_selftest(config: dict, out: Path) -> int:
    rng = np.random.default_rng(0)
    dim, classes = 64, 10

    worst_gap = -np.inf
    for _ in range(2000):
        s = int(rng.integers(2, 9))
        head = _random_head(rng, classes, dim)
        samples = rng.normal(0.0, 1.0, size=(s, dim)).astype(np.float32)
        label = int(rng.integers(0, classes))
        mean, _ = metta_core.mean_and_variance(samples)
        nll_mean = te.cross_entropy(te.softmax(model.head_logits(head, Tensor(mean))), label)
        per = [te.cross_entropy(te.softmax(model.head_logits(head, Tensor(row))), label)
               for row in samples]
        worst_gap = max(worst_gap, nll_mean - sum(per) / len(per))
    ok1 = worst_gap <= 1e-6
    print(f"jensen bound: worst gap {worst_gap:.3e} [{'PASS' if ok1 else 'FAIL'}]")

    worst = 0.0
    for _ in range(500):
        s = int(rng.integers(2, 9))
        head = _random_head(rng, classes, dim)
        samples = rng.normal(0.0, 1.0, size=(s, dim)).astype(np.float32)
        mean, _ = metta_core.mean_and_variance(samples)
        p_embed = te.softmax(model.head_logits(head, Tensor(mean))).data
        logits = np.stack([model.head_logits(head, Tensor(row)).data for row in samples])
        lmean, _ = metta_core.mean_and_variance(logits)
        p_logit = te.softmax(Tensor(lmean)).data
        worst = max(worst, float(np.abs(p_embed - p_logit).max()))
    ok2 = worst < 1e-6
    print(f"pre-softmax averaging equivalence: max prob diff {worst:.3e} "
          f"[{'PASS' if ok2 else 'FAIL'}]")

    cfg = default_config(in_size=32)
    ckpt = build_backbone(cfg, 0)
    images = gen_shapes_dataset(123, 8, 4, 32).images
    worst_inv = 0.0
    for policy in (flip_group(32), rot90_group(32)):
        for img in images:
            base = metta_core.mean_embedding(ckpt, img, policy, 1, 0, 0).mean.data
            for g in enumerate_group(policy):
                moved = apply_transform(img, g)
                other = metta_core.mean_embedding(ckpt, moved, policy, 1, 0, 0).mean.data
                worst_inv = max(worst_inv, float(np.abs(base - other).max()))
    ok3 = worst_inv < 1e-5
    print(f"finite-group invariance: max diff {worst_inv:.3e} [{'PASS' if ok3 else 'FAIL'}]")

    if not (ok1 and ok2 and ok3):
        raise CLIError("selftest failed")
    print("selftest: all checks passed")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-backbone": cmd_train_backbone,
    "train-linear": cmd_train_linear,
    "eval": cmd_eval,
    "interp": cmd_interp,
    "jitter": cmd_jitter,
    "retrieve": cmd_retrieve,
    "grad-check": cmd_grad_check,
    "selftest": cmd_selftest,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metta",
        description="mean-embedding test-time augmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None,
                       help="JSON experiment config (built-in defaults if omitted)")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None,
                       help="override every section seed (mixed per section)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.seed)
        out = _out_dir(config, args.out)
        return COMMANDS[args.command](config, out)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
