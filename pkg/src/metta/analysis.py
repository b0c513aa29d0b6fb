"""Linear-evaluation reports, embedding interpolation curves, jitter profiles.

Per-image work is independent (and may run threaded); aggregates use exact
compensated sums, so dataset order never changes a reported metric.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor_engine as te
from .data_aug import AugmentationPolicy, Dataset
from .metta_core import (central_embedding, image_key, mean_and_variance,
                         metta_predict, per_sample_embeddings, tta_predict)
from .model import Checkpoint, LinearHead, head_logits
from .parallel import parallel_map
from .tensor_engine import Tensor

METHODS = ("central", "metta", "tta")
ENDPOINT_KINDS = ("central_crop", "single_augmentation")


@dataclass(frozen=True)
class EvalRow:
    method: str
    S: int
    top1: float
    nll: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    dataset: str
    checkpoint: str
    seed: int

    def __post_init__(self):
        for r in self.rows:
            if not 0.0 <= r.top1 <= 1.0 or not math.isfinite(r.nll):
                raise ValueError(f"bad metrics in row {r}")


@dataclass(frozen=True)
class InterpolationCurve:
    """Metrics along blends between the mean embedding and an endpoint."""

    endpoint: str
    alphas: tuple[float, ...]
    nll: tuple[float, ...]
    accuracy: tuple[float, ...]
    S: int
    seed: int

    def __post_init__(self):
        if list(self.alphas) != sorted(set(self.alphas)):
            raise ValueError("alphas must be strictly ascending")
        if not self.alphas or self.alphas[0] != 0.0 or self.alphas[-1] != 1.0:
            raise ValueError("alphas must include 0.0 and 1.0")


@dataclass(frozen=True)
class JitterRow:
    image_id: int
    class_index: int
    prob_mean: float
    prob_std: float
    prob_min: float
    prob_max: float
    argmax_flips: int


@dataclass
class JitterProfile:
    """Per-image spread of class probabilities across augmentation samples."""

    rows: list[JitterRow]
    per_sample_probs: dict[int, np.ndarray] = field(default_factory=dict)
    policy: str = ""
    S: int = 0
    seed: int = 0

    def __post_init__(self):
        for r in self.rows:
            if not (r.prob_min <= r.prob_mean + 1e-9 and r.prob_mean <= r.prob_max + 1e-9
                    and r.prob_std >= 0.0):
                raise ValueError(f"inconsistent jitter row {r}")


def _nll(probs: np.ndarray, label: int) -> float:
    return te.cross_entropy(Tensor(probs), int(label))


def _top1(probs: np.ndarray, label: int) -> float:
    return 1.0 if int(np.argmax(probs)) == int(label) else 0.0


def _dataset_desc(ds: Dataset) -> str:
    if ds.size:
        c, h, w = ds.images[0].shape
        return f"images={ds.size},classes={ds.num_classes},shape={c}x{h}x{w}"
    return f"images=0,classes={ds.num_classes}"


def _checkpoint_desc(ckpt: Checkpoint) -> str:
    stages = "-".join(str(st.channels) for st in ckpt.config.stages)
    return (f"stages={stages},emb={ckpt.config.embedding_dim},"
            f"seed={ckpt.meta.seed},epochs={ckpt.meta.epochs}")


def _check_labels(ds: Dataset, head: LinearHead):
    if ds.size and max(ds.labels) >= head.num_classes:
        raise ValueError(
            f"dataset has labels up to {max(ds.labels)} but head covers "
            f"{head.num_classes} classes")


def evaluate(ckpt: Checkpoint, head: LinearHead, ds: Dataset, method: str,
             policy: AugmentationPolicy, S: int, seed: int) -> EvalReport:
    """Top-1 accuracy and mean NLL for one inference method.

    Augmentation draws are keyed by image content, so permuting the dataset
    leaves every aggregate unchanged.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    _check_labels(ds, head)
    if ds.size == 0:
        raise ValueError("empty dataset")

    def one(item) -> tuple[float, float]:
        img, label = item
        if method == "central":
            probs = te.softmax(head_logits(head, central_embedding(ckpt, img))).data
        elif method == "metta":
            probs = metta_predict(ckpt, head, img, policy, S, seed, image_key(img)).data
        else:
            probs = tta_predict(ckpt, head, img, policy, S, seed, image_key(img)).data
        return _top1(probs, label), _nll(probs, label)

    results = parallel_map(one, zip(ds.images, ds.labels))
    top1 = math.fsum(r[0] for r in results) / ds.size
    nll = math.fsum(r[1] for r in results) / ds.size
    row = EvalRow(method, S if method != "central" else 1, top1, nll)
    return EvalReport([row], _dataset_desc(ds), _checkpoint_desc(ckpt), seed)


def interpolate_curve(ckpt: Checkpoint, head: LinearHead, ds: Dataset,
                      endpoint_kind: str, alphas, S: int, seed: int,
                      policy: AugmentationPolicy | None = None) -> InterpolationCurve:
    """Metrics on blends (1-alpha) * mean_embedding + alpha * endpoint.

    The endpoint is the central-crop embedding or each individual
    augmentation embedding (then metrics also average over samples). The
    sample draws match ``evaluate`` for the same (policy, S, seed).
    """
    if endpoint_kind not in ENDPOINT_KINDS:
        raise ValueError(f"unknown endpoint {endpoint_kind!r}, expected {ENDPOINT_KINDS}")
    alphas = [float(a) for a in alphas]
    if any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ValueError("alphas must lie in [0, 1]")
    if alphas != sorted(set(alphas)) or not alphas or alphas[0] != 0.0 or alphas[-1] != 1.0:
        raise ValueError("alphas must be strictly ascending and include 0.0 and 1.0")
    if policy is None:
        raise ValueError("an augmentation policy is required")
    _check_labels(ds, head)
    if ds.size == 0:
        raise ValueError("empty dataset")

    def one(item):
        img, label = item
        samples = per_sample_embeddings(ckpt, img, policy, S, seed, image_key(img))
        mean, _ = mean_and_variance(samples)
        if endpoint_kind == "central_crop":
            endpoints = central_embedding(ckpt, img).data[None]
        else:
            endpoints = samples
        per_alpha = []
        for a in alphas:
            blend = ((1.0 - a) * mean.astype(np.float64)[None]
                     + a * endpoints.astype(np.float64)).astype(np.float32)
            nlls, accs = [], []
            for e in blend:
                probs = te.softmax(head_logits(head, Tensor(e))).data
                nlls.append(_nll(probs, label))
                accs.append(_top1(probs, label))
            per_alpha.append((math.fsum(nlls) / len(nlls), math.fsum(accs) / len(accs)))
        return per_alpha

    results = parallel_map(one, zip(ds.images, ds.labels))
    nll = tuple(math.fsum(r[i][0] for r in results) / ds.size for i in range(len(alphas)))
    acc = tuple(math.fsum(r[i][1] for r in results) / ds.size for i in range(len(alphas)))
    return InterpolationCurve(endpoint_kind, tuple(alphas), nll, acc, S, seed)


def jitter_stats(ckpt: Checkpoint, head: LinearHead, ds_subset: Dataset,
                 policy: AugmentationPolicy, S: int, seed: int) -> JitterProfile:
    """Spread of per-class probabilities across S augmentation samples.

    The flip count per image is the number of samples whose argmax differs
    from the majority argmax (ties toward the lowest class index).
    """
    if S < 2:
        raise ValueError(f"jitter needs S >= 2, got {S}")
    _check_labels(ds_subset, head)

    def one(item):
        pos, img = item
        samples = per_sample_embeddings(ckpt, img, policy, S, seed, image_key(img))
        probs = np.stack([te.softmax(head_logits(head, Tensor(s))).data for s in samples])
        mean, var = mean_and_variance(probs)
        std = np.sqrt(var.astype(np.float64)).astype(np.float32)
        arg = probs.argmax(axis=1)
        majority = int(np.bincount(arg, minlength=probs.shape[1]).argmax())
        flips = int((arg != majority).sum())
        rows = [JitterRow(pos, c, float(mean[c]), float(std[c]),
                          float(probs[:, c].min()), float(probs[:, c].max()), flips)
                for c in range(probs.shape[1])]
        return rows, probs

    results = parallel_map(one, enumerate(ds_subset.images))
    all_rows = [r for rows, _ in results for r in rows]
    per_sample = {i: probs for i, (_, probs) in enumerate(results)}
    return JitterProfile(all_rows, per_sample, policy.descriptor(), S, seed)


# ---------------------------------------------------------------------------
# report emission

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _rows_and_header(obj):
    if isinstance(obj, EvalReport):
        header = ["method", "S", "top1", "nll", "seed"]
        rows = [[r.method, r.S, _fmt(r.top1), _fmt(r.nll), obj.seed] for r in obj.rows]
        meta = {"dataset": obj.dataset, "checkpoint": obj.checkpoint, "seed": obj.seed}
    elif isinstance(obj, InterpolationCurve):
        header = ["alpha", "endpoint", "nll", "accuracy"]
        rows = [[_fmt(a), obj.endpoint, _fmt(n), _fmt(c)]
                for a, n, c in zip(obj.alphas, obj.nll, obj.accuracy)]
        meta = {"endpoint": obj.endpoint, "S": obj.S, "seed": obj.seed}
    elif isinstance(obj, JitterProfile):
        header = ["image_id", "class", "prob_mean", "prob_std", "prob_min",
                  "prob_max", "argmax_flips"]
        rows = [[r.image_id, r.class_index, _fmt(r.prob_mean), _fmt(r.prob_std),
                 _fmt(r.prob_min), _fmt(r.prob_max), r.argmax_flips] for r in obj.rows]
        meta = {"policy": obj.policy, "S": obj.S, "seed": obj.seed}
    else:
        raise TypeError(f"cannot emit {type(obj).__name__}")
    return header, rows, meta


def emit_report(obj, path, fmt: str = "csv") -> None:
    """Write a report, curve, or profile as CSV or JSON."""
    header, rows, meta = _rows_and_header(obj)
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
    elif fmt == "json":
        payload = dict(meta)
        payload["rows"] = [
            {key: (float(v) if isinstance(v, str) and key not in ("method", "endpoint", "policy")
                   else v)
             for key, v in zip(header, row)}
            for row in rows
        ]
        with open(path, "w") as f:
            json.dump(payload, f, indent=2)
            f.write("\n")
    else:
        raise ValueError(f"unknown format {fmt!r}, expected csv or json")
