"""Augmentation-averaged embeddings and the two prediction-averaging modes.

``mean_embedding`` averages the backbone embedding over augmentation draws
of one image (exact enumeration for finite policies). ``tta_predict``
averages softmax outputs across draws, ``metta_predict`` applies the head
once to the mean embedding; because the head is affine the latter equals
averaging pre-softmax logits. A small cosine index covers retrieval.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass

import numpy as np

from . import tensor_engine as te
from .data_aug import (AugmentationPolicy, Dataset, TransformParams,
                       apply_transform, enumerate_group, sample_transform)
from .model import Checkpoint, LinearHead, embed, head_logits
from .parallel import parallel_map
from .tensor_engine import Tensor

CENTRAL_CROP_FRACTION = 0.875


@dataclass(frozen=True)
class EmbeddingStats:
    """Mean and elementwise population variance over augmentation samples."""

    mean: Tensor
    variance: Tensor
    sample_count: int
    policy: str
    image_id: int

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValueError("sample_count must be >= 1")
        if self.mean.shape != self.variance.shape:
            raise ValueError("mean and variance shapes differ")
        if (self.variance.data < 0).any():
            raise ValueError("variance must be non-negative")


@dataclass(frozen=True)
class RetrievalIndex:
    """Unit-norm mean embeddings for a corpus, ready for cosine queries."""

    ids: tuple[int, ...]
    vectors: np.ndarray  # (N, D) float32, rows unit-norm
    policy: str

    @property
    def size(self) -> int:
        return len(self.ids)


def image_key(image: Tensor) -> int:
    """Stable 63-bit id derived from image content.

    Used to seed per-image augmentation draws so results do not depend on
    the image's position in a dataset.
    """
    digest = hashlib.blake2b(image.data.tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little") & ((1 << 63) - 1)


def mean_and_variance(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shift-stabilized two-pass mean/variance over axis 0 in float64.

    Accumulation runs in ascending sample order. Identical rows give the
    row back bitwise and an exactly-zero variance.
    """
    s = np.asarray(samples, dtype=np.float32)
    n = s.shape[0]
    ref = s[0].astype(np.float64)
    acc = np.zeros_like(ref)
    for i in range(1, n):
        acc += s[i].astype(np.float64) - ref
    mean = ref + acc / n
    acc2 = np.zeros_like(ref)
    for i in range(n):
        d = s[i].astype(np.float64) - mean
        acc2 += d * d
    return mean.astype(np.float32), (acc2 / n).astype(np.float32)


def per_sample_transforms(policy: AugmentationPolicy, S: int,
                          global_seed: int, image_index: int) -> list[TransformParams]:
    """The transform list one averaging pass will use.

    Finite-group policies ignore S and enumerate exactly; stochastic ones
    draw S counter-seeded samples.
    """
    if policy.is_group:
        return enumerate_group(policy)
    if S < 1:
        raise ValueError(f"S must be >= 1, got {S}")
    return [sample_transform(policy, global_seed, image_index, s) for s in range(S)]


def per_sample_embeddings(ckpt: Checkpoint, image: Tensor, policy: AugmentationPolicy,
                          S: int, global_seed: int, image_index: int) -> np.ndarray:
    """Embeddings of every augmentation sample, stacked (S, D) in sample order."""
    transforms = per_sample_transforms(policy, S, global_seed, image_index)

    def one(t: TransformParams) -> np.ndarray:
        return embed(ckpt, apply_transform(image, t)).data

    return np.stack(parallel_map(one, transforms))


def central_embedding(ckpt: Checkpoint, image: Tensor) -> Tensor:
    """Embedding of the deterministic centered crop at the model input size."""
    in_size = image.shape[1]
    if image.shape[1] != image.shape[2]:
        raise te.ShapeError(f"expected square image, got {image.shape}")
    policy = AugmentationPolicy("CentralCrop", in_size, ckpt.config.in_shape[1],
                                crop_fraction=CENTRAL_CROP_FRACTION)
    t = sample_transform(policy, 0, 0, 0)
    return embed(ckpt, apply_transform(image, t))


def mean_embedding(ckpt: Checkpoint, image: Tensor, policy: AugmentationPolicy,
                   S: int, global_seed: int, image_index: int) -> EmbeddingStats:
    """Average embedding over augmentation samples, with per-dim variance."""
    samples = per_sample_embeddings(ckpt, image, policy, S, global_seed, image_index)
    mean, var = mean_and_variance(samples)
    return EmbeddingStats(te.Tensor(mean), te.Tensor(var), samples.shape[0],
                          policy.descriptor(), image_index)


def _check_head(ckpt: Checkpoint, head: LinearHead):
    if head.weight.shape[1] != ckpt.config.embedding_dim:
        raise te.ShapeError(
            f"head dim {head.weight.shape[1]} != embedding dim "
            f"{ckpt.config.embedding_dim}")


def tta_predict(ckpt: Checkpoint, head: LinearHead, image: Tensor,
                policy: AugmentationPolicy, S: int, global_seed: int,
                image_index: int) -> Tensor:
    """Average the per-sample softmax outputs (probability-space averaging)."""
    _check_head(ckpt, head)
    samples = per_sample_embeddings(ckpt, image, policy, S, global_seed, image_index)
    probs = np.stack([te.softmax(head_logits(head, Tensor(s))).data for s in samples])
    mean, _ = mean_and_variance(probs)
    return Tensor(mean)


def metta_predict(ckpt: Checkpoint, head: LinearHead, image: Tensor,
                  policy: AugmentationPolicy, S: int, global_seed: int,
                  image_index: int) -> Tensor:
    """Apply the head to the mean embedding, then softmax once.

    Equals averaging the affine pre-softmax outputs before the softmax.
    """
    _check_head(ckpt, head)
    stats = mean_embedding(ckpt, image, policy, S, global_seed, image_index)
    return te.softmax(head_logits(head, stats.mean))


# ---------------------------------------------------------------------------
# retrieval

DEFAULT_INDEX_SAMPLES = 8


def _unit(vec: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(vec.astype(np.float64)))
    if norm < 1e-30:
        raise ValueError("cannot normalize an all-zero embedding")
    return (vec.astype(np.float64) / norm).astype(np.float32)


def build_index(ckpt: Checkpoint, corpus: Dataset, policy: AugmentationPolicy,
                S: int = DEFAULT_INDEX_SAMPLES, global_seed: int = 0) -> RetrievalIndex:
    """Unit-normalized mean embedding per corpus image.

    Per-image draws are keyed by image content, so the stored vector for an
    image does not depend on corpus order.
    """
    if corpus.size == 0:
        raise ValueError("empty corpus")

    def one(img: Tensor) -> np.ndarray:
        stats = mean_embedding(ckpt, img, policy, S, global_seed, image_key(img))
        return _unit(stats.mean.data)

    vectors = np.stack(parallel_map(one, corpus.images))
    return RetrievalIndex(tuple(range(corpus.size)), vectors, policy.descriptor())


def query_index(index: RetrievalIndex, ckpt: Checkpoint, query_image: Tensor,
                policy: AugmentationPolicy, k: int,
                S: int = DEFAULT_INDEX_SAMPLES, global_seed: int = 0) -> list[tuple[int, float]]:
    """Top-k corpus ids by cosine score, ties broken by lowest id."""
    if not 1 <= k <= index.size:
        raise ValueError(f"k must be in [1, {index.size}], got {k}")
    stats = mean_embedding(ckpt, query_image, policy, S, global_seed,
                           image_key(query_image))
    q = _unit(stats.mean.data)
    scores = index.vectors.astype(np.float64) @ q.astype(np.float64)
    order = np.lexsort((np.asarray(index.ids), -scores))
    return [(int(index.ids[i]), float(scores[i])) for i in order[:k]]


# ---------------------------------------------------------------------------
# embedding dumps

def dump_embedding_csv(path, entries) -> None:
    """Write per-sample embeddings plus a mean row per image.

    ``entries`` yields (image_id, samples (S, D), mean (D,)). The mean row
    uses sample_index = -1.
    """
    entries = list(entries)
    dim = entries[0][1].shape[1] if entries else 0
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "sample_index"] + [f"dim_{i}" for i in range(dim)])
        for image_id, samples, mean in entries:
            for s, row in enumerate(samples):
                writer.writerow([image_id, s] + [format(float(v), ".17g") for v in row])
            writer.writerow([image_id, -1] + [format(float(v), ".17g") for v in mean])
