"""Small convolutional backbone, augmented training, and checkpoint I/O.

The backbone is a stack of bias-free 3x3 convolutions with ReLU and a
global average pool producing the embedding vector. Training replaces each
minibatch image with one augmentation draw before the forward pass; the
linear head is trained the same way on frozen features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor_engine as te
from .data_aug import AugmentationPolicy, Dataset, mix_seed, sample_transform, apply_transform
from .tensor_engine import OptimizerState, Tensor

CHECKPOINT_MAGIC = b"MTCK"
CHECKPOINT_VERSION = 1

# fixed input shift; [0,1] images become zero-centered, which keeps the
# bias-free first conv stage from losing half its ReLU features
INPUT_CENTER = np.float32(0.5)


class CheckpointFormatError(ValueError):
    """Checkpoint file is not a valid MTCK payload."""


@dataclass(frozen=True)
class StageSpec:
    channels: int
    kernel: int = 3
    stride: int = 1


@dataclass(frozen=True)
class BackboneConfig:
    """Input geometry plus the conv stage list; embedding is the pooled output."""

    in_shape: tuple[int, int, int]
    stages: tuple[StageSpec, ...]
    embedding_dim: int

    def __post_init__(self):
        if len(self.in_shape) != 3 or any(d < 1 for d in self.in_shape):
            raise ValueError(f"bad input shape {self.in_shape}")
        if not self.stages:
            raise ValueError("need at least one stage")
        for st in self.stages:
            if st.channels < 1 or st.kernel < 1 or st.stride < 1:
                raise ValueError(f"bad stage {st}")
        if self.embedding_dim != self.stages[-1].channels:
            raise ValueError(
                f"embedding_dim {self.embedding_dim} != last stage channels "
                f"{self.stages[-1].channels}")

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        cin = self.in_shape[0]
        for i, st in enumerate(self.stages):
            shapes[f"stage{i}.kernel"] = (st.channels, cin, st.kernel, st.kernel)
            cin = st.channels
        return shapes


def default_config(in_channels: int = 3, in_size: int = 32,
                   channels=(16, 32, 64)) -> BackboneConfig:
    stages = tuple(StageSpec(c, kernel=3, stride=2) for c in channels)
    return BackboneConfig((in_channels, in_size, in_size), stages, channels[-1])


@dataclass(frozen=True)
class LinearHead:
    """Softmax classifier weights over the embedding."""

    weight: Tensor  # (num_classes, embedding_dim)
    bias: Tensor    # (num_classes,)

    def __post_init__(self):
        if self.weight.data.ndim != 2 or self.bias.data.ndim != 1 \
                or self.weight.shape[0] != self.bias.shape[0]:
            raise ValueError(
                f"bad head shapes weight={self.weight.shape} bias={self.bias.shape}")
        if not (np.isfinite(self.weight.data).all() and np.isfinite(self.bias.data).all()):
            raise ValueError("head parameters must be finite")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class TrainMeta:
    seed: int = 0
    epochs: int = 0
    policy: str = ""


@dataclass
class Checkpoint:
    """Named parameters for the backbone, optionally a linear head."""

    params: dict[str, Tensor]
    config: BackboneConfig
    meta: TrainMeta = field(default_factory=TrainMeta)

    def __post_init__(self):
        expected = self.config.param_shapes()
        for name, shape in expected.items():
            t = self.params.get(name)
            if t is None:
                raise CheckpointFormatError(f"missing parameter {name!r}")
            if t.shape != shape:
                raise CheckpointFormatError(
                    f"parameter {name!r} has shape {t.shape}, expected {shape}")
        extra = set(self.params) - set(expected) - {"head.weight", "head.bias"}
        if extra:
            raise CheckpointFormatError(f"unexpected parameters {sorted(extra)}")
        if ("head.weight" in self.params) != ("head.bias" in self.params):
            raise CheckpointFormatError("head weight and bias must come together")
        if "head.weight" in self.params:
            hw, hb = self.params["head.weight"], self.params["head.bias"]
            if hw.data.ndim != 2 or hw.shape[1] != self.config.embedding_dim \
                    or hb.shape != (hw.shape[0],):
                raise CheckpointFormatError(
                    f"head shapes {hw.shape}/{hb.shape} do not match "
                    f"embedding dim {self.config.embedding_dim}")

    @property
    def head(self) -> LinearHead | None:
        if "head.weight" not in self.params:
            return None
        return LinearHead(self.params["head.weight"], self.params["head.bias"])

    def backbone_params(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if not k.startswith("head.")}

    def with_head(self, head: LinearHead) -> "Checkpoint":
        params = dict(self.backbone_params())
        params["head.weight"] = head.weight
        params["head.bias"] = head.bias
        return Checkpoint(params, self.config, self.meta)


def build_backbone(cfg: BackboneConfig, init_seed: int) -> Checkpoint:
    """He-style fan-in-scaled uniform initialization, deterministic in the seed."""
    params: dict[str, Tensor] = {}
    for i, (name, shape) in enumerate(cfg.param_shapes().items()):
        fan_in = shape[1] * shape[2] * shape[3]
        bound = np.sqrt(6.0 / fan_in)
        rng = np.random.Generator(np.random.PCG64(mix_seed(init_seed, "init", i)))
        params[name] = Tensor(rng.uniform(-bound, bound, size=shape))
    return Checkpoint(params, cfg, TrainMeta(seed=init_seed))


def _forward_embedding(params, cfg: BackboneConfig, x):
    """Conv stages with ReLU, then global average pool. Works on Tensor or Node."""
    h = x
    for i, st in enumerate(cfg.stages):
        h = te.relu(te.conv2d(h, params[f"stage{i}.kernel"], st.stride, st.kernel // 2))
    return te.global_avg_pool(h)


def embed(ckpt: Checkpoint, image: Tensor) -> Tensor:
    """Deterministic forward pass to the pooled embedding.

    The channel count must match the config; spatial size may differ from
    the nominal input (multi-scale callers rely on this) as long as the
    conv geometry stays valid.
    """
    if image.data.ndim != 3 or image.shape[0] != ckpt.config.in_shape[0]:
        raise te.ShapeError(
            f"image shape {image.shape} incompatible with input {ckpt.config.in_shape}")
    out = _forward_embedding(ckpt.params, ckpt.config,
                             Tensor(image.data - INPUT_CENTER))
    if not np.isfinite(out.data).all():
        raise ValueError("non-finite embedding")
    return out


def embed_batch(ckpt: Checkpoint, images: list[Tensor]) -> np.ndarray:
    """Stacked forward pass for same-size images; returns (N, D) float32."""
    x = Tensor(np.stack([img.data for img in images]) - INPUT_CENTER)
    return _forward_embedding(ckpt.params, ckpt.config, x).data


def head_logits(head: LinearHead, embedding) -> Tensor:
    return te.dense(embedding, head.weight, head.bias)


def _check_train_inputs(ds: Dataset, policy: AugmentationPolicy, cfg: BackboneConfig):
    if ds.size == 0:
        raise ValueError("empty dataset")
    c, hh, ww = cfg.in_shape
    out = policy.output_size
    if (out, out) != (hh, ww):
        raise ValueError(
            f"policy output {out}x{out} does not match model input {hh}x{ww}")


def _augmented_batch(ds: Dataset, indices, policy, seed: int, epoch: int) -> Tensor:
    views = []
    for idx in indices:
        t = sample_transform(policy, seed, int(idx), epoch)
        views.append(apply_transform(ds.images[idx], t).data)
    return Tensor(np.stack(views) - INPUT_CENTER)


def _batches(order: np.ndarray, batch: int):
    for start in range(0, len(order), batch):
        yield order[start:start + batch]


def train_backbone(ckpt: Checkpoint, ds: Dataset, policy: AugmentationPolicy,
                   epochs: int, batch: int, opt: OptimizerState, seed: int) -> Checkpoint:
    """Joint training of the backbone and a temporary softmax head.

    Each minibatch image is replaced by one augmentation draw (sample index
    = epoch). Returns a checkpoint that includes the trained head.
    """
    _check_train_inputs(ds, policy, ckpt.config)
    if batch < 1 or epochs < 0:
        raise ValueError("batch must be >= 1 and epochs >= 0")

    cfg = ckpt.config
    params = dict(ckpt.backbone_params())
    if "head.weight" in ckpt.params:
        params["head.weight"] = ckpt.params["head.weight"]
        params["head.bias"] = ckpt.params["head.bias"]
    else:
        rng = np.random.Generator(np.random.PCG64(mix_seed(seed, "train-head")))
        bound = np.sqrt(6.0 / cfg.embedding_dim)
        params["head.weight"] = Tensor(
            rng.uniform(-bound, bound, size=(ds.num_classes, cfg.embedding_dim)))
        params["head.bias"] = Tensor(np.zeros(ds.num_classes))

    state = OptimizerState(opt.learning_rate, opt.momentum)
    labels = np.asarray(ds.labels, dtype=np.int64)
    for epoch in range(epochs):
        perm = np.random.Generator(
            np.random.PCG64(mix_seed(seed, "shuffle", epoch))).permutation(ds.size)
        for idx in _batches(perm, batch):
            x = _augmented_batch(ds, idx, policy, seed, epoch)
            tape = te.Tape()
            nodes = {name: tape.param(name, t) for name, t in params.items()}
            emb = _forward_embedding(nodes, cfg, tape.leaf(x))
            probs = te.softmax(te.dense(emb, nodes["head.weight"], nodes["head.bias"]))
            loss = te.cross_entropy(probs, labels[idx])
            if not np.isfinite(loss.value.data).all():
                raise ValueError(f"non-finite loss at epoch {epoch}")
            grads = te.backward(tape, loss).params()
            params = te.sgd_step(params, grads, state)
    meta = TrainMeta(seed=seed, epochs=epochs, policy=policy.descriptor())
    return Checkpoint(params, cfg, meta)


def train_linear_head(ckpt: Checkpoint, ds: Dataset, policy: AugmentationPolicy,
                      epochs: int, batch: int, opt: OptimizerState, seed: int) -> LinearHead:
    """Train a softmax head on frozen per-augmentation embeddings.

    The backbone is never touched; only the returned head is learned.
    Starts from zero weights (the objective is convex in the head).
    """
    _check_train_inputs(ds, policy, ckpt.config)
    if batch < 1 or epochs < 0:
        raise ValueError("batch must be >= 1 and epochs >= 0")
    cfg = ckpt.config
    head = {
        "weight": Tensor(np.zeros((ds.num_classes, cfg.embedding_dim))),
        "bias": Tensor(np.zeros(ds.num_classes)),
    }
    state = OptimizerState(opt.learning_rate, opt.momentum)
    labels = np.asarray(ds.labels, dtype=np.int64)
    backbone = ckpt.backbone_params()
    for epoch in range(epochs):
        perm = np.random.Generator(
            np.random.PCG64(mix_seed(seed, "shuffle", epoch))).permutation(ds.size)
        for idx in _batches(perm, batch):
            x = _augmented_batch(ds, idx, policy, seed, epoch)
            emb = Tensor(_forward_embedding(backbone, cfg, x).data)
            tape = te.Tape()
            nodes = {name: tape.param(name, t) for name, t in head.items()}
            probs = te.softmax(te.dense(tape.leaf(emb), nodes["weight"], nodes["bias"]))
            loss = te.cross_entropy(probs, labels[idx])
            if not np.isfinite(loss.value.data).all():
                raise ValueError(f"non-finite loss at epoch {epoch}")
            grads = te.backward(tape, loss).params()
            head = te.sgd_step(head, grads, state)
    return LinearHead(head["weight"], head["bias"])


def dataset_loss(ckpt: Checkpoint, ds: Dataset, policy: AugmentationPolicy,
                 seed: int, epoch: int = 0) -> float:
    """Mean augmented cross-entropy under the checkpoint's own head.

    Uses the same augmentation draws as training epoch ``epoch``, so it can
    compare checkpoints before and after optimization on equal footing.
    """
    head = ckpt.head
    if head is None:
        raise ValueError("checkpoint has no head")
    _check_train_inputs(ds, policy, ckpt.config)
    labels = np.asarray(ds.labels, dtype=np.int64)
    backbone = ckpt.backbone_params()
    total = 0.0
    for start in range(0, ds.size, 64):
        idx = np.arange(start, min(start + 64, ds.size))
        x = _augmented_batch(ds, idx, policy, seed, epoch)
        emb = _forward_embedding(backbone, ckpt.config, x)
        probs = te.softmax(te.dense(emb, head.weight, head.bias))
        total += te.cross_entropy(probs, labels[idx]) * len(idx)
    return total / ds.size


# ---------------------------------------------------------------------------
# checkpoint I/O

def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write the MTCK binary format (little-endian throughout)."""
    cfg = ckpt.config
    policy_bytes = ckpt.meta.policy.encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        c, h, w = cfg.in_shape
        f.write(struct.pack("<IIIII", c, h, w, cfg.embedding_dim, len(cfg.stages)))
        for st in cfg.stages:
            f.write(struct.pack("<III", st.channels, st.kernel, st.stride))
        seed = ckpt.meta.seed & ((1 << 64) - 1)
        f.write(struct.pack("<IIII", seed & 0xFFFFFFFF, seed >> 32,
                            ckpt.meta.epochs, len(policy_bytes)))
        f.write(policy_bytes)
        f.write(struct.pack("<I", len(ckpt.params)))
        for name, t in ckpt.params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
            f.write(t.data.astype("<f4").tobytes())


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointFormatError(
            f"truncated checkpoint (wanted {n} bytes, got {len(buf)})")
    return buf


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        c, h, w, emb_dim, n_stages = struct.unpack("<IIIII", _read_exact(f, 20))
        stages = []
        for _ in range(n_stages):
            ch, k, s = struct.unpack("<III", _read_exact(f, 12))
            stages.append(StageSpec(ch, k, s))
        try:
            cfg = BackboneConfig((c, h, w), tuple(stages), emb_dim)
        except ValueError as exc:
            raise CheckpointFormatError(f"bad config block: {exc}") from exc
        seed_lo, seed_hi, epochs, policy_len = struct.unpack("<IIII", _read_exact(f, 16))
        policy = _read_exact(f, policy_len).decode("utf-8")
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2))
            name = _read_exact(f, name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", _read_exact(f, 1))
            dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
            n_el = int(np.prod(dims, dtype=np.int64)) if rank else 1
            raw = np.frombuffer(_read_exact(f, 4 * n_el), dtype="<f4")
            params[name] = Tensor(raw.reshape(dims))
    meta = TrainMeta(seed=seed_lo | (seed_hi << 32), epochs=epochs, policy=policy)
    try:
        return Checkpoint(params, cfg, meta)
    except CheckpointFormatError:
        raise
    except ValueError as exc:
        raise CheckpointFormatError(str(exc)) from exc
