"""Multi-exit residual CNN with CAM-style exit heads.

Each stage is a stride-2 3x3 conv + norm + relu followed by residual blocks.
An exit attached to stage ``s`` is a 1x1 conv to ``num_classes`` channels; its
output is the activation map ``M_e`` and the exit logits are the spatial mean
of that map, so the class map *is* the pre-pool activation of the head.

Stages and exits are numbered from 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, ShapeError
from .rng import SplitMix64
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 2
    stage_widths: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: int = 1
    exit_stages: tuple[int, ...] = (1, 2, 3, 4)
    input_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(w) for w in self.stage_widths))
        object.__setattr__(self, "exit_stages", tuple(int(s) for s in self.exit_stages))
        self.validate()

    @property
    def num_stages(self) -> int:
        return len(self.stage_widths)

    @property
    def embedding_dim(self) -> int:
        return self.stage_widths[-2]

    def validate(self) -> None:
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigError("need in_channels >= 1 and num_classes >= 2")
        if len(self.stage_widths) < 2 or min(self.stage_widths) < 1:
            raise ConfigError(f"stage_widths needs >= 2 positive entries, got {self.stage_widths}")
        if self.blocks_per_stage < 0:
            raise ConfigError("blocks_per_stage must be >= 0")
        ex = self.exit_stages
        if not ex:
            raise ConfigError("exit_stages must not be empty")
        if any(b <= a for a, b in zip(ex, ex[1:])):
            raise ConfigError(f"exit_stages must be strictly increasing, got {ex}")
        if ex[0] < 1 or ex[-1] != self.num_stages:
            raise ConfigError(
                f"exit_stages must lie in 1..{self.num_stages} and include the last stage, got {ex}"
            )
        if self.input_size < 2 ** (self.num_stages - 1):
            raise ConfigError(
                f"input_size {self.input_size} too small for {self.num_stages} stride-2 stages"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        d["exit_stages"] = list(self.exit_stages)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ExitOutputs:
    """Per-exit activation maps and logits, plus the penultimate embedding.

    All tensors carry a leading batch axis; ``sample(i)`` extracts one input.
    """

    exits: tuple[int, ...]
    maps: list[Tensor]
    logits: list[Tensor]
    embedding: Tensor

    def __len__(self) -> int:
        return len(self.exits)

    @property
    def batch_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def final_logits(self) -> Tensor:
        return self.logits[-1]

    def logits_by_exit(self, i: int = 0) -> dict[int, np.ndarray]:
        return {e: l.data[i] for e, l in zip(self.exits, self.logits)}

    def maps_by_exit(self, i: int = 0) -> dict[int, np.ndarray]:
        return {e: m.data[i] for e, m in zip(self.exits, self.maps)}

    def sample(self, i: int) -> "ExitOutputs":
        return ExitOutputs(
            self.exits,
            [Tensor(m.data[i:i + 1]) for m in self.maps],
            [Tensor(l.data[i:i + 1]) for l in self.logits],
            Tensor(self.embedding.data[i:i + 1]),
        )


class Model:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        """Parameters followed by buffers, in construction order."""
        out = {k: p.data for k, p in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        expected = list(self.params) + list(self.buffers)
        if sorted(state) != sorted(expected):
            missing = set(expected) - set(state)
            extra = set(state) - set(expected)
            raise DataError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise DataError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=np.float32)
        for k, b in self.buffers.items():
            if state[k].shape != b.shape:
                raise DataError(f"{k}: shape {state[k].shape} != {b.shape}")
            self.buffers[k] = np.array(state[k], dtype=np.float32)

    def __call__(self, x, training: bool = False) -> ExitOutputs:
        return forward(self, x, training=training)


def _layer_specs(config: ModelConfig):
    """Yield (name, shape, fan_in) for every parameter in construction order."""
    c_in = config.in_channels
    for s, width in enumerate(config.stage_widths, start=1):
        yield f"stage{s}.down.conv", (width, c_in, 3, 3), c_in * 9
        yield f"stage{s}.down.bn", (width,), None
        for b in range(config.blocks_per_stage):
            for j in (1, 2):
                yield f"stage{s}.block{b}.conv{j}", (width, width, 3, 3), width * 9
                yield f"stage{s}.block{b}.bn{j}", (width,), None
        if s in config.exit_stages:
            yield f"exit{s}", (config.num_classes, width, 1, 1), width
        c_in = width


def build(config: ModelConfig, seed: int) -> Model:
    """Instantiate a model with He-normal conv weights drawn from ``seed``."""
    config.validate()
    rng = SplitMix64(seed)
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    for name, shape, fan_in in _layer_specs(config):
        if fan_in is None:
            params[f"{name}.weight"] = Tensor(np.ones(shape), requires_grad=True)
            params[f"{name}.bias"] = Tensor(np.zeros(shape), requires_grad=True)
            buffers[f"{name}.running_mean"] = np.zeros(shape, dtype=np.float32)
            buffers[f"{name}.running_var"] = np.ones(shape, dtype=np.float32)
        else:
            w = rng.normal(shape) * math.sqrt(2.0 / fan_in)
            params[f"{name}.weight"] = Tensor(w, requires_grad=True)
            if name.startswith("exit"):
                params[f"{name}.bias"] = Tensor(np.zeros(shape[0]), requires_grad=True)
    return Model(config, params, buffers)


def _conv_bn(model: Model, x: Tensor, conv: str, bn: str, stride: int, training: bool) -> Tensor:
    p, b = model.params, model.buffers
    y = T.conv2d(x, p[f"{conv}.weight"], None, stride=stride, padding=1)
    return T.batch_norm(
        y, p[f"{bn}.weight"], p[f"{bn}.bias"], b[f"{bn}.running_mean"], b[f"{bn}.running_var"], training
    )


def forward(model: Model, x, training: bool = False) -> ExitOutputs:
    """Run the backbone, returning every configured exit and the embedding.

    The embedding is the spatial mean of the output of the stage preceding the
    final stage. Training mode uses batch statistics and updates running buffers.
    """
    cfg = model.config
    x = T.as_tensor(x)
    expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError(f"forward: input shape {x.shape} does not match N x {expected}")
    p = model.params
    maps, logits = [], []
    embedding = None
    h = x
    for s in range(1, cfg.num_stages + 1):
        h = T.relu(_conv_bn(model, h, f"stage{s}.down.conv", f"stage{s}.down.bn", 2, training))
        for b in range(cfg.blocks_per_stage):
            pre = f"stage{s}.block{b}"
            r = T.relu(_conv_bn(model, h, f"{pre}.conv1", f"{pre}.bn1", 1, training))
            r = _conv_bn(model, r, f"{pre}.conv2", f"{pre}.bn2", 1, training)
            h = T.relu(T.add(h, r))
        if s in cfg.exit_stages:
            m = T.conv2d(h, p[f"exit{s}.weight"], p[f"exit{s}.bias"])
            maps.append(m)
            logits.append(T.global_avg_pool(m))
        if s == cfg.num_stages - 1:
            embedding = T.global_avg_pool(h)
    return ExitOutputs(cfg.exit_stages, maps, logits, embedding)


def forward_batched(model: Model, images: np.ndarray, chunk: int = 64) -> list[ExitOutputs]:
    """Inference in fixed-size chunks; results do not depend on caller batching."""
    return [forward(model, images[i:i + chunk]) for i in range(0, len(images), chunk)]


def predicted_class(outputs: ExitOutputs) -> int:
    """Argmax of the final-exit logits of the first sample; ties go to the lowest index."""
    if not outputs.logits:
        raise ValueError("outputs carry no exits")
    return int(np.argmax(outputs.final_logits.data[0]))


def normalize_loss_weights(weights: Sequence[float] | None, n_exits: int) -> np.ndarray:
    if weights is None or len(weights) == 0:
        return np.full(n_exits, 1.0 / n_exits)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (n_exits,):
        raise ConfigError(f"expected {n_exits} exit loss weights, got {len(w)}")
    if (w < 0).any() or w.sum() <= 0:
        raise ConfigError(f"exit loss weights must be non-negative with positive sum, got {list(w)}")
    return w / w.sum()


def multi_exit_loss(outputs: ExitOutputs, labels, exit_loss_weights: Sequence[float] | None = None) -> Tensor:
    """Weighted sum of per-exit cross-entropies; weights are normalised to sum 1.

    Exits with zero weight are skipped so they contribute no gradient at all.
    """
    w = normalize_loss_weights(exit_loss_weights, len(outputs.logits))
    total = None
    for wi, logit in zip(w, outputs.logits):
        if wi == 0.0:
            continue
        term = T.cross_entropy(logit, labels)
        if wi != 1.0:
            term = T.mul(term, float(wi))
        total = term if total is None else T.add(total, term)
    return total


def cosine_lr(step: int, total_steps: int, lr_start: float, lr_end: float) -> float:
    """Cosine decay from ``lr_start`` at step 0 to ``lr_end`` at the last step."""
    if total_steps <= 1:
        return lr_start
    t = step / (total_steps - 1)
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * t))


@dataclass
class TrainResult:
    model: Model
    loss_log: list[float] = field(default_factory=list)
    train_accuracy: float = float("nan")


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray, chunk: int = 64) -> float:
    preds = np.concatenate(
        [np.argmax(o.final_logits.data, axis=1) for o in forward_batched(model, images, chunk)]
    )
    return float(np.mean(preds == np.asarray(labels)))


def train(
    model: Model,
    dataset,
    epochs: int,
    lr_start: float = 0.01,
    lr_end: float = 1e-4,
    weight_decay: float = 1e-4,
    batch_size: int = 32,
    seed: int = 0,
    exit_loss_weights: Sequence[float] | None = None,
    augment: bool = True,
    momentum: float = 0.9,
    log_every: int = 1,
) -> TrainResult:
    """Mini-batch SGD on the multi-exit loss with a cosine learning-rate schedule.

    ``dataset`` needs ``images`` (N x C x H x W) and integer ``labels``. The loss
    log holds the mean batch loss of each epoch.
    """
    from .data import augment_image

    images = np.asarray(dataset.images, dtype=np.float32)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    n = len(images)
    if n == 0:
        raise DataError("cannot train on an empty dataset")
    if labels.min() < 0 or labels.max() >= model.config.num_classes:
        raise DataError(f"labels must lie in [0, {model.config.num_classes})")
    weights = normalize_loss_weights(exit_loss_weights, len(model.config.exit_stages))
    rng = SplitMix64(seed)
    steps_per_epoch = math.ceil(n / batch_size)
    total = epochs * steps_per_epoch
    params = model.parameters()
    result = TrainResult(model)
    velocity: dict[int, np.ndarray] = {}
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            batch = images[idx]
            if augment:
                batch = np.stack([augment_image(im, rng) for im in batch])
            lr = cosine_lr(step, total, lr_start, lr_end)
            with Tape():
                out = forward(model, batch, training=True)
                loss = multi_exit_loss(out, labels[idx], weights)
            T.backward(loss)
            T.sgd_step(params, lr, weight_decay, momentum, velocity)
            losses.append(loss.item())
            step += 1
        result.loss_log.append(float(np.mean(losses)))
        if log_every and (epoch + 1) % log_every == 0:
            logger.info("epoch %d/%d loss %.4f", epoch + 1, epochs, result.loss_log[-1])
    result.train_accuracy = accuracy(model, images, labels)
    return result
