"""A toy frozen dual encoder with adapter fine-tuning on synthetic few-shot tasks.

Each tower is a stack of frozen linear layers with ``tanh`` between them
(not after the last one).  Adapters may be placed on any subset of layers.
The "pretrained" model ties the text tower's frozen weights to the image
tower's, so a class prompt and a clean image of that class land close
together; the synthetic task then applies a domain shift to the images
that zero-shot classification only partly survives and that the adapters
can learn to correct.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import linalg as la
from .adapter import (Adapter, AdapterConfig, FrozenLinear, MergedLayer, forward, init_adapter,
                      merge)
from .backprop import backward_adapter, backward_input, tanh_backward
from .errors import ConfigError, ShapeError
from .linalg import Matrix
from .losses import DEFAULT_TEMPERATURE, LossKind, loss_fsl, normalize_rows, log_softmax
from .optim import OptimizerState, Schedule, adamw_step, cosine_lr

DEFAULT_DIMS = (64, 64, 32)
DEFAULT_SHOTS = (1, 2, 4, 8, 16)


class Tower:
    def __init__(self, layers: Sequence[FrozenLinear], adapters: dict[int, Adapter] | None = None):
        if not layers:
            raise ShapeError("a tower needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.d != b.k:
                raise ShapeError(f"layer widths do not chain: {a.W.shape} -> {b.W.shape}")
        self.layers = list(layers)
        self.adapters: dict[int, Adapter] = {}
        for idx, ad in (adapters or {}).items():
            self.attach(idx, ad)

    @property
    def in_dim(self) -> int:
        return self.layers[0].k

    @property
    def out_dim(self) -> int:
        return self.layers[-1].d

    def attach(self, idx: int, ad: Adapter) -> None:
        if not 0 <= idx < len(self.layers):
            raise ConfigError(f"placement index {idx} outside tower of {len(self.layers)} layers")
        layer = self.layers[idx]
        if ad.shape != (layer.k, layer.d):
            raise ShapeError(f"adapter {ad.shape} does not fit layer {idx} {layer.W.shape}")
        self.adapters[idx] = ad

    def encode(self, inputs: Matrix, counter: la.MacCounter | None = None) -> Matrix:
        return self._forward(inputs, counter)[0]

    def _forward(self, inputs: Matrix, counter=None) -> tuple[Matrix, list[Matrix]]:
        if inputs.ndim != 2 or inputs.shape[1] != self.in_dim:
            raise ShapeError(f"tower expects width {self.in_dim}, got input {inputs.shape}")
        acts = [inputs]
        h = inputs
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h = forward(h, layer, self.adapters.get(i), counter)
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        return h, acts

    def backward(self, acts: list[Matrix], grad_out: Matrix) -> dict[int, dict[str, Matrix]]:
        """Adapter gradients given the activations recorded by ``_forward``."""
        grads: dict[int, dict[str, Matrix]] = {}
        grad = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            if i < len(self.layers) - 1:
                grad = tanh_backward(grad, acts[i + 1])
            ad = self.adapters.get(i)
            if ad is not None:
                grads[i] = backward_adapter(grad, acts[i], ad)
            if i > 0:
                grad = backward_input(grad, self.layers[i].W, ad)
        return grads

    def merged(self) -> "Tower":
        """Copy with every adapter folded into its layer's weight."""
        layers = [merge(l, self.adapters[i]) if i in self.adapters else l
                  for i, l in enumerate(self.layers)]
        return Tower([FrozenLinear(l.W) if isinstance(l, MergedLayer) else l for l in layers])

    def base(self) -> "Tower":
        return Tower(self.layers)

    def weight_digest(self) -> str:
        h = hashlib.sha256()
        for layer in self.layers:
            h.update(np.ascontiguousarray(layer.W).tobytes())
        return h.hexdigest()


def random_tower(dims: Sequence[int], seed, dtype=la.F64) -> Tower:
    """Frozen layers with N(0, 1/fan_in) entries."""
    if len(dims) < 2 or min(dims) < 1:
        raise ConfigError(f"tower dims must list at least two positive widths, got {dims}")
    seeds = la.spawn_seeds(seed, len(dims) - 1)
    layers = [FrozenLinear(la.seeded_gaussian(k, d, s, 1 / np.sqrt(k), dtype))
              for (k, d), s in zip(zip(dims, dims[1:]), seeds)]
    return Tower(layers)


@dataclass
class DualEncoder:
    image: Tower
    text: Tower

    def __post_init__(self):
        if self.image.out_dim != self.text.out_dim:
            raise ShapeError(f"towers disagree on embedding width: "
                             f"{self.image.out_dim} vs {self.text.out_dim}")

    def towers(self) -> dict[str, Tower]:
        return {"image": self.image, "text": self.text}

    def attach_adapters(self, config: AdapterConfig, seed, dtype=la.F64) -> None:
        """Fresh adapters on ``config.placement`` of both towers."""
        image_seed, text_seed = la.spawn_seeds(seed, 2)
        for tower, tseed in ((self.image, image_seed), (self.text, text_seed)):
            layer_seeds = la.spawn_seeds(tseed, len(tower.layers))
            for idx in config.placement:
                if not 0 <= idx < len(tower.layers):
                    raise ConfigError(f"placement index {idx} outside tower of "
                                      f"{len(tower.layers)} layers")
                layer = tower.layers[idx]
                tower.attach(idx, init_adapter(config, layer.k, layer.d, layer_seeds[idx], dtype))

    def adapters(self) -> dict[str, Adapter]:
        """Adapters keyed ``"<tower>.<layer>"`` in a fixed order."""
        return {f"{name}.{idx}": ad
                for name, tower in self.towers().items()
                for idx, ad in sorted(tower.adapters.items())}

    def merged(self) -> "DualEncoder":
        return DualEncoder(self.image.merged(), self.text.merged())

    def weight_digest(self) -> str:
        return hashlib.sha256((self.image.weight_digest() + self.text.weight_digest())
                              .encode()).hexdigest()


def classify(v: Matrix, class_T: Matrix, temperature: float = DEFAULT_TEMPERATURE
             ) -> tuple[Matrix, np.ndarray]:
    """Softmax over cosine similarities; one row of probabilities per image row."""
    if class_T.shape[0] < 1:
        raise ShapeError("need at least one class embedding")
    v = np.atleast_2d(v)
    if v.shape[1] != class_T.shape[1]:
        raise ShapeError(f"embedding widths differ: {v.shape} vs {class_T.shape}")
    vn, _ = normalize_rows(v)
    tn, _ = normalize_rows(class_T)
    probs = np.exp(log_softmax((vn @ tn.T) / temperature))
    return probs, probs.argmax(axis=1)


@dataclass(frozen=True)
class Episode:
    n_way: int
    k_shot: int
    support: Matrix
    support_labels: np.ndarray
    query: Matrix
    query_labels: np.ndarray


@dataclass(frozen=True)
class SyntheticTask:
    """Prototype-plus-noise classes seen through a shifted "camera".

    Prototypes are random unit vectors.  Each class has a fixed prompt
    (its prototype) for the text tower.  Images of class ``c`` are
    ``shift @ prototype_c`` plus Gaussian noise, where ``shift`` is a fixed
    perturbation of the identity with strength ``shift``.
    """

    seed: int = 0
    n_classes: int = 10
    dims: tuple[int, ...] = DEFAULT_DIMS
    noise: float = 0.3
    queries_per_class: int = 50
    shift: float = 1.0

    def _streams(self):
        return la.spawn_seeds(self.seed, 4)

    @property
    def input_dim(self) -> int:
        return self.dims[0]

    def prototypes(self) -> Matrix:
        rng = np.random.default_rng(self._streams()[0])
        p = rng.normal(size=(self.n_classes, self.input_dim))
        return p / np.linalg.norm(p, axis=1, keepdims=True)

    def prompts(self, dtype=la.F64) -> Matrix:
        return self.prototypes().astype(dtype)

    def shift_matrix(self) -> Matrix:
        rng = np.random.default_rng(self._streams()[1])
        dim = self.input_dim
        return np.eye(dim) + self.shift * rng.normal(size=(dim, dim)) / np.sqrt(dim)

    def base_model(self, dtype=la.F64) -> DualEncoder:
        image = random_tower(self.dims, self._streams()[2], dtype)
        text = Tower(image.layers)
        return DualEncoder(image, text)

    def sample(self, per_class: int, rng: np.random.Generator) -> tuple[Matrix, np.ndarray]:
        """``per_class`` images of every class, grouped by draw then class."""
        centers = self.prototypes() @ self.shift_matrix().T
        labels = np.tile(np.arange(self.n_classes), per_class)
        x = centers[labels] + self.noise * rng.normal(size=(labels.size, self.input_dim))
        return x, labels

    def test_set(self) -> tuple[Matrix, np.ndarray]:
        return self.sample(self.queries_per_class, np.random.default_rng(self._streams()[3]))

    def episode(self, k_shot: int, seed, dtype=la.F64) -> Episode:
        """K-shot support set plus the task's fixed query set.

        Supports for one ``seed`` are nested: the K-shot set is the first K
        draws of every class from the same pool, so growing K only adds data.
        """
        if k_shot < 1:
            raise ConfigError(f"shots must be positive, got {k_shot}")
        pool = max(k_shot, max(DEFAULT_SHOTS))
        xs, ys = self.sample(pool, np.random.default_rng(seed))
        keep = slice(0, k_shot * self.n_classes)
        xq, yq = self.test_set()
        return Episode(self.n_classes, k_shot, xs[keep].astype(dtype), ys[keep],
                       xq.astype(dtype), yq)


def evaluate(model: DualEncoder, prompts: Matrix, inputs: Matrix, labels: np.ndarray,
             temperature: float = DEFAULT_TEMPERATURE) -> tuple[float, Matrix]:
    probs, pred = classify(model.image.encode(inputs), model.text.encode(prompts), temperature)
    return float(np.mean(pred == labels)), probs


def support_loss(model: DualEncoder, prompts: Matrix, episode: Episode,
                 temperature: float, variant: LossKind) -> float:
    return loss_fsl(model.image.encode(episode.support), model.text.encode(prompts),
                    episode.support_labels, temperature, variant).value


def loss_and_grads(model: DualEncoder, prompts: Matrix, episode: Episode, temperature: float,
                   variant: LossKind) -> tuple[float, dict[str, Matrix]]:
    """Support-set loss and gradients for every trainable adapter parameter.

    Gradient keys are ``"<tower>.<layer>.<param>"``.
    """
    V, image_acts = model.image._forward(episode.support)
    T, text_acts = model.text._forward(prompts)
    res = loss_fsl(V, T, episode.support_labels, temperature, variant)
    grads: dict[str, Matrix] = {}
    for name, tower, acts, g in (("image", model.image, image_acts, res.grad_V),
                                 ("text", model.text, text_acts, res.grad_T)):
        for idx, layer_grads in sorted(tower.backward(acts, g).items()):
            for pname, value in layer_grads.items():
                grads[f"{name}.{idx}.{pname}"] = value
    return res.value, grads


def trainable_parameters(model: DualEncoder) -> dict[str, Matrix]:
    params: dict[str, Matrix] = {}
    for key, ad in model.adapters().items():
        all_params = ad.parameters()
        for pname in ad.trainable():
            params[f"{key}.{pname}"] = all_params[pname]
    return params


def apply_parameters(model: DualEncoder, params: dict[str, Matrix]) -> None:
    grouped: dict[str, dict[str, Matrix]] = {}
    for full, value in params.items():
        key, pname = full.rsplit(".", 1)
        grouped.setdefault(key, {})[pname] = value
    adapters = model.adapters()
    for key, values in grouped.items():
        adapters[key].set_parameters(values)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 500
    lr: float = 2e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    temperature: float = DEFAULT_TEMPERATURE
    loss: LossKind = LossKind.AS_WRITTEN
    precision: str = "f64"

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError(f"steps must be at least 1, got {self.steps}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        object.__setattr__(self, "loss", LossKind.parse(self.loss))
        la.dtype_for(self.precision)


@dataclass
class EpisodeResult:
    initial_loss: float
    final_loss: float
    zero_shot_accuracy: float
    query_accuracy: float
    trace: list[tuple[int, float, float]]
    model: DualEncoder = field(repr=False)
    wall_ms: float = 0.0


def run_episode(task: SyntheticTask, episode: Episode, config: AdapterConfig,
                train: TrainConfig = TrainConfig(), seed=0) -> EpisodeResult:
    """Fine-tune adapters on the support set, then score the queries.

    Only adapter parameters move; the frozen towers are shared with
    :meth:`SyntheticTask.base_model`.  ``seed`` fixes adapter initialisation.
    """
    start = time.perf_counter()
    dtype = la.dtype_for(train.precision)
    model = task.base_model(dtype)
    model.attach_adapters(config, seed, dtype)
    prompts = task.prompts(dtype)
    support = episode if episode.support.dtype == dtype else Episode(
        episode.n_way, episode.k_shot, episode.support.astype(dtype), episode.support_labels,
        episode.query.astype(dtype), episode.query_labels)

    zero_shot, _ = evaluate(model, prompts, support.query, support.query_labels,
                            train.temperature)
    schedule = Schedule(train.lr, train.steps)
    state = OptimizerState(train.betas[0], train.betas[1], train.eps, train.weight_decay)
    params = trainable_parameters(model)
    trace: list[tuple[int, float, float]] = []
    initial = None
    for step in range(train.steps):
        lr = cosine_lr(step, schedule)
        value, grads = loss_and_grads(model, prompts, support, train.temperature, train.loss)
        if initial is None:
            initial = value
        trace.append((step, lr, value))
        params = adamw_step(params, grads, state, lr)
        apply_parameters(model, params)

    final = support_loss(model, prompts, support, train.temperature, train.loss)
    accuracy, _ = evaluate(model, prompts, support.query, support.query_labels,
                           train.temperature)
    wall_ms = (time.perf_counter() - start) * 1e3
    return EpisodeResult(initial, final, zero_shot, accuracy, trace, model, wall_ms)
