"""Temperature-scaled cosine-similarity losses with analytic gradients.

All three losses share one kernel: rows of ``V`` and ``T`` are L2-normalised,
``logits = Vn Tn^T / temperature`` and the loss is the batch-mean softmax
cross-entropy against a target column per row.  Gradients are returned
with respect to the *unnormalised* embeddings.

``contrastive``  image-text batch loss, target of row i is column i.
``as_written``   few-shot loss whose denominator runs over the text
                 embeddings of all N*K support samples (each sample's
                 text is its class prompt).
``classwise``    N-way cross-entropy over the N class-prompt embeddings.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateEmbeddingError, LabelError, ShapeError
from .linalg import Matrix

DEFAULT_TEMPERATURE = 0.07


class LossKind(str, enum.Enum):
    CONTRASTIVE = "contrastive"
    AS_WRITTEN = "as_written"
    CLASSWISE = "classwise"

    @classmethod
    def parse(cls, value: "str | LossKind") -> "LossKind":
        if isinstance(value, cls):
            return value
        key = str(value).replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown loss variant {value!r}") from None


@dataclass
class LossResult:
    value: float
    grad_V: Matrix
    grad_T: Matrix


def normalize_rows(M: Matrix) -> tuple[Matrix, Matrix]:
    norms = np.sqrt(np.sum(M * M, axis=1, keepdims=True))
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms[:, 0] == 0)[0])
        raise DegenerateEmbeddingError(f"row {bad} has zero norm")
    return M / norms, norms


def _normalize_backward(grad_n: Matrix, normed: Matrix, norms: Matrix) -> Matrix:
    radial = np.sum(grad_n * normed, axis=1, keepdims=True)
    return (grad_n - normed * radial) / norms


def log_softmax(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cosine_xent(V: Matrix, T: Matrix, targets: np.ndarray, temperature: float) -> LossResult:
    """Mean cross-entropy of ``softmax(cos(V_i, T_j) / temperature)`` at ``targets[i]``."""
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if V.ndim != 2 or T.ndim != 2 or V.shape[1] != T.shape[1]:
        raise ShapeError(f"embedding widths differ: V {V.shape}, T {T.shape}")
    Vn, v_norm = normalize_rows(V)
    Tn, t_norm = normalize_rows(T)
    logits = (Vn @ Tn.T) / temperature
    logp = log_softmax(logits)
    rows = np.arange(V.shape[0])
    m = V.shape[0]
    value = float(-logp[rows, targets].sum() / m)

    grad_logits = np.exp(logp)
    grad_logits[rows, targets] -= 1
    grad_logits /= m * temperature
    grad_Vn = grad_logits @ Tn
    grad_Tn = grad_logits.T @ Vn
    return LossResult(value,
                      _normalize_backward(grad_Vn, Vn, v_norm),
                      _normalize_backward(grad_Tn, Tn, t_norm))


def loss_contrastive(V: Matrix, T: Matrix, temperature: float = DEFAULT_TEMPERATURE) -> LossResult:
    if V.shape != T.shape:
        raise ShapeError(f"image and text batches must be row-paired: {V.shape} vs {T.shape}")
    if V.shape[0] < 2:
        raise ShapeError("contrastive loss needs a batch of at least 2 pairs")
    return cosine_xent(V, T, np.arange(V.shape[0]), temperature)


def loss_fsl(V: Matrix, class_T: Matrix, labels, temperature: float = DEFAULT_TEMPERATURE,
             variant: LossKind | str = LossKind.AS_WRITTEN) -> LossResult:
    """Few-shot loss over support embeddings ``V`` and class-prompt embeddings.

    ``class_T`` has one row per class.  ``grad_T`` is returned per class row;
    under ``as_written`` the per-sample text gradients are scattered back
    onto their class rows in sample order.
    """
    variant = LossKind.parse(variant)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = class_T.shape[0]
    if labels.shape != (V.shape[0],):
        raise ShapeError(f"need one label per support row, got {labels.shape} for {V.shape[0]} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelError(f"labels must lie in [0, {n_classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    if variant is LossKind.CLASSWISE:
        return cosine_xent(V, class_T, labels, temperature)
    if variant is LossKind.AS_WRITTEN:
        res = cosine_xent(V, class_T[labels], np.arange(V.shape[0]), temperature)
        grad_T = np.zeros_like(class_T)
        np.add.at(grad_T, labels, res.grad_T)
        return LossResult(res.value, res.grad_V, grad_T)
    raise ConfigError("loss_fsl takes the as_written or classwise variant")
