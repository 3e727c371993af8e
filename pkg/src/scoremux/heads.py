"""Per-task classification head: logits = h @ W^T + b, probabilities by softmax."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .numerics import Matrix, P32, Precision, Rng, add_row, matmul, softmax, transpose

MIN_CLASSES = 2
MAX_CLASSES = 6
INIT_STD = 0.02


@dataclass
class ClassificationHead:
    task_id: str
    num_classes: int
    weight: Matrix  # num_classes x d_model
    bias: Matrix    # 1 x num_classes

    def __post_init__(self):
        if not (MIN_CLASSES <= self.num_classes <= MAX_CLASSES):
            raise ContractError(
                f"num_classes must be in [{MIN_CLASSES}, {MAX_CLASSES}], got {self.num_classes}"
            )
        if self.weight.rows != self.num_classes or self.bias.shape != (1, self.num_classes):
            raise ShapeError(
                f"head shapes {self.weight.shape}/{self.bias.shape} disagree with C={self.num_classes}"
            )

    @property
    def d_model(self) -> int:
        return self.weight.cols

    def param_count(self) -> int:
        return self.num_classes * self.d_model + self.num_classes

    def param_bytes(self) -> int:
        return self.weight.rows * self.weight.cols * self.weight.precision.itemsize + (
            self.bias.cols * self.bias.precision.itemsize
        )


def new_head(
    task_id: str,
    num_classes: int,
    d_model: int,
    rng: Rng | None = None,
    precision: Precision = P32,
) -> ClassificationHead:
    """Weight ~ N(0, 0.02), bias zero."""
    stream = (rng if rng is not None else Rng(0)).split(f"head/{task_id}")
    return ClassificationHead(
        task_id=task_id,
        num_classes=num_classes,
        weight=stream.normal_matrix(num_classes, d_model, std=INIT_STD, precision=precision),
        bias=Matrix.zeros(1, num_classes, precision),
    )


def head_forward(head: ClassificationHead, h: Matrix) -> Matrix:
    """Affine logits for a batch of hiddens (rows); differentiable."""
    if h.cols != head.d_model:
        raise ShapeError(f"hidden width {h.cols} != head d_model {head.d_model}")
    return add_row(matmul(h, transpose(head.weight)), head.bias)


def predict(head: ClassificationHead, h: Matrix) -> tuple[int, np.ndarray]:
    """(argmax label, probabilities) for a single hidden vector.

    Ties break to the lowest class index.
    """
    if h.rows != 1:
        raise ShapeError(f"predict expects a single 1 x d hidden, got {h.shape}")
    z = head_forward(head, h)
    probs = softmax(z.data[0].astype(np.float64))
    return int(np.argmax(probs)), probs
