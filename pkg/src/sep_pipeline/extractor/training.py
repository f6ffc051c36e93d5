"""Per-image-type training of the SEP classifier and feature extraction."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..dataset import MEASURES, BinaryLabels, ImageType
from ..errors import ValidationError
from ..imagery import AugmentPolicy, augment, resize, to_unit
from ..rng import substream
from .network import (
    NetworkParams,
    NetworkSpec,
    backward,
    bce_multilabel_loss,
    binary_accuracy,
    build_network,
    forward,
    sgd_momentum_step,
)

log = logging.getLogger(__name__)

OFFTHESHELF_WIDTH = 512


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 0.01
    momentum: float = 0.9
    policy: AugmentPolicy = AugmentPolicy()
    schedule: str = "cosine"

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch."""
        if self.schedule == "constant":
            return self.lr
        if self.schedule == "cosine":
            # annealed towards lr/20 by the final epoch
            frac = (epoch - 1) / max(1, self.epochs - 1)
            return self.lr * (0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * frac)))
        raise ValidationError(f"unknown learning-rate schedule {self.schedule!r}")


@dataclass(frozen=True)
class FeatureVector:
    household_id: str
    image_type: ImageType
    values: np.ndarray | None
    missing: bool = False

    def __post_init__(self):
        if self.missing and self.values is not None:
            raise ValidationError("a missing feature vector carries no values")
        if not self.missing and self.values is None:
            raise ValidationError("a present feature vector needs values")


def prepare_image(image: np.ndarray, spec: NetworkSpec, dtype=np.float32) -> np.ndarray:
    """Resize to the network input and scale to [0, 1]."""
    h, w, _ = spec.input_shape
    img = np.asarray(image)
    if img.shape[:2] != (h, w):
        img = resize(img, h, w)
    return to_unit(img, dtype)


def _stack(images: Mapping[str, np.ndarray], ids: Sequence[str], spec: NetworkSpec, dtype) -> np.ndarray:
    return np.stack([prepare_image(images[i], spec, dtype) for i in ids]) if ids else \
        np.zeros((0,) + tuple(spec.input_shape), dtype=dtype)


def predict_proba(params: NetworkParams, x: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    probs, feats = [], []
    for start in range(0, len(x), batch_size):
        p, f = forward(params, x[start:start + batch_size])
        probs.append(p)
        feats.append(f)
    if not probs:
        return np.zeros((0, params.spec.n_outputs)), np.zeros((0, params.spec.feature_dim))
    return np.concatenate(probs), np.concatenate(feats)


def train_extractor(
    images: Mapping[str, np.ndarray],
    labels: BinaryLabels,
    train_ids: Sequence[str],
    test_ids: Sequence[str],
    spec: NetworkSpec,
    config: TrainConfig = TrainConfig(),
    seed: int = 0,
    dtype=np.float32,
):
    """Train one network on the images of a single type.

    Households without an image of this type are skipped. Returns the trained
    parameters and a per-epoch log with one ``train`` and one ``test`` row.
    """
    train_ids = [h for h in train_ids if h in images]
    test_ids = [h for h in test_ids if h in images]
    if len(train_ids) < 2 * config.batch_size:
        raise ValidationError(
            f"only {len(train_ids)} usable training images; need at least {2 * config.batch_size}"
        )
    x_train = _stack(images, train_ids, spec, dtype)
    y_train = labels.matrix(train_ids).astype(dtype)
    x_test = _stack(images, test_ids, spec, dtype)
    y_test = labels.matrix(test_ids)
    params = build_network(spec, dtype)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = substream(seed, "epoch_order", epoch).permutation(len(train_ids))
        aug_rng = substream(seed, "augment", epoch)
        lr = config.lr_at(epoch)
        losses, weights, train_probs, train_y = [], [], [], []
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = np.stack([augment(x_train[i], aug_rng, config.policy) for i in idx])
            loss, grads, probs = backward(params, xb, y_train[idx])
            params = sgd_momentum_step(params, grads, lr, config.momentum)
            losses.append(loss)
            weights.append(len(idx))
            train_probs.append(probs)
            train_y.append(y_train[idx])
        train_loss = float(np.average(losses, weights=weights))
        train_acc = binary_accuracy(np.concatenate(train_probs), np.concatenate(train_y))
        history.append({"epoch": epoch, "loss": train_loss,
                        **{f"acc_{m}": float(a) for m, a in zip(MEASURES, train_acc)}, "split": "train"})
        if len(test_ids):
            p_test, _ = predict_proba(params, x_test)
            test_acc = binary_accuracy(p_test, y_test)
            history.append({"epoch": epoch, "loss": bce_multilabel_loss(p_test, y_test),
                            **{f"acc_{m}": float(a) for m, a in zip(MEASURES, test_acc)}, "split": "test"})
        log.debug("epoch %d loss %.4f", epoch, train_loss)
    return params, history


def extract_features(params: NetworkParams, image: np.ndarray | None, household_id: str = "",
                     image_type: ImageType = ImageType.LIGHT_SOURCE) -> FeatureVector:
    """Penultimate activations for one image (no augmentation)."""
    if image is None:
        return FeatureVector(household_id, image_type, None, missing=True)
    _, feats = forward(params, prepare_image(image, params.spec, params.dtype)[None])
    return FeatureVector(household_id, image_type, feats[0].astype(np.float64))


def extract_feature_matrix(params: NetworkParams, images: Mapping[str, np.ndarray], ids: Sequence[str]) -> np.ndarray:
    """Rows of penultimate features for ``ids``; rows with no image are NaN."""
    D = params.spec.feature_dim
    out = np.full((len(ids), D), np.nan)
    present = [k for k, h in enumerate(ids) if h in images]
    if present:
        x = _stack(images, [ids[k] for k in present], params.spec, params.dtype)
        _, feats = predict_proba(params, x)
        out[present] = feats
    return out


def offtheshelf_network(input_shape=(64, 64, 3), conv_filters=(8, 16, 32), width: int = OFFTHESHELF_WIDTH,
                        seed: int = 0, dtype=np.float32) -> NetworkParams:
    """A frozen, randomly initialised backbone with a wide penultimate layer.

    Stands in for an ImageNet network used without fine-tuning; it is never
    passed to the optimiser.
    """
    spec = NetworkSpec(tuple(input_shape), tuple(conv_filters), (width,), 3, seed)
    return build_network(spec, dtype)


def offtheshelf_features(frozen: NetworkParams, image: np.ndarray | None, household_id: str = "",
                         image_type: ImageType = ImageType.LIGHT_SOURCE) -> FeatureVector:
    return extract_features(frozen, image, household_id, image_type)


def write_training_log(path, history: Sequence[dict]) -> None:
    fields = ["epoch", "loss"] + [f"acc_{m}" for m in MEASURES] + ["split"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
