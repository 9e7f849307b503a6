"""Linear probe: token-level object-type classification on frozen features.

Stands in for full downstream fine-tuning. Token features come from a
frozen encoder; the probe trains one linear layer with softmax
cross-entropy on train-scene tokens and reports held-out accuracy.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from . import tensor as T
from .errors import BadSplitError, InvalidInputError
from .scene import SceneBundle
from .tokenizer import TokenSet, point_regions, sam_tokenize
from .train import TrainConfig, _forward_tokens, adamw_step, init_opt_state, lr_at, majority_regions

ENCODER_SCRATCH = "scratch"
ENCODER_STAGE1 = "stage1"
ENCODER_STAGE2 = "stage2"


@dataclass
class ProbeResult:
    accuracy: float
    per_class: list[float]  # accuracy per type id; NaN where the class is absent
    n_tokens: int
    encoder_tag: str

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "per_class": [None if np.isnan(a) else a for a in self.per_class],
            "n_tokens": self.n_tokens,
            "encoder_tag": self.encoder_tag,
        }


def token_type_labels(bundle: SceneBundle, tokens: TokenSet) -> np.ndarray:
    """Object type of each token's majority region (unanimous for mask-guided tokens)."""
    regions = majority_regions(tokens, point_regions(bundle))
    return bundle.region_types[regions].astype(np.int64)


def extract_features(
    bundles: list[SceneBundle], params: nn.ModelParams, min_points: int = 8
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen encoder features and type labels for every token across scenes."""
    feats, labels = [], []
    with T.no_grad():
        for bundle in bundles:
            tokens = sam_tokenize(bundle, min_points=min_points)
            feats.append(_forward_tokens(bundle, tokens, params).data)
            labels.append(token_type_labels(bundle, tokens))
    return np.concatenate(feats), np.concatenate(labels)


def fit_linear_probe(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    n_classes: int,
    epochs: int,
    seed: int,
    lr: float = 0.05,
) -> tuple[float, list[float]]:
    """Train a single linear classifier full-batch and score the held-out tokens."""
    if epochs < 1:
        raise InvalidInputError("probe epochs must be >= 1")
    missing = sorted(set(np.unique(test_y)) - set(np.unique(train_y)))
    if missing:
        raise BadSplitError(f"classes {missing} absent from the probe training split")

    mean = train_x.mean(axis=0)
    std = np.maximum(train_x.std(axis=0), 1e-6)
    xt = (train_x - mean) / std
    xe = (test_x - mean) / std

    rng = np.random.default_rng(np.random.SeedSequence([0x9B0E, seed]))
    w = T.parameter(rng.normal(0.0, 0.01, (xt.shape[1], n_classes)))
    b = T.parameter(np.zeros(n_classes))
    params = nn.ModelParams(
        arch=nn.Arch(),
        tensors={"probe.w": w, "probe.b": b},
        frozen={"probe.w": False, "probe.b": False},
    )
    cfg = TrainConfig(base_lr=lr, weight_decay=0.0, epochs=epochs, warmup_epochs=0, seed=seed)
    state = init_opt_state(params)
    x_const = T.constant(xt)
    for epoch in range(epochs):
        params.zero_grad()
        loss = T.cross_entropy(T.add(T.matmul(x_const, w), b), train_y)
        loss.backward()
        adamw_step(params, state, lr_at(epoch, epochs, cfg), 0.0)

    logits = xe @ w.data + b.data
    pred = logits.argmax(axis=1)
    correct = pred == test_y
    accuracy = float(correct.mean())
    per_class = [
        float(correct[test_y == c].mean()) if np.any(test_y == c) else float("nan")
        for c in range(n_classes)
    ]
    return accuracy, per_class


def linear_probe(
    encoder: nn.ModelParams | str | Path,
    train_bundles: list[SceneBundle],
    test_bundles: list[SceneBundle],
    epochs: int = 300,
    seed: int = 0,
    encoder_tag: str = ENCODER_STAGE1,
    min_points: int = 8,
) -> ProbeResult:
    """Probe a frozen encoder (a ModelParams or a checkpoint path)."""
    if not isinstance(encoder, nn.ModelParams):
        encoder = nn.load_checkpoint(encoder).params
    encoder.freeze_all()

    train_x, train_y = extract_features(train_bundles, encoder, min_points)
    test_x, test_y = extract_features(test_bundles, encoder, min_points)
    n_classes = int(max(train_y.max(), test_y.max())) + 1
    accuracy, per_class = fit_linear_probe(
        train_x, train_y, test_x, test_y, n_classes, epochs, seed
    )
    return ProbeResult(
        accuracy=accuracy,
        per_class=per_class,
        n_tokens=len(test_y),
        encoder_tag=encoder_tag,
    )
