"""Cross-modal alignment losses with analytic gradients, scene pooling and prompts.

The contrastive losses L2-normalize their inputs and return gradients with
respect to the raw (pre-normalization) vectors, so callers can feed
unnormalized network outputs directly. Image and text features act as
frozen teachers and never receive gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    BadTemperatureError,
    DimensionMismatch,
    EmptyNameError,
    EmptySceneError,
    LengthMismatch,
    NoPositivesError,
    ZeroVectorError,
)

DEFAULT_TAU1 = 1.0
DEFAULT_TAU2 = 1.0
DEFAULT_FEATURE_DIM = 512
DEFAULT_PISE_HIDDEN = 1024


@dataclass(frozen=True, eq=False)
class LabeledFeature:
    vec: np.ndarray
    class_id: int
    modality: str = "point"

    def __post_init__(self):
        if self.modality not in ("point", "image", "text"):
            raise ValueError(f"unknown modality {self.modality!r}")


@dataclass(frozen=True, eq=False)
class SceneFeature:
    vec: np.ndarray
    scene_id: str = ""


@dataclass(frozen=True)
class LossWeights:
    """Loss coefficients; every coefficient equals ``warmup_value`` before ``warmup_steps``."""

    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    warmup_steps: int = 400
    warmup_value: float = 0.02

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3, self.warmup_value) < 0 or self.warmup_steps < 0:
            raise ValueError("loss weights and warm-up settings must be nonnegative")

    def at(self, step: int) -> tuple[float, float, float]:
        if step < self.warmup_steps:
            return (self.warmup_value,) * 3
        return (self.lambda1, self.lambda2, self.lambda3)


class ClassLoss(NamedTuple):
    loss: float
    grads: np.ndarray  # [S, d]; rows of non-trainable features are zero
    dropped: int  # anchors without a same-class partner


class SceneLoss(NamedTuple):
    loss: float
    grads: np.ndarray  # [L, d], w.r.t. the raw 3D scene features


def _as_vec(v) -> np.ndarray:
    if isinstance(v, (LabeledFeature, SceneFeature)):
        v = v.vec
    return np.asarray(v, dtype=np.float64)


def l2_normalize(v) -> np.ndarray:
    v = _as_vec(v)
    n = np.linalg.norm(v)
    if not n > 0:
        raise ZeroVectorError("cannot normalize a zero vector")
    return v / n


def _normalize_rows(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ZeroVectorError("cannot normalize a zero vector")
    return X / norms[:, None], norms


def _normalize_backward(Xn: np.ndarray, norms: np.ndarray, grad_n: np.ndarray) -> np.ndarray:
    # d(x/|x|)/dx = (I - x_hat x_hat^T) / |x|
    radial = np.sum(grad_n * Xn, axis=1, keepdims=True)
    return (grad_n - radial * Xn) / norms[:, None]


def _logsumexp_rows(A: np.ndarray) -> np.ndarray:
    m = A.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(A - m).sum(axis=1, keepdims=True)))[:, 0]


def loss_instance(f3d, f2d) -> tuple[float, np.ndarray]:
    """Mean absolute difference between a 3D object feature and its paired image feature.

    The image feature is a constant teacher; the gradient is w.r.t. ``f3d``
    only, with sign(0) taken as 0.
    """
    a, b = _as_vec(f3d), _as_vec(f2d)
    if a.shape != b.shape:
        raise DimensionMismatch(f"feature shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    d = diff.size
    return float(np.abs(diff).mean()), np.sign(diff) / d


def loss_class(feats: Sequence[LabeledFeature], tau1: float = DEFAULT_TAU1,
               trainable_mask: Sequence[bool] | None = None) -> ClassLoss:
    """Class-level contrastive loss over a mixed-modality batch.

    For anchor i, positives are the other features of the same class; the
    denominator sums over all j including j = i. Anchors with no positive are
    left out of the average and reported in ``dropped``.

    Args:
      feats: the S features of the batch, any modality.
      tau1: temperature, > 0.
      trainable_mask: per-feature flag; defaults to "modality is point".

    Returns:
      ClassLoss(loss, grads, dropped).

    Raises:
      BadTemperatureError: tau1 <= 0.
      NoPositivesError: no anchor has a same-class partner.
    """
    if not tau1 > 0:
        raise BadTemperatureError(f"temperature must be > 0, got {tau1}")
    feats = list(feats)
    S = len(feats)
    if trainable_mask is None:
        trainable_mask = [f.modality == "point" for f in feats]
    if len(trainable_mask) != S:
        raise LengthMismatch("trainable_mask length must equal the number of features")
    if S == 0:
        raise NoPositivesError("empty feature batch")
    X = np.stack([_as_vec(f) for f in feats])
    labels = np.array([f.class_id for f in feats])
    G, norms = _normalize_rows(X)

    A = G @ G.T / tau1
    pos = labels[:, None] == labels[None, :]
    np.fill_diagonal(pos, False)
    anchors = pos.any(axis=1)
    n_anchor = int(anchors.sum())
    if n_anchor == 0:
        raise NoPositivesError("no feature has a same-class partner")

    lse_all = _logsumexp_rows(A)
    A_pos = np.where(pos, A, -np.inf)
    lse_pos = _logsumexp_rows(np.where(anchors[:, None], A_pos, 0.0))
    per_anchor = lse_all - lse_pos
    loss = float(per_anchor[anchors].sum() / n_anchor)

    # dL/dA_ij = (softmax_j(A_i) - positive-softmax_j(A_i)) / S' for included anchors
    P_all = np.exp(A - lse_all[:, None])
    P_pos = np.where(pos, np.exp(A_pos - lse_pos[:, None]), 0.0)
    M = np.where(anchors[:, None], P_all - P_pos, 0.0) / n_anchor
    grad_G = (M + M.T) @ G / tau1
    grads = _normalize_backward(G, norms, grad_G)
    grads[~np.asarray(trainable_mask, dtype=bool)] = 0.0
    return ClassLoss(loss, grads, S - n_anchor)


def loss_scene(z3d: Sequence, ztext: Sequence, tau2: float = DEFAULT_TAU2) -> SceneLoss:
    """Batch-wise scene-to-caption contrastive loss; scene i's positive is caption i.

    Gradients are w.r.t. the raw 3D scene features; text features are frozen.
    """
    if not tau2 > 0:
        raise BadTemperatureError(f"temperature must be > 0, got {tau2}")
    if len(z3d) != len(ztext):
        raise LengthMismatch(f"{len(z3d)} 3D scene features vs {len(ztext)} text features")
    if len(z3d) == 0:
        raise LengthMismatch("scene batch must not be empty")
    Z, norms = _normalize_rows(np.stack([_as_vec(z) for z in z3d]))
    T, _ = _normalize_rows(np.stack([_as_vec(z) for z in ztext]))
    if Z.shape[1] != T.shape[1]:
        raise DimensionMismatch("3D and text scene features differ in dimension")
    L = Z.shape[0]
    A = Z @ T.T / tau2
    lse = _logsumexp_rows(A)
    loss = float(np.mean(lse - np.diag(A)))
    dA = (np.exp(A - lse[:, None]) - np.eye(L)) / L
    grads = _normalize_backward(Z, norms, dA @ T / tau2)
    return SceneLoss(loss, grads)


def loss_total(l_box: float, l_ins: float, l_cls: float, l_scene: float,
               w: LossWeights = LossWeights(), step: int = 0) -> float:
    """Box loss plus the three alignment terms weighted by the step's schedule."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    l1, l2, l3 = w.at(step)
    return l_box + l1 * l_ins + l2 * l_cls + l3 * l_scene


# ---------------------------------------------------------------------------
# Permutation-invariant scene feature
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PiseWeights:
    W1: np.ndarray  # [d_in, h]
    b1: np.ndarray  # [h]
    W2: np.ndarray  # [h, d_out]
    b2: np.ndarray  # [d_out]

    def __post_init__(self):
        d_in, h = self.W1.shape
        if self.b1.shape != (h,) or self.W2.shape[0] != h or self.b2.shape != (self.W2.shape[1],):
            raise ValueError("inconsistent PISE weight shapes")
        for a in (self.W1, self.b1, self.W2, self.b2):
            if not np.all(np.isfinite(a)):
                raise ValueError("PISE weights must be finite")

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def d_out(self) -> int:
        return self.W2.shape[1]


def pise_init(d_in: int = DEFAULT_FEATURE_DIM, h: int = DEFAULT_PISE_HIDDEN,
              d_out: int = DEFAULT_FEATURE_DIM, seed: int = 0) -> PiseWeights:
    if min(d_in, h, d_out) <= 0:
        raise ValueError("PISE dimensions must be positive")
    rng = np.random.default_rng(seed)
    k1, k2 = 1.0 / np.sqrt(d_in), 1.0 / np.sqrt(h)
    return PiseWeights(
        W1=rng.uniform(-k1, k1, size=(d_in, h)),
        b1=rng.uniform(-k1, k1, size=h),
        W2=rng.uniform(-k2, k2, size=(h, d_out)),
        b2=rng.uniform(-k2, k2, size=d_out),
    )


def pise_object_map(v, w: PiseWeights) -> np.ndarray:
    """The shared per-object map: Linear -> ReLU -> Linear."""
    v = _as_vec(v)
    if v.shape != (w.d_in,):
        raise DimensionMismatch(f"object feature has shape {v.shape}, expected ({w.d_in},)")
    return np.maximum(v @ w.W1 + w.b1, 0.0) @ w.W2 + w.b2


def pise_forward(object_feats: Sequence, w: PiseWeights, scene_id: str = "") -> SceneFeature:
    """Scene feature = elementwise max over the per-object maps.

    Objects are mapped one at a time so each result is independent of its
    position in the list; with max being exact this makes the output
    bit-identical under any permutation.
    """
    if len(object_feats) == 0:
        raise EmptySceneError("scene has no object features")
    mapped = np.stack([pise_object_map(v, w) for v in object_feats])
    return SceneFeature(mapped.max(axis=0), scene_id)


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------


def class_prompt(name: str) -> str:
    if not name:
        raise EmptyNameError("class name must be nonempty")
    return f"A photo of {name}."


def scene_prompt(names: Sequence[str]) -> str:
    names = list(names)
    if not names or any(not n for n in names):
        raise EmptyNameError("scene prompt needs at least one nonempty class name")
    return f"A room with {', '.join(names)}."


def nothing_prompt() -> str:
    return "A photo of nothing."
