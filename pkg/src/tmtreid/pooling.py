"""Self-attention pooling of a video feature cube into spatial and temporal tokens.

A cube holds ``T`` frames of ``HW`` spatial locations with ``C`` channels.
Temporal pooling collapses the frame axis (one token per location), spatial
pooling collapses the location axis (one token per frame).  Both derive their
attention weights from the cube itself: project, form the Gram matrix,
row-sum, softmax, and take the attention-weighted sum.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError, Tensor, as_tensor, matmul, parameter, softmax, swap_last, tsum


@dataclass
class FeatureCube:
    """``T x HW x C`` feature volume; ``height * width == HW``.

    ``values`` may carry leading batch axes, i.e. ``(..., T, HW, C)``.
    """

    values: Tensor
    height: int
    width: int

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.values.ndim < 3:
            raise DimensionError(f"feature cube needs (T, HW, C) axes, got {self.values.shape}")
        if self.height * self.width != self.values.shape[-2]:
            raise DimensionError(
                f"cube has {self.values.shape[-2]} locations, expected {self.height}x{self.width}"
            )

    @classmethod
    def from_array(cls, array, requires_grad: bool = False) -> "FeatureCube":
        """Build from a ``(..., T, H, W, C)`` array."""
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim < 4:
            raise DimensionError(f"expected (..., T, H, W, C), got {arr.shape}")
        *lead, t, h, w, c = arr.shape
        values = Tensor(arr.reshape(*lead, t, h * w, c), requires_grad=requires_grad)
        return cls(values, h, w)

    @property
    def frames(self) -> int:
        return self.values.shape[-3]

    @property
    def locations(self) -> int:
        return self.values.shape[-2]

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    @property
    def geometry(self) -> tuple[int, int, int, int]:
        return self.frames, self.height, self.width, self.channels


@dataclass
class PoolingParams:
    projection_weight: Tensor

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "PoolingParams":
        bound = 1.0 / math.sqrt(channels)
        return cls(parameter(rng.uniform(-bound, bound, size=(channels, channels))))

    def named_parameters(self, prefix: str):
        yield f"{prefix}.projection_weight", self.projection_weight


@dataclass
class PoolingIntermediates:
    projected: Tensor
    attention_matrix: Tensor
    attention_vector: Tensor
    attentive_feature: Tensor


@dataclass
class ViewFeatureSet:
    """Token matrices of the three views, each ``(..., L_view, C)``."""

    spatial: Tensor
    temporal: Tensor
    spatiotemporal: Tensor

    def __post_init__(self):
        channels = {self.spatial.shape[-1], self.temporal.shape[-1], self.spatiotemporal.shape[-1]}
        if len(channels) != 1:
            raise DimensionError(
                "views disagree on channel extent: "
                f"{self.spatial.shape}, {self.temporal.shape}, {self.spatiotemporal.shape}"
            )

    def as_tuple(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.spatial, self.temporal, self.spatiotemporal


VIEW_NAMES = ("spatial", "temporal", "spatiotemporal")


def _check_params(cube: FeatureCube, params: PoolingParams) -> None:
    c = cube.channels
    if params.projection_weight.shape != (c, c):
        raise DimensionError(
            f"pooling projection {params.projection_weight.shape} does not match {c} channels"
        )


def _attend(groups: Tensor, params: PoolingParams, literal_eq5: bool):
    # groups: (..., G, N, C); attention runs over N within each of the G groups
    projected = matmul(groups, params.projection_weight)
    gram = matmul(projected, swap_last(projected))
    scores = tsum(gram, axis=-1)
    weights = softmax(scores, axis=-1)
    attentive = groups * weights.reshape(weights.shape + (1,))
    summand = groups if literal_eq5 else attentive
    pooled = tsum(summand, axis=-2)
    return pooled, PoolingIntermediates(projected, gram, weights, attentive)


def temporal_sa_pool(cube: FeatureCube, params: PoolingParams, literal_eq5: bool = False):
    """Collapse the frame axis: one ``C`` token per spatial location.

    Returns ``(tokens (..., HW, C), intermediates)`` where the attention
    matrices are ``T x T`` per location.  ``literal_eq5`` sums the raw frames
    instead of the attention-weighted ones, which leaves the weights unused.
    """
    _check_params(cube, params)
    x = cube.values
    axes = tuple(range(x.ndim - 3)) + (x.ndim - 2, x.ndim - 3, x.ndim - 1)
    per_location = x.transpose(*axes)
    return _attend(per_location, params, literal_eq5)


def spatial_sa_pool(cube: FeatureCube, params: PoolingParams, literal_eq5: bool = False):
    """Collapse the location axis: one ``C`` token per frame (``HW x HW`` attention)."""
    _check_params(cube, params)
    return _attend(cube.values, params, literal_eq5)


def make_view_features(
    cube_s: FeatureCube,
    cube_t: FeatureCube,
    cube_st: FeatureCube,
    params_s: PoolingParams,
    params_t: PoolingParams,
    literal_eq5: bool = False,
) -> ViewFeatureSet:
    shapes = {cube_s.values.shape, cube_t.values.shape, cube_st.values.shape}
    if len(shapes) != 1:
        raise DimensionError(f"branch cubes disagree in shape: {sorted(shapes)}")
    spatial, _ = temporal_sa_pool(cube_s, params_s, literal_eq5)
    temporal, _ = spatial_sa_pool(cube_t, params_t, literal_eq5)
    st = cube_st.values
    lead = st.shape[:-3]
    spatiotemporal = st.reshape(*lead, cube_st.frames * cube_st.locations, cube_st.channels)
    return ViewFeatureSet(spatial, temporal, spatiotemporal)
