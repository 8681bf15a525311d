"""Dual-level feature weighting: per-layer channel gates plus softmax
aggregation across layers.

Intra-feature weighting (IFW) treats the H*W spatial positions of one
feature map as samples of C channel features, generates per-channel
gates from the channel correlation structure, and rescales the map.
Cross-feature weighting (CFW) pools every layer's map to a channel
profile, treats the C channels as samples of N layer features, and
aggregates the gated maps with softmax layer weights.

All entry points accept (C, H, W) features or (B, C, H, W) batches.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .cacw import WEIGHT_GENERATORS, CacwModule
from .errors import ConfigurationError, DegenerateSampleError, DimensionError
from .tensor import Tensor, softmax, spatial_mean, stack


@dataclass
class AdwmConfig:
    n_layers: int
    channels: int
    ifw_d_fraction: float = 0.8
    cfw_d_fraction: float = 0.8
    share_ifw: bool = False
    generator: str = "cacw"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigurationError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.channels < 1:
            raise ConfigurationError(f"channels must be >= 1, got {self.channels}")
        for name, frac in (("ifw_d_fraction", self.ifw_d_fraction),
                           ("cfw_d_fraction", self.cfw_d_fraction)):
            if not 0.0 < frac <= 2.0:
                raise ConfigurationError(f"{name} must be in (0, 2], got {frac}")
        if self.generator not in WEIGHT_GENERATORS:
            raise ConfigurationError(
                f"unknown weight generator {self.generator!r}; "
                f"choose from {sorted(WEIGHT_GENERATORS)}"
            )

    @property
    def ifw_d(self):
        return max(1, math.ceil(self.ifw_d_fraction * self.channels))

    @property
    def cfw_d(self):
        return max(1, math.ceil(self.cfw_d_fraction * self.n_layers))


def make_adwm_modules(config, seed=0):
    """Instantiate the weight generators for one ADWM instance.

    Returns {"ifw": [generator, ...], "cfw": generator}. IFW generators
    gate channels through a sigmoid; the CFW generator emits raw scores
    for the downstream softmax. With share_ifw one generator instance is
    reused across all layers.
    """
    cls = WEIGHT_GENERATORS[config.generator]
    n_ifw = 1 if config.share_ifw else config.n_layers
    ifw = [
        cls(config.channels, d=config.ifw_d, output_activation="sigmoid",
            seed=seed * 1000 + i)
        for i in range(n_ifw)
    ]
    if config.share_ifw:
        ifw = ifw * config.n_layers
    cfw = cls(config.n_layers, d=config.cfw_d, output_activation="identity",
              seed=seed * 1000 + 997)
    return {"ifw": ifw, "cfw": cfw}


def adwm_param_count(config):
    modules = make_adwm_modules(config)
    unique = {id(m): m for m in modules["ifw"]}.values()
    return sum(m.param_count() for m in unique) + modules["cfw"].param_count()


def _channel_observations(F):
    """Reshape (.., C, H, W) so spatial positions are rows: (.., H*W, C)."""
    if F.ndim == 3:
        c, h, w = F.shape
        return F.reshape(c, h * w).transpose(1, 0)
    b, c, h, w = F.shape
    return F.reshape(b, c, h * w).transpose(0, 2, 1)


def ifw_apply(generator, F_i):
    """Gate one feature map by its channel weights.

    F_i: (C, H, W) or (B, C, H, W) with H*W >= 2. Returns (gated map,
    alpha) where alpha has shape (C,) or (B, C).
    """
    F_i = F_i if isinstance(F_i, Tensor) else Tensor(F_i)
    if F_i.ndim not in (3, 4):
        raise DimensionError(f"feature map must be (C,H,W) or (B,C,H,W), got {F_i.shape}")
    h, w = F_i.shape[-2], F_i.shape[-1]
    if h * w < 2:
        raise DegenerateSampleError(
            f"channel weighting needs at least 2 spatial positions, got {h}x{w}"
        )
    X = _channel_observations(F_i)
    alpha = generator.forward(X)
    if F_i.ndim == 3:
        gate = alpha.reshape(alpha.shape[-1], 1, 1)
    else:
        gate = alpha.reshape(alpha.shape[0], alpha.shape[-1], 1, 1)
    return F_i * gate, alpha


def _combine(weights, maps):
    """Sum_k weights[k] * maps[k] in fixed layer order.

    Shared by the softmax path and the uniform fallback so that forcing
    uniform weights reproduces plain mean aggregation bit-exactly.
    """
    out = maps[0] * weights[0]
    for k in range(1, len(maps)):
        out = out + maps[k] * weights[k]
    return out


def _split_weights(w, batched):
    """Per-layer broadcastable factors from a (N,) or (B, N) weight tensor.

    Slicing must stay on the tape, so each factor is extracted with a
    one-hot mask and a sum.
    """
    n = w.shape[-1]
    factors = []
    for k in range(n):
        mask = np.zeros(n)
        mask[k] = 1.0
        wk = (w * Tensor(mask)).sum(axis=-1)
        if batched:
            wk = wk.reshape(wk.shape[0], 1, 1, 1)
        factors.append(wk)
    return factors


def cfw_apply(generator, F, F_tilde, matrix_form=False):
    """Aggregate gated maps with softmax layer weights.

    Weights come from the unweighted stack F: each layer is pooled to a
    channel profile, the (C, N) profile matrix is scored per layer, and
    softmax turns the scores into a convex combination of F_tilde.

    Returns (aggregated map, beta) with beta the raw pre-softmax scores,
    shape (N,) or (B, N). `matrix_form` computes the combination as a
    single matrix product instead of the pointwise sum; both routes agree
    to float64 accuracy and the pointwise route is the default.
    """
    if len(F) == 0:
        raise DimensionError("cross-feature weighting needs a nonempty stack")
    if len(F) != len(F_tilde):
        raise DimensionError(
            f"stacks disagree in length: {len(F)} vs {len(F_tilde)}"
        )
    F = [f if isinstance(f, Tensor) else Tensor(f) for f in F]
    F_tilde = [f if isinstance(f, Tensor) else Tensor(f) for f in F_tilde]
    shape = F[0].shape
    for f in list(F) + list(F_tilde):
        if f.shape != shape:
            raise DimensionError(f"stack features disagree in shape: {f.shape} vs {shape}")
    c = shape[-3]
    if c < 2:
        raise DegenerateSampleError(
            f"layer weighting needs at least 2 channels as samples, got C={c}"
        )
    n = len(F)
    batched = F[0].ndim == 4

    profiles = stack([spatial_mean(f) for f in F], axis=-1)  # (C, N) or (B, C, N)
    beta = generator.forward(profiles)                        # (N,) or (B, N)
    w = softmax(beta, axis=-1)

    if matrix_form:
        flat = stack([f.reshape(shape[:-3] + (-1,)) for f in F_tilde], axis=-2)
        # (N, CHW) or (B, N, CHW); weights row times stack
        wrow = w.reshape(w.shape[:-1] + (1, n))
        out = (wrow @ flat).reshape(shape)
        return out, beta

    out = _combine(_split_weights(w, batched), F_tilde)
    return out, beta


def mean_aggregate(features):
    """Uniform aggregation of a stack, same accumulation order as cfw_apply."""
    features = [f if isinstance(f, Tensor) else Tensor(f) for f in features]
    n = len(features)
    if n == 0:
        raise DimensionError("mean aggregation of an empty stack")
    uniform = [1.0 / n] * n
    return _combine(uniform, features)


def adwm_forward(config, modules, features, force_identity=False,
                 return_weights=False):
    """Full dual-level weighting over a recorded feature stack.

    Gates every layer, then softmax-aggregates the gated stack with
    weights generated from the ungated one. `force_identity` skips the
    gates and uses uniform layer weights, recovering mean aggregation
    exactly (the host network's behavior is recoverable).
    """
    if len(features) == 0:
        raise DimensionError("adwm_forward needs a nonempty feature stack")
    if len(features) != config.n_layers:
        raise DimensionError(
            f"stack has {len(features)} layers, config says {config.n_layers}"
        )
    if force_identity:
        # identity gates and a zero score vector through the real gating
        # and softmax machinery: multiplying by 1.0 and softmax of zeros
        # are exact, so this reduces to mean aggregation bit for bit
        features = [f if isinstance(f, Tensor) else Tensor(f) for f in features]
        batched = features[0].ndim == 4
        c = features[0].shape[-3]
        gate_shape = (features[0].shape[0], c, 1, 1) if batched else (c, 1, 1)
        gate = Tensor(np.ones(gate_shape))
        gated = [f * gate for f in features]
        beta = Tensor(np.zeros(len(features)))
        w = softmax(beta)
        # scores are sample-independent here, scalar factors broadcast
        out = _combine(_split_weights(w, False), gated)
        if return_weights:
            alphas = [Tensor(np.ones((features[0].shape[0], c) if batched else c))
                      for _ in features]
            return out, alphas, beta
        return out

    gated = []
    alphas = []
    for gen, f in zip(modules["ifw"], features):
        g, a = ifw_apply(gen, f)
        gated.append(g)
        alphas.append(a)
    out, beta = cfw_apply(modules["cfw"], features, gated)
    if return_weights:
        return out, alphas, beta
    return out


class WrappedSegment:
    """A sequential run of blocks with dual-level weighting on its outputs.

    Blocks are callables Tensor -> Tensor that all emit the same shape;
    the segment records each intermediate feature and returns the
    weighted aggregate as its output. Independent segments get
    independent weighting modules (no parameter sharing).
    """

    def __init__(self, blocks, config, seed=0):
        if len(blocks) != config.n_layers:
            raise ConfigurationError(
                f"{len(blocks)} blocks but config.n_layers={config.n_layers}"
            )
        self.blocks = list(blocks)
        self.config = config
        self.modules = make_adwm_modules(config, seed=seed)

    def __call__(self, x):
        features = []
        cur = x
        shape = None
        for block in self.blocks:
            cur = block(cur)
            if shape is None:
                shape = cur.shape
            elif cur.shape != shape:
                raise ConfigurationError(
                    f"blocks in one segment must emit one shape, got {shape} then {cur.shape}"
                )
            features.append(cur)
        return adwm_forward(self.config, self.modules, features)

    def params(self):
        unique = {id(m): m for m in self.modules["ifw"]}.values()
        out = []
        for m in unique:
            out.extend(m.params())
        out.extend(self.modules["cfw"].params())
        return out

    def param_count(self):
        return adwm_param_count(self.config)


def wrap_sequential(blocks, config, seed=0):
    return WrappedSegment(blocks, config, seed=seed)
