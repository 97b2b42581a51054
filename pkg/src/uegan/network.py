"""Generator (encoder, ASPP, attention-refined decoder) and critic.

Parameters live in a flat, insertion-ordered ``dict`` mapping dotted names to
:class:`~uegan.tensor.Tensor`.  Batch-norm running statistics are stored in the
same dict as non-trainable tensors so checkpoints capture the full state.
"""
from dataclasses import asdict, dataclass, field, fields
from typing import List

import numpy as np

from . import tensor as T
from .attention import apply_uncertainty_attention, refinement_forward, uncertainty_map
from .errors import ConfigError, DimensionError


@dataclass
class ModelConfig:
    base_channels: int = 8
    depth: int = 4
    encoder_kernels: tuple = (7, 7, 5, 5)
    encoder_stride: int = 2
    decoder_kernels: tuple = (5, 7, 9, 11)
    aspp_dilations: tuple = (2, 4, 6)
    leaky_slope: float = 0.2
    edge_dilation_kernel: int = 7
    input_channels: int = 3
    use_uam: bool = True
    use_refinement: bool = True

    def __post_init__(self):
        self.encoder_kernels = tuple(self.encoder_kernels)
        self.decoder_kernels = tuple(self.decoder_kernels)
        self.aspp_dilations = tuple(self.aspp_dilations)
        self.validate()

    def validate(self):
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")
        if self.base_channels < 2:
            raise ConfigError("base_channels must be >= 2")
        if len(self.encoder_kernels) != self.depth or len(self.decoder_kernels) != self.depth:
            raise ConfigError("need one encoder and one decoder kernel per stage")
        if any(k < 1 or k % 2 == 0 for k in self.encoder_kernels + self.decoder_kernels):
            raise ConfigError("kernels must be positive odd integers")
        if self.encoder_stride != 2:
            raise ConfigError("encoder_stride must be 2 (decoder doubles resolution per stage)")
        if self.edge_dilation_kernel < 1 or self.edge_dilation_kernel % 2 == 0:
            raise ConfigError("edge_dilation_kernel must be odd")

    @property
    def encoder_channels(self):
        return [self.base_channels * 2**i for i in range(self.depth)]

    @property
    def downsample(self):
        return self.encoder_stride**self.depth

    def check_input(self, shape):
        if len(shape) != 4 or shape[1] != self.input_channels:
            raise DimensionError(f"expected N x {self.input_channels} x H x W image, got {shape}")
        if shape[2] % self.downsample or shape[3] % self.downsample:
            raise DimensionError(f"H and W must be divisible by {self.downsample}, got {shape[2:]}")


@dataclass
class GeneratorOutput:
    intermediates: List[T.Tensor] = field(default_factory=list)

    @property
    def final(self):
        return self.intermediates[-1]


# ---------------------------------------------------------------------------
# parameter construction


class _Builder:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)
        self.params = {}

    def conv(self, name, c_in, c_out, k, transpose=False, stride=1, bias=True):
        fan_in = c_in * k * k / (stride * stride if transpose else 1)
        bound = np.sqrt(6.0 / fan_in)
        shape = (c_in, c_out, k, k) if transpose else (c_out, c_in, k, k)
        self.params[name + ".w"] = T.Tensor(self.rng.uniform(-bound, bound, shape), requires_grad=True)
        if bias:
            self.params[name + ".b"] = T.Tensor(np.zeros(c_out), requires_grad=True)

    def identity_head(self, name):
        self.params[name + ".w"] = T.Tensor(np.ones((1, 1, 1, 1)), requires_grad=True)
        self.params[name + ".b"] = T.Tensor(np.zeros(1), requires_grad=True)

    def bn(self, name, c):
        self.params[name + ".gamma"] = T.Tensor(np.ones(c), requires_grad=True)
        self.params[name + ".beta"] = T.Tensor(np.zeros(c), requires_grad=True)
        self.params[name + ".mean"] = T.Tensor(np.zeros(c))
        self.params[name + ".var"] = T.Tensor(np.ones(c))

    def residual(self, name, c_in, c_out):
        self.conv(name + ".c1", c_in, c_out, 1)
        self.bn(name + ".bn1", c_out)
        self.conv(name + ".c2", c_out, c_out, 3)
        self.bn(name + ".bn2", c_out)
        self.conv(name + ".c3", c_out, c_out, 1)
        self.bn(name + ".bn3", c_out)
        if c_in != c_out:
            self.conv(name + ".proj", c_in, c_out, 1)
            self.bn(name + ".bnp", c_out)


def build_generator(config, seed=0):
    """Initialise generator parameters (He-uniform weights, zero biases)."""
    config.validate()
    b = _Builder(seed)
    chans = config.encoder_channels
    c_prev = config.input_channels
    for i, (c, k) in enumerate(zip(chans, config.encoder_kernels)):
        b.conv(f"enc{i}.conv", c_prev, c, k)
        if i > 0:
            b.bn(f"enc{i}.bn", c)
        b.residual(f"enc{i}.res", c, c)
        c_prev = c

    c = chans[-1]
    b.conv("aspp.b0", c, c, 1)
    b.bn("aspp.bn0", c)
    for j, _ in enumerate(config.aspp_dilations, start=1):
        b.conv(f"aspp.b{j}", c, c, 3)
        b.bn(f"aspp.bn{j}", c)
    g = len(config.aspp_dilations) + 1
    b.conv(f"aspp.b{g}", c, c, 1)
    b.bn(f"aspp.bn{g}", c)
    b.conv("aspp.proj", c * (g + 1), c, 3)
    b.bn("aspp.bnproj", c)
    b.conv("head0", c, 1, 1)

    for s, k in enumerate(config.decoder_kernels):
        c_in = chans[config.depth - 1 - s]
        c_out = c_in // 2
        b.conv(f"dec{s}.up", c_in, c_out, k, transpose=True, stride=2)
        b.bn(f"dec{s}.bn", c_out)
        has_skip = s < config.depth - 1
        b.residual(f"dec{s}.res", 2 * c_out if has_skip else c_out, c_out)
        if config.use_refinement:
            b.conv(f"dec{s}.rm.conv1", 2 * c_out, c_out, 3)
            b.conv(f"dec{s}.rm.conv2", c_out, 1, 3)
        else:
            b.conv(f"dec{s}.pred", c_out, 1, 1)
        b.identity_head(f"dec{s}.head")
    return b.params


def build_critic(config, seed=0):
    """Critic: the generator's encoder convolutions without residual blocks."""
    config.validate()
    b = _Builder(seed)
    c_prev = config.input_channels
    for i, (c, k) in enumerate(zip(config.encoder_channels, config.encoder_kernels)):
        b.conv(f"crit{i}.conv", c_prev, c, k)
        if i > 0:
            b.bn(f"crit{i}.bn", c)
        c_prev = c
    return b.params


def trainable(params):
    return {k: v for k, v in params.items() if v.requires_grad}


def count_parameters(params):
    return int(sum(v.size for v in params.values() if v.requires_grad))


def cast_params(params, dtype):
    return {k: T.Tensor(v.data.copy(), requires_grad=v.requires_grad, dtype=dtype) for k, v in params.items()}


def zero_params(params):
    """Copy of ``params`` with every trainable tensor set to zero."""
    out = {}
    for k, v in params.items():
        data = np.zeros_like(v.data) if v.requires_grad else v.data.copy()
        out[k] = T.Tensor(data, requires_grad=v.requires_grad, dtype=v.dtype)
    return out


# ---------------------------------------------------------------------------
# forward passes


def _conv(x, params, name, stride=1, padding=None, dilation=1):
    w = params[name + ".w"]
    k = w.shape[-1]
    if padding is None:
        padding = dilation * (k - 1) // 2
    return T.conv2d(x, w, params.get(name + ".b"), stride=stride, padding=padding, dilation=dilation)


def _bn(x, params, name, training, update_stats=True):
    return T.batchnorm(
        x,
        params[name + ".gamma"],
        params[name + ".beta"],
        params[name + ".mean"],
        params[name + ".var"],
        training=training,
        update_stats=update_stats,
    )


def _act(x, kind, slope):
    return T.leaky_relu(x, slope) if kind == "leaky" else T.relu(x)


def residual_forward(x, params, name, training, kind, slope=0.2, update_stats=True):
    y = _act(_bn(_conv(x, params, name + ".c1"), params, name + ".bn1", training, update_stats), kind, slope)
    y = _act(_bn(_conv(y, params, name + ".c2"), params, name + ".bn2", training, update_stats), kind, slope)
    y = _bn(_conv(y, params, name + ".c3"), params, name + ".bn3", training, update_stats)
    if name + ".proj.w" in params:
        x = _bn(_conv(x, params, name + ".proj"), params, name + ".bnp", training, update_stats)
    return _act(y + x, kind, slope)


def aspp_forward(x, params, dilations=(2, 4, 6), training=True, update_stats=True):
    """Five parallel branches (1x1, three dilated 3x3, global pooling), concatenated and projected."""
    h, w = x.shape[2:]
    branches = [T.relu(_bn(_conv(x, params, "aspp.b0"), params, "aspp.bn0", training, update_stats))]
    for j, d in enumerate(dilations, start=1):
        branches.append(T.relu(_bn(_conv(x, params, f"aspp.b{j}", dilation=d), params, f"aspp.bn{j}", training, update_stats)))
    g = len(dilations) + 1
    pooled = T.global_avg_pool(x)
    pooled = T.relu(_bn(_conv(pooled, params, f"aspp.b{g}"), params, f"aspp.bn{g}", training, update_stats))
    branches.append(T.broadcast_to(pooled, pooled.shape[:2] + (h, w)))
    x = _conv(T.concat(branches, axis=1), params, "aspp.proj")
    return T.relu(_bn(x, params, "aspp.bnproj", training, update_stats))


def generator_forward(image, params, config, training=True, return_maps=False, update_stats=True):
    """Run the generator; returns :class:`GeneratorOutput` with maps ordered coarse to fine.

    With ``return_maps`` also returns a dict of attention maps per decoder stage.
    """
    config.check_input(image.shape)
    slope = config.leaky_slope
    x = image
    skips = []
    for i in range(config.depth):
        k = config.encoder_kernels[i]
        x = _conv(x, params, f"enc{i}.conv", stride=config.encoder_stride, padding=(k - 1) // 2)
        if i > 0:
            x = _bn(x, params, f"enc{i}.bn", training, update_stats)
        x = T.leaky_relu(x, slope)
        x = residual_forward(x, params, f"enc{i}.res", training, "leaky", slope, update_stats)
        skips.append(x)

    x = aspp_forward(x, params, config.aspp_dilations, training, update_stats)
    pred = _conv(x, params, "head0")
    out = GeneratorOutput([pred])
    maps = {}

    for s, k in enumerate(config.decoder_kernels):
        x = T.conv_transpose2d(
            x, params[f"dec{s}.up.w"], params[f"dec{s}.up.b"], stride=2, padding=(k - 1) // 2, output_padding=1
        )
        x = T.relu(_bn(x, params, f"dec{s}.bn", training, update_stats))
        if s < config.depth - 1:
            skip = skips[config.depth - 2 - s]
            if config.use_uam:
                skip = apply_uncertainty_attention(skip, pred)
                maps.setdefault(s, {})["uncertainty"] = uncertainty_map(pred)
            x = T.concat([x, skip], axis=1)
        x = residual_forward(x, params, f"dec{s}.res", training, "relu", update_stats=update_stats)
        if config.use_refinement:
            logits, stage_maps = refinement_forward(
                pred, x, params, prefix=f"dec{s}.rm.", dilation_kernel=config.edge_dilation_kernel, return_maps=True
            )
            maps.setdefault(s, {}).update(stage_maps)
        else:
            logits = _conv(x, params, f"dec{s}.pred")
        pred = _conv(logits, params, f"dec{s}.head")
        out.intermediates.append(pred)
    if return_maps:
        return out, maps
    return out


def critic_forward(image, mask_probs, params, config, training=True, update_stats=True):
    """Features of every critic stage for ``image`` masked by ``mask_probs`` (1 channel)."""
    if mask_probs.shape[1] != 1 or mask_probs.shape[2:] != image.shape[2:] or mask_probs.shape[0] != image.shape[0]:
        raise DimensionError(f"mask {mask_probs.shape} does not match image {image.shape}")
    x = image * mask_probs
    levels = []
    for i in range(config.depth):
        k = config.encoder_kernels[i]
        x = _conv(x, params, f"crit{i}.conv", stride=config.encoder_stride, padding=(k - 1) // 2)
        if i > 0:
            x = _bn(x, params, f"crit{i}.bn", training, update_stats)
        x = T.leaky_relu(x, config.leaky_slope)
        levels.append(x)
    return levels


def config_dict(config):
    return asdict(config)


def config_fields():
    return [f.name for f in fields(ModelConfig)]
