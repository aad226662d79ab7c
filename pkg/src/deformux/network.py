"""DeformUX encoder blocks and the segmentation network around them.

A block is two residual sub-blocks on channel-normalized input::

    z_hat = conv(LN(z)) + z          conv = deformable op with offsets from LN(z)
    z_out = scale(LN(z_hat)) + z_hat scale = MLP, grouped pointwise pair, or skipped

Every ablation axis (operator, offset kernel, offset plane, scaling) is a
field of ``BlockConfig``.

Two decoders are available. ``"light"`` upsamples with transposed convolutions,
concatenates each encoder stage's output and applies one 3x3x3 conv block per
level, then upsamples once more to full resolution. With ``input_skip`` the raw
input is concatenated there and mixed by a pointwise conv, LN and GELU, so the
head sees each voxel's own intensity next to the decoded context. A 1x1x1
head produces the logits.
``"unetr"`` rebuilds the heavier residual skip/decoder layout (including a
bottleneck of ``hidden_channels``) that the full-size parameter budget implies.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import autograd as ag
from . import tensor
from .deform import PlaneMask, SamplingGrid

OPERATORS = ("ddc", "standard", "depthwise")
OFFSET_BRANCHES = ("pointwise", "conv3")
SCALINGS = ("mlp", "depthwise", "none")

# Trilinear sampling cost charged per (output element, tap): eight corner
# weights from three fractions (about 15 flops) on top of the 2-flop MAC.
SAMPLE_FLOPS_PER_TAP = 15


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BlockConfig:
    channels: int = 8
    operator: str = "ddc"
    offset_branch: str = "pointwise"
    plane: str = "tri-planar"
    scaling: str = "mlp"
    mlp_ratio: float = 4.0
    kernel: int = 3

    def __post_init__(self):
        if self.operator not in OPERATORS:
            raise ConfigError(f"operator must be one of {OPERATORS}, got {self.operator!r}")
        if self.offset_branch not in OFFSET_BRANCHES:
            raise ConfigError(f"offset_branch must be one of {OFFSET_BRANCHES}, got {self.offset_branch!r}")
        if self.scaling not in SCALINGS:
            raise ConfigError(f"scaling must be one of {SCALINGS}, got {self.scaling!r}")
        PlaneMask.from_name(self.plane)
        if self.channels <= 0:
            raise ConfigError("channels must be positive")
        if float(self.mlp_ratio * self.channels) != int(self.mlp_ratio * self.channels):
            raise ConfigError(f"mlp_ratio * channels must be an integer, got {self.mlp_ratio * self.channels}")

    @property
    def hidden(self) -> int:
        return int(self.mlp_ratio * self.channels)

    @property
    def grid(self) -> SamplingGrid:
        return SamplingGrid((self.kernel,) * 3)

    @property
    def mask(self) -> PlaneMask:
        return PlaneMask.from_name(self.plane)

    @property
    def deformable(self) -> bool:
        return self.operator != "depthwise"


@dataclass(frozen=True)
class NetworkConfig:
    channels: Tuple[int, ...] = (8, 16)
    blocks_per_stage: int = 2
    in_channels: int = 1
    num_classes: int = 2
    stem_kernel: int = 7
    stem_stride: int = 2
    decoder: str = "light"
    hidden_channels: Optional[int] = None
    input_skip: bool = True
    operator: str = "ddc"
    offset_branch: str = "pointwise"
    plane: str = "tri-planar"
    scaling: str = "mlp"
    mlp_ratio: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not 1 <= len(self.channels) <= 4 or any(c <= 0 for c in self.channels):
            raise ConfigError(f"channel schedule must have 1-4 positive entries, got {self.channels}")
        if self.decoder not in ("light", "unetr"):
            raise ConfigError(f"decoder must be 'light' or 'unetr', got {self.decoder!r}")
        if self.decoder == "unetr" and not self.hidden_channels:
            raise ConfigError("the unetr decoder needs hidden_channels")
        if self.blocks_per_stage < 0 or self.num_classes < 2:
            raise ConfigError("blocks_per_stage must be >= 0 and num_classes >= 2")
        for c in self.channels:
            self.block(c)

    def block(self, channels: int) -> BlockConfig:
        return BlockConfig(channels, self.operator, self.offset_branch, self.plane, self.scaling,
                           self.mlp_ratio)

    @property
    def divisor(self) -> int:
        """Spatial extents must be multiples of this."""
        return self.stem_stride * 2 ** (len(self.channels) - 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "NetworkConfig":
        return dataclasses.replace(self, **kw)


DESK = NetworkConfig()
FULL = NetworkConfig(channels=(48, 96, 192, 384), decoder="unetr", hidden_channels=768)


# ---------------------------------------------------------------------------
# parameter store


class Model:
    """Parameters plus a forward pass; parameters live in insertion order."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, ag.Var] = {}
        self._rng = tensor.generator(seed)
        _build(self)
        del self._rng

    # -- construction helpers
    def _add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = ag.parameter(np.asarray(value, dtype=self.dtype), name)

    def _normal(self, name, shape, fan_in):
        self._add(name, self._rng.standard_normal(shape) / np.sqrt(fan_in))

    def _zeros(self, name, shape):
        self._add(name, np.zeros(shape))

    def _ones(self, name, shape):
        self._add(name, np.ones(shape))

    # -- state
    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.value for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].value.shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].value.shape}")
            self.params[k] = ag.parameter(np.array(v, dtype=self.dtype), k)

    def astype(self, dtype) -> "Model":
        other = Model.__new__(Model)
        other.cfg = self.cfg
        other.dtype = np.dtype(dtype)
        other.params = {k: ag.parameter(v.value.astype(dtype), k) for k, v in self.params.items()}
        return other

    def __call__(self, x, grad: bool = True) -> ag.Var:
        return forward(self, x, grad)


def param_count(model: Model) -> int:
    return int(sum(v.value.size for v in model.params.values()))


def build_network(cfg: NetworkConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(cfg, seed, dtype)


def _build(m: Model) -> None:
    cfg = m.cfg
    ch = cfg.channels
    k = cfg.stem_kernel
    m._normal("stem.conv.weight", (ch[0], cfg.in_channels, k, k, k), cfg.in_channels * k**3)
    m._zeros("stem.conv.bias", (ch[0],))
    _ln_params(m, "stem.norm", ch[0])
    for s, c in enumerate(ch):
        if s > 0:
            _ln_params(m, f"down{s}.norm", ch[s - 1])
            m._normal(f"down{s}.conv.weight", (c, ch[s - 1], 2, 2, 2), ch[s - 1] * 8)
            m._zeros(f"down{s}.conv.bias", (c,))
        for b in range(cfg.blocks_per_stage):
            _block_params(m, f"stage{s}.block{b}", cfg.block(c))
    if cfg.decoder == "light":
        for i in range(len(ch) - 2, -1, -1):
            _up_params(m, f"dec{i}.up", ch[i + 1], ch[i], bias=True)
            _conv_block_params(m, f"dec{i}.conv", 2 * ch[i], ch[i])
        _up_params(m, "final.up", ch[0], ch[0], bias=True)
        if cfg.input_skip:
            m._normal("final.fuse.weight", (ch[0], ch[0] + cfg.in_channels), ch[0] + cfg.in_channels)
            m._zeros("final.fuse.bias", (ch[0],))
            _ln_params(m, "final.fuse.norm", ch[0])
    else:
        h = cfg.hidden_channels
        _res_block_params(m, "skip0", cfg.in_channels, ch[0])
        for j in range(1, len(ch)):
            _res_block_params(m, f"skip{j}", ch[j - 1], ch[j])
        _res_block_params(m, "bottleneck", ch[-1], h)
        prev = h
        for j in range(len(ch) - 1, -1, -1):
            _up_params(m, f"dec{j}.up", prev, ch[j], bias=False)
            _res_block_params(m, f"dec{j}.res", 2 * ch[j], ch[j])
            prev = ch[j]
        _res_block_params(m, "final.res", ch[0], ch[0])
    m._normal("head.weight", (cfg.num_classes, ch[0]), ch[0])
    m._zeros("head.bias", (cfg.num_classes,))


def _ln_params(m, name, c):
    m._ones(f"{name}.gamma", (c,))
    m._zeros(f"{name}.beta", (c,))


def _block_params(m, name, bc: BlockConfig):
    c, K = bc.channels, bc.grid.K
    _ln_params(m, f"{name}.norm1", c)
    if bc.operator == "ddc":
        m._normal(f"{name}.conv.weight", (c, K), K)
    elif bc.operator == "standard":
        m._normal(f"{name}.conv.weight", (c, c, K), c * K)
    else:
        m._normal(f"{name}.conv.weight", (c, 1) + bc.grid.kernel, K)
    m._zeros(f"{name}.conv.bias", (c,))
    if bc.deformable:
        # Zero-initialized: training starts from the plain-convolution regime.
        if bc.offset_branch == "pointwise":
            m._zeros(f"{name}.offset.weight", (3 * K, c))
        else:
            m._zeros(f"{name}.offset.weight", (3 * K, c, 3, 3, 3))
        m._zeros(f"{name}.offset.bias", (3 * K,))
    if bc.scaling == "none":
        return
    _ln_params(m, f"{name}.norm2", c)
    hid = bc.hidden
    if bc.scaling == "mlp":
        m._normal(f"{name}.mlp.fc1.weight", (hid, c), c)
        m._zeros(f"{name}.mlp.fc1.bias", (hid,))
        m._normal(f"{name}.mlp.fc2.weight", (c, hid), hid)
        m._zeros(f"{name}.mlp.fc2.bias", (c,))
    else:
        per = hid // c
        m._normal(f"{name}.mlp.fc1.weight", (hid, 1, 1, 1, 1), 1)
        m._zeros(f"{name}.mlp.fc1.bias", (hid,))
        m._normal(f"{name}.mlp.fc2.weight", (c, per, 1, 1, 1), per)
        m._zeros(f"{name}.mlp.fc2.bias", (c,))


def _up_params(m, name, cin, cout, bias):
    m._normal(f"{name}.weight", (cin, cout, 2, 2, 2), cin)
    if bias:
        m._zeros(f"{name}.bias", (cout,))


def _conv_block_params(m, name, cin, cout):
    m._normal(f"{name}.weight", (cout, cin, 3, 3, 3), cin * 27)
    m._zeros(f"{name}.bias", (cout,))
    _ln_params(m, f"{name}.norm", cout)


def _res_block_params(m, name, cin, cout):
    m._normal(f"{name}.conv1.weight", (cout, cin, 3, 3, 3), cin * 27)
    _ln_params(m, f"{name}.norm1", cout)
    m._normal(f"{name}.conv2.weight", (cout, cout, 3, 3, 3), cout * 27)
    _ln_params(m, f"{name}.norm2", cout)
    if cin != cout:
        m._normal(f"{name}.proj.weight", (cout, cin, 1, 1, 1), cin)
        _ln_params(m, f"{name}.norm3", cout)


# ---------------------------------------------------------------------------
# forward


class _P:
    """Parameter lookup: trainable Vars, or constants when gradients are off."""

    def __init__(self, model: Model, grad: bool):
        self.params = model.params
        self.grad = grad

    def __call__(self, name):
        v = self.params[name]
        return v if self.grad else ag.constant(v.value)

    def __contains__(self, name):
        return name in self.params


def _ln(p, name, x):
    return ag.layer_norm(x, p(f"{name}.gamma"), p(f"{name}.beta"))


def offset_branch(p, name, z, bc: BlockConfig):
    """Offset field (N, 3K, D, H, W) computed per voxel from ``z``."""
    if bc.offset_branch == "pointwise":
        return ag.pointwise_linear(z, p(f"{name}.offset.weight"), p(f"{name}.offset.bias"))
    return ag.conv3d(z, p(f"{name}.offset.weight"), p(f"{name}.offset.bias"), padding=1)


def deformux_block(p, name, z, bc: BlockConfig):
    if z.shape[1] != bc.channels:
        raise tensor.ShapeError(f"{name}: input has {z.shape[1]} channels, block expects {bc.channels}")
    y = _ln(p, f"{name}.norm1", z)
    if bc.operator == "depthwise":
        y = ag.conv3d(y, p(f"{name}.conv.weight"), p(f"{name}.conv.bias"), padding=bc.kernel // 2,
                      groups=bc.channels)
    else:
        off = offset_branch(p, name, y, bc)
        groups = None if bc.operator == "ddc" else 1
        y = ag.deformable_conv(y, p(f"{name}.conv.weight"), off, p(f"{name}.conv.bias"), groups=groups,
                               grid=bc.grid, mask=bc.mask)
    z = ag.add(y, z)
    if bc.scaling == "none":
        return z
    y = _ln(p, f"{name}.norm2", z)
    if bc.scaling == "mlp":
        y = ag.pointwise_linear(y, p(f"{name}.mlp.fc1.weight"), p(f"{name}.mlp.fc1.bias"))
        y = ag.gelu(y)
        y = ag.pointwise_linear(y, p(f"{name}.mlp.fc2.weight"), p(f"{name}.mlp.fc2.bias"))
    else:
        c = bc.channels
        y = ag.conv3d(y, p(f"{name}.mlp.fc1.weight"), p(f"{name}.mlp.fc1.bias"), groups=c)
        y = ag.gelu(y)
        y = ag.conv3d(y, p(f"{name}.mlp.fc2.weight"), p(f"{name}.mlp.fc2.bias"), groups=c)
    return ag.add(y, z)


def _conv_block(p, name, x):
    y = ag.conv3d(x, p(f"{name}.weight"), p(f"{name}.bias"), padding=1)
    return ag.gelu(_ln(p, f"{name}.norm", y))


def _res_block(p, name, x):
    y = ag.conv3d(x, p(f"{name}.conv1.weight"), padding=1)
    y = ag.gelu(_ln(p, f"{name}.norm1", y))
    y = _ln(p, f"{name}.norm2", ag.conv3d(y, p(f"{name}.conv2.weight"), padding=1))
    if f"{name}.proj.weight" in p:
        x = _ln(p, f"{name}.norm3", ag.conv3d(x, p(f"{name}.proj.weight")))
    return ag.gelu(ag.add(y, x))


def _up(p, name, x):
    bias = p(f"{name}.bias") if f"{name}.bias" in p else None
    return ag.transposed_conv3d(x, p(f"{name}.weight"), bias, stride=2)


def encode(p, cfg: NetworkConfig, x) -> List[ag.Var]:
    k = cfg.stem_kernel
    z = ag.conv3d(x, p("stem.conv.weight"), p("stem.conv.bias"), stride=cfg.stem_stride, padding=k // 2)
    z = _ln(p, "stem.norm", z)
    feats = []
    for s, c in enumerate(cfg.channels):
        if s > 0:
            z = _ln(p, f"down{s}.norm", z)
            z = ag.conv3d(z, p(f"down{s}.conv.weight"), p(f"down{s}.conv.bias"), stride=2)
        for b in range(cfg.blocks_per_stage):
            z = deformux_block(p, f"stage{s}.block{b}", z, cfg.block(c))
        feats.append(z)
    return feats


def forward(model: Model, x, grad: bool = True) -> ag.Var:
    """Logits (N, classes, D, H, W) for an input (N, in_channels, D, H, W)."""
    cfg = model.cfg
    x = ag.constant(np.asarray(x.value if isinstance(x, ag.Var) else x, dtype=model.dtype))
    if x.shape[1] != cfg.in_channels:
        raise tensor.ShapeError(f"input has {x.shape[1]} channels, network expects {cfg.in_channels}")
    if any(s % cfg.divisor for s in x.shape[2:]):
        raise ConfigError(f"spatial extents {x.shape[2:]} must be divisible by {cfg.divisor}")
    p = _P(model, grad)
    feats = encode(p, cfg, x)
    ch = cfg.channels
    if cfg.decoder == "light":
        d = feats[-1]
        for i in range(len(ch) - 2, -1, -1):
            up = _up(p, f"dec{i}.up", d)
            d = _conv_block(p, f"dec{i}.conv", ag.concat_channels([up, feats[i]]))
        d = _up(p, "final.up", d)
        if cfg.input_skip:
            d = ag.concat_channels([d, x])
            d = ag.pointwise_linear(d, p("final.fuse.weight"), p("final.fuse.bias"))
            d = ag.gelu(_ln(p, "final.fuse.norm", d))
    else:
        skips = [_res_block(p, "skip0", x)]
        skips += [_res_block(p, f"skip{j}", feats[j - 1]) for j in range(1, len(ch))]
        d = _res_block(p, "bottleneck", feats[-1])
        for j in range(len(ch) - 1, -1, -1):
            up = _up(p, f"dec{j}.up", d)
            d = _res_block(p, f"dec{j}.res", ag.concat_channels([up, skips[j]]))
        d = _res_block(p, "final.res", d)
    return ag.pointwise_linear(d, p("head.weight"), p("head.bias"))


def plain_twin(model: Model) -> Model:
    """Same network with plain depthwise convolutions in place of DDC, sharing weights."""
    cfg = model.cfg
    if cfg.operator != "ddc":
        raise ConfigError("plain_twin expects a ddc network")
    twin = Model(cfg.replace(operator="depthwise"), dtype=model.dtype)
    state = {}
    for k, v in twin.params.items():
        src = model.params[k].value
        state[k] = src.reshape(v.value.shape)
    twin.load_state_dict(state)
    return twin


# ---------------------------------------------------------------------------
# analytic accounting


def layer_table(cfg: NetworkConfig, spatial: Tuple[int, int, int] = (96, 96, 96)):
    """Rows ``(name, params, flops)`` derived from the configuration alone.

    Convolution and linear layers cost 2 flops per multiply-accumulate;
    deformable taps add ``SAMPLE_FLOPS_PER_TAP`` per output element.
    Normalization, activations and additions are not counted.
    """
    rows = []
    vox = lambda f: int(np.prod([s // f for s in spatial]))
    ch = cfg.channels
    k3 = cfg.stem_kernel**3
    rows.append(("stem", ch[0] * cfg.in_channels * k3 + ch[0] + 2 * ch[0],
                 2 * ch[0] * cfg.in_channels * k3 * vox(cfg.stem_stride)))
    scale = cfg.stem_stride
    for s, c in enumerate(ch):
        if s > 0:
            rows.append((f"down{s}", 2 * ch[s - 1] + c * ch[s - 1] * 8 + c,
                         2 * c * ch[s - 1] * 8 * vox(scale * 2)))
            scale *= 2
        for b in range(cfg.blocks_per_stage):
            rows.append((f"stage{s}.block{b}",) + _block_cost(cfg.block(c), vox(scale)))
    if cfg.decoder == "light":
        res = cfg.stem_stride * 2 ** (len(ch) - 1)
        for i in range(len(ch) - 2, -1, -1):
            res //= 2
            v = vox(res)
            rows.append((f"dec{i}.up", ch[i + 1] * ch[i] * 8 + ch[i], 2 * ch[i + 1] * ch[i] * v))
            rows.append((f"dec{i}.conv", 2 * ch[i] * ch[i] * 27 + ch[i] + 2 * ch[i],
                         2 * 2 * ch[i] * ch[i] * 27 * v))
        rows.append(("final.up", ch[0] * ch[0] * 8 + ch[0], 2 * ch[0] * ch[0] * vox(1)))
        if cfg.input_skip:
            cin = ch[0] + cfg.in_channels
            rows.append(("final.fuse", ch[0] * cin + 3 * ch[0], 2 * ch[0] * cin * vox(1)))
    else:
        h = cfg.hidden_channels
        rows.append(("skip0",) + _res_cost(cfg.in_channels, ch[0], vox(1)))
        for j in range(1, len(ch)):
            rows.append((f"skip{j}",) + _res_cost(ch[j - 1], ch[j], vox(cfg.stem_stride * 2 ** (j - 1))))
        rows.append(("bottleneck",) + _res_cost(ch[-1], h, vox(cfg.stem_stride * 2 ** (len(ch) - 1))))
        prev = h
        for j in range(len(ch) - 1, -1, -1):
            f = cfg.stem_stride * 2 ** (j - 1) if j > 0 else 1
            rows.append((f"dec{j}.up", prev * ch[j] * 8, 2 * prev * ch[j] * vox(f)))
            rows.append((f"dec{j}.res",) + _res_cost(2 * ch[j], ch[j], vox(f)))
            prev = ch[j]
        rows.append(("final.res",) + _res_cost(ch[0], ch[0], vox(1)))
    rows.append(("head", cfg.num_classes * ch[0] + cfg.num_classes, 2 * cfg.num_classes * ch[0] * vox(1)))
    return rows


def _block_cost(bc: BlockConfig, v: int):
    c, K = bc.channels, bc.grid.K
    params = 4 * c if bc.scaling != "none" else 2 * c
    flops = 0
    if bc.operator == "ddc":
        params += c * K + c
        flops += (2 + SAMPLE_FLOPS_PER_TAP) * c * K * v
    elif bc.operator == "standard":
        params += c * c * K + c
        flops += (2 * c + SAMPLE_FLOPS_PER_TAP) * c * K * v
    else:
        params += c * K + c
        flops += 2 * c * K * v
    if bc.deformable:
        fan = c if bc.offset_branch == "pointwise" else c * 27
        params += 3 * K * fan + 3 * K
        flops += 2 * 3 * K * fan * v
    hid = bc.hidden
    if bc.scaling == "mlp":
        params += 2 * hid * c + hid + c
        flops += 2 * 2 * hid * c * v
    elif bc.scaling == "depthwise":
        params += 2 * hid + hid + c
        flops += 2 * 2 * hid * v
    return params, flops


def _res_cost(cin, cout, v):
    params = 27 * cin * cout + 27 * cout * cout + 4 * cout
    flops = 2 * 27 * (cin * cout + cout * cout) * v
    if cin != cout:
        params += cin * cout + 2 * cout
        flops += 2 * cin * cout * v
    return params, flops


def closed_form_param_count(cfg: NetworkConfig) -> int:
    return int(sum(r[1] for r in layer_table(cfg)))


def flops_estimate(cfg: NetworkConfig, spatial: Tuple[int, int, int]) -> float:
    return float(sum(r[2] for r in layer_table(cfg, spatial)))
