"""Segmentation network with a classification head on the segmentation output.

Encoder: the ResNet-18 stem and its first three residual stages (the fourth
is dropped). Decoder: 3x3 conv -> BN -> ReLU -> x2 nearest upsample -> 1x1
conv, giving class logits at 1/8 of the input resolution, then nearest
interpolation back to full size. The classification head pools those
low-resolution logits globally and maps them through two 1x1 convolutions
(C -> 8 -> C) with BN + ReLU in between.
"""

import copy
from collections import OrderedDict, namedtuple
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ConfigError, DimensionError
from .tensor import Tensor, add

ForwardOutput = namedtuple("ForwardOutput", ["seg_logits", "pre_interp", "cls_logits"])

HEAD_WIDTH = 8


@dataclass
class ModelConfig:
    num_classes: int = 4
    input_size: int = 128
    channel_widths: tuple = (64, 64, 128, 256)
    decoder_width: int = 64
    seed: int = 0

    def __post_init__(self):
        self.channel_widths = tuple(int(w) for w in self.channel_widths)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size <= 0 or self.input_size % 16:
            raise ConfigError(f"input_size must be a positive multiple of 16, got {self.input_size}")
        if len(self.channel_widths) != 4 or min(self.channel_widths) < 1:
            raise ConfigError(f"channel_widths needs four positive widths, got {self.channel_widths}")
        if self.decoder_width < 1:
            raise ConfigError(f"decoder_width must be positive, got {self.decoder_width}")

    @property
    def encoder_size(self):
        return self.input_size // 16

    @classmethod
    def reduced(cls, num_classes=4, input_size=64, seed=0, widths=(8, 8, 16, 32), decoder_width=16):
        """Narrow configuration for CPU-scale experiments and tests."""
        return cls(num_classes=num_classes, input_size=input_size, channel_widths=widths,
                   decoder_width=decoder_width, seed=seed)


# (stage name, width index, stride of the first block)
_STAGES = (("layer1", 1, 1), ("layer2", 2, 2), ("layer3", 3, 2))


def parameter_layout(config):
    """Ordered ``(name, shape, kind)`` triples; ``kind`` is the init rule."""
    c = config.num_classes
    w = config.channel_widths
    entries = []

    def conv(name, cout, cin, k, bias=False):
        entries.append((f"{name}.weight", (cout, cin, k, k), "he"))
        if bias:
            entries.append((f"{name}.bias", (cout,), "zeros"))

    def bn(name, ch):
        entries.append((f"{name}.gamma", (ch,), "ones"))
        entries.append((f"{name}.beta", (ch,), "zeros"))

    conv("stem.conv", w[0], 3, 7)
    bn("stem.bn", w[0])
    cin = w[0]
    for stage, wi, stride in _STAGES:
        cout = w[wi]
        for b in range(2):
            s = stride if b == 0 else 1
            prefix = f"{stage}.{b}"
            conv(f"{prefix}.conv1", cout, cin, 3)
            bn(f"{prefix}.bn1", cout)
            conv(f"{prefix}.conv2", cout, cout, 3)
            bn(f"{prefix}.bn2", cout)
            if s != 1 or cin != cout:
                conv(f"{prefix}.down.conv", cout, cin, 1)
                bn(f"{prefix}.down.bn", cout)
            cin = cout
    conv("decoder.conv", config.decoder_width, cin, 3)
    bn("decoder.bn", config.decoder_width)
    conv("decoder.out", c, config.decoder_width, 1, bias=True)
    conv("head.conv1", HEAD_WIDTH, c, 1)
    bn("head.bn", HEAD_WIDTH)
    conv("head.conv2", c, HEAD_WIDTH, 1)
    return entries


class Model:
    """Named parameters plus batch-norm running statistics."""

    def __init__(self, config, params, buffers):
        self.config = config
        self.params = params
        self.buffers = buffers

    # -- bookkeeping ------------------------------------------------------

    def named_parameters(self):
        return self.params.items()

    def num_parameters(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def to_dtype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        return self

    def state_dict(self):
        """Ordered name -> array mapping of parameters and buffers (copies)."""
        out = OrderedDict()
        for name, p in self.params.items():
            out[name] = p.data.copy()
        for name, b in self.buffers.items():
            out[name] = b.copy()
        return out

    def load_state_dict(self, state):
        for name, p in self.params.items():
            p.data = np.array(state[name], dtype=p.dtype)
        for name in self.buffers:
            self.buffers[name] = np.array(state[name], dtype=self.buffers[name].dtype)

    def copy(self):
        return copy.deepcopy(self)

    # -- layers -----------------------------------------------------------

    def _conv(self, name, x, stride=1, padding=0):
        bias = self.params.get(f"{name}.bias")
        return F.conv2d(x, self.params[f"{name}.weight"], bias, stride=stride, padding=padding)

    def _bn(self, name, x, train):
        return F.batchnorm2d(x, self.params[f"{name}.gamma"], self.params[f"{name}.beta"],
                             self.buffers[f"{name}.running_mean"], self.buffers[f"{name}.running_var"],
                             training=train)

    def _block(self, prefix, x, stride, train, trace):
        out = F.relu(self._bn(f"{prefix}.bn1", self._conv(f"{prefix}.conv1", x, stride, 1), train))
        out = self._bn(f"{prefix}.bn2", self._conv(f"{prefix}.conv2", out, 1, 1), train)
        if f"{prefix}.down.conv.weight" in self.params:
            skip = self._bn(f"{prefix}.down.bn", self._conv(f"{prefix}.down.conv", x, stride, 0), train)
        else:
            skip = x
        y = F.relu(add(out, skip))
        if trace is not None:
            trace[prefix] = {"residual": out.data.copy(), "skip": skip.data.copy(), "output": y.data.copy()}
        return y

    def check_input(self, x):
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3:
            raise DimensionError(f"expected input (N, 3, {s}, {s}), got {x.shape}")
        if x.shape[2] != s:
            raise DimensionError(f"axis 2 (height): expected {s}, got {x.shape[2]}")
        if x.shape[3] != s:
            raise DimensionError(f"axis 3 (width): expected {s}, got {x.shape[3]}")

    def encode(self, x, train=False, trace=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_input(x)
        y = F.relu(self._bn("stem.bn", self._conv("stem.conv", x, 2, 3), train))
        y = F.max_pool2d(y, 3, 2, 1)
        if trace is not None:
            trace["stem"] = y.data.copy()
        for stage, _, stride in _STAGES:
            y = self._block(f"{stage}.0", y, stride, train, trace)
            y = self._block(f"{stage}.1", y, 1, train, trace)
            if trace is not None:
                trace[stage] = y.data.copy()
        return y

    def decode(self, features, train=False, full_resolution=True):
        """Return ``(seg_logits, pre_interp)``; ``seg_logits`` is ``None`` unless ``full_resolution``."""
        y = F.relu(self._bn("decoder.bn", self._conv("decoder.conv", features, 1, 1), train))
        h, w = y.shape[2], y.shape[3]
        y = F.upsample_nearest(y, (2 * h, 2 * w))
        pre = self._conv("decoder.out", y)
        if not full_resolution:
            return None, pre
        s = self.config.input_size
        return F.upsample_nearest(pre, (s, s)), pre

    def classify(self, pre_interp, train=False):
        y = F.adaptive_avg_pool2d(pre_interp, (1, 1))
        y = F.relu(self._bn("head.bn", self._conv("head.conv1", y), train))
        return F.flatten(self._conv("head.conv2", y))

    def forward(self, x, train=False, with_head=True, full_resolution=True, trace=None):
        """Run the network; ``cls_logits`` is ``None`` when ``with_head`` is off."""
        feats = self.encode(x, train, trace)
        seg, pre = self.decode(feats, train, full_resolution)
        cls = self.classify(pre, train) if with_head else None
        return ForwardOutput(seg, pre, cls)

    __call__ = forward


def build_model(config):
    """Create a model with seeded He-normal conv weights and identity BN."""
    rng = np.random.default_rng(config.seed)
    params = OrderedDict()
    buffers = OrderedDict()
    for name, shape, kind in parameter_layout(config):
        if kind == "he":
            fan_in = int(np.prod(shape[1:]))
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(np.float32), requires_grad=True, name=name)
        if name.endswith(".gamma"):
            base = name[: -len(".gamma")]
            buffers[f"{base}.running_mean"] = np.zeros(shape, dtype=np.float32)
            buffers[f"{base}.running_var"] = np.ones(shape, dtype=np.float32)
    return Model(config, params, buffers)


def forward(model, batch, mode="eval"):
    """Functional form of :meth:`Model.forward` with ``mode`` in {train, eval}."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    return model.forward(batch, train=(mode == "train"))
