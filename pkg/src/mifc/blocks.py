"""Network blocks and model builders.

Two scaled-down backbones over a shared parameter registry:

* ``mobilenet_lite`` — 3x3 stem (stride 2, 16 ch), inverted-residual stages
  (t, c, n, s) = (1,16,1,1), (6,24,2,2), (6,32,2,2), (6,64,2,2), then a 1x1
  conv to 128 and global average pooling.
* ``vgg_lite`` — three stages of [3x3 conv + relu, 3x3 conv + relu, maxpool]
  with 32/64/128 channels, global average pooling and a dense layer to 128.

Both produce a 128-dim feature vector. The multi-input model runs two
independent backbones (RGB and silhouette), concatenates their features and
classifies with a 2-layer MLP head; the single-input baseline uses the RGB
backbone alone. Convolutions followed by batchnorm carry no bias.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import FormatError, InvalidArgumentError
from .prng import SplitMix64
from .tensor import Tensor

BN_MOMENTUM = 0.9
BN_EPS = 1e-5

MOBILENET_STAGES = ((1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 2, 2), (6, 64, 2, 2))
MOBILENET_STEM_CH = 16
VGG_STAGE_CHANNELS = (32, 64, 128)
FEATURE_DIM = 128
MIN_INPUT_HW = 32
BACKBONE_KINDS = ("mobilenet_lite", "vgg_lite")


class ParamSet:
    """Ordered registry of named parameters and batchnorm running buffers."""

    def __init__(self, dtype: str = "f32"):
        self.dtype = dtype
        self.np_dtype = T.DTYPES[dtype]
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add_param(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise InvalidArgumentError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self.params[name] = t
        return t

    def add_buffer(self, name: str, arr: np.ndarray) -> np.ndarray:
        if name in self.buffers:
            raise InvalidArgumentError(f"duplicate buffer name {name!r}")
        self.buffers[name] = arr
        return arr


class Conv:
    def __init__(self, ps, name, in_ch, out_ch, k, stride, pad, prng, bias=False):
        fan_in = in_ch * k * k
        self.w = ps.add_param(
            f"{name}.w", T.he_uniform_init((out_ch, in_ch, k, k), fan_in, prng, ps.dtype)
        )
        self.b = None
        if bias:
            self.b = ps.add_param(f"{name}.b", Tensor(np.zeros(out_ch, dtype=ps.np_dtype)))
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class DepthwiseConv:
    def __init__(self, ps, name, ch, k, stride, pad, prng):
        self.w = ps.add_param(
            f"{name}.w", T.he_uniform_init((ch, 1, k, k), k * k, prng, ps.dtype)
        )
        self.stride, self.pad = stride, pad

    def __call__(self, x):
        return T.depthwise_conv2d(x, self.w, None, stride=self.stride, pad=self.pad)


class BatchNorm:
    def __init__(self, ps, name, ch):
        self.gamma = ps.add_param(f"{name}.gamma", Tensor(np.ones(ch, dtype=ps.np_dtype)))
        self.beta = ps.add_param(f"{name}.beta", Tensor(np.zeros(ch, dtype=ps.np_dtype)))
        self.mean = ps.add_buffer(f"{name}.mean", np.zeros(ch, dtype=ps.np_dtype))
        self.var = ps.add_buffer(f"{name}.var", np.ones(ch, dtype=ps.np_dtype))

    def __call__(self, x, mode):
        return T.batchnorm(
            x, self.gamma, self.beta, self.mean, self.var, mode, BN_MOMENTUM, BN_EPS
        )


class Dense:
    def __init__(self, ps, name, fin, fout, prng):
        self.w = ps.add_param(f"{name}.w", T.he_uniform_init((fin, fout), fin, prng, ps.dtype))
        self.b = ps.add_param(f"{name}.b", Tensor(np.zeros(fout, dtype=ps.np_dtype)))

    def __call__(self, x):
        return T.dense(x, self.w, self.b)


class InvertedResidual:
    """MobileNetV2-style block: 1x1 expand (BN, relu6) -> 3x3 depthwise
    (BN, relu6) -> 1x1 linear projection (BN); residual add when the block
    keeps stride 1 and channel count."""

    def __init__(self, ps, name, in_ch, expansion, out_ch, stride, prng):
        mid = expansion * in_ch
        self.expand = Conv(ps, f"{name}.expand.conv", in_ch, mid, 1, 1, 0, prng)
        self.expand_bn = BatchNorm(ps, f"{name}.expand.bn", mid)
        self.dw = DepthwiseConv(ps, f"{name}.dw.conv", mid, 3, stride, 1, prng)
        self.dw_bn = BatchNorm(ps, f"{name}.dw.bn", mid)
        self.project = Conv(ps, f"{name}.project.conv", mid, out_ch, 1, 1, 0, prng)
        self.project_bn = BatchNorm(ps, f"{name}.project.bn", out_ch)
        self.use_skip = stride == 1 and in_ch == out_ch

    def __call__(self, x, mode):
        h = T.activation(self.expand_bn(self.expand(x), mode), "relu6")
        h = T.activation(self.dw_bn(self.dw(h), mode), "relu6")
        h = self.project_bn(self.project(h), mode)
        if self.use_skip:
            h = T.add(h, x)
        return h


def build_inverted_residual(in_ch, spec, prng, dtype="f32", ps=None, name="block"):
    """Standalone inverted-residual block; ``spec`` is (t, c, s)."""
    t, c, s = spec
    if in_ch < 1 or t < 1 or c < 1 or s not in (1, 2):
        raise InvalidArgumentError("inverted residual needs in_ch,t,c >= 1 and s in {1,2}")
    if ps is None:
        ps = ParamSet(dtype)
    block = InvertedResidual(ps, name, in_ch, t, c, s, prng)
    block.param_set = ps
    return block


class MobileNetLite:
    feature_dim = FEATURE_DIM

    def __init__(self, ps, prefix, in_ch, input_hw, prng):
        _check_input_hw(input_hw)
        self.stem = Conv(ps, f"{prefix}.stem.conv", in_ch, MOBILENET_STEM_CH, 3, 2, 1, prng)
        self.stem_bn = BatchNorm(ps, f"{prefix}.stem.bn", MOBILENET_STEM_CH)
        self.blocks = []
        ch = MOBILENET_STEM_CH
        for si, (t, c, n, s) in enumerate(MOBILENET_STAGES, start=1):
            for bi in range(n):
                stride = s if bi == 0 else 1
                self.blocks.append(
                    InvertedResidual(ps, f"{prefix}.s{si}.b{bi}", ch, t, c, stride, prng)
                )
                ch = c
        self.head = Conv(ps, f"{prefix}.head.conv", ch, FEATURE_DIM, 1, 1, 0, prng)
        self.head_bn = BatchNorm(ps, f"{prefix}.head.bn", FEATURE_DIM)

    def __call__(self, x, mode):
        h = T.activation(self.stem_bn(self.stem(x), mode), "relu6")
        for block in self.blocks:
            h = block(h, mode)
        h = T.activation(self.head_bn(self.head(h), mode), "relu6")
        return T.global_avg_pool(h)


class VggLite:
    feature_dim = FEATURE_DIM

    def __init__(self, ps, prefix, in_ch, input_hw, prng):
        _check_input_hw(input_hw)
        self.convs = []
        ch = in_ch
        for si, out_ch in enumerate(VGG_STAGE_CHANNELS, start=1):
            for ci in range(2):
                self.convs.append(Conv(ps, f"{prefix}.s{si}.c{ci}", ch, out_ch, 3, 1, 1, prng, bias=True))
                ch = out_ch
        self.fc = Dense(ps, f"{prefix}.fc", ch, FEATURE_DIM, prng)

    def __call__(self, x, mode):
        h = x
        for i, conv in enumerate(self.convs):
            h = T.activation(conv(h), "relu")
            if i % 2 == 1:
                h = T.maxpool2d(h, 2, 2)
        h = T.global_avg_pool(h)
        return T.activation(self.fc(h), "relu")


_BACKBONES = {"mobilenet_lite": MobileNetLite, "vgg_lite": VggLite}


def _check_input_hw(hw: int):
    if hw < MIN_INPUT_HW:
        raise InvalidArgumentError(f"input size {hw} is below the minimum {MIN_INPUT_HW}")


def _check_kind(kind: str):
    if kind not in _BACKBONES:
        raise InvalidArgumentError(f"unknown backbone kind {kind!r}; expected one of {BACKBONE_KINDS}")


def build_mobilenet_lite(input_ch, input_hw, prng, dtype="f32", ps=None, prefix="backbone"):
    if ps is None:
        ps = ParamSet(dtype)
    bb = MobileNetLite(ps, prefix, input_ch, input_hw, prng)
    bb.param_set = ps
    return bb


def build_vgg_lite(input_ch, input_hw, prng, dtype="f32", ps=None, prefix="backbone"):
    if ps is None:
        ps = ParamSet(dtype)
    bb = VggLite(ps, prefix, input_ch, input_hw, prng)
    bb.param_set = ps
    return bb


class _Model:
    """Common state handling for the two model variants."""

    def __init__(self, ps, kind, image_hw, hidden):
        self.param_set = ps
        self.backbone = kind
        self.image_hw = image_hw
        self.hidden = hidden

    @property
    def params(self):
        return self.param_set.params

    @property
    def buffers(self):
        return self.param_set.buffers

    @property
    def dtype(self):
        return self.param_set.np_dtype

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, in registration order (checkpoint order)."""
        out = {name: t.data for name, t in self.params.items()}
        out.update(self.buffers)
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        expected = self.state_tensors()
        for name in expected:
            if name not in tensors:
                raise FormatError(f"checkpoint is missing tensor {name!r}")
        for name in tensors:
            if name not in expected:
                raise FormatError(f"checkpoint has unexpected tensor {name!r}")
        for name, t in self.params.items():
            src = tensors[name]
            if tuple(src.shape) != tuple(t.data.shape):
                raise FormatError(
                    f"tensor {name!r} has shape {tuple(src.shape)}, expected {tuple(t.data.shape)}"
                )
            t.data = np.ascontiguousarray(src.astype(self.dtype, copy=False))
        for name in self.buffers:
            src = tensors[name]
            if tuple(src.shape) != tuple(self.buffers[name].shape):
                raise FormatError(f"buffer {name!r} shape mismatch")
            self.buffers[name][...] = src


class MultiInputModel(_Model):
    arch = "multi"

    def __init__(self, kind, rgb_shape, sil_shape, hidden, prng, dtype):
        if rgb_shape[1:] != sil_shape[1:]:
            raise InvalidArgumentError(
                f"branch spatial shapes differ: {rgb_shape[1:]} vs {sil_shape[1:]}"
            )
        if rgb_shape[1] != rgb_shape[2]:
            raise InvalidArgumentError("square inputs expected")
        ps = ParamSet(dtype)
        super().__init__(ps, kind, rgb_shape[1], hidden)
        cls = _BACKBONES[kind]
        self.rgb_branch = cls(ps, "rgb", rgb_shape[0], rgb_shape[1], prng)
        self.sil_branch = cls(ps, "sil", sil_shape[0], sil_shape[1], prng)
        self.fc1 = Dense(ps, "head.fc1", 2 * FEATURE_DIM, hidden, prng)
        self.fc2 = Dense(ps, "head.fc2", hidden, 2, prng)

    def forward(self, rgb: Tensor, sil: Tensor, mode: str = "train") -> Tensor:
        if sil is None:
            raise InvalidArgumentError("multi-input model requires a silhouette batch")
        if rgb.data.shape[0] != sil.data.shape[0]:
            raise InvalidArgumentError("rgb and silhouette batch sizes differ")
        if rgb.data.shape[2:] != sil.data.shape[2:]:
            raise InvalidArgumentError("rgb and silhouette spatial shapes differ")
        rf = self.rgb_branch(rgb, mode)
        sf = self.sil_branch(sil, mode)
        h = T.activation(self.fc1(T.concat_features(rf, sf)), "relu")
        return self.fc2(h)


class SingleInputModel(_Model):
    arch = "single"

    def __init__(self, kind, rgb_shape, hidden, prng, dtype):
        if rgb_shape[1] != rgb_shape[2]:
            raise InvalidArgumentError("square inputs expected")
        ps = ParamSet(dtype)
        super().__init__(ps, kind, rgb_shape[1], hidden)
        cls = _BACKBONES[kind]
        self.rgb_branch = cls(ps, "rgb", rgb_shape[0], rgb_shape[1], prng)
        self.fc1 = Dense(ps, "head.fc1", FEATURE_DIM, hidden, prng)
        self.fc2 = Dense(ps, "head.fc2", hidden, 2, prng)

    def forward(self, rgb: Tensor, sil: Tensor | None = None, mode: str = "train") -> Tensor:
        h = T.activation(self.fc1(self.rgb_branch(rgb, mode)), "relu")
        return self.fc2(h)


def build_multi_input(kind, rgb_shape=(3, 64, 64), sil_shape=(1, 64, 64), hidden=128,
                      prng=None, dtype="f32") -> MultiInputModel:
    """Two independent backbones + fusion head. The RGB branch consumes the
    PRNG first, so a single-input build from the same seed shares its initial
    RGB-branch weights."""
    _check_kind(kind)
    if prng is None:
        prng = SplitMix64(0)
    return MultiInputModel(kind, tuple(rgb_shape), tuple(sil_shape), hidden, prng, dtype)


def build_single_input(kind, rgb_shape=(3, 64, 64), hidden=128, prng=None,
                       dtype="f32") -> SingleInputModel:
    _check_kind(kind)
    if prng is None:
        prng = SplitMix64(0)
    return SingleInputModel(kind, tuple(rgb_shape), hidden, prng, dtype)


def build_model(arch, kind, image_hw, hidden=128, prng=None, dtype="f32"):
    if arch == "multi":
        return build_multi_input(kind, (3, image_hw, image_hw), (1, image_hw, image_hw),
                                 hidden, prng, dtype)
    if arch == "single":
        return build_single_input(kind, (3, image_hw, image_hw), hidden, prng, dtype)
    raise InvalidArgumentError(f"unknown architecture {arch!r}; expected multi|single")


def model_forward(model, rgb: Tensor, sil: Tensor | None = None, mode: str = "train") -> Tensor:
    """Run a model; eval mode disables the tape and is a pure function."""
    if mode not in ("train", "eval"):
        raise InvalidArgumentError(f"mode must be train|eval, got {mode!r}")
    if model.arch == "multi" and sil is None:
        raise InvalidArgumentError("multi-input model requires a silhouette batch")
    if mode == "eval":
        with T.no_grad():
            return model.forward(rgb, sil, mode)
    return model.forward(rgb, sil, mode)


def param_count(model) -> int:
    """Total trainable scalars (batchnorm gamma/beta included, running stats not)."""
    return int(sum(t.data.size for t in model.params.values()))
