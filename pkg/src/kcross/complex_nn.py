"""Complex-valued layer primitives and the complex U-Net.

All layers operate on :class:`ComplexTensor`, a pair of same-shape real
tensors treated as one complex array z = real + i*imag. Convolutions follow
the complex product rule for a filter W = A + iB:

    W * h = (A * x - B * y) + i(B * x + A * y)

while activations, batchnorm and upsampling act plane-wise (the same real
op applied independently to the real and imaginary planes). Everything is
built from torch autograd primitives, so gradients flow through both planes.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidArgumentError, ShapeError


class ComplexTensor:
    """Paired real/imaginary planes treated as a single complex array."""

    __slots__ = ("real", "imag")

    def __init__(self, real, imag):
        if real.shape != imag.shape:
            raise ShapeError(
                f"real/imag planes differ: {tuple(real.shape)} vs {tuple(imag.shape)}"
            )
        self.real = real
        self.imag = imag

    @property
    def shape(self):
        return self.real.shape

    def __add__(self, other):
        return ComplexTensor(self.real + other.real, self.imag + other.imag)

    def __sub__(self, other):
        return ComplexTensor(self.real - other.real, self.imag - other.imag)

    def conj(self):
        return ComplexTensor(self.real, -self.imag)

    def abs(self):
        """Elementwise modulus as a real tensor."""
        return torch.sqrt(self.real**2 + self.imag**2)

    def detach(self):
        return ComplexTensor(self.real.detach(), self.imag.detach())

    def clone(self):
        return ComplexTensor(self.real.clone(), self.imag.clone())

    def to(self, *args, **kwargs):
        return ComplexTensor(self.real.to(*args, **kwargs), self.imag.to(*args, **kwargs))

    def double(self):
        return self.to(torch.float64)

    def numpy(self):
        """Planes recombined into one numpy complex array."""
        r = self.real.detach().cpu().numpy()
        i = self.imag.detach().cpu().numpy()
        return r + 1j * i

    @staticmethod
    def from_numpy(values, dtype=torch.float32):
        values = np.asarray(values)
        real = torch.as_tensor(np.ascontiguousarray(values.real), dtype=dtype)
        imag = torch.as_tensor(np.ascontiguousarray(values.imag), dtype=dtype)
        return ComplexTensor(real, imag)

    @staticmethod
    def zeros(*shape, dtype=torch.float32):
        return ComplexTensor(torch.zeros(*shape, dtype=dtype), torch.zeros(*shape, dtype=dtype))


def _init_complex_pair(weight_a, weight_b, fan_in):
    # variance split across the two planes so |W| has unit-variance magnitude
    std = math.sqrt(1.0 / (2.0 * fan_in))
    with torch.no_grad():
        weight_a.normal_(0.0, std)
        weight_b.normal_(0.0, std)


def _check_channels(z, expected, who):
    if z.real.dim() != 4:
        raise ShapeError(f"{who} expects rank-4 input, got rank {z.real.dim()}")
    if z.real.shape[1] != expected:
        raise ShapeError(
            f"{who} expects {expected} input channels, got {z.real.shape[1]}",
            axis="channel",
        )


class ComplexConv2d(nn.Module):
    """2D convolution with a complex filter W = A + iB and complex bias."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight_a = nn.Parameter(torch.empty(shape))
        self.weight_b = nn.Parameter(torch.empty(shape))
        if bias:
            self.bias_real = nn.Parameter(torch.zeros(out_channels))
            self.bias_imag = nn.Parameter(torch.zeros(out_channels))
        else:
            self.register_parameter("bias_real", None)
            self.register_parameter("bias_imag", None)
        _init_complex_pair(self.weight_a, self.weight_b, in_channels * kernel_size**2)

    def forward(self, z):
        _check_channels(z, self.in_channels, "ComplexConv2d")
        h, w = z.real.shape[2], z.real.shape[3]
        if h + 2 * self.padding < self.kernel_size:
            raise ShapeError(
                f"input height {h} too small for kernel {self.kernel_size}", axis="height"
            )
        if w + 2 * self.padding < self.kernel_size:
            raise ShapeError(
                f"input width {w} too small for kernel {self.kernel_size}", axis="width"
            )
        real = F.conv2d(z.real, self.weight_a, self.bias_real, self.stride, self.padding) - F.conv2d(
            z.imag, self.weight_b, None, self.stride, self.padding
        )
        imag = F.conv2d(z.real, self.weight_b, self.bias_imag, self.stride, self.padding) + F.conv2d(
            z.imag, self.weight_a, None, self.stride, self.padding
        )
        return ComplexTensor(real, imag)


class ComplexConvTranspose2d(nn.Module):
    """Transposed convolution with the same A/B plane decomposition."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0, bias=True):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        shape = (in_channels, out_channels, kernel_size, kernel_size)
        self.weight_a = nn.Parameter(torch.empty(shape))
        self.weight_b = nn.Parameter(torch.empty(shape))
        if bias:
            self.bias_real = nn.Parameter(torch.zeros(out_channels))
            self.bias_imag = nn.Parameter(torch.zeros(out_channels))
        else:
            self.register_parameter("bias_real", None)
            self.register_parameter("bias_imag", None)
        _init_complex_pair(self.weight_a, self.weight_b, in_channels * kernel_size**2)

    def forward(self, z):
        _check_channels(z, self.in_channels, "ComplexConvTranspose2d")
        real = F.conv_transpose2d(
            z.real, self.weight_a, self.bias_real, self.stride, self.padding
        ) - F.conv_transpose2d(z.imag, self.weight_b, None, self.stride, self.padding)
        imag = F.conv_transpose2d(
            z.real, self.weight_b, self.bias_imag, self.stride, self.padding
        ) + F.conv_transpose2d(z.imag, self.weight_a, None, self.stride, self.padding)
        return ComplexTensor(real, imag)


class ComplexLinear(nn.Module):
    """Dense layer with a complex weight matrix, same product rule as conv."""

    def __init__(self, in_features, out_features, bias=True):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight_a = nn.Parameter(torch.empty(out_features, in_features))
        self.weight_b = nn.Parameter(torch.empty(out_features, in_features))
        if bias:
            self.bias_real = nn.Parameter(torch.zeros(out_features))
            self.bias_imag = nn.Parameter(torch.zeros(out_features))
        else:
            self.register_parameter("bias_real", None)
            self.register_parameter("bias_imag", None)
        _init_complex_pair(self.weight_a, self.weight_b, in_features)

    def forward(self, z):
        if z.real.shape[-1] != self.in_features:
            raise ShapeError(
                f"ComplexLinear expects {self.in_features} features, got {z.real.shape[-1]}",
                axis="feature",
            )
        real = F.linear(z.real, self.weight_a, self.bias_real) - F.linear(
            z.imag, self.weight_b, None
        )
        imag = F.linear(z.real, self.weight_b, self.bias_imag) + F.linear(
            z.imag, self.weight_a, None
        )
        return ComplexTensor(real, imag)


def complex_relu(z):
    return ComplexTensor(F.relu(z.real), F.relu(z.imag))


def complex_leaky_relu(z, negative_slope=0.2):
    return ComplexTensor(
        F.leaky_relu(z.real, negative_slope), F.leaky_relu(z.imag, negative_slope)
    )


def complex_tanh(z):
    return ComplexTensor(torch.tanh(z.real), torch.tanh(z.imag))


def complex_activation(z, kind, negative_slope=0.2):
    """Plane-wise activation; kind is one of relu / leaky_relu / tanh."""
    if kind == "relu":
        return complex_relu(z)
    if kind == "leaky_relu":
        return complex_leaky_relu(z, negative_slope)
    if kind == "tanh":
        return complex_tanh(z)
    raise InvalidArgumentError(f"unknown activation kind: {kind!r}")


class ComplexReLU(nn.Module):
    def forward(self, z):
        return complex_relu(z)


class ComplexLeakyReLU(nn.Module):
    def __init__(self, negative_slope=0.2):
        super().__init__()
        self.negative_slope = negative_slope

    def forward(self, z):
        return complex_leaky_relu(z, self.negative_slope)


class ComplexTanh(nn.Module):
    def forward(self, z):
        return complex_tanh(z)


class ComplexBatchNorm2d(nn.Module):
    """Plane-wise batchnorm: separate scale/shift and running stats per plane."""

    def __init__(self, num_features, eps=1e-5, momentum=0.1):
        super().__init__()
        self.bn_real = nn.BatchNorm2d(num_features, eps=eps, momentum=momentum)
        self.bn_imag = nn.BatchNorm2d(num_features, eps=eps, momentum=momentum)

    def forward(self, z):
        if self.training and z.real.shape[0] < 2:
            raise ConfigurationError(
                "batch normalization in training mode needs batch size >= 2, "
                f"got {z.real.shape[0]}"
            )
        return ComplexTensor(self.bn_real(z.real), self.bn_imag(z.imag))


class ComplexUpsample(nn.Module):
    """Nearest-neighbor upsampling applied to each plane."""

    def __init__(self, factor):
        super().__init__()
        if not isinstance(factor, int) or factor < 1:
            raise InvalidArgumentError(f"upsample factor must be an integer >= 1, got {factor!r}")
        self.factor = factor

    def forward(self, z):
        if self.factor == 1:
            return ComplexTensor(z.real, z.imag)
        return ComplexTensor(
            F.interpolate(z.real, scale_factor=self.factor, mode="nearest"),
            F.interpolate(z.imag, scale_factor=self.factor, mode="nearest"),
        )


@dataclass
class ComplexUNetSpec:
    """Desk-scale complex U-Net layout.

    Down blocks: ComplexConv2d (kernel 4, stride 2, pad 1) -> batchnorm ->
    leaky ReLU. Up blocks: transpose conv -> batchnorm -> ReLU. The head is
    upsample -> 3x3 conv -> tanh, so the decoder mirrors the encoder's
    spatial dims and the final output matches the input shape.
    """

    depth: int = 3
    base_channels: int = 16
    in_channels: int = 1
    kernel_size: int = 4
    stride: int = 2
    padding: int = 1
    negative_slope: float = 0.2

    def channels(self):
        return [self.base_channels * 2**i for i in range(self.depth)]


class _DownBlock(nn.Module):
    def __init__(self, c_in, c_out, spec):
        super().__init__()
        self.conv = ComplexConv2d(c_in, c_out, spec.kernel_size, spec.stride, spec.padding)
        self.bn = ComplexBatchNorm2d(c_out)
        self.act = ComplexLeakyReLU(spec.negative_slope)

    def forward(self, z):
        return self.act(self.bn(self.conv(z)))


class _UpBlock(nn.Module):
    def __init__(self, c_in, c_out, spec):
        super().__init__()
        self.conv = ComplexConvTranspose2d(c_in, c_out, spec.kernel_size, spec.stride, spec.padding)
        self.bn = ComplexBatchNorm2d(c_out)
        self.act = ComplexReLU()

    def forward(self, z):
        return self.act(self.bn(self.conv(z)))


class ComplexUNet(nn.Module):
    """Spectrum encoder/decoder; keeps every encoder feature map for the
    frequency loss."""

    def __init__(self, spec: ComplexUNetSpec | None = None):
        super().__init__()
        self.spec = spec or ComplexUNetSpec()
        chans = self.spec.channels()
        downs = []
        c_prev = self.spec.in_channels
        for c in chans:
            downs.append(_DownBlock(c_prev, c, self.spec))
            c_prev = c
        self.downs = nn.ModuleList(downs)
        ups = []
        for i in range(len(chans) - 1, 0, -1):
            ups.append(_UpBlock(chans[i], chans[i - 1], self.spec))
        self.ups = nn.ModuleList(ups)
        self.head_upsample = ComplexUpsample(self.spec.stride)
        self.head_conv = ComplexConv2d(chans[0], self.spec.in_channels, 3, 1, 1)
        self.head_act = ComplexTanh()

    def _check_input(self, z):
        _check_channels(z, self.spec.in_channels, "ComplexUNet")
        div = self.spec.stride**self.spec.depth
        h, w = z.real.shape[2], z.real.shape[3]
        if h % div or w % div:
            raise ShapeError(
                f"spatial dims ({h}, {w}) must be divisible by {div}; "
                f"pad to ({math.ceil(h / div) * div}, {math.ceil(w / div) * div})"
            )

    def encode(self, z):
        """Encoder features, one per down block (shallow to deep)."""
        self._check_input(z)
        feats = []
        h = z
        for block in self.downs:
            h = block(h)
            feats.append(h)
        return feats

    def forward(self, z):
        """Returns (reconstruction, per-layer encoder features)."""
        feats = self.encode(z)
        h = feats[-1]
        for block in self.ups:
            h = block(h)
        h = self.head_act(self.head_conv(self.head_upsample(h)))
        return h, feats
