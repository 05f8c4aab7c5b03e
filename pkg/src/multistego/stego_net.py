"""Prep / hiding / reveal networks.

Every network is a stack of aggregated layers. An aggregated layer runs three
parallel convolutions (50 3x3, 10 4x4 and 5 5x5 filters, stride 1,
shape-preserving padding), applies ReLU to each and concatenates the results
into 65 channels. The hiding and reveal networks finish with a linear 1x1
projection to 3 channels.

Public forward functions take and return NHWC tensors; the modules work in
NCHW internally.
"""
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class BranchSpec:
    channel_counts: tuple = (50, 10, 5)
    kernel_sizes: tuple = (3, 4, 5)

    @property
    def out_channels(self):
        return sum(self.channel_counts)


@dataclass(frozen=True)
class NetworkSpec:
    k: int = 3
    prep_depth: int = 2
    hiding_depth: int = 5
    reveal_depth: int = 5
    branch: BranchSpec = field(default_factory=BranchSpec)
    image_channels: int = 3

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")

    @property
    def feature_channels(self):
        return self.branch.out_channels

    @property
    def hiding_in_channels(self):
        return self.image_channels + self.k * self.feature_channels

    def to_dict(self):
        d = asdict(self)
        d["branch"] = {k: list(v) for k, v in d["branch"].items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        b = d.pop("branch", {})
        branch = BranchSpec(**{k: tuple(v) for k, v in b.items()})
        return cls(branch=branch, **d)


def same_padding(kernel):
    """(before, after) padding that keeps the spatial size for stride 1."""
    before = (kernel - 1) // 2
    return before, kernel - 1 - before


class AggregatedConv(nn.Module):
    def __init__(self, in_channels, branch):
        super().__init__()
        self.kernel_sizes = tuple(branch.kernel_sizes)
        self.convs = nn.ModuleList(
            nn.Conv2d(in_channels, c, kernel_size=k, padding=0)
            for c, k in zip(branch.channel_counts, branch.kernel_sizes)
        )

    def forward(self, x):
        outs = []
        for conv, k in zip(self.convs, self.kernel_sizes):
            before, after = same_padding(k)
            if before == after:
                y = F.conv2d(x, conv.weight, conv.bias, padding=before)
            else:
                y = conv(F.pad(x, (before, after, before, after)))
            outs.append(F.relu(y))
        return torch.cat(outs, dim=1)


class ConvStack(nn.Module):
    """``depth`` aggregated layers, optionally followed by a 1x1 projection."""

    def __init__(self, in_channels, depth, branch, out_channels=None):
        super().__init__()
        layers = []
        c = in_channels
        for _ in range(depth):
            layers.append(AggregatedConv(c, branch))
            c = branch.out_channels
        self.layers = nn.Sequential(*layers)
        self.project = nn.Conv2d(c, out_channels, kernel_size=1) if out_channels else None

    def forward(self, x):
        x = self.layers(x)
        if self.project is not None:
            x = self.project(x)
        return x


class StegoNet(nn.Module):
    """All learnable parameters: k prep nets, one hiding net, k reveal nets."""

    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        b, c = spec.branch, spec.image_channels
        self.prep = nn.ModuleList(ConvStack(c, spec.prep_depth, b) for _ in range(spec.k))
        self.hiding = ConvStack(spec.hiding_in_channels, spec.hiding_depth, b, out_channels=c)
        self.reveal = nn.ModuleList(
            ConvStack(c, spec.reveal_depth, b, out_channels=c) for _ in range(spec.k)
        )

    @property
    def k(self):
        return self.spec.k

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def encoder_parameters(self):
        return [*self.prep.parameters(), *self.hiding.parameters()]

    def reveal_parameters(self):
        return list(self.reveal.parameters())

    def encode(self, cover, secrets):
        """NCHW encode: [cover | prep_1(s_1) | ... | prep_k(s_k)] -> hiding net."""
        feats = [cover] + [net(s) for net, s in zip(self.prep, secrets)]
        return self.hiding(torch.cat(feats, dim=1))

    def decode(self, container):
        return [net(container) for net in self.reveal]

    def forward(self, cover, secrets):
        container = self.encode(cover, secrets)
        return container, self.decode(container)


def param_shapes(spec):
    """Closed-form name -> shape map for a StegoNet built from ``spec``."""
    shapes = {}
    b, c, f = spec.branch, spec.image_channels, spec.feature_channels

    def stack(prefix, cin, depth, cout):
        for layer in range(depth):
            cin_l = cin if layer == 0 else f
            for j, (n, kk) in enumerate(zip(b.channel_counts, b.kernel_sizes)):
                shapes[f"{prefix}.layers.{layer}.convs.{j}.weight"] = (n, cin_l, kk, kk)
                shapes[f"{prefix}.layers.{layer}.convs.{j}.bias"] = (n,)
        if cout:
            shapes[f"{prefix}.project.weight"] = (cout, f, 1, 1)
            shapes[f"{prefix}.project.bias"] = (cout,)

    for i in range(spec.k):
        stack(f"prep.{i}", c, spec.prep_depth, None)
    stack("hiding", spec.hiding_in_channels, spec.hiding_depth, c)
    for i in range(spec.k):
        stack(f"reveal.{i}", c, spec.reveal_depth, c)
    return shapes


def init_params(spec, seed=0, dtype=torch.float32):
    """Build a StegoNet with seeded fan-in-scaled uniform weights and zero biases.

    ReLU layers use bound sqrt(6 / fan_in); the linear projections use
    sqrt(3 / fan_in).
    """
    model = StegoNet(spec).to(dtype)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
                continue
            fan_in = p.shape[1] * p.shape[2] * p.shape[3]
            gain = 3.0 if ".project." in name else 6.0
            bound = math.sqrt(gain / fan_in)
            p.copy_((torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound)
    return model


def _nchw(x):
    return x.permute(0, 3, 1, 2)


def _nhwc(x):
    return x.permute(0, 2, 3, 1)


def _check_image(x, channels, what):
    if x.ndim != 4 or x.shape[-1] != channels:
        raise ValueError(f"{what} must be (batch, height, width, {channels}), got {tuple(x.shape)}")


def prep_forward(prep, secret):
    """One prep network on a (B, H, W, 3) secret -> (B, H, W, 65) features."""
    _check_image(secret, 3, "secret")
    return _nhwc(prep(_nchw(secret)))


def encode_forward(model, batch):
    """Container image (B, H, W, 3) for a StegoBatch."""
    if batch.k != model.k:
        raise ValueError(f"model hides {model.k} secrets but batch has {batch.k}")
    _check_image(batch.cover, 3, "cover")
    return _nhwc(model.encode(_nchw(batch.cover), [_nchw(s) for s in batch.secrets]))


def reveal_forward(reveal, container):
    _check_image(container, 3, "container")
    return _nhwc(reveal(_nchw(container)))


def decode_all(model, container):
    """Decoded secrets in encoding order; element i comes from reveal net i."""
    return [reveal_forward(net, container) for net in model.reveal]
