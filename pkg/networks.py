"""Single-channel ResNet generators and PatchGAN discriminators."""

import functools
import hashlib
import logging
from dataclasses import asdict, dataclass

import torch
from torch import nn
from torch.nn import init

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GeneratorArch:
    kind: str = "resnet"
    ngf: int = 64
    n_blocks: int = 9
    n_downsampling: int = 2
    padding: str = "reflect"

    @property
    def size_multiple(self):
        """Input dims must be divisible by this for the output to match the input."""
        return 2 ** self.n_downsampling if self.kind == "resnet" else 1

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class DiscriminatorArch:
    ndf: int = 64
    n_layers: int = 3

    def score_map_size(self, size):
        """Side of the logit map for one input side; 0 when a conv would see fewer pixels than its kernel."""
        for _ in range(self.n_layers):
            if size + 2 < 4:
                return 0
            size = (size - 2) // 2 + 1
        for _ in range(2):
            if size + 2 < 4:
                return 0
            size -= 1
        return size

    def to_dict(self):
        return asdict(self)


norm_layer = functools.partial(nn.InstanceNorm2d, affine=False, track_running_stats=False)


class ResnetBlock(nn.Module):
    """Two 3x3 conv layers with a skip connection."""

    def __init__(self, dim, padding):
        super().__init__()
        layers = []
        for index in range(2):
            conv_padding = 0
            if padding == "reflect":
                layers.append(nn.ReflectionPad2d(1))
            elif padding == "replicate":
                layers.append(nn.ReplicationPad2d(1))
            elif padding == "zero":
                conv_padding = 1
            else:
                raise NotImplementedError(f"padding [{padding}] is not implemented")
            layers += [nn.Conv2d(dim, dim, kernel_size=3, padding=conv_padding, bias=True), norm_layer(dim)]
            if index == 0:
                layers.append(nn.ReLU(True))
        self.conv_block = nn.Sequential(*layers)

    def forward(self, x):
        return x + self.conv_block(x)


class ResnetGenerator(nn.Module):
    """c7s1-ngf, n_downsampling stride-2 convs, n_blocks residual blocks, mirrored upsampling, tanh output."""

    def __init__(self, arch):
        super().__init__()
        ngf = arch.ngf
        model = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(1, ngf, kernel_size=7, padding=0, bias=True),
            norm_layer(ngf),
            nn.ReLU(True),
        ]
        for index in range(arch.n_downsampling):
            mult = 2 ** index
            model += [
                nn.Conv2d(ngf * mult, ngf * mult * 2, kernel_size=3, stride=2, padding=1, bias=True),
                norm_layer(ngf * mult * 2),
                nn.ReLU(True),
            ]
        mult = 2 ** arch.n_downsampling
        model += [ResnetBlock(ngf * mult, arch.padding) for _ in range(arch.n_blocks)]
        for index in range(arch.n_downsampling):
            mult = 2 ** (arch.n_downsampling - index)
            model += [
                nn.ConvTranspose2d(
                    ngf * mult, ngf * mult // 2, kernel_size=3, stride=2, padding=1, output_padding=1, bias=True
                ),
                norm_layer(ngf * mult // 2),
                nn.ReLU(True),
            ]
        model += [nn.ReflectionPad2d(3), nn.Conv2d(ngf, 1, kernel_size=7, padding=0), nn.Tanh()]
        self.model = nn.Sequential(*model)

    def forward(self, x):
        return self.model(x)


class IdentityGenerator(nn.Module):
    """Pass-through generator; restoring with it leaves sections untouched."""

    def forward(self, x):
        return x


class NLayerDiscriminator(nn.Module):
    """PatchGAN discriminator emitting a grid of real/fake logits."""

    def __init__(self, arch):
        super().__init__()
        ndf = arch.ndf
        sequence = [nn.Conv2d(1, ndf, kernel_size=4, stride=2, padding=1), nn.LeakyReLU(0.2, True)]
        nf_mult = 1
        for n in range(1, arch.n_layers):
            nf_mult_prev, nf_mult = nf_mult, min(2 ** n, 8)
            sequence += [
                nn.Conv2d(ndf * nf_mult_prev, ndf * nf_mult, kernel_size=4, stride=2, padding=1, bias=True),
                norm_layer(ndf * nf_mult),
                nn.LeakyReLU(0.2, True),
            ]
        nf_mult_prev, nf_mult = nf_mult, min(2 ** arch.n_layers, 8)
        sequence += [
            nn.Conv2d(ndf * nf_mult_prev, ndf * nf_mult, kernel_size=4, stride=1, padding=1, bias=True),
            norm_layer(ndf * nf_mult),
            nn.LeakyReLU(0.2, True),
            nn.Conv2d(ndf * nf_mult, 1, kernel_size=4, stride=1, padding=1),
        ]
        self.model = nn.Sequential(*sequence)

    def forward(self, x):
        return self.model(x)


def init_weights(net, init_gain=0.02):
    """N(0, init_gain) conv weights and zero biases."""

    def init_func(m):
        classname = m.__class__.__name__
        if hasattr(m, "weight") and m.weight is not None and classname.find("Conv") != -1:
            init.normal_(m.weight.data, 0.0, init_gain)
            if getattr(m, "bias", None) is not None:
                init.constant_(m.bias.data, 0.0)

    net.apply(init_func)
    return net


def define_generator(arch):
    if arch.kind == "identity":
        return IdentityGenerator()
    if arch.kind != "resnet":
        raise NotImplementedError(f"generator kind [{arch.kind}] is not implemented")
    return init_weights(ResnetGenerator(arch))


def define_discriminator(arch):
    return init_weights(NLayerDiscriminator(arch))


def count_parameters(net):
    return sum(p.numel() for p in net.parameters())


def set_requires_grad(nets, requires_grad):
    for net in nets:
        for param in net.parameters():
            param.requires_grad = requires_grad


def parameter_digest(net):
    """Stable fingerprint of all parameter values, for change detection."""
    digest = hashlib.md5()
    for name, tensor in sorted(net.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
