"""Generator and discriminator networks (StarGAN layout at desk scale).

Tensors are NCHW with values in [-1, 1]; the H x W x 3 image convention of
the dataset layer is converted at the data boundary.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import ShapeMismatch

ALLOWED_SIZES = (32, 64, 128)


def check_image_batch(x, image_size):
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != image_size or x.shape[3] != image_size:
        raise ShapeMismatch(
            f"expected images of shape (B, 3, {image_size}, {image_size}), got {tuple(x.shape)}")


def check_codes(c, batch, num_classes):
    if c.dim() != 2 or c.shape[0] != batch or c.shape[1] != num_classes:
        raise ShapeMismatch(f"expected target codes of shape ({batch}, {num_classes}), got {tuple(c.shape)}")
    ones = (c == 1).sum(dim=1)
    zeros = (c == 0).sum(dim=1)
    if not bool(((ones == 1) & (ones + zeros == num_classes)).all()):
        raise ShapeMismatch("target codes must be one-hot")


def spatial_broadcast_concat(x, c):
    """Tile ``c`` (B, C) over H x W and append it to ``x`` channel-wise."""
    if x.dim() != 4 or c.dim() != 2 or x.shape[0] != c.shape[0]:
        raise ShapeMismatch(f"cannot broadcast codes {tuple(c.shape)} onto images {tuple(x.shape)}")
    tiled = c.to(x.dtype)[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
    return torch.cat([x, tiled], dim=1)


class ResidualBlock(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.main = nn.Sequential(
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(dim, dim, 3, 1, 1, bias=False),
            nn.InstanceNorm2d(dim, affine=True),
        )

    def forward(self, x):
        return x + self.main(x)


class Generator(nn.Module):
    """Encoder / residual bottleneck / decoder translating ``x`` to class ``c``.

    Args:
        num_classes: length of the one-hot target code.
        image_size: input resolution (square).
        conv_dim: channels of the first layer; doubled per down-sampling.
        n_down: number of stride-2 down- (and up-) sampling stages.
        n_res: residual blocks in the bottleneck.
    """

    def __init__(self, num_classes, image_size=32, conv_dim=16, n_down=2, n_res=4):
        super().__init__()
        if image_size not in ALLOWED_SIZES:
            raise ValueError(f"image_size must be one of {ALLOWED_SIZES}")
        self.num_classes = num_classes
        self.image_size = image_size

        layers = [
            nn.Conv2d(3 + num_classes, conv_dim, 7, 1, 3, bias=False),
            nn.InstanceNorm2d(conv_dim, affine=True),
            nn.ReLU(inplace=True),
        ]
        dim = conv_dim
        for _ in range(n_down):
            layers += [
                nn.Conv2d(dim, dim * 2, 4, 2, 1, bias=False),
                nn.InstanceNorm2d(dim * 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            dim *= 2
        layers += [ResidualBlock(dim) for _ in range(n_res)]
        for _ in range(n_down):
            layers += [
                nn.ConvTranspose2d(dim, dim // 2, 4, 2, 1, bias=False),
                nn.InstanceNorm2d(dim // 2, affine=True),
                nn.ReLU(inplace=True),
            ]
            dim //= 2
        layers += [nn.Conv2d(dim, 3, 7, 1, 3, bias=False), nn.Tanh()]
        self.main = nn.Sequential(*layers)

    def forward(self, x, c):
        check_image_batch(x, self.image_size)
        check_codes(c, x.shape[0], self.num_classes)
        return self.main(spatial_broadcast_concat(x, c))


class Discriminator(nn.Module):
    """Strided conv trunk with a realness branch and an embedding branch.

    The realness branch emits a patch map of logits whose mean goes
    through a sigmoid; the embedding branch collapses the final feature map
    to a length ``embed_dim`` vector that feeds the classifier head.
    """

    def __init__(self, image_size=32, conv_dim=16, n_strided=4, embed_dim=128):
        super().__init__()
        if image_size not in ALLOWED_SIZES:
            raise ValueError(f"image_size must be one of {ALLOWED_SIZES}")
        if image_size >> n_strided < 1:
            raise ValueError("too many strided stages for the input resolution")
        self.image_size = image_size
        self.embed_dim = embed_dim

        layers = []
        in_dim, dim = 3, conv_dim
        for _ in range(n_strided):
            layers += [nn.Conv2d(in_dim, dim, 4, 2, 1), nn.LeakyReLU(0.01)]
            in_dim, dim = dim, dim * 2
        self.main = nn.Sequential(*layers)
        final = image_size >> n_strided
        self.src = nn.Conv2d(in_dim, 1, 3, 1, 1, bias=False)
        self.emb = nn.Conv2d(in_dim, embed_dim, final, bias=False)
        self.reset_parameters()

    def reset_parameters(self):
        # He init keeps trunk activations at unit scale; PyTorch's default
        # shrinks them layer by layer, which starves the realness logit.
        for layer in self.main:
            if isinstance(layer, nn.Conv2d):
                nn.init.kaiming_normal_(layer.weight, a=0.01, nonlinearity="leaky_relu")
                nn.init.zeros_(layer.bias)
        for layer in (self.src, self.emb):
            nn.init.kaiming_normal_(layer.weight, nonlinearity="linear")

    def score(self, x):
        """Return ``(realness logit, embedding)``."""
        check_image_batch(x, self.image_size)
        h = self.main(x)
        logit = self.src(h).mean(dim=(1, 2, 3))
        return logit, self.emb(h).flatten(1)

    def forward(self, x):
        logit, embedding = self.score(x)
        return torch.sigmoid(logit), embedding


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
