"""Network architectures: the two encoders, the decoder, and the combined
model with its part-classifier basis.

Both encoders are unpretrained residual trunks truncated before the fourth
stage, with the third stage kept at stride 1 so the output grid is exactly
image_size/4. The stem omits the usual max-pool for the same reason: with
it, the truncated trunk could not hit the /4 resolution contract. The
appearance encoder uses the deeper (3,4,6)-block trunk, the segmentation
encoder the (2,2,2)-block one plus a 1x1 projection to K+1 channels.

``width_mult`` scales every channel count; 1.0 reproduces the full-size
stack (stage widths 64/128/256, so the appearance dimension L is 256).
Desk-scale configurations shrink it to keep CPU runs tractable.
"""

from __future__ import annotations

import torch
from torch import nn

from .bottleneck import ModelDims, normalize_channels
from .errors import InvalidInputError

STAGE_WIDTHS = (64, 128, 256)
APPEARANCE_BLOCKS = (3, 4, 6)
SEGMENTATION_BLOCKS = (2, 2, 2)


def _width(base: int, mult: float) -> int:
    return max(4, int(round(base * mult)))


class BasicBlock(nn.Module):
    """Two 3x3 convs with batch norm and an additive skip connection."""

    def __init__(self, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or cin != cout:
            self.downsample = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout)
            )
        else:
            self.downsample = None

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + identity)


class ResidualTrunk(nn.Module):
    """Stem + three residual stages; total stride 4, stage 3 at stride 1."""

    def __init__(self, blocks: tuple[int, int, int], width_mult: float = 1.0):
        super().__init__()
        widths = [_width(w, width_mult) for w in STAGE_WIDTHS]
        self.out_channels = widths[2]
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        self.stage1 = self._stage(widths[0], widths[0], blocks[0], stride=1)
        self.stage2 = self._stage(widths[0], widths[1], blocks[1], stride=2)
        self.stage3 = self._stage(widths[1], widths[2], blocks[2], stride=1)

    @staticmethod
    def _stage(cin: int, cout: int, n_blocks: int, stride: int) -> nn.Sequential:
        layers = [BasicBlock(cin, cout, stride=stride)]
        layers += [BasicBlock(cout, cout) for _ in range(n_blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, x):
        return self.stage3(self.stage2(self.stage1(self.stem(x))))


class Decoder(nn.Module):
    """Seven conv blocks from the grid back to image resolution.

    Blocks 2 and 4 are 4x4 transposed convs giving the two 2x upsamplings;
    the rest are 3x3 convs. Every block carries batch norm and ReLU; a final
    3x3 conv maps to 3 channels with no output activation (training targets
    are [0,1] images, the perceptual extractor normalizes internally).
    """

    def __init__(self, in_channels: int, width_mult: float = 1.0):
        super().__init__()
        taper = [256, 128, 128, 64, 64, 32, 32]
        widths = [_width(w, width_mult) for w in taper]
        upsample_at = (1, 3)  # zero-based positions of blocks 2 and 4
        blocks = []
        cin = in_channels
        for i, cout in enumerate(widths):
            if i in upsample_at:
                conv = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1, bias=False)
            else:
                conv = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
            blocks.append(nn.Sequential(conv, nn.BatchNorm2d(cout), nn.ReLU(inplace=True)))
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Conv2d(cin, 3, 3, padding=1)
        self.in_channels = in_channels

    def forward(self, x):
        return self.head(self.blocks(x))


class PartModel(nn.Module):
    """Appearance encoder, segmentation encoder, decoder, and classifier basis."""

    def __init__(self, k: int, image_size: int = 128, width_mult: float = 1.0):
        super().__init__()
        self.appearance = ResidualTrunk(APPEARANCE_BLOCKS, width_mult)
        trunk = ResidualTrunk(SEGMENTATION_BLOCKS, width_mult)
        self.segmentation = nn.Sequential(trunk, nn.Conv2d(trunk.out_channels, k + 1, 1))
        l = self.appearance.out_channels
        self.decoder = Decoder(l + 2, width_mult)
        self.class_basis = nn.Parameter(torch.zeros(k, l))
        self.dims = ModelDims(
            k=k, l=l, grid_h=image_size // 4, grid_w=image_size // 4, image_size=image_size
        )
        self.width_mult = width_mult

    def _check_image(self, x: torch.Tensor):
        sz = self.dims.image_size
        if x.dim() not in (3, 4) or x.shape[-3] != 3 or x.shape[-2:] != (sz, sz):
            raise InvalidInputError(
                f"expected [.., 3, {sz}, {sz}] image, got {tuple(x.shape)}"
            )

    def encode_appearance(self, x: torch.Tensor) -> torch.Tensor:
        self._check_image(x)
        batched = x.dim() == 4
        out = self.appearance(x if batched else x.unsqueeze(0))
        return out if batched else out.squeeze(0)

    def encode_segmentation(self, x: torch.Tensor) -> torch.Tensor:
        """Channel-normalized part probability map for the image."""
        self._check_image(x)
        batched = x.dim() == 4
        logits = self.segmentation(x if batched else x.unsqueeze(0))
        probs = normalize_channels(logits)
        return probs if batched else probs.squeeze(0)

    def decode(self, feats: torch.Tensor) -> torch.Tensor:
        expected = self.decoder.in_channels
        if feats.dim() not in (3, 4) or feats.shape[-3] != expected:
            raise InvalidInputError(
                f"decoder expects {expected} channels, got {tuple(feats.shape)}"
            )
        batched = feats.dim() == 4
        out = self.decoder(feats if batched else feats.unsqueeze(0))
        return out if batched else out.squeeze(0)


def init_all(model: nn.Module, seed: int, sigma: float = 0.01) -> nn.Module:
    """Gaussian(0, sigma^2) weights, zero biases, identity batch norms.

    Deterministic under the seed: parameters are visited in registration
    order and drawn from a dedicated generator.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                module.weight.copy_(torch.randn(module.weight.shape, generator=gen) * sigma)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.BatchNorm2d):
                module.weight.fill_(1.0)
                module.bias.zero_()
                module.running_mean.zero_()
                module.running_var.fill_(1.0)
        if isinstance(model, PartModel):
            model.class_basis.copy_(
                torch.randn(model.class_basis.shape, generator=gen) * sigma
            )
    return model


def gaussian_weight_tensors(model: nn.Module) -> list[torch.Tensor]:
    """The weights that init_all draws from the Gaussian (for init audits)."""
    out = []
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            out.append(module.weight)
    if isinstance(model, PartModel):
        out.append(model.class_basis)
    return out
