import torch
import torch.nn.functional as F
from torch import nn

from .latents import ConditionedPixelMap, Conditioning, LatentBank


def _conv(c_in, c_out, stride=1):
    return nn.Sequential(nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1), nn.ReLU())


class FeatureUNet(nn.Module):
    """Encoder-decoder feature extractor with a DLM at every decoder level.

    At each decoder level the coarse map is transformed as ``x + DLM(x) [+ S]``
    before being upsampled and fused with the skip connection.  When the DLM
    toggle is off the transform is skipped; the ARM residue ``S`` (if given)
    is added at the coarsest level either way.
    """

    def __init__(self, bank: LatentBank, out_channels: int, base: int = 16, depth: int = 2,
                 use_dlm: bool = True, seed: int = 0):
        super().__init__()
        chans = [base * 2 ** i for i in range(depth + 1)]
        self.chans = chans
        self.enc = nn.ModuleList([nn.Sequential(_conv(3, chans[0]), _conv(chans[0], chans[0]))])
        for i in range(1, depth + 1):
            self.enc.append(nn.Sequential(_conv(chans[i - 1], chans[i], stride=2), _conv(chans[i], chans[i])))
        self.use_dlm = use_dlm
        self.dlm = nn.ModuleList()
        self.dec = nn.ModuleList()
        for i in range(depth, 0, -1):
            if use_dlm:
                self.dlm.append(ConditionedPixelMap(bank, f"unet.dec{i}", chans[i], chans[i], True,
                                                    bias=False, seed=seed + i))
            self.dec.append(_conv(chans[i] + chans[i - 1], chans[i - 1]))
        self.out = nn.Conv2d(chans[0], out_channels, 1)

    @property
    def coarse_channels(self) -> int:
        return self.chans[-1]

    def forward(self, images: torch.Tensor, cond: Conditioning, residue=None) -> torch.Tensor:
        """``images``: N x 3 x H x W -> N x out_channels x H x W."""
        skips = []
        x = images
        for stage in self.enc:
            x = stage(x)
            skips.append(x)
        x = skips.pop()
        for level, dec in enumerate(self.dec):
            if self.use_dlm:
                x = x + self.dlm[level](x, cond)
            if level == 0 and residue is not None:
                x = x + residue[None, :, None, None]
            skip = skips.pop()
            x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            x = dec(torch.cat([x, skip], 1))
        return self.out(x)
