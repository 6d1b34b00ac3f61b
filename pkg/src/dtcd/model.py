"""Dual-task Siamese change detection network.

One shared squeeze-and-excitation residual encoder runs on both acquisition
epochs, a pyramid-pooling center block widens the receptive field of the
deepest maps, a change decoder consumes the fused center features plus paired
skips (optionally passing each stage through dual attention), and a shared
segmentation decoder produces one building mask per epoch. All heads emit
probabilities through a logistic activation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import ModelConfig
from .errors import AttentionBudgetError, ConfigurationError, ShapeError


@dataclass
class FeaturePyramid:
    """The five encoder stages, shallow to deep; spatial size halves per stage."""

    stages: tuple[torch.Tensor, ...]

    def __post_init__(self):
        if len(self.stages) != 5:
            raise ShapeError(f"expected 5 pyramid stages, got {len(self.stages)}")
        for shallow, deep in zip(self.stages, self.stages[1:]):
            if shallow.shape[-1] != 2 * deep.shape[-1] or shallow.shape[-2] != 2 * deep.shape[-2]:
                raise ShapeError("pyramid spatial size must halve at each stage")

    def __iter__(self):
        return iter(self.stages)


@dataclass
class ModelOutput:
    """Forward products: full-resolution change probabilities, optional
    deep-supervision maps (deepest first), optional per-epoch segmentations."""

    change_prob: torch.Tensor
    change_aux: list[torch.Tensor] = field(default_factory=list)
    seg_prob_t1: torch.Tensor | None = None
    seg_prob_t2: torch.Tensor | None = None


class SqueezeExcite(nn.Module):
    """Per-channel recalibration: global average pool -> bottleneck
    (C -> C/r -> C) -> logistic gate -> scale."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        if channels % reduction != 0:
            raise ConfigurationError(f"channels {channels} not divisible by reduction {reduction}")
        hidden = channels // reduction
        self.squeeze = nn.Conv2d(channels, hidden, kernel_size=1)
        self.excite = nn.Conv2d(hidden, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(2, 3), keepdim=True)
        gate = torch.sigmoid(self.excite(F.relu(self.squeeze(pooled))))
        return x * gate


class SEResidualBlock(nn.Module):
    """Basic 3x3 residual block whose residual branch ends with SE gating."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, reduction: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.se = SqueezeExcite(out_ch, reduction)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False), nn.BatchNorm2d(out_ch)
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.se(self.bn2(self.conv2(out)))
        return F.relu(out + self.shortcut(x))


class SiameseEncoder(nn.Module):
    """Five-stage SE residual encoder; one instance serves both epochs.

    Stage 1 is the stride-2 stem, stage 2 follows a stride-2 max-pool, and
    stages 3-5 each open with a stride-2 residual block, so a 256-pixel tile
    yields maps of spatial size 128/64/32/16/8.
    """

    def __init__(self, cfg, input_channels: int = 3):
        super().__init__()
        c = cfg.stage_channels
        b = cfg.blocks_per_stage
        r = cfg.se_reduction
        self.stem = nn.Sequential(
            nn.Conv2d(input_channels, c[0], 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(c[0]),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        self.layer2 = self._make_stage(c[0], c[1], b[0], stride=1, reduction=r)
        self.layer3 = self._make_stage(c[1], c[2], b[1], stride=2, reduction=r)
        self.layer4 = self._make_stage(c[2], c[3], b[2], stride=2, reduction=r)
        self.layer5 = self._make_stage(c[3], c[4], b[3], stride=2, reduction=r)

    @staticmethod
    def _make_stage(in_ch, out_ch, blocks, stride, reduction):
        layers = [SEResidualBlock(in_ch, out_ch, stride, reduction)]
        layers += [SEResidualBlock(out_ch, out_ch, 1, reduction) for _ in range(blocks - 1)]
        return nn.Sequential(*layers)

    def forward(self, img: torch.Tensor) -> FeaturePyramid:
        if img.ndim != 4:
            raise ShapeError(f"expected a 4-D batch, got shape {tuple(img.shape)}")
        h, w = img.shape[-2:]
        if h % 32 != 0 or w % 32 != 0:
            raise ShapeError(f"input spatial size {h}x{w} must be divisible by 32")
        s1 = self.stem(img)
        s2 = self.layer2(self.pool(s1))
        s3 = self.layer3(s2)
        s4 = self.layer4(s3)
        s5 = self.layer5(s4)
        return FeaturePyramid((s1, s2, s3, s4, s5))


class PyramidPoolingCenter(nn.Module):
    """Center block: pool the deepest map to each bin size, project, upsample,
    concatenate with the input, and fuse back to the input channel count."""

    def __init__(self, channels: int, bins: tuple[int, ...]):
        super().__init__()
        self.bins = tuple(bins)
        if channels % len(self.bins) != 0:
            raise ConfigurationError(
                f"channel count {channels} not divisible by the {len(self.bins)} pyramid branches"
            )
        branch_ch = channels // len(self.bins)
        self.projections = nn.ModuleList(
            [nn.Conv2d(channels, branch_ch, 1) for _ in self.bins]
        )
        self.fuse = nn.Conv2d(channels + branch_ch * len(self.bins), channels, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        h, w = f.shape[-2:]
        for b in self.bins:
            if b > h or b > w:
                raise ConfigurationError(f"pyramid bin {b} exceeds feature extent {h}x{w}")
        branches = [f]
        for b, proj in zip(self.bins, self.projections):
            pooled = F.adaptive_avg_pool2d(f, b)
            branches.append(F.interpolate(proj(pooled), size=(h, w), mode="bilinear", align_corners=False))
        return self.fuse(torch.cat(branches, dim=1))


class DualAttention(nn.Module):
    """Position and channel self-attention with a shared shortcut.

    out = f + gamma_p * position_term + gamma_c * channel_term, with both
    scale parameters initialized to zero so the module starts as the
    identity map. The position affinity is (H*W)x(H*W); forward refuses maps
    whose H*W exceeds ``max_positions``.
    """

    def __init__(self, channels: int, max_positions: int = 4096):
        super().__init__()
        self.max_positions = max_positions
        inner = max(channels // 8, 1)
        self.query = nn.Conv2d(channels, inner, 1)
        self.key = nn.Conv2d(channels, inner, 1)
        self.value = nn.Conv2d(channels, channels, 1)
        self.gamma_p = nn.Parameter(torch.zeros(()))
        self.gamma_c = nn.Parameter(torch.zeros(()))

    def _check_budget(self, f: torch.Tensor) -> None:
        hw = f.shape[-1] * f.shape[-2]
        if hw > self.max_positions:
            raise AttentionBudgetError(
                f"spatial extent {f.shape[-2]}x{f.shape[-1]} needs a {hw}x{hw} affinity "
                f"matrix, beyond the configured budget of {self.max_positions} positions"
            )

    def position_affinity(self, f: torch.Tensor) -> torch.Tensor:
        """Softmax-normalized (B, H*W, H*W) spatial affinity; rows sum to 1."""
        self._check_budget(f)
        q = self.query(f).flatten(2).permute(0, 2, 1)
        k = self.key(f).flatten(2)
        return torch.softmax(torch.bmm(q, k), dim=-1)

    def channel_affinity(self, f: torch.Tensor) -> torch.Tensor:
        """Softmax-normalized (B, C, C) channel affinity; rows sum to 1."""
        x = f.flatten(2)
        return torch.softmax(torch.bmm(x, x.transpose(1, 2)), dim=-1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        b, c, h, w = f.shape
        attn_p = self.position_affinity(f)
        v = self.value(f).flatten(2)
        # bmm(attn, v^T) instead of bmm(v, attn^T): same sum over source
        # positions, but avoids materializing a transposed (HW)x(HW) copy.
        position_term = torch.bmm(attn_p, v.transpose(1, 2)).transpose(1, 2).reshape(b, c, h, w)
        attn_c = self.channel_affinity(f)
        channel_term = torch.bmm(attn_c, f.flatten(2)).reshape(b, c, h, w)
        return f + self.gamma_p * position_term + self.gamma_c * channel_term


class UpsampleBlock(nn.Module):
    """Three-layer decoder upsampling: 1x1 reduce, stride-2 transposed conv,
    1x1 expand, each followed by batch norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        mid = in_ch // 4
        self.reduce = nn.Conv2d(in_ch, mid, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid)
        self.deconv = nn.ConvTranspose2d(mid, mid, 3, stride=2, padding=1, output_padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(mid)
        self.expand = nn.Conv2d(mid, out_ch, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.bn1(self.reduce(x)))
        x = F.relu(self.bn2(self.deconv(x)))
        return F.relu(self.bn3(self.expand(x)))


def _check_skip(d_prev: torch.Tensor, skip: torch.Tensor) -> None:
    if skip.shape[-1] != 2 * d_prev.shape[-1] or skip.shape[-2] != 2 * d_prev.shape[-2]:
        raise ShapeError(
            f"skip spatial size {tuple(skip.shape[-2:])} must be exactly twice "
            f"the decoder state {tuple(d_prev.shape[-2:])}"
        )


class ChangeDecoderBlock(nn.Module):
    """Change decoder stage: fuse the two temporal skips with a 1x1
    convolution, add the upsampled decoder state, then optionally refine with
    dual attention. Temporal skips are concatenated by default; with
    ``diff_skips`` they are differenced instead."""

    def __init__(self, in_ch: int, skip_ch: int, use_dam: bool,
                 diff_skips: bool = False, max_positions: int = 4096):
        super().__init__()
        self.diff_skips = diff_skips
        self.skip_fuse = nn.Conv2d(skip_ch if diff_skips else 2 * skip_ch, skip_ch, 1)
        self.up = UpsampleBlock(in_ch, skip_ch)
        self.dam = DualAttention(skip_ch, max_positions) if use_dam else None

    def forward(self, d_prev: torch.Tensor, e_t1: torch.Tensor, e_t2: torch.Tensor) -> torch.Tensor:
        if e_t1.shape != e_t2.shape:
            raise ShapeError(f"temporal skips differ: {tuple(e_t1.shape)} vs {tuple(e_t2.shape)}")
        _check_skip(d_prev, e_t1)
        merged = e_t1 - e_t2 if self.diff_skips else torch.cat((e_t1, e_t2), dim=1)
        out = self.up(d_prev) + self.skip_fuse(merged)
        if self.dam is not None:
            out = self.dam(out)
        return out


class SegDecoderBlock(nn.Module):
    """Segmentation decoder stage: as the change block but with a single
    skip input from one epoch's pyramid."""

    def __init__(self, in_ch: int, skip_ch: int, use_dam: bool, max_positions: int = 4096):
        super().__init__()
        self.skip_fuse = nn.Conv2d(skip_ch, skip_ch, 1)
        self.up = UpsampleBlock(in_ch, skip_ch)
        self.dam = DualAttention(skip_ch, max_positions) if use_dam else None

    def forward(self, d_prev: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        _check_skip(d_prev, e)
        out = self.up(d_prev) + self.skip_fuse(e)
        if self.dam is not None:
            out = self.dam(out)
        return out


class FinalBlock(nn.Module):
    """Final decoder: stride-2 transposed conv, 3x3 conv, 1x1 conv to one
    channel, logistic activation; maps half resolution to a full-resolution
    probability map."""

    def __init__(self, in_ch: int):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(in_ch, 32, 4, stride=2, padding=1)
        self.conv = nn.Conv2d(32, 32, 3, padding=1)
        self.head = nn.Conv2d(32, 1, 1)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        x = F.relu(self.deconv(f))
        x = F.relu(self.conv(x))
        return torch.sigmoid(self.head(x))


class DualTaskChangeNet(nn.Module):
    """The full dual-task network. One encoder and one segmentation decoder
    are shared across epochs; the change decoder sees both pyramids."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.encoder.stage_channels
        self.encoder = SiameseEncoder(cfg.encoder, input_channels=cfg.input_channels)
        self.center = PyramidPoolingCenter(c[4], cfg.spp_bins)
        self.center_fuse = nn.Conv2d(2 * c[4], c[4], 1)

        stage_pairs = [(c[4], c[3]), (c[3], c[2]), (c[2], c[1]), (c[1], c[0])]
        self.cd_blocks = nn.ModuleList(
            ChangeDecoderBlock(i, s, cfg.use_dam, cfg.diff_skips, cfg.max_attention_positions)
            for i, s in stage_pairs
        )
        self.aux_heads = (
            nn.ModuleList(nn.Conv2d(s, 1, 1) for _, s in stage_pairs)
            if cfg.deep_supervision else None
        )
        self.final = FinalBlock(c[0])

        if cfg.use_ssn:
            self.ssn_blocks = nn.ModuleList(
                SegDecoderBlock(i, s, cfg.use_dam, cfg.max_attention_positions)
                for i, s in stage_pairs
            )
            self.ssn_final = FinalBlock(c[0])
        else:
            self.ssn_blocks = None
            self.ssn_final = None

        self.apply(init_parameters)

    def _decode_seg(self, pyramid: FeaturePyramid, center_out: torch.Tensor) -> torch.Tensor:
        d = center_out
        for block, skip in zip(self.ssn_blocks, reversed(pyramid.stages[:4])):
            d = block(d, skip)
        return self.ssn_final(d)

    def forward(self, img_t1: torch.Tensor, img_t2: torch.Tensor) -> ModelOutput:
        if img_t1.shape != img_t2.shape:
            raise ShapeError(
                f"epoch images differ in shape: {tuple(img_t1.shape)} vs {tuple(img_t2.shape)}"
            )
        p1 = self.encoder(img_t1)
        p2 = self.encoder(img_t2)
        c1 = self.center(p1.stages[4])
        c2 = self.center(p2.stages[4])

        d = self.center_fuse(torch.cat((c1, c2), dim=1))
        aux: list[torch.Tensor] = []
        for i, block in enumerate(self.cd_blocks):
            d = block(d, p1.stages[3 - i], p2.stages[3 - i])
            if self.aux_heads is not None:
                aux.append(torch.sigmoid(self.aux_heads[i](d)))
        change = self.final(d)

        seg1 = seg2 = None
        if self.ssn_blocks is not None:
            seg1 = self._decode_seg(p1, c1)
            seg2 = self._decode_seg(p2, c2)
        return ModelOutput(change_prob=change, change_aux=aux, seg_prob_t1=seg1, seg_prob_t2=seg2)


def init_parameters(module: nn.Module) -> None:
    """Fan-based init for convolutions, zeros for biases; attention scales
    are zero-initialized in DualAttention itself."""
    if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
        nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.BatchNorm2d):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def build_model(cfg: ModelConfig, seed: int | None = None) -> DualTaskChangeNet:
    """Construct the network, optionally under a fixed torch seed so the
    initialization is reproducible."""
    if seed is not None:
        torch.manual_seed(seed)
    return DualTaskChangeNet(cfg)


def count_trainable(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters() if p.requires_grad)


def ssn_branch_modules(model: DualTaskChangeNet) -> list[nn.Module]:
    """The modules a non-shared construction would have to duplicate per epoch."""
    if model.ssn_blocks is None:
        return []
    return [model.ssn_blocks, model.ssn_final]
