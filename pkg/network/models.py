"""ResUNet condicional de dois codificadores (imagem e máscara ruidosa).

Nomes dos parâmetros (estáveis, usados no arquivo de checkpoint):
    time_embed.*                         embedding do passo t
    encoder_image.stem.*, encoder_image.stage{k}.downsample.*, encoder_image.stage{k}.block{j}.*
    encoder_mask.*                       mesma geometria do codificador da imagem
    ffparser.stage{k}.weight_real / weight_imag
    bottleneck.*                         último estágio de codificação (recebe E_I + E_x)
    decoder.stage{k}.upsample.*, decoder.stage{k}.block{j}.*, decoder.out.*
"""
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from core.exceptions import InvalidArgumentError

from .ffparser import SpectralFilter

NORM_GROUPS = 8
LAYER_NORM_EPS = 1e-5

PRESETS = {
    'S-toy': {
        'base_channels': 16,
        'stage_block_counts': (1, 1, 1),
        'channel_multipliers': (1, 2, 4),
        'fusion_stages': (1, 2),
    },
    'B-toy': {
        'base_channels': 16,
        'stage_block_counts': (1, 1, 1, 1),
        'channel_multipliers': (1, 2, 2, 4),
        'fusion_stages': (1, 2),
    },
}


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    in_channels_image: int = 1
    in_channels_mask: int = 1
    base_channels: int = 32
    stage_block_counts: tuple = (3, 4, 6)
    channel_multipliers: tuple = (1, 2, 4)
    time_embed_dim: int = 128
    time_embedding: str = 'sinusoidal'
    fusion_stages: tuple = (1, 2)
    use_dycond: bool = True
    use_ffparser: bool = True
    T: int = 1000

    def __post_init__(self):
        object.__setattr__(self, 'stage_block_counts', tuple(self.stage_block_counts))
        object.__setattr__(self, 'channel_multipliers', tuple(self.channel_multipliers))
        object.__setattr__(self, 'fusion_stages', tuple(sorted(set(self.fusion_stages))))
        if len(self.stage_block_counts) != len(self.channel_multipliers):
            raise InvalidArgumentError('stage_block_counts and channel_multipliers differ in length')
        if self.num_stages < 3:
            raise InvalidArgumentError(f'at least 3 stages are required, got {self.num_stages}')
        if any(stage < 0 or stage >= self.num_stages for stage in self.fusion_stages):
            raise InvalidArgumentError(f'fusion_stages {self.fusion_stages} outside 0..{self.num_stages - 1}')
        if self.image_size % 2 ** self.num_stages:
            raise InvalidArgumentError(
                f'image_size {self.image_size} must be divisible by 2^{self.num_stages}'
            )
        if self.time_embedding not in ('sinusoidal', 'table'):
            raise InvalidArgumentError(f'unknown time embedding {self.time_embedding!r}')
        if self.time_embed_dim % 2:
            raise InvalidArgumentError('time_embed_dim must be even')

    @property
    def num_stages(self):
        return len(self.stage_block_counts)

    def stage_channels(self, k):
        return self.base_channels * self.channel_multipliers[k]

    def stage_resolution(self, k):
        return self.image_size // 2 ** k

    def with_flags(self, **changes):
        return ModelConfig(**{**asdict(self), **changes})


def norm(channels):
    return nn.GroupNorm(math.gcd(channels, NORM_GROUPS), channels)


def channel_layer_norm(x, eps=LAYER_NORM_EPS):
    """Normaliza cada posição espacial sobre os canais (média 0, variância 1, sem afim)."""
    mean = x.mean(dim=-3, keepdim=True)
    var = x.var(dim=-3, keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + eps)


def dynamic_condition(m_image, m_mask):
    """(LN(m_I) * LN(m_x)) * m_I: o mapa de afinidade recalibra a feature da imagem."""
    if m_image.shape != m_mask.shape:
        raise InvalidArgumentError(
            f'condition features {tuple(m_image.shape)} and mask features {tuple(m_mask.shape)} differ'
        )
    return channel_layer_norm(m_image) * channel_layer_norm(m_mask) * m_image


class TimeEmbedding(nn.Module):
    def __init__(self, T, dim, kind='sinusoidal'):
        super().__init__()
        self.T = T
        self.dim = dim
        self.kind = kind
        if kind == 'table':
            self.table = nn.Embedding(T, dim)
        else:
            half = dim // 2
            frequencies = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
            self.register_buffer('frequencies', frequencies, persistent=False)
            self.proj = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def basis(self, t):
        angles = t.to(self.frequencies.dtype)[:, None] * self.frequencies[None, :]
        return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)

    def forward(self, t):
        if self.kind == 'table':
            return self.table(t)
        return self.proj(self.basis(t).to(self.proj[0].weight.dtype))


class ResidualBlock(nn.Module):
    """Dois blocos GroupNorm -> SiLU -> conv; o embedding de t entra depois do primeiro."""

    def __init__(self, in_channels, out_channels, time_embed_dim):
        super().__init__()
        self.norm1 = norm(in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Sequential(
            nn.Linear(time_embed_dim, out_channels),
            nn.SiLU(),
            nn.Linear(out_channels, out_channels),
        )
        self.norm2 = norm(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        if in_channels == out_channels:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.shortcut(x) + h


class EncoderStage(nn.Module):
    def __init__(self, in_channels, out_channels, num_blocks, time_embed_dim, downsample):
        super().__init__()
        self.downsample = nn.Conv2d(in_channels, in_channels, 3, stride=2, padding=1) if downsample else None
        self.block_names = []
        channels = in_channels
        for j in range(num_blocks):
            self.add_module(f'block{j}', ResidualBlock(channels, out_channels, time_embed_dim))
            self.block_names.append(f'block{j}')
            channels = out_channels

    def forward(self, h, temb):
        if self.downsample is not None:
            h = self.downsample(h)
        for name in self.block_names:
            h = getattr(self, name)(h, temb)
        return h


class Encoder(nn.Module):
    def __init__(self, in_channels, config):
        super().__init__()
        self.in_channels = in_channels
        self.image_size = config.image_size
        self.stem = nn.Conv2d(in_channels, config.base_channels, 3, padding=1)
        channels = config.base_channels
        self.num_stages = config.num_stages
        for k in range(config.num_stages):
            out_channels = config.stage_channels(k)
            stage = EncoderStage(
                channels, out_channels, max(config.stage_block_counts[k], 1),
                config.time_embed_dim, downsample=k > 0,
            )
            self.add_module(f'stage{k}', stage)
            channels = out_channels

    def stage(self, k):
        return getattr(self, f'stage{k}')

    def check_input(self, x, what):
        expected = (self.in_channels, self.image_size, self.image_size)
        if x.dim() != 4 or tuple(x.shape[1:]) != expected:
            raise InvalidArgumentError(f'{what} must be (B, {", ".join(map(str, expected))}), got {tuple(x.shape)}')


class Bottleneck(nn.Module):
    def __init__(self, channels, time_embed_dim):
        super().__init__()
        self.downsample = nn.Conv2d(channels, channels, 3, stride=2, padding=1)
        self.block0 = ResidualBlock(channels, channels, time_embed_dim)
        self.block1 = ResidualBlock(channels, channels, time_embed_dim)

    def forward(self, h, temb):
        h = self.downsample(h)
        return self.block1(self.block0(h, temb), temb)


class DecoderStage(nn.Module):
    def __init__(self, in_channels, out_channels, num_blocks, time_embed_dim):
        super().__init__()
        self.upsample = nn.Sequential(
            nn.Upsample(scale_factor=2, mode='nearest'),
            nn.Conv2d(in_channels, out_channels, 3, padding=1),
        )
        self.block_names = []
        channels = out_channels * 2
        for j in range(num_blocks):
            self.add_module(f'block{j}', ResidualBlock(channels, out_channels, time_embed_dim))
            self.block_names.append(f'block{j}')
            channels = out_channels

    def forward(self, h, skip, temb):
        h = torch.cat([self.upsample(h), skip], dim=1)
        for name in self.block_names:
            h = getattr(self, name)(h, temb)
        return h


class Decoder(nn.Module):
    def __init__(self, config, out_channels):
        super().__init__()
        self.num_stages = config.num_stages
        channels = config.stage_channels(config.num_stages - 1)
        for k in reversed(range(config.num_stages)):
            stage_channels = config.stage_channels(k)
            stage = DecoderStage(
                channels, stage_channels, max(config.stage_block_counts[k], 1), config.time_embed_dim,
            )
            self.add_module(f'stage{k}', stage)
            channels = stage_channels
        self.out = nn.Sequential(norm(channels), nn.SiLU(), nn.Conv2d(channels, out_channels, 3, padding=1))
        # saída começa em zero: previsão inicial de ruído nula
        nn.init.zeros_(self.out[-1].weight)
        nn.init.zeros_(self.out[-1].bias)

    def forward(self, h, skips, temb):
        for k in reversed(range(self.num_stages)):
            h = getattr(self, f'stage{k}')(h, skips[k], temb)
        return self.out(h)


class SegDiffusionNet(nn.Module):
    """eps_theta(x_t, I, t) = D((E_I + E_x, t), t).

    A ordem de construção dos submódulos é fixa, para que variantes com as mesmas
    formas partam dos mesmos pesos sob a mesma semente.
    """

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.time_embed = TimeEmbedding(config.T, config.time_embed_dim, config.time_embedding)
        self.encoder_image = Encoder(config.in_channels_image, config)
        self.encoder_mask = Encoder(config.in_channels_mask, config)
        self.bottleneck = Bottleneck(config.stage_channels(config.num_stages - 1), config.time_embed_dim)
        self.decoder = Decoder(config, config.in_channels_mask)
        if config.use_dycond and config.use_ffparser:
            self.ffparser = nn.ModuleDict({
                f'stage{k}': SpectralFilter(
                    config.stage_channels(k), config.stage_resolution(k), config.stage_resolution(k),
                )
                for k in config.fusion_stages
            })
        else:
            self.ffparser = None

    def embed_time(self, t, batch_size, device):
        steps = torch.as_tensor(t, device=device, dtype=torch.long)
        if steps.dim() == 0:
            steps = steps.expand(batch_size)
        if steps.shape != (batch_size,):
            raise InvalidArgumentError(f'expected {batch_size} step indices, got shape {tuple(steps.shape)}')
        if int(steps.min()) < 0 or int(steps.max()) >= self.config.T:
            raise InvalidArgumentError(f'step index out of range [0, {self.config.T})')
        return self.time_embed(steps)

    def encode_mask(self, xt, temb):
        self.encoder_mask.check_input(xt, 'x_t')
        h = self.encoder_mask.stem(xt)
        features = []
        for k in range(self.config.num_stages):
            h = self.encoder_mask.stage(k)(h, temb)
            features.append(h)
        return h, features

    def encode_image(self, image, mask_features, temb):
        self.encoder_image.check_input(image, 'image')
        h = self.encoder_image.stem(image)
        skips = []
        for k in range(self.config.num_stages):
            h = self.encoder_image.stage(k)(h, temb)
            if self.config.use_dycond and k in self.config.fusion_stages:
                if mask_features is None or len(mask_features) <= k or mask_features[k] is None:
                    raise InvalidArgumentError(f'mask features missing for fusion stage {k}')
                m_mask = mask_features[k]
                if self.config.use_ffparser:
                    m_mask = self.ffparser[f'stage{k}'](m_mask)
                h = dynamic_condition(h, m_mask)
            skips.append(h)
        return h, skips

    def forward(self, xt, image, t):
        if image.dim() == 4 and image.shape[0] == 1 and xt.shape[0] > 1:
            image = image.expand(xt.shape[0], -1, -1, -1)
        temb = self.embed_time(t, xt.shape[0], xt.device)
        embed_mask, mask_features = self.encode_mask(xt, temb)
        embed_image, skips = self.encode_image(image, mask_features, temb)
        h = self.bottleneck(embed_image + embed_mask, temb)
        return self.decoder(h, skips, temb)

    predict_noise = forward


def count_parameters(config):
    """Número de parâmetros; depende só da configuração (rede montada no device meta)."""
    with torch.device('meta'):
        model = SegDiffusionNet(config)
    return sum(parameter.numel() for parameter in model.parameters())


def parameter_manifest(model):
    return [
        {'name': name, 'shape': list(tensor.shape), 'dtype': str(tensor.dtype).replace('torch.', '')}
        for name, tensor in model.state_dict().items()
    ]
