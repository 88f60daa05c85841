"""FF-Parser: mapa atentivo complexo aprendível aplicado no espectro 2D das features.

Layout channels-first do PyTorch: uma feature map é (C, H, W) ou (B, C, H, W);
a FFT corre sempre sobre os dois últimos eixos. A transformada direta não é
normalizada e a inversa divide por H*W, então o bin DC é a soma espacial.
"""
import torch
from torch import nn

from core.exceptions import InvalidArgumentError


def fft2(m):
    if m.dim() < 3:
        raise InvalidArgumentError(f'feature map must be (C, H, W) or (B, C, H, W), got {tuple(m.shape)}')
    if not bool(torch.isfinite(m).all()):
        raise InvalidArgumentError('feature map has non-finite values')
    return torch.fft.fft2(m, dim=(-2, -1), norm='backward')


def modulate(spectrum, attn_map):
    if spectrum.shape[-attn_map.dim():] != attn_map.shape:
        raise InvalidArgumentError(
            f'spectrum {tuple(spectrum.shape)} does not match filter {tuple(attn_map.shape)}'
        )
    return spectrum * attn_map


def ifft2(spectrum):
    if spectrum.dim() < 3:
        raise InvalidArgumentError(f'spectrum must be (C, H, W) or (B, C, H, W), got {tuple(spectrum.shape)}')
    # parte real: o mapa modulado quebra a simetria hermitiana
    return torch.fft.ifft2(spectrum, dim=(-2, -1), norm='backward').real


def ffparser_apply(m, spectral_filter):
    attn_map = spectral_filter.attn_map if isinstance(spectral_filter, SpectralFilter) else spectral_filter
    if m.shape[-3:] != attn_map.shape:
        raise InvalidArgumentError(f'feature map {tuple(m.shape)} does not match filter {tuple(attn_map.shape)}')
    return ifft2(modulate(fft2(m), attn_map))


class SpectralFilter(nn.Module):
    """Mapa A em C^{C x H x W}, guardado como duas partes reais (weight_real, weight_imag).

    Inicializa na identidade (1 + 0i), então um filtro novo não altera a entrada.
    """

    def __init__(self, channels, height, width, trainable=True):
        super().__init__()
        self.shape = (channels, height, width)
        self.weight_real = nn.Parameter(torch.ones(self.shape), requires_grad=trainable)
        self.weight_imag = nn.Parameter(torch.zeros(self.shape), requires_grad=trainable)

    @property
    def trainable(self):
        return self.weight_real.requires_grad

    @property
    def attn_map(self):
        return torch.complex(self.weight_real, self.weight_imag)

    def reset_identity(self):
        with torch.no_grad():
            self.weight_real.fill_(1.0)
            self.weight_imag.zero_()

    def forward(self, m):
        return ffparser_apply(m, self)

    def extra_repr(self):
        return f'shape={self.shape}, trainable={self.trainable}'
