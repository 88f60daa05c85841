"""Cadeia reversa condicionada na imagem e ensemble de cadeias fundidas.

Cada cadeia tira seu ruído do próprio gerador (CPU), semeado por uma função
determinística de (semente, índice da cadeia); por isso o resultado não depende
de quantas cadeias rodam juntas no mesmo lote. Nenhum passo lê o gabarito e a
trajetória não é guardada.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import torch
from tqdm import tqdm

from core.exceptions import InvalidArgumentError
from evaluation.staple import RaterStack, staple_fuse

from .schedule import decode_mask, respace, reverse_step

logger = logging.getLogger(__name__)


class FusionMethod(str, Enum):
    STAPLE = 'staple'
    MEAN_VOTE = 'mean-vote'


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 100
    ensemble_size: int = 25
    seed: int = 0
    threshold: float = 0.0
    fusion: str = FusionMethod.STAPLE.value
    # cadeias avaliadas juntas em um lote da rede
    chain_batch: int = 8
    clip_x0: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgumentError(f'steps must be >= 1, got {self.steps}')
        if self.ensemble_size < 1:
            raise InvalidArgumentError(f'ensemble_size must be >= 1, got {self.ensemble_size}')
        if self.chain_batch < 1:
            raise InvalidArgumentError(f'chain_batch must be >= 1, got {self.chain_batch}')
        FusionMethod(self.fusion)


@dataclass
class EnsembleResult:
    samples: list
    fused: np.ndarray
    per_sample_seeds: list
    fusion_method: str
    staple: object = None
    steps: int = 0
    extra: dict = field(default_factory=dict)

    def provenance(self):
        record = {
            'seeds': list(self.per_sample_seeds),
            'steps': self.steps,
            'fusion_method': self.fusion_method,
            'ensemble_size': len(self.samples),
            **self.extra,
        }
        if self.staple is not None:
            record['staple'] = self.staple.summary()
        return record


def chain_seed(seed, chain):
    return int(np.random.SeedSequence(seed, spawn_key=(chain,)).generate_state(1)[0])


def _mask_channels(model):
    config = getattr(model, 'config', None)
    return getattr(config, 'in_channels_mask', 1)


def _check_image(image, model):
    if image.dim() == 3:
        image = image.unsqueeze(0)
    if image.dim() != 4 or image.shape[0] != 1:
        raise InvalidArgumentError(f'expected one image (C, H, W), got {tuple(image.shape)}')
    config = getattr(model, 'config', None)
    if config is not None and tuple(image.shape[1:]) != (
        config.in_channels_image, config.image_size, config.image_size,
    ):
        raise InvalidArgumentError(
            f'image {tuple(image.shape[1:])} does not match the model '
            f'({config.in_channels_image}, {config.image_size}, {config.image_size})'
        )
    return image


@torch.no_grad()
def run_chains(image, model, schedule, config, seeds):
    """Roda uma cadeia por semente e devolve as estimativas contínuas de x0, (n, C, H, W)."""
    image = _check_image(image, model)
    device = image.device
    spaced = respace(schedule, config.steps)
    shape = (_mask_channels(model), image.shape[-2], image.shape[-1])
    generators = [torch.Generator().manual_seed(seed) for seed in seeds]

    def draw():
        return torch.stack([torch.randn(shape, generator=g) for g in generators]).to(device, image.dtype)

    x = draw()
    for i in reversed(range(spaced.T)):
        predicted = model(x, image, spaced.model_timestep(i))
        if predicted.shape != x.shape:
            raise InvalidArgumentError(
                f'model returned {tuple(predicted.shape)} for x_t of shape {tuple(x.shape)}'
            )
        z = draw() if i > 0 else None
        x = reverse_step(spaced, x, predicted, i, z, clip_x0=config.clip_x0)
    return x


def sample_one(image, model, schedule, config, seed=None):
    """Uma cadeia completa de x_T ~ N(0, I) até x0, binarizada em ``config.threshold``."""
    seed = config.seed if seed is None else seed
    x0 = run_chains(image, model, schedule, config, [seed])
    return decode_mask(x0[0, 0], config.threshold).cpu().numpy()


def fuse_masks(masks, method=FusionMethod.STAPLE):
    """Funde máscaras binárias (n, H, W). Devolve (máscara fundida, estimativa STAPLE ou None)."""
    masks = np.asarray(masks, dtype=np.uint8)
    method = FusionMethod(method)
    if method is FusionMethod.MEAN_VOTE:
        return (masks.mean(axis=0) >= 0.5).astype(np.uint8), None
    estimate = staple_fuse(RaterStack.from_masks(masks))
    return estimate.mask.reshape(masks.shape[1:]), estimate


def sample_ensemble(image, model, schedule, config, seeds=None):
    if seeds is None:
        seeds = [chain_seed(config.seed, chain) for chain in range(config.ensemble_size)]
    if len(seeds) != config.ensemble_size:
        raise InvalidArgumentError(f'{len(seeds)} seeds for an ensemble of {config.ensemble_size}')

    samples = []
    chunks = range(0, len(seeds), config.chain_batch)
    for start in tqdm(chunks, desc='chains', leave=False, disable=len(chunks) < 2):
        chunk = seeds[start:start + config.chain_batch]
        x0 = run_chains(image, model, schedule, config, chunk)
        for offset, estimate in enumerate(x0):
            samples.append(decode_mask(estimate[0], config.threshold).cpu().numpy())
            logger.debug('Chain finished', extra={'chain': start + offset, 'seed': chunk[offset]})

    fused, estimate = fuse_masks(samples, config.fusion)
    return EnsembleResult(
        samples=samples,
        fused=fused,
        per_sample_seeds=list(seeds),
        fusion_method=FusionMethod(config.fusion).value,
        staple=estimate,
        steps=config.steps,
    )
