"""Matemática fechada da difusão: agenda de ruído, ruído direto, perda e passo reverso.

Os coeficientes ficam em float64 (numpy) e só viram tensores no dtype/device
de quem chama, no momento do uso.
"""
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn.functional as F

from core.exceptions import InvalidArgumentError

LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 0.02
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


class ScheduleKind(str, Enum):
    LINEAR = 'linear'
    COSINE = 'cosine'


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray
    # índice do passo treinado correspondente a cada posição (identidade fora do respace)
    timesteps: np.ndarray
    kind: str = ScheduleKind.LINEAR.value

    def __post_init__(self):
        for array in (self.betas, self.alphas, self.alpha_bars, self.posterior_vars, self.timesteps):
            array.flags.writeable = False

    def check_step(self, t):
        steps = torch.as_tensor(t)
        if steps.numel() == 0 or int(steps.min()) < 0 or int(steps.max()) >= self.T:
            raise InvalidArgumentError(f'step index out of range [0, {self.T}): {t}')

    def model_timestep(self, t):
        """Índice a passar à rede para a posição ``t`` desta agenda."""
        return int(self.timesteps[t])


@dataclass
class DiffusionBatch:
    x0: torch.Tensor
    t: torch.Tensor
    noise: torch.Tensor
    xt: torch.Tensor


def build_schedule(T, kind=ScheduleKind.LINEAR):
    if T < 2:
        raise InvalidArgumentError(f'schedule needs T >= 2, got {T}')
    kind = ScheduleKind(kind)
    if kind is ScheduleKind.LINEAR:
        betas = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, T, dtype=np.float64)
    else:
        betas = _cosine_betas(T)
    return _from_betas(betas, np.arange(T), kind.value)


def _cosine_betas(T):
    def f(step):
        return math.cos((step / T + COSINE_OFFSET) / (1 + COSINE_OFFSET) * math.pi / 2) ** 2

    return np.array([min(1 - f(i + 1) / f(i), MAX_BETA) for i in range(T)], dtype=np.float64)


def _from_betas(betas, timesteps, kind):
    alphas = 1.0 - betas
    return NoiseSchedule(
        T=len(betas),
        betas=betas,
        alphas=alphas,
        alpha_bars=np.cumprod(alphas),
        # sigma_t^2 = beta_t
        posterior_vars=betas.copy(),
        timesteps=np.asarray(timesteps, dtype=np.int64),
        kind=kind,
    )


def respace(schedule, steps):
    """Sub-agenda com ``steps`` passos uniformemente espaçados sobre a agenda treinada.

    Os alpha_bars da sub-agenda são os da treinada nos passos escolhidos; os betas
    são re-derivados deles.
    """
    if steps < 1 or steps > schedule.T:
        raise InvalidArgumentError(f'steps must be in [1, {schedule.T}], got {steps}')
    if steps == schedule.T:
        return schedule
    if steps == 1:
        chosen = np.array([schedule.T - 1])
    else:
        chosen = np.round(np.linspace(0, schedule.T - 1, steps)).astype(np.int64)
    alpha_bars = schedule.alpha_bars[chosen]
    previous = np.concatenate([[1.0], alpha_bars[:-1]])
    betas = 1.0 - alpha_bars / previous
    return _from_betas(betas, schedule.timesteps[chosen], schedule.kind)


def _gather(values, t, like):
    coefficients = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    if isinstance(t, torch.Tensor) and t.dim() > 0:
        picked = coefficients[t.to(like.device)]
        return picked.reshape(-1, *([1] * (like.dim() - 1)))
    return coefficients[int(t)]


def forward_noise(schedule, x0, t, noise):
    """x_t = sqrt(a_t) x0 + sqrt(1 - a_t) noise, com ``t`` escalar ou um índice por amostra."""
    if x0.shape != noise.shape:
        raise InvalidArgumentError(f'x0 {tuple(x0.shape)} and noise {tuple(noise.shape)} differ in shape')
    schedule.check_step(t)
    if isinstance(t, torch.Tensor) and t.dim() > 0 and t.shape[0] != x0.shape[0]:
        raise InvalidArgumentError(f'{t.shape[0]} step indices for a batch of {x0.shape[0]}')
    signal = _gather(np.sqrt(schedule.alpha_bars), t, x0)
    spread = _gather(np.sqrt(1.0 - schedule.alpha_bars), t, x0)
    return signal * x0 + spread * noise


def predict_x0(schedule, xt, noise, t):
    """Inverte ``forward_noise`` conhecendo o ruído."""
    schedule.check_step(t)
    signal = _gather(np.sqrt(schedule.alpha_bars), t, xt)
    spread = _gather(np.sqrt(1.0 - schedule.alpha_bars), t, xt)
    return (xt - spread * noise) / signal


def make_batch(schedule, x0, generator=None):
    """Sorteia t uniforme por amostra e ruído gaussiano para um lote de máscaras limpas."""
    device = x0.device
    t = torch.randint(0, schedule.T, (x0.shape[0],), generator=generator, device=device)
    noise = torch.randn(x0.shape, generator=generator, device=device, dtype=x0.dtype)
    return DiffusionBatch(x0=x0, t=t, noise=noise, xt=forward_noise(schedule, x0, t, noise))


def loss(schedule, model, x0, image, t, noise):
    """MSE entre o ruído injetado e a previsão da rede."""
    xt = forward_noise(schedule, x0, t, noise)
    predicted = model(xt, image, t)
    return F.mse_loss(predicted, noise)


def reverse_step(schedule, xt, predicted_noise, t, z=None, clip_x0=False):
    """Passo ancestral: x_{t-1} = (x_t - beta_t / sqrt(1 - a_t) eps) / sqrt(alpha_t) + sigma_t z.

    Com ``clip_x0`` a estimativa de x0 implícita em eps é presa a [-1, 1] e eps é
    refeito a partir dela, o que dá a média posterior q(x_{t-1} | x_t, x0 preso).
    """
    schedule.check_step(t)
    t = int(t)
    if xt.shape != predicted_noise.shape:
        raise InvalidArgumentError(
            f'predicted noise {tuple(predicted_noise.shape)} does not match x_t {tuple(xt.shape)}'
        )
    if z is not None and t == 0 and bool(torch.any(z != 0)):
        raise InvalidArgumentError('z must be zero at t = 0')

    if clip_x0:
        signal = math.sqrt(float(schedule.alpha_bars[t]))
        spread = math.sqrt(1.0 - float(schedule.alpha_bars[t]))
        x0 = ((xt - spread * predicted_noise) / signal).clamp(-1.0, 1.0)
        predicted_noise = (xt - signal * x0) / spread

    beta = float(schedule.betas[t])
    scale = 1.0 / math.sqrt(float(schedule.alphas[t]))
    noise_coef = beta / math.sqrt(1.0 - float(schedule.alpha_bars[t]))
    mean = scale * (xt - noise_coef * predicted_noise)
    if z is None or t == 0:
        return mean
    return mean + math.sqrt(float(schedule.posterior_vars[t])) * z


def encode_mask(mask):
    """{0, 1} -> {-1, +1}."""
    return mask.to(torch.get_default_dtype()) * 2.0 - 1.0


def decode_mask(x, threshold=0.0):
    return (x > threshold).to(torch.uint8)
