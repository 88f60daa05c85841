"""Laço de treino: a cada passo sorteia um lote (imagem, máscara), codifica a
máscara em {-1, +1}, sorteia t uniforme e ruído gaussiano, calcula o MSE do
ruído previsto e atualiza os pesos com AdamW.

Saídas em ``out_dir``: ``train_log.csv`` (step, loss, lr, wall_time),
``val_log.csv``, ``loss_curve.png``, ``checkpoints/step_<n>.zip`` e
``checkpoint.zip`` com os pesos finais.
"""
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd
import torch
from matplotlib.figure import Figure
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn
from torch.utils.data import DataLoader, RandomSampler
from tqdm import tqdm

from core.config import write_json
from core.exceptions import InvalidArgumentError, NumericalError
from core.runtime import configure_threads, resolve_device
from diffusion.sampler import SamplerConfig
from diffusion.schedule import ScheduleKind, build_schedule, loss
from evaluation.harness import evaluate_model
from network.models import ModelConfig, SegDiffusionNet

from .checkpoint import save_checkpoint, tensor_digest

logger = logging.getLogger(__name__)

LR_SCHEDULES = ('constant', 'cosine')
SNAPSHOT_TAIL = 20


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    seed: int = 0
    # passos; 0 desliga
    checkpoint_every: int = 1000
    eval_every: int = 500
    eval_limit: int = 8
    eval_steps: int = 50
    eval_ensemble_size: int = 1
    log_every: int = 50
    schedule_kind: str = ScheduleKind.LINEAR.value
    lr_schedule: str = 'constant'
    ema_decay: float = 0.0
    max_steps: int = 0
    num_threads: int = 0
    device: str = 'auto'
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError('epochs and batch_size must be >= 1')
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise InvalidArgumentError('learning_rate must be > 0 and weight_decay >= 0')
        if not 0.0 <= self.ema_decay < 1.0:
            raise InvalidArgumentError(f'ema_decay must be in [0, 1), got {self.ema_decay}')
        if self.lr_schedule not in LR_SCHEDULES:
            raise InvalidArgumentError(f'lr_schedule must be one of {", ".join(LR_SCHEDULES)}')
        ScheduleKind(self.schedule_kind)

    @property
    def T(self):
        return self.model.T

    def eval_sampler(self):
        return SamplerConfig(
            steps=min(self.eval_steps, self.T), ensemble_size=self.eval_ensemble_size, seed=self.seed,
        )


@dataclass
class TrainResult:
    model: SegDiffusionNet
    steps: int
    losses: list
    val_dice: list
    checkpoints: list
    initial_digests: dict
    grad_reached: set = field(default_factory=set)


def build_model(model_config, seed):
    """Inicialização depende só de (config, semente); não mexe no RNG global."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return SegDiffusionNet(model_config)


def total_steps(config, num_samples):
    steps = config.epochs * math.ceil(num_samples / config.batch_size)
    return min(steps, config.max_steps) if config.max_steps else steps


class Trainer:
    # passos em que se registra quais parâmetros receberam gradiente
    grad_watch_steps = 50

    def __init__(self, config, train_set, val_set=None, out_dir=None):
        if len(train_set) == 0:
            raise InvalidArgumentError('training split is empty')
        self.config = config
        self.train_set = train_set
        self.val_set = val_set if val_set is not None and len(val_set) else None
        self.out_dir = Path(out_dir) if out_dir is not None else None
        configure_threads(config.num_threads)
        self.device = resolve_device(config.device)
        self.schedule = build_schedule(config.T, config.schedule_kind)
        self.model = build_model(config.model, config.seed).to(self.device)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=config.learning_rate, weight_decay=config.weight_decay,
        )
        self.steps = total_steps(config, len(train_set))
        self.scheduler = None
        if config.lr_schedule == 'cosine':
            self.scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(self.optimizer, T_max=self.steps)
        self.ema = None
        if config.ema_decay:
            self.ema = AveragedModel(self.model, multi_avg_fn=get_ema_multi_avg_fn(config.ema_decay))
        self.rows = []
        self.val_rows = []
        self.checkpoints = []
        self.grad_reached = set()

    @property
    def eval_model(self):
        return self.ema.module if self.ema is not None else self.model

    def batches(self):
        """Ordem dos lotes determinada só pela semente (a mesma para todas as variantes)."""
        generator = torch.Generator().manual_seed(self.config.seed)
        sampler = RandomSampler(self.train_set, generator=generator)
        loader = DataLoader(self.train_set, batch_size=self.config.batch_size, sampler=sampler)
        while True:
            yield from loader

    def _snapshot(self, step, ids, t):
        return {
            'step': step,
            'batch_ids': [self.train_set.ids[i] for i in ids.tolist()],
            't': t.tolist(),
            'loss_history': [row['loss'] for row in self.rows[-SNAPSHOT_TAIL:]],
        }

    def _abort(self, step, ids, t, value):
        snapshot = self._snapshot(step, ids, t)
        snapshot['loss'] = str(value)
        if self.out_dir is not None:
            write_json(self.out_dir / 'nan_snapshot.json', snapshot)
            self.write_log()
        logger.error('Non-finite loss', extra={'step': step, 'batch_ids': snapshot['batch_ids']})
        raise NumericalError(f'non-finite loss at step {step}', snapshot=snapshot)

    def _watch_gradients(self):
        for name, parameter in self.model.named_parameters():
            if parameter.grad is not None and name not in self.grad_reached:
                if name.endswith('weight_imag') or bool(parameter.grad.abs().sum() > 0):
                    self.grad_reached.add(name)

    def train_step(self, step, batch, noise_generator):
        images, masks, ids = batch
        t = torch.randint(0, self.schedule.T, (masks.shape[0],), generator=noise_generator)
        noise = torch.randn(masks.shape, generator=noise_generator)
        value = loss(
            self.schedule, self.model, masks.to(self.device), images.to(self.device),
            t.to(self.device), noise.to(self.device),
        )
        if not torch.isfinite(value):
            self._abort(step, ids, t, value.item())

        self.optimizer.zero_grad(set_to_none=True)
        value.backward()
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        if step < self.grad_watch_steps:
            self._watch_gradients()
        lr = self.optimizer.param_groups[0]['lr']
        self.optimizer.step()
        if self.scheduler is not None:
            self.scheduler.step()
        if self.ema is not None:
            self.ema.update_parameters(self.model)
        return value.item(), lr

    def validate(self, step):
        report = evaluate_model(
            self.eval_model, self.val_set, self.schedule, self.config.eval_sampler(), limit=self.config.eval_limit,
        )
        row = {'step': step, 'dice': report.mean_dice, 'iou': report.mean_iou}
        self.val_rows.append(row)
        logger.info('Validation', extra=row)
        return row

    def checkpoint(self, path, step):
        save_checkpoint(path, self.eval_model, self.config, step=step)
        self.checkpoints.append(Path(path))

    def write_log(self):
        pd.DataFrame(self.rows, columns=['step', 'loss', 'lr', 'wall_time']).to_csv(
            self.out_dir / 'train_log.csv', index=False,
        )
        if self.val_rows:
            pd.DataFrame(self.val_rows).to_csv(self.out_dir / 'val_log.csv', index=False)

    def plot(self):
        figure = Figure(figsize=(6, 4))
        axis = figure.subplots()
        frame = pd.DataFrame(self.rows)
        axis.plot(frame['step'], frame['loss'], linewidth=0.8)
        axis.set_xlabel('step')
        axis.set_ylabel('loss')
        axis.set_yscale('log')
        figure.tight_layout()
        figure.savefig(self.out_dir / 'loss_curve.png', dpi=100)

    def run(self):
        config = self.config
        initial_digests = {'encoder_image': tensor_digest(self.model.encoder_image.state_dict())}
        noise_generator = torch.Generator().manual_seed(config.seed + 1)
        self.model.train()
        started = time.perf_counter()
        batches = self.batches()

        for step in tqdm(range(self.steps), desc='train'):
            value, lr = self.train_step(step, next(batches), noise_generator)
            self.rows.append({'step': step, 'loss': value, 'lr': lr, 'wall_time': time.perf_counter() - started})
            if config.log_every and step % config.log_every == 0:
                logger.info('Training step', extra={'step': step, 'loss': value, 'lr': lr})
            done = step + 1
            if self.val_set is not None and config.eval_every and done % config.eval_every == 0:
                self.validate(done)
            if self.out_dir is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                self.checkpoint(self.out_dir / 'checkpoints' / f'step_{done:07d}.zip', done)
                self.write_log()

        if self.val_set is not None and (not self.val_rows or self.val_rows[-1]['step'] != self.steps):
            self.validate(self.steps)
        if self.out_dir is not None:
            self.checkpoint(self.out_dir / 'checkpoint.zip', self.steps)
            self.write_log()
            self.plot()
        logger.info('Training finished', extra={
            'steps': self.steps, 'final_loss': self.rows[-1]['loss'] if self.rows else None,
        })
        return TrainResult(
            model=self.eval_model,
            steps=self.steps,
            losses=[row['loss'] for row in self.rows],
            val_dice=[(row['step'], row['dice']) for row in self.val_rows],
            checkpoints=list(self.checkpoints),
            initial_digests=initial_digests,
            grad_reached=set(self.grad_reached),
        )


def train(config, train_set, val_set=None, out_dir=None):
    return Trainer(config, train_set, val_set, out_dir).run()
