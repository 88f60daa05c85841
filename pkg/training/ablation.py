"""Ablação Dy-Cond / FF-Parser.

Treina cada par (variante, semente) com a mesma ordem de lotes e a mesma
inicialização, avalia Dice/IoU no split de teste e monta a tabela
variante x semente com média ± desvio e uma linha de resumo.

Cada job tem diretório próprio ``<out>/<variante>_seed<s>/``. Resultados
parciais ficam em ``ablation_runs.csv`` mesmo quando um job falha.
"""
import logging
import math
from concurrent.futures import FIRST_EXCEPTION, ProcessPoolExecutor, wait
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import django
import pandas as pd
from tqdm import tqdm

from core.config import write_json
from core.exceptions import DataError, InvalidArgumentError
from corpus.synthdata import load_dataset
from diffusion.sampler import SamplerConfig
from evaluation.harness import evaluate_model

from .trainer import TrainConfig, Trainer

logger = logging.getLogger(__name__)

RUN_COLUMNS = [
    'variant', 'use_dycond', 'use_ffparser', 'seed', 'status', 'dice', 'iou', 'steps',
    'encoder_image_digest', 'error',
]
SUMMARY_ROW = 'summary'


class Variant(NamedTuple):
    name: str
    use_dycond: bool
    use_ffparser: bool


DEFAULT_VARIANTS = (
    Variant('vanilla', False, False),
    Variant('dycond', True, False),
    Variant('full', True, True),
)


@dataclass(frozen=True)
class AblationSpec:
    variants: tuple = DEFAULT_VARIANTS
    seeds: tuple = (0, 1, 2)
    train: TrainConfig = field(default_factory=TrainConfig)
    # 0 avalia o split de teste inteiro
    test_limit: int = 0
    test_steps: int = 100
    test_ensemble_size: int = 5

    def __post_init__(self):
        object.__setattr__(self, 'variants', tuple(Variant(*variant) for variant in self.variants))
        object.__setattr__(self, 'seeds', tuple(self.seeds))
        if len(self.variants) < 2:
            raise InvalidArgumentError(f'an ablation needs at least 2 variants, got {len(self.variants)}')
        if not self.seeds:
            raise InvalidArgumentError('an ablation needs at least 1 seed')

    def jobs(self):
        return [(variant, seed) for seed in self.seeds for variant in self.variants]

    def train_config(self, variant, seed):
        model = self.train.model.with_flags(use_dycond=variant.use_dycond, use_ffparser=variant.use_ffparser)
        return replace(self.train, seed=seed, model=model)

    def test_sampler(self, seed):
        return SamplerConfig(
            steps=min(self.test_steps, self.train.T), ensemble_size=self.test_ensemble_size, seed=seed,
        )


def job_dir(out_dir, variant, seed):
    return Path(out_dir) / f'{variant.name}_seed{seed}'


def run_variant(spec, variant, seed, corpus_root, out_dir):
    """Treina e avalia um par (variante, semente). Devolve a linha de ``ablation_runs.csv``."""
    config = spec.train_config(variant, seed)
    size, channels = config.model.image_size, config.model.in_channels_image
    train_set = load_dataset(corpus_root, 'train', size, channels)
    val_set = load_dataset(corpus_root, 'val', size, channels)
    test_set = load_dataset(corpus_root, 'test', size, channels)
    if not len(test_set):
        raise DataError('test split is empty', source=str(corpus_root))

    directory = job_dir(out_dir, variant, seed)
    directory.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(config, train_set, val_set, directory)
    result = trainer.run()
    report = evaluate_model(
        result.model, test_set, trainer.schedule, spec.test_sampler(seed), limit=spec.test_limit or None,
    )
    report.write(directory, 'test_metrics')
    return {
        'variant': variant.name,
        'use_dycond': variant.use_dycond,
        'use_ffparser': variant.use_ffparser,
        'seed': seed,
        'status': 'ok',
        'dice': report.mean_dice,
        'iou': report.mean_iou,
        'steps': result.steps,
        'encoder_image_digest': result.initial_digests['encoder_image'],
        'error': '',
    }


def _run_job(job):
    return run_variant(*job)


def _failed_row(variant, seed, exc):
    return {
        'variant': variant.name, 'use_dycond': variant.use_dycond, 'use_ffparser': variant.use_ffparser,
        'seed': seed, 'status': 'failed', 'error': str(exc),
    }


def summarize(spec, runs):
    """Uma linha por variante (Dice por semente, média ± desvio, IoU) mais a linha de resumo."""
    ok = runs[runs['status'] == 'ok']
    rows = []
    for variant in spec.variants:
        part = ok[ok['variant'] == variant.name]
        row = {'variant': variant.name, 'use_dycond': variant.use_dycond, 'use_ffparser': variant.use_ffparser}
        for seed in spec.seeds:
            hits = part.loc[part['seed'] == seed, 'dice']
            row[f'dice_seed{seed}'] = float(hits.iloc[0]) if len(hits) else math.nan
        row['mean_dice'] = float(part['dice'].mean())
        row['std_dice'] = float(part['dice'].std(ddof=0))
        row['mean_iou'] = float(part['iou'].mean())
        rows.append(row)

    means = [row['mean_dice'] for row in rows]
    rows.append({
        'variant': SUMMARY_ROW,
        'mean_dice': means[-1] - means[0],
        'mean_iou': rows[-1]['mean_iou'] - rows[0]['mean_iou'],
        'ordering_holds': all(low <= high for low, high in zip(means, means[1:])),
    })
    return pd.DataFrame(rows)


def _mark(flag):
    return '✓' if flag else ''


def render_table(spec, report):
    """Tabela em texto: colunas Dy-Cond / FF-Parser marcadas e Dice/IoU em pontos percentuais."""
    lines = [f'{"Dy-Cond":^9} {"FF-Parser":^9}  {"Dice (%)":>15}  {"IoU (%)":>8}  variant']
    for _, row in report[report['variant'] != SUMMARY_ROW].iterrows():
        dice = f'{100 * row["mean_dice"]:.1f} ± {100 * row["std_dice"]:.1f}'
        lines.append(
            f'{_mark(row["use_dycond"]):^9} {_mark(row["use_ffparser"]):^9}  {dice:>15}  '
            f'{100 * row["mean_iou"]:>8.1f}  {row["variant"]}'
        )
    summary = report[report['variant'] == SUMMARY_ROW].iloc[0]
    first, last = spec.variants[0].name, spec.variants[-1].name
    order = ' ≥ '.join(variant.name for variant in reversed(spec.variants))
    lines.append('')
    lines.append(f'{last} - {first}: {100 * summary["mean_dice"]:+.1f} Dice points over {len(spec.seeds)} seed(s)')
    lines.append(f'ordering {order}: {"holds" if summary["ordering_holds"] else "does not hold"}')
    return '\n'.join(lines) + '\n'


def _records(frame):
    return frame.astype(object).where(frame.notna(), None).to_dict(orient='records')


def write_report(spec, runs, out_dir):
    out_dir = Path(out_dir)
    runs_frame = pd.DataFrame(runs, columns=RUN_COLUMNS)
    runs_frame.to_csv(out_dir / 'ablation_runs.csv', index=False)
    report = summarize(spec, runs_frame)
    report.to_csv(out_dir / 'ablation.csv', index=False)
    write_json(out_dir / 'ablation.json', {
        'runs': _records(runs_frame),
        'report': _records(report),
    })
    (out_dir / 'ablation.txt').write_text(render_table(spec, report), encoding='utf-8')
    return report


def collect_finished(futures):
    """Linhas dos futures concluídos, na ordem de submissão, e a primeira falha.

    ``futures`` mapeia future -> (variante, semente); cancelados não geram linha.
    """
    runs, failure = [], None
    for future, (variant, seed) in futures.items():
        if future.cancelled() or not future.done():
            continue
        error = future.exception()
        if error is None:
            runs.append(future.result())
        else:
            failure = failure or error
            runs.append(_failed_row(variant, seed, error))
    return runs, failure


def _write_partial(out_dir, runs):
    pd.DataFrame(runs, columns=RUN_COLUMNS).to_csv(Path(out_dir) / 'ablation_runs.csv', index=False)


def run_ablation(spec, corpus_root, out_dir, jobs=1):
    """Roda todos os jobs (em sequência ou em ``jobs`` processos) e grava o relatório.

    Se um job falhar, os que ainda não começaram são cancelados; as linhas dos
    que terminaram ficam em ``ablation_runs.csv`` e o erro é repassado.
    """
    runs = []
    pending = spec.jobs()
    logger.info('Ablation started', extra={'jobs': len(pending), 'workers': jobs})

    if jobs <= 1:
        for variant, seed in tqdm(pending, desc='ablation'):
            try:
                runs.append(run_variant(spec, variant, seed, corpus_root, out_dir))
            except Exception as exc:
                runs.append(_failed_row(variant, seed, exc))
                _write_partial(out_dir, runs)
                raise
            _write_partial(out_dir, runs)
            logger.info('Ablation job finished', extra=runs[-1])
    else:
        with ProcessPoolExecutor(max_workers=jobs, initializer=django.setup) as executor:
            futures = {
                executor.submit(_run_job, (spec, variant, seed, corpus_root, out_dir)): (variant, seed)
                for variant, seed in pending
            }
            _, not_done = wait(futures, return_when=FIRST_EXCEPTION)
            for future in not_done:
                future.cancel()
            # os que já estavam rodando terminam antes do relatório parcial
            wait(not_done)
            runs, failure = collect_finished(futures)
            if failure is not None:
                _write_partial(out_dir, runs)
                raise failure

    runs.sort(key=lambda row: (spec.seeds.index(row['seed']), [v.name for v in spec.variants].index(row['variant'])))
    report = write_report(spec, runs, out_dir)
    logger.info('Ablation finished', extra={'out': str(out_dir)})
    return report
