"""Segmenta um conjunto com o modelo e mede Dice/IoU contra o gabarito."""
import logging

import torch
from tqdm import tqdm

from diffusion.sampler import sample_ensemble, sample_one

from .figures import ComparisonRow
from .metrics import EMPTY_SCORE, MetricReport

logger = logging.getLogger(__name__)


def _predict(image, model, schedule, config):
    if config.ensemble_size == 1:
        pred = sample_one(image, model, schedule, config)
        return pred, [pred]
    result = sample_ensemble(image, model, schedule, config)
    return result.fused, result.samples


def segment(image, model, schedule, config):
    """Máscara binária (H, W): uma cadeia se ``ensemble_size == 1``, senão o ensemble fundido."""
    return _predict(image, model, schedule, config)[0]


def evaluate_model(model, dataset, schedule, config, limit=None, empty_score=EMPTY_SCORE, oracle=False,
                   figure_cases=0):
    """``oracle=True`` usa o próprio gabarito como predição (teste da tubulação).

    Os ``figure_cases`` primeiros casos ficam em ``report.figure_rows``.
    """
    report = MetricReport(empty_score=empty_score)
    count = len(dataset) if limit is None else min(limit, len(dataset))
    was_training = model.training if model is not None else False
    if model is not None:
        model.eval()
    device = next(model.parameters()).device if model is not None else torch.device('cpu')
    try:
        for index in tqdm(range(count), desc='evaluate', leave=False, disable=count < 2):
            gt = dataset.gt_masks[index]
            if oracle:
                pred, samples = gt, [gt]
            else:
                pred, samples = _predict(dataset.images[index].to(device), model, schedule, config)
            report.add(dataset.ids[index], pred, gt)
            if index < figure_cases:
                report.figure_rows.append(ComparisonRow(
                    case=dataset.ids[index], image=dataset.images[index], fused=pred, samples=samples, gt=gt,
                ))
    finally:
        if model is not None and was_training:
            model.train()
    logger.info('Evaluation finished', extra={'samples': report.count, 'mean_dice': report.mean_dice})
    return report
