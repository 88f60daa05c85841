"""Dice e IoU para máscaras binárias, e o relatório por amostra."""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from core.config import write_json
from core.exceptions import InvalidArgumentError

logger = logging.getLogger(__name__)

# duas máscaras vazias concordam perfeitamente
EMPTY_SCORE = 1.0


def _binary(mask, name):
    mask = np.asarray(mask)
    if mask.dtype != bool and not np.isin(mask, (0, 1)).all():
        raise InvalidArgumentError(f'{name} mask is not binary')
    return mask.astype(bool)


def _counts(pred, gt):
    pred = _binary(pred, 'pred')
    gt = _binary(gt, 'gt')
    if pred.shape != gt.shape:
        raise InvalidArgumentError(f'pred {pred.shape} and gt {gt.shape} differ in shape')
    intersection = int(np.logical_and(pred, gt).sum())
    return intersection, int(pred.sum()), int(gt.sum())


def dice(pred, gt, empty_score=EMPTY_SCORE):
    intersection, size_pred, size_gt = _counts(pred, gt)
    if size_pred + size_gt == 0:
        return float(empty_score)
    return 2.0 * intersection / (size_pred + size_gt)


def iou(pred, gt, empty_score=EMPTY_SCORE):
    intersection, size_pred, size_gt = _counts(pred, gt)
    union = size_pred + size_gt - intersection
    if union == 0:
        return float(empty_score)
    return intersection / union


@dataclass
class MetricReport:
    per_sample: list = field(default_factory=list)
    empty_score: float = EMPTY_SCORE
    figure_rows: list = field(default_factory=list, repr=False)

    def add(self, sample_id, pred, gt):
        row = (sample_id, dice(pred, gt, self.empty_score), iou(pred, gt, self.empty_score))
        self.per_sample.append(row)
        return row

    @property
    def count(self):
        return len(self.per_sample)

    @property
    def mean_dice(self):
        return float(np.mean([row[1] for row in self.per_sample])) if self.per_sample else float('nan')

    @property
    def mean_iou(self):
        return float(np.mean([row[2] for row in self.per_sample])) if self.per_sample else float('nan')

    def to_frame(self):
        return pd.DataFrame(self.per_sample, columns=['id', 'dice', 'iou'])

    def summary(self):
        return {
            'count': self.count,
            'mean_dice': self.mean_dice,
            'mean_iou': self.mean_iou,
            'empty_score': self.empty_score,
        }

    def write(self, out_dir, stem='metrics'):
        out_dir = Path(out_dir)
        self.to_frame().to_csv(out_dir / f'{stem}.csv', index=False)
        write_json(out_dir / f'{stem}.json', {
            **self.summary(),
            'per_sample': [{'id': sid, 'dice': d, 'iou': j} for sid, d, j in self.per_sample],
        })
        logger.info('Metric report written', extra={'out': str(out_dir), **self.summary()})
