"""Grade de comparação: uma linha por caso (imagem, gabarito, amostras, fundida)."""
from dataclasses import dataclass, field

import numpy as np
import torch
from matplotlib.figure import Figure

from core.exceptions import InvalidArgumentError

MAX_SAMPLES_SHOWN = 5
PANEL_INCHES = 2
DPI = 100


@dataclass
class ComparisonRow:
    case: str
    image: object
    fused: np.ndarray
    samples: list = field(default_factory=list)
    gt: np.ndarray = None


def _picture(image):
    # (C, H, W) tensor ou (H, W, C) array -> (H, W) ou (H, W, 3) em [0, 1]
    if isinstance(image, torch.Tensor):
        image = image.detach().cpu().permute(1, 2, 0).numpy()
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3 and image.shape[-1] == 1:
        image = image[..., 0]
    return np.clip(image, 0.0, 1.0)


def comparison_figure(path, rows, max_samples=MAX_SAMPLES_SHOWN):
    if not rows:
        raise InvalidArgumentError('a comparison figure needs at least one case')
    with_gt = any(row.gt is not None for row in rows)
    shown = min(max_samples, max(len(row.samples) for row in rows))
    titles = ['image'] + (['ground truth'] if with_gt else []) + [f'sample {i}' for i in range(shown)] + ['fused']

    figure = Figure(figsize=(PANEL_INCHES * len(titles), PANEL_INCHES * len(rows)))
    axes = figure.subplots(len(rows), len(titles), squeeze=False)
    for r, row in enumerate(rows):
        masks = ([row.gt] if with_gt else []) + list(row.samples[:shown])
        masks += [None] * (shown + with_gt - len(masks)) + [row.fused]
        axes[r, 0].imshow(_picture(row.image), cmap='gray', vmin=0.0, vmax=1.0)
        axes[r, 0].set_title(row.case if r else f'{titles[0]}\n{row.case}', fontsize=8)
        for c, mask in enumerate(masks, start=1):
            if mask is not None:
                axes[r, c].imshow(np.asarray(mask), cmap='gray', vmin=0, vmax=1, interpolation='nearest')
            if r == 0:
                axes[r, c].set_title(titles[c], fontsize=8)
        for axis in axes[r]:
            axis.set_axis_off()
    figure.savefig(path, dpi=DPI)
    return len(rows), len(titles)
