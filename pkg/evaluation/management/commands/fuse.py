from pathlib import Path

import numpy as np

from core.config import write_json, write_run_record
from core.exceptions import DataError
from core.management.base import WorkbenchCommand
from corpus.imageio import read_mask, write_mask_png
from diffusion.sampler import FusionMethod, fuse_masks
from evaluation.staple import DEFAULT_MAX_ITERS, DEFAULT_TOL, RaterStack, staple_fuse

MASK_SUFFIXES = ('.png',)


class Command(WorkbenchCommand):
    help = 'Fuse a folder of binary masks with STAPLE or a majority vote.'
    common_flags = ('out', 'force')

    def add_command_arguments(self, parser):
        parser.add_argument('--masks', required=True, help='Folder of PNG masks of the same shape.')
        parser.add_argument('--method', default=FusionMethod.STAPLE.value, choices=[m.value for m in FusionMethod])
        parser.add_argument('--tol', type=float, default=DEFAULT_TOL)
        parser.add_argument('--max-iters', type=int, default=DEFAULT_MAX_ITERS)

    def run(self, **options):
        folder = Path(options['masks'])
        paths = sorted(path for path in folder.glob('*') if path.suffix.lower() in MASK_SUFFIXES)
        if not paths:
            raise DataError('no PNG masks found', source=str(folder))
        masks = [read_mask(path, source=path.name) for path in paths]
        if len({mask.shape for mask in masks}) > 1:
            raise DataError('masks differ in shape', source=str(folder))
        masks = np.stack(masks)

        if options['method'] == FusionMethod.STAPLE.value:
            estimate = staple_fuse(RaterStack.from_masks(masks), tol=options['tol'], max_iters=options['max_iters'])
            fused = estimate.mask.reshape(masks.shape[1:])
        else:
            fused, estimate = fuse_masks(masks, options['method'])

        out = self.output_dir(options)
        write_run_record(out, self.command_name(), {
            'masks': str(folder), 'method': options['method'], 'tol': options['tol'], 'max_iters': options['max_iters'],
        })
        write_mask_png(out / 'fused.png', fused)
        write_json(out / 'fusion.json', {
            'method': options['method'],
            'raters': [path.name for path in paths],
            'foreground_fraction': float(fused.mean()),
            **({'staple': estimate.summary()} if estimate is not None else {}),
        })
        self.stdout.write(self.style.SUCCESS(f'{len(paths)} masks fused into {out / "fused.png"}'))
