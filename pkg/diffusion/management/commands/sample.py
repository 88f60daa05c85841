from pathlib import Path

import torch

from core.config import write_json, write_run_record
from core.management.base import WorkbenchCommand
from core.runtime import resolve_device
from corpus.imageio import read_image, read_mask, write_mask_png
from diffusion.forms import SamplerConfigForm
from diffusion.sampler import sample_ensemble
from evaluation.figures import ComparisonRow, comparison_figure
from evaluation.metrics import dice
from training.checkpoint import load_checkpoint, schedule_from_manifest


class Command(WorkbenchCommand):
    help = 'Sample a mask ensemble for one image and write every sample and the fused mask.'
    common_flags = ('config', 'out', 'seed', 'force')

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--image', required=True, help='PNG image to segment.')
        parser.add_argument('--mask', help='Optional ground-truth mask; adds Dice to the provenance record.')
        parser.add_argument('--steps', type=int, help='Inference steps (respaced schedule).')
        parser.add_argument('--ensemble-size', type=int)
        parser.add_argument('--fusion', choices=('staple', 'mean-vote'))
        parser.add_argument('--threshold', type=float)
        parser.add_argument('--chain-batch', type=int)
        parser.add_argument('--no-clip-x0', dest='clip_x0', action='store_false', default=None,
                            help='Do not clamp the x0 estimate to [-1, 1] inside each reverse step.')
        parser.add_argument('--figure', action='store_true',
                            help='Also write comparison.png (image, ground truth, samples, fused mask).')
        parser.add_argument('--device')

    def run(self, **options):
        keys = ('steps', 'ensemble_size', 'fusion', 'threshold', 'chain_batch', 'clip_x0')
        values = self.resolve_values(options, {key: options.get(key) for key in keys}, SamplerConfigForm.known_keys())
        config = SamplerConfigForm.from_values(values)

        device = resolve_device(options.get('device'))
        model, manifest = load_checkpoint(options['checkpoint'], device=device)
        model.eval()
        schedule = schedule_from_manifest(manifest)
        size = model.config.image_size
        image = read_image(options['image'], size=size, channels=model.config.in_channels_image)
        image = torch.from_numpy(image).permute(2, 0, 1).to(device)

        out = self.output_dir(options)
        write_run_record(out, self.command_name(), config, seeds={'sampler': config.seed})
        result = sample_ensemble(image, model, schedule, config)
        for index, mask in enumerate(result.samples):
            write_mask_png(out / f'sample_{index:02d}.png', mask)
        write_mask_png(out / 'fused.png', result.fused)

        record = {
            **result.provenance(),
            'checkpoint': str(options['checkpoint']),
            'checkpoint_hash': manifest['content_hash'],
            'image': str(options['image']),
        }
        gt = None
        if options.get('mask'):
            gt = read_mask(options['mask'], size=size)
            record['dice'] = {
                'fused': dice(result.fused, gt),
                'samples': [dice(mask, gt) for mask in result.samples],
            }
        write_json(out / 'provenance.json', record)
        if options['figure']:
            row = ComparisonRow(case=Path(options['image']).name, image=image, fused=result.fused,
                                samples=result.samples, gt=gt)
            comparison_figure(out / 'comparison.png', [row])
        self.stdout.write(self.style.SUCCESS(f'{len(result.samples)} samples and fused mask written to {out}'))
