from django.conf import settings

from core.config import write_run_record
from core.exceptions import InvalidArgumentError
from core.management.base import WorkbenchCommand
from core.runtime import resolve_device
from corpus.synthdata import SPLITS, load_dataset, manifest_image_size, read_manifest
from diffusion.forms import SamplerConfigForm
from evaluation.figures import comparison_figure
from evaluation.harness import evaluate_model
from evaluation.metrics import EMPTY_SCORE
from training.checkpoint import load_checkpoint, schedule_from_manifest


class Command(WorkbenchCommand):
    help = 'Score a checkpoint on a corpus split (per-sample and mean Dice and IoU).'
    common_flags = ('config', 'out', 'seed', 'force')

    def add_command_arguments(self, parser):
        parser.add_argument('--checkpoint', help='Checkpoint archive (optional with --oracle).')
        parser.add_argument('--corpus', help='Corpus root (default: MEDSEG_DATA_ROOT).')
        parser.add_argument('--split', default='test', choices=SPLITS)
        parser.add_argument('--limit', type=int, help='Evaluate only the first N samples.')
        parser.add_argument('--steps', type=int)
        parser.add_argument('--ensemble-size', type=int)
        parser.add_argument('--fusion', choices=('staple', 'mean-vote'))
        parser.add_argument('--threshold', type=float)
        parser.add_argument('--chain-batch', type=int)
        parser.add_argument('--no-clip-x0', dest='clip_x0', action='store_false', default=None,
                            help='Do not clamp the x0 estimate to [-1, 1] inside each reverse step.')
        parser.add_argument('--empty-score', type=float, default=EMPTY_SCORE,
                            help='Dice/IoU when prediction and ground truth are both empty.')
        parser.add_argument('--oracle', action='store_true',
                            help='Use the ground truth as prediction (pipeline check).')
        parser.add_argument('--figure', type=int, nargs='?', const=4, default=0, metavar='N',
                            help='Write comparison.png for the first N cases (default 4).')
        parser.add_argument('--device')

    def run(self, **options):
        keys = ('steps', 'ensemble_size', 'fusion', 'threshold', 'chain_batch', 'clip_x0')
        values = self.resolve_values(options, {key: options.get(key) for key in keys}, SamplerConfigForm.known_keys())
        values.setdefault('ensemble_size', 1)
        config = SamplerConfigForm.from_values(values)
        if not options['oracle'] and not options.get('checkpoint'):
            raise InvalidArgumentError('--checkpoint is required unless --oracle is given')
        if options['figure'] < 0:
            raise InvalidArgumentError(f'--figure must be >= 0, got {options["figure"]}')
        corpus = options.get('corpus') or settings.MEDSEG_DATA_ROOT

        model = schedule = None
        manifest = {}
        size, channels = manifest_image_size(read_manifest(corpus)), None
        if options.get('checkpoint'):
            model, manifest = load_checkpoint(options['checkpoint'], device=resolve_device(options.get('device')))
            model.eval()
            schedule = schedule_from_manifest(manifest)
            size, channels = model.config.image_size, model.config.in_channels_image
        dataset = load_dataset(corpus, options['split'], size, channels)

        out = self.output_dir(options)
        write_run_record(out, self.command_name(), {
            'sampler': config, 'split': options['split'], 'limit': options['limit'],
            'empty_score': options['empty_score'], 'oracle': options['oracle'],
            'checkpoint': options.get('checkpoint'), 'checkpoint_hash': manifest.get('content_hash'),
        }, seeds={'sampler': config.seed})
        report = evaluate_model(
            model, dataset, schedule, config, limit=options['limit'],
            empty_score=options['empty_score'], oracle=options['oracle'], figure_cases=options['figure'],
        )
        report.write(out)
        if report.figure_rows:
            comparison_figure(out / 'comparison.png', report.figure_rows)
        self.stdout.write(self.style.SUCCESS(
            f'{report.count} samples: mean Dice {report.mean_dice:.4f}, mean IoU {report.mean_iou:.4f}'
        ))
