from pathlib import Path

from django.conf import settings

from core.config import write_run_record
from core.management.base import WorkbenchCommand
from corpus.forms import CorpusSpecForm
from corpus.synthdata import generate_corpus


class Command(WorkbenchCommand):
    help = 'Generate the synthetic corpus splits and their manifest.'

    def add_command_arguments(self, parser):
        parser.add_argument('--count', type=int, dest='train_count', help='Number of training samples.')
        parser.add_argument('--val-count', type=int)
        parser.add_argument('--test-count', type=int)
        parser.add_argument('--image-size', type=int)
        parser.add_argument('--channels', type=int)
        parser.add_argument('--contrast', type=float)
        parser.add_argument('--noise-std', type=float)
        parser.add_argument('--blur-radius', type=float)
        parser.add_argument('--shape', help='ellipse, blob or crescent.')

    def run(self, **options):
        keys = ('train_count', 'val_count', 'test_count', 'image_size', 'channels',
                'contrast', 'noise_std', 'blur_radius', 'shape')
        values = self.resolve_values(options, {key: options.get(key) for key in keys}, CorpusSpecForm.known_keys())
        spec = CorpusSpecForm.from_values(values)
        root = Path(options.get('out') or settings.MEDSEG_DATA_ROOT)

        manifest = generate_corpus(spec, root, force=options['force'], jobs=options['jobs'])
        write_run_record(root, self.command_name(), spec, seeds={'corpus': spec.seed})
        counts = ', '.join(f'{split}={len(entries)}' for split, entries in manifest['splits'].items())
        self.stdout.write(self.style.SUCCESS(f'Corpus written to {root} ({counts})'))
