from pathlib import Path

from django.conf import settings

from core.config import write_run_record
from core.management.base import WorkbenchCommand
from corpus.synthdata import SPLITS, import_folder


class Command(WorkbenchCommand):
    help = 'Import an image folder and a mask folder (matching file names) into the corpus layout.'
    common_flags = ('out', 'force')

    def add_command_arguments(self, parser):
        parser.add_argument('--images', required=True, help='Folder with the images.')
        parser.add_argument('--masks', required=True, help='Folder with {0,1} or {0,255} masks.')
        parser.add_argument('--split', default='train', choices=SPLITS)
        parser.add_argument('--image-size', type=int, help='Resize images (bilinear) and masks (nearest).')
        parser.add_argument('--channels', type=int, default=1, choices=(1, 3))

    def run(self, **options):
        root = Path(options.get('out') or settings.MEDSEG_DATA_ROOT)
        manifest = import_folder(
            options['images'], options['masks'], root, split=options['split'], force=options['force'],
            image_size=options['image_size'], channels=options['channels'],
        )
        write_run_record(root, self.command_name(), {
            key: options[key] for key in ('images', 'masks', 'split', 'image_size', 'channels')
        })
        count = len(manifest['splits'][options['split']])
        self.stdout.write(self.style.SUCCESS(f'{count} samples imported into {root}/{options["split"]}'))
