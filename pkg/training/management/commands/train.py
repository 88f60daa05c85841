from django.conf import settings

from core.config import write_run_record
from core.exceptions import DataError
from core.management.base import WorkbenchCommand
from corpus.synthdata import load_dataset
from training.forms import build_train_config, train_config_keys
from training.trainer import Trainer

# flag da CLI -> chave do documento de configuração
TRAIN_FLAGS = {
    'epochs': 'epochs',
    'batch_size': 'batch_size',
    'learning_rate': 'learning_rate',
    'max_steps': 'max_steps',
    'checkpoint_every': 'checkpoint_every',
    'eval_every': 'eval_every',
    'lr_schedule': 'lr_schedule',
    'ema_decay': 'ema_decay',
    'num_threads': 'num_threads',
    'device': 'device',
    'preset': 'preset',
    'schedule': 'schedule_kind',
    'steps_T': 'T',
}


def add_train_arguments(parser):
    parser.add_argument('--corpus', help='Corpus root (default: MEDSEG_DATA_ROOT).')
    parser.add_argument('--preset', help='Model preset: S-toy or B-toy.')
    parser.add_argument('--epochs', type=int)
    parser.add_argument('--batch-size', type=int)
    parser.add_argument('--learning-rate', type=float)
    parser.add_argument('--max-steps', type=int)
    parser.add_argument('--checkpoint-every', type=int)
    parser.add_argument('--eval-every', type=int)
    parser.add_argument('--lr-schedule', choices=('constant', 'cosine'))
    parser.add_argument('--ema-decay', type=float)
    parser.add_argument('--num-threads', type=int)
    parser.add_argument('--device')
    parser.add_argument('--schedule', choices=('linear', 'cosine'))
    parser.add_argument('--T', type=int, dest='steps_T', help='Number of diffusion steps.')


def train_overrides(options):
    return {key: options.get(flag) for flag, key in TRAIN_FLAGS.items()}


class Command(WorkbenchCommand):
    help = 'Train the diffusion segmentation network and write checkpoints and the training log.'

    def add_command_arguments(self, parser):
        add_train_arguments(parser)
        parser.add_argument('--no-dycond', action='store_true', help='Disable dynamic conditional encoding.')
        parser.add_argument('--no-ffparser', action='store_true', help='Disable the FF-Parser.')

    def run(self, **options):
        overrides = train_overrides(options)
        if options['no_dycond']:
            overrides['use_dycond'] = False
        if options['no_ffparser']:
            overrides['use_ffparser'] = False
        config = build_train_config(self.resolve_values(options, overrides, train_config_keys()))

        corpus = options.get('corpus') or settings.MEDSEG_DATA_ROOT
        size, channels = config.model.image_size, config.model.in_channels_image
        train_set = load_dataset(corpus, 'train', size, channels)
        if not len(train_set):
            raise DataError('train split is empty', source=str(corpus))
        val_set = load_dataset(corpus, 'val', size, channels)

        out = self.output_dir(options)
        write_run_record(out, self.command_name(), config, seeds={'train': config.seed})
        result = Trainer(config, train_set, val_set, out).run()
        dice = f', val Dice {result.val_dice[-1][1]:.4f}' if result.val_dice else ''
        self.stdout.write(self.style.SUCCESS(
            f'{result.steps} steps, final loss {result.losses[-1]:.4f}{dice}; checkpoint at {out / "checkpoint.zip"}'
        ))
