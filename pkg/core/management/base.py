"""Base comum dos comandos do workbench.

Flags comuns (--config, --out, --seed, --force, --jobs) e o mapeamento de
erros para códigos de saída: 0 sucesso, 1 uso, 2 dados, 3 falha numérica.
"""
import logging
import sys

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError

from core.config import prepare_output_dir, resolve_config
from core.exceptions import MedSegError

logger = logging.getLogger(__name__)


class WorkbenchCommand(BaseCommand):
    # flags comuns que o comando não usa ficam fora do parser
    common_flags = ('config', 'out', 'seed', 'force', 'jobs')

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        # erro do argparse vira CommandError com returncode 1
        parser.called_from_command_line = False
        return parser

    def run_from_argv(self, argv):
        try:
            super().run_from_argv(argv)
        except CommandError as exc:
            self.stderr.write(f'{exc.__class__.__name__}: {exc}')
            sys.exit(exc.returncode)

    def add_arguments(self, parser):
        if 'config' in self.common_flags:
            parser.add_argument('--config', help='Flat YAML config file; flags override its values.')
        if 'out' in self.common_flags:
            parser.add_argument('--out', help='Output directory.')
        if 'seed' in self.common_flags:
            parser.add_argument('--seed', type=int, help='Random seed.')
        if 'force' in self.common_flags:
            parser.add_argument('--force', action='store_true', help='Overwrite an existing --out directory.')
        if 'jobs' in self.common_flags:
            parser.add_argument('--jobs', type=int, default=1, help='Parallel workers.')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            return self.run(**options)
        except MedSegError as exc:
            logger.error('Command failed', extra={'command': self.command_name(), 'error': str(exc)})
            raise CommandError(str(exc), returncode=exc.exit_code) from exc

    def run(self, **options):
        raise NotImplementedError

    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def resolve_values(self, options, overrides, known_keys):
        """Arquivo --config + flags; o --seed comum entra como override de ``seed``."""
        overrides = dict(overrides)
        if options.get('seed') is not None:
            overrides['seed'] = options['seed']
        return resolve_config(options.get('config'), overrides, known_keys)

    def output_dir(self, options, default=None):
        default = default or settings.MEDSEG_RUNS_ROOT / self.command_name()
        return prepare_output_dir(options.get('out') or default, options.get('force', False))
