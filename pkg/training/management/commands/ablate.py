from django.conf import settings

from core.config import write_run_record
from core.management.base import WorkbenchCommand
from training.ablation import render_table, run_ablation
from training.forms import AblationForm
from training.management.commands.train import add_train_arguments, train_overrides


class Command(WorkbenchCommand):
    help = 'Dy-Cond / FF-Parser ablation: train every (variant, seed) pair and tabulate test Dice.'
    common_flags = ('config', 'out', 'force', 'jobs')

    def add_command_arguments(self, parser):
        add_train_arguments(parser)
        parser.add_argument('--variants', help='Comma list of name:dycond:ffparser, e.g. vanilla:0:0,full:1:1.')
        parser.add_argument('--seeds', help='Comma list of seeds, e.g. 0,1,2.')
        parser.add_argument('--test-limit', type=int, help='Test samples to evaluate (0 = all).')
        parser.add_argument('--test-steps', type=int)
        parser.add_argument('--test-ensemble-size', type=int)

    def run(self, **options):
        overrides = {
            **train_overrides(options),
            **{key: options.get(key) for key in ('variants', 'seeds', 'test_limit', 'test_steps', 'test_ensemble_size')},
        }
        spec = AblationForm.from_values(self.resolve_values(options, overrides, AblationForm.known_keys()))
        corpus = options.get('corpus') or settings.MEDSEG_DATA_ROOT

        out = self.output_dir(options)
        write_run_record(out, self.command_name(), spec, seeds={'ablation': list(spec.seeds)})
        report = run_ablation(spec, corpus, out, jobs=options['jobs'])
        self.stdout.write(render_table(spec, report))
