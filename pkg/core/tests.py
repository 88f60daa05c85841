import json
import tempfile
from dataclasses import dataclass
from pathlib import Path

import torch
import yaml
from django import forms
from django.core.management import load_command_class
from django.test import SimpleTestCase

from .config import prepare_output_dir, read_config_file, resolve_config, to_plain, write_run_record
from .exceptions import ConfigError, DataError, InvalidArgumentError, NumericalError, OutputExistsError
from .forms import ConfigForm, IntegerListField
from .testing import assert_gradients_match, random_indices


@dataclass(frozen=True)
class Point:
    x: int = 1
    sizes: tuple = (2, 3)


class PointForm(ConfigForm):
    config_class = Point

    x = forms.IntegerField(min_value=0)
    sizes = IntegerListField(min_value=1, min_length=2)


class ConfigFileTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'run.yaml'

    def test_flags_win_over_file(self):
        self.path.write_text('x: 4\nsizes: [5, 6]\n')
        values = resolve_config(self.path, {'x': 9, 'sizes': None}, {'x', 'sizes'})
        self.assertEqual(values, {'x': 9, 'sizes': [5, 6]})
        self.assertEqual(resolve_config(None, {'x': 2}, {'x'}), {'x': 2})

    def test_rejects_unknown_and_nested_keys(self):
        self.path.write_text('x: 1\ny: 2\n')
        with self.assertRaises(ConfigError) as caught:
            resolve_config(self.path, {}, {'x'})
        self.assertIn('y', str(caught.exception))
        self.path.write_text('model:\n  depth: 3\n')
        with self.assertRaises(ConfigError):
            read_config_file(self.path)
        self.path.write_text('- 1\n- 2\n')
        with self.assertRaises(ConfigError):
            read_config_file(self.path)
        with self.assertRaises(ConfigError):
            read_config_file(Path(self.tmp.name) / 'missing.yaml')

    def test_empty_file(self):
        self.path.write_text('')
        self.assertEqual(read_config_file(self.path), {})


class ConfigFormTests(SimpleTestCase):
    def test_defaults_and_values(self):
        self.assertEqual(PointForm.from_values({}), Point())
        self.assertEqual(PointForm.from_values({'x': 3, 'sizes': '4, 5,6', 'other': 1}), Point(3, (4, 5, 6)))

    def test_errors_name_the_field(self):
        with self.assertRaises(ConfigError) as caught:
            PointForm.from_values({'sizes': [1]})
        self.assertIn('sizes', caught.exception.errors)
        self.assertIn('sizes', str(caught.exception))
        self.assertIn('Needs at least 2 items.', str(caught.exception))
        with self.assertRaises(ConfigError) as caught:
            PointForm.from_values({'sizes': 'a,b'})
        self.assertIn('Enter a list of integers.', str(caught.exception))
        with self.assertRaises(ConfigError) as caught:
            PointForm.from_values({'sizes': [0, 1], 'x': -1})
        self.assertIn('Every item must be >= 1.', str(caught.exception))
        self.assertIn('Ensure this value is greater than or equal to 0.', str(caught.exception))


class OutputTests(SimpleTestCase):
    def test_prepare_output_dir(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = prepare_output_dir(Path(tmp) / 'a' / 'b')
            self.assertTrue(out.is_dir())
            prepare_output_dir(out)
            (out / 'file.txt').write_text('x')
            with self.assertRaises(OutputExistsError):
                prepare_output_dir(out)
            prepare_output_dir(out, force=True)
            self.assertEqual(list(out.iterdir()), [])

    def test_run_record(self):
        with tempfile.TemporaryDirectory() as tmp:
            write_run_record(tmp, 'demo', Point(), seeds={'demo': 5})
            record = json.loads((Path(tmp) / 'run.json').read_text())
            echoed = yaml.safe_load((Path(tmp) / 'config.yaml').read_text())
        self.assertEqual(record['command'], 'demo')
        self.assertEqual(record['seeds'], {'demo': 5})
        self.assertIn('torch', record['versions'])
        self.assertEqual(echoed, {'x': 1, 'sizes': [2, 3]})

    def test_to_plain(self):
        self.assertEqual(to_plain({'p': Path('a/b'), 's': {3, 1}, 't': (Point(),)}),
                         {'p': 'a/b', 's': [1, 3], 't': [{'x': 1, 'sizes': [2, 3]}]})


class ExitCodeTests(SimpleTestCase):
    def test_families(self):
        self.assertEqual(ConfigError('bad').exit_code, 1)
        self.assertEqual(InvalidArgumentError('bad').exit_code, 1)
        self.assertEqual(OutputExistsError('x').exit_code, 1)
        self.assertEqual(DataError('bad', source='a.png').exit_code, 2)
        self.assertEqual(NumericalError('nan').exit_code, 3)
        self.assertEqual(str(DataError('not binary', source='a.png')), 'a.png: not binary')

    def test_command_line_exit_codes(self):
        command = load_command_class('corpus', 'synth')
        with self.assertRaises(SystemExit) as caught:
            command.run_from_argv(['manage.py', 'synth', '--no-such-flag'])
        self.assertEqual(caught.exception.code, 1)
        with tempfile.TemporaryDirectory() as tmp:
            command = load_command_class('evaluation', 'fuse')
            with self.assertRaises(SystemExit) as caught:
                command.run_from_argv(['manage.py', 'fuse', '--masks', str(Path(tmp) / 'none'),
                                       '--out', str(Path(tmp) / 'out')])
        self.assertEqual(caught.exception.code, 2)


class GradientHelperTests(SimpleTestCase):
    def test_matches_known_gradient(self):
        weights = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
        inputs = torch.randn(4, dtype=torch.float64, requires_grad=True)
        indices = random_indices([weights, inputs], 6, torch.Generator().manual_seed(0))
        self.assertEqual(len(indices), 6)
        self.assertTrue(all(position in (0, 1) for position, _ in indices))
        assert_gradients_match(self, lambda: torch.tanh(weights @ inputs).sum(), [weights, inputs], indices)
