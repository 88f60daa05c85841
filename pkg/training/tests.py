import io
import json
import tempfile
import zipfile
from concurrent.futures import Future
from dataclasses import replace
from pathlib import Path
from unittest import skipUnless

import numpy as np
import pandas as pd
import torch
from django.conf import settings
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from PIL import Image

from core.exceptions import ConfigError, DataError, InvalidArgumentError, NumericalError
from corpus.imageio import write_image_png, write_mask_png
from corpus.synthdata import CorpusSpec, SegmentationDataset, SegSample, generate_corpus, load_dataset, synthesize_sample
from diffusion.sampler import SamplerConfig, sample_ensemble
from diffusion.schedule import build_schedule
from evaluation.harness import evaluate_model
from evaluation.metrics import dice
from network.models import ModelConfig

from .ablation import AblationSpec, Variant, collect_finished, render_table, run_ablation
from .checkpoint import load_checkpoint, read_checkpoint_manifest, save_checkpoint, tensor_digest
from .forms import AblationForm, build_train_config
from .trainer import TrainConfig, Trainer, build_model, train

TINY_MODEL = ModelConfig(
    image_size=16, base_channels=4, stage_block_counts=(1, 1, 1), channel_multipliers=(1, 2, 4),
    time_embed_dim=8, T=20,
)

TINY_CONFIG_YAML = """\
image_size: 16
base_channels: 4
stage_block_counts: [1, 1, 1]
time_embed_dim: 8
T: 20
batch_size: 4
max_steps: 3
eval_every: 0
checkpoint_every: 2
eval_limit: 1
eval_steps: 2
device: cpu
num_threads: 1
"""


def tiny_train_config(**changes):
    values = dict(
        batch_size=4, max_steps=5, eval_every=0, checkpoint_every=0, eval_limit=2, eval_steps=3,
        num_threads=1, device='cpu', log_every=0, model=TINY_MODEL,
    )
    values.update(changes)
    return TrainConfig(**values)


def make_dataset(count, split='train', size=16, seed=0):
    spec = CorpusSpec(train_count=count, val_count=count, test_count=count, image_size=size, seed=seed)
    samples = []
    for index in range(count):
        image, mask = synthesize_sample(spec, split, index)
        samples.append(SegSample(image=image.astype(np.float32) / 255.0, mask=mask,
                                 id=f'{split}_{index:05d}', split=split))
    return SegmentationDataset(samples)


def write_corpus(root, **changes):
    values = dict(train_count=4, val_count=2, test_count=2, image_size=16, seed=1)
    values.update(changes)
    return generate_corpus(CorpusSpec(**values), root)


class TrainConfigTests(SimpleTestCase):
    def test_flat_document_feeds_model_and_training(self):
        config = build_train_config({'preset': 'S-toy', 'batch_size': 8, 'T': 50, 'lr_schedule': 'cosine'})
        self.assertEqual(config.batch_size, 8)
        self.assertEqual(config.T, 50)
        self.assertEqual(config.model.base_channels, 16)
        self.assertEqual(config.lr_schedule, 'cosine')
        self.assertEqual(config.learning_rate, 1e-4)

    def test_invalid_values(self):
        for values in ({'batch_size': 0}, {'learning_rate': 0}, {'ema_decay': 1.5},
                       {'lr_schedule': 'step'}, {'schedule_kind': 'quadratic'}):
            with self.assertRaises(ConfigError, msg=str(values)):
                build_train_config(values)

    def test_ablation_form(self):
        spec = AblationForm.from_values({'variants': 'a:0:0,b:1:1', 'seeds': '4', 'max_steps': 2})
        self.assertEqual(spec.variants, (Variant('a', False, False), Variant('b', True, True)))
        self.assertEqual(spec.seeds, (4,))
        self.assertEqual(spec.train.max_steps, 2)
        self.assertEqual(AblationForm.from_values({}).variants[-1].name, 'full')
        for values in ({'variants': 'only:1:1'}, {'variants': 'a:0:0,a:1:1'}, {'variants': 'a:0,b:1:1'},
                       {'seeds': ''}, {'variants': 'a:yes:0,b:1:1'}):
            with self.assertRaises(ConfigError, msg=str(values)):
                AblationForm.from_values(values)


class TrainerTests(SimpleTestCase):
    def setUp(self):
        self.train_set = make_dataset(4)
        self.val_set = make_dataset(2, split='val')

    def test_initial_loss_is_near_one(self):
        trainer = Trainer(tiny_train_config(max_steps=1), self.train_set)
        self.assertAlmostEqual(trainer.run().losses[0], 1.0, delta=0.2)

    def test_seeded_runs_have_identical_loss_curves(self):
        first = train(tiny_train_config(), self.train_set)
        second = train(tiny_train_config(), self.train_set)
        self.assertEqual(first.losses, second.losses)
        self.assertEqual(len(first.losses), 5)
        other = train(tiny_train_config(seed=1), self.train_set)
        self.assertNotEqual(first.losses, other.losses)

    def test_steps_follow_epochs_and_cap(self):
        self.assertEqual(Trainer(tiny_train_config(epochs=3, max_steps=0, batch_size=3), self.train_set).steps, 6)
        self.assertEqual(Trainer(tiny_train_config(epochs=3, max_steps=4, batch_size=3), self.train_set).steps, 4)

    def test_every_parameter_gets_gradient(self):
        trainer = Trainer(tiny_train_config(max_steps=50, learning_rate=1e-3), self.train_set)
        result = trainer.run()
        names = {name for name, _ in trainer.model.named_parameters()}
        self.assertEqual(names - result.grad_reached, set())

    def test_outputs_and_validation(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = tiny_train_config(max_steps=4, eval_every=2, checkpoint_every=2)
            result = train(config, self.train_set, self.val_set, tmp)
            out = Path(tmp)
            log = pd.read_csv(out / 'train_log.csv')
            self.assertEqual(list(log.columns), ['step', 'loss', 'lr', 'wall_time'])
            self.assertEqual(len(log), 4)
            self.assertTrue((out / 'loss_curve.png').exists())
            self.assertTrue((out / 'checkpoint.zip').exists())
            self.assertTrue((out / 'checkpoints' / 'step_0000002.zip').exists())
            self.assertEqual([step for step, _ in result.val_dice], [2, 4])
            self.assertEqual(len(pd.read_csv(out / 'val_log.csv')), 2)

    def test_training_extras(self):
        config = tiny_train_config(lr_schedule='cosine', ema_decay=0.9, max_steps=4)
        trainer = Trainer(config, self.train_set)
        result = trainer.run()
        self.assertIs(result.model, trainer.ema.module)
        self.assertLess(trainer.optimizer.param_groups[0]['lr'], config.learning_rate)

    def test_nan_loss_aborts_with_snapshot(self):
        self.train_set.images[1] = float('nan')
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(NumericalError) as caught:
                train(tiny_train_config(), self.train_set, out_dir=tmp)
            snapshot = json.loads((Path(tmp) / 'nan_snapshot.json').read_text())
        self.assertEqual(caught.exception.exit_code, 3)
        self.assertEqual(snapshot['step'], 0)
        self.assertIn('train_00001', snapshot['batch_ids'])
        self.assertEqual(len(snapshot['t']), 4)
        self.assertEqual(snapshot['batch_ids'], caught.exception.snapshot['batch_ids'])

    def test_empty_training_split(self):
        with self.assertRaises(InvalidArgumentError):
            Trainer(tiny_train_config(), SegmentationDataset([]))


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'model.zip'

    def test_round_trip_preserves_validation_dice(self):
        val_set = make_dataset(2, split='val')
        config = tiny_train_config(max_steps=3)
        result = train(config, make_dataset(4), out_dir=self.tmp.name)
        schedule = build_schedule(config.T)
        sampler = SamplerConfig(steps=4, ensemble_size=1, seed=5)
        before = evaluate_model(result.model, val_set, schedule, sampler)
        model, manifest = load_checkpoint(Path(self.tmp.name) / 'checkpoint.zip')
        after = evaluate_model(model, val_set, schedule, sampler)
        self.assertEqual(before.per_sample, after.per_sample)
        self.assertEqual(manifest['step'], 3)
        self.assertEqual(manifest['schedule_kind'], 'linear')
        self.assertEqual(manifest['train_config']['batch_size'], 4)

    def test_manifest_lists_tensors(self):
        model = build_model(TINY_MODEL, 0)
        manifest = save_checkpoint(self.path, model, tiny_train_config(), step=7)
        names = {entry['name'] for entry in read_checkpoint_manifest(self.path)['tensors']}
        self.assertEqual(names, set(model.state_dict()))
        self.assertEqual(manifest['content_hash'], tensor_digest(model.state_dict()))
        self.assertEqual(manifest['model_config']['stage_block_counts'], [1, 1, 1])
        loaded, _ = load_checkpoint(self.path)
        for name, tensor in model.state_dict().items():
            self.assertTrue(torch.equal(tensor, loaded.state_dict()[name]), name)

    def test_tampered_tensor_fails_hash(self):
        save_checkpoint(self.path, build_model(TINY_MODEL, 0))
        with zipfile.ZipFile(self.path) as archive:
            entries = {name: archive.read(name) for name in archive.namelist()}
        name = 'tensors/decoder.out.2.bias.npy'
        array = np.load(io.BytesIO(entries[name]))
        buffer = io.BytesIO()
        np.save(buffer, array + 1.0)
        entries[name] = buffer.getvalue()
        with zipfile.ZipFile(self.path, 'w') as archive:
            for entry, data in entries.items():
                archive.writestr(entry, data)
        with self.assertRaises(DataError) as caught:
            load_checkpoint(self.path)
        self.assertIn('hash', str(caught.exception))

    def test_missing_or_corrupt_file(self):
        with self.assertRaises(DataError):
            load_checkpoint(self.path)
        self.path.write_bytes(b'not a zip')
        with self.assertRaises(DataError):
            load_checkpoint(self.path)


class AblationTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.corpus = Path(self.tmp.name) / 'corpus'
        write_corpus(self.corpus)
        self.out = Path(self.tmp.name) / 'ablation'
        self.out.mkdir()
        self.spec = AblationSpec(
            variants=(Variant('vanilla', False, False), Variant('full', True, True)),
            seeds=(0,), train=tiny_train_config(max_steps=2), test_limit=1, test_steps=2, test_ensemble_size=1,
        )

    def test_report_rows_and_shared_initialization(self):
        report = run_ablation(self.spec, self.corpus, self.out)
        self.assertEqual(len(report), 3)
        self.assertEqual(list(report['variant']), ['vanilla', 'full', 'summary'])
        runs = pd.read_csv(self.out / 'ablation_runs.csv')
        self.assertEqual(runs['encoder_image_digest'].nunique(), 1)
        self.assertEqual(set(runs['status']), {'ok'})
        self.assertTrue((self.out / 'vanilla_seed0' / 'checkpoint.zip').exists())
        self.assertTrue((self.out / 'full_seed0' / 'test_metrics.csv').exists())
        text = (self.out / 'ablation.txt').read_text(encoding='utf-8')
        self.assertIn('Dy-Cond', text)
        self.assertIn('✓', text)
        self.assertIn('full - vanilla', text)
        self.assertEqual(len(json.loads((self.out / 'ablation.json').read_text())['report']), 3)

    def test_variants_see_the_same_batches(self):
        results = [
            Trainer(self.spec.train_config(variant, 0), load_dataset(self.corpus, 'train', 16, 1)).run()
            for variant in self.spec.variants
        ]
        self.assertEqual(results[0].losses[0], results[1].losses[0])

    def test_failure_keeps_partial_results(self):
        broken = Path(self.tmp.name) / 'broken'
        write_corpus(broken, test_count=0)
        with self.assertRaises(DataError):
            run_ablation(self.spec, broken, self.out)
        runs = pd.read_csv(self.out / 'ablation_runs.csv')
        self.assertEqual(list(runs['status']), ['failed'])

    def test_finished_jobs_are_kept_after_a_failure(self):
        vanilla, full = self.spec.variants
        finished, broken, skipped = Future(), Future(), Future()
        finished.set_result({'variant': 'vanilla', 'seed': 0, 'status': 'ok'})
        broken.set_exception(DataError('no test samples'))
        skipped.cancel()
        runs, failure = collect_finished({finished: (vanilla, 0), broken: (full, 0), skipped: (vanilla, 1)})
        self.assertEqual([(row['variant'], row['status']) for row in runs], [('vanilla', 'ok'), ('full', 'failed')])
        self.assertIsInstance(failure, DataError)
        self.assertIn('no test samples', runs[1]['error'])

    def test_parallel_failure_waits_for_running_jobs(self):
        broken = Path(self.tmp.name) / 'broken'
        write_corpus(broken, test_count=0)
        with self.assertRaises(DataError):
            run_ablation(self.spec, broken, self.out, jobs=2)
        runs = pd.read_csv(self.out / 'ablation_runs.csv')
        self.assertEqual(sorted(runs['variant']), ['full', 'vanilla'])
        self.assertEqual(set(runs['status']), {'failed'})

    def test_render_marks_flags(self):
        report = run_ablation(self.spec, self.corpus, self.out)
        lines = render_table(self.spec, report).splitlines()
        self.assertNotIn('✓', lines[1])
        self.assertEqual(lines[2].count('✓'), 2)


class CommandTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.base = Path(self.tmp.name)
        self.corpus = self.base / 'corpus'
        write_corpus(self.corpus)
        self.config = self.base / 'train.yaml'
        self.config.write_text(TINY_CONFIG_YAML)

    def train(self):
        out = self.base / 'run'
        call_command('train', '--config', str(self.config), '--corpus', str(self.corpus), '--out', str(out))
        return out

    def test_train_writes_run_record(self):
        out = self.train()
        record = json.loads((out / 'run.json').read_text())
        self.assertEqual(record['command'], 'train')
        self.assertEqual(record['config']['model']['image_size'], 16)
        self.assertEqual(record['seeds'], {'train': 0})
        self.assertTrue((out / 'checkpoint.zip').exists())
        with self.assertRaises(CommandError) as caught:
            self.train()
        self.assertEqual(caught.exception.returncode, 1)

    def test_missing_corpus_is_a_data_error(self):
        with self.assertRaises(CommandError) as caught:
            call_command('train', '--config', str(self.config), '--corpus', str(self.base / 'none'),
                         '--out', str(self.base / 'x'))
        self.assertEqual(caught.exception.returncode, 2)

    def test_eval_oracle_scores_one(self):
        out = self.train()
        eval_out = self.base / 'eval'
        call_command('eval', '--checkpoint', str(out / 'checkpoint.zip'), '--corpus', str(self.corpus),
                     '--split', 'train', '--oracle', '--out', str(eval_out))
        summary = json.loads((eval_out / 'metrics.json').read_text())
        self.assertEqual(summary['mean_dice'], 1.0)
        self.assertEqual(summary['count'], 4)
        call_command('eval', '--corpus', str(self.corpus), '--oracle', '--out', str(self.base / 'plain'))

    def test_eval_and_sample_with_checkpoint(self):
        checkpoint = str(self.train() / 'checkpoint.zip')
        call_command('eval', '--checkpoint', checkpoint, '--corpus', str(self.corpus), '--steps', '2',
                     '--limit', '1', '--figure', '--out', str(self.base / 'eval'))
        self.assertEqual(len(pd.read_csv(self.base / 'eval' / 'metrics.csv')), 1)
        # image, gabarito, uma amostra, fundida
        self.assertEqual(Image.open(self.base / 'eval' / 'comparison.png').size, (800, 200))

        image, mask = synthesize_sample(CorpusSpec(image_size=16), 'test', 0)
        write_image_png(self.base / 'image.png', image)
        write_mask_png(self.base / 'mask.png', mask)
        out = self.base / 'sample'
        call_command('sample', '--checkpoint', checkpoint, '--image', str(self.base / 'image.png'),
                     '--mask', str(self.base / 'mask.png'), '--steps', '2', '--ensemble-size', '3',
                     '--figure', '--out', str(out))
        self.assertEqual(Image.open(out / 'comparison.png').size, (1200, 200))
        self.assertEqual(sorted(p.name for p in out.glob('sample_*.png')),
                         ['sample_00.png', 'sample_01.png', 'sample_02.png'])
        provenance = json.loads((out / 'provenance.json').read_text())
        self.assertEqual(len(provenance['seeds']), 3)
        self.assertEqual(len(provenance['dice']['samples']), 3)
        self.assertTrue((out / 'fused.png').exists())

    def test_eval_requires_checkpoint_without_oracle(self):
        with self.assertRaises(CommandError) as caught:
            call_command('eval', '--corpus', str(self.corpus), '--out', str(self.base / 'e'))
        self.assertEqual(caught.exception.returncode, 1)

    def test_ablate_command(self):
        out = self.base / 'ablate'
        call_command('ablate', '--config', str(self.config), '--corpus', str(self.corpus), '--out', str(out),
                     '--variants', 'vanilla:0:0,dycond:1:0', '--seeds', '0', '--max-steps', '1',
                     '--test-limit', '1', '--test-steps', '2', '--test-ensemble-size', '1')
        self.assertEqual(len(pd.read_csv(out / 'ablation.csv')), 3)
        self.assertTrue((out / 'config.yaml').exists())


@skipUnless(settings.MEDSEG_SLOW_TESTS, 'set MEDSEG_SLOW_TESTS=1 to run the long training checks')
class SlowTrainingTests(SimpleTestCase):
    def test_overfits_four_images(self):
        model = ModelConfig(image_size=32, base_channels=16, stage_block_counts=(1, 1, 1), T=1000)
        config = tiny_train_config(max_steps=500, learning_rate=1e-3, model=model)
        losses = train(config, make_dataset(4, size=32)).losses
        self.assertLessEqual(np.mean(losses[-50:]), 0.2 * np.mean(losses[:10]))

    def test_default_config_has_no_dead_parameters(self):
        trainer = Trainer(tiny_train_config(max_steps=50, batch_size=2, model=ModelConfig()), make_dataset(4, size=64))
        result = trainer.run()
        names = {name for name, _ in trainer.model.named_parameters()}
        self.assertEqual(names - result.grad_reached, set())

    def test_ablation_ordering_on_default_corpus(self):
        with tempfile.TemporaryDirectory() as tmp:
            corpus = Path(tmp) / 'corpus'
            generate_corpus(CorpusSpec(), corpus)
            model = ModelConfig(base_channels=16, stage_block_counts=(1, 1, 1))
            spec = AblationSpec(train=replace(tiny_train_config(), max_steps=4000, batch_size=16, model=model),
                                test_steps=100, test_ensemble_size=5)
            out = Path(tmp) / 'ablation'
            out.mkdir()
            report = run_ablation(spec, corpus, out).set_index('variant')
        means = report.loc[['vanilla', 'dycond', 'full'], 'mean_dice']
        self.assertGreaterEqual(means['full'], means['dycond'])
        self.assertGreaterEqual(means['dycond'], means['vanilla'])
        self.assertGreaterEqual(means['full'] - means['vanilla'], 0.01)


@skipUnless(settings.MEDSEG_SLOW_TESTS, 'set MEDSEG_SLOW_TESTS=1 to run the long training checks')
class EndToEndTests(SimpleTestCase):
    """Modelo toy completo treinado uma vez no corpus padrão (200 treino / 50 teste, 64x64)."""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.tmp = tempfile.TemporaryDirectory()
        corpus = Path(cls.tmp.name) / 'corpus'
        generate_corpus(CorpusSpec(), corpus)
        model = ModelConfig(base_channels=16, stage_block_counts=(1, 1, 1))
        config = replace(tiny_train_config(), max_steps=6000, batch_size=16, model=model, device='auto', num_threads=0)
        cls.model = train(config, load_dataset(corpus, 'train')).model.eval()
        cls.test_set = load_dataset(corpus, 'test')
        cls.schedule = build_schedule(model.T)
        cls.device = next(cls.model.parameters()).device

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()
        super().tearDownClass()

    def test_test_dice(self):
        report = evaluate_model(self.model, self.test_set, self.schedule, SamplerConfig(steps=100, ensemble_size=5))
        self.assertGreaterEqual(report.mean_dice, 0.85)

    def test_ensemble_is_at_least_as_good_as_single_chains(self):
        sampler = SamplerConfig(steps=100)
        ensemble, single = [], []
        for index in range(20):
            gt = self.test_set.gt_masks[index]
            result = sample_ensemble(self.test_set.images[index].to(self.device), self.model, self.schedule, sampler)
            ensemble.append(dice(result.fused, gt))
            single.append(np.mean([dice(mask, gt) for mask in result.samples]))
        self.assertEqual(len(result.samples), 25)
        self.assertGreaterEqual(np.mean(ensemble), np.mean(single))
