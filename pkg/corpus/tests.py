import json
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase
from PIL import Image

from core.exceptions import ConfigError, DataError, OutputExistsError

from .forms import CorpusSpecForm
from .imageio import read_mask, write_mask_png
from .synthdata import (
    SPLITS, CorpusSpec, SegmentationDataset, ShapeFamily, draw_region, generate_corpus, import_folder,
    load_corpus, load_dataset, read_manifest, sample_rng, synthesize_sample,
)


def small_spec(**changes):
    values = dict(train_count=6, val_count=2, test_count=2, image_size=32, seed=3)
    values.update(changes)
    return CorpusSpec(**values)


class SynthesisTests(SimpleTestCase):
    def test_noiseless_high_contrast_is_separable(self):
        spec = small_spec(contrast=1.0, noise_std=0.0, blur_radius=0.0)
        for index in range(5):
            image, mask = synthesize_sample(spec, 'train', index)
            foreground = image[mask == 1, 0]
            background = image[mask == 0, 0]
            self.assertGreater(foreground.min(), background.max())

    def test_same_seed_gives_identical_samples(self):
        spec = small_spec()
        first = synthesize_sample(spec, 'val', 1)
        second = synthesize_sample(spec, 'val', 1)
        np.testing.assert_array_equal(first[0], second[0])
        np.testing.assert_array_equal(first[1], second[1])
        other = synthesize_sample(small_spec(seed=4), 'val', 1)
        self.assertFalse(np.array_equal(first[0], other[0]))

    def test_area_fraction_stays_in_range(self):
        spec = CorpusSpec()
        fractions = [draw_region(sample_rng(spec, 'train', index), spec).mean() for index in range(500)]
        self.assertGreaterEqual(min(fractions), 0.05)
        self.assertLessEqual(max(fractions), 0.30)

    def test_every_shape_family(self):
        for family in ShapeFamily:
            spec = small_spec(shape=family.value)
            image, mask = synthesize_sample(spec, 'test', 0)
            self.assertEqual(image.shape, (32, 32, 1))
            self.assertTrue(0.05 <= mask.mean() <= 0.30, family)

    def test_color_images(self):
        image, mask = synthesize_sample(small_spec(channels=3), 'train', 0)
        self.assertEqual(image.shape, (32, 32, 3))
        self.assertEqual(image.dtype, np.uint8)
        self.assertEqual(mask.shape, (32, 32))


class CorpusFilesTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.root = Path(self.tmp.name) / 'corpus'
        self.spec = small_spec()
        self.manifest = generate_corpus(self.spec, self.root)

    def test_regeneration_is_hash_stable(self):
        again = generate_corpus(self.spec, Path(self.tmp.name) / 'again')
        self.assertEqual(again, self.manifest)

    def test_refuses_to_overwrite(self):
        with self.assertRaises(OutputExistsError):
            generate_corpus(self.spec, self.root)
        generate_corpus(self.spec, self.root, force=True)

    def test_parallel_generation_matches(self):
        parallel = generate_corpus(self.spec, Path(self.tmp.name) / 'parallel', jobs=2)
        self.assertEqual(parallel, self.manifest)

    def test_round_trip_is_pixel_identical(self):
        for split in SPLITS:
            samples = list(load_corpus(self.root, split))
            self.assertEqual(len(samples), self.spec.count(split))
            for index, sample in enumerate(samples):
                image, mask = synthesize_sample(self.spec, split, index)
                np.testing.assert_array_equal(np.round(sample.image * 255).astype(np.uint8), image)
                np.testing.assert_array_equal(sample.mask, mask)

    def test_splits_are_disjoint(self):
        ids = [{entry['id'] for entry in read_manifest(self.root)['splits'][split]} for split in SPLITS]
        self.assertFalse(ids[0] & ids[1] or ids[0] & ids[2] or ids[1] & ids[2])

    def test_empty_split(self):
        root = Path(self.tmp.name) / 'no-test'
        generate_corpus(small_spec(test_count=0), root)
        self.assertEqual(list(load_corpus(root, 'test')), [])

    def test_resize_keeps_masks_binary(self):
        for sample in load_corpus(self.root, 'train', image_size=16):
            self.assertEqual(sample.image.shape, (16, 16, 1))
            self.assertTrue(np.isin(sample.mask, (0, 1)).all())

    def test_non_binary_mask_names_the_file(self):
        entry = self.manifest['splits']['val'][0]
        mask = np.zeros((32, 32), dtype=np.uint8)
        mask[4:8, 4:8] = 128
        Image.fromarray(mask).save(self.root / entry['mask'])
        with self.assertRaises(DataError) as caught:
            list(load_corpus(self.root, 'val'))
        self.assertIn(entry['id'], str(caught.exception))
        self.assertIn('.png', str(caught.exception))

    def test_missing_manifest(self):
        with self.assertRaises(DataError):
            list(load_corpus(Path(self.tmp.name) / 'nowhere', 'train'))

    def test_dataset_tensors(self):
        dataset = SegmentationDataset(load_corpus(self.root, 'train'))
        self.assertEqual(len(dataset), 6)
        image, mask, index = dataset[2]
        self.assertEqual(tuple(image.shape), (1, 32, 32))
        self.assertEqual(tuple(mask.shape), (1, 32, 32))
        self.assertEqual(set(torch.unique(mask).tolist()) - {-1.0, 1.0}, set())
        self.assertEqual(index, 2)
        self.assertEqual(dataset.ids[2], 'train_00002')


class ImportFolderTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        base = Path(self.tmp.name)
        self.images, self.masks, self.root = base / 'images', base / 'masks', base / 'corpus'
        self.images.mkdir()
        self.masks.mkdir()
        generator = np.random.default_rng(0)
        for name in ('case_a', 'case_b'):
            Image.fromarray(generator.integers(0, 255, (24, 24), dtype=np.uint8)).save(self.images / f'{name}.png')
            mask = np.zeros((24, 24), dtype=np.uint8)
            mask[5:15, 6:12] = 1
            Image.fromarray(mask).save(self.masks / f'{name}.png')

    def test_import_and_load(self):
        manifest = import_folder(self.images, self.masks, self.root, split='test', image_size=16)
        self.assertEqual([entry['id'] for entry in manifest['splits']['test']], ['case_a', 'case_b'])
        samples = list(load_corpus(self.root, 'test'))
        self.assertEqual(samples[0].image.shape, (16, 16, 1))
        self.assertEqual(read_mask(self.root / 'test' / 'masks' / 'case_a.png').max(), 1)

    def test_existing_split_needs_force(self):
        import_folder(self.images, self.masks, self.root)
        with self.assertRaises(OutputExistsError):
            import_folder(self.images, self.masks, self.root)
        import_folder(self.images, self.masks, self.root, force=True)

    def test_missing_mask(self):
        (self.masks / 'case_b.png').unlink()
        with self.assertRaises(DataError) as caught:
            import_folder(self.images, self.masks, self.root)
        self.assertIn('case_b', str(caught.exception))

    def test_mixed_sizes_need_an_image_size(self):
        generator = np.random.default_rng(1)
        Image.fromarray(generator.integers(0, 255, (20, 20), dtype=np.uint8)).save(self.images / 'case_b.png')
        Image.fromarray(np.ones((20, 20), dtype=np.uint8)).save(self.masks / 'case_b.png')
        import_folder(self.images, self.masks, self.root, split='test')
        with self.assertRaises(DataError) as caught:
            load_dataset(self.root, 'test')
        self.assertEqual(caught.exception.source, 'case_b')
        self.assertEqual(load_dataset(self.root, 'test', image_size=16).images.shape, (2, 1, 16, 16))

        with self.assertRaises(CommandError) as caught:
            call_command('eval', corpus=str(self.root), split='test', oracle=True,
                         out=str(Path(self.tmp.name) / 'eval'))
        self.assertEqual(caught.exception.returncode, 2)

    def test_ingest_command(self):
        call_command('ingest', images=str(self.images), masks=str(self.masks), out=str(self.root), split='val')
        self.assertEqual(len(read_manifest(self.root)['splits']['val']), 2)


class CorpusSpecFormTests(SimpleTestCase):
    def test_defaults(self):
        self.assertEqual(CorpusSpecForm.from_values({}), CorpusSpec())

    def test_invalid_values(self):
        for values in ({'contrast': 0}, {'area_min': 0.4, 'area_max': 0.2}, {'channels': 2},
                       {'train_count': 0, 'val_count': 0, 'test_count': 0}, {'shape': 'star'}):
            with self.assertRaises(ConfigError, msg=str(values)):
                CorpusSpecForm.from_values(values)


class SynthCommandTests(SimpleTestCase):
    def test_same_seed_gives_identical_manifests(self):
        with tempfile.TemporaryDirectory() as tmp:
            manifests = []
            for name in ('a', 'b'):
                out = Path(tmp) / name
                call_command('synth', '--out', str(out), '--count', '10', '--seed', '7',
                             '--val-count', '2', '--test-count', '2', '--image-size', '32')
                manifests.append((out / 'manifest.json').read_text())
                record = json.loads((out / 'run.json').read_text())
                self.assertEqual(record['seeds'], {'corpus': 7})
                self.assertTrue((out / 'config.yaml').exists())
            self.assertEqual(manifests[0], manifests[1])

    def test_collision_and_usage_errors(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / 'd'
            call_command('synth', '--out', str(out), '--count', '2', '--val-count', '0',
                         '--test-count', '0', '--image-size', '16')
            with self.assertRaises(CommandError) as caught:
                call_command('synth', '--out', str(out), '--count', '2')
            self.assertEqual(caught.exception.returncode, 1)
            with self.assertRaises(CommandError) as caught:
                call_command('synth', '--out', str(Path(tmp) / 'e'), '--contrast', '3')
            self.assertEqual(caught.exception.returncode, 1)

    def test_config_file_and_unknown_keys(self):
        with tempfile.TemporaryDirectory() as tmp:
            config = Path(tmp) / 'corpus.yaml'
            config.write_text('train_count: 3\nval_count: 1\ntest_count: 1\nimage_size: 16\nshape: blob\n')
            out = Path(tmp) / 'from-file'
            call_command('synth', '--config', str(config), '--out', str(out))
            self.assertEqual(read_manifest(out)['spec']['shape'], 'blob')

            config.write_text('train_count: 3\nlesion_size: 4\n')
            with self.assertRaises(CommandError) as caught:
                call_command('synth', '--config', str(config), '--out', str(Path(tmp) / 'bad'))
            self.assertIn('lesion_size', str(caught.exception))


class MaskWriterTests(SimpleTestCase):
    def test_masks_are_stored_as_0_255(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'm.png'
            write_mask_png(path, np.array([[0, 1], [1, 0]], dtype=np.uint8))
            self.assertEqual(set(np.unique(np.asarray(Image.open(path))).tolist()), {0, 255})
            np.testing.assert_array_equal(read_mask(path), [[0, 1], [1, 0]])
