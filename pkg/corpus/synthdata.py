"""Corpus sintético de "lesões ambíguas" e importação de pastas reais.

Layout em disco::

    <root>/manifest.json
    <root>/{train,val,test}/images/<id>.png
    <root>/{train,val,test}/masks/<id>.png      (valores {0, 255})

Cada amostra é um campo de fundo suave com uma região de frente clareada por
``contrast``, borrada por ``blur_radius`` e com ruído aditivo ``noise_std``. O
gabarito é a região antes do borrão. Cada amostra tem semente própria derivada
de (semente do corpus, split, índice), então a geração paraleliza por amostra
sem mudar o resultado.
"""
import hashlib
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from torch.utils.data import Dataset
from tqdm import tqdm

from core.config import prepare_output_dir, write_json
from core.exceptions import DataError, InvalidArgumentError, OutputExistsError
from diffusion.schedule import encode_mask

from .imageio import read_image, read_mask, write_image_png, write_mask_png

logger = logging.getLogger(__name__)

SPLITS = ('train', 'val', 'test')
MANIFEST = 'manifest.json'
MANIFEST_FORMAT = 1
BACKGROUND_RANGE = (0.25, 0.5)
MAX_SHAPE_ATTEMPTS = 50


class ShapeFamily(str, Enum):
    ELLIPSE = 'ellipse'
    BLOB = 'blob'
    CRESCENT = 'crescent'


@dataclass(frozen=True)
class CorpusSpec:
    train_count: int = 200
    val_count: int = 50
    test_count: int = 50
    image_size: int = 64
    channels: int = 1
    contrast: float = 0.15
    noise_std: float = 0.1
    blur_radius: float = 2.0
    shape: str = ShapeFamily.ELLIPSE.value
    area_min: float = 0.05
    area_max: float = 0.30
    seed: int = 0

    def __post_init__(self):
        if min(self.train_count, self.val_count, self.test_count) < 0 or self.total < 1:
            raise InvalidArgumentError('corpus needs at least one sample')
        if not 0.0 < self.contrast <= 1.0:
            raise InvalidArgumentError(f'contrast must be in (0, 1], got {self.contrast}')
        if not 0.0 < self.area_min < self.area_max < 1.0:
            raise InvalidArgumentError(f'bad area range [{self.area_min}, {self.area_max}]')
        if self.channels not in (1, 3):
            raise InvalidArgumentError(f'channels must be 1 or 3, got {self.channels}')
        ShapeFamily(self.shape)

    @property
    def total(self):
        return self.train_count + self.val_count + self.test_count

    def count(self, split):
        return getattr(self, f'{split}_count')


@dataclass(eq=False)
class SegSample:
    image: np.ndarray
    mask: np.ndarray
    id: str
    split: str

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[:2] != self.mask.shape:
            raise DataError(
                f'image {self.image.shape} and mask {self.mask.shape} differ in spatial shape', source=self.id,
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise DataError('mask is not binary', source=self.id)


def sample_id(split, index):
    return f'{split}_{index:05d}'


def sample_rng(spec, split, index):
    return np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(SPLITS.index(split), index)))


# Formas

def _grid(size):
    coords = np.arange(size, dtype=np.float64) + 0.5
    return np.meshgrid(coords, coords, indexing='ij')


def _ellipse(rng, size, target):
    aspect = rng.uniform(0.6, 1.0)
    angle = rng.uniform(0.0, math.pi)

    def render(scale, yy, xx, center):
        major = scale * math.sqrt(target / (math.pi * aspect))
        minor = aspect * major
        dy, dx = yy - center[0], xx - center[1]
        u = math.cos(angle) * dx + math.sin(angle) * dy
        v = -math.sin(angle) * dx + math.cos(angle) * dy
        return (u / major) ** 2 + (v / minor) ** 2 <= 1.0, major

    return render


def _blob(rng, size, target):
    orders = np.arange(2, 5)
    amplitudes = rng.uniform(-0.15, 0.15, size=orders.shape)
    phases = rng.uniform(0.0, 2 * math.pi, size=orders.shape)
    base = math.sqrt(target / (math.pi * (1 + 0.5 * float((amplitudes ** 2).sum()))))

    def render(scale, yy, xx, center):
        dy, dx = yy - center[0], xx - center[1]
        theta = np.arctan2(dy, dx)
        radius = scale * base * (1 + sum(a * np.cos(k * theta + p) for a, k, p in zip(amplitudes, orders, phases)))
        extent = scale * base * (1 + float(np.abs(amplitudes).sum()))
        return np.hypot(dy, dx) <= radius, extent

    return render


def _crescent(rng, size, target):
    inner = rng.uniform(0.7, 0.9)
    offset = rng.uniform(0.35, 0.6)
    direction = rng.uniform(0.0, 2 * math.pi)
    base = math.sqrt(target / (math.pi * 0.5))

    def render(scale, yy, xx, center):
        radius = scale * base
        cy = center[0] + offset * radius * math.sin(direction)
        cx = center[1] + offset * radius * math.cos(direction)
        outer_disk = np.hypot(yy - center[0], xx - center[1]) <= radius
        bite = np.hypot(yy - cy, xx - cx) <= inner * radius
        return outer_disk & ~bite, radius

    return render


SHAPES = {
    ShapeFamily.ELLIPSE: _ellipse,
    ShapeFamily.BLOB: _blob,
    ShapeFamily.CRESCENT: _crescent,
}


def draw_region(rng, spec):
    """Região de frente com fração de área dentro de [area_min, area_max]."""
    size = spec.image_size
    yy, xx = _grid(size)
    low, high = spec.area_min, spec.area_max
    for _ in range(MAX_SHAPE_ATTEMPTS):
        fraction = rng.uniform(low + 0.1 * (high - low), high - 0.1 * (high - low))
        render = SHAPES[ShapeFamily(spec.shape)](rng, size, fraction * size * size)
        scale = 1.0
        for _ in range(6):
            _, extent = render(scale, yy, xx, (size / 2, size / 2))
            if extent >= size / 2:
                break
            center = rng.uniform(extent, size - extent, size=2)
            region, _ = render(scale, yy, xx, center)
            measured = region.mean()
            if low <= measured <= high:
                return region
            if measured == 0:
                break
            scale *= math.sqrt(fraction / measured)
    raise DataError(f'could not place a {spec.shape} region inside area range [{low}, {high}]')


def synthesize_sample(spec, split, index):
    """Amostra quantizada em 8 bits: (imagem uint8 (H, W, C), máscara uint8 {0, 1} (H, W))."""
    rng = sample_rng(spec, split, index)
    size = spec.image_size
    region = draw_region(rng, spec)

    layers = []
    for _ in range(spec.channels):
        field = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8)
        field = (field - field.min()) / max(field.max() - field.min(), 1e-12)
        low, high = BACKGROUND_RANGE
        layers.append(low + (high - low) * field)
    image = np.stack(layers, axis=-1) + spec.contrast * region[:, :, None]
    if spec.blur_radius > 0:
        image = gaussian_filter(image, sigma=(spec.blur_radius, spec.blur_radius, 0))
    if spec.noise_std > 0:
        image = image + spec.noise_std * rng.standard_normal(image.shape)
    image = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return image, region.astype(np.uint8)


def _synthesize_job(job):
    spec, split, index = job
    return synthesize_sample(spec, split, index)


def array_digest(array):
    array = np.ascontiguousarray(array)
    digest = hashlib.sha256(str((array.dtype.str, array.shape)).encode())
    digest.update(array.tobytes())
    return digest.hexdigest()


def _write_sample(root, split, sid, image, mask):
    write_image_png(root / split / 'images' / f'{sid}.png', image)
    write_mask_png(root / split / 'masks' / f'{sid}.png', mask)
    return {
        'id': sid,
        'image': f'{split}/images/{sid}.png',
        'mask': f'{split}/masks/{sid}.png',
        'image_sha256': array_digest(image),
        'mask_sha256': array_digest(mask),
    }


def _make_split_dirs(root, split):
    for kind in ('images', 'masks'):
        (root / split / kind).mkdir(parents=True, exist_ok=True)


def generate_corpus(spec, root, force=False, jobs=1):
    """Gera o corpus em ``root`` e devolve o manifesto (determinístico sob a semente)."""
    try:
        root = prepare_output_dir(root, force)
    except PermissionError as exc:
        raise DataError(f'cannot write corpus: {exc}', source=str(root)) from exc

    jobs_list = [(spec, split, i) for split in SPLITS for i in range(spec.count(split))]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(tqdm(pool.map(_synthesize_job, jobs_list, chunksize=8),
                                total=len(jobs_list), desc='synth'))
    else:
        results = [_synthesize_job(job) for job in tqdm(jobs_list, desc='synth')]

    splits = {split: [] for split in SPLITS}
    try:
        for split in SPLITS:
            _make_split_dirs(root, split)
        for (_, split, index), (image, mask) in zip(jobs_list, results):
            splits[split].append(_write_sample(root, split, sample_id(split, index), image, mask))
    except OSError as exc:
        raise DataError(f'cannot write corpus: {exc}', source=str(root)) from exc

    manifest = {'format': MANIFEST_FORMAT, 'spec': asdict(spec), 'splits': splits}
    write_json(root / MANIFEST, manifest)
    logger.info('Corpus generated', extra={'root': str(root), 'samples': len(jobs_list), 'seed': spec.seed})
    return manifest


def read_manifest(root):
    path = Path(root) / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding='utf-8'))
    except FileNotFoundError as exc:
        raise DataError('manifest not found', source=str(path)) from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f'corrupt manifest: {exc}', source=str(path)) from exc
    if not isinstance(manifest, dict) or not isinstance(manifest.get('splits'), dict):
        raise DataError('manifest has no "splits" mapping', source=str(path))
    return manifest


def manifest_image_size(manifest):
    return (manifest.get('spec') or {}).get('image_size')


def load_corpus(root, split, image_size=None, channels=None):
    """Itera as amostras de ``split`` na ordem do manifesto.

    Com ``image_size`` diferente do armazenado, imagens são redimensionadas em
    bilinear e máscaras em vizinho mais próximo.
    """
    if split not in SPLITS:
        raise InvalidArgumentError(f'unknown split {split!r}; expected one of {", ".join(SPLITS)}')
    root = Path(root)
    manifest = read_manifest(root)
    if channels is None:
        channels = (manifest.get('spec') or {}).get('channels', 1)
    for entry in manifest['splits'].get(split, []):
        sid = entry.get('id')
        try:
            image_path, mask_path = root / entry['image'], root / entry['mask']
        except KeyError as exc:
            raise DataError(f'manifest entry lacks {exc}', source=sid) from exc
        image = read_image(image_path, source=sid, size=image_size, channels=channels)
        mask = read_mask(mask_path, source=sid, size=image_size)
        yield SegSample(image=image, mask=mask, id=sid, split=split)


def import_folder(image_dir, mask_dir, root, split='train', force=False, image_size=None, channels=1):
    """Copia pares imagem/máscara (mesmo nome de arquivo) para o layout do corpus."""
    image_dir, mask_dir, root = Path(image_dir), Path(mask_dir), Path(root)
    if split not in SPLITS:
        raise InvalidArgumentError(f'unknown split {split!r}')
    masks = {path.stem: path for path in mask_dir.glob('*') if path.is_file()}
    pairs = sorted((path.stem, path, masks.get(path.stem)) for path in image_dir.glob('*') if path.is_file())
    if not pairs:
        raise DataError('no images found', source=str(image_dir))
    missing = [stem for stem, _, mask in pairs if mask is None]
    if missing:
        raise DataError(f'no mask for {", ".join(missing[:5])}', source=str(mask_dir))

    if (root / MANIFEST).exists():
        manifest = read_manifest(root)
        if manifest['splits'].get(split) and not force:
            raise OutputExistsError(f'split {split!r} already exists in {root}; pass --force to replace it')
    else:
        manifest = {'format': MANIFEST_FORMAT, 'spec': {'source': 'import', 'channels': channels},
                    'splits': {name: [] for name in SPLITS}}
    if image_size is not None:
        manifest['spec']['image_size'] = image_size
    manifest['spec']['channels'] = channels

    _make_split_dirs(root, split)
    entries = []
    for stem, image_path, mask_path in tqdm(pairs, desc=f'import {split}'):
        image = np.round(read_image(image_path, source=stem, size=image_size, channels=channels) * 255.0)
        mask = read_mask(mask_path, source=stem, size=image_size)
        if image.shape[:2] != mask.shape:
            raise DataError(f'image {image.shape[:2]} and mask {mask.shape} differ', source=stem)
        entries.append(_write_sample(root, split, stem, image.astype(np.uint8), mask))
    manifest['splits'][split] = entries
    write_json(root / MANIFEST, manifest)
    logger.info('Folder imported', extra={'root': str(root), 'split': split, 'samples': len(entries)})
    return manifest


class SegmentationDataset(Dataset):
    """Amostras de um split como tensores: imagem (C, H, W) e máscara em {-1, +1} (1, H, W)."""

    def __init__(self, samples):
        samples = list(samples)
        for sample in samples[1:]:
            if sample.image.shape != samples[0].image.shape or sample.mask.shape != samples[0].mask.shape:
                raise DataError(
                    f'image {sample.image.shape} differs from {samples[0].image.shape} of {samples[0].id}; '
                    'load the split with an image size to resize it',
                    source=sample.id,
                )
        self.ids = [sample.id for sample in samples]
        self.gt_masks = [sample.mask for sample in samples]
        self.images = torch.stack([torch.from_numpy(sample.image).permute(2, 0, 1).float() for sample in samples]) \
            if samples else torch.empty(0)
        self.masks = torch.stack([encode_mask(torch.from_numpy(sample.mask)[None]) for sample in samples]) \
            if samples else torch.empty(0)

    def __len__(self):
        return len(self.ids)

    def __getitem__(self, index):
        return self.images[index], self.masks[index], index


def load_dataset(root, split, image_size=None, channels=None):
    return SegmentationDataset(load_corpus(root, split, image_size=image_size, channels=channels))
