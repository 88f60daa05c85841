"""Leitura e escrita de PNG de 8 bits (imagens em cinza/RGB, máscaras {0, 255})."""
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from core.exceptions import DataError


def write_image_png(path, image):
    """``image`` uint8 (H, W, C) com C em {1, 3}."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim == 3 and image.shape[2] == 1:
        image = image[:, :, 0]
    Image.fromarray(image).save(path)


def write_mask_png(path, mask):
    Image.fromarray((np.asarray(mask, dtype=np.uint8) > 0).astype(np.uint8) * 255).save(path)


def read_png(path, source=None):
    path = Path(path)
    try:
        with Image.open(path) as handle:
            handle.load()
            return handle.copy()
    except FileNotFoundError as exc:
        raise DataError(f'missing file {path}', source=source) from exc
    except (OSError, UnidentifiedImageError) as exc:
        raise DataError(f'cannot read {path}: {exc}', source=source) from exc


def read_mask(path, source=None, size=None):
    """Máscara binária {0, 1}. Aceita arquivos com valores {0, 255} ou {0, 1}."""
    picture = read_png(path, source).convert('L')
    if size is not None and picture.size != (size, size):
        picture = picture.resize((size, size), Image.NEAREST)
    values = np.asarray(picture)
    present = set(np.unique(values).tolist())
    if present <= {0, 255}:
        return (values == 255).astype(np.uint8)
    if present <= {0, 1}:
        return values.astype(np.uint8)
    raise DataError(f'mask {path} is not binary (values {sorted(present)[:6]})', source=source)


def read_image(path, source=None, size=None, channels=1):
    """Imagem float32 (H, W, C) em [0, 1]."""
    picture = read_png(path, source).convert('L' if channels == 1 else 'RGB')
    if size is not None and picture.size != (size, size):
        picture = picture.resize((size, size), Image.BILINEAR)
    values = np.asarray(picture, dtype=np.float32) / 255.0
    if values.ndim == 2:
        values = values[:, :, None]
    return values
