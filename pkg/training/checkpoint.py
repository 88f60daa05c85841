"""Arquivo de checkpoint: um zip com ``manifest.json`` e um ``.npy`` por tensor nomeado.

O manifesto guarda nomes/formas/dtypes dos tensores, ModelConfig, TrainConfig,
o tipo de agenda e um hash do conteúdo (sha256 sobre os tensores em ordem de nome).
"""
import hashlib
import io
import json
import logging
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from core.config import to_plain
from core.exceptions import DataError
from diffusion.schedule import build_schedule
from network.models import ModelConfig, SegDiffusionNet, parameter_manifest

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT = 1
MANIFEST_NAME = 'manifest.json'


def tensor_digest(tensors):
    """sha256 sobre (nome, dtype, forma, bytes) de cada tensor, em ordem de nome."""
    digest = hashlib.sha256()
    for name in sorted(tensors):
        array = np.ascontiguousarray(tensors[name].detach().cpu().numpy())
        digest.update(f'{name}|{array.dtype.str}|{array.shape}|'.encode())
        digest.update(array.tobytes())
    return digest.hexdigest()


def save_checkpoint(path, model, train_config=None, step=0, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {name: tensor.detach().cpu() for name, tensor in model.state_dict().items()}
    train_plain = to_plain(train_config) if train_config is not None else None
    if train_plain:
        train_plain.pop('model', None)
    manifest = {
        'format': ARCHIVE_FORMAT,
        'step': step,
        'tensors': parameter_manifest(model),
        'model_config': to_plain(asdict(model.config)),
        'train_config': train_plain,
        'schedule_kind': getattr(train_config, 'schedule_kind', 'linear'),
        'content_hash': tensor_digest(state),
        **(extra or {}),
    }
    with zipfile.ZipFile(path, 'w', compression=zipfile.ZIP_DEFLATED) as archive:
        archive.writestr(MANIFEST_NAME, json.dumps(manifest, indent=2, sort_keys=True))
        for name, tensor in state.items():
            buffer = io.BytesIO()
            np.save(buffer, tensor.numpy(), allow_pickle=False)
            archive.writestr(f'tensors/{name}.npy', buffer.getvalue())
    logger.info('Checkpoint saved', extra={'path': str(path), 'step': step, 'content_hash': manifest['content_hash']})
    return manifest


def read_checkpoint_manifest(path):
    try:
        with zipfile.ZipFile(path) as archive:
            return json.loads(archive.read(MANIFEST_NAME))
    except FileNotFoundError as exc:
        raise DataError('checkpoint not found', source=str(path)) from exc
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise DataError(f'corrupt checkpoint: {exc}', source=str(path)) from exc


def load_checkpoint(path, device='cpu'):
    """Reconstrói a rede do manifesto e carrega os tensores. Devolve (modelo, manifesto)."""
    manifest = read_checkpoint_manifest(path)
    try:
        config = ModelConfig(**manifest['model_config'])
        with zipfile.ZipFile(path) as archive:
            state = {
                entry['name']: torch.from_numpy(
                    np.load(io.BytesIO(archive.read(f"tensors/{entry['name']}.npy")), allow_pickle=False)
                )
                for entry in manifest['tensors']
            }
    except (KeyError, TypeError, ValueError, zipfile.BadZipFile) as exc:
        raise DataError(f'corrupt checkpoint: {exc}', source=str(path)) from exc

    if tensor_digest(state) != manifest.get('content_hash'):
        raise DataError('content hash mismatch', source=str(path))
    model = SegDiffusionNet(config)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise DataError(f'tensors do not fit the model: {exc}', source=str(path)) from exc
    return model.to(device), manifest


def schedule_from_manifest(manifest):
    return build_schedule(manifest['model_config']['T'], manifest.get('schedule_kind') or 'linear')
