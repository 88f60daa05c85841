"""Arquivo de configuração (YAML plano), saídas das execuções e registro de reprodutibilidade."""
import json
import logging
import platform
import shutil
from dataclasses import asdict, is_dataclass
from pathlib import Path

import yaml

from .exceptions import ConfigError, OutputExistsError

logger = logging.getLogger(__name__)


def read_config_file(path):
    """Lê o documento chave-valor. Só aceita um mapeamento plano de escalares e listas."""
    if path is None:
        return {}
    path = Path(path)
    try:
        with path.open(encoding='utf-8') as handle:
            values = yaml.safe_load(handle) or {}
    except OSError as exc:
        raise ConfigError(f'Cannot read config file {path}: {exc}') from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f'Config file {path} is not valid YAML: {exc}') from exc

    if not isinstance(values, dict):
        raise ConfigError(f'Config file {path} must be a key-value document')
    nested = sorted(key for key, value in values.items() if isinstance(value, dict))
    if nested:
        raise ConfigError(f'Config file {path} must be flat; nested keys: {", ".join(nested)}')
    return values


def resolve_config(path, overrides, known_keys):
    """Arquivo + flags da CLI (flags vencem). Chaves desconhecidas são erro de uso."""
    values = read_config_file(path)
    values.update({key: value for key, value in overrides.items() if value is not None})
    unknown = sorted(set(values) - set(known_keys))
    if unknown:
        raise ConfigError(f'Unknown config keys: {", ".join(unknown)}')
    return values


def to_plain(value):
    if is_dataclass(value):
        value = asdict(value)
    if isinstance(value, dict):
        return {str(key): to_plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        items = sorted(value) if isinstance(value, (set, frozenset)) else value
        return [to_plain(item) for item in items]
    if isinstance(value, Path):
        return str(value)
    return value


def prepare_output_dir(path, force=False):
    """Cria ``path``. Recusa sobrescrever um diretório não vazio sem ``force``."""
    path = Path(path)
    if path.exists() and any(path.iterdir()):
        if not force:
            raise OutputExistsError(f'Output directory {path} already exists; pass --force to overwrite')
        logger.warning('Overwriting output directory', extra={'out': str(path)})
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path, payload):
    Path(path).write_text(json.dumps(to_plain(payload), indent=2, sort_keys=True) + '\n', encoding='utf-8')


def write_run_record(out_dir, command, config, seeds=None):
    """Ecoa a configuração resolvida (config.yaml) e grava run.json ao lado das saídas."""
    import numpy
    import torch

    out_dir = Path(out_dir)
    plain = to_plain(config)
    with (out_dir / 'config.yaml').open('w', encoding='utf-8') as handle:
        yaml.safe_dump(plain, handle, sort_keys=True)
    write_json(out_dir / 'run.json', {
        'command': command,
        'config': plain,
        'seeds': seeds or {},
        'versions': {
            'python': platform.python_version(),
            'numpy': numpy.__version__,
            'torch': torch.__version__,
        },
    })
