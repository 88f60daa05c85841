import logging

import torch
from django.conf import settings

logger = logging.getLogger(__name__)


def resolve_device(name=None):
    name = name or settings.MEDSEG_DEVICE
    if name == 'auto':
        name = 'cuda' if torch.cuda.is_available() else 'cpu'
    return torch.device(name)


def configure_threads(num_threads):
    """``num_threads=1`` dá execução determinística na CPU."""
    if num_threads:
        torch.set_num_threads(num_threads)
    if num_threads == 1:
        torch.use_deterministic_algorithms(True, warn_only=True)
