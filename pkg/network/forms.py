from django import forms
from django.core.exceptions import ValidationError

from core.exceptions import ConfigError, InvalidArgumentError
from core.forms import ConfigForm, IntegerListField

from .models import PRESETS, ModelConfig


class ModelConfigForm(ConfigForm):
    config_class = ModelConfig

    image_size = forms.IntegerField(min_value=8)
    in_channels_image = forms.IntegerField(min_value=1)
    in_channels_mask = forms.IntegerField(min_value=1)
    base_channels = forms.IntegerField(min_value=1)
    stage_block_counts = IntegerListField(min_value=1, min_length=3)
    channel_multipliers = IntegerListField(min_value=1, min_length=3)
    time_embed_dim = forms.IntegerField(min_value=2)
    time_embedding = forms.ChoiceField(choices=[('sinusoidal', 'sinusoidal'), ('table', 'table')])
    fusion_stages = IntegerListField(min_value=0, required=False)
    use_dycond = forms.BooleanField(required=False)
    use_ffparser = forms.BooleanField(required=False)
    T = forms.IntegerField(min_value=2)

    @classmethod
    def known_keys(cls):
        return super().known_keys() | {'preset'}

    @classmethod
    def from_values(cls, values, base=None):
        preset = values.get('preset')
        if base is None and preset:
            if preset not in PRESETS:
                raise ConfigError(f'Unknown model preset {preset!r}; choose one of {", ".join(PRESETS)}')
            base = {**cls.defaults(), **PRESETS[preset]}
        return super().from_values(values, base=base)

    def clean(self):
        cleaned = super().clean()
        blocks = cleaned.get('stage_block_counts')
        multipliers = cleaned.get('channel_multipliers')
        if blocks and multipliers and len(blocks) != len(multipliers):
            raise ValidationError('stage_block_counts and channel_multipliers must have the same length.')
        return cleaned

    def to_config(self):
        try:
            return super().to_config()
        except InvalidArgumentError as exc:
            raise ConfigError(f'Invalid ModelConfig: {exc}') from exc


