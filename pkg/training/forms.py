from dataclasses import replace

from django import forms
from django.core.exceptions import ValidationError

from core.exceptions import ConfigError, InvalidArgumentError
from core.forms import ConfigForm, IntegerListField
from diffusion.forms import SCHEDULE_CHOICES
from network.forms import ModelConfigForm

from .ablation import DEFAULT_VARIANTS, AblationSpec, Variant
from .trainer import LR_SCHEDULES, TrainConfig

FLAG_VALUES = {'1': True, 'on': True, 'true': True, '0': False, 'off': False, 'false': False}


class TrainConfigForm(ConfigForm):
    config_class = TrainConfig

    epochs = forms.IntegerField(min_value=1)
    batch_size = forms.IntegerField(min_value=1)
    learning_rate = forms.FloatField()
    weight_decay = forms.FloatField(min_value=0.0)
    grad_clip = forms.FloatField(min_value=0.0)
    seed = forms.IntegerField(min_value=0)
    checkpoint_every = forms.IntegerField(min_value=0)
    eval_every = forms.IntegerField(min_value=0)
    eval_limit = forms.IntegerField(min_value=1)
    eval_steps = forms.IntegerField(min_value=1)
    eval_ensemble_size = forms.IntegerField(min_value=1)
    log_every = forms.IntegerField(min_value=0)
    schedule_kind = forms.ChoiceField(choices=SCHEDULE_CHOICES)
    lr_schedule = forms.ChoiceField(choices=[(name, name) for name in LR_SCHEDULES])
    ema_decay = forms.FloatField(min_value=0.0, max_value=0.99999)
    max_steps = forms.IntegerField(min_value=0)
    num_threads = forms.IntegerField(min_value=0)
    device = forms.CharField()

    def clean_learning_rate(self):
        value = self.cleaned_data['learning_rate']
        if value <= 0:
            raise ValidationError('Learning rate must be greater than 0.')
        return value

    def to_config(self):
        try:
            return super().to_config()
        except InvalidArgumentError as exc:
            raise ConfigError(f'Invalid TrainConfig: {exc}') from exc


def train_config_keys():
    return TrainConfigForm.known_keys() | ModelConfigForm.known_keys()


def build_train_config(values):
    """Um documento plano alimenta os dois formulários (treino e modelo)."""
    model = ModelConfigForm.from_values(values)
    return replace(TrainConfigForm.from_values(values), model=model)


class VariantListField(forms.Field):
    """Variantes como ``nome:dycond:ffparser``, ex. ``vanilla:0:0,full:1:1``."""

    def to_python(self, value):
        if value in self.empty_values:
            return DEFAULT_VARIANTS
        if isinstance(value, str):
            value = [part for part in value.replace(' ', '').split(',') if part]
        variants = []
        for item in value:
            parts = item.split(':') if isinstance(item, str) else list(item)
            if len(parts) != 3:
                raise ValidationError(f'Variant {item!r} must be name:dycond:ffparser.', code='invalid')
            name, dycond, ffparser = (str(part).lower() for part in parts)
            if dycond not in FLAG_VALUES or ffparser not in FLAG_VALUES:
                raise ValidationError(f'Variant {item!r} has a flag that is not on/off.', code='invalid')
            variants.append(Variant(name, FLAG_VALUES[dycond], FLAG_VALUES[ffparser]))
        return tuple(variants)


class AblationForm(forms.Form):
    variants = VariantListField(required=False)
    seeds = IntegerListField(min_value=0, min_length=1)
    test_limit = forms.IntegerField(min_value=0)
    test_steps = forms.IntegerField(min_value=1)
    test_ensemble_size = forms.IntegerField(min_value=1)

    defaults = {'seeds': (0, 1, 2), 'test_limit': 0, 'test_steps': 100, 'test_ensemble_size': 5}

    def clean_variants(self):
        variants = self.cleaned_data['variants']
        if len(variants) < 2:
            raise ValidationError('An ablation needs at least 2 variants.')
        names = [variant.name for variant in variants]
        if len(set(names)) != len(names):
            raise ValidationError('Variant names must be unique.')
        return variants

    @classmethod
    def known_keys(cls):
        return set(cls.base_fields) | train_config_keys()

    @classmethod
    def from_values(cls, values):
        data = {**cls.defaults, **{key: value for key, value in values.items() if key in cls.base_fields}}
        form = cls(data=data)
        if not form.is_valid():
            raise ConfigError('Invalid AblationSpec', errors=form.errors)
        train = build_train_config({key: value for key, value in values.items() if key not in cls.base_fields})
        try:
            return AblationSpec(train=train, **form.cleaned_data)
        except InvalidArgumentError as exc:
            raise ConfigError(f'Invalid AblationSpec: {exc}') from exc
