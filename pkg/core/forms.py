"""Formulários de configuração: ``cleaned_data`` vira o dataclass congelado."""
from dataclasses import MISSING, fields

from django import forms
from django.core.exceptions import ValidationError

from .exceptions import ConfigError


class IntegerListField(forms.Field):
    """Lista de inteiros vinda do YAML (lista) ou da linha de comando ("3,4,6")."""

    def __init__(self, *, min_value=None, min_length=0, **kwargs):
        self.min_value = min_value
        self.min_length = min_length
        super().__init__(**kwargs)

    def to_python(self, value):
        if value in self.empty_values:
            return ()
        if isinstance(value, str):
            value = [part for part in value.replace(' ', '').split(',') if part]
        try:
            items = tuple(int(item) for item in value)
        except (TypeError, ValueError):
            raise ValidationError('Enter a list of integers.', code='invalid')
        return items

    def validate(self, value):
        super().validate(value)
        if len(value) < self.min_length:
            raise ValidationError(f'Needs at least {self.min_length} items.', code='min_length')
        if self.min_value is not None and any(item < self.min_value for item in value):
            raise ValidationError(f'Every item must be >= {self.min_value}.', code='min_value')


class ConfigForm(forms.Form):
    config_class = None

    @classmethod
    def defaults(cls):
        values = {}
        for field in fields(cls.config_class):
            if field.name not in cls.base_fields:
                continue
            if field.default is not MISSING:
                values[field.name] = field.default
            elif field.default_factory is not MISSING:
                values[field.name] = field.default_factory()
        return values

    @classmethod
    def known_keys(cls):
        return set(cls.base_fields)

    @classmethod
    def from_values(cls, values, base=None):
        """Valida ``values`` sobre os defaults (ou sobre ``base``) e devolve o dataclass."""
        data = dict(base if base is not None else cls.defaults())
        data.update({key: value for key, value in values.items() if key in cls.base_fields})
        form = cls(data=data)
        if not form.is_valid():
            raise ConfigError(f'Invalid {cls.config_class.__name__}', errors=form.errors)
        return form.to_config()

    def to_config(self):
        return self.config_class(**self.cleaned_data)
