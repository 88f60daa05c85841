from django import forms
from django.core.exceptions import ValidationError

from core.forms import ConfigForm

from .synthdata import CorpusSpec, ShapeFamily


class CorpusSpecForm(ConfigForm):
    config_class = CorpusSpec

    train_count = forms.IntegerField(min_value=0)
    val_count = forms.IntegerField(min_value=0)
    test_count = forms.IntegerField(min_value=0)
    image_size = forms.IntegerField(min_value=8)
    channels = forms.TypedChoiceField(choices=[(1, '1'), (3, '3')], coerce=int)
    contrast = forms.FloatField(min_value=0.0, max_value=1.0)
    noise_std = forms.FloatField(min_value=0.0)
    blur_radius = forms.FloatField(min_value=0.0)
    shape = forms.ChoiceField(choices=[(family.value, family.value) for family in ShapeFamily])
    area_min = forms.FloatField(min_value=0.0, max_value=1.0)
    area_max = forms.FloatField(min_value=0.0, max_value=1.0)
    seed = forms.IntegerField(min_value=0)

    def clean_contrast(self):
        contrast = self.cleaned_data['contrast']
        if contrast <= 0:
            raise ValidationError('Contrast must be greater than 0.')
        return contrast

    def clean(self):
        cleaned = super().clean()
        counts = [cleaned.get(f'{split}_count') or 0 for split in ('train', 'val', 'test')]
        if sum(counts) < 1:
            raise ValidationError('The corpus needs at least one sample.')
        if cleaned.get('area_min') is not None and cleaned.get('area_max') is not None \
                and cleaned['area_min'] >= cleaned['area_max']:
            raise ValidationError('area_min must be smaller than area_max.')
        return cleaned
