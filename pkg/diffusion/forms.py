from django import forms

from core.forms import ConfigForm

from .sampler import FusionMethod, SamplerConfig
from .schedule import ScheduleKind


class SamplerConfigForm(ConfigForm):
    config_class = SamplerConfig

    steps = forms.IntegerField(min_value=1)
    ensemble_size = forms.IntegerField(min_value=1)
    seed = forms.IntegerField(min_value=0)
    threshold = forms.FloatField()
    fusion = forms.ChoiceField(choices=[(method.value, method.value) for method in FusionMethod])
    chain_batch = forms.IntegerField(min_value=1)
    clip_x0 = forms.BooleanField(required=False)


SCHEDULE_CHOICES = [(kind.value, kind.value) for kind in ScheduleKind]
