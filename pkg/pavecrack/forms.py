"""
Validation of experiment configuration.

Experiment config files are flat ``key = value`` text. Their values are
layered over the project defaults, overridden by command-line flags and
validated by ``TrainConfigForm`` before a ``TrainConfig`` is built.
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Mapping

from django import forms
from django.conf import settings

from .exceptions import ConfigurationError, PersistenceError
from .models import TrainConfig

_GRID = re.compile(r"^\s*(\d+)\s*[xX]\s*(\d+)\s*$")
_PAIR = re.compile(r"^\s*(\d+)\s*,\s*(\d+)\s*$")


class TrainConfigForm(forms.Form):
    total_epochs = forms.IntegerField(min_value=0)
    finetune_start_epoch = forms.IntegerField(min_value=0)
    batch_size = forms.IntegerField(min_value=1)
    phase1_learning_rate = forms.FloatField()
    phase2_learning_rate = forms.FloatField()
    replicates = forms.IntegerField(min_value=1)
    augmented = forms.BooleanField(required=False)
    unfreeze_fraction = forms.FloatField(min_value=0.0, max_value=1.0)
    seeds = forms.CharField(required=False, help_text="Comma-separated integers, one per replicate")
    loss = forms.ChoiceField(choices=[("binary_crossentropy", "Binary cross-entropy")], required=False)
    optimizer = forms.ChoiceField(choices=[("adam", "Adam")], required=False)
    threshold = forms.FloatField(min_value=0.0, max_value=1.0)
    keep_best_val = forms.BooleanField(required=False)
    evaluate_test = forms.BooleanField(required=False)
    deterministic = forms.BooleanField(required=False)

    def clean_seeds(self) -> tuple[int, ...] | None:
        value = (self.cleaned_data.get("seeds") or "").strip()
        if not value:
            return None
        try:
            return tuple(int(part) for part in value.split(",") if part.strip())
        except ValueError:
            raise forms.ValidationError("Seeds must be comma-separated integers.")

    def clean(self):
        cleaned_data = super().clean()
        phase1 = cleaned_data.get("phase1_learning_rate")
        phase2 = cleaned_data.get("phase2_learning_rate")
        if phase1 is not None and phase2 is not None:
            if phase1 <= 0 or phase2 <= 0:
                raise forms.ValidationError("Learning rates must be positive.")
            if phase2 >= phase1:
                raise forms.ValidationError("phase2_learning_rate must be lower than phase1_learning_rate.")
        total = cleaned_data.get("total_epochs")
        start = cleaned_data.get("finetune_start_epoch")
        if total is not None and start is not None and start > total:
            self.add_error("finetune_start_epoch", "Must not exceed total_epochs.")
        replicates = cleaned_data.get("replicates")
        if replicates is not None:
            if cleaned_data.get("seeds") is None:
                cleaned_data["seeds"] = tuple(range(replicates))
            elif len(cleaned_data["seeds"]) != replicates:
                self.add_error("seeds", f"Expected {replicates} seeds.")
        cleaned_data["loss"] = cleaned_data.get("loss") or "binary_crossentropy"
        cleaned_data["optimizer"] = cleaned_data.get("optimizer") or "adam"
        return cleaned_data


def _defaults() -> dict[str, str]:
    defaults = TrainConfig().to_dict()
    defaults.update(settings.PAVECRACK_TRAIN_DEFAULTS)
    defaults["deterministic"] = settings.PAVECRACK_DETERMINISTIC
    defaults.pop("seeds")
    return {key: _as_text(value) for key, value in defaults.items()}


def _as_text(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(item) for item in value)
    return str(value)


def read_config_file(path: Path) -> dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise PersistenceError(f"Cannot read config {path}: {exc}") from exc
    values = {}
    for number, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigurationError(f"{path}:{number}: expected 'key = value', got {line!r}.")
        values[key.strip()] = value.strip()
    return values


def build_train_config(
    file_values: Mapping[str, str] | None = None,
    overrides: Mapping[str, object] | None = None,
) -> TrainConfig:
    """Defaults, then config-file values, then command-line overrides (the last wins)."""
    data = _defaults()
    known = set(TrainConfigForm.base_fields)
    unknown = sorted(set(file_values or {}) - known)
    if unknown:
        raise ConfigurationError(f"Unknown config keys: {', '.join(unknown)}.")
    data.update(file_values or {})
    data.update({key: _as_text(value) for key, value in (overrides or {}).items() if value is not None})
    form = TrainConfigForm(data)
    if not form.is_valid():
        problems = [
            f"{key}: {' '.join(messages)}" if key != "__all__" else " ".join(messages)
            for key, messages in form.errors.items()
        ]
        raise ConfigurationError("Invalid training configuration: " + "; ".join(problems))
    return TrainConfig(**form.cleaned_data)


def parse_grid(text: str) -> tuple[int, int]:
    """``"2x6"`` -> ``(2, 6)``."""
    match = _GRID.match(text or "")
    if not match or int(match[1]) < 1 or int(match[2]) < 1:
        raise ConfigurationError(f"Grid must look like ROWSxCOLS, got {text!r}.")
    return int(match[1]), int(match[2])


def parse_pair(text: str, name: str) -> tuple[int, int]:
    """``"620,610"`` -> ``(620, 610)``; used for pixel origins and strides."""
    match = _PAIR.match(text or "")
    if not match:
        raise ConfigurationError(f"{name} must look like X,Y in pixels, got {text!r}.")
    return int(match[1]), int(match[2])
