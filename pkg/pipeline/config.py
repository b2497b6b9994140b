"""
Run configuration files.

A config file holds ``section.key = value`` lines and ``#`` comment lines.
Values override the selected profile in ``settings.PIPELINE_PROFILES``;
``foreground.<component>.<param>`` lines override a single component.
Unknown keys are fatal.
"""

import copy
import logging
from pathlib import Path

from decouple import Config, Csv, RepositoryEnv
from django.conf import settings

from imbench.exceptions import ConfigError
from .models import RunConfig
from .serializers import LIST_KEYS, SECTION_SERIALIZERS, ForegroundOverrideSerializer

logger = logging.getLogger(__name__)


def _flatten_errors(prefix, errors):
    """DRF error dict -> {'section.key': [messages]}"""
    flat = {}
    for field, messages in errors.items():
        key = prefix if field == 'non_field_errors' else f'{prefix}.{field}'
        if isinstance(messages, dict):
            messages = [f'item {index}: {"; ".join(map(str, value))}' for index, value in messages.items()]
        flat[key] = [str(message) for message in messages]
    return flat


def _check_syntax(path):
    errors = {}
    with open(path, encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            key = line.split('=', 1)[0].strip()
            if '=' not in line or '.' not in key:
                errors[f'line {number}'] = [f"expected 'section.key = value', got {line!r}"]
    if errors:
        raise ConfigError(errors)


def read_config_file(path):
    """Raw values of a config file as {section: {key: value}} plus foreground overrides"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError({'config': [f"{path} does not exist"]})
    _check_syntax(path)
    repository = RepositoryEnv(str(path))
    reader = Config(repository)

    values, overrides, errors = {}, {}, {}
    for key in repository.data:
        section, _, name = key.partition('.')
        if section == 'foreground' and name.count('.') == 1:
            component, param = name.split('.')
            overrides.setdefault(component, {})[param] = reader(key)
            continue
        serializer_class = SECTION_SERIALIZERS.get(section)
        if serializer_class is None or name not in serializer_class().fields:
            errors[key] = ["Unknown key."]
            continue
        cast = Csv() if key in LIST_KEYS else str
        values.setdefault(section, {})[name] = reader(key, cast=cast)
    if errors:
        raise ConfigError(errors)
    return values, overrides


def _validate_overrides(overrides, components):
    validated, errors = {}, {}
    fields = set(ForegroundOverrideSerializer().fields)
    for component, params in sorted(overrides.items()):
        prefix = f'foreground.{component}'
        if component not in components:
            errors[prefix] = [f"Component is not listed in foreground.components {components}."]
            continue
        unknown = sorted(set(params) - fields)
        for param in unknown:
            errors[f'{prefix}.{param}'] = ["Unknown key."]
        serializer = ForegroundOverrideSerializer(data=params)
        if serializer.is_valid():
            validated[component] = dict(serializer.validated_data)
        else:
            errors.update(_flatten_errors(prefix, serializer.errors))
    return validated, errors


def _cross_check(sections):
    """Rules spanning several sections"""
    errors = {}
    sky, clean, evaluate = sections['sky'], sections['clean'], sections['evaluate']
    patch_size = evaluate['patch_size']
    if patch_size > sky['n_pix'] ** 2 or patch_size > sky['n_channels']:
        errors['evaluate.patch_size'] = [
            f"Must not exceed the cube ({sky['n_pix'] ** 2} rows, {sky['n_channels']} channels)."
        ]
    if max(clean['svd_modes']) > patch_size:
        errors['clean.svd_modes'] = [f"Mode counts must not exceed the patch size {patch_size}."]
    factor = sections['preprocess']['downsample_factor']
    if factor > sky['n_channels']:
        errors['preprocess.downsample_factor'] = ["Must not exceed sky.n_channels."]
        return errors
    reduced = min(patch_size, sky['n_channels'] // factor)
    if clean['svd_spectrum_modes'] > reduced:
        errors['clean.svd_spectrum_modes'] = [f"Must not exceed {reduced} (patch size and downsampled channels)."]
    if clean['ica_components'] > reduced:
        errors['clean.ica_components'] = [f"Must not exceed {reduced} (patch size and downsampled channels)."]
    return errors


def load_config(path, profile=None, seed=None, output_dir=None):
    """Validated RunConfig from ``path`` on top of ``profile`` defaults.

    ``seed`` and ``output_dir`` override the file. Raises ConfigError with
    one ``section.key: message`` line per problem.
    """
    profile = profile or settings.IMBENCH_PROFILE
    if profile not in settings.PIPELINE_PROFILES:
        raise ConfigError({'profile': [f"Unknown profile {profile!r}; choose from {sorted(settings.PIPELINE_PROFILES)}."]})

    values, overrides = read_config_file(path)
    raw = copy.deepcopy(settings.PIPELINE_PROFILES[profile])
    for section, section_values in values.items():
        raw.setdefault(section, {}).update(section_values)
    if seed is not None:
        raw.setdefault('run', {})['seed'] = seed

    sections, errors = {}, {}
    for section, serializer_class in SECTION_SERIALIZERS.items():
        serializer = serializer_class(data=raw.get(section, {}))
        if serializer.is_valid():
            sections[section] = dict(serializer.validated_data)
        else:
            errors.update(_flatten_errors(section, serializer.errors))

    if 'foreground' in sections:
        validated_overrides, override_errors = _validate_overrides(
            overrides, sections['foreground']['components']
        )
        errors.update(override_errors)
    else:
        validated_overrides = {}
    if not errors:
        errors.update(_cross_check(sections))
    if errors:
        raise ConfigError(errors)

    if output_dir is None:
        output_dir = sections['run'].pop('output_dir') or settings.IMBENCH_OUTPUT_DIR
    else:
        sections['run'].pop('output_dir')

    config = RunConfig(
        sections=sections,
        foreground_overrides=validated_overrides,
        output_dir=str(output_dir),
        profile=profile,
    )
    try:
        config.check()
    except ValueError as e:
        raise ConfigError({'config': [str(e)]}) from e
    logger.info(f"Loaded {path} (profile {profile}, config hash {config.config_hash[:12]})")
    return config
