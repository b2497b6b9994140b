import hashlib
import json
import logging
import platform
from dataclasses import dataclass, field, replace
from importlib import metadata
from pathlib import Path

from contamination.models import RfiModel
from cube.models import FrequencyAxis
from imbench import __version__
from restore.services import build_restorer
from skysim.models import FOREGROUND_PRESETS, CosmologyParams, HiFieldSpec, SkyPatchSpec

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'
TIMINGS_NAME = 'timings.json'
VERSIONED_PACKAGES = ('numpy', 'scipy', 'pandas', 'Django', 'djangorestframework', 'python-decouple')


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; ``sections`` mirrors the config file layout"""
    sections: dict
    foreground_overrides: dict = field(default_factory=dict)
    output_dir: str = 'runs'
    profile: str = 'desk'

    def __getitem__(self, section):
        return self.sections[section]

    @property
    def config_hash(self):
        """sha256 of the resolved values; the output location is not part of it"""
        canonical = json.dumps(
            {'sections': self.sections, 'foreground_overrides': self.foreground_overrides},
            sort_keys=True, separators=(',', ':'),
        )
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    @property
    def seed(self):
        return self.sections['run']['seed']

    @property
    def sky_spec(self):
        sky = self.sections['sky']
        axis = FrequencyAxis.from_band(
            sky['center_frequency_mhz'] * 1e6,
            sky['channel_width_khz'] * 1e3,
            sky['n_channels'],
        )
        return SkyPatchSpec(
            ra_range=(sky['ra_min'], sky['ra_max']),
            dec_range=(sky['dec_min'], sky['dec_max']),
            n_pix=sky['n_pix'],
            axis=axis,
        )

    @property
    def cosmology(self):
        return CosmologyParams(**self.sections['cosmology'])

    @property
    def hi_spec(self):
        return HiFieldSpec(**self.sections['hi'])

    @property
    def foreground_models(self):
        models = []
        for name in self.sections['foreground']['components']:
            params = dict(self.foreground_overrides.get(name, {}))
            if 'nu_ref_mhz' in params:
                params['nu_ref'] = params.pop('nu_ref_mhz') * 1e6
            models.append(replace(FOREGROUND_PRESETS[name], **params))
        return models

    @property
    def rfi_model(self):
        rfi = self.sections['rfi']
        return RfiModel(
            broadband_rate=rfi['broadband_rate'],
            broadband_width=(rfi['broadband_width_min'], rfi['broadband_width_max']),
            broadband_duration=(rfi['broadband_duration_min'], rfi['broadband_duration_max']),
            narrowband_channel_prob=rfi['narrowband_channel_prob'],
            outlier_rate=rfi['outlier_rate'],
            amplitude_scale=(rfi['amplitude_scale_min'], rfi['amplitude_scale_max']),
            seed=self.seed,
        )

    def build_restorer(self, **extra):
        """Restorer named by ``restore.method`` with its parameters"""
        options = self.sections['restore']
        method = options['method']
        if method == 'spectral_poly':
            return build_restorer(
                method,
                order=options['poly_order'],
                clip_sigma=options['clip_sigma'] or None,
                clip_passes=options['clip_passes'],
            )
        if method == 'low_rank':
            return build_restorer(method, rank=options['rank'], tol=options['tol'], max_iter=options['max_iter'])
        if method == 'external':
            return build_restorer(method, path=options['external_path'], rtol=options['external_rtol'], **extra)
        return build_restorer(method)

    def check(self):
        """Build every domain object once; raises ValueError on the first invalid one"""
        self.sky_spec
        self.cosmology
        self.hi_spec
        self.foreground_models
        self.rfi_model

    def to_dict(self):
        return {
            'profile': self.profile,
            'output_dir': self.output_dir,
            'config_hash': self.config_hash,
            'sections': self.sections,
            'foreground_overrides': self.foreground_overrides,
        }


def file_checksum(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


def package_versions():
    versions = {'imbench': __version__, 'python': platform.python_version()}
    for package in VERSIONED_PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = 'unknown'
    return versions


@dataclass
class RunManifest:
    """Artifacts of a run with their checksums.

    Wall-clock timings live in a sibling ``timings.json`` so that the
    manifest of a rerun is byte-identical.
    """
    config_hash: str
    artifacts: dict = field(default_factory=dict)  # relative path -> sha256
    stages: dict = field(default_factory=dict)  # stage -> 'ok' | 'failed'
    failures: list = field(default_factory=list)
    versions: dict = field(default_factory=package_versions)
    timings: dict = field(default_factory=dict)  # stage -> seconds

    @classmethod
    def open(cls, directory, config_hash):
        """Existing manifest of ``directory`` when it belongs to ``config_hash``, else a new one"""
        directory = Path(directory)
        path = directory / MANIFEST_NAME
        if not path.exists():
            return cls(config_hash)
        payload = json.loads(path.read_text(encoding='utf-8'))
        if payload.get('config_hash') != config_hash:
            logger.warning(f"{path} belongs to config {payload.get('config_hash', '?')[:12]}; starting a new manifest")
            return cls(config_hash)
        timings_path = directory / TIMINGS_NAME
        timings = json.loads(timings_path.read_text(encoding='utf-8')) if timings_path.exists() else {}
        return cls(
            config_hash=config_hash,
            artifacts=payload.get('artifacts', {}),
            stages=payload.get('stages', {}),
            failures=payload.get('failures', []),
            versions=package_versions(),
            timings=timings,
        )

    def begin_stage(self, stage):
        self.failures = [failure for failure in self.failures if failure['stage'] != stage]
        self.stages.pop(stage, None)

    def end_stage(self, stage, seconds, ok=True):
        self.stages[stage] = 'ok' if ok else 'failed'
        self.timings[stage] = round(seconds, 3)

    def record_failure(self, stage, message):
        self.failures.append({'stage': stage, 'error': message})

    def record_artifact(self, directory, path):
        relative = Path(path).relative_to(directory).as_posix()
        self.artifacts[relative] = file_checksum(path)

    @property
    def ok(self):
        return not self.failures and all(status == 'ok' for status in self.stages.values())

    def payload(self):
        return {
            'config_hash': self.config_hash,
            'artifacts': self.artifacts,
            'stages': self.stages,
            'failures': self.failures,
            'versions': self.versions,
        }

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / MANIFEST_NAME).write_text(
            json.dumps(self.payload(), indent=2, sort_keys=True) + '\n', encoding='utf-8'
        )
        (directory / TIMINGS_NAME).write_text(
            json.dumps(self.timings, indent=2, sort_keys=True) + '\n', encoding='utf-8'
        )
        return directory / MANIFEST_NAME

    def verify(self, directory):
        """Artifacts that are missing or whose checksum changed"""
        directory = Path(directory)
        problems = []
        for name, checksum in sorted(self.artifacts.items()):
            path = directory / name
            if not path.exists():
                problems.append(f"{name}: missing")
            elif file_checksum(path) != checksum:
                problems.append(f"{name}: checksum mismatch")
        return problems
