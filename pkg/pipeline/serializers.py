from rest_framework import serializers

from clean.services import CONTRASTS
from restore.services import RESTORERS
from skysim.models import FOREGROUND_PRESETS, PHYSICAL_CONSTANTS, CosmologyParams

CLEAN_METHODS = ('polyfit', 'svd', 'ica')


class RunSerializer(serializers.Serializer):
    """Serializer for run-level settings"""
    seed = serializers.IntegerField(min_value=0)
    output_dir = serializers.CharField(required=False, allow_blank=True, default='')


class SkySerializer(serializers.Serializer):
    """Serializer for the observed patch and band"""
    ra_min = serializers.FloatField()
    ra_max = serializers.FloatField()
    dec_min = serializers.FloatField(min_value=-90.0, max_value=90.0)
    dec_max = serializers.FloatField(min_value=-90.0, max_value=90.0)
    n_pix = serializers.IntegerField(min_value=8)
    center_frequency_mhz = serializers.FloatField(min_value=0.0)
    channel_width_khz = serializers.FloatField(min_value=0.0)
    n_channels = serializers.IntegerField(min_value=1)

    def validate_n_pix(self, value):
        if value % 2:
            raise serializers.ValidationError("Must be even.")
        return value

    def validate(self, attrs):
        """Validate range ordering and the band edges"""
        if attrs['ra_min'] >= attrs['ra_max']:
            raise serializers.ValidationError({'ra_min': "Must be below ra_max."})
        if attrs['dec_min'] >= attrs['dec_max']:
            raise serializers.ValidationError({'dec_min': "Must be below dec_max."})
        if attrs['channel_width_khz'] <= 0:
            raise serializers.ValidationError({'channel_width_khz': "Must be positive."})
        half_band = 0.5 * attrs['n_channels'] * attrs['channel_width_khz'] * 1e3
        low = attrs['center_frequency_mhz'] * 1e6 - half_band
        high = attrs['center_frequency_mhz'] * 1e6 + half_band
        if low <= 0 or high > PHYSICAL_CONSTANTS.nu_21:
            raise serializers.ValidationError({
                'center_frequency_mhz': f"Band {low / 1e6:.3f}-{high / 1e6:.3f} MHz must lie "
                                        f"within (0, {PHYSICAL_CONSTANTS.nu_21 / 1e6:.3f}] MHz."
            })
        return attrs


class CosmologySerializer(serializers.Serializer):
    """Serializer for flat LCDM parameters"""
    omega_b = serializers.FloatField(default=CosmologyParams.omega_b)
    omega_m = serializers.FloatField(default=CosmologyParams.omega_m)
    omega_lambda = serializers.FloatField(default=CosmologyParams.omega_lambda)
    h = serializers.FloatField(default=CosmologyParams.h)
    x_hi = serializers.FloatField(default=CosmologyParams.x_hi)

    def validate(self, attrs):
        try:
            CosmologyParams(**attrs)
        except ValueError as e:
            raise serializers.ValidationError(str(e))
        return attrs


class HiSerializer(serializers.Serializer):
    """Serializer for the HI overdensity field"""
    cl_amplitude = serializers.FloatField(min_value=0.0, default=1.5e-6)
    cl_slope = serializers.FloatField(default=1.0)
    frequency_coherence = serializers.FloatField(default=2e-4)
    l_ref = serializers.FloatField(default=1000.0)
    lognormal = serializers.BooleanField(default=False)

    def validate(self, attrs):
        for name in ('frequency_coherence', 'l_ref'):
            if attrs[name] <= 0:
                raise serializers.ValidationError({name: "Must be positive."})
        return attrs


class ForegroundSerializer(serializers.Serializer):
    """Serializer for the foreground component list"""
    components = serializers.ListField(
        child=serializers.ChoiceField(choices=sorted(FOREGROUND_PRESETS)),
        allow_empty=True,
        default=list(FOREGROUND_PRESETS),
    )
    allow_empty = serializers.BooleanField(default=False)

    def validate(self, attrs):
        if not attrs['components'] and not attrs['allow_empty']:
            raise serializers.ValidationError(
                {'components': "At least one component is required unless allow_empty is set."}
            )
        if len(set(attrs['components'])) != len(attrs['components']):
            raise serializers.ValidationError({'components': "Components must be unique."})
        return attrs


class ForegroundOverrideSerializer(serializers.Serializer):
    """Serializer for ``foreground.<component>.<param>`` overrides"""
    amplitude = serializers.FloatField(min_value=0.0, required=False)
    beta = serializers.FloatField(required=False)
    alpha = serializers.FloatField(required=False)
    xi = serializers.FloatField(required=False)
    l_ref = serializers.FloatField(required=False)
    nu_ref_mhz = serializers.FloatField(required=False)


class RfiSerializer(serializers.Serializer):
    """Serializer for the synthetic interference model"""
    broadband_rate = serializers.FloatField(min_value=0.0, default=0.2)
    broadband_width_min = serializers.IntegerField(min_value=1, default=4)
    broadband_width_max = serializers.IntegerField(min_value=1, default=24)
    broadband_duration_min = serializers.IntegerField(min_value=1, default=50)
    broadband_duration_max = serializers.IntegerField(min_value=1, default=400)
    narrowband_channel_prob = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.02)
    outlier_rate = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.002)
    amplitude_scale_min = serializers.FloatField(default=10.0)
    amplitude_scale_max = serializers.FloatField(default=1000.0)
    template_cube = serializers.CharField(required=False, allow_blank=True, default='')
    template_mask = serializers.CharField(required=False, allow_blank=True, default='')

    def validate(self, attrs):
        """Validate ordered ranges and template pairing"""
        for name in ('broadband_width', 'broadband_duration', 'amplitude_scale'):
            low, high = attrs[f'{name}_min'], attrs[f'{name}_max']
            if not 0 < low <= high:
                raise serializers.ValidationError(
                    {f'{name}_min': f"Must be positive and not above {name}_max."}
                )
        if bool(attrs['template_cube']) != bool(attrs['template_mask']):
            raise serializers.ValidationError(
                {'template_cube': "template_cube and template_mask must be given together."}
            )
        return attrs


class FlaggingSerializer(serializers.Serializer):
    max_iterations = serializers.IntegerField(min_value=1, default=10)
    outlier_passes = serializers.IntegerField(min_value=1, default=1)
    exclude_flagged = serializers.BooleanField(default=True)


class RestoreSerializer(serializers.Serializer):
    """Serializer for the restorer selection"""
    method = serializers.ChoiceField(choices=sorted(RESTORERS), default='spectral_poly')
    poly_order = serializers.IntegerField(min_value=0, default=2)
    # 0 fits every observed cell
    clip_sigma = serializers.FloatField(min_value=0.0, default=0.0)
    clip_passes = serializers.IntegerField(min_value=1, default=5)
    rank = serializers.IntegerField(min_value=1, default=4)
    tol = serializers.FloatField(default=1e-6)
    max_iter = serializers.IntegerField(min_value=1, default=100)
    external_path = serializers.CharField(required=False, allow_blank=True, default='')
    external_rtol = serializers.FloatField(min_value=0.0, default=1e-6)

    def validate(self, attrs):
        if attrs['method'] == 'external' and not attrs['external_path']:
            raise serializers.ValidationError({'external_path': "Required for the external restorer."})
        if attrs['tol'] <= 0:
            raise serializers.ValidationError({'tol': "Must be positive."})
        return attrs


class CleanSerializer(serializers.Serializer):
    """Serializer for the removal methods"""
    methods = serializers.ListField(
        child=serializers.ChoiceField(choices=CLEAN_METHODS),
        allow_empty=False,
        default=list(CLEAN_METHODS),
    )
    poly_order = serializers.IntegerField(min_value=0, default=2)
    svd_modes = serializers.ListField(
        child=serializers.IntegerField(min_value=0),
        allow_empty=False,
        default=list(range(21)),
    )
    svd_spectrum_modes = serializers.IntegerField(min_value=0, default=4)
    svd_center = serializers.BooleanField(default=False)
    ica_components = serializers.IntegerField(min_value=0, default=4)
    ica_contrast = serializers.ChoiceField(choices=CONTRASTS, default='cube')
    ica_tol = serializers.FloatField(default=1e-4)
    ica_max_iter = serializers.IntegerField(min_value=1, default=200)
    ica_restore_means = serializers.BooleanField(default=False)

    def validate(self, attrs):
        if attrs['svd_modes'] != sorted(set(attrs['svd_modes'])):
            raise serializers.ValidationError({'svd_modes': "Must be strictly increasing."})
        if attrs['ica_tol'] <= 0:
            raise serializers.ValidationError({'ica_tol': "Must be positive."})
        return attrs


class PreprocessSerializer(serializers.Serializer):
    downsample_factor = serializers.IntegerField(min_value=1, default=20)


class EvaluateSerializer(serializers.Serializer):
    """Serializer for metrics and binning"""
    fraction_edges = serializers.ListField(
        child=serializers.FloatField(min_value=0.0, max_value=1.0),
        min_length=2,
        default=[0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4],
    )
    patch_size = serializers.IntegerField(min_value=4, default=256)
    max_fraction = serializers.FloatField(min_value=0.0, max_value=1.0, default=0.40)
    max_patches = serializers.IntegerField(min_value=1, default=2000)
    ell_bins = serializers.IntegerField(min_value=1, default=12)
    ssim_window = serializers.IntegerField(min_value=0, default=0)
    rms_about_mean = serializers.BooleanField(default=False)

    def validate_fraction_edges(self, value):
        if any(b <= a for a, b in zip(value, value[1:])):
            raise serializers.ValidationError("Must be strictly increasing.")
        return value


class ContaminateSerializer(serializers.Serializer):
    export_patches = serializers.BooleanField(default=False)


SECTION_SERIALIZERS = {
    'run': RunSerializer,
    'sky': SkySerializer,
    'cosmology': CosmologySerializer,
    'hi': HiSerializer,
    'foreground': ForegroundSerializer,
    'rfi': RfiSerializer,
    'flagging': FlaggingSerializer,
    'restore': RestoreSerializer,
    'clean': CleanSerializer,
    'preprocess': PreprocessSerializer,
    'evaluate': EvaluateSerializer,
    'contaminate': ContaminateSerializer,
}

# Keys whose values are comma-separated lists
LIST_KEYS = {
    'foreground.components',
    'clean.methods',
    'clean.svd_modes',
    'evaluate.fraction_edges',
}
