"""CSV reports. Column orders are fixed; every file starts with the config hash."""

import pandas as pd

from imbench.tables import write_table
from .services import format_psnr

FRACTION_COLUMNS = ['bin_lo', 'bin_hi', 'count', 'p25', 'median', 'p75']
SPECTRUM_COLUMNS = ['l_center', 'mode_count', 'cl_value']
SUMMARY_COLUMNS = ['method', 'variant', 'rms', 'cm_cu', 'ssim', 'psnr', 'delta_log_cl']
MODE_SCAN_COLUMNS = ['variant', 'k', 'count', 'p25', 'median', 'p75']
OFFSET_COLUMNS = ['method', 'variant', 'bin_lo', 'bin_hi', 'offset']


def write_fraction_bins(stats, path, config_hash=None):
    frame = pd.DataFrame(list(stats.rows()), columns=FRACTION_COLUMNS)
    return write_table(frame, path, config_hash)


def write_spectrum(estimate, path, config_hash=None):
    frame = pd.DataFrame({
        'l_center': estimate.bin_centers,
        'mode_count': estimate.mode_counts,
        'cl_value': estimate.cl_values,
    }, columns=SPECTRUM_COLUMNS)
    return write_table(frame, path, config_hash)


def write_summary(rows, path, config_hash=None):
    """``rows`` are dicts keyed by SUMMARY_COLUMNS; psnr may be +inf"""
    records = [dict(row, psnr=format_psnr(row['psnr'])) for row in rows]
    frame = pd.DataFrame(records, columns=SUMMARY_COLUMNS)
    return write_table(frame, path, config_hash)


def write_mode_scan(rows, path, config_hash=None):
    frame = pd.DataFrame(list(rows), columns=MODE_SCAN_COLUMNS)
    return write_table(frame, path, config_hash)


def write_offsets(rows, path, config_hash=None):
    frame = pd.DataFrame(list(rows), columns=OFFSET_COLUMNS)
    return write_table(frame, path, config_hash)
