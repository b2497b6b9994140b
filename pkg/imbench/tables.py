"""CSV tables with a leading ``# config_hash=...`` comment line."""

from pathlib import Path

import pandas as pd


def write_table(frame, path, config_hash=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as handle:
        if config_hash is not None:
            handle.write(f'# config_hash={config_hash}\n')
        frame.to_csv(handle, index=False, lineterminator='\n')
    return path


def read_table(path):
    return pd.read_csv(path, comment='#')
