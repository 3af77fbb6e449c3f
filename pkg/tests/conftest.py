import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config_file(tmp_path):
    """Seconds-long synthetic run: 8x8 images, 2x downsampling, 4 codes"""

    def _write(**overrides):
        values = {
            'quantizer': 'hypervq',
            'dataset': 'synth',
            'image_size': 8,
            'synth_classes': 3,
            'train_size': 24,
            'test_size': 12,
            'num_codes': 4,
            'latent_dim': 2,
            'hidden_channels': 4,
            'residual_blocks': 1,
            'downsample': 2,
            'batch_size': 8,
            'epochs': 1,
            'max_steps': 3,
            'classifier_hidden': 4,
            'classifier_epochs': 2,
            'max_eval_points': 64,
            'out_dir': str(tmp_path / 'run'),
        }
        values.update(overrides)
        path = tmp_path / 'run.env'
        path.write_text(''.join(f"{key.upper()}={value}\n" for key, value in values.items()), encoding='utf-8')
        return str(path)

    return _write


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: long training runs (deselect with -m "not slow")')
