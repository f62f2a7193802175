import numpy as np
import pytest

from passt import frontend, net
from passt.tokenizer import PatchGeometry


@pytest.fixture
def toy_config():
    geom = PatchGeometry(stride_f=12, stride_t=12, n_mels=40, n_frames=40)
    return net.ModelConfig(embed_dim=16, heads=2, depth=2, n_classes=4, geometry=geom)


@pytest.fixture
def tone_wav(tmp_path):
    """Ten seconds of a 1 kHz tone, written as 16-bit PCM."""
    t = np.arange(320000) / frontend.SAMPLE_RATE
    w = frontend.Waveform((0.25 * np.sin(2 * np.pi * 1000 * t)).astype(np.float32))
    path = tmp_path / "tone.wav"
    frontend.save_pcm(path, w)
    return path
