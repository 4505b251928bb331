import numpy as np
import pytest

from speechvgg import AudioBuffer, ModelConfig, build, save_wav


def numerical_grad(f, x, h=1e-5):
    """Central finite differences of a scalar function over every element of x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    out = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a, b):
    """Relative error between two gradient tensors, on the full-vector norm."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


@pytest.fixture
def tiny_model():
    """Smallest usable extractor, float32, random weights."""
    config = ModelConfig(num_classes=4, width_scale=0.0625, fc_dims=(16, 16))
    return build(config, seed=7)


@pytest.fixture
def tiny_model_f64():
    """Float64 twin of tiny_model for gradient checks."""
    config = ModelConfig(num_classes=4, width_scale=0.0625, fc_dims=(16, 16))
    return build(config, seed=7, dtype=np.float64)


def write_tone(path, freq=440.0, duration=1.0, sr=16000, amp=0.5):
    t = np.arange(int(sr * duration)) / sr
    save_wav(path, AudioBuffer(amp * np.sin(2 * np.pi * freq * t), sr))
    return path
