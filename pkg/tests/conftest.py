from __future__ import annotations

import numpy as np
import pytest

from esc_codec.csrvq import CodecConfig, CodecModel, VQConfig
from esc_codec.dsp import MelScaleSet, StftConfig, stft
from esc_codec.transformer import ArchConfig

# F = 12 bins -> 4 patch rows; two layers; every quantizer sees d = 16.
TINY_STFT = StftConfig(win_length=16, hop_length=4, n_fft=22)
TINY_ARCH = ArchConfig(layer_dims=(4, 8), heads=(2, 2), depth=1, window=(2, 2), mlp_ratio=2.0)
TINY_VQ = VQConfig(product_size=2, codebook_size=8, code_dim=4)
TINY_MEL = MelScaleSet(windows=(16, 32), n_mels=(3, 6))
TINY_SAMPLES = 64

SMALL_ARCH = ArchConfig(layer_dims=(8, 16, 32), heads=(2, 2, 4), depth=1)
SMALL_VQ = VQConfig(product_size=2, codebook_size=16, code_dim=8)


def tiny_config(**vq) -> CodecConfig:
    return CodecConfig(TINY_STFT, TINY_ARCH, VQConfig(**{**TINY_VQ.__dict__, **vq}))


def small_config(**vq) -> CodecConfig:
    return CodecConfig(StftConfig(), SMALL_ARCH, VQConfig(**{**SMALL_VQ.__dict__, **vq}))


def spectra(waves: np.ndarray, config: StftConfig) -> np.ndarray:
    return np.stack([stft(w, config) for w in np.atleast_2d(waves)])


@pytest.fixture
def tiny_model() -> CodecModel:
    return CodecModel(tiny_config(), seed=3)


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(11)
    x = 0.5 * rng.standard_normal((3, TINY_SAMPLES))
    return x, spectra(x, TINY_STFT)


@pytest.fixture(scope="session")
def small_model() -> CodecModel:
    return CodecModel(small_config(), seed=5)


@pytest.fixture(scope="session")
def small_batch():
    rng = np.random.default_rng(7)
    x = 0.3 * rng.standard_normal((2, 2560))
    return x, spectra(x, StftConfig())


# --------------------------------------------------------------------------
# acceptance verdicts: tests marked ``criterion(n, title)`` roll up into one
# PASS/FAIL line per criterion at the end of the run.

_VERDICTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        n, title = marker.args
        entry = _VERDICTS.setdefault(n, {"title": title, "ok": True, "failed": []})
        if not rep.passed or hasattr(rep, "wasxfail"):
            entry["ok"] = False
            entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_VERDICTS):
        v = _VERDICTS[n]
        line = f"criterion {n:>2} {v['title']}: {'PASS' if v['ok'] else 'FAIL'}"
        if v["failed"]:
            line += f"  ({', '.join(v['failed'])})"
        terminalreporter.write_line(line)
