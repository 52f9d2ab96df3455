from __future__ import annotations

import csv

import numpy as np
import pytest

from esc_codec import numerics as nx
from esc_codec.csrvq import CodecModel, set_bypass
from esc_codec.numerics import Tensor
from esc_codec.training import (AdamW, TrainConfig, clip_gradients, global_norm, run_schedule, segment_corpus,
                                segment_samples, synth_corpus, total_loss, train_step)

from conftest import TINY_MEL, TINY_SAMPLES, TINY_STFT, spectra, tiny_config


def tiny_train(**kw) -> TrainConfig:
    base = dict(mel_windows=TINY_MEL.windows, mel_bins=TINY_MEL.n_mels, batch_size=3, total_steps=10,
                pretrain_steps=0, segment_seconds=0.004, eval_every=0, eval_clips=4)
    base.update(kw)
    return TrainConfig(**base)


def params_snapshot(model):
    return {k: p.data.copy() for k, p in model.named_parameters()}


# --------------------------------------------------------------------------
# optimizer


def test_adamw_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    init = rng.standard_normal((4, 3))
    grads = [rng.standard_normal((4, 3)) for _ in range(6)]
    p = Tensor(init.copy(), requires_grad=True)
    opt = AdamW([("w", p)], lr=1e-2, betas=(0.8, 0.99), eps=1e-7, weight_decay=0.1)
    tp = torch.nn.Parameter(torch.tensor(init.copy()))
    topt = torch.optim.AdamW([tp], lr=1e-2, betas=(0.8, 0.99), eps=1e-7, weight_decay=0.1)
    for g in grads:
        opt.step({"w": g.copy()})
        tp.grad = torch.tensor(g.copy())
        topt.step()
    np.testing.assert_allclose(p.data, tp.detach().numpy(), rtol=1e-12, atol=1e-14)


def test_adamw_skips_parameters_without_gradients():
    a, b = Tensor(np.ones(3), requires_grad=True), Tensor(np.ones(3), requires_grad=True)
    opt = AdamW([("a", a), ("b", b)], lr=0.1, weight_decay=0.5)
    opt.step({"a": np.ones(3)})
    assert np.array_equal(b.data, np.ones(3)) and not np.array_equal(a.data, np.ones(3))
    assert "b" not in opt.state.m


def test_clip_gradients_scales_to_max_norm():
    grads = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    assert clip_gradients(grads, 10.0) == 5.0 and grads["a"][0] == 3.0
    assert clip_gradients(grads, 1.0) == 5.0
    assert global_norm(grads) == pytest.approx(1.0, abs=1e-6)


# --------------------------------------------------------------------------
# objective


def test_total_loss_weights_and_bypass():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(TINY_SAMPLES)
    x_hat = x + 0.1 * rng.standard_normal(TINY_SAMPLES)
    X, X_hat = spectra(x, TINY_STFT), spectra(x_hat, TINY_STFT)
    cfg = tiny_train(lambda_mel=0.5, lambda_stft=2.0)
    none = total_loss(X, X_hat, x, x_hat, None, cfg)
    assert none.vq is None and none.floats()["vq"] == 0.0
    want = 0.5 * float(none.mel.data) + 2.0 * float(none.stft.data)
    assert float(none.total.data) == pytest.approx(want, rel=1e-12)
    parts = [Tensor(np.array(1.5)), Tensor(np.array(0.25))]
    withvq = total_loss(X, X_hat, x, x_hat, parts, cfg)
    assert float(withvq.total.data) == pytest.approx(want + 1.75, rel=1e-12)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(total_steps=10, pretrain_steps=11)
    with pytest.raises(ValueError):
        TrainConfig(dropout_rate=1.2)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)


# --------------------------------------------------------------------------
# steps


def tiny_batch_data(seed=0, n=3):
    x = 0.5 * np.random.default_rng(seed).standard_normal((n, TINY_SAMPLES))
    return x, spectra(x, TINY_STFT)


def run_steps(model, cfg, steps, seed=0):
    opt = AdamW(model.named_parameters(), cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(seed)
    batch = tiny_batch_data()
    return [train_step(batch, model, opt, cfg, rng) for _ in range(steps)]


def test_training_is_deterministic():
    cfg = tiny_train(learning_rate=1e-3)
    a, b = CodecModel(tiny_config(), seed=1), CodecModel(tiny_config(), seed=1)
    ra, rb = run_steps(a, cfg, 10), run_steps(b, cfg, 10)
    assert [r["loss"] for r in ra] == [r["loss"] for r in rb]
    for (k, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(p.data, q.data), k


def test_zero_learning_rate_leaves_parameters_untouched():
    model = CodecModel(tiny_config(), seed=1)
    before = params_snapshot(model)
    run_steps(model, tiny_train(learning_rate=0.0), 3)
    for k, p in model.named_parameters():
        assert np.array_equal(p.data, before[k]), k


def test_bypass_steps_leave_codebooks_bit_identical():
    model = CodecModel(tiny_config(), seed=1)
    set_bypass(model, True)
    books = [q.codebook.data.copy() for q in model.quantizers]
    projections = [q.w_in.data.copy() for q in model.quantizers]
    records = run_steps(model, tiny_train(learning_rate=1e-2), 5)
    assert all(r["vq"] == 0.0 for r in records)
    assert all(np.isnan(r["utilization"]) for r in records)
    for q, cb, w in zip(model.quantizers, books, projections):
        assert np.array_equal(q.codebook.data, cb) and np.array_equal(q.w_in.data, w)


def test_joint_steps_update_codebooks_and_report_utilization():
    model = CodecModel(tiny_config(), seed=1)
    books = [q.codebook.data.copy() for q in model.quantizers]
    records = run_steps(model, tiny_train(learning_rate=1e-2), 2)
    assert records[0]["vq"] > 0 and 0.0 <= records[0]["utilization"] <= 1.0
    assert not np.array_equal(model.quantizers[0].codebook.data, books[0])


def test_bypassed_autoencoder_overfits_a_fixed_batch():
    model = CodecModel(tiny_config(), seed=2)
    set_bypass(model, True)
    records = run_steps(model, tiny_train(learning_rate=3e-3, dropout_rate=0.0), 150)
    assert records[-1]["loss"] <= 0.5 * records[0]["loss"]


# --------------------------------------------------------------------------
# data


def test_synth_corpus_properties():
    clips = synth_corpus(3, 4, 0.5)
    again = synth_corpus(3, 4, 0.5)
    assert all(np.array_equal(a, b) for a, b in zip(clips, again))
    for c in clips:
        assert c.shape == (8000,)
        assert np.max(np.abs(c)) == pytest.approx(0.9)
        power = np.abs(np.fft.rfft(c)) ** 2
        freqs = np.fft.rfftfreq(c.size, 1 / 16000)
        assert power[freqs > 7900].sum() < 0.01 * power.sum()
    with pytest.raises(ValueError):
        synth_corpus(0, 1, 0.1)


def test_segmentation():
    codec = tiny_config()
    n = segment_samples(codec, 0.004)
    assert n == 64
    segs = segment_corpus([np.arange(200.0), np.arange(10.0)], n)
    assert segs.shape == (4, 64)
    assert np.array_equal(segs[1], np.arange(64.0, 128.0))
    assert np.array_equal(segs[3][:10], np.arange(10.0)) and not segs[3][10:].any()
    with pytest.raises(ValueError):
        segment_samples(codec, 0.0005)


# --------------------------------------------------------------------------
# schedule


def corpus():
    return list(0.5 * np.random.default_rng(4).standard_normal((4, 192)))


def test_schedule_activates_once_and_inits_codebooks_once(monkeypatch):
    calls = []
    orig = CodecModel.init_codebooks

    def counting(self, seed):
        calls.append(seed)
        orig(self, seed)

    model = CodecModel(tiny_config(), seed=0)
    monkeypatch.setattr(CodecModel, "init_codebooks", counting)
    cfg = tiny_train(total_steps=6, pretrain_steps=3, eval_every=2, learning_rate=1e-3)
    model, hist = run_schedule(corpus(), cfg, tiny_config(), model=model)
    assert calls == [cfg.seed]
    assert hist.activation_step == 3
    phases = [r["phase"] for r in hist.records]
    assert phases == ["pretrain"] * 3 + ["joint"] * 3
    at = [e for e in hist.evals if e["step"] == 3]
    assert [e["vq_active"] for e in at] == [False, True]
    assert hist.evals[-1]["step"] == 6


def test_schedule_without_pretraining_starts_active():
    _, hist = run_schedule(corpus(), tiny_train(total_steps=2), tiny_config())
    assert hist.activation_step == 0 and all(r["phase"] == "joint" for r in hist.records)


def test_schedule_that_never_activates_keeps_codebooks():
    model = CodecModel(tiny_config(), seed=0)
    books = [q.codebook.data.copy() for q in model.quantizers]
    _, hist = run_schedule(corpus(), tiny_train(total_steps=3, pretrain_steps=3), tiny_config(), model=model)
    assert hist.activation_step is None and not model.vq_active
    assert all(np.array_equal(q.codebook.data, cb) for q, cb in zip(model.quantizers, books))


def test_schedule_syncs_beta_and_writes_history(tmp_path):
    model, hist = run_schedule(corpus(), tiny_train(total_steps=2, beta=0.5), tiny_config())
    assert all(q.beta == 0.5 for q in model.quantizers)
    hist.write_csv(tmp_path / "h.csv")
    hist.write_eval_csv(tmp_path / "e.csv")
    rows = list(csv.DictReader((tmp_path / "h.csv").open()))
    assert len(rows) == 2 and rows[0]["phase"] == "joint"
    assert list(csv.DictReader((tmp_path / "e.csv").open()))[-1]["step"] == "2"
