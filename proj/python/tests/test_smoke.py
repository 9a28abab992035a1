import math

import pytest

import normlab

TINY = {
    "seeds": {"params": 3, "data": 5},
    "task": {"kind": "copy", "vocab_size": 11, "min_len": 2, "max_len": 3},
    "model": {"encoder_layers": 1, "decoder_layers": 1, "d_model": 4, "d_ffn": 8, "heads": 2,
              "max_len": 4, "dropout": 0.0},
    "strategy": {"kind": "branchnorm", "max_norm_step": 10},
    "train": {"lr": 1e-3, "warmup_updates": 0, "max_updates": 6, "batch_size_tokens": 2},
}


def test_coefficients_and_schedule():
    a_enc, b_enc, a_dec, b_dec = normlab.deepnorm_coeffs(1, 1)
    assert a_enc == pytest.approx(0.81, abs=1e-12)
    assert b_enc == pytest.approx(0.87, abs=1e-12)
    assert a_enc * b_enc == pytest.approx(0.81 * 0.87, abs=1e-12)
    assert normlab.branchnorm_alpha(2000, 4000) == 0.5
    assert normlab.branchnorm_alpha(5000, 4000, "sigmoid") == 1.0


def test_analyzer_truths():
    assert normlab.cosine_similarity([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0, abs=1e-12)
    assert normlab.cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert normlab.relu_sparsity([-1.0, -2.0]) == 0.0
    with pytest.raises(normlab.UndefinedSimilarityError):
        normlab.cosine_similarity([0.0, 0.0], [1.0, 0.0])


def test_config_strictness():
    assert normlab.resolved_config({})["train"]["lr"] == 5e-4
    with pytest.raises(normlab.ConfigError, match="d_modle"):
        normlab.resolved_config({"model": {"d_modle": 8}})
    assert normlab.config_hash(TINY) == normlab.config_hash(normlab.resolved_config(TINY))


def test_probe_train_analyze_oracle():
    at0, later = normlab.probe(TINY, steps=[0, 10])
    assert at0["param_grad_norms"] == [0.0] * 5
    assert later["param_grad_norms"][-1] > 0.0

    run = normlab.train(TINY)
    assert run["steps"] == 6 and not run["diverged"]
    assert [r["step"] for r in run["records"]] == list(range(1, 7))
    assert normlab.train(TINY)["parameter_checksum"] == run["parameter_checksum"]

    report = normlab.analyze(TINY, t=0)
    assert len(report["encoder_sublayer_cosines"]) == 1
    assert len(report["sparsity"]) == 2

    oracle = normlab.oracle(TINY, strategy="postln")
    assert oracle["max_relative_error"] < 1e-6
    assert math.isfinite(oracle["residual_identity_error"])


def test_sweep_rows():
    cfg = dict(TINY, sweep={"max_norm_steps": [100, 400, 4000, 20000], "strategies": ["branchnorm"]})
    rows = normlab.sweep(cfg)
    assert [int(r["T"]) for r in rows] == [100, 400, 4000, 20000]
    assert all(r["diverged"] == "0" for r in rows)
