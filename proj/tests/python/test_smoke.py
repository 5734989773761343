import math
import os
import tempfile

import numpy as np
import pytest

import dpmem

SMALL = dict(num_dialogues=4, min_sentences=3, max_sentences=5, min_tokens=2, max_tokens=4,
             codebook_size=40, band_width=3, topic_band_width=4, seed=5)
MODEL = dict(embed_dim=16, num_layers=1, num_heads=2, mlp_ratio=2, n_limit=32, seed=3,
             vocabulary=dict(text_stub_size=0, codebook_size=40, num_emotions=4))


def test_generate_corpus_is_deterministic():
    a = dpmem.generate_corpus(SMALL)
    b = dpmem.generate_corpus(SMALL)
    assert len(a) == 4
    assert all(x == y for x, y in zip(a, b))
    for d in a:
        assert 3 <= len(d) <= 5
        assert len(d.emotions) == len(d.sentences)
        assert d.final_emotion == d.emotions[-1]


def test_forward_shape_and_vocabulary():
    m = dpmem.Model(MODEL)
    v = m.vocabulary
    assert v.total == 40 + 1 + 4
    assert v.audio_end_id == 40
    logits = m.forward([1, 2, 3, v.audio_end_id])
    assert isinstance(logits, np.ndarray)
    assert logits.shape == (4, v.total)
    assert np.all(np.isfinite(logits))
    with pytest.raises(ValueError):
        m.forward([1] * 33)


def test_dpm_matches_one_shot_on_a_single_sentence():
    m = dpmem.Model(MODEL)
    d = dpmem.DialogueSample([[4, 5, 6]], [2])
    shot = dpmem.one_shot_infer(m, d)
    mem = dpmem.dpm_infer(m, d, n_r=8)
    assert mem["update_count"] == 0
    assert mem["predicted"] == shot["predicted"]
    assert np.allclose(mem["distribution"], shot["distribution"])
    assert math.isclose(sum(shot["distribution"]), 1.0, rel_tol=1e-6)


def test_dpm_leaves_frozen_weights_alone():
    m = dpmem.Model(MODEL)
    before = m.frozen_state_digest()
    d = dpmem.generate_corpus(SMALL)[0]
    r = dpmem.dpm_infer(m, d, n_r=12, learning_rate=1e-2)
    assert r["update_count"] == len(d) - 1
    assert len(r["losses"]) == r["update_count"]
    assert r["cost"] == dpmem.cost_counter(r["forward_lengths"])
    assert m.frozen_state_digest() == before


def test_window_check_and_metrics():
    ok, _ = dpmem.window_check(64, 16, 48)
    assert ok
    ok, message = dpmem.window_check(64, 17, 48)
    assert not ok and message
    r = dpmem.metrics([[3, 1], [0, 4]])
    assert math.isclose(r["wa"], 7 / 8)
    assert math.isclose(r["ua"], (0.75 + 1.0) / 2)


def test_presets_and_bench():
    assert dpmem.ablation_preset()["model"]["n_limit"] == 96
    assert dpmem.context_preset()["model"]["n_limit"] == 128
    b = dpmem.run_complexity_bench(sentences=4, sentence_tokens=4, n_r=8, n_limit=64)
    assert b["dpm_cost"][1] > b["dpm_cost"][0]
    assert b["one_shot_cost"][1] > b["dpm_cost"][1]


def test_cli_and_checkpoint_round_trip():
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "c.jsonl")
        code, out, err = dpmem.run_cli(["gen-data", "--dialogues", "2", "--min-sentences", "3",
                                        "--max-sentences", "4", "--codebook", "64", "--out", path])
        assert code == 0, err
        assert len(dpmem.read_corpus(path)) == 2
        assert dpmem.run_cli(["nonsense"])[0] == 2
        m = dpmem.Model(MODEL)
        m.save(os.path.join(tmp, "m.ckpt"))
        back = dpmem.load_model(os.path.join(tmp, "m.ckpt"))
        assert np.array_equal(back.forward([1, 2, 3]), m.forward([1, 2, 3]))
        with pytest.raises(dpmem.CheckpointError):
            dpmem.load_model(os.path.join(tmp, "missing.ckpt"))
