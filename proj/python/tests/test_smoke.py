import json
import math

import pytest

import pcpe


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("pcpe")
    info = pcpe.synth(str(root / "data"), n_dialogues=24, n_valid=6, seed=3)
    assert info["train_dialogues"] == 24
    opts = dict(
        data=info["train"], valid=info["valid"], schema="kv", d=8, n_layers=1, n_heads=2,
        batch_size=8, epochs=1, checkpoint=str(root / "model.ckpt"),
    )
    best = pcpe.train(**opts)
    return root, info, opts, best


def test_metrics():
    assert pcpe.hit_rate_at_k([1, 3, 7, 2], 5) == 0.75
    assert math.isclose(pcpe.mrr([1, 2, 4]), 1.75 / 3)
    assert pcpe.token_f1(["a", "b"], ["b", "c"]) == 0.5
    assert abs(pcpe.bleu4("a b c d".split(), "a b c e".split()) - 0.59460355750136) < 1e-12
    with pytest.raises(pcpe.InputError):
        pcpe.mrr([])


def test_train_then_eval(run_dir):
    root, info, opts, best = run_dir
    assert 0.0 <= best["hr1"] <= best["hr5"] <= 1.0
    report = pcpe.evaluate(data=info["valid"], checkpoint=opts["checkpoint"])
    assert report == best
    assert report["n_examples"] == 6


def test_score_matches_candidates(run_dir):
    root, info, opts, _ = run_dir
    with open(info["valid"]) as f:
        dialogue = json.loads(f.readline())
    ranked = pcpe.score(dialogue, checkpoint=opts["checkpoint"])
    assert sorted(r["candidate_index"] for r in ranked) == list(range(len(dialogue["candidates"])))
    logits = [r["logit"] for r in ranked]
    assert logits == sorted(logits, reverse=True)


def test_cache_round_trip(run_dir):
    root, info, opts, best = run_dir
    cache = str(root / "emb.pcch")
    built = pcpe.build_cache(data=info["valid"], checkpoint=opts["checkpoint"], cache=cache)
    assert built["sentences"] > 0
    warm = pcpe.evaluate(data=info["valid"], checkpoint=opts["checkpoint"], cache=cache, strict=True)
    assert warm == best


def test_errors_map_to_exceptions(run_dir):
    root, info, opts, _ = run_dir
    with pytest.raises(pcpe.ConfigError):
        pcpe.evaluate(no_such_key=1)
    bad = root / "bad.jsonl"
    bad.write_text('{"id": "x", \n')
    with pytest.raises(pcpe.DataError):
        pcpe.evaluate(data=str(bad), checkpoint=opts["checkpoint"])
    with pytest.raises(pcpe.CacheError):
        pcpe.evaluate(data=info["valid"], checkpoint=opts["checkpoint"], cache=str(root / "none.pcch"))
