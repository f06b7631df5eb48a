import numpy as np
import pytest

from probwarp.experiment import Corpus, evaluate, make_batch, train
from probwarp.model import OBJECTIVES, Encoder, TrainConfig
from probwarp.synthdata import dataset
from probwarp.warp import WarpConfig


@pytest.fixture(scope="module")
def pairs():
    return list(dataset(4, 14, 14))


def test_batches_are_deterministic_and_mixed(pairs):
    corpus = Corpus.from_pairs(pairs)
    cfg = TrainConfig(batch_size=3)
    a = make_batch(corpus, 5, cfg, WarpConfig())
    b = make_batch(corpus, 5, cfg, WarpConfig())
    assert len(a) == 3 and all(x.negative is not None for x in a)
    for x, y in zip(a, b):
        assert np.array_equal(x.triplet.image_i_prime, y.triplet.image_i_prime)
    strong = make_batch(corpus, 5, TrainConfig(batch_size=3, objective="strong"), WarpConfig())
    assert all(x.negative is None for x in strong)


@pytest.mark.parametrize("objective", OBJECTIVES)
def test_every_objective_trains(pairs, objective):
    cfg = TrainConfig(objective=objective, steps=2, batch_size=2, feature_dim=8)
    enc, opt, rows = train(cfg, WarpConfig(), Corpus.from_pairs(pairs))
    assert len(rows) == 2 and opt.t == 2
    assert all(np.isfinite(float(r[-1])) for r in rows)


def test_evaluate_summary(pairs):
    res = evaluate(Encoder(d=8, occlusion=True), pairs, "test")
    s = res["summary"]
    for alpha in (0.05, 0.10, 0.15):
        for ref in ("image", "bbox"):
            assert 0 <= s[("dense_pck", alpha, ref)] <= 1
    assert s[("dense_pck", 0.05, "image")] <= s[("dense_pck", 0.15, "image")]
    assert s[("ause", 0.1, "image")] == pytest.approx(s[("ause_mean_per_pair", 0.1, "image")], abs=1e-12)
    assert 0 <= s[("neg_unmatched_prob", None, "")] <= 1
