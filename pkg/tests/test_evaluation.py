import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stacklab import tensor as T
from stacklab.config import ArchConfig
from stacklab.errors import InvalidArgumentError, StateError
from stacklab.evaluation import (EvalClassifier, caption_pool, diversity_metric, inception_score,
                                 inception_score_from_posteriors, nn_retrieval, train_eval_classifier)
from stacklab.gan_stage2 import Stage2Discriminator, discriminator_features
from stacklab.rng import make_rng
from stacklab.synth_data import generate_dataset

# for C not a power of two the float result can sit an ulp or two from C
ULP_REL = 1e-12


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(4, 8, seed=0)


# ---------------------------------------------------------- inception score

@pytest.mark.parametrize("c", [2, 3, 8, 10])
def test_uniform_posteriors_score_one(c):
    p = np.full((64, c), 1.0 / c)
    assert inception_score_from_posteriors(p).mean == 1.0


@pytest.mark.parametrize("c", [3, 5, 6, 10, 12])
def test_balanced_one_hot_scores_c(c):
    p = np.eye(c)[np.arange(8 * c) % c]
    assert inception_score_from_posteriors(p).mean == pytest.approx(c, rel=ULP_REL)


@pytest.mark.parametrize("c", [2, 4, 8, 16])
def test_balanced_one_hot_exact_for_powers_of_two(c):
    p = np.eye(c)[np.arange(8 * c) % c]
    assert inception_score_from_posteriors(p).mean == c


def test_collapse_scores_one():
    p = np.zeros((40, 5))
    p[:, 2] = 1.0
    r = inception_score_from_posteriors(p)
    assert r.mean == 1.0 and r.std == 0.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.integers(2, 10))
def test_random_posteriors_within_bounds(seed, c):
    p = np.random.default_rng(seed).dirichlet(np.ones(c), size=40)
    s = inception_score_from_posteriors(p).mean
    assert 1.0 - 1e-12 <= s <= c + 1e-9


def test_score_invariant_to_row_order_within_split():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(4), size=32)
    a = inception_score_from_posteriors(p, n_splits=1).mean
    b = inception_score_from_posteriors(p[::-1], n_splits=1).mean
    assert a == pytest.approx(b, rel=1e-14)


def test_score_split_statistics():
    rng = np.random.default_rng(1)
    p = rng.dirichlet(np.ones(4), size=40)
    r = inception_score_from_posteriors(p, n_splits=4)
    assert r.n_samples == 40 and r.n_splits == 4
    parts = [inception_score_from_posteriors(q, n_splits=1).mean for q in np.array_split(p, 4)]
    assert r.mean == pytest.approx(np.mean(parts), rel=1e-12)
    assert r.std == pytest.approx(np.std(parts), rel=1e-9)


def test_score_bad_inputs():
    with pytest.raises(InvalidArgumentError):
        inception_score_from_posteriors(np.zeros((0, 3)))
    with pytest.raises(InvalidArgumentError):
        inception_score_from_posteriors(np.full((3, 2), 0.5), n_splits=4)


# --------------------------------------------------------------- classifier

def test_classifier_shapes_and_probabilities():
    clf = EvalClassifier(5, 32, make_rng(0))
    x = make_rng(1).uniform(-1, 1, size=(6, 3, 16, 16))  # upsampled to 32
    p = clf.predict_proba(x)
    assert p.shape == (6, 5)
    assert np.allclose(p.sum(1), 1.0, atol=1e-12)
    assert clf.predict(x).shape == (6,)


def test_classifier_training_deterministic_and_accurate(ds):
    a = train_eval_classifier(ds, epochs=8, seed=0)
    b = train_eval_classifier(ds, epochs=8, seed=0)
    x = ds.images_hi[:6]
    assert np.array_equal(a.predict_proba(x), b.predict_proba(x))
    assert a.heldout_accuracy >= 0.9


def test_classifier_needs_two_classes():
    one = generate_dataset(2, 4, seed=0, train_fraction_of_classes=0.5)
    with pytest.raises(InvalidArgumentError):
        train_eval_classifier(one, epochs=1)


def test_inception_score_of_real_images():
    big = generate_dataset(4, 32, seed=0)
    clf = train_eval_classifier(big, seed=0)
    # splits must mix classes, so shuffle the class-sorted records
    idx = make_rng(0).permutation(big.indices("train"))
    r = inception_score(big.images_hi[idx], clf, n_splits=2)
    assert 2.5 < r.mean <= 3.0


def test_caption_pool_uses_training_classes(ds):
    specs = caption_pool(ds, 50, seed=0)
    assert {s.class_id for s in specs} <= set(ds.manifest.train_classes)
    assert [s.caption() for s in specs] == [s.caption() for s in caption_pool(ds, 50, seed=0)]


# ---------------------------------------------------------------- retrieval

@pytest.fixture(scope="module")
def d2():
    d = Stage2Discriminator(ArchConfig(), make_rng(0))
    d.eval()
    object.__setattr__(d, "trained", True)
    return d


def test_self_query_rank_one_distance_zero(ds, d2):
    from stacklab.conditioning import embed_batch

    phis = embed_batch(ds.specs, 32)
    res = nn_retrieval(ds.images_hi[[3, 7]], phis[[3, 7]], ds.images_hi, phis, d2, k=3)
    assert res[0].ranked[0] == (3, 0.0)
    assert res[1].ranked[0] == (7, 0.0)
    assert all(r.ranked[i][1] <= r.ranked[i + 1][1] for r in res for i in range(2))


def test_retrieval_matches_exhaustive_scan(ds, d2):
    from stacklab.conditioning import embed_batch

    phis = embed_batch(ds.specs, 32)
    q = make_rng(2).uniform(-1, 1, size=(2, 3, 32, 32)).astype(np.float32)
    res = nn_retrieval(q, phis[:2], ds.images_hi, phis, d2, k=len(ds))
    qf = discriminator_features(q, phis[:2], d2)
    for r, f in zip(res, qf):
        d = [math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in
                           zip(f, discriminator_features(ds.images_hi[j:j + 1], phis[j:j + 1], d2)[0])))
             for j in range(len(ds))]
        expected = sorted(range(len(ds)), key=lambda j: (d[j], j))
        assert [j for j, _ in r.ranked] == expected
        assert np.allclose([x for _, x in r.ranked], sorted(d), rtol=1e-9)


def test_retrieval_ties_break_by_index(ds, d2):
    from stacklab.conditioning import embed_batch

    phis = embed_batch(ds.specs[:1], 32)
    train = np.repeat(ds.images_hi[:1], 4, axis=0)
    res = nn_retrieval(ds.images_hi[:1], phis, train, np.repeat(phis, 4, axis=0), d2, k=4)
    assert [j for j, _ in res[0].ranked] == [0, 1, 2, 3]


def test_retrieval_errors(ds, d2):
    x, phi = ds.images_hi[:2], np.zeros((2, 32), np.float32)
    with pytest.raises(InvalidArgumentError):
        nn_retrieval(x, phi, x, phi, d2, k=3)
    with pytest.raises(InvalidArgumentError):
        nn_retrieval(x, phi, x, phi, d2, k=0)
    with pytest.raises(StateError):
        nn_retrieval(x, phi, x, phi, None, k=1)
    fresh = Stage2Discriminator(ArchConfig(), make_rng(0))
    with pytest.raises(StateError):
        nn_retrieval(x, phi, x, phi, fresh, k=1)


# ---------------------------------------------------------------- diversity

def test_diversity_examples():
    same = np.ones((4, 3, 2, 2))
    assert diversity_metric([same, same]) == 0.0
    pair = np.stack([np.zeros((3, 2, 2)), np.full((3, 2, 2), 2.0)])
    assert diversity_metric([pair]) == 1.0
    assert diversity_metric([pair, same]) == 0.5


def test_diversity_errors():
    with pytest.raises(InvalidArgumentError):
        diversity_metric([])
    with pytest.raises(InvalidArgumentError):
        diversity_metric([np.zeros((1, 3, 2, 2))])


def test_no_grad_inference_leaves_no_graph():
    clf = EvalClassifier(3, 16, make_rng(0))
    clf.eval()
    with T.no_grad():
        out = clf(T.Tensor(np.zeros((1, 3, 16, 16), np.float32)))
    assert out.node is None
