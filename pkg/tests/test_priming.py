import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbreprog import numeric as nm
from bbreprog.errors import CapabilityError, ConfigError, InvalidInputError
from bbreprog.harness.data import generate_task
from bbreprog.models import (Arch, Classifier, LocalModel, OutputMode, ServiceApi, TrainConfig,
                             train_classifier)
from bbreprog.priming import (PrimingConfig, SoftLabelSet, collect_soft_labels, expand_topk_hard,
                              expand_topk_soft, linear_probe, measure_epsilon, prime)
from bbreprog.reprogram import make_prompt


@pytest.fixture(scope="module")
def source_pair():
    """Service and a weaker local encoder trained on the 20-class source task (seed 7)."""
    src = generate_task("source", 20, 100, 24, 24, 1, seed=7, sigma=0.05,
                        phase_jitter=np.pi, aperture=(12, 24))
    svc, _ = train_classifier(src.images, src.labels, Arch((24, 24, 1), (128, 128), 20),
                              TrainConfig(), seed=7)
    enc_src = generate_task("source", 20, 20, 24, 24, 1, seed=84, sigma=0.05,
                            phase_jitter=np.pi, aperture=(12, 24))
    enc, _ = train_classifier(enc_src.images, enc_src.labels, Arch((24, 24, 1), (64,), 20),
                              TrainConfig(), seed=1007)
    return src, svc, enc


def soft_ce(local, x, probs):
    z = local.logits(x)
    logq = z - z.max(axis=1, keepdims=True)
    logq = logq - np.log(np.exp(logq).sum(axis=1, keepdims=True))
    return float(-(probs * logq).sum(axis=1).mean())


# -- expansion -------------------------------------------------------------------

def test_soft_expansion_examples():
    out = expand_topk_soft([(3, 0.7)], 10)
    assert out[3] == 0.7
    assert np.allclose(np.delete(out, 3), 0.3 / 9, atol=1e-12)
    p = nm.rng_from_seed(0).dirichlet(np.ones(6))
    assert np.array_equal(expand_topk_soft(list(enumerate(p)), 6), p)
    two = expand_topk_soft([(1, 0.25), (4, 0.75)], 7)
    assert np.count_nonzero(two) == 2


def test_hard_expansion_examples():
    out = expand_topk_hard([5], 10)
    assert out[5] == 0.5
    assert np.allclose(np.delete(out, 5), 1 / 18, atol=1e-15)
    out = expand_topk_hard([2, 7], 10)
    assert abs(out[2] - 4 / 9) < 1e-15 and abs(out[7] - 2 / 9) < 1e-15
    assert np.allclose(np.delete(out, [2, 7]), 1 / 24, atol=1e-15)


def test_expansion_errors():
    with pytest.raises(InvalidInputError):
        expand_topk_hard(list(range(4)), 4)
    with pytest.raises(InvalidInputError):
        expand_topk_hard([1, 1], 4)
    with pytest.raises(InvalidInputError):
        expand_topk_soft([(0, 0.8), (1, 0.8)], 4)
    with pytest.raises(InvalidInputError):
        expand_topk_soft([], 4)


def test_expanders_are_simplex_for_every_k_up_to_64():
    rng = nm.rng_from_seed(1)
    for K in range(2, 65):
        p = rng.dirichlet(np.ones(K))
        order = np.argsort(-p, kind="stable")
        for k in range(1, K + 1):
            soft = expand_topk_soft([(int(c), p[c]) for c in order[:k]], K)
            assert np.all(soft >= 0) and abs(soft.sum() - 1) <= 1e-12
            if k < K:
                hard = expand_topk_hard(order[:k], K)
                assert np.all(hard > 0) and abs(hard.sum() - 1) <= 1e-12


@settings(max_examples=100)
@given(st.integers(2, 64).flatmap(lambda K: st.tuples(st.just(K), st.integers(1, K - 1))),
       st.integers(0, 2**31))
def test_hard_expansion_matches_closed_form(Kk, seed):
    K, k = Kk
    ranked = nm.rng_from_seed(seed).permutation(K)[:k]
    out = expand_topk_hard(ranked, K)
    harmonic = sum(1.0 / r for r in range(1, k + 1))
    for r, c in enumerate(ranked, start=1):
        assert abs(out[c] - (k / (k + 1)) / (r * harmonic)) <= 1e-15
    rest = np.setdiff1d(np.arange(K), ranked)
    assert np.allclose(out[rest], 1 / ((k + 1) * (K - k)), atol=1e-15, rtol=0)


# -- collection -------------------------------------------------------------------

def tiny_service(k=6, mode=None, seed=0):
    clf = Classifier.init(Arch((4, 4, 1), (5,), k), nm.rng_from_seed(seed))
    return ServiceApi(clf, output_mode=mode or OutputMode("full"))


def test_collect_makes_one_call_per_image():
    api = tiny_service()
    x = nm.rng_from_seed(2).uniform(size=(160, 16))
    soft = collect_soft_labels(api, x)
    assert api.meter.train == 160 and api.meter.infer == 0
    assert soft.provenance == ["full"] * 160
    assert np.allclose(soft.probs.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(InvalidInputError):
        collect_soft_labels(api, np.zeros((0, 16)))


def test_collect_records_expansion_provenance():
    api = tiny_service(mode=OutputMode("topk_hard", 2))
    soft = collect_soft_labels(api, nm.rng_from_seed(3).uniform(size=(4, 16)))
    assert soft.provenance == ["expanded-topk-hard(2)"] * 4


def test_cached_soft_labels_are_not_requeried(tmp_path):
    path = tmp_path / "soft.jsonl"
    x = nm.rng_from_seed(4).uniform(size=(12, 16))
    first = collect_soft_labels(tiny_service(), x, path)
    api = tiny_service()
    again = collect_soft_labels(api, x, path)
    assert api.meter.total == 0
    assert np.array_equal(first.probs, again.probs)
    rec = path.read_text().splitlines()[0]
    assert '"index": 0' in rec and '"provenance": "full"' in rec


# -- priming -----------------------------------------------------------------------

def test_priming_halves_the_loss_on_the_source_task(source_pair):
    src, svc, enc = source_pair
    soft = collect_soft_labels(ServiceApi(svc), src.images)
    local = LocalModel(enc, 20)
    frozen = local.encoder_checksum()
    initial = soft_ce(local, src.images, soft.probs)
    res = prime(local, src.images, soft, PrimingConfig(seed=7, epochs=100))
    final = soft_ce(local, src.images, soft.probs)
    assert final <= 0.5 * initial
    assert res.loss_curve[-1] < res.loss_curve[0]
    assert res.encoder_checksum == frozen == local.encoder_checksum()


def test_priming_works_with_disjoint_downstream_labels(source_pair):
    _, svc, enc = source_pair
    tgt = generate_task("target", 5, 16, 16, 16, 1, seed=3, angle=20.0, sigma=0.05)
    x = make_prompt("padding", (16, 16, 1), (24, 24, 1)).apply(tgt.images)
    soft = collect_soft_labels(ServiceApi(svc), x)
    local = LocalModel(enc, 20)
    before = soft_ce(local, x, soft.probs)
    prime(local, x, soft, PrimingConfig(seed=0, epochs=50, lr=1e-2))
    assert soft_ce(local, x, soft.probs) < before


def test_self_labels_are_a_fixed_point():
    enc = Classifier.init(Arch((4, 4, 1), (6,), 4), nm.rng_from_seed(5))
    local = LocalModel(enc, 4, nm.rng_from_seed(6))
    x = nm.rng_from_seed(7).uniform(size=(64, 16))
    soft = SoftLabelSet(nm.softmax(local.logits(x)), ["full"] * 64)
    w0 = local.head.copy()
    res = prime(local, x, soft, PrimingConfig(epochs=1, lr=1e-3))
    for name in ("W", "b"):
        assert np.max(np.abs(local.head[name] - w0[name])) < 1e-6
    # Adam rescales round-off gradients to lr-sized steps, so later epochs wander a little,
    # but the loss stays at its minimum
    more = prime(local, x, soft, PrimingConfig(epochs=5, lr=1e-3))
    assert max(more.loss_curve) - res.loss_curve[0] < 1e-5


def test_clone_service_has_zero_epsilon_and_priming_recovers_it():
    clf = Classifier.init(Arch((4, 4, 1), (8,), 5), nm.rng_from_seed(8))
    api = ServiceApi(clf, debug_logits_enabled=True)
    x = nm.rng_from_seed(9).uniform(size=(200, 16))
    ident = make_prompt("padding", (4, 4, 1), (4, 4, 1))
    clone = measure_epsilon(LocalModel(clf), api, x, ident)
    assert clone.epsilon_pre < 1e-9 and clone.epsilon_post is None
    local = LocalModel(clf, 5, nm.rng_from_seed(10))
    before = measure_epsilon(local, api, x, ident).epsilon_pre
    soft = collect_soft_labels(api, x)
    prime(local, x, soft, PrimingConfig(epochs=300, lr=1e-2))
    after = measure_epsilon(local, api, x, ident).epsilon_pre
    assert after < 0.01 * before
    assert api.meter.train == 200 and api.meter.debug > 0


def test_priming_reduces_epsilon_on_the_benchmark(source_pair):
    _, svc, enc = source_pair
    api = ServiceApi(svc, debug_logits_enabled=True)
    tgt = generate_task("target", 5, 40, 16, 16, 1, seed=7, angle=20.0, sigma=0.05,
                        phase_jitter=np.pi, brightness=0.2)
    base = make_prompt("padding", (16, 16, 1), (24, 24, 1))
    x = tgt.images[:80]
    local = LocalModel(enc)
    pre = measure_epsilon(local, api, tgt.images, base)
    prime(local, base.apply(x), collect_soft_labels(api, base.apply(x)),
          PrimingConfig(seed=7, lr=1e-2, epochs=300))
    post = measure_epsilon(local, api, tgt.images, base)
    assert 0 <= post.epsilon_pre < pre.epsilon_pre


def test_prime_argument_checks():
    enc = Classifier.init(Arch((4, 4, 1), (6,), 4), nm.rng_from_seed(0))
    local = LocalModel(enc, 4)
    soft = SoftLabelSet(np.full((3, 4), 0.25), ["full"] * 3)
    with pytest.raises(ConfigError):
        prime(local, np.zeros((2, 16)), soft, PrimingConfig())
    with pytest.raises(ConfigError):
        prime(LocalModel(enc, 3), np.zeros((3, 16)), soft, PrimingConfig())
    with pytest.raises(CapabilityError):
        prime(local, np.zeros((3, 16)), soft, PrimingConfig(loss="l1_logit"))
    with pytest.raises(ConfigError):
        PrimingConfig(loss="hinge")
    with pytest.raises(CapabilityError):
        measure_epsilon(local, ServiceApi(enc), np.zeros((3, 16)),
                        make_prompt("padding", (4, 4, 1), (4, 4, 1)))


# -- linear probe ---------------------------------------------------------------------

def test_linear_probe_fits_one_shot_per_class_and_is_deterministic():
    enc = Classifier.init(Arch((4, 4, 1), (12,), 6), nm.rng_from_seed(11))
    x = nm.rng_from_seed(12).uniform(size=(4, 16))
    y = np.arange(4)
    heads = []
    for _ in range(2):
        local = LocalModel(enc)
        frozen = local.encoder_checksum()
        linear_probe(local, x, y, 4, PrimingConfig(seed=3, lr=5e-2, epochs=200))
        assert np.array_equal(np.argmax(local.logits(x), axis=1), y)
        assert local.encoder_checksum() == frozen
        heads.append(local.head.checksum())
    assert heads[0] == heads[1]


def test_linear_probe_beats_chance_on_the_benchmark(source_pair):
    _, _, enc = source_pair
    tgt = generate_task("target", 5, 216, 16, 16, 1, seed=1, angle=20.0, sigma=0.05,
                        phase_jitter=np.pi, brightness=0.2)
    base = make_prompt("padding", (16, 16, 1), (24, 24, 1))
    x = base.apply(tgt.images)
    rng = nm.rng_from_seed(0)
    train = np.concatenate([rng.choice(np.flatnonzero(tgt.labels == c), 16, replace=False)
                            for c in range(5)])
    test = np.setdiff1d(np.arange(len(tgt)), train)
    local = LocalModel(enc)
    linear_probe(local, x[train], tgt.labels[train], 5, PrimingConfig(lr=1e-2, epochs=300))
    acc = np.mean(np.argmax(local.logits(x[test]), axis=1) == tgt.labels[test])
    assert acc > 0.2 + 0.05
    with pytest.raises(ConfigError):
        linear_probe(local, x[:2], [0, 9], 5, PrimingConfig())
