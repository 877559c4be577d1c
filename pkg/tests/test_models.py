import inspect

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbreprog import numeric as nm
from bbreprog.errors import CapabilityError, InvalidInputError
from bbreprog.harness.data import generate_task
from bbreprog.models import (Arch, Classifier, LocalModel, OutputMode, Robustness, ServiceApi,
                             TrainConfig, debug_logits, local_forward, quantize, service_predict,
                             train_classifier)

SMALL = (4, 4, 1)


def small_clf(seed=0, hidden=(6, 5), k=3):
    return Classifier.init(Arch(SMALL, hidden, k), nm.rng_from_seed(seed))


def test_source_task_is_learnable():
    src = generate_task("source", 20, 100, 24, 24, 1, seed=7, sigma=0.05,
                        phase_jitter=np.pi, aperture=(12, 24))
    _, acc = train_classifier(src.images, src.labels, Arch((24, 24, 1), (128, 128), 20),
                              TrainConfig(), seed=7)
    assert acc >= 0.95


def test_zero_epochs_is_chance_and_training_is_deterministic():
    src = generate_task("source", 4, 30, 4, 4, 1, seed=3, sigma=0.1)
    arch = Arch(SMALL, (8,), 4)
    _, acc = train_classifier(src.images, src.labels, arch, TrainConfig(epochs=0), seed=1)
    assert acc < 0.6
    a, _ = train_classifier(src.images, src.labels, arch, TrainConfig(epochs=3), seed=5)
    b, _ = train_classifier(src.images, src.labels, arch, TrainConfig(epochs=3), seed=5)
    assert a.params.checksum() == b.params.checksum()


def test_train_rejects_bad_labels():
    with pytest.raises(InvalidInputError):
        train_classifier(np.zeros((2, 16)), [0, 5], Arch(SMALL, (4,), 3), TrainConfig(), 0)


@pytest.mark.parametrize("hidden", [(6,), (6, 5), (5, 4, 3)])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_classifier_gradients_match_fd(hidden, seed):
    clf = small_clf(seed, hidden)
    rng = nm.rng_from_seed(100 + seed)
    for name in clf.params.names():
        clf.params[name] = clf.params[name] + rng.normal(0, 0.3, clf.params[name].shape)
    x = rng.uniform(size=(5, 16))
    y = rng.integers(0, 3, size=5)

    def loss(g):
        return g.softmax_cross_entropy(clf.logits_graph(g, g.const(x)), y)

    g = nm.DiffGraph()
    clf.params.zero_grad()
    nm.backward(g, loss(g))
    fd = nm.finite_difference_grad(lambda p: float(loss(nm.DiffGraph()).value), clf.params)
    for name in clf.params.names():
        assert nm.relative_error(clf.params.grad(name), fd[name]) < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_local_head_and_image_gradients_match_fd(seed):
    local = LocalModel(small_clf(seed), 4, nm.rng_from_seed(seed))
    rng = nm.rng_from_seed(200 + seed)
    imgs = nm.ParamSet()
    imgs.add("x", rng.uniform(size=(3, 16)))
    targets = rng.dirichlet(np.ones(4), size=3)

    def loss(g):
        return g.soft_cross_entropy(local.forward_graph(g, g.param("x", imgs)), targets)

    g = nm.DiffGraph()
    nm.backward(g, loss(g))
    fd_head = nm.finite_difference_grad(lambda p: float(loss(nm.DiffGraph()).value), local.head)
    fd_img = nm.finite_difference_grad(lambda p: float(loss(nm.DiffGraph()).value), imgs)
    for name in ("W", "b"):
        assert nm.relative_error(local.head.grad(name), fd_head[name]) < 1e-4
    assert nm.relative_error(imgs.grad("x"), fd_img["x"]) < 1e-4
    # the encoder is frozen: no gradient reaches it
    for name in local.encoder.params.names():
        assert not np.any(local.encoder.params.grad(name))


def test_local_model_zero_head_is_uniform():
    local = LocalModel(small_clf(), 5)
    z = local_forward(local, np.full((2, 16), 0.3))
    assert np.array_equal(z, np.zeros((2, 5)))
    assert np.allclose(nm.softmax(z), 0.2)
    with pytest.raises(InvalidInputError):
        local_forward(local, np.zeros((1, 9)))


def test_local_model_default_head_reuses_encoder_output_layer():
    clf = small_clf()
    local = LocalModel(clf)
    x = nm.rng_from_seed(0).uniform(size=(4, 16))
    assert np.allclose(local.logits(x), clf.logits(x))


def test_checkpoint_roundtrip(tmp_path):
    clf = small_clf(3)
    clf.save(tmp_path / "c.bbal")
    back = Classifier.load(tmp_path / "c.bbal")
    assert back.params.checksum() == clf.params.checksum()
    local = LocalModel(clf, 4, nm.rng_from_seed(1))
    local.save(tmp_path / "l.bbal")
    lb = LocalModel.load(tmp_path / "l.bbal")
    x = nm.rng_from_seed(2).uniform(size=(3, 16))
    assert np.array_equal(lb.logits(x), local.logits(x))
    with pytest.raises(InvalidInputError):
        Classifier.load(tmp_path / "l.bbal")


# -- service -----------------------------------------------------------------------

def test_full_mode_meter_and_simplex():
    api = ServiceApi(small_clf())
    x = nm.rng_from_seed(0).uniform(size=(160, 16))
    for img in x:
        r = service_predict(api, img, "train")
        assert abs(r.probs.sum() - 1.0) <= 1e-9
    assert api.meter.train == 160 and api.meter.infer == 0
    api.predict_batch(x[:7], "infer")
    assert api.meter.infer == 7
    assert api.cost == (160 + 7) * api.price_per_call


def test_service_rejects_bad_dims_and_phase():
    api = ServiceApi(small_clf())
    with pytest.raises(InvalidInputError):
        api.predict(np.zeros(15), "train")
    with pytest.raises(InvalidInputError):
        api.predict(np.zeros(16), "debug")


def test_topk_responses_are_sorted():
    clf = small_clf(k=6, hidden=(5,))
    x = nm.rng_from_seed(4).uniform(size=16)
    p = nm.softmax(clf.logits(x))[0]
    soft = ServiceApi(clf, output_mode=OutputMode("topk_soft", 3)).predict(x, "train")
    vals = [v for _, v in soft.pairs]
    assert vals == sorted(vals, reverse=True)
    assert [c for c, _ in soft.pairs] == list(np.argsort(-p, kind="stable")[:3])
    hard = ServiceApi(clf, output_mode=OutputMode("topk_hard", 2)).predict(x, "train")
    assert list(hard.ranked) == list(np.argsort(-p, kind="stable")[:2])
    assert hard.probs is None and hard.pairs is None


def test_debug_logits_match_probabilities_and_use_separate_counter():
    clf = small_clf()
    api = ServiceApi(clf, debug_logits_enabled=True)
    x = nm.rng_from_seed(5).uniform(size=16)
    z = debug_logits(api, x)
    p = api.predict(x, "train").probs
    assert np.max(np.abs(nm.softmax(z) - p)) <= 1e-12
    assert api.meter.debug == 1 and api.meter.train == 1 and api.meter.total == 1
    with pytest.raises(CapabilityError):
        debug_logits(ServiceApi(clf), x)


def test_quantize_levels_two_collapses_small_noise():
    api = ServiceApi(small_clf(), robustness=Robustness("quantize", 2))
    rng = nm.rng_from_seed(6)
    base = rng.choice([0.0, 1.0], size=16)
    a = api.predict(np.clip(base + rng.uniform(-0.2, 0.2, 16), 0, 1), "train").probs
    b = api.predict(np.clip(base + rng.uniform(-0.2, 0.2, 16), 0, 1), "train").probs
    assert np.array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 16), st.integers(0, 10_000), st.floats(0.0, 0.499))
def test_quantized_service_is_invariant_below_half_step(levels, seed, frac):
    api = ServiceApi(small_clf(), robustness=Robustness("quantize", levels))
    rng = nm.rng_from_seed(seed)
    step = 1.0 / (levels - 1)
    lattice = rng.integers(0, levels, size=16) * step
    pert = rng.uniform(-1, 1, size=16) * frac * step
    a = api.predict(lattice, "train").probs
    b = api.predict(lattice + pert, "train").probs
    assert np.array_equal(a, b)
    assert np.array_equal(quantize(lattice + pert, levels), quantize(lattice, levels))


def test_service_surface_is_closed():
    api = ServiceApi(small_clf())
    public = {n for n in dir(api) if not n.startswith("_")}
    assert public == {"input_dims", "n_classes", "price_per_call", "output_mode", "robustness",
                      "debug_logits_enabled", "meter", "predict", "predict_batch",
                      "debug_logits", "debug_logits_batch", "cost"}
    for name in public:
        value = getattr(api, name)
        assert not isinstance(value, (Classifier, nm.ParamSet))
    assert "classifier" not in inspect.signature(ServiceApi.predict).parameters
