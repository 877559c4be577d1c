import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bbreprog import numeric as nm
from bbreprog.errors import CapabilityError, ConfigError
from bbreprog.models import Arch, Classifier, LocalModel, ServiceApi
from bbreprog.priming import FaithfulnessReport, measure_epsilon
from bbreprog.reprogram import blm_fit, make_prompt
from bbreprog.theory import BoundReport, Risks, compute_risks, verify_bound, verify_lipschitz

IDENT = make_prompt("padding", (4, 4, 1), (4, 4, 1))


def clf(seed, k=5):
    return Classifier.init(Arch((4, 4, 1), (8,), k), nm.rng_from_seed(seed))


def sample(seed=0, n=60, k=5):
    rng = nm.rng_from_seed(seed)
    return rng.uniform(size=(n, 16)), rng.integers(0, k, n)


def test_lipschitz_closed_form_example():
    d = abs(nm.cross_entropy([1.0, 0.0], 0) - nm.cross_entropy([0.0, 0.0], 0))
    assert abs(d - 0.37989) < 1e-5 and d <= 1.0


def test_lipschitz_over_1e5_samples():
    worst = verify_lipschitz(100_000, rng=nm.rng_from_seed(0))
    assert 0.5 < worst <= 1.0 + 1e-9


def test_identical_models_have_equal_risks_and_zero_epsilon():
    c = clf(1)
    api = ServiceApi(c, debug_logits_enabled=True)
    x, y = sample()
    r = compute_risks(LocalModel(c), api, x, y, IDENT)
    assert r.r_local == r.r_service and r.epsilon < 1e-12
    rep = verify_bound(r, r)
    assert rep.left_holds_pre and rep.superiority_holds_pre
    assert rep.right_status_pre == "holds" and rep.bound_holds_post
    assert api.meter.total == 0 and api.meter.debug == len(x)


def test_uniform_model_risk_is_log_k():
    api = ServiceApi(clf(2), debug_logits_enabled=True)
    x, y = sample()
    r = compute_risks(LocalModel(clf(3), 5), api, x, y, IDENT)
    assert abs(r.r_local - math.log(5)) < 1e-12
    assert r.r_service >= 0


def test_risks_need_debug_logits_and_matching_labels():
    x, y = sample()
    with pytest.raises(CapabilityError):
        compute_risks(LocalModel(clf(0)), ServiceApi(clf(0)), x, y, IDENT)
    api = ServiceApi(clf(0), debug_logits_enabled=True)
    with pytest.raises(ConfigError):
        compute_risks(LocalModel(clf(0)), api, x, y[:-1], IDENT)


def test_left_bound_holds_for_unrelated_models_with_and_without_a_map():
    for seed in range(10):
        api = ServiceApi(clf(seed, 6), debug_logits_enabled=True)
        local = LocalModel(clf(seed + 100, 6))
        x, _ = sample(seed, k=3)
        y = nm.rng_from_seed(seed).integers(0, 3, len(x))
        m = blm_fit(nm.rng_from_seed(seed).dirichlet(np.ones(6), 20),
                    np.arange(20) % 3, 3)
        pre = compute_risks(local, api, x, y, IDENT, label_map=m)
        prompt = make_prompt("padding", (4, 4, 1), (4, 4, 1))
        post = compute_risks(local, api, x, y, prompt, prompt, m)
        faith = measure_epsilon(local, api, x, IDENT, (prompt, prompt), m)
        rep = verify_bound(pre, post, seed, faith)
        assert rep.left_holds_pre and rep.left_holds_post
        assert rep.R_L_pre - rep.epsilon_pre <= rep.R_S_pre + 1e-12


@settings(max_examples=200)
@given(st.integers(2, 12), st.integers(1, 40), st.integers(0, 2**31), st.floats(0.1, 20))
def test_sample_left_bound_is_exact(k, n, seed, scale):
    rng = nm.rng_from_seed(seed)
    zl, zs = rng.normal(0, scale, (n, k)), rng.normal(0, scale, (n, k))
    y = rng.integers(0, k, n)
    rl = np.mean([nm.cross_entropy(z, t) for z, t in zip(zl, y)])
    rs = np.mean([nm.cross_entropy(z, t) for z, t in zip(zs, y)])
    eps = np.mean(np.abs(zl - zs).sum(axis=1))
    assert rl - eps <= rs + 1e-12 and rs - eps <= rl + 1e-12


@settings(max_examples=200)
@given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 5), st.floats(0, 10),
       st.floats(0, 10), st.floats(0, 5))
def test_bound_flags_are_recomputable(a, b, e, c, d, f):
    rep = verify_bound(Risks(a, b, e, 10), Risks(c, d, f, 10), seed=3)
    for (rl, rs, eps), tag in (((a, b, e), "pre"), ((c, d, f), "post")):
        left = rl - eps <= rs + 1e-12
        sup = rs <= rl
        assert getattr(rep, f"left_holds_{tag}") == left
        assert getattr(rep, f"superiority_holds_{tag}") == sup
        # an unmet superiority assumption skips the right side instead of failing it
        assert getattr(rep, f"bound_holds_{tag}") == left
        assert getattr(rep, f"right_status_{tag}") == ("holds" if sup else "assumption-unmet")
    assert rep.epsilon == max(e, f)


def test_local_better_than_service_is_reported_not_failed():
    rep = verify_bound(Risks(0.5, 0.9, 0.6, 4), Risks(0.2, 0.8, 0.7, 4))
    assert not rep.superiority_holds_post
    assert rep.right_status_post == "assumption-unmet" and rep.left_holds_post


def test_mismatched_samples_are_rejected():
    with pytest.raises(ConfigError):
        verify_bound(Risks(1, 1, 0, 4), Risks(1, 1, 0, 5))
    with pytest.raises(ConfigError):
        verify_bound(Risks(1, 1, 0, 4), Risks(1, 1, 0, 4),
                     faithfulness=FaithfulnessReport(0.0, 0.0, 3))
    with pytest.raises(ConfigError):
        verify_bound(Risks(1, 1, 0.2, 4), Risks(1, 1, 0, 4),
                     faithfulness=FaithfulnessReport(0.3, 0.0, 4))


def test_report_json_has_all_fields(tmp_path):
    rep = verify_bound(Risks(1.0, 0.9, 0.2, 4), Risks(0.8, 0.7, 0.3, 4), seed=11)
    text = rep.to_json(tmp_path / "b.json")
    for name in ("R_L_pre", "R_S_pre", "R_L_post", "R_S_post", "epsilon_pre", "epsilon_post",
                 "superiority_holds_pre", "bound_holds_post", "n_samples", "seed"):
        assert f'"{name}"' in text
    assert (tmp_path / "b.json").read_text().strip() == text
    assert isinstance(rep, BoundReport) and rep.epsilon == 0.3
