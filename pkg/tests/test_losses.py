import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from bidistereo.losses import (
    Ablation,
    BranchOutput,
    LossWeights,
    acs_loss,
    acs_terms,
    aps_loss,
    aps_terms,
    conf_loss,
    cross_entropy,
    dist_loss,
    entropy,
    full_loss,
    rho,
    self_loss,
    smooth_l1,
    unimodal_generate,
    value_loss,
)

T = torch.float64


# -- scalar oracles ----------------------------------------------------------


def o_sl1(x):
    return 0.5 * x * x if abs(x) < 1 else abs(x) - 0.5


def o_ug(d, k, s, adaptive=True):
    r = 1.0 / (2.0 - k) if adaptive else 1.0
    w = [math.exp(-abs(i - d) * r) for i in range(s)]
    z = sum(w)
    return [v / z for v in w]


def o_ce(t, p):
    return -sum(ti * math.log(max(pi, 1e-12)) for ti, pi in zip(t, p))


def o_bce(k, g):
    return -(g * math.log(max(k, 1e-12)) + (1 - g) * math.log(max(1 - k, 1e-12)))


def pixels(mask):
    return list(zip(*np.nonzero(mask)))


def o_aps(da, ka, db, kb, mask):
    px = pixels(mask)
    return sum(ka[i] * o_sl1(db[i] - da[i]) + kb[i] * o_sl1(da[i] - db[i]) for i in px) / len(px)


def o_acs(pa, da, ka, pb, db, kb, mask):
    px = pixels(mask)
    s = pa.shape[1]
    tot = 0.0
    for b, y, x in px:
        tot += o_ce(o_ug(da[b, y, x], kb[b, y, x], s), pb[b, :, y, x])
        tot += o_ce(o_ug(db[b, y, x], ka[b, y, x], s), pa[b, :, y, x])
    return tot / len(px)


def o_conf(ka, ga, kb, gb, mask):
    px = pixels(mask)
    return sum(o_bce(ka[i], ga[i]) + o_bce(kb[i], gb[i]) for i in px) / len(px)


def o_value(da, db, gt, mask):
    px = pixels(mask)
    peak = max(gt[i] for i in px)
    return sum(gt[i] / peak * (o_sl1(da[i] - gt[i]) + o_sl1(db[i] - gt[i])) for i in px) / len(px)


def o_dist(pa, ka, pb, kb, gt, mask):
    px = pixels(mask)
    s = pa.shape[1]
    tot = 0.0
    for b, y, x in px:
        tot += o_ce(o_ug(gt[b, y, x], ka[b, y, x], s), pa[b, :, y, x])
        tot += o_ce(o_ug(gt[b, y, x], kb[b, y, x], s), pb[b, :, y, x])
    return tot / len(px)


def random_instance(seed, b=1, s=8, h=4, w=4, mask_frac=0.7):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(2, b, s, h, w)) * 2
    probs = np.exp(logits) / np.exp(logits).sum(axis=2, keepdims=True)
    return dict(
        pa=probs[0], pb=probs[1],
        da=rng.uniform(0, s - 1, (b, h, w)), db=rng.uniform(0, s - 1, (b, h, w)),
        ka=rng.uniform(0.01, 0.99, (b, h, w)), kb=rng.uniform(0.01, 0.99, (b, h, w)),
        gt=rng.uniform(0, s - 1, (b, h, w)),
        ga=(rng.random((b, h, w)) < 0.5).astype(float), gb=(rng.random((b, h, w)) < 0.5).astype(float),
        mask=rng.random((b, h, w)) < mask_frac,
    )


def tt(inst):
    return {k: torch.tensor(v, dtype=torch.bool if k == "mask" else T) for k, v in inst.items()}


# -- elementwise pieces ------------------------------------------------------


@pytest.mark.parametrize("x,y", [(0.0, 0.0), (1.0, 0.5), (-2.5, 2.0), (0.5, 0.125)])
def test_smooth_l1(x, y):
    assert smooth_l1(torch.tensor(x, dtype=T)).item() == pytest.approx(y)


@pytest.mark.parametrize("k,r", [(1.0, 1.0), (0.0, 0.5), (0.5, 1 / 1.5)])
def test_rho(k, r):
    assert rho(torch.tensor(k, dtype=T)).item() == pytest.approx(r)


def test_ug_closed_form():
    p = unimodal_generate(torch.tensor([[[2.0]]], dtype=T), torch.tensor([[[1.0]]], dtype=T), 5).flatten()
    w = np.exp(-np.abs(np.arange(5) - 2.0))
    np.testing.assert_allclose(p.numpy(), w / w.sum(), atol=1e-12)
    assert p[2].item() == pytest.approx(0.4984, abs=1e-4)


def test_ug_midpoint_plateau():
    p = unimodal_generate(torch.tensor([[[2.5]]], dtype=T), torch.tensor([[[0.7]]], dtype=T), 6).flatten()
    assert p[2].item() == p[3].item()


def test_ug_entropy_grows_as_confidence_falls():
    d = torch.tensor([[[2.0]]], dtype=T)
    lo = entropy(unimodal_generate(d, torch.tensor([[[0.2]]], dtype=T), 5)).item()
    hi = entropy(unimodal_generate(d, torch.tensor([[[0.9]]], dtype=T), 5)).item()
    assert lo > hi


def test_ug_rejects_out_of_range():
    k = torch.full((1, 1, 1), 0.5)
    with pytest.raises(ValueError):
        unimodal_generate(torch.full((1, 1, 1), 8.0), k, 8)
    with pytest.raises(ValueError):
        unimodal_generate(torch.full((1, 1, 1), -0.5), k, 8)
    with pytest.raises(ValueError):
        unimodal_generate(torch.full((1, 1, 1), float("nan")), k, 8)


@settings(max_examples=100, deadline=None)
@given(d=st.floats(0, 15), k=st.floats(0.001, 0.999), s=st.just(16))
def test_ug_properties(d, k, s):
    p = unimodal_generate(torch.tensor([[[d]]], dtype=T), torch.tensor([[[k]]], dtype=T), s).flatten().numpy()
    assert abs(p.sum() - 1) < 1e-6
    dist = np.abs(np.arange(s) - d)
    order = np.argsort(dist, kind="stable")
    assert np.all(np.diff(p[order]) <= 1e-15)
    assert dist[np.argmax(p)] == dist.min()


# -- APS ---------------------------------------------------------------------


def test_aps_examples():
    mask = torch.ones(1, 3, 3, dtype=torch.bool)
    d = torch.rand(1, 3, 3, dtype=T) * 5
    k = torch.rand(1, 3, 3, dtype=T)
    assert aps_loss(d, k, d.clone(), k, mask).item() == 0
    z = torch.zeros_like(k)
    assert aps_loss(d, z, d + 1.7, z, mask).item() == 0
    one = torch.ones_like(k)
    assert aps_loss(d + 2, one, d, one, mask).item() == pytest.approx(3.0)


@pytest.mark.parametrize("seed", range(3))
def test_aps_oracle(seed):
    i = random_instance(seed, b=2)
    t = tt(i)
    got = aps_loss(t["da"], t["ka"], t["db"], t["kb"], t["mask"]).item()
    assert abs(got - o_aps(i["da"], i["ka"], i["db"], i["kb"], i["mask"])) < 1e-9


def test_aps_empty_mask_warns():
    d = torch.rand(1, 2, 2, dtype=T)
    with pytest.warns(RuntimeWarning):
        assert aps_loss(d, d, d + 1, d, torch.zeros(1, 2, 2, dtype=torch.bool)).item() == 0


# -- ACS ---------------------------------------------------------------------


def test_acs_lower_bound_is_attained_at_targets():
    i = tt(random_instance(1))
    ta = unimodal_generate(i["db"], i["ka"], 8)
    tb = unimodal_generate(i["da"], i["kb"], 8)
    mask = torch.ones_like(i["mask"])
    got = acs_loss(ta, i["da"], i["ka"], tb, i["db"], i["kb"], mask).item()
    assert got == pytest.approx((entropy(ta) + entropy(tb)).mean().item(), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_acs_gibbs(seed):
    i = tt(random_instance(seed))
    m = i["mask"]
    got = acs_loss(i["pa"], i["da"], i["ka"], i["pb"], i["db"], i["kb"], m)
    h = entropy(unimodal_generate(i["db"], i["ka"], 8)) + entropy(unimodal_generate(i["da"], i["kb"], 8))
    assert got.item() >= h[m].mean().item()


def test_acs_single_pixel_oracle():
    pa = np.array([0.1, 0.2, 0.3, 0.4]).reshape(1, 4, 1, 1)
    pb = np.array([0.4, 0.3, 0.2, 0.1]).reshape(1, 4, 1, 1)
    da, db = np.array([[[1.3]]]), np.array([[[2.6]]])
    ka, kb = np.array([[[0.8]]]), np.array([[[0.3]]])
    mask = np.ones((1, 1, 1), bool)
    t = lambda a: torch.tensor(a, dtype=T)  # noqa: E731
    got = acs_loss(t(pa), t(da), t(ka), t(pb), t(db), t(kb), torch.tensor(mask)).item()
    assert abs(got - o_acs(pa, da, ka, pb, db, kb, mask)) < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_acs_oracle(seed):
    i = random_instance(seed, b=2)
    t = tt(i)
    got = acs_loss(t["pa"], t["da"], t["ka"], t["pb"], t["db"], t["kb"], t["mask"]).item()
    assert abs(got - o_acs(i["pa"], i["da"], i["ka"], i["pb"], i["db"], i["kb"], i["mask"])) < 1e-9


def test_acs_rejects_unnormalized():
    i = tt(random_instance(0))
    with pytest.raises(ValueError):
        acs_loss(i["pa"] * 1.5, i["da"], i["ka"], i["pb"], i["db"], i["kb"], i["mask"])


def test_acs_teacher_rho_flag():
    i = tt(random_instance(2))
    student = acs_loss(i["pa"], i["da"], i["ka"], i["pb"], i["db"], i["kb"], i["mask"])
    teacher = acs_loss(i["pa"], i["da"], i["ka"], i["pb"], i["db"], i["kb"], i["mask"], rho_from="teacher")
    swapped = acs_loss(i["pa"], i["da"], i["kb"], i["pb"], i["db"], i["ka"], i["mask"])
    assert teacher.item() == pytest.approx(swapped.item(), abs=1e-12)
    assert teacher.item() != pytest.approx(student.item(), abs=1e-6)


# -- self loss ---------------------------------------------------------------


def outputs(t):
    return (BranchOutput(t["pa"], t["da"], t["ka"]), BranchOutput(t["pb"], t["db"], t["kb"]))


def test_self_loss_additive_and_oracle():
    i = random_instance(4, h=2, w=2, mask_frac=1.0)
    t = tt(i)
    a, b = outputs(t)
    br = self_loss(a, b, t["mask"])
    assert br.self_total.item() == pytest.approx(br.aps.item() + br.acs.item(), abs=1e-12)
    oracle = o_aps(i["da"], i["ka"], i["db"], i["kb"], i["mask"]) + o_acs(
        i["pa"], i["da"], i["ka"], i["pb"], i["db"], i["kb"], i["mask"])
    assert abs(br.self_total.item() - oracle) < 1e-9
    assert br.masked_pixel_count == 4


def test_self_loss_zero_when_terms_off():
    t = tt(random_instance(0))
    a, b = outputs(t)
    br = self_loss(a, b, t["mask"], Ablation(aps_on=False, acs_on=False))
    assert br.self_total.item() == 0


def test_unidirectional_keeps_a_to_b_only():
    t = tt(random_instance(3))
    a, b = outputs(t)
    br = self_loss(a, b, t["mask"], Ablation(bidirectional=False))
    aps_ab, _ = aps_terms(t["da"], t["ka"], t["db"], t["kb"], t["mask"])
    acs_ab, _ = acs_terms(t["pa"], t["da"], t["ka"], t["pb"], t["db"], t["kb"], t["mask"])
    assert br.aps.item() == pytest.approx(aps_ab.item())
    assert br.acs.item() == pytest.approx(acs_ab.item())


def test_sps_scs_variants_match_oracle():
    i = random_instance(5)
    t = tt(i)
    a, b = outputs(t)
    br = self_loss(a, b, t["mask"], Ablation(adaptive_aps=False, adaptive_acs=False))
    ones = np.ones_like(i["ka"])
    assert abs(br.aps.item() - o_aps(i["da"], ones, i["db"], ones, i["mask"])) < 1e-9
    # rho = 1 is the same as confidence 1
    assert abs(br.acs.item() - o_acs(i["pa"], i["da"], ones, i["pb"], i["db"], ones, i["mask"])) < 1e-9


# -- labeled losses ----------------------------------------------------------


def test_conf_loss_examples():
    mask = torch.ones(1, 2, 2, dtype=torch.bool)
    half = torch.full((1, 2, 2), 0.5, dtype=T)
    g = torch.tensor([[[0.0, 1.0], [1.0, 0.0]]], dtype=T)
    assert conf_loss(half, g, half, 1 - g, mask).item() == pytest.approx(2 * math.log(2))
    assert conf_loss(g, g, 1 - g, 1 - g, mask).item() < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_conf_loss_oracle(seed):
    i = random_instance(seed)
    t = tt(i)
    got = conf_loss(t["ka"], t["ga"], t["kb"], t["gb"], t["mask"]).item()
    assert abs(got - o_conf(i["ka"], i["ga"], i["kb"], i["gb"], i["mask"])) < 1e-9


def test_value_loss_examples():
    m = torch.ones(1, 1, 1, dtype=torch.bool)
    gt = torch.full((1, 1, 1), 4.0, dtype=T)
    assert value_loss(gt, gt, gt, m).item() == 0
    assert value_loss(gt + 1, gt - 1, gt, m).item() == pytest.approx(1.0)


def test_value_loss_zero_gt_guard():
    m = torch.ones(1, 2, 2, dtype=torch.bool)
    z = torch.zeros(1, 2, 2, dtype=T)
    assert value_loss(z + 2, z, z, m).item() == pytest.approx(1.5)


@pytest.mark.parametrize("seed", range(3))
def test_value_loss_oracle(seed):
    i = random_instance(seed)
    t = tt(i)
    got = value_loss(t["da"], t["db"], t["gt"], t["mask"]).item()
    assert abs(got - o_value(i["da"], i["db"], i["gt"], i["mask"])) < 1e-9


def test_dist_loss_symmetry_and_bound():
    t = tt(random_instance(6))
    m = t["mask"]
    both = dist_loss(t["pa"], t["ka"], t["pa"], t["ka"], t["gt"], m)
    single = cross_entropy(unimodal_generate(t["gt"], t["ka"], 8), t["pa"])[m].mean()
    assert both.item() == pytest.approx(2 * single.item(), abs=1e-12)
    one = dist_loss(t["pa"], t["ka"], t["pb"], t["kb"], t["gt"], m)
    h = entropy(unimodal_generate(t["gt"], t["ka"], 8)) + entropy(unimodal_generate(t["gt"], t["kb"], 8))
    assert one.item() >= h[m].mean().item()


def test_dist_loss_single_pixel_oracle():
    pa = np.array([0.1, 0.6, 0.2, 0.1]).reshape(1, 4, 1, 1)
    pb = np.array([0.25, 0.25, 0.25, 0.25]).reshape(1, 4, 1, 1)
    ka, kb, gt = np.array([[[0.9]]]), np.array([[[0.1]]]), np.array([[[1.4]]])
    mask = np.ones((1, 1, 1), bool)
    t = lambda a: torch.tensor(a, dtype=T)  # noqa: E731
    got = dist_loss(t(pa), t(ka), t(pb), t(kb), t(gt), torch.tensor(mask)).item()
    assert abs(got - o_dist(pa, ka, pb, kb, gt, mask)) < 1e-9


@pytest.mark.parametrize("seed", range(3))
def test_dist_loss_oracle(seed):
    i = random_instance(seed, b=2)
    t = tt(i)
    got = dist_loss(t["pa"], t["ka"], t["pb"], t["kb"], t["gt"], t["mask"]).item()
    assert abs(got - o_dist(i["pa"], i["ka"], i["pb"], i["kb"], i["gt"], i["mask"])) < 1e-9


def test_full_loss_composition():
    i = random_instance(7)
    t = tt(i)
    a, b = outputs(t)
    br = full_loss(a, b, t["gt"], t["mask"])
    ga = (np.abs(i["da"] - i["gt"]) < 3).astype(float)
    gb = (np.abs(i["db"] - i["gt"]) < 3).astype(float)
    oracle = (8 * o_conf(i["ka"], ga, i["kb"], gb, i["mask"]) + o_value(i["da"], i["db"], i["gt"], i["mask"])
              + o_dist(i["pa"], i["ka"], i["pb"], i["kb"], i["gt"], i["mask"]))
    assert abs(br.full_total.item() - oracle) < 1e-9
    zero = full_loss(a, b, t["gt"], t["mask"], LossWeights(lambda_conf=0.0))
    assert zero.full_total.item() == pytest.approx(br.value.item() + br.dist.item(), abs=1e-12)
    three = full_loss(a, b, t["gt"], t["mask"], LossWeights(lambda_conf=3.0))
    assert three.full_total.item() == pytest.approx(zero.full_total.item() + 3 * br.conf.item(), abs=1e-12)
    assert set(br.to_dict()) >= {"aps", "acs", "conf", "value", "dist", "self_total", "full_total"}


def test_lambda_conf_must_be_non_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda_conf=-1.0)


# -- gradient routing --------------------------------------------------------


def leaves(seed=0):
    t = tt(random_instance(seed))
    for k in ("pa", "pb", "da", "db", "ka", "kb"):
        t[k].requires_grad_(True)
    return t


def grads(loss, *xs):
    return torch.autograd.grad(loss, xs, allow_unused=True)


def test_aps_routing():
    t = leaves()
    a_to_b, b_to_a = aps_terms(t["da"], t["ka"], t["db"], t["kb"], t["mask"])
    g = grads(a_to_b, t["da"], t["ka"], t["kb"], t["db"])
    assert all(x is None or torch.all(x == 0) for x in g[:3])
    assert g[3].abs().sum() > 0
    g = grads(b_to_a, t["db"], t["ka"], t["kb"], t["da"])
    assert all(x is None or torch.all(x == 0) for x in g[:3])
    assert g[3].abs().sum() > 0


def test_acs_routing():
    t = leaves()
    a_to_b, b_to_a = acs_terms(t["pa"], t["da"], t["ka"], t["pb"], t["db"], t["kb"], t["mask"])
    g = grads(a_to_b, t["pa"], t["da"], t["ka"], t["kb"], t["db"], t["pb"])
    assert all(x is None or torch.all(x == 0) for x in g[:5])
    assert g[5].abs().sum() > 0
    g = grads(b_to_a, t["pb"], t["db"], t["ka"], t["kb"], t["da"], t["pa"])
    assert all(x is None or torch.all(x == 0) for x in g[:5])
    assert g[5].abs().sum() > 0


def test_dist_loss_trains_confidence():
    t = leaves()
    (g,) = grads(dist_loss(t["pa"], t["ka"], t["pb"], t["kb"], t["gt"], t["mask"]), t["ka"])
    assert g.abs().sum() > 0


def test_value_loss_does_not_touch_confidence():
    t = leaves()
    a, b = outputs(t)
    br = full_loss(a, b, t["gt"], t["mask"])
    gk = grads(br.value, t["ka"], t["kb"])
    assert all(x is None for x in gk)


# -- mask correctness --------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), junk=st.floats(-1e6, 1e6))
def test_masked_pixels_never_change_losses(seed, junk):
    base = tt(random_instance(seed))
    m = base["mask"]
    if m.all() or not m.any():
        return
    poked = {k: v.clone() for k, v in base.items()}
    out = ~m
    for k in ("da", "db", "gt"):
        poked[k][out] = junk
    for k in ("ka", "kb"):
        poked[k][out] = abs(junk) % 1
    for k in ("pa", "pb"):
        poked[k].permute(0, 2, 3, 1)[out] = junk
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        for t in (base, poked):
            a, b = outputs(t)
            t["out"] = (self_loss(a, b, m).self_total, full_loss(a, b, t["gt"], m).full_total,
                        aps_loss(t["da"], t["ka"], t["db"], t["kb"], m))
    for x, y in zip(base["out"], poked["out"]):
        assert x.item() == y.item()


# -- finite differences ------------------------------------------------------


def fd_check(fn, x, h=1e-6):
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    num = torch.zeros_like(x)
    flat = x.detach().view(-1)
    for i in range(flat.numel()):
        p, m = flat.clone(), flat.clone()
        p[i] += h
        m[i] -= h
        num.view(-1)[i] = (fn(p.view_as(x)) - fn(m.view_as(x))) / (2 * h)
    return ((g - num).norm() / num.norm().clamp_min(1e-30)).item()


def fd_instance():
    i = random_instance(11, b=1, s=8, h=4, w=4, mask_frac=0.8)
    t = tt(i)
    # keep smooth-L1 arguments away from the knee where the FD stencil straddles it
    t["da"] = t["da"] * 4 / 7
    t["db"] = t["da"] + torch.where(torch.rand_like(t["da"]) < 0.5, 0.4, 2.3).to(T)
    return t


def test_aps_gradient():
    t = fd_instance()
    # each directional term is differentiated w.r.t. its student only
    assert fd_check(lambda d: aps_terms(t["da"], t["ka"], d, t["kb"], t["mask"])[0], t["db"]) < 1e-3
    assert fd_check(lambda d: aps_terms(d, t["ka"], t["db"], t["kb"], t["mask"])[1], t["da"]) < 1e-3


def test_acs_gradient():
    t = fd_instance()
    assert fd_check(lambda p: acs_loss(t["pa"], t["da"], t["ka"], p, t["db"], t["kb"], t["mask"]), t["pb"]) < 1e-3
    assert fd_check(lambda p: acs_loss(p, t["da"], t["ka"], t["pb"], t["db"], t["kb"], t["mask"]), t["pa"]) < 1e-3


def test_acs_gradient_through_logits():
    t = fd_instance()
    logits = torch.randn(1, 8, 4, 4, dtype=T)
    f = lambda z: acs_loss(torch.softmax(z, 1), t["da"], t["ka"], t["pb"], t["db"], t["kb"], t["mask"])  # noqa: E731
    assert fd_check(f, logits) < 1e-3


def test_value_gradient():
    t = fd_instance()
    gt = t["da"] + 1.7
    gt[0, 0, 0] = 0.3
    assert fd_check(lambda d: value_loss(d, t["db"], gt, t["mask"]), t["da"] + 0.4 * torch.sign(
        torch.randn_like(gt))) < 1e-3


def test_dist_gradient():
    t = fd_instance()
    assert fd_check(lambda p: dist_loss(p, t["ka"], t["pb"], t["kb"], t["gt"], t["mask"]), t["pa"]) < 1e-3
    assert fd_check(lambda k: dist_loss(t["pa"], k, t["pb"], t["kb"], t["gt"], t["mask"]), t["ka"]) < 1e-3


def test_conf_gradient():
    t = fd_instance()
    assert fd_check(lambda k: conf_loss(k, t["ga"], t["kb"], t["gb"], t["mask"]), t["ka"]) < 1e-3


def test_cross_entropy_clamp():
    t = torch.tensor([[1.0, 0.0]], dtype=T).view(1, 2, 1, 1)
    p = torch.tensor([[0.0, 1.0]], dtype=T).view(1, 2, 1, 1)
    assert cross_entropy(t, p).item() == pytest.approx(-math.log(1e-12))
