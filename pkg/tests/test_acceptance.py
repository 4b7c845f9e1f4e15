"""The ten acceptance criteria, each at its stated tolerance and time budget.

Every test records a one-line verdict that is printed at the end of the run.
"""

import math
import time

import numpy as np
import pytest

import conftest
from ahocda import hopfield as hf
from ahocda.curriculum import build_curriculum, fake_source_ids, fake_source_size
from ahocda.model import (Discriminator, ModelConfig, SegModel, adv_loss_disc, adv_loss_disc_grads,
                          adv_loss_seg, adv_loss_seg_grad, ce_loss, ce_loss_grad, total_loss)
from ahocda.spectrum import amplitude_crop, domain_distance, fft2, source_profile
from ahocda.synthdata import SceneSpec, eval_domains, gen_benchmark, split_images
from ahocda.trainer import TrainConfig, Trainer, ablation_suite

from oracles import naive_dft2, numeric_grad, rel_err, spearman


def record(n: int, ok: bool, detail: str, elapsed: float, budget: float) -> None:
    within = elapsed < budget
    verdict = "PASS" if ok and within else "FAIL"
    line = f"criterion {n:>2}: {verdict}  {detail}  [{elapsed:.1f}s / {budget:.0f}s]"
    conftest.ACCEPTANCE[n] = line
    print(line)
    assert ok, line
    assert within, line


def test_c01_fft_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = parseval = 0.0
    sizes = [(4, 4), (33, 47)] + [tuple(rng.integers(4, [34, 48])) for _ in range(48)]
    for h, w in sizes:
        x = rng.random((h, w, 1))
        spec = fft2(x)
        worst = max(worst, float(np.max(np.abs(spec[:, :, 0] - naive_dft2(x[:, :, 0])))))
        energy = np.sum(np.abs(spec) ** 2) / (h * w)
        parseval = max(parseval, abs(energy - np.sum(x ** 2)) / np.sum(x ** 2))
    ok = len(sizes) >= 50 and worst < 1e-9 and parseval < 1e-9
    record(1, ok, f"{len(sizes)} images, max |fft-dft|={worst:.1e}, Parseval rel={parseval:.1e}",
           time.perf_counter() - t0, 5)


def test_c02_amplitude_pipeline():
    t0 = time.perf_counter()
    rng = np.random.default_rng(102)
    x = rng.random((12, 10, 3))
    spec = fft2(x)
    identity = np.array_equal(amplitude_crop(spec, 1.0).values, np.abs(spec))
    shape = amplitude_crop(fft2(rng.random((100, 100, 3))), 0.09).values.shape
    zero = increasing = True
    for _ in range(20):
        img = rng.random((64, 64, 3))
        prof = source_profile([img], 0.09)
        zero &= domain_distance(img, prof) == 0.0
        noise = rng.standard_normal(img.shape)
        d = [domain_distance(img + s * noise, prof) for s in (0.02, 0.05, 0.1)]
        increasing &= d[0] < d[1] < d[2]
    ok = identity and shape == (9, 9, 3) and zero and increasing
    record(2, ok, f"beta=1 identity={identity}, 100x100 crop={shape[:2]}, self-distance 0={zero}, "
                  f"monotone over 20 images={increasing}", time.perf_counter() - t0, 10)


def test_c03_curriculum_cardinalities():
    t0 = time.perf_counter()
    cur = build_curriculum([(f"g{i}", float(i)) for i in range(9)], 3)
    stages = [len(s) for s in cur.stages]
    pools = [len(fake_source_ids(cur, j)) for j in (1, 2, 3)]
    rng = np.random.default_rng(103)
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 80))
        k = int(rng.integers(1, n + 1))
        c = build_curriculum([(f"i{i:03d}", float(v)) for i, v in enumerate(rng.random(n))], k)
        flat = [i for s in c.stages for i in s]
        good = flat == c.ids and len(set(flat)) == n - n % k
        good &= all(len(s) == n // k for s in c.stages)
        prev = []
        for j in range(1, k + 1):
            pool = fake_source_ids(c, j)
            good &= pool[:len(prev)] == prev and len(pool) == (n - n % k) * (j - 1) // (2 * k)
            good &= len(pool) == fake_source_size(c.size, k, j)
            good &= set(pool) <= {i for s in c.stages[:j - 1] for i in s}
            prev = pool
        bad += not good
    ok = stages == [3, 3, 3] and pools == [0, 1, 3] and bad == 0
    record(3, ok, f"stages={stages}, pools={pools}, invariant violations={bad}/1000",
           time.perf_counter() - t0, 5)


def test_c04_hopfield_numerics():
    t0 = time.perf_counter()
    eye = np.eye(2)
    mem = hf.HopfieldMemory(eye.copy(), eye.copy(), eye.copy(), eye.copy(), tau=1.0)
    sim = hf.similarity(mem, np.array([1.0, 0.0]))
    hand_err = float(np.max(np.abs(sim - [0.73106, 0.26894])))
    rng = np.random.default_rng(104)
    sum_err = 0.0
    for _ in range(20):
        big = hf.HopfieldMemory.init(int(rng.integers(1, 20)), 8, 4, float(rng.uniform(0.1, 20)), rng)
        sums = hf.similarity(big, rng.standard_normal((16, 8)) * 3).sum(axis=1)
        sum_err = max(sum_err, float(np.max(np.abs(sums - 1))))
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((16, 4)))
    M = q.T * 2.0
    net = hf.HopfieldMemory(M, np.eye(16)[:, :8], np.eye(16)[:, :8], np.eye(16), tau=8.0)
    worst_err, worst_it = 0.0, 0
    for trial in range(5):
        noise = np.random.default_rng(trial).uniform(-0.05, 0.05, 16)
        z, it = hf.mchn_iterate(net, M[1] + noise, max_iters=20, tol=1e-9)
        worst_err = max(worst_err, float(np.max(np.abs(z - M[1]))))
        worst_it = max(worst_it, it)
    ok = hand_err <= 1e-5 and sum_err < 1e-12 and worst_err < 0.01 and worst_it <= 5
    record(4, ok, f"two-pattern err={hand_err:.1e}, simplex err={sum_err:.1e}, "
                  f"recall err={worst_err:.1e} in <= {worst_it} iters", time.perf_counter() - t0, 5)


def _grad_worst(frozen: bool) -> tuple[float, float]:
    rng = np.random.default_rng(105)
    cfg = ModelConfig(enc_channels=(3, 4, 5), proj_dim=3, memory_size=4, tau=1.5, disc_channels=3)
    seg = SegModel(cfg, rng)
    seg.memory.M *= 3
    if frozen:
        hf.freeze(seg.memory)
    disc = Discriminator(cfg.n_classes, hidden=3, rng=rng)
    xs, xt = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    ys = rng.integers(0, 4, (6, 6))
    lam = 0.3

    def value():
        ps, pt = seg.predict_proba(xs), seg.predict_proba(xt)
        dt, ds = disc.forward(pt)[0], disc.forward(ps)[0]
        return total_loss(ce_loss(ps, ys), adv_loss_seg(dt), adv_loss_disc(dt, ds), lam).total

    ps, cs = seg.forward(xs)
    pt, ct = seg.forward(xt)
    dt, cdt = disc.forward(pt)
    ds, cds = disc.forward(ps)
    g_t, g_s = adv_loss_disc_grads(dt, ds)
    d_pt, g1 = disc.backward(cdt, lam * (adv_loss_seg_grad(dt) + g_t))
    d_ps, g2 = disc.backward(cds, lam * g_s)
    grads = seg.backward(cs, ce_loss_grad(ps, ys) + d_ps)
    for n, g in seg.backward(ct, d_pt).items():
        grads[n] = grads[n] + g
    grads.update({n: g1[n] + g2[n] for n in g1})
    worst, leak = 0.0, 0.0
    for name, arr in {**seg.params(), **disc.params()}.items():
        if frozen and name in {"hopfield.M", "hopfield.W_k", "hopfield.W_v"}:
            leak = max(leak, float(np.max(np.abs(grads[name]))))
            continue
        worst = max(worst, rel_err(grads[name], numeric_grad(value, arr)))
    return worst, leak


def test_c05_gradient_correctness():
    t0 = time.perf_counter()
    w_free, _ = _grad_worst(False)
    w_frozen, leak = _grad_worst(True)
    ok = w_free < 1e-5 and w_frozen < 1e-5 and leak == 0.0
    record(5, ok, f"max rel err trainable={w_free:.1e}, frozen case={w_frozen:.1e}, "
                  f"frozen grad max={leak}", time.perf_counter() - t0, 60)


def test_c06_loss_identities():
    t0 = time.perf_counter()
    ce_half = ce_loss(np.full((1, 1, 2), 0.5), np.zeros((1, 1), int))
    n = 7 * 5
    half = np.full((7, 5, 2), 0.5)
    seg_ok = adv_loss_seg(half) == n * math.log(2)
    d_ok = adv_loss_disc(half, half) == 2 * n * math.log(2)
    rng = np.random.default_rng(106)
    consistent = True
    for _ in range(100):
        a, b, c, lam = rng.random(4) * [100, 100, 100, 0.01]
        r = total_loss(a, b, c, lam)
        consistent &= r.total == a + lam * (b + c)
    ok = abs(ce_half - math.log(2)) <= 1e-12 and seg_ok and d_ok and consistent
    record(6, ok, f"ce(0.5)-ln2={ce_half - math.log(2):.1e}, adv seg exact={seg_ok}, "
                  f"adv d exact={d_ok}, total bit-consistent={consistent}", time.perf_counter() - t0, 1)


def test_c07_ranking_validity():
    t0 = time.perf_counter()
    manifest, sidecar, images = gen_benchmark(SceneSpec(seed=0))
    prof = source_profile(list(split_images(manifest, images, "source").values()), 0.09)
    rhos = {}
    for iid, im in split_images(manifest, images, "compound").items():
        h = sidecar["images"][iid]
        rhos.setdefault(h["kind"], []).append((domain_distance(im, prof), h["magnitude"]))
    rhos = {k: spearman(*zip(*v)) for k, v in rhos.items()}
    ok = len(rhos) == 3 and min(rhos.values()) >= 0.9
    record(7, ok, "spearman " + ", ".join(f"{k}={v:.3f}" for k, v in sorted(rhos.items())),
           time.perf_counter() - t0, 30)


@pytest.fixture(scope="module")
def ablation():
    t0 = time.perf_counter()
    manifest, sidecar, images = gen_benchmark(SceneSpec(seed=0))
    source = list(split_images(manifest, images, "source").values())
    compound = {i: im.without_labels() for i, im in split_images(manifest, images, "compound").items()}
    domains = {"compound_far": eval_domains(manifest, sidecar, images)["compound_far"]}
    cfg = TrainConfig(seed=0)
    assert cfg.iters_warmup + cfg.iters_pretrain + cfg.K * cfg.iters_per_stage <= 2000
    rows = ablation_suite(cfg, source, compound, domains)
    return {r["configuration"]: r["miou"] for r in rows}, time.perf_counter() - t0


def test_c08_component_ablation(ablation):
    res, elapsed = ablation
    base = res["source_only"]
    full_best = all(res["full"] >= res[k] for k in ("source_only", "wo_curr", "wo_hopf"))
    adapted_ok = all(res[k] >= base for k in ("wo_curr", "wo_hopf", "full"))
    detail = "far-compound mIoU " + ", ".join(
        f"{k}={res[k]:.3f}" for k in ("source_only", "wo_curr", "wo_hopf", "full"))
    record(8, full_best and adapted_ok, detail, elapsed, 600)


def test_c09_freeze_ablation(ablation):
    res, elapsed = ablation
    record(9, res["full"] >= res["no_freeze"],
           f"far-compound mIoU freeze={res['full']:.3f}, no-freeze={res['no_freeze']:.3f}",
           elapsed, 600)


def test_c10_determinism_and_resume():
    t0 = time.perf_counter()
    manifest, _, images = gen_benchmark(SceneSpec(seed=0), 8)
    source = list(split_images(manifest, images, "source").values())
    compound = split_images(manifest, images, "compound")
    cfg = TrainConfig(seed=0, iters_warmup=8, iters_pretrain=8, iters_per_stage=6)

    def blobs(tr):
        return tr.seg.to_bytes(0, "final"), tr.stage_checkpoints, tr.metrics

    a = blobs(Trainer(cfg, source, compound).run())
    b = blobs(Trainer(cfg, source, compound).run())
    same = a[0] == b[0] and a[1] == b[1] and a[2] == b[2]
    resumed_ok = True
    for cut in (5, 12, 20, 29):
        part = Trainer(cfg, source, compound).run(cut)
        state = part.state_bytes()
        rest = Trainer(cfg, source, compound).load_state(state).run()
        resumed_ok &= rest.seg.to_bytes(0, "final") == a[0]
        resumed_ok &= part.metrics + rest.metrics == a[2]
        resumed_ok &= part.stage_checkpoints + rest.stage_checkpoints == a[1]
    record(10, same and resumed_ok, f"rerun bitwise identical={same}, "
                                    f"resume at 4 cut points identical={resumed_ok}",
           time.perf_counter() - t0, 120)
