"""Fast numerical self-tests behind ``ahocda selfcheck``.

Each check returns the measured error next to its tolerance so the report
shows how much headroom there is, not just a verdict.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import hopfield as hf
from .curriculum import build_curriculum, fake_source_ids
from .model import (Discriminator, ModelConfig, SegModel, adv_loss_disc, adv_loss_disc_grads,
                    adv_loss_seg, adv_loss_seg_grad, ce_loss, ce_loss_grad, total_loss)
from .spectrum import fft2


@dataclass(frozen=True)
class CheckResult:
    name: str
    measured: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.measured <= self.tolerance)

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{self.name:<20} measured={self.measured:.3e}  tol={self.tolerance:.0e}  {verdict}"


def _direct_dft(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    u = np.arange(h)[:, None, None, None]
    v = np.arange(w)[None, :, None, None]
    p = np.arange(h)[None, None, :, None]
    q = np.arange(w)[None, None, None, :]
    kernel = np.exp(-2j * np.pi * (u * p / h + v * q / w))
    out = np.einsum("uvpq,pq->uv", kernel, x)
    return np.roll(out, (h // 2, w // 2), axis=(0, 1))


def check_dft(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    err = parseval = 0.0
    for shape in ((4, 4), (5, 7), (8, 6), (9, 11)):
        x = rng.random(shape + (1,))
        spec = fft2(x)
        err = max(err, float(np.max(np.abs(spec[:, :, 0] - _direct_dft(x[:, :, 0])))))
        energy = np.sum(np.abs(spec) ** 2) / (shape[0] * shape[1])
        parseval = max(parseval, abs(energy - np.sum(x ** 2)) / np.sum(x ** 2))
    return [CheckResult("dft_oracle", err, 1e-9), CheckResult("parseval", float(parseval), 1e-9)]


def check_retrieval() -> list[CheckResult]:
    eye = np.eye(2)
    mem = hf.HopfieldMemory(eye.copy(), eye.copy(), eye.copy(), eye.copy(), tau=1.0)
    sim = hf.similarity(mem, np.array([1.0, 0.0]))
    e = np.e
    hand = np.array([e / (e + 1), 1 / (e + 1)])
    rng = np.random.default_rng(1)
    big = hf.HopfieldMemory.init(16, 8, 4, 3.0, rng)
    sums = hf.similarity(big, rng.standard_normal((32, 8)) * 5).sum(axis=1)
    return [CheckResult("softmax_retrieval", float(np.max(np.abs(sim - hand))), 1e-12),
            CheckResult("simplex_sum", float(np.max(np.abs(sums - 1))), 1e-12)]


def _objective(seg, disc, xs, ys, xt, lam):
    ps, pt = seg.predict_proba(xs), seg.predict_proba(xt)
    dt, ds = disc.forward(pt)[0], disc.forward(ps)[0]
    return total_loss(ce_loss(ps, ys), adv_loss_seg(dt), adv_loss_disc(dt, ds), lam).total


def _analytic(seg, disc, xs, ys, xt, lam):
    ps, cs = seg.forward(xs)
    pt, ct = seg.forward(xt)
    dt, cdt = disc.forward(pt)
    ds, cds = disc.forward(ps)
    gt_d, gs_d = adv_loss_disc_grads(dt, ds)
    d_pt, g1 = disc.backward(cdt, lam * (adv_loss_seg_grad(dt) + gt_d))
    d_ps, g2 = disc.backward(cds, lam * gs_d)
    grads = seg.backward(cs, ce_loss_grad(ps, ys) + d_ps)
    for n, g in seg.backward(ct, d_pt).items():
        grads[n] = grads[n] + g
    for n in g1:
        grads[n] = g1[n] + g2[n]
    return grads


def check_gradients(seed: int = 0, inject_bug: bool = False, eps: float = 1e-5) -> list[CheckResult]:
    """Central differences of the full objective against the analytic gradients.

    ``inject_bug`` scales one analytic gradient by 1.001, a negative control
    that the check must catch.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(enc_channels=(3, 4, 6), proj_dim=3, memory_size=4, tau=1.5, disc_channels=3)
    seg = SegModel(cfg, rng)
    seg.memory.M *= 3
    disc = Discriminator(cfg.n_classes, hidden=3, rng=rng)
    xs, xt = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    ys = rng.integers(0, cfg.n_classes, (6, 6))
    lam = 0.5
    results = []
    for frozen in (False, True):
        if frozen:
            hf.freeze(seg.memory)
        grads = _analytic(seg, disc, xs, ys, xt, lam)
        if inject_bug:
            grads["hopfield.W_q"] = grads["hopfield.W_q"] * 1.001
        worst, frozen_leak = 0.0, 0.0
        for name, arr in {**seg.params(), **disc.params()}.items():
            if frozen and name.startswith("hopfield.") and name[9:] in hf.FROZEN_NAMES:
                frozen_leak = max(frozen_leak, float(np.max(np.abs(grads[name]))))
                continue
            num = np.zeros_like(arr)
            for idx in np.ndindex(arr.shape):
                old = arr[idx]
                arr[idx] = old + eps
                up = _objective(seg, disc, xs, ys, xt, lam)
                arr[idx] = old - eps
                down = _objective(seg, disc, xs, ys, xt, lam)
                arr[idx] = old
                num[idx] = (up - down) / (2 * eps)
            denom = max(np.linalg.norm(num), np.linalg.norm(grads[name]), 1e-12)
            worst = max(worst, float(np.linalg.norm(num - grads[name]) / denom))
        tag = "frozen" if frozen else "trainable"
        results.append(CheckResult(f"gradient_{tag}", worst, 1e-5))
        if frozen:
            # frozen gradients must be exactly zero; any leak fails
            results.append(CheckResult("frozen_grad_zero", frozen_leak, 0.0))
    return results


def check_cardinality() -> list[CheckResult]:
    cur = build_curriculum([(f"x{i}", float(i)) for i in range(9)], 3)
    got = [len(s) for s in cur.stages] + [len(fake_source_ids(cur, j)) for j in (1, 2, 3)]
    return [CheckResult("split_cardinality", float(np.sum(np.abs(np.subtract(got, [3, 3, 3, 0, 1, 3])))),
                        0.0)]


def run_all(inject_bug: bool = False) -> list[CheckResult]:
    return check_dft() + check_retrieval() + check_gradients(inject_bug=inject_bug) + check_cardinality()
