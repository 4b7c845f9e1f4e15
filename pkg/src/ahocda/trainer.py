"""Source pretraining and frozen-memory adversarial curriculum adaptation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import blob
from . import hopfield as hf
from .curriculum import Curriculum, FakeSourceSet, build_curriculum, fake_source_ids, materialize_fake_source
from .errors import InvalidInputError, NumericError, ParameterError
from .model import (Discriminator, ModelConfig, SegModel, adv_loss_disc, adv_loss_disc_grads,
                    adv_loss_seg, adv_loss_seg_grad, ce_loss, ce_loss_grad, confusion_matrix,
                    iou_from_confusion, total_loss)
from .spectrum import Image, domain_distance, source_profile
from .synthdata import derive_seed

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lambda_adv: float = 0.001
    beta: float = 0.09
    K: int = 3
    tau: float = 2.0
    memory_size: int = 64
    lr_seg: float = 5e-6
    lr_disc: float = 2e-6
    poly_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 0.0
    iters_warmup: int = 600
    iters_pretrain: int = 800
    iters_per_stage: int = 200
    batch_size: int = 1
    seed: int = 0
    feature_dim: int = 64
    proj_dim: int = 32
    use_hopfield: bool = True
    use_curriculum: bool = True
    freeze: bool = True

    def __post_init__(self):
        for name in ("lr_seg", "lr_disc", "tau", "poly_power"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive")
        if self.K < 1:
            raise ParameterError("K must be >= 1")
        if self.batch_size != 1:
            raise ParameterError("only batch_size=1 (one source + one target image) is supported")
        if min(self.iters_warmup, self.iters_pretrain, self.iters_per_stage) < 0:
            raise ParameterError("iteration budgets must be >= 0")

    @property
    def stages(self) -> int:
        return self.K if self.use_curriculum else 1

    @property
    def warmup_iters(self) -> int:
        """Identity-layer encoder warm-up; only models with a memory layer have one."""
        return self.iters_warmup if self.use_hopfield else 0

    @property
    def pretrain_iters(self) -> int:
        """Source iterations on the final architecture; equal total budget either way."""
        return self.iters_pretrain + (0 if self.use_hopfield else self.iters_warmup)

    @property
    def stage_iters(self) -> int:
        """Iterations per stage; a single-stage run keeps the total adapt budget of K stages."""
        return self.iters_per_stage * (1 if self.use_curriculum else self.K)

    def model_config(self, in_channels: int = 3, n_classes: int = 4) -> ModelConfig:
        return ModelConfig(in_channels=in_channels, n_classes=n_classes,
                           enc_channels=(16, 32, self.feature_dim), proj_dim=self.proj_dim,
                           memory_size=self.memory_size, tau=self.tau, use_hopfield=self.use_hopfield)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        defaults = cls()
        return cls(**{k: _coerce(k, v, type(getattr(defaults, k))) for k, v in d.items()})


def _coerce(name: str, value, kind: type):
    """Cast a config value to its field type; strings such as ``"1e-5"`` are accepted."""
    try:
        if kind is bool:
            if isinstance(value, str) and value.lower() in ("true", "false"):
                return value.lower() == "true"
            if isinstance(value, bool):
                return value
            raise TypeError
        if kind is int:
            f = float(value)
            if isinstance(value, bool) or f != int(f):
                raise TypeError
            return int(f)
        if isinstance(value, bool):
            raise TypeError
        return kind(value)
    except (TypeError, ValueError):
        raise ParameterError(f"{name} must be {kind.__name__}, got {value!r}") from None


def poly_lr(base: float, it: int, total: int, power: float) -> float:
    """``base * (1 - it/total)^power``; zero once ``it`` reaches ``total``."""
    if total <= 0:
        return 0.0
    return base * max(0.0, 1.0 - it / total) ** power


class SGD:
    """Heavy-ball SGD over a named parameter dict, torch-style momentum buffers."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, names: Sequence[str], lr: float) -> None:
        for n in names:
            g = grads[n]
            if self.weight_decay:
                g = g + self.weight_decay * params[n]
            v = self.velocity.get(n)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[n] = v
            params[n] -= lr * v


def _check_finite(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise NumericError(f"loss diverged ({value}) at {where}")


def _check_params(params: Mapping[str, np.ndarray], where: str) -> None:
    for n, a in params.items():
        if not np.all(np.isfinite(a)):
            raise NumericError(f"parameter {n} became non-finite at {where}")


@dataclass
class RunState:
    phase: str = "pretrain"   # warmup | pretrain | adapt | done
    iteration: int = 0        # within the phase
    stage: int = 0            # 1-based during adapt
    lr_seg: float = 0.0
    lr_disc: float = 0.0
    checkpoints: list = field(default_factory=list)


def rank_images(source: Sequence[Image], compound: Mapping[str, Image], beta: float):
    """Distance of each compound image to the source amplitude profile."""
    profile = source_profile(list(source), beta)
    return [(i, domain_distance(im, profile)) for i, im in sorted(compound.items())]


class Trainer:
    """Step-wise runner for source training followed by curriculum adaptation.

    Source training of a model with a memory layer starts with a warm-up of
    an identity-layer model whose encoder then seeds the real one, standing
    in for an ImageNet-pretrained backbone.

    Every piece of mutable state lives on the instance and round-trips
    through :meth:`state_bytes`, so a run can be stopped after any step and
    resumed to the same bits.

    Compound images are stripped of labels on entry.
    """

    def __init__(self, config: TrainConfig, source: Sequence[Image],
                 compound: Optional[Mapping[str, Image]] = None,
                 curriculum: Optional[Curriculum] = None,
                 model: Optional[SegModel] = None,
                 skip_pretrain: bool = False,
                 adapt: bool = True,
                 metrics_sink: Optional[Callable[[dict], None]] = None):
        if not source:
            raise InvalidInputError("source set must be non-empty")
        if any(im.labels is None for im in source):
            raise InvalidInputError("every source image needs labels")
        self.config = config
        self.source = list(source)
        self.compound = {i: im.without_labels() for i, im in (compound or {}).items()}
        self.adapt_enabled = adapt and bool(self.compound)
        if self.adapt_enabled:
            if curriculum is None:
                curriculum = build_curriculum(rank_images(self.source, self.compound, config.beta),
                                              config.stages)
            if not config.use_curriculum and curriculum.K != 1:
                curriculum = build_curriculum(list(curriculum.ordered) + list(curriculum.dropped), 1)
            missing = set(curriculum.ids) - set(self.compound)
            if missing:
                raise InvalidInputError(f"curriculum references unknown images: {sorted(missing)[:3]}")
        self.curriculum = curriculum
        c, n_cls = self.source[0].pixels.shape[2], 4
        self._model_config = config.model_config(
            c, max(n_cls, int(max(im.labels.max() for im in self.source)) + 1))
        warm = model is None and not skip_pretrain and config.warmup_iters > 0
        if model is not None:
            self.seg = model.copy()
        else:
            self.seg = self._fresh_model(use_hopfield=config.use_hopfield and not warm)
        self.disc = Discriminator(self.seg.config.n_classes,
                                  rng=np.random.default_rng(derive_seed(config.seed, "disc")))
        self.opt_seg = SGD(config.momentum, config.weight_decay)
        self.opt_disc = SGD(config.momentum, config.weight_decay)
        self.rng = np.random.default_rng(derive_seed(config.seed, "trainer"))
        self.state = RunState(phase="warmup" if warm else "pretrain")
        self.fake: Optional[FakeSourceSet] = None
        self.metrics: list[dict] = []
        self.metrics_offset = 0  # records emitted before a resume
        self.metrics_sink = metrics_sink
        self.stage_checkpoints: list[bytes] = []
        self.pretrained_bytes: Optional[bytes] = None
        if skip_pretrain:
            self._enter_adapt()
        elif not warm and config.pretrain_iters == 0:
            self._enter_adapt()

    def _fresh_model(self, use_hopfield: bool) -> SegModel:
        cfg = replace(self._model_config, use_hopfield=use_hopfield)
        tag = "model" if use_hopfield else "plain"
        return SegModel(cfg, np.random.default_rng(derive_seed(self.config.seed, tag)))

    def _end_warmup(self) -> None:
        warm = self.seg
        self.seg = self._fresh_model(use_hopfield=True)
        for dst, src in zip(self.seg.enc, warm.enc):
            dst[0][...] = src[0]
            dst[1][...] = src[1]
        self.opt_seg = SGD(self.config.momentum, self.config.weight_decay)
        self.state.phase, self.state.iteration = "pretrain", 0
        if self.config.pretrain_iters == 0:
            self._enter_adapt()

    # ------------------------------------------------------------ control

    @property
    def done(self) -> bool:
        return self.state.phase == "done"

    @property
    def adapt_total(self) -> int:
        return self.curriculum.K * self.config.stage_iters if self.adapt_enabled else 0

    def run(self, max_steps: Optional[int] = None) -> "Trainer":
        steps = 0
        while not self.done and (max_steps is None or steps < max_steps):
            self.step()
            steps += 1
        return self

    def step(self) -> None:
        st = self.state
        if st.phase == "warmup":
            self._pretrain_step(self.config.warmup_iters)
            st.iteration += 1
            if st.iteration >= self.config.warmup_iters:
                self._end_warmup()
        elif st.phase == "pretrain":
            self._pretrain_step(self.config.pretrain_iters)
            st.iteration += 1
            if st.iteration >= self.config.pretrain_iters:
                self._enter_adapt()
        elif st.phase == "adapt":
            per = self.config.stage_iters
            if st.iteration % per == 0:
                self._enter_stage(st.iteration // per + 1)
            self._adapt_step()
            st.iteration += 1
            if st.iteration % per == 0:
                self._end_stage()
            if st.iteration >= self.adapt_total:
                st.phase = "done"

    def _enter_adapt(self) -> None:
        st = self.state
        st.iteration = 0
        # source-trained model, captured before the memory is frozen
        self.pretrained_bytes = self.seg.to_bytes(self.config.seed, "pretrain")
        if not self.adapt_enabled or self.config.stage_iters == 0:
            st.phase = "done"
            return
        st.phase = "adapt"
        self.opt_seg = SGD(self.config.momentum, self.config.weight_decay)
        if self.config.freeze and self.seg.memory is not None:
            hf.freeze(self.seg.memory)

    def _enter_stage(self, j: int) -> None:
        self.state.stage = j
        ids = fake_source_ids(self.curriculum, j)
        self.fake = materialize_fake_source(ids, self.seg, self.compound, stage=j,
                                            provenance=f"stage{j - 1}")
        log.info("stage %d/%d: %d target images, %d fake-source images",
                 j, self.curriculum.K, len(self.curriculum.stages[j - 1]), len(self.fake))

    def _end_stage(self) -> None:
        tag = f"stage{self.state.stage}"
        self.stage_checkpoints.append(self.seg.to_bytes(self.config.seed, tag))
        self.state.checkpoints.append(tag)

    def _emit(self, rec: dict) -> None:
        self.metrics.append(rec)
        if self.metrics_sink is not None:
            self.metrics_sink(rec)

    # ------------------------------------------------------------ steps

    def _pretrain_step(self, total: int) -> None:
        cfg, st = self.config, self.state
        lr = poly_lr(cfg.lr_seg, st.iteration, total, cfg.poly_power)
        st.lr_seg = lr
        im = self.source[self.rng.integers(len(self.source))]
        probs, cache = self.seg.forward(im)
        l_ce = ce_loss(probs, im.labels)
        _check_finite(l_ce, f"{st.phase} iteration {st.iteration}")
        grads = self.seg.backward(cache, ce_loss_grad(probs, im.labels))
        self.opt_seg.step(self.seg.params(), grads, self.seg.trainable(), lr)
        _check_params(self.seg.params(), f"{st.phase} iteration {st.iteration}")
        self._emit({"phase": st.phase, "stage": 0, "iter": st.iteration, "l_ce": l_ce,
                    "l_adv_seg": 0.0, "l_adv_d": 0.0, "lr": lr})

    def _adapt_step(self) -> None:
        cfg, st = self.config, self.state
        lam = cfg.lambda_adv
        lr_s = poly_lr(cfg.lr_seg, st.iteration, self.adapt_total, cfg.poly_power)
        lr_d = poly_lr(cfg.lr_disc, st.iteration, self.adapt_total, cfg.poly_power)
        st.lr_seg, st.lr_disc = lr_s, lr_d
        where = f"stage {st.stage} iteration {st.iteration}"

        n_src, n_fake = len(self.source), len(self.fake)
        k = self.rng.integers(n_src + n_fake)
        if k < n_src:
            s_img, s_lab = self.source[k], self.source[k].labels
        else:
            fid, s_lab = self.fake.members[k - n_src]
            s_img = self.compound[fid]
        stage_ids = self.curriculum.stages[st.stage - 1]
        t_img = self.compound[stage_ids[self.rng.integers(len(stage_ids))]]

        # segmenter: l_ce on (fake-)source + lambda * l_adv_seg on target, D held fixed
        ps, cache_s = self.seg.forward(s_img)
        pt, cache_t = self.seg.forward(t_img)
        dt, cache_dt = self.disc.forward(pt)
        l_ce = ce_loss(ps, s_lab)
        l_adv_seg = adv_loss_seg(dt)
        _check_finite(l_ce + l_adv_seg, where)
        d_pt, _ = self.disc.backward(cache_dt, lam * adv_loss_seg_grad(dt))
        g = self.seg.backward(cache_s, ce_loss_grad(ps, s_lab))
        g_t = self.seg.backward(cache_t, d_pt)
        for n in g:
            g[n] += g_t[n]
        self.opt_seg.step(self.seg.params(), g, self.seg.trainable(), lr_s)

        # discriminator on the detached predictions
        dt2, cache_dt2 = self.disc.forward(pt)
        ds2, cache_ds2 = self.disc.forward(ps)
        l_adv_d = adv_loss_disc(dt2, ds2)
        _check_finite(l_adv_d, where)
        g_dt, g_ds = adv_loss_disc_grads(dt2, ds2)
        _, gd = self.disc.backward(cache_dt2, g_dt, need_input_grad=False)
        _, gd_s = self.disc.backward(cache_ds2, g_ds, need_input_grad=False)
        for n in gd:
            gd[n] += gd_s[n]
        self.opt_disc.step(self.disc.params(), gd, self.disc.trainable(), lr_d)
        _check_params({**self.seg.params(), **self.disc.params()}, where)

        rep = total_loss(l_ce, l_adv_seg, l_adv_d, lam)
        self._emit({"phase": "adapt", "stage": st.stage, "iter": st.iteration, "l_ce": rep.l_ce,
                    "l_adv_seg": rep.l_adv_seg, "l_adv_d": rep.l_adv_d, "total": rep.total,
                    "lr": lr_s, "lr_disc": lr_d})

    # ------------------------------------------------------------ persistence

    def state_bytes(self) -> bytes:
        """Full resumable state: models, momentum, RNG, schedule position, pseudo-labels."""
        arrays = [(f"seg/{n}", a) for n, a in self.seg.params().items()]
        arrays += [(f"disc/{n}", a) for n, a in self.disc.params().items()]
        arrays += [(f"vseg/{n}", v) for n, v in sorted(self.opt_seg.velocity.items())]
        arrays += [(f"vdisc/{n}", v) for n, v in sorted(self.opt_disc.velocity.items())]
        fake_ids = []
        if self.fake is not None:
            for fid, lab in self.fake.members:
                fake_ids.append(fid)
                arrays.append((f"fake/{fid}", lab))
        header = {
            "kind": "TrainerState",
            "config": self.config.to_dict(),
            "model_config": self.seg.config.to_dict(),
            "frozen": bool(self.seg.memory is not None and self.seg.memory.frozen),
            "state": asdict(self.state),
            "rng": self.rng.bit_generator.state,
            "fake": {"stage": self.fake.stage, "ids": fake_ids,
                     "provenance": self.fake.provenance} if self.fake is not None else None,
            "curriculum": self.curriculum.to_json(self.config.beta) if self.curriculum else None,
            "n_metrics": self.metrics_offset + len(self.metrics),
        }
        return blob.pack(header, arrays)

    def load_state(self, data: bytes) -> "Trainer":
        header, arrays = blob.unpack(data)
        if header.get("kind") != "TrainerState":
            raise InvalidInputError("not a trainer state checkpoint")
        if header["config"] != self.config.to_dict():
            raise InvalidInputError("checkpoint was written with a different config")
        warm_phase = header["state"]["phase"] == "warmup"
        if (self.seg.memory is None) != (warm_phase or not self.config.use_hopfield):
            self.seg = self._fresh_model(use_hopfield=not warm_phase and self.config.use_hopfield)
        self.seg.load_params({n[4:]: a for n, a in arrays.items() if n.startswith("seg/")})
        if self.seg.memory is not None:
            self.seg.memory.frozen = bool(header["frozen"])
        self.disc.load_params({n[5:]: a for n, a in arrays.items() if n.startswith("disc/")})
        self.opt_seg.velocity = {n[5:]: a for n, a in arrays.items() if n.startswith("vseg/")}
        self.opt_disc.velocity = {n[6:]: a for n, a in arrays.items() if n.startswith("vdisc/")}
        self.rng.bit_generator.state = header["rng"]
        self.state = RunState(**header["state"])
        self.metrics_offset = header["n_metrics"] - len(self.metrics)
        if header["fake"] is not None:
            f = header["fake"]
            members = tuple((i, arrays[f"fake/{i}"].astype(np.int64)) for i in f["ids"])
            self.fake = FakeSourceSet(f["stage"], members, f["provenance"])
        return self


# ---------------------------------------------------------------- wrappers

def pretrain(config: TrainConfig, source: Sequence[Image], **kw) -> SegModel:
    """Train every parameter on labelled source images with cross entropy only."""
    return Trainer(config, source, adapt=False, **kw).run().seg


def adapt(config: TrainConfig, pretrained: SegModel, curriculum: Optional[Curriculum],
          compound: Mapping[str, Image], source: Sequence[Image], **kw):
    """Curriculum adaptation from a pretrained model. Returns ``(model, trainer)``."""
    tr = Trainer(config, source, compound, curriculum, model=pretrained, skip_pretrain=True, **kw)
    tr.run()
    return tr.seg, tr


def evaluate(model: SegModel, domains: Mapping[str, Sequence[Image]]) -> dict:
    """Per-domain IoU from a confusion matrix accumulated over each domain's images."""
    out = {}
    n_cls = model.config.n_classes
    for name, images in domains.items():
        conf = np.zeros((n_cls, n_cls), dtype=np.int64)
        for im in images:
            conf += confusion_matrix(model.predict(im), im.labels, n_cls)
        iou, mean = iou_from_confusion(conf)
        out[name] = {"iou": iou, "miou": mean}
    return out


ABLATIONS = ("source_only", "wo_curr", "wo_hopf", "full", "no_freeze")


def ablation_configs(config: TrainConfig) -> dict[str, TrainConfig]:
    """Adapted variants of ``config``; every one shares its seed and budgets."""
    base = replace(config, use_hopfield=True, use_curriculum=True, freeze=True)
    return {
        "wo_curr": replace(base, use_curriculum=False),
        "wo_hopf": replace(base, use_hopfield=False),
        "full": base,
        "no_freeze": replace(base, freeze=False),
    }


def ablation_suite(config: TrainConfig, source: Sequence[Image], compound: Mapping[str, Image],
                   eval_domains: Mapping[str, Sequence[Image]],
                   only: Optional[Sequence[str]] = None) -> list[dict]:
    """Component and freeze ablations on one data split.

    Models with a Hopfield layer share one pretrained checkpoint, which is
    also the source-only baseline; the identity-layer variant is pretrained
    separately from the same seed. Returns one row per (configuration, domain).
    """
    names = list(only) if only is not None else list(ABLATIONS)
    unknown = set(names) - set(ABLATIONS)
    if unknown:
        raise ParameterError(f"unknown ablation configurations: {sorted(unknown)}")
    variants = ablation_configs(config)
    curriculum = build_curriculum(rank_images(source, compound, config.beta), config.K)
    pretrained: dict[bool, SegModel] = {}

    def base_model(use_hopfield: bool) -> SegModel:
        if use_hopfield not in pretrained:
            cfg = replace(variants["full"], use_hopfield=use_hopfield)
            log.info("pretraining (hopfield=%s)", use_hopfield)
            pretrained[use_hopfield] = pretrain(cfg, source)
        return pretrained[use_hopfield]

    rows = []
    for name in names:
        if name == "source_only":
            model = base_model(True)
        else:
            cfg = variants[name]
            log.info("adapting %s", name)
            model, _ = adapt(cfg, base_model(cfg.use_hopfield), curriculum, compound, source)
        for dom, res in evaluate(model, eval_domains).items():
            rows.append({"configuration": name, "domain": dom, "miou": res["miou"]})
    return rows
