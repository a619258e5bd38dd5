"""Adversarial training of the defogging networks and supervised training of
the sky segmenter.

One iteration runs both translation directions:

* foggy -> clear: ``I_df = M_R(I_rf)``, ``I_rcf1 = M_S(I_df)``,
  ``I_rr = M_CTR(I_df, derived(I_rf))``, ``I_rcf2 = M_S(I_rr)``
* clear -> foggy: ``I_sf = M_S(I_rff)``, ``I_rcff = I_df_sf = M_R(I_sf)``,
  ``I_rr_sf = M_CTR(I_df_sf, derived(I_sf))``

then one Adam step on the generators followed by one on the discriminators.
"""

import dataclasses
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from . import asm
from . import losses as L
from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import list_pngs, load_batch
from .errors import ConfigError, NumericError
from .imageproc import derive_batch, load_gray, resize, to_unit
from .networks import ArchConfig, Networks, SkySegmenter
from .nn import set_bn_update, set_requires_grad
from .optim import Adam
from .tensor import Tensor

ARCH_SECTION = "meta.arch"


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _check_fields(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    out = {}
    for name, value in raw.items():
        kind = fields[name].type
        if kind in ("int", int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif kind in ("float", float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        elif kind == Optional[str]:
            ok = value is None or isinstance(value, str)
        elif kind == Optional[int]:
            ok = value is None or (isinstance(value, int) and not isinstance(value, bool))
        else:
            ok = True
        if not ok:
            raise ConfigError(f"{where}: field '{name}' has invalid value {value!r} (expected {kind})")
        out[name] = value
    return out


def _read_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc


@dataclass
class TrainConfig:
    image_size: int = 64
    width_scale: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 2
    epochs: int = 15
    iterations: Optional[int] = None
    lambdas: L.LossWeights = field(default_factory=L.LossWeights)
    seed: int = 0
    fog_dir: Optional[str] = None
    clear_dir: Optional[str] = None
    ssm_checkpoint: Optional[str] = None
    checkpoint_out: Optional[str] = None
    log_path: Optional[str] = None
    log_interval: int = 1
    checkpoint_interval: int = 0
    resume: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.lambdas, dict):
            try:
                self.lambdas = L.LossWeights(**self.lambdas)
            except TypeError as exc:
                raise ConfigError(f"field 'lambdas': {exc}") from None
        elif isinstance(self.lambdas, (list, tuple)):
            if len(self.lambdas) != 6:
                raise ConfigError("field 'lambdas': expected 6 weights")
            self.lambdas = L.LossWeights(*self.lambdas)
        if not self.lr > 0:
            raise ConfigError(f"field 'lr' must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"field 'batch_size' must be >= 1, got {self.batch_size}")
        if self.iterations is not None and self.iterations < 0:
            raise ConfigError("field 'iterations' must be non-negative")
        if self.log_interval < 1:
            raise ConfigError("field 'log_interval' must be >= 1")
        ArchConfig(width_scale=self.width_scale, image_size=self.image_size)

    @classmethod
    def from_dict(cls, raw, where="config"):
        return cls(**_check_fields(cls, raw, where))

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(_read_json(path), str(path))

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["lambdas"] = dataclasses.asdict(self.lambdas)
        return d

    def arch(self):
        return ArchConfig(width_scale=self.width_scale, image_size=self.image_size)


@dataclass
class SsmConfig:
    image_size: int = 64
    width_scale: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 4
    epochs: int = 10
    iterations: Optional[int] = None
    enhance_weight: float = 1.0
    seed: int = 0
    data_dir: Optional[str] = None
    checkpoint_out: Optional[str] = None
    log_path: Optional[str] = None
    log_interval: int = 1

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"field 'lr' must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"field 'batch_size' must be >= 1, got {self.batch_size}")
        if self.image_size % 8:
            raise ConfigError(f"field 'image_size' must be divisible by 8, got {self.image_size}")
        if self.log_interval < 1:
            raise ConfigError("field 'log_interval' must be >= 1")
        ArchConfig(width_scale=self.width_scale, image_size=self.image_size)

    from_dict = classmethod(TrainConfig.from_dict.__func__)
    from_json = classmethod(TrainConfig.from_json.__func__)

    def arch(self):
        return ArchConfig(width_scale=self.width_scale, image_size=self.image_size)


# ---------------------------------------------------------------------------
# checkpoint <-> networks
# ---------------------------------------------------------------------------


def _arch_array(arch):
    return np.array([arch.width_scale, arch.image_size, arch.resblocks, arch.ssm_resblocks, arch.reduction], np.float32)


def arch_from_checkpoint(ckpt):
    if ARCH_SECTION not in ckpt.sections:
        raise ConfigError("checkpoint has no architecture section")
    s, size, res, sres, red = (int(v) for v in ckpt.sections[ARCH_SECTION])
    return ArchConfig(width_scale=s, image_size=size, resblocks=res, ssm_resblocks=sres, reduction=red)


def module_sections(prefix, module):
    return [(f"{prefix}.{n}", a) for n, a in module.state_arrays().items()]


def networks_to_checkpoint(nets, optimizers=(), step=0):
    sections = [(ARCH_SECTION, _arch_array(nets.arch))]
    for name, module in nets.items():
        sections.extend(module_sections(name, module))
    for opt in optimizers:
        for pname, (m, v) in opt.state.items():
            sections.append((pname + ".m", m))
            sections.append((pname + ".v", v))
    return Checkpoint(dict(sections), step)


def load_module(module, ckpt, prefix):
    module.load_arrays(ckpt.subset(prefix))


def networks_from_checkpoint(ckpt, dtype=np.float32):
    nets = Networks(arch_from_checkpoint(ckpt), seed=0, dtype=dtype)
    for name, module in nets.items():
        if any(k.startswith(name + ".") for k in ckpt.sections):
            load_module(module, ckpt, name)
    return nets


def ssm_from_checkpoint(ckpt, dtype=np.float32):
    ssm = SkySegmenter(arch_from_checkpoint(ckpt), np.random.default_rng(0), dtype)
    load_module(ssm, ckpt, "ssm")
    return ssm.eval()


# ---------------------------------------------------------------------------
# the two translation paths
# ---------------------------------------------------------------------------


class FogPaths(NamedTuple):
    i_df: Tensor
    i_rcf1: Tensor
    i_rr: Tensor
    i_rcf2: Tensor


class ClearPaths(NamedTuple):
    i_sf: Tensor
    i_rcff: Tensor
    i_df_sf: Tensor
    i_rr_sf: Tensor


def _derived_tensors(signed):
    d = derive_batch(signed)
    return Tensor(d.wb), Tensor(d.ce), Tensor(d.gc)


def fog2fogfree_step(nets, i_rf, airlight):
    """Foggy batch through removal, re-fogging and fusion; ``airlight`` is N x 3 (unit range)."""
    i_df = nets.defog(i_rf)
    i_rcf1 = nets.synth(i_df, airlight)
    wb, ce, gc = _derived_tensors(i_rf.data)
    i_rr = nets.ctr(i_df, wb, ce, gc)
    i_rcf2 = nets.synth(i_rr, airlight)
    return FogPaths(i_df, i_rcf1, i_rr, i_rcf2)


def fogfree2fog_step(nets, i_rff, airlight):
    """Clear batch through fog synthesis, removal and fusion; ``airlight`` is N x 3 (unit range)."""
    i_sf = nets.synth(i_rff, airlight)
    i_rcff = nets.defog(i_sf)
    # the removal of the synthesized image is both the cycle reconstruction and the fusion input
    i_df_sf = i_rcff
    wb, ce, gc = _derived_tensors(i_sf.data)
    i_rr_sf = nets.ctr(i_df_sf, wb, ce, gc)
    return ClearPaths(i_sf, i_rcff, i_df_sf, i_rr_sf)


def generator_losses(nets, extractor, i_rf, i_rff, fog, clear):
    adv_r = L.adv_loss_removal(nets.d_ff(fog.i_df))
    adv_ctr = L.adv_loss_ctr(nets.d_ff(fog.i_rr))
    adv_s = L.adv_loss_synth(nets.d_f(clear.i_sf))
    cyc1 = L.cycle_loss_fog(i_rf, fog.i_rcf1, fog.i_rcf2)
    cyc2 = L.cycle_loss_fogfree(i_rff, clear.i_rcff, clear.i_rr_sf)
    perc = L.perceptual_loss(
        extractor,
        [(i_rf, fog.i_rcf1), (i_rf, fog.i_rcf2), (i_rff, clear.i_rcff), (i_rff, clear.i_rr_sf)],
    )
    return [adv_r, adv_ctr, adv_s, cyc1, cyc2, perc]


def discriminator_losses(nets, i_rf, i_rff, fog, clear):
    """D_ff scores both fused and plain removals as fakes; D_f scores synthesized fog."""
    real_ff = nets.d_ff(i_rff)
    fake_df = nets.d_ff(fog.i_df.detach())
    fake_rr = nets.d_ff(fog.i_rr.detach())
    d_ff = L.adversarial_loss(fake_df, real_ff, "discriminator") + T.reduce(fake_rr * fake_rr, "mean")
    d_f = L.adversarial_loss(nets.d_f(clear.i_sf.detach()), nets.d_f(i_rf), "discriminator")
    return d_ff, d_f


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _require_dir(path, name):
    if path is None:
        raise ConfigError(f"field '{name}' is required")
    if not Path(path).is_dir():
        raise ConfigError(f"field '{name}': directory {path} does not exist")
    files = list_pngs(path)
    if not files:
        raise ConfigError(f"field '{name}': no PNG images in {path}")
    return files


def estimate_batch_airlight(images_signed, ssm=None):
    """Per-image airlight (N x 3, unit range) from the sky segmenter, or the dark channel without one."""
    out = np.empty((len(images_signed), 3), dtype=np.float64)
    for i, img in enumerate(images_signed):
        unit = np.clip(to_unit(img.astype(np.float64)).transpose(1, 2, 0), 0.0, 1.0)
        if ssm is None:
            out[i] = asm.atmospheric_light_dark_channel(unit)
        else:
            with T.no_grad():
                _, prob = ssm(Tensor(img[None]))
            out[i] = asm.estimate_airlight(unit, prob.data[0, 0].astype(np.float64))[0]
    return out


class Trainer:
    """Holds networks, optimizers and data; ``step()`` runs one iteration.

    Sampling for iteration ``k`` draws from ``default_rng([seed, k])`` so a
    run resumed at step ``k`` sees the same batches as an uninterrupted one.
    """

    def __init__(self, config, foggy=None, clear=None, ssm=None, log=None):
        self.config = config
        if foggy is None:
            foggy = load_batch(_require_dir(config.fog_dir, "fog_dir"), config.image_size)
        if clear is None:
            clear = load_batch(_require_dir(config.clear_dir, "clear_dir"), config.image_size)
        if len(foggy) == 0 or len(clear) == 0:
            raise ConfigError("training needs at least one foggy and one clear image")
        self.foggy = np.ascontiguousarray(foggy, dtype=np.float32)
        self.clear = np.ascontiguousarray(clear, dtype=np.float32)
        if ssm is None and config.ssm_checkpoint:
            ssm = ssm_from_checkpoint(load_checkpoint(config.ssm_checkpoint))
        self.nets = Networks(config.arch(), seed=config.seed)
        if ssm is not None:
            self.nets.ssm.load_arrays(ssm.state_arrays())
        self.nets.ssm.eval()
        set_requires_grad(self.nets.ssm, False)
        # the segmenter is frozen, so the foggy-image airlight is fixed per image
        self.airlight = estimate_batch_airlight(self.foggy, ssm)
        self.extractor = L.PerceptualExtractor()
        self.gen_modules = [("defog", self.nets.defog), ("synth", self.nets.synth), ("ctr", self.nets.ctr)]
        self.disc_modules = [("d_ff", self.nets.d_ff), ("d_f", self.nets.d_f)]
        opt = dict(lr=config.lr, beta1=config.beta1, beta2=config.beta2)
        self.opt_g = Adam(self._named(self.gen_modules), **opt)
        self.opt_d = Adam(self._named(self.disc_modules), **opt)
        self.step_count = 0
        self.log = log

    @staticmethod
    def _named(modules):
        return [(f"{prefix}.{n}", p) for prefix, m in modules for n, p in m.named_parameters()]

    def total_iterations(self):
        c = self.config
        if c.iterations is not None:
            return c.iterations
        return c.epochs * math.ceil(len(self.foggy) / c.batch_size)

    def _sample(self, rng, pool):
        replace = len(pool) < self.config.batch_size
        return np.sort(rng.choice(len(pool), self.config.batch_size, replace=replace))

    def sample(self, k):
        """Batches and airlight for iteration ``k``: (i_rf, i_rff, a_fog, a_syn)."""
        rng = np.random.default_rng([self.config.seed, k])
        fi = self._sample(rng, self.foggy)
        ci = self._sample(rng, self.clear)
        a_syn = np.stack([asm.sample_airlight(rng) for _ in ci])
        return Tensor(self.foggy[fi]), Tensor(self.clear[ci]), self.airlight[fi], a_syn

    def generator_update(self, i_rf, i_rff, a_fog, a_syn):
        """Adam step on M_R, M_S and M_CTR with the discriminators frozen (weights and statistics)."""
        for _, d in self.disc_modules:
            set_requires_grad(d, False)
            set_bn_update(d, False)
        try:
            self.opt_g.zero_grad()
            fog = fog2fogfree_step(self.nets, i_rf, a_fog)
            clear = fogfree2fog_step(self.nets, i_rff, a_syn)
            comps = generator_losses(self.nets, self.extractor, i_rf, i_rff, fog, clear)
            try:
                total = L.total_loss(self.config.lambdas, comps)
            except NumericError as exc:
                raise NumericError(f"step {self.step_count}: {exc}") from None
            T.backward(total)
            self.opt_g.step()
        finally:
            for _, d in self.disc_modules:
                set_requires_grad(d, True)
                set_bn_update(d, True)
        return fog, clear, comps, total

    def discriminator_update(self, i_rf, i_rff, fog, clear):
        """Adam step on D_ff and D_f against detached generator outputs."""
        self.opt_d.zero_grad()
        d_ff, d_f = discriminator_losses(self.nets, i_rf, i_rff, fog, clear)
        d_total = d_ff + d_f
        if not np.isfinite(d_total.item()):
            raise NumericError(f"step {self.step_count}: discriminator loss is not finite")
        T.backward(d_total)
        self.opt_d.step()
        return d_ff, d_f

    def step(self):
        """One generator update then one discriminator update; returns the loss record."""
        i_rf, i_rff, a_fog, a_syn = self.sample(self.step_count)
        fog, clear, comps, total = self.generator_update(i_rf, i_rff, a_fog, a_syn)
        d_ff, d_f = self.discriminator_update(i_rf, i_rff, fog, clear)
        self.step_count += 1
        rec = {"step": self.step_count}
        rec.update({name: float(c.item()) for name, c in zip(L.COMPONENTS, comps)})
        rec["total"] = float(total.item())
        rec["d_ff"] = float(d_ff.item())
        rec["d_f"] = float(d_f.item())
        return rec

    def checkpoint(self):
        return networks_to_checkpoint(self.nets, (self.opt_g, self.opt_d), self.step_count)

    def restore(self, ckpt):
        """Load networks, optimizer moments and the step counter."""
        for name, module in self.nets.items():
            load_module(module, ckpt, name)
        for opt in (self.opt_g, self.opt_d):
            for pname, (m, v) in opt.state.items():
                try:
                    m[...] = ckpt.sections[pname + ".m"]
                    v[...] = ckpt.sections[pname + ".v"]
                except KeyError as exc:
                    raise ConfigError(f"checkpoint lacks optimizer state {exc.args[0]}") from None
            opt.t = ckpt.step
        self.step_count = ckpt.step

    def run(self, iterations=None, progress=None):
        """Train until ``iterations`` total steps (default from the config); returns the loss records."""
        end = self.total_iterations() if iterations is None else iterations
        c = self.config
        history = []
        log_file = open(c.log_path, "a") if c.log_path else None
        try:
            while self.step_count < end:
                rec = self.step()
                history.append(rec)
                if rec["step"] % c.log_interval == 0:
                    if log_file:
                        log_file.write(json.dumps(rec) + "\n")
                        log_file.flush()
                    if progress:
                        progress(f"step {rec['step']}/{end} total {rec['total']:.4f}")
                if c.checkpoint_out and c.checkpoint_interval and rec["step"] % c.checkpoint_interval == 0:
                    save_checkpoint(self.checkpoint(), c.checkpoint_out)
        finally:
            if log_file:
                log_file.close()
        if c.checkpoint_out:
            save_checkpoint(self.checkpoint(), c.checkpoint_out)
        return history


def train(config, foggy=None, clear=None, ssm=None, progress=None):
    """Run a full training job; returns ``(checkpoint, loss records)``."""
    trainer = Trainer(config, foggy, clear, ssm)
    if config.resume:
        trainer.restore(load_checkpoint(config.resume))
    history = trainer.run(progress=progress)
    return trainer.checkpoint(), history


# ---------------------------------------------------------------------------
# sky segmenter
# ---------------------------------------------------------------------------


def load_sky_dataset(root, size):
    """``root/{foggy,mask,clear}`` paired by stem -> (foggy, mask, clear) arrays."""
    root = Path(root)
    fog_files = _require_dir(root / "foggy", "data_dir/foggy")
    masks, clears = [], []
    for f in fog_files:
        m, c = root / "mask" / f.name, root / "clear" / f.name
        if not m.exists() or not c.exists():
            raise ConfigError(f"{f.name}: missing mask or clear image in {root}")
        masks.append(m)
        clears.append(c)
    mask = np.stack([resize(load_gray(m), size, size) for m in masks])[:, None] > 0.5
    return load_batch(fog_files, size), mask.astype(np.float32), load_batch(clears, size)


def ssm_loss(ssm, foggy, mask, clear, enhance_weight):
    enhanced, prob = ssm(Tensor(foggy))
    bce = L.binary_cross_entropy(prob, mask)
    d = enhanced - Tensor(clear)
    return bce + T.reduce(d * d, "mean") * enhance_weight, bce


def train_ssm(config, samples=None, progress=None):
    """Supervised sky segmentation; ``samples`` is (foggy, mask, clear) as signed/binary NCHW arrays."""
    if samples is None:
        if config.data_dir is None:
            raise ConfigError("field 'data_dir' is required")
        samples = load_sky_dataset(config.data_dir, config.image_size)
    foggy, mask, clear = (np.ascontiguousarray(a, dtype=np.float32) for a in samples)
    if len(foggy) == 0:
        raise ConfigError("sky dataset is empty")
    ssm = SkySegmenter(config.arch(), np.random.default_rng(config.seed))
    opt = Adam(list(ssm.named_parameters()), lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    n = len(foggy)
    iters = config.iterations if config.iterations is not None else config.epochs * math.ceil(n / config.batch_size)
    log_file = open(config.log_path, "a") if config.log_path else None
    history = []
    try:
        for k in range(iters):
            rng = np.random.default_rng([config.seed, k])
            idx = np.sort(rng.choice(n, min(config.batch_size, n), replace=False))
            opt.zero_grad()
            loss, bce = ssm_loss(ssm, foggy[idx], mask[idx], clear[idx], config.enhance_weight)
            if not np.isfinite(loss.item()):
                raise NumericError(f"step {k}: segmentation loss is not finite")
            T.backward(loss)
            opt.step()
            rec = {"step": k + 1, "loss": float(loss.item()), "bce": float(bce.item())}
            history.append(rec)
            if rec["step"] % config.log_interval == 0:
                if log_file:
                    log_file.write(json.dumps(rec) + "\n")
                if progress:
                    progress(f"step {rec['step']}/{iters} loss {rec['loss']:.4f}")
    finally:
        if log_file:
            log_file.close()
    ssm.eval()
    sections = [(ARCH_SECTION, _arch_array(config.arch()))] + module_sections("ssm", ssm)
    ckpt = Checkpoint(dict(sections), iters)
    if config.checkpoint_out:
        save_checkpoint(ckpt, config.checkpoint_out)
    return ckpt, history


def stderr_progress(msg):
    print(msg, file=sys.stderr, flush=True)
