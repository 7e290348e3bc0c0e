"""Adversarial training of the pose generator: the optimizer recipe, a
resumable run state, the two-phase schedule and evaluation."""
import csv
import json
import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch

from . import checkpoint
from .errors import ConfigError, NumericError
from .losses import (FaceLossConfig, PerceptualConfig, adversarial_d, adversarial_g, face_identity,
                     l1_foreground, load_backend, perceptual, r1_penalty, total_generator_loss)
from .metrics import psnr, ssim
from .posegen import NOISE_MODES, GeneratorInputs, generate, generator_inputs

PHASES = ("foreground", "global")


@dataclass
class TrainConfig:
    phase: str = "foreground"
    epochs: int = 1
    batch_size: int = 1
    lr_base: float = 0.002
    g_ratio: float = 4 / 5
    d_ratio: float = 16 / 17
    g_reg_interval: int = 4
    d_reg_interval: int = 16
    r1_gamma: float = 1.0
    seed: int = 0
    noise_mode: str = "random"
    max_steps: Optional[int] = None
    use_adversarial: bool = True
    use_perceptual: bool = True
    use_face: bool = True

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"phase must be one of {PHASES}")
        if self.noise_mode not in NOISE_MODES:
            raise ConfigError(f"noise_mode must be one of {NOISE_MODES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.d_reg_interval < 1 or self.g_reg_interval < 1:
            raise ConfigError("regularization intervals must be >= 1")

    @classmethod
    def schedule(cls, fg_epochs=50, global_epochs=10, fg_batch=1, global_batch=8, **kw):
        """Foreground phase followed by the global finetuning phase."""
        return [cls(phase="foreground", epochs=fg_epochs, batch_size=fg_batch, **kw),
                cls(phase="global", epochs=global_epochs, batch_size=global_batch, **kw)]


def adam_hparams(lr_base, ratio):
    """Learning rate and betas adjusted for lazy regularization."""
    return lr_base * ratio, (0.0, 0.99 ** ratio)


def make_optimizers(G, D, cfg):
    g_lr, g_betas = adam_hparams(cfg.lr_base, cfg.g_ratio)
    d_lr, d_betas = adam_hparams(cfg.lr_base, cfg.d_ratio)
    return (torch.optim.Adam(G.parameters(), lr=g_lr, betas=g_betas),
            torch.optim.Adam(D.parameters(), lr=d_lr, betas=d_betas))


@dataclass
class TrainExample:
    inputs: GeneratorInputs
    I_trg: torch.Tensor  # (3, H, W)
    M_trg: torch.Tensor  # (1, H, W), human-parsing foreground of the target


def make_examples(samples, atlas, gcfg, coordnet=None, T_coords=None):
    """PairSamples -> TrainExamples; T_coords (one per sample) skip the coordnet."""
    out = []
    for i, s in enumerate(samples):
        T = None if T_coords is None else T_coords[i]
        inputs = generator_inputs(s.I_src, s.iuv_src, s.iuv_trg, atlas, gcfg, coordnet=coordnet, T_coord=T)
        out.append(TrainExample(inputs, torch.from_numpy(np.moveaxis(s.I_trg, -1, 0).copy()).float(),
                                torch.from_numpy(np.asarray(s.M_trg, dtype=np.float32)[None].copy())))
    return out


def collate(examples):
    return (GeneratorInputs.stack([e.inputs for e in examples]),
            torch.stack([e.I_trg for e in examples]), torch.stack([e.M_trg for e in examples]))


@dataclass
class RunState:
    step: int = 0
    epoch: int = 0
    d_steps: int = 0
    r1_steps: int = 0
    best_psnr: float = float("-inf")
    data_rng: Optional[torch.Tensor] = None
    noise_rng: Optional[torch.Tensor] = None

    @classmethod
    def fresh(cls, seed):
        return cls(data_rng=torch.Generator().manual_seed(seed).get_state(),
                   noise_rng=torch.Generator().manual_seed(seed + 1).get_state())

    def to_dict(self):
        return asdict(self)


def set_determinism(seed):
    """Seed the global generators and pin torch to deterministic kernels."""
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _gen(state_tensor):
    g = torch.Generator()
    g.set_state(state_tensor)
    return g


class Trainer:
    def __init__(self, G, D, cfg, perceptual_cfg=None, face_cfg=None, backend=None, log_dir=None):
        self.G, self.D, self.cfg = G, D, cfg
        self.perceptual_cfg = perceptual_cfg or PerceptualConfig()
        self.face_cfg = face_cfg or FaceLossConfig(enabled=cfg.use_face)
        self.backend = backend
        if cfg.use_perceptual and backend is None:
            self.backend = load_backend(self.perceptual_cfg.backend)
        self.opt_g, self.opt_d = make_optimizers(G, D, cfg)
        self.state = RunState.fresh(cfg.seed)
        self._noise = _gen(self.state.noise_rng)
        self.log_dir = log_dir
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)

    # -- one iteration ---------------------------------------------------------

    def _d_view(self, img, M_trg):
        # the foreground phase shows the discriminator foreground on a zero background
        return img * M_trg if self.cfg.phase == "foreground" else img

    def _check(self, losses):
        bad = {k: v for k, v in losses.items() if not np.isfinite(v)}
        if bad:
            if self.log_dir:
                with open(os.path.join(self.log_dir, "numeric_error.json"), "w") as f:
                    json.dump({"step": self.state.step, "losses": losses}, f)
            raise NumericError(f"non-finite loss at step {self.state.step}: {bad}")

    def d_step(self, inputs, I_trg, M_trg):
        cfg = self.cfg
        with torch.no_grad():
            fake = generate(self.G, inputs, cfg.noise_mode, self._noise)
        real = self._d_view(I_trg, M_trg)
        fake = self._d_view(fake, M_trg)
        self.opt_d.zero_grad(set_to_none=True)
        loss = adversarial_d(self.D(real, inputs.pose3), self.D(fake, inputs.pose3))
        self._check({"d_adv": loss.item()})
        loss.backward()
        self.opt_d.step()
        self.state.d_steps += 1
        out = {"d_adv": loss.item()}
        if self.state.d_steps % cfg.d_reg_interval == 0:
            self.opt_d.zero_grad(set_to_none=True)
            r1 = r1_penalty(self.D, real, inputs.pose3, gamma=cfg.r1_gamma)
            (r1 * cfg.d_reg_interval).backward()
            self.opt_d.step()
            self.state.r1_steps += 1
            out["r1"] = r1.item()
        return out

    def generator_losses(self, fake, inputs, I_trg, M_trg):
        cfg = self.cfg
        parts = {"l1": l1_foreground(fake, I_trg, M_trg)}
        parts["vgg"] = (perceptual(fake, I_trg, M_trg, self.perceptual_cfg, self.backend)
                        if cfg.use_perceptual else None)
        parts["face"] = face_identity(fake, I_trg, self.face_cfg) if cfg.use_face else None
        parts["adv"] = None
        if cfg.use_adversarial:
            parts["adv"] = adversarial_g(self.D(self._d_view(fake, M_trg), inputs.pose3))
        return parts

    def g_step(self, inputs, I_trg, M_trg):
        self.D.requires_grad_(False)
        try:
            self.opt_g.zero_grad(set_to_none=True)
            fake = generate(self.G, inputs, self.cfg.noise_mode, self._noise)
            parts = self.generator_losses(fake, inputs, I_trg, M_trg)
            total = total_generator_loss(parts)
            out = {k: v.item() for k, v in parts.items() if v is not None}
            out["g_total"] = total.item()
            self._check(out)
            total.backward()
            self.opt_g.step()
        finally:
            self.D.requires_grad_(True)
        return out

    def train_step(self, batch):
        inputs, I_trg, M_trg = batch
        self.G.train()
        self.D.train()
        losses = {}
        if self.cfg.use_adversarial:
            losses.update(self.d_step(inputs, I_trg, M_trg))
        losses.update(self.g_step(inputs, I_trg, M_trg))
        self.state.step += 1
        self.state.noise_rng = self._noise.get_state()
        losses["step"] = self.state.step
        self._log(losses)
        return losses

    def _log(self, record):
        if self.log_dir:
            with open(os.path.join(self.log_dir, "train_log.jsonl"), "a") as f:
                f.write(json.dumps(record) + "\n")

    # -- epochs ----------------------------------------------------------------

    def epoch_batches(self, examples):
        g = _gen(self.state.data_rng)
        order = torch.randperm(len(examples), generator=g).tolist()
        self.state.data_rng = g.get_state()
        bs = self.cfg.batch_size
        return [collate([examples[i] for i in order[k:k + bs]]) for k in range(0, len(order), bs)]

    def train_phase(self, examples, eval_examples=None, checkpoint_dir=None, on_step=None):
        """Run the configured epochs (or until max_steps). Checkpoints every
        epoch plus the best foreground PSNR seen on ``eval_examples``."""
        cfg = self.cfg
        while self.state.epoch < cfg.epochs:
            for batch in self.epoch_batches(examples):
                if cfg.max_steps is not None and self.state.step >= cfg.max_steps:
                    return self.state
                losses = self.train_step(batch)
                if on_step:
                    on_step(self, losses)
            self.state.epoch += 1
            if checkpoint_dir:
                os.makedirs(checkpoint_dir, exist_ok=True)
                self.save(os.path.join(checkpoint_dir, f"epoch{self.state.epoch:03d}.pt"))
                if eval_examples:
                    summary = evaluate(self.G, eval_examples)["summary"]
                    if summary["psnr"] > self.state.best_psnr:
                        self.state.best_psnr = summary["psnr"]
                        self.save(os.path.join(checkpoint_dir, "best.pt"))
        return self.state

    # -- persistence -----------------------------------------------------------

    def save(self, path):
        checkpoint.save(path, "trainer", self.cfg, {"generator": self.G, "discriminator": self.D},
                        extra={"generator_config": asdict(self.G.cfg),
                               "opt_g": self.opt_g.state_dict(), "opt_d": self.opt_d.state_dict(),
                               "run_state": self.state.to_dict()})

    def load(self, path):
        payload = checkpoint.load(path, "trainer")
        self.G.load_state_dict(payload["state"]["generator"])
        self.D.load_state_dict(payload["state"]["discriminator"])
        extra = payload["extra"]
        self.opt_g.load_state_dict(extra["opt_g"])
        self.opt_d.load_state_dict(extra["opt_d"])
        self.state = RunState(**extra["run_state"])
        self._noise = _gen(self.state.noise_rng)
        return self


def to_unit(img):
    """(3, H, W) tensor in [-1, 1] -> HxWx3 float64 array in [0, 1]."""
    return ((img.detach().double().clamp(-1, 1) + 1) / 2).permute(1, 2, 0).numpy()


def evaluate(G, examples, noise_mode="zero", extra_metrics=()):
    """Per-pair foreground PSNR / SSIM. Embedding metrics come from plugins;
    without one they are reported as unavailable."""
    G.eval()
    rows = []
    with torch.no_grad():
        for i, ex in enumerate(examples):
            inputs, I_trg, M_trg = collate([ex])
            fake = generate(G, inputs, noise_mode)
            a, b = to_unit(fake[0]), to_unit(I_trg[0])
            m = M_trg[0, 0].double().numpy()
            rows.append({"pair": i, "psnr": psnr(a, b, m), "ssim": ssim(a, b, m)})
    summary = {k: float(np.mean([r[k] for r in rows])) if rows else float("nan")
               for k in ("psnr", "ssim")}
    plugins = {getattr(p, "name", type(p).__name__): p for p in extra_metrics}
    for name in ("fid", "lpips"):
        summary[name] = "unavailable" if name not in plugins else None
    for name, metric in plugins.items():
        summary[name] = metric(G, examples)
    return {"rows": rows, "summary": summary}


def write_metrics(result, csv_path=None, jsonl_path=None):
    rows = result["rows"]
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["pair", "psnr", "ssim"])
            w.writeheader()
            w.writerows(rows)
    if jsonl_path:
        with open(jsonl_path, "w") as f:
            for r in rows:
                f.write(json.dumps(r) + "\n")
            f.write(json.dumps({"summary": result["summary"]}) + "\n")
