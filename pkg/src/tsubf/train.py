"""Adam optimizer and the patch-based training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .losses import LossConfig, loss_components, one_hot
from .metrics import dsc, hd95, smoothness_score
from .network import ModelConfig, TSUBFNet, load_checkpoint, save_checkpoint, sliding_window_infer
from .tensor import Tape, Tensor
from .volumes import VolumeSample, extract_patch

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "sample", "total", "dice_ce", "sobel")


class TrainingError(RuntimeError):
    pass


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params, lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 3e-5):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def state_dict(self) -> dict:
        return {"t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        for dst, src in zip(self.m, state["m"]):
            dst[...] = src
        for dst, src in zip(self.v, state["v"]):
            dst[...] = src


@dataclass
class TrainConfig:
    steps: int = 500
    lr: float = 0.01
    weight_decay: float = 3e-5
    lr_schedule: str = "poly"  # "poly" (exponent 0.9) or "constant"
    val_every: int = 50
    seed: int = 0
    patch_mode: str = "random-foreground"


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return cfg.lr * (1 - step / max(cfg.steps, 1)) ** 0.9


def predict(model: TSUBFNet, image: np.ndarray) -> np.ndarray:
    return sliding_window_infer(model, image)


def validate(model: TSUBFNet, samples: list[VolumeSample]) -> dict:
    """Mean foreground DSC / HD95 (voxels) / smoothness over ``samples``."""
    dscs, hds, smooth = [], [], []
    for s in samples:
        probs = predict(model, s.image)
        pred = probs.argmax(axis=-1)
        for c in range(1, model.cfg.num_classes):
            dscs.append(dsc(s.label, pred, c))
            hds.append(hd95(s.label, pred, c, units="voxel"))
        smooth.append(smoothness_score(probs))
    return {"dsc": float(np.mean(dscs)), "hd95": float(np.mean(hds)), "smoothness": float(np.mean(smooth))}


def _nan_diagnostic(tape: Tape) -> str:
    node = tape.first_nonfinite()
    if node is None:
        return "loss is not finite but every recorded tensor is"
    return f"first non-finite tensor produced by op {node.op!r} (tensor id {node.output_id}, shape {node.output.shape})"


def train(model: TSUBFNet, train_samples: list[VolumeSample], val_samples: list[VolumeSample],
          out_dir, tcfg: TrainConfig = TrainConfig(), loss_cfg: LossConfig | None = None,
          resume: str | Path | None = None) -> dict:
    """Train ``model`` in place; writes ``losses.csv``, ``val.csv`` and ``best/``/``last/`` checkpoints.

    Returns a summary with the best validation metrics.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_cfg = loss_cfg or LossConfig(lam=model.cfg.lambda_sobel)
    if not train_samples:
        raise TrainingError("no training samples")
    opt = Adam(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    start = 0
    best = {"dsc": -1.0, "step": 0}
    if resume is not None:
        load_checkpoint(resume, into=model)
        state = model.checkpoint_state
        start = int(state.get("step", 0))
        opt_path = Path(resume) / "optimizer.npz"
        if opt_path.exists():
            data = np.load(opt_path)
            n = len(opt.m)
            opt.load_state_dict({"t": data["t"], "m": [data[f"m{i}"] for i in range(n)],
                                 "v": [data[f"v{i}"] for i in range(n)]})
        best = state.get("best", best)
    rng = np.random.default_rng(tcfg.seed)
    if resume is not None and "rng" in state:
        rng.bit_generator.state = state["rng"]
    mode = "a" if start else "w"
    loss_f = open(out_dir / "losses.csv", mode, newline="")
    val_f = open(out_dir / "val.csv", mode, newline="")
    loss_w, val_w = csv.writer(loss_f, lineterminator="\n"), csv.writer(val_f, lineterminator="\n")
    if not start:
        loss_w.writerow(LOSS_COLUMNS)
        val_w.writerow(("step", "dsc", "hd95", "smoothness"))
    dt = model.cfg.np_dtype
    size = model.cfg.patch_size
    ncls = model.cfg.num_classes
    history = []
    try:
        for step in range(start + 1, tcfg.steps + 1):
            idx = int(rng.integers(len(train_samples)))
            patch = extract_patch(train_samples[idx], size=size, mode=tcfg.patch_mode, rng=rng)
            y = one_hot(patch.label, ncls, dtype=dt)
            model.zero_grad()
            with Tape() as tape:
                probs = model(Tensor(patch.image[..., None], dtype=dt))
                total, base, sob = loss_components(y, probs, loss_cfg)
            if not math.isfinite(total.item()):
                raise TrainingError(f"non-finite loss at step {step}: {_nan_diagnostic(tape)}")
            tape.backward(total)
            del tape
            opt.step(learning_rate(tcfg, step - 1))
            loss_w.writerow((step, idx, repr(total.item()), repr(base.item()), repr(sob.item())))
            history.append(total.item())
            if step % tcfg.val_every == 0 or step == tcfg.steps:
                loss_f.flush()
                metrics = validate(model, val_samples) if val_samples else {"dsc": float("nan"), "hd95": float("nan"), "smoothness": float("nan")}
                val_w.writerow((step, repr(metrics["dsc"]), repr(metrics["hd95"]), repr(metrics["smoothness"])))
                val_f.flush()
                log.info("step %d loss %.4f val dsc %.4f hd95 %.2f", step, total.item(), metrics["dsc"], metrics["hd95"])
                state = {"step": step, "metrics": metrics, "rng": rng.bit_generator.state}
                if metrics["dsc"] > best["dsc"] or not val_samples:
                    best = {**metrics, "step": step}
                    _save(model, opt, out_dir / "best", {**state, "best": best})
                _save(model, opt, out_dir / "last", {**state, "best": best})
    finally:
        loss_f.close()
        val_f.close()
    return {"best": best, "final_loss": history[-1] if history else None, "steps": tcfg.steps,
            "train_config": asdict(tcfg)}


def _save(model: TSUBFNet, opt: Adam, path: Path, state: dict) -> None:
    save_checkpoint(model, path, state)
    arrays = {"t": np.array(opt.t)}
    arrays.update({f"m{i}": m for i, m in enumerate(opt.m)})
    arrays.update({f"v{i}": v for i, v in enumerate(opt.v)})
    np.savez(path / "optimizer.npz", **arrays)


__all__ = ["Adam", "ModelConfig", "TrainConfig", "TrainingError", "learning_rate", "train", "validate"]
