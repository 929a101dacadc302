"""Optimization: the L1 reconstruction recipe, ablation training and checkpoints."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .config import RunConfig, parse_config
from .data import LABEL_NAMES, ImageDataset, TrainBatch, make_batch, sample_mask
from .errors import ConfigurationError, DatasetIOError, InvalidArgumentError, TrainingDivergedError
from .model import SAIRModel
from .sample import IGNORE_LABEL
from .semantic import clip_text_anchors, random_text_anchors

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sair-checkpoint/1"


def lr_at(epoch: int, base_lr: float, halve_every: int = 100) -> float:
    return base_lr * 0.5 ** (epoch // halve_every)


def derive_seeds(master: int) -> dict[str, int]:
    """Independent integer seeds for each random stream of a run."""
    children = np.random.SeedSequence(master).spawn(5)
    names = ("data", "mask", "init", "coords", "anchors")
    return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}


@dataclass
class TrainState:
    model: SAIRModel
    optimizer: torch.optim.Optimizer
    config: RunConfig
    step: int = 0
    epoch: int = 0
    lr: float = 1e-4
    loss_history: list = field(default_factory=list)  # L1 reconstruction term per step
    aux_history: list = field(default_factory=list)


def make_optimizer(model: SAIRModel, config: RunConfig) -> torch.optim.Adam:
    o = config.optim
    params = model.trainable_parameters()
    if not params:
        raise ConfigurationError("model has no trainable parameters")
    return torch.optim.Adam(params, lr=o.lr, betas=tuple(o.betas), weight_decay=o.weight_decay)


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return (pred - target).abs().mean()


def semantic_alignment_loss(model: SAIRModel, fields, batch: TrainBatch) -> torch.Tensor:
    """``1 - cos`` between the completed field and the encoder's view of the clean image."""
    H, W = batch.images.shape[-2:]
    with torch.no_grad():
        clean = model.sem_encoder(batch.ground_truth)
        teacher = F.interpolate(clean, size=(H, W), mode="bilinear", align_corners=False)
    return (1.0 - F.cosine_similarity(fields.sem, teacher, dim=1)).mean()


def compute_loss(model: SAIRModel, batch: TrainBatch, aux_weight: float = 0.0):
    """Total loss, its L1 term and the optional semantic alignment term."""
    pred, fields = model(batch.images, batch.masks, batch.coords, return_fields=True)
    rec = l1_loss(pred, batch.targets)
    loss, aux = rec, None
    if aux_weight > 0 and model.sir is not None:
        aux = semantic_alignment_loss(model, fields, batch)
        loss = rec + aux_weight * aux
    return loss, rec, aux


def train_step(state: TrainState, batch: TrainBatch, dump_dir: Optional[Path] = None) -> TrainState:
    """One Adam update on the mean L1 color error over the batch's queries."""
    model, opt = state.model, state.optimizer
    cfg = state.config.optim
    model.train()
    for group in opt.param_groups:
        group["lr"] = state.lr
    loss, l1, aux = compute_loss(model, batch, cfg.semantic_aux_weight)
    if not torch.isfinite(loss):
        dump = None
        if dump_dir is not None:
            dump = Path(dump_dir) / f"diverged-step{state.step:07d}.pt"
            dump.parent.mkdir(parents=True, exist_ok=True)
            torch.save({"batch": batch.__dict__, "model": model.state_dict(), "step": state.step}, dump)
        raise TrainingDivergedError(f"non-finite loss {loss.item()} at step {state.step}", dump)
    opt.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), cfg.grad_clip)
    opt.step()
    state.step += 1
    state.loss_history.append(float(l1.detach()))
    if aux is not None:
        state.aux_history.append(float(aux.detach()))
    return state


# -- surrogate alignment ---------------------------------------------------


def align_surrogate_encoder(encoder, anchors: torch.Tensor, dataset: ImageDataset, epochs: int, lr: float,
                            batch_size: int, temperature: float, seed: int) -> list[float]:
    """Train a surrogate encoder so its embeddings score categories against ``anchors``.

    Plays the role of the contrastive pretraining a real CLIP encoder
    arrives with; it uses clean images and their label maps.
    """
    opt = torch.optim.Adam(encoder.parameters(), lr=lr)
    anchors = F.normalize(anchors, dim=-1)
    history = []
    encoder.train()
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
        total = 0.0
        for start in range(0, len(order), batch_size):
            samples = [dataset[int(i)] for i in order[start:start + batch_size]]
            if any(s.labels is None for s in samples):
                raise ConfigurationError("surrogate alignment needs labeled images")
            images = torch.stack([s.target for s in samples])
            labels = torch.stack([s.labels for s in samples])
            feats = F.interpolate(encoder(images), size=images.shape[-2:], mode="bilinear", align_corners=False)
            logits = torch.einsum("bchw,lc->blhw", F.normalize(feats, dim=1), anchors) / temperature
            loss = F.cross_entropy(logits, labels, ignore_index=IGNORE_LABEL)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(samples)
        history.append(total / len(order))
    encoder.eval()
    return history


def make_text_anchors(config: RunConfig, channels: int) -> torch.Tensor:
    kind = config.dataset.kind
    names = config.dataset.label_names or LABEL_NAMES[kind]
    if config.model.semantic_variant == "clip-adapter":
        return clip_text_anchors(config.model.clip_text_weights or config.model.clip_weights, names)
    return random_text_anchors(len(names), channels, derive_seeds(config.seed)["anchors"])


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": state.config.to_dict(),
        "config_hash": state.config.hash(),
        "model": state.model.state_dict(),
        "text_anchors": state.model.text_anchors,
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "epoch": state.epoch,
        "lr": state.lr,
        "loss_history": list(state.loss_history),
        "aux_history": list(state.aux_history),
        "rng": {"torch": torch.get_rng_state(), "numpy": np.random.get_state()},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DatasetIOError("checkpoint not found", path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    return payload


def model_from_checkpoint(payload_or_path) -> tuple[SAIRModel, RunConfig]:
    payload = payload_or_path if isinstance(payload_or_path, dict) else read_checkpoint(payload_or_path)
    config = parse_config(payload["config"], source="checkpoint")
    model = SAIRModel(config.model.spec())
    if payload.get("text_anchors") is not None:
        model.set_text_anchors(payload["text_anchors"])
    model.load_state_dict(payload["model"])
    model.eval()
    return model, config


def load_state(path, config: RunConfig) -> TrainState:
    payload = read_checkpoint(path)
    if payload["config_hash"] != config.hash():
        raise ConfigurationError(
            f"cannot resume from {path}: checkpoint config hash {payload['config_hash'][:10]} "
            f"differs from {config.hash()[:10]}"
        )
    model, _ = model_from_checkpoint(payload)
    opt = make_optimizer(model, config)
    opt.load_state_dict(payload["optimizer"])
    torch.set_rng_state(payload["rng"]["torch"])
    np.random.set_state(payload["rng"]["numpy"])
    return TrainState(model, opt, config, payload["step"], payload["epoch"], payload["lr"],
                      list(payload["loss_history"]), list(payload.get("aux_history", [])))


# -- training loop ---------------------------------------------------------


def init_state(config: RunConfig) -> TrainState:
    seeds = derive_seeds(config.seed)
    torch.manual_seed(seeds["init"])
    model = SAIRModel(config.model.spec(), seed=seeds["init"])
    if model.sem_encoder is not None:
        model.set_text_anchors(make_text_anchors(config, model.sem_channels))
        pre = config.semantic_pretrain
        if pre.epochs > 0 and config.model.semantic_variant == "surrogate":
            train_set = ImageDataset(config.dataset.spec("train", config.seed))
            frozen = model.spec.freeze_semantic_encoder
            for p in model.sem_encoder.parameters():
                p.requires_grad_(True)
            hist = align_surrogate_encoder(model.sem_encoder, model.text_anchors, train_set, pre.epochs, pre.lr,
                                           pre.batch_size, pre.temperature, seeds["init"])
            log.info("surrogate alignment loss %.4f -> %.4f", hist[0], hist[-1])
            if frozen:
                model.sem_encoder.freeze()
    opt = make_optimizer(model, config)
    return TrainState(model, opt, config, lr=lr_at(0, config.optim.lr, config.optim.halve_every))


def epoch_batches(config: RunConfig, dataset: ImageDataset, epoch: int):
    """Deterministic batches for one epoch: shuffled order, fresh masks, fresh queries."""
    seeds = derive_seeds(config.seed)
    o = config.optim
    order = np.random.default_rng([seeds["data"], epoch]).permutation(len(dataset))
    bucket_rng = np.random.default_rng([seeds["mask"], epoch])
    coord_rng = np.random.default_rng([seeds["coords"], epoch])
    buckets = config.masks.train_buckets
    H = W = config.dataset.image_size
    query_count = min(o.query_count, H * W)
    for start in range(0, len(order), o.batch_size):
        idx = [int(i) for i in order[start:start + o.batch_size]]
        samples = [dataset[i] for i in idx]
        masks = []
        for i in idx:
            bucket = buckets[int(bucket_rng.integers(len(buckets)))]
            masks.append(sample_mask(config.masks.source(bucket, seeds["mask"]), H, W, key=(epoch, i)))
        yield make_batch(samples, masks, query_count, coord_rng)


def _truncate_logs(step_log: Path, epoch_log: Path, epoch: int):
    # drop records written after the checkpoint being resumed
    for p in (step_log, epoch_log):
        if p.exists():
            keep = [l for l in p.read_text().splitlines() if l.strip() and json.loads(l)["epoch"] < epoch]
            p.write_text("".join(l + "\n" for l in keep))


def _append_jsonl(path: Path, record: dict):
    with path.open("a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")


def run_training(config: RunConfig, resume=None, max_epochs: Optional[int] = None,
                 on_epoch: Optional[Callable[[TrainState, float], None]] = None) -> Path:
    """Train to ``config.optim.epochs`` (or ``max_epochs``) and return the final checkpoint path.

    Each epoch's batches depend only on ``(seed, epoch)``, so resuming from an
    epoch checkpoint replays the same loss trace as an uninterrupted run.
    """
    out = config.output_path()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    step_log = out / "metrics.jsonl"
    epoch_log = out / "epochs.jsonl"
    if resume:
        state = load_state(resume, config)
        _truncate_logs(step_log, epoch_log, state.epoch)
    else:
        for p in (step_log, epoch_log):
            p.unlink(missing_ok=True)
        state = init_state(config)
    dataset = ImageDataset(config.dataset.spec("train", config.seed))
    if len(dataset) == 0:
        raise InvalidArgumentError("training set is empty")
    o = config.optim
    last_epoch = o.epochs if max_epochs is None else min(o.epochs, max_epochs)
    log.info("training %s (%s) from epoch %d to %d", config.name, config.hash()[:10], state.epoch, last_epoch)
    while state.epoch < last_epoch:
        epoch = state.epoch
        state.lr = lr_at(epoch, o.lr, o.halve_every)
        start = len(state.loss_history)
        for batch in epoch_batches(config, dataset, epoch):
            train_step(state, batch, dump_dir=out)
            rec = {"step": state.step, "epoch": epoch, "loss": state.loss_history[-1], "lr": state.lr}
            if len(state.aux_history) == state.step:
                rec["aux"] = state.aux_history[-1]
            _append_jsonl(step_log, rec)
        mean_loss = float(np.mean(state.loss_history[start:]))
        state.epoch += 1
        _append_jsonl(epoch_log, {"epoch": epoch, "loss": mean_loss, "lr": state.lr, "step": state.step})
        if on_epoch is not None:
            on_epoch(state, mean_loss)
        if state.epoch % o.checkpoint_every == 0 or state.epoch == last_epoch:
            save_checkpoint(state, out / f"ckpt-epoch{state.epoch:04d}.pt")
    final = save_checkpoint(state, out / ("final.pt" if state.epoch >= o.epochs else "last.pt"))
    return final


def epoch_losses(run_dir) -> list[float]:
    path = Path(run_dir) / "epochs.jsonl"
    return [json.loads(line)["loss"] for line in path.read_text().splitlines() if line.strip()]
