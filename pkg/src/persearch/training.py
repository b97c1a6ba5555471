"""Two-stage training: dual-encoder fine-tuning, then inversion networks
against frozen encoders.

Both loops are deterministic for a fixed seed: batch order comes from a pure
sampler, all parameter init is generator-seeded, and no stochastic layers are
used at any point.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import Dataset, sample_batch
from .encoders import (EncoderStateError, FeatureCache, FingerprintMismatchError,
                       ToyDualEncoder, ToyEncoderConfig, _injected_batch,
                       load_image)
from .hashing import parameter_hash
from .losses import (EmbeddingBatch, LossConfig, MaskedPrediction, cmpm_loss,
                     id_loss, irr_loss, itc_loss, stage1_objective, tinet_losses)
from .tinet import TINet, TINetConfig, save_checkpoint, tinet_init


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    steps_per_epoch: int | None = None
    batch_size: int = 128
    base_lr: float = 1e-5
    head_lr: float | None = None     # random-init modules; defaults to 5x base
    warmup_epochs: int = 5
    tau: float = 0.02
    epsilon: float = 1e-8
    seed: int = 0
    identity_cap: int | None = 2
    irr_norm: str = "paper"
    mask_rate: float = 0.15
    matching_loss: str = "cmpm"      # "cmpm" | "itc" (ablation comparator)

    def __post_init__(self):
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.base_lr <= 0 or (self.head_lr is not None and self.head_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.matching_loss not in ("cmpm", "itc"):
            raise ValueError(f"unknown matching_loss {self.matching_loss!r}")

    @property
    def effective_head_lr(self) -> float:
        return self.head_lr if self.head_lr is not None else 5 * self.base_lr

    def loss_config(self) -> LossConfig:
        return LossConfig(tau=self.tau, epsilon=self.epsilon)


def lr_at(cfg: TrainConfig, epoch: float) -> float:
    """Linear warmup from base/10, then cosine decay from base to 0."""
    if epoch < 0 or epoch > cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs}]")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (0.1 + 0.9 * epoch / cfg.warmup_epochs)
    span = cfg.epochs - cfg.warmup_epochs
    t = (epoch - cfg.warmup_epochs) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class TraceRow:
    step: int
    epoch: float
    loss: float
    lr: float


def write_trace(rows: list[TraceRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,epoch,loss,lr\n")
        for r in rows:
            fh.write(f"{r.step},{r.epoch!r},{r.loss!r},{r.lr!r}\n")


def _step_rng(seed: int, epoch: int, step: int, tag: str) -> np.random.Generator:
    key = hashlib.sha256(f"{tag}:{seed}:{epoch}:{step}".encode()).digest()[:8]
    return np.random.default_rng(int.from_bytes(key, "little"))


class IdentityHead(nn.Module):
    """Shared linear identity classifier over both modalities (stage 1 only)."""

    def __init__(self, d_embed: int, n_classes: int, seed: int = 0):
        super().__init__()
        self.linear = nn.Linear(d_embed, n_classes)
        gen = torch.Generator().manual_seed(seed)
        bound = 1.0 / (d_embed ** 0.5)
        with torch.no_grad():
            self.linear.weight.uniform_(-bound, bound, generator=gen)
            self.linear.bias.zero_()

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.linear(feats)


class CrossModalMaskHead(nn.Module):
    """Single cross-attention block: masked text tokens attend to visual
    patches, followed by a vocabulary classifier."""

    def __init__(self, d_token: int, d_embed: int, vocab_size: int, seed: int = 0):
        super().__init__()
        self.query = nn.Linear(d_token, d_embed)
        self.key = nn.Linear(d_embed, d_embed)
        self.value = nn.Linear(d_embed, d_embed)
        self.classifier = nn.Linear(d_embed, vocab_size)
        gen = torch.Generator().manual_seed(seed)
        for mod in (self.query, self.key, self.value, self.classifier):
            bound = 1.0 / (mod.weight.shape[1] ** 0.5)
            with torch.no_grad():
                mod.weight.uniform_(-bound, bound, generator=gen)
                mod.bias.zero_()

    def forward(self, token_embs: torch.Tensor, patches: torch.Tensor,
                positions: list[tuple[int, int]]) -> torch.Tensor:
        q = self.query(token_embs)
        k = self.key(patches)
        v = self.value(patches)
        attn = torch.softmax(q @ k.transpose(1, 2) / q.shape[-1] ** 0.5, dim=-1)
        ctx = attn @ v
        rows = torch.stack([ctx[b, p] for b, p in positions])
        return self.classifier(rows)


def apply_token_masking(token_ids: np.ndarray, valid_lengths: np.ndarray,
                        tokenizer, rng: np.random.Generator,
                        mask_rate: float = 0.15):
    """15%% masking with the 80/10/10 mask/random/keep replacement policy.

    Only word positions (between BOS and EOS) are maskable; at least one
    position is always selected.
    """
    masked = token_ids.copy()
    positions: list[tuple[int, int]] = []
    targets: list[int] = []
    candidates = [(b, p) for b in range(token_ids.shape[0])
                  for p in range(1, int(valid_lengths[b]) - 1)]
    if not candidates:
        raise ValueError("no maskable token positions in batch")
    selected = [c for c in candidates if rng.random() < mask_rate]
    if not selected:
        selected = [candidates[int(rng.integers(len(candidates)))]]
    for b, p in selected:
        targets.append(int(token_ids[b, p]))
        roll = rng.random()
        if roll < 0.8:
            masked[b, p] = tokenizer.mask_id
        elif roll < 0.9:
            masked[b, p] = int(rng.integers(tokenizer.vocab_size))
        positions.append((b, p))
    return masked, positions, np.array(targets, dtype=np.int64)


def _one_hot(targets: np.ndarray, vocab_size: int,
             dtype: torch.dtype) -> torch.Tensor:
    out = torch.zeros(len(targets), vocab_size, dtype=dtype)
    out[torch.arange(len(targets)), torch.as_tensor(targets)] = 1.0
    return out


@dataclass
class Stage1Result:
    encoder: ToyDualEncoder
    id_head: IdentityHead
    mask_head: CrossModalMaskHead
    trace: list[TraceRow]
    identity_index: dict[str, int]


class _ImageCellCache:
    """Decoded+preprocessed pixels, keyed by image id (no augmentation, so
    reuse across steps is exact)."""

    def __init__(self, encoder):
        self.encoder = encoder
        self._cells: dict[str, torch.Tensor] = {}

    def get(self, record) -> torch.Tensor:
        if record.image_id not in self._cells:
            self._cells[record.image_id] = self.encoder.preprocess_image(
                load_image(record.path))
        return self._cells[record.image_id]


def _resolve_steps(cfg: TrainConfig, dataset_size: int) -> int:
    if cfg.steps_per_epoch is not None:
        return cfg.steps_per_epoch
    return max(1, math.ceil(dataset_size / cfg.batch_size))


def run_stage1(encoder: ToyDualEncoder, dataset: Dataset, cfg: TrainConfig,
               out_dir: str | Path | None = None) -> Stage1Result:
    """Fine-tune the dual encoders on image-caption data.

    Optimizes the summed objective (masked-token + projection matching +
    identity cross-entropy) over all encoder and head parameters, with the
    warmup/cosine schedule. Aborts on a non-finite loss.
    """
    if encoder.frozen:
        raise EncoderStateError("stage 1 requires trainable encoders")
    if dataset.kind != "image-caption":
        raise ValueError("stage 1 needs an image-caption dataset")
    torch.set_num_threads(1)

    identities = sorted({r.identity_id for r in dataset.records})
    identity_index = {ident: i for i, ident in enumerate(identities)}
    id_head = IdentityHead(encoder.d_embed, len(identities), seed=cfg.seed + 1)
    mask_head = CrossModalMaskHead(encoder.d_token, encoder.d_embed,
                                   encoder.tokenizer.vocab_size, seed=cfg.seed + 2)
    optimizer = torch.optim.Adam([
        {"params": list(encoder.parameters()), "lr": cfg.base_lr},
        {"params": list(id_head.parameters()) + list(mask_head.parameters()),
         "lr": cfg.effective_head_lr},
    ])
    base_lrs = [g["lr"] for g in optimizer.param_groups]

    steps_per_epoch = _resolve_steps(cfg, len(dataset))
    loss_cfg = cfg.loss_config()
    cells = _ImageCellCache(encoder)
    trace: list[TraceRow] = []
    step_global = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        for step in range(steps_per_epoch):
            epoch_float = step_global / steps_per_epoch
            lr = lr_at(cfg, epoch_float)
            for group, base in zip(optimizer.param_groups, base_lrs):
                group["lr"] = base * (lr / cfg.base_lr)

            batch = sample_batch(dataset, cfg.batch_size, cfg.seed,
                                 epoch=epoch, step=step,
                                 identity_cap=cfg.identity_cap)
            image_cells = torch.stack([cells.get(r) for r in batch.images])
            f_v, patches = encoder.forward_image_cells(image_cells)
            sequences = [encoder.tokenizer.tokenize(c.text) for c in batch.captions]
            f_t = encoder.encode_token_batch(sequences)

            emb = EmbeddingBatch(identity_ids=batch.identity_ids, f_v=f_v, f_t=f_t)
            if cfg.matching_loss == "cmpm":
                matching = cmpm_loss(emb, cfg=loss_cfg)
            else:
                matching = itc_loss(emb, cfg=loss_cfg)

            class_ids = [identity_index[i] for i in batch.identity_ids]
            identity = id_loss(id_head(f_v), id_head(f_t), class_ids)

            token_ids = np.array([s.token_ids for s in sequences], dtype=np.int64)
            valid = np.array([s.valid_length for s in sequences])
            rng = _step_rng(cfg.seed, epoch, step, "mask")
            masked_ids, positions, target_ids = apply_token_masking(
                token_ids, valid, encoder.tokenizer, rng, cfg.mask_rate)
            token_embs = encoder.token_embeddings(torch.from_numpy(masked_ids))
            logits = mask_head(token_embs, patches, positions)
            pred = MaskedPrediction(
                logits=logits,
                targets=_one_hot(target_ids, encoder.tokenizer.vocab_size,
                                 logits.dtype),
                masked_positions=tuple(positions))
            reasoning = irr_loss(pred, cfg.irr_norm)

            total = stage1_objective(reasoning, matching, identity)
            if not torch.isfinite(total):
                raise RuntimeError(
                    f"non-finite loss at step {step_global}: "
                    f"irr={reasoning.item()} match={matching.item()} "
                    f"id={identity.item()}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            trace.append(TraceRow(step_global, epoch_float, total.item(), lr))
            step_global += 1
        if out_dir is not None:
            save_stage1_checkpoint(
                encoder, id_head, mask_head, out_dir / f"epoch_{epoch:03d}.pt")
    if out_dir is not None:
        write_trace(trace, out_dir / "trace.csv")
    return Stage1Result(encoder, id_head, mask_head, trace, identity_index)


def save_stage1_checkpoint(encoder: ToyDualEncoder, id_head, mask_head,
                           path: str | Path) -> None:
    torch.save({
        "encoder_config": encoder.config.to_json(),
        "encoder_state": encoder.state_dict(),
        "id_head_state": id_head.state_dict(),
        "mask_head_state": mask_head.state_dict(),
    }, path)


def load_encoder_checkpoint(path: str | Path) -> ToyDualEncoder:
    obj = torch.load(path, weights_only=True)
    encoder = ToyDualEncoder(ToyEncoderConfig.from_json(obj["encoder_config"]))
    encoder.load_state_dict(obj["encoder_state"])
    return encoder


@dataclass
class Stage2Result:
    networks: list[TINet]
    traces: list[list[TraceRow]] = field(default_factory=list)


def run_stage2(encoder, dataset: Dataset, cache: FeatureCache | None,
               tinet_cfgs: list[TINetConfig], modes: list[str],
               cfg: TrainConfig, out_dir: str | Path | None = None) -> Stage2Result:
    """Train one or more inversion networks against frozen dual encoders.

    Each network is optimized independently on the same batch stream, so
    training k networks in one pass equals k separate runs. Image/text
    features come from the cache when given (the composed features cannot be
    cached: they need a text-encoder forward of the injected sequence every
    step). Encoder parameters are hash-checked before and after.
    """
    if not encoder.frozen:
        raise EncoderStateError("stage 2 requires frozen encoders")
    if len(tinet_cfgs) != len(modes):
        raise ValueError("one mode per inversion network")
    for mode in modes:
        if mode not in ("Vis", "Text"):
            raise ValueError(f"unknown mode {mode!r}")
    if cache is not None and cache.fingerprint != encoder.fingerprint():
        raise FingerprintMismatchError("cache was built by a different encoder")
    needs_text = any(m == "Text" for m in modes)
    if needs_text:
        if cache is not None and cache.texts is None:
            raise ValueError("Text mode requires cached text features")
        if cache is None and dataset.kind != "image-caption":
            raise ValueError("Text mode requires captions")
    torch.set_num_threads(1)

    hash_before = parameter_hash(encoder)
    nets = []
    for tc in tinet_cfgs:
        if tc.d_in != encoder.d_embed or tc.d_out != encoder.d_token:
            raise ValueError(
                f"inversion dims ({tc.d_in}->{tc.d_out}) must be "
                f"({encoder.d_embed}->{encoder.d_token})")
        nets.append(tinet_init(tc).bind_encoder(encoder))
    optimizers = [torch.optim.Adam(n.parameters(), lr=cfg.base_lr) for n in nets]

    steps_per_epoch = _resolve_steps(cfg, len(dataset))
    loss_cfg = cfg.loss_config()
    cells = _ImageCellCache(encoder) if cache is None else None
    traces: list[list[TraceRow]] = [[] for _ in nets]
    step_global = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        for step in range(steps_per_epoch):
            epoch_float = step_global / steps_per_epoch
            lr = lr_at(cfg, epoch_float)
            batch = sample_batch(dataset, cfg.batch_size, cfg.seed,
                                 epoch=epoch, step=step, identity_cap=None)
            if cache is not None:
                f_v = torch.from_numpy(np.stack(
                    [cache.image_vector(r.image_id) for r in batch.images]))
                f_t = None
                if needs_text:
                    f_t = torch.from_numpy(np.stack(
                        [cache.text_vector(r.image_id) for r in batch.images]))
            else:
                image_cells = torch.stack([cells.get(r) for r in batch.images])
                with torch.no_grad():
                    f_v, _ = encoder.forward_image_cells(image_cells)
                f_t = None
                if needs_text:
                    f_t = encoder.encode_text_batch(
                        [c.text for c in batch.captions])

            for i, (net, opt, mode) in enumerate(zip(nets, optimizers, modes)):
                for group in opt.param_groups:
                    group["lr"] = lr
                pseudo = net(f_v)
                vectors, valid, _ = _injected_batch(
                    encoder, "train", pseudo, [""] * len(batch))
                f_c = encoder.encode_embedding_batch(vectors, valid)
                emb = EmbeddingBatch(identity_ids=batch.identity_ids,
                                     f_v=f_v, f_t=f_t, f_c=f_c)
                loss = tinet_losses(emb, cfg=loss_cfg, mode=mode)
                if not torch.isfinite(loss):
                    raise RuntimeError(
                        f"non-finite {mode} loss at step {step_global}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                traces[i].append(TraceRow(step_global, epoch_float,
                                          loss.item(), lr))
            step_global += 1

    if parameter_hash(encoder) != hash_before:
        raise RuntimeError("encoder parameters changed during stage 2")
    if out_dir is not None:
        for i, (net, mode) in enumerate(zip(nets, modes)):
            save_checkpoint(net, out_dir / f"tinet_{i}_{mode.lower()}.npz",
                            metadata={"mode": mode, "seed": cfg.seed})
            write_trace(traces[i], out_dir / f"trace_{i}_{mode.lower()}.csv")
    return Stage2Result(networks=nets, traces=traces)
