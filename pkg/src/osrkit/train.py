"""Training loops: self-supervised pre-training, supervised fine-tuning,
and class-prototype extraction with the outlier threshold.

Pre-training optimises either the detransformation reconstruction loss
(encoder + decoder over the four rotated views) or the rotation-prediction
loss (encoder + 4-way head). Fine-tuning feeds unrotated images straight
into the encoder and optimises cross-entropy through a C-way head, or one
of the representation losses directly on the 6-d representation. Both
stages return a self-contained checkpoint.

Every random choice (init, dropout, shuffling, subsampling) derives from
`TrainConfig.seed`, so a (config, split) pair fully determines the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import losses
from .checkpoint import (
    Checkpoint,
    STAGE_FINETUNED,
    STAGE_PRETRAINED,
    save_checkpoint,
)
from .dataio import OpenSetSplit, prepare_batch
from .network import (
    EncoderConfig,
    HeadConfig,
    Sequential,
    build_decoder,
    build_encoder,
    build_head,
    config_fingerprint,
)
from .optim import Adam
from .transforms import expand_batch

PRETRAIN_METHODS = ("dtae", "rotnet", "none")
FINETUNE_LOSSES = ("ce", "ii", "triplet")


@dataclass
class TrainConfig:
    pretrain_method: str = "dtae"
    finetune_loss: str = "ce"
    pretrain_epochs: int = 4
    finetune_epochs: int = 3
    batch_size: int = 48
    lr: float = 0.001
    seed: int = 0
    margin: float = 0.2
    # per-run training subsample (class-proportional, drawn once from seed,
    # shared by both training stages); 0 means the full training partition
    train_limit: int = 3000
    # unit survival probability; 0.2 gives the literal keep=0.2 reading
    dropout_keep: float = 0.8
    use_batchnorm: bool = True

    def __post_init__(self):
        if self.pretrain_method not in PRETRAIN_METHODS:
            raise ValueError(f"unknown pretrain method {self.pretrain_method!r}")
        if self.finetune_loss not in FINETUNE_LOSSES:
            raise ValueError(f"unknown finetune loss {self.finetune_loss!r}")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.pretrain_epochs < 1 or self.finetune_epochs < 1:
            raise ValueError("epoch counts must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")


@dataclass
class PrototypeSet:
    """Per-class mean representations plus the outlier threshold."""

    mu: np.ndarray  # (C, repr_dim)
    threshold: float
    contamination: float = 0.01

    @property
    def num_classes(self) -> int:
        return self.mu.shape[0]

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "threshold": self.threshold,
                "contamination": self.contamination}

    @classmethod
    def from_dict(cls, d: dict) -> "PrototypeSet":
        return cls(mu=np.asarray(d["mu"], dtype=np.float64),
                   threshold=float(d["threshold"]),
                   contamination=float(d.get("contamination", 0.01)))


def derive_seed(*parts) -> int:
    """Stable child seed from heterogeneous parts (strings hashed bytewise)."""
    entropy = []
    for p in parts:
        if isinstance(p, str):
            entropy.extend(p.encode())
        else:
            entropy.append(int(p))
    return int(np.random.SeedSequence(entropy).generate_state(1, np.uint64)[0] >> 1)


def encoder_config_for_split(split: OpenSetSplit, config: TrainConfig) -> EncoderConfig:
    input_size = split.train_images.shape[1] + 4  # symmetric 2px padding
    return EncoderConfig(input_size=input_size,
                         dropout_keep=config.dropout_keep,
                         use_batchnorm=config.use_batchnorm)


def _subsample_indices(split: OpenSetSplit, config: TrainConfig) -> np.ndarray:
    """Class-proportional subsample of the training partition, drawn once."""
    n = len(split.train_labels)
    if config.train_limit <= 0 or config.train_limit >= n:
        return np.arange(n)
    rng = np.random.default_rng(derive_seed(config.seed, "subsample"))
    take_frac = config.train_limit / n
    chosen = []
    for c in range(split.num_known):
        idx = np.flatnonzero(split.train_labels == c)
        k = max(1, int(round(take_frac * len(idx))))
        chosen.append(rng.choice(idx, size=min(k, len(idx)), replace=False))
    out = np.sort(np.concatenate(chosen))
    return out


def _epoch_order(indices: np.ndarray, epoch_seed: int) -> np.ndarray:
    rng = np.random.default_rng(epoch_seed)
    return indices[rng.permutation(len(indices))]


def _stratified_order(indices: np.ndarray, labels: np.ndarray, epoch_seed: int) -> np.ndarray:
    """Round-robin class interleave so every batch window holds >= 2 classes."""
    rng = np.random.default_rng(epoch_seed)
    per_class = []
    for c in np.unique(labels[indices]):
        idx = indices[labels[indices] == c]
        per_class.append(idx[rng.permutation(len(idx))])
    rng.shuffle(per_class)
    longest = max(len(idx) for idx in per_class)
    order = []
    for i in range(longest):
        for idx in per_class:
            if i < len(idx):
                order.append(idx[i])
    return np.asarray(order, dtype=np.int64)


def _all_params(nets: dict[str, Sequential]) -> list[tuple[str, np.ndarray]]:
    out = []
    for net_name, net in nets.items():
        out.extend((f"{net_name}.{k}", p) for k, p in net.named_params())
    return out


def _all_grads(nets: dict[str, Sequential]) -> list[np.ndarray]:
    out = []
    for net in nets.values():
        out.extend(g for _, g in net.named_grads())
    return out


def _run_config_dict(split: OpenSetSplit, config: TrainConfig,
                     enc_cfg: EncoderConfig) -> dict:
    return {
        "encoder": asdict(enc_cfg),
        "train": asdict(config),
        "num_known": split.num_known,
        "known_classes": list(split.known_classes),
        "dataset": split.dataset_name,
        "split_seed": split.seed,
    }


def pretrain(split: OpenSetSplit, config: TrainConfig) -> Checkpoint:
    """Self-supervised pre-training pass; returns a 'pretrained' checkpoint
    holding the encoder plus the decoder (dtae) or rotation head (rotnet),
    with the per-epoch mean loss recorded in the metadata."""
    if config.pretrain_method == "none":
        raise ValueError("pretrain_method is 'none'; nothing to pre-train")
    enc_cfg = encoder_config_for_split(split, config)
    init_rng = np.random.default_rng(derive_seed(config.seed, "init"))
    drop_rng = np.random.default_rng(derive_seed(config.seed, "dropout", "pretrain"))
    encoder = build_encoder(enc_cfg, init_rng, dropout_rng=drop_rng)
    nets: dict[str, Sequential] = {"encoder": encoder}
    if config.pretrain_method == "dtae":
        nets["decoder"] = build_decoder(enc_cfg, init_rng)
    else:
        nets["rot_head"] = build_head(HeadConfig(enc_cfg.repr_dim, 4), init_rng)

    params = _all_params(nets)
    adam = Adam(params, lr=config.lr)
    indices = _subsample_indices(split, config)
    history = []
    for epoch in range(config.pretrain_epochs):
        order = _epoch_order(indices, derive_seed(config.seed, "pre-epoch", epoch))
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = prepare_batch(split, order[start:start + config.batch_size])
            tb = expand_batch(batch)
            for net in nets.values():
                net.zero_grad()
            z = encoder.forward(tb.pixels, training=True)
            if config.pretrain_method == "dtae":
                recon = nets["decoder"].forward(z, training=True)
                lv = losses.dtae_loss(batch.pixels, recon, tb.origin_index)
                dz = nets["decoder"].backward(lv.grad)
            else:
                logits = nets["rot_head"].forward(z, training=True)
                lv = losses.rotnet_loss(logits, tb.transform_ids)
                dz = nets["rot_head"].backward(lv.grad)
            encoder.backward(dz)
            adam.step(_all_grads(nets))
            total += lv.scalar * len(batch.labels)
            count += len(batch.labels)
        history.append(total / max(count, 1))

    cfg_dict = _run_config_dict(split, config, enc_cfg)
    return Checkpoint(
        stage=STAGE_PRETRAINED,
        config=cfg_dict,
        fingerprint=config_fingerprint(cfg_dict),
        arrays=_collect_arrays(nets, adam),
        meta={"stage": STAGE_PRETRAINED, "config": cfg_dict,
              "config_fingerprint": config_fingerprint(cfg_dict),
              "loss_history": history, "method": config.pretrain_method},
    )


def _collect_arrays(nets: dict[str, Sequential], adam: Adam | None) -> dict[str, np.ndarray]:
    arrays: dict[str, np.ndarray] = {}
    for net_name, net in nets.items():
        for key, arr in net.state_arrays().items():
            arrays[f"net.{net_name}.{key}"] = arr.copy()
    if adam is not None:
        arrays.update({k: v.copy() for k, v in adam.state_arrays().items()})
    return arrays


def rebuild_encoder(ckpt: Checkpoint, dropout_rng: np.random.Generator | None = None) -> Sequential:
    """Reconstruct the encoder network from a checkpoint's stored config and
    tensors; forward passes reproduce the checkpointed model exactly."""
    enc_cfg = EncoderConfig(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in ckpt.config["encoder"].items()})
    encoder = build_encoder(enc_cfg, np.random.default_rng(0), dropout_rng=dropout_rng)
    encoder.load_state_arrays(ckpt.net_arrays("encoder"))
    return encoder


def rebuild_head(ckpt: Checkpoint) -> Sequential:
    cfg = ckpt.config
    head = build_head(HeadConfig(cfg["encoder"]["repr_dim"], cfg["num_known"]),
                      np.random.default_rng(0))
    head.load_state_arrays(ckpt.net_arrays("head"))
    return head


def finetune(split: OpenSetSplit, config: TrainConfig,
             init: Checkpoint | None = None) -> Checkpoint:
    """Supervised fine-tuning; training images go straight into the encoder
    (no view expansion). With `init`, starts from the pre-trained encoder
    weights and discards the pre-training decoder or rotation head."""
    enc_cfg = encoder_config_for_split(split, config)
    init_rng = np.random.default_rng(derive_seed(config.seed, "init"))
    drop_rng = np.random.default_rng(derive_seed(config.seed, "dropout", "finetune"))
    encoder = build_encoder(enc_cfg, init_rng, dropout_rng=drop_rng)
    if init is not None:
        if init.stage != STAGE_PRETRAINED:
            raise ValueError(
                f"finetune init must be a 'pretrained' checkpoint, got {init.stage!r}")
        if config_fingerprint(init.config["encoder"]) != config_fingerprint(asdict(enc_cfg)):
            raise ValueError("init checkpoint encoder config does not match")
        encoder.load_state_arrays(init.net_arrays("encoder"))

    nets: dict[str, Sequential] = {"encoder": encoder}
    use_head = config.finetune_loss == "ce"
    if use_head:
        nets["head"] = build_head(HeadConfig(enc_cfg.repr_dim, split.num_known), init_rng)

    adam = Adam(_all_params(nets), lr=config.lr)
    indices = _subsample_indices(split, config)
    history = []
    for epoch in range(config.finetune_epochs):
        epoch_seed = derive_seed(config.seed, "ft-epoch", epoch)
        if use_head:
            order = _epoch_order(indices, epoch_seed)
        else:
            order = _stratified_order(indices, split.train_labels, epoch_seed)
        total, count = 0.0, 0
        for start in range(0, len(order), config.batch_size):
            batch = prepare_batch(split, order[start:start + config.batch_size])
            if not use_head and len(np.unique(batch.labels)) < 2:
                continue  # tail remainder of the stratified order
            for net in nets.values():
                net.zero_grad()
            z = encoder.forward(batch.pixels, training=True)
            if use_head:
                logits = nets["head"].forward(z, training=True)
                lv = losses.cross_entropy(logits, batch.labels)
                dz = nets["head"].backward(lv.grad)
            elif config.finetune_loss == "ii":
                lv = losses.ii_loss(z, batch.labels)
                dz = lv.grad
            else:
                lv = losses.triplet_loss(z, batch.labels, margin=config.margin)
                dz = lv.grad
            encoder.backward(dz)
            adam.step(_all_grads(nets))
            total += lv.scalar * len(batch.labels)
            count += len(batch.labels)
        history.append(total / max(count, 1))

    cfg_dict = _run_config_dict(split, config, enc_cfg)
    return Checkpoint(
        stage=STAGE_FINETUNED,
        config=cfg_dict,
        fingerprint=config_fingerprint(cfg_dict),
        arrays=_collect_arrays(nets, adam),
        meta={"stage": STAGE_FINETUNED, "config": cfg_dict,
              "config_fingerprint": config_fingerprint(cfg_dict),
              "loss_history": history, "loss": config.finetune_loss,
              "pretrained_init": init is not None},
    )


def encode_images(encoder: Sequential, split: OpenSetSplit, subset: str,
                  batch_size: int = 512) -> np.ndarray:
    """Inference-mode representations for a whole partition, in file order."""
    n = len(split.train_images if subset == "train" else split.test_images)
    out = []
    for start in range(0, n, batch_size):
        batch = prepare_batch(split, np.arange(start, min(start + batch_size, n)), subset)
        out.append(encoder.forward(batch.pixels, training=False))
    return np.concatenate(out) if out else np.zeros((0, 6), dtype=np.float32)


def nearest_rank_threshold(scores: np.ndarray, contamination: float) -> float:
    """Ascending nearest-rank percentile at q = 1 - contamination.

    rank = ceil(q * n) with a tiny epsilon guard against float products like
    0.99 * 100 landing a hair above the exact integer.
    """
    n = len(scores)
    if n == 0:
        raise ValueError("cannot compute a threshold from zero scores")
    q = 1.0 - contamination
    rank = int(math.ceil(q * n - 1e-9))
    rank = min(max(rank, 1), n)
    return float(np.sort(scores)[rank - 1])


def compute_prototypes(ckpt: Checkpoint, split: OpenSetSplit,
                       contamination: float = 0.01) -> PrototypeSet:
    """Class means of the training representations (inference mode) and the
    ascending nearest-rank percentile threshold on training outlier scores."""
    if ckpt.stage != STAGE_FINETUNED:
        raise ValueError(f"prototypes need a 'finetuned' checkpoint, got {ckpt.stage!r}")
    if not 0.0 < contamination < 1.0:
        raise ValueError("contamination must be in (0, 1)")
    encoder = rebuild_encoder(ckpt)
    reps = encode_images(encoder, split, "train")
    c = split.num_known
    mu = np.zeros((c, reps.shape[1]), dtype=np.float64)
    for i in range(c):
        members = reps[split.train_labels == i]
        if len(members) == 0:
            raise ValueError(f"known class {i} has zero training samples")
        mu[i] = members.mean(axis=0)
    d2 = ((reps[:, None, :].astype(np.float64) - mu[None, :, :]) ** 2).sum(axis=2)
    scores = d2.min(axis=1)
    threshold = nearest_rank_threshold(scores, contamination)
    return PrototypeSet(mu=mu, threshold=threshold, contamination=contamination)


def save_run_checkpoint(path, ckpt: Checkpoint) -> None:
    nets = sorted({k.split(".")[1] for k in ckpt.arrays if k.startswith("net.")})
    save_checkpoint(
        path, ckpt.stage, ckpt.config, ckpt.fingerprint,
        nets={n: {k[len(f"net.{n}."):]: v for k, v in ckpt.arrays.items()
                  if k.startswith(f"net.{n}.")} for n in nets},
        optimizer_arrays=ckpt.optimizer_arrays(),
        extra_meta={k: v for k, v in ckpt.meta.items()
                    if k not in ("stage", "config", "config_fingerprint", "nets")},
    )
