"""Toy encoder-decoder transformer with additive-mask self-attention.

Encoder self-attention applies the knowledge-tree mask in every layer;
the decoder uses causal self-attention and unrestricted (pad-aware)
cross-attention.  Layers are pre-norm.  Training uses decoupled weight
decay with linear warmup and is deterministic given the config seed.
"""

from __future__ import annotations

import copy
import csv
import json
import math
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import NumericError, TrainingDivergedError
from .maskgen import NEG_SENTINEL
from .prompts import BOS_ID, PAD_ID
from .records import CompiledSample


@dataclass
class ModelConfig:
    vocab_size: int
    layers_enc: int = 2
    layers_dec: int = 2
    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    max_len: int = 512
    dropout: float = 0.0
    use_positions: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")


@dataclass
class OptimizerConfig:
    peak_lr: float = 3e-4
    warmup_steps: int = 50
    weight_decay: float = 0.01
    batch_size: int = 32
    epochs: int = 30


@dataclass
class Batch:
    enc_ids: torch.Tensor  # [B, L] long
    enc_mask: torch.Tensor  # [B, L, L] additive
    dec_input: torch.Tensor  # [B, T] long
    dec_target: torch.Tensor  # [B, T] long
    cross_mask: torch.Tensor  # [B, 1, L] additive
    target_real: torch.Tensor  # [B, T] bool

    def to(self, dtype) -> "Batch":
        return Batch(
            enc_ids=self.enc_ids,
            enc_mask=self.enc_mask.to(dtype),
            dec_input=self.dec_input,
            dec_target=self.dec_target,
            cross_mask=self.cross_mask.to(dtype),
            target_real=self.target_real,
        )


def make_batch(
    samples: list[CompiledSample],
    use_tree_mask: bool = True,
    mask_cross: bool = False,
    dtype=torch.float32,
) -> Batch:
    """Pad samples to a batch; padding is invisible to and from real tokens.

    Padded positions keep their diagonal visible so no softmax row is
    fully masked.  With `mask_cross`, cross-attention keys are restricted
    to the encoder tokens visible from the mask token's node.
    """
    batch_size = len(samples)
    enc_len = max(len(s.token_ids) for s in samples)
    tgt_len = max(len(s.target_ids()) for s in samples)

    enc_ids = torch.full((batch_size, enc_len), PAD_ID, dtype=torch.long)
    enc_mask = torch.full((batch_size, enc_len, enc_len), NEG_SENTINEL, dtype=dtype)
    cross_mask = torch.full((batch_size, 1, enc_len), NEG_SENTINEL, dtype=dtype)
    dec_input = torch.full((batch_size, tgt_len), PAD_ID, dtype=torch.long)
    dec_target = torch.full((batch_size, tgt_len), PAD_ID, dtype=torch.long)

    for b, sample in enumerate(samples):
        length = len(sample.token_ids)
        enc_ids[b, :length] = torch.tensor(sample.token_ids, dtype=torch.long)
        if use_tree_mask:
            vis = sample.mask.visible()
        else:
            vis = np.ones((length, length), dtype=bool)
        enc_mask[b, :length, :length] = torch.from_numpy(
            np.where(vis, 0.0, NEG_SENTINEL)
        ).to(dtype)
        if length < enc_len:
            pad_idx = torch.arange(length, enc_len)
            enc_mask[b, pad_idx, pad_idx] = 0.0
        if mask_cross:
            row = sample.mask.visible()[sample.mask_token_index]
            cross_mask[b, 0, :length] = torch.from_numpy(
                np.where(row, 0.0, NEG_SENTINEL)
            ).to(dtype)
        else:
            cross_mask[b, 0, :length] = 0.0

        target = sample.target_ids()
        dec_input[b, 0] = BOS_ID
        dec_input[b, 1 : len(target)] = torch.tensor(target[:-1], dtype=torch.long)
        dec_target[b, : len(target)] = torch.tensor(target, dtype=torch.long)

    return Batch(
        enc_ids=enc_ids,
        enc_mask=enc_mask,
        dec_input=dec_input,
        dec_target=dec_target,
        cross_mask=cross_mask,
        target_real=dec_target != PAD_ID,
    )


def attention(query, key, value, mask=None):
    """Scaled dot-product attention with an additive mask.

    Returns (output, weights).  The mask is added after score scaling so
    the 0/-sentinel convention is independent of the head dimension; a
    sentinel entry underflows to exactly zero weight after softmax.
    """
    if query.shape[-1] != key.shape[-1]:
        raise ValueError(f"query dim {query.shape[-1]} != key dim {key.shape[-1]}")
    if key.shape[-2] != value.shape[-2]:
        raise ValueError(f"key count {key.shape[-2]} != value count {value.shape[-2]}")
    d_k = query.shape[-1]
    scores = query @ key.transpose(-2, -1) / math.sqrt(d_k)
    if mask is not None:
        if mask.shape[-1] != key.shape[-2]:
            raise ValueError(f"mask key dim {mask.shape[-1]} != key count {key.shape[-2]}")
        scores = scores + mask
    weights = torch.softmax(scores, dim=-1)
    return weights @ value, weights


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.d_head = d_model // heads
        self.w_q = nn.Linear(d_model, d_model, bias=False)
        self.w_k = nn.Linear(d_model, d_model, bias=False)
        self.w_v = nn.Linear(d_model, d_model, bias=False)
        self.w_o = nn.Linear(d_model, d_model, bias=False)

    def forward(self, query_in, kv_in, mask=None):
        b, n_q, d_model = query_in.shape
        n_k = kv_in.shape[1]
        q = self.w_q(query_in).view(b, n_q, self.heads, self.d_head).transpose(1, 2)
        k = self.w_k(kv_in).view(b, n_k, self.heads, self.d_head).transpose(1, 2)
        v = self.w_v(kv_in).view(b, n_k, self.heads, self.d_head).transpose(1, 2)
        if mask is not None:
            mask = mask.unsqueeze(1)  # broadcast over heads
        out, _ = attention(q, k, v, mask)
        out = out.transpose(1, 2).contiguous().view(b, n_q, d_model)
        return self.w_o(out)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float):
        super().__init__()
        self.lin1 = nn.Linear(d_model, d_ff)
        self.lin2 = nn.Linear(d_ff, d_model)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        return self.lin2(self.drop(torch.relu(self.lin1(x))))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        h = self.norm1(x)
        x = x + self.drop(self.attn(h, h, mask))
        h = self.norm2(x)
        return x + self.drop(self.ff(h))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads)
        self.ff = FeedForward(cfg.d_model, cfg.d_ff, cfg.dropout)
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, memory, self_mask, cross_mask):
        h = self.norm1(x)
        x = x + self.drop(self.self_attn(h, h, self_mask))
        h = self.norm2(x)
        x = x + self.drop(self.cross_attn(h, memory, cross_mask))
        h = self.norm3(x)
        return x + self.drop(self.ff(h))


class Seq2SeqTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.token_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.enc_layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.layers_enc))
        self.dec_layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.layers_dec))
        self.enc_norm = nn.LayerNorm(cfg.d_model)
        self.dec_norm = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.drop = nn.Dropout(cfg.dropout)

    def _embed(self, ids):
        x = self.token_emb(ids)
        if self.cfg.use_positions:
            positions = torch.arange(ids.shape[1], device=ids.device)
            x = x + self.pos_emb(positions)[None]
        return self.drop(x)

    def encode(self, enc_ids, enc_mask):
        x = self._embed(enc_ids)
        for layer in self.enc_layers:
            x = layer(x, enc_mask)
        return self.enc_norm(x)

    def decode(self, dec_ids, memory, cross_mask):
        x = self._embed(dec_ids)
        t = dec_ids.shape[1]
        causal = torch.triu(
            torch.full((t, t), NEG_SENTINEL, dtype=memory.dtype, device=x.device), diagonal=1
        )[None]
        for layer in self.dec_layers:
            x = layer(x, memory, causal, cross_mask)
        return self.lm_head(self.dec_norm(x))

    def forward(self, enc_ids, enc_mask, dec_ids, cross_mask):
        memory = self.encode(enc_ids, enc_mask)
        return self.decode(dec_ids, memory, cross_mask)


@dataclass
class ModelState:
    config: ModelConfig
    model: Seq2SeqTransformer
    optimizer: torch.optim.AdamW | None = None
    optim_config: OptimizerConfig | None = None
    step: int = 0

    @classmethod
    def initialize(cls, config: ModelConfig, optim_config: OptimizerConfig | None = None):
        torch.manual_seed(config.seed)
        model = Seq2SeqTransformer(config)
        optimizer = None
        if optim_config is not None:
            optimizer = _build_optimizer(model, optim_config)
        return cls(config=config, model=model, optimizer=optimizer, optim_config=optim_config)

    def snapshot(self):
        return {
            "model": copy.deepcopy(self.model.state_dict()),
            "optimizer": copy.deepcopy(self.optimizer.state_dict()) if self.optimizer else None,
            "step": self.step,
        }

    def restore(self, snap) -> None:
        self.model.load_state_dict(snap["model"])
        if self.optimizer is not None and snap["optimizer"] is not None:
            self.optimizer.load_state_dict(snap["optimizer"])
        self.step = snap["step"]


def _build_optimizer(model, optim_config: OptimizerConfig):
    return torch.optim.AdamW(
        model.parameters(), lr=optim_config.peak_lr, weight_decay=optim_config.weight_decay
    )


def _model_loss(model, batch: Batch):
    logits = model(batch.enc_ids, batch.enc_mask, batch.dec_input, batch.cross_mask)
    log_probs = torch.log_softmax(logits, dim=-1)
    nll = -log_probs.gather(-1, batch.dec_target.unsqueeze(-1)).squeeze(-1)
    loss = nll[batch.target_real].mean()
    return loss, logits, nll


def forward_loss(state: ModelState, batch: Batch):
    """Mean negative log-likelihood over non-pad target tokens, plus logits."""
    loss, logits, nll = _model_loss(state.model, batch)
    if not torch.isfinite(loss):
        masked = torch.where(batch.target_real, nll, torch.zeros_like(nll))
        bad = torch.nonzero(~torch.isfinite(masked).all(dim=1)).flatten().tolist()
        raise NumericError(f"non-finite loss for batch indices {bad}")
    return loss, logits


def train(
    state: ModelState,
    dataset: list[CompiledSample],
    optim_config: OptimizerConfig | None = None,
    use_tree_mask: bool = True,
    mask_cross: bool = False,
    checkpoint_path=None,
    curve_path=None,
    threads: int = 1,
):
    """Run the training loop; returns (state, per-epoch mean losses).

    Batch order is a fresh permutation per epoch seeded by (config seed,
    epoch index), so identical configs give bit-identical loss curves.
    A rolling checkpoint is written at every epoch end; on divergence the
    last epoch-end state is restored before raising.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    torch.set_num_threads(max(1, threads))
    if optim_config is None:
        optim_config = state.optim_config or OptimizerConfig()
    if state.optimizer is None:
        state.optimizer = _build_optimizer(state.model, optim_config)
        state.optim_config = optim_config

    torch.manual_seed(state.config.seed)
    state.model.train()
    curve: list[float] = []
    writer = None
    curve_file = None
    if curve_path is not None:
        curve_file = open(curve_path, "w", newline="", encoding="utf-8")
        writer = csv.writer(curve_file)
        writer.writerow(["epoch", "step", "loss", "lr"])

    last_good = state.snapshot()
    try:
        for epoch in range(optim_config.epochs):
            order = np.random.default_rng([state.config.seed, epoch]).permutation(len(dataset))
            epoch_losses = []
            for start in range(0, len(dataset), optim_config.batch_size):
                chunk = [dataset[i] for i in order[start : start + optim_config.batch_size]]
                batch = make_batch(chunk, use_tree_mask=use_tree_mask, mask_cross=mask_cross)
                lr = optim_config.peak_lr * min(
                    1.0, (state.step + 1) / max(1, optim_config.warmup_steps)
                )
                for group in state.optimizer.param_groups:
                    group["lr"] = lr
                state.optimizer.zero_grad()
                loss, _, _ = _model_loss(state.model, batch)
                if not torch.isfinite(loss):
                    state.restore(last_good)
                    raise TrainingDivergedError(epoch, state.step)
                loss.backward()
                state.optimizer.step()
                state.step += 1
                loss_val = float(loss.detach())
                epoch_losses.append(loss_val)
                if writer is not None:
                    writer.writerow([epoch, state.step, repr(loss_val), repr(lr)])
            curve.append(float(np.mean(epoch_losses)))
            last_good = state.snapshot()
            if checkpoint_path is not None:
                save_checkpoint(state, checkpoint_path)
    finally:
        if curve_file is not None:
            curve_file.close()
    state.model.eval()
    return state, curve


def finite_difference_max_rel(module, loss_fn, epsilon: float, samples: int, seed: int = 0) -> float:
    """Max relative error of autograd vs central differences on a module.

    `loss_fn(module)` must be a pure scalar function of the module's
    parameters.  Coordinates are sampled without replacement across all
    parameter tensors.
    """
    loss = loss_fn(module)
    module.zero_grad()
    loss.backward()

    params = list(module.parameters())
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(samples, total), replace=False)

    max_rel = 0.0
    with torch.no_grad():
        for coord in coords:
            tensor_idx = int(np.searchsorted(offsets, coord, side="right") - 1)
            flat_idx = int(coord - offsets[tensor_idx])
            param = params[tensor_idx]
            flat = param.view(-1)
            original = flat[flat_idx].item()
            analytic = param.grad.view(-1)[flat_idx].item()

            flat[flat_idx] = original + epsilon
            loss_plus = _detached(loss_fn, module)
            flat[flat_idx] = original - epsilon
            loss_minus = _detached(loss_fn, module)
            flat[flat_idx] = original

            numeric = (loss_plus - loss_minus) / (2 * epsilon)
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            max_rel = max(max_rel, rel)
    return max_rel


def _detached(loss_fn, module) -> float:
    return float(loss_fn(module).detach())


def grad_check(
    state: ModelState, batch: Batch, epsilon: float = 1e-5, samples: int = 100, seed: int = 0
) -> float:
    """Max relative error of autograd vs central finite differences.

    Runs on a float64 copy in eval mode so difference quotients are not
    dominated by working-precision noise.
    """
    model = copy.deepcopy(state.model).double().eval()
    batch64 = batch.to(torch.float64)

    def loss_fn(module):
        loss, _, _ = _model_loss(module, batch64)
        return loss

    return finite_difference_max_rel(model, loss_fn, epsilon, samples, seed)


# Checkpoint format: magic, version, header JSON (configs + step), then
# named tensors as (name, dtype, shape, row-major little-endian bytes).
_MAGIC = b"KPCK"
_VERSION = 1


def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _unpack_str(buf: bytes, off: int):
    (length,) = struct.unpack_from("<I", buf, off)
    off += 4
    return buf[off : off + length].decode("utf-8"), off + length


def _named_tensors(state: ModelState) -> dict[str, torch.Tensor]:
    tensors = {f"model.{name}": t for name, t in state.model.state_dict().items()}
    if state.optimizer is not None:
        names = [name for name, _ in state.model.named_parameters()]
        params = [p for _, p in state.model.named_parameters()]
        for name, param in zip(names, params):
            opt_state = state.optimizer.state.get(param)
            if not opt_state:
                continue
            for key in ("step", "exp_avg", "exp_avg_sq"):
                value = opt_state[key]
                if not isinstance(value, torch.Tensor):
                    value = torch.tensor(float(value))
                tensors[f"optim.{name}.{key}"] = value
    return tensors


def save_checkpoint(state: ModelState, path) -> None:
    header = {
        "version": _VERSION,
        "model_config": asdict(state.config),
        "optim_config": asdict(state.optim_config) if state.optim_config else None,
        "step": state.step,
    }
    header_raw = json.dumps(header, sort_keys=True).encode("utf-8")
    tensors = _named_tensors(state)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(header_raw)))
        fh.write(header_raw)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            array = tensors[name].detach().cpu().numpy()
            fh.write(_pack_str(name))
            fh.write(_pack_str(array.dtype.name))
            fh.write(struct.pack("<I", array.ndim))
            for dim in array.shape:
                fh.write(struct.pack("<Q", dim))
            raw = np.ascontiguousarray(array).tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def load_checkpoint(path) -> ModelState:
    """Reconstruct a ModelState (with optimizer moments) bit-exactly."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (header_len,) = struct.unpack_from("<Q", buf, 8)
    off = 16
    header = json.loads(buf[off : off + header_len].decode("utf-8"))
    off += header_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4

    tensors: dict[str, torch.Tensor] = {}
    for _ in range(count):
        name, off = _unpack_str(buf, off)
        dtype_name, off = _unpack_str(buf, off)
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<Q", buf, off)
            shape.append(dim)
            off += 8
        (nbytes,) = struct.unpack_from("<Q", buf, off)
        off += 8
        array = np.frombuffer(buf[off : off + nbytes], dtype=np.dtype(dtype_name)).reshape(shape)
        tensors[name] = torch.from_numpy(array.copy())
        off += nbytes

    config = ModelConfig(**header["model_config"])
    optim_config = (
        OptimizerConfig(**header["optim_config"]) if header.get("optim_config") else None
    )
    torch.manual_seed(config.seed)
    model = Seq2SeqTransformer(config)
    model_sd = {
        name[len("model.") :]: t for name, t in tensors.items() if name.startswith("model.")
    }
    sample_dtype = next(iter(model_sd.values())).dtype
    if sample_dtype != torch.float32:
        model = model.to(sample_dtype)
    model.load_state_dict(model_sd)
    model.eval()

    state = ModelState(config=config, model=model, optim_config=optim_config, step=header["step"])
    if optim_config is not None and any(name.startswith("optim.") for name in tensors):
        state.optimizer = _build_optimizer(model, optim_config)
        for name, param in model.named_parameters():
            key = f"optim.{name}.exp_avg"
            if key in tensors:
                state.optimizer.state[param] = {
                    "step": tensors[f"optim.{name}.step"],
                    "exp_avg": tensors[f"optim.{name}.exp_avg"],
                    "exp_avg_sq": tensors[f"optim.{name}.exp_avg_sq"],
                }
    return state
