"""Training loop, Adam optimizer, checkpointing, evaluation, and the
oversample-factor sweep harness.

Batching note: gradients for a batch are accumulated sample by sample
(each sample's loss scaled by 1/batch_size before its backward pass), so
the optimizer sees exactly the batch-mean gradient without padding or
masking; with a single-sample autodiff core this is the zero-overhead
equivalent of padded batching.

Checkpoint file layout (all little-endian):

    bytes 0-3   magic b"PGRC"
    bytes 4-7   format version (uint32)
    bytes 8-15  header length in bytes (uint64)
    header      UTF-8 JSON, sorted keys: model config, symbols and their
                hash, epoch, rng state, optimizer scalars, and the ordered
                tensor manifest (name, shape, role)
    payload     raw float64 C-order tensor data, manifest order

Save -> load -> save is byte-identical; loading rejects a wrong magic,
version, or symbol-table hash.
"""

import json
import os
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import model as model_mod
from .autodiff import backward, log_softmax, scale
from .ctc import InfeasibleLength, best_path_decode, ctc_loss, min_ctc_length
from .data import SymbolTable, build_symbol_table
from .imageprep import augment, read_bilevel, resize_page
from .metrics import DEFAULT_Z, cer

CKPT_MAGIC = b"PGRC"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = None  # derived from batches per epoch when None
    eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    augment_params: object = None  # imageprep.AugmentParams or None
    curriculum: str = None  # path to a line checkpoint
    L: int = 1
    grad_clip: float = 5.0
    early_stop_cer: float = None  # stop once validation CER <= this (percent)
    z: float = DEFAULT_Z

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.beta1 < 1:
            raise ValueError(f"beta1 must lie in (0, 1), got {self.beta1}")
        if self.beta2 is not None and not 0 < self.beta2 < 1:
            raise ValueError(f"beta2 must lie in (0, 1), got {self.beta2}")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def init_adam_state(params):
    return {
        "t": 0,
        "m": {name: np.zeros_like(p.data) for name, p in params.items()},
        "v": {name: np.zeros_like(p.data) for name, p in params.items()},
    }


def adam_step(params, state, lr, beta1, beta2, eps=1e-8):
    """Bias-corrected Adam update in place; missing grads count as zero."""
    state["t"] += 1
    t = state["t"]
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        if g is not None and not np.isfinite(g).all():
            raise FloatingPointError(f"gradient for {name!r} contains NaN/Inf")
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        v *= beta2
        if g is not None:
            m += (1.0 - beta1) * g
            v += (1.0 - beta2) * (g * g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def compute_beta2(batches_per_epoch):
    """Second-moment decay sized to the corpus: the moving average spans
    roughly one epoch, clamped so 0.9 <= beta2 <= 0.999."""
    if batches_per_epoch < 1:
        raise ValueError("need at least one batch per epoch")
    return min(max(1.0 - 1.0 / batches_per_epoch, 0.9), 0.999)


def clip_gradients(params, max_norm):
    """Scale all gradients so the global L2 norm is at most max_norm."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = total**0.5
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    config: object  # ModelConfig
    tensors: dict  # name -> float64 ndarray (params, then buffers)
    roles: dict  # name -> "param" | "buffer" | "adam_m" | "adam_v"
    symbols: str
    epoch: int
    rng_state: dict
    adam_t: int

    @property
    def symbol_hash(self):
        return SymbolTable(self.symbols).content_hash

    def save(self, path):
        manifest = [
            {"name": name, "shape": list(arr.shape), "role": self.roles[name]}
            for name, arr in self.tensors.items()
        ]
        header = {
            "adam_t": self.adam_t,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "rng_state": self.rng_state,
            "symbol_hash": self.symbol_hash,
            "symbols": self.symbols,
            "tensors": manifest,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<I", CKPT_VERSION))
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for arr in self.tensors.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, expected_symbol_hash=None):
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CKPT_MAGIC:
                raise ValueError(f"{path}: not a checkpoint (magic {magic!r})")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != CKPT_VERSION:
                raise ValueError(
                    f"{path}: checkpoint format {version} unsupported "
                    f"(expected {CKPT_VERSION})"
                )
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            tensors = {}
            roles = {}
            for entry in header["tensors"]:
                shape = tuple(entry["shape"])
                count = int(np.prod(shape)) if shape else 1
                buf = fh.read(count * 8)
                tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
                roles[entry["name"]] = entry["role"]
        if header["symbol_hash"] != SymbolTable(header["symbols"]).content_hash:
            raise ValueError(f"{path}: symbol table does not match its stored hash")
        if expected_symbol_hash is not None and header["symbol_hash"] != expected_symbol_hash:
            raise ValueError(
                f"{path}: symbol-table hash mismatch "
                f"(checkpoint {header['symbol_hash'][:12]}..., "
                f"expected {expected_symbol_hash[:12]}...)"
            )
        config = model_mod.ModelConfig.from_dict(header["config"])
        return cls(
            config=config, tensors=tensors, roles=roles,
            symbols=header["symbols"], epoch=header["epoch"],
            rng_state=header["rng_state"], adam_t=header["adam_t"],
        )

    @property
    def table(self):
        return SymbolTable(self.symbols)


def make_checkpoint(model, table, adam_state, epoch, rng):
    tensors = {}
    roles = {}
    for name, p in model.named_parameters().items():
        tensors[name] = p.data.copy()
        roles[name] = "param"
    for name, buf in model.named_buffers().items():
        tensors[name] = buf.copy()
        roles[name] = "buffer"
    for name, arr in adam_state["m"].items():
        tensors[f"adam_m.{name}"] = arr.copy()
        roles[f"adam_m.{name}"] = "adam_m"
    for name, arr in adam_state["v"].items():
        tensors[f"adam_v.{name}"] = arr.copy()
        roles[f"adam_v.{name}"] = "adam_v"
    return Checkpoint(
        config=model.config, tensors=tensors, roles=roles,
        symbols=table.symbols, epoch=epoch,
        rng_state=rng.bit_generator.state, adam_t=adam_state["t"],
    )


def model_from_checkpoint(ckpt):
    """Rebuild the model (and optimizer state) a checkpoint describes."""
    net = model_mod.PageModel(ckpt.config, np.random.default_rng(0))
    params = net.named_parameters()
    buffers = net.named_buffers()
    adam_state = init_adam_state(params)
    adam_state["t"] = ckpt.adam_t
    for name, arr in ckpt.tensors.items():
        role = ckpt.roles[name]
        if role == "param":
            params[name].data[...] = arr
        elif role == "buffer":
            buffers[name][...] = arr
        elif role == "adam_m":
            adam_state["m"][name.split(".", 1)[1]][...] = arr
        elif role == "adam_v":
            adam_state["v"][name.split(".", 1)[1]][...] = arr
    return net, adam_state


# ---------------------------------------------------------------------------
# sample loading
# ---------------------------------------------------------------------------

@dataclass
class LoadedSample:
    image: object  # Tensor [1, 64*L, W]
    target: list
    transcript: str
    name: str


def load_samples(manifest, entries, table, l_factor):
    """Image tensors plus encoded targets for the given manifest entries."""
    out = []
    for e in entries:
        img = read_bilevel(manifest.image_path(e))
        tensor = resize_page(img, l_factor)
        out.append(LoadedSample(
            image=tensor, target=table.encode(e.transcript),
            transcript=e.transcript, name=e.image,
        ))
    return out


def feasibility_split(samples, config):
    """Partition samples by the CTC length constraint T >= min length."""
    feasible, rejected = [], []
    for s in samples:
        _, h, w = s.image.data.shape
        h_out, w_out = model_mod.output_lengths(config, h, w)
        if h_out * w_out >= min_ctc_length(s.target):
            feasible.append(s)
        else:
            rejected.append((s.name, h_out * w_out, min_ctc_length(s.target)))
    return feasible, rejected


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list = field(default_factory=list)
    rejected: list = field(default_factory=list)
    epochs_run: int = 0


def _decode_sample(net, sample, table):
    logits = net.forward(sample.image, training=False)
    ids = best_path_decode(log_softmax(logits), blank=table.blank_id)
    return table.decode(ids)


def evaluate_samples(net, samples, table, z=DEFAULT_Z):
    """Greedy decode every sample; returns (CerReport, [(ref, hyp), ...])."""
    if net.config.n_symbols != table.n_symbols:
        raise ValueError(
            f"model expects {net.config.n_symbols} symbols but the table "
            f"has {table.n_symbols}"
        )
    pairs = [(s.transcript, _decode_sample(net, s, table)) for s in samples]
    report = cer([r for r, _ in pairs], [h for _, h in pairs], z=z)
    return report, pairs


def evaluate(net, manifest, table, z=DEFAULT_Z, split=None, kind=None,
             dump_path=None):
    """CER over a manifest (optionally one split/kind) plus a decode dump."""
    entries = manifest.entries
    if split is not None:
        entries = [e for e in entries if e.split == split]
    if kind is not None:
        entries = [e for e in entries if e.kind == kind]
    if not entries:
        raise ValueError(f"no manifest entries for split={split!r} kind={kind!r}")
    samples = load_samples(manifest, entries, table, net.config.oversample_L)
    report, pairs = evaluate_samples(net, samples, table, z=z)
    if dump_path:
        with open(dump_path, "w", encoding="utf-8") as fh:
            for ref, hyp in pairs:
                fh.write(json.dumps({"ref": ref, "hyp": hyp}) + "\n")
    return report, pairs


def train(net, table, train_samples, val_samples, cfg, out_dir=None,
          callback=None):
    """Optimize ``net`` on pre-loaded samples; deterministic under cfg.seed.

    Returns a TrainResult whose checkpoint reflects the final epoch (or the
    initialization when epochs == 0).  Raises when every sample fails the
    CTC length pre-check; aborts (saving the last good checkpoint when
    out_dir is given) if the loss diverges to NaN.
    """
    feasible, rejected = feasibility_split(train_samples, net.config)
    if not feasible:
        raise ValueError(
            f"all {len(train_samples)} training samples are infeasible for "
            f"CTC (first: {rejected[0] if rejected else 'n/a'})"
        )
    rng = np.random.default_rng(cfg.seed)
    params = net.named_parameters()
    adam_state = init_adam_state(params)
    batches_per_epoch = max(1, (len(feasible) + cfg.batch_size - 1) // cfg.batch_size)
    beta2 = cfg.beta2 if cfg.beta2 is not None else compute_beta2(batches_per_epoch)
    metrics = []
    metrics_path = os.path.join(out_dir, "metrics.jsonl") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    last_good = make_checkpoint(net, table, adam_state, 0, rng)
    epochs_run = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.time()
        order = rng.permutation(len(feasible))
        epoch_loss = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = [feasible[i] for i in order[start : start + cfg.batch_size]]
            inv = 1.0 / len(batch)
            net.zero_grad()
            batch_loss = 0.0
            try:
                for s in batch:
                    image = s.image
                    if cfg.augment_params is not None:
                        image = augment(image, rng, cfg.augment_params)
                    logits = net.forward(image, training=True, rng=rng)
                    loss = ctc_loss(log_softmax(logits), s.target, table.blank_id)
                    batch_loss += float(loss.data)
                    backward(scale(loss, inv))
                batch_loss *= inv
                if not np.isfinite(batch_loss):
                    raise FloatingPointError(f"batch loss is {batch_loss}")
                clip_gradients(params, cfg.grad_clip)
                adam_step(params, adam_state, cfg.lr, cfg.beta1, beta2, cfg.eps)
            except FloatingPointError as e:
                # divergence (NaN/underflow anywhere in the step): abort but
                # leave the last healthy state on disk
                if out_dir:
                    path = os.path.join(out_dir, "ckpt_last_good")
                    last_good.save(path)
                    where = f"; last good checkpoint saved to {path}"
                else:
                    where = ""
                raise FloatingPointError(
                    f"training diverged at epoch {epoch} ({e}){where}"
                ) from e
            epoch_loss += batch_loss * len(batch)
        epoch_loss /= len(feasible)
        record = {
            "epoch": epoch,
            "train_loss": round(epoch_loss, 6),
            "seconds": round(time.time() - t0, 3),
        }
        if val_samples:
            report, _ = evaluate_samples(net, val_samples, table, z=cfg.z)
            record["val_cer"] = round(report.cer_percent, 4)
        metrics.append(record)
        if metrics_path:
            with open(metrics_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        if callback is not None:
            callback(epoch, record)
        last_good = make_checkpoint(net, table, adam_state, epoch, rng)
        epochs_run = epoch
        if out_dir:
            last_good.save(os.path.join(out_dir, "ckpt_last"))
        if (cfg.early_stop_cer is not None and "val_cer" in record
                and record["val_cer"] <= cfg.early_stop_cer):
            break
    ckpt = make_checkpoint(net, table, adam_state, epochs_run, rng)
    if out_dir:
        ckpt.save(os.path.join(out_dir, "ckpt_last"))
    return TrainResult(
        checkpoint=ckpt, metrics=metrics, rejected=rejected,
        epochs_run=epochs_run,
    )


def train_manifest(net, manifest, table, cfg, out_dir=None, kind=None,
                   callback=None):
    """Convenience wrapper: load train/validate splits from a manifest."""
    train_entries = [
        e for e in manifest.entries
        if e.split == "train" and (kind is None or e.kind == kind)
    ]
    val_entries = [
        e for e in manifest.entries
        if e.split == "validate" and (kind is None or e.kind == kind)
    ]
    l_factor = net.config.oversample_L
    train_samples = load_samples(manifest, train_entries, table, l_factor)
    val_samples = load_samples(manifest, val_entries, table, l_factor)
    return train(net, table, train_samples, val_samples, cfg,
                 out_dir=out_dir, callback=callback)


# ---------------------------------------------------------------------------
# curriculum bootstrap
# ---------------------------------------------------------------------------

def bootstrap_from_checkpoint(line_ckpt, page_config, table, rng):
    """Page model seeded from a line checkpoint; symbol tables must match."""
    if line_ckpt.symbol_hash != table.content_hash:
        raise ValueError(
            "refusing bootstrap: line checkpoint was trained with a "
            "different symbol table"
        )
    line_model, _ = model_from_checkpoint(line_ckpt)
    return model_mod.bootstrap_from_line_model(line_model, page_config, rng)


# ---------------------------------------------------------------------------
# oversample-factor sweep
# ---------------------------------------------------------------------------

def l_sweep(model_factory, manifest, table, l_values, cfg, out_dir=None):
    """Train and evaluate one model per L; failures are recorded, not fatal.

    Returns rows of (L, height, cer_percent, note).  When training refuses
    an L outright (every page infeasible at that height), the untrained
    model is still evaluated so the row reports the resulting error rate.
    """
    if not l_values:
        raise ValueError("l_sweep needs at least one L value")
    rows = []
    for l_factor in l_values:
        cfg_l = replace(cfg, L=l_factor)
        net = model_factory(l_factor)
        note = ""
        try:
            run_dir = os.path.join(out_dir, f"L{l_factor}") if out_dir else None
            train_manifest(net, manifest, table, cfg_l, out_dir=run_dir,
                           kind="page")
            note = "trained"
        except (ValueError, FloatingPointError, InfeasibleLength) as e:
            note = f"training failed ({e}); evaluated untrained"
        try:
            report, _ = evaluate(net, manifest, table, z=cfg.z, split="test",
                                 kind="page")
            rows.append((l_factor, 64 * l_factor, report.cer_percent, note))
        except (ValueError, FloatingPointError) as e:
            rows.append((l_factor, 64 * l_factor, float("nan"), f"eval failed ({e})"))
    return rows


def sweep_table(rows):
    lines = [f"{'L':>4} {'Height':>8} {'err[%]':>8}  note"]
    for l_factor, height, cer_pct, note in rows:
        lines.append(f"{l_factor:>4} {height:>8} {cer_pct:>8.2f}  {note}")
    return "\n".join(lines)
