"""Small torch MLPs and an Adam training loop with early stopping."""

from __future__ import annotations

import copy
import json
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

ACTIVATIONS = {"relu": nn.ReLU, "tanh": nn.Tanh, "swish": nn.SiLU}


def build_mlp(in_dim, hidden_layers, out_dim, activation="swish", dropout=0.0):
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
    layers = []
    width = in_dim
    for h in hidden_layers:
        layers += [nn.Linear(width, h), ACTIVATIONS[activation]()]
        if dropout > 0:
            layers.append(nn.Dropout(dropout))
        width = h
    layers.append(nn.Linear(width, out_dim))
    return nn.Sequential(*layers)


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = 0

    @property
    def initial_train_loss(self):
        return self.train_loss[0]

    @property
    def best_train_loss(self):
        return self.train_loss[self.best_epoch]


def train(model, batch_loss, full_train_loss, val_loss, n_train, *, learning_rate, max_epochs,
          patience, batch_size, seed, weight_decay=0.0):
    """Minimise ``batch_loss(idx)`` with AdamW, keeping the best-validation weights.

    ``full_train_loss`` and ``val_loss`` are evaluated without gradient in
    eval mode once per epoch; entry 0 of the history is the loss at
    initialisation. With ``val_loss=None`` training runs for
    ``max_epochs`` and the final weights are kept.
    """
    gen = torch.Generator().manual_seed(int(seed))
    opt = torch.optim.AdamW(model.parameters(), lr=learning_rate, weight_decay=weight_decay)
    hist = TrainHistory()

    def evaluate(epoch):
        model.eval()
        with torch.no_grad():
            tr = float(full_train_loss())
            va = float(val_loss()) if val_loss is not None else tr
        if not (np.isfinite(tr) and np.isfinite(va)):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        hist.train_loss.append(tr)
        hist.val_loss.append(va)
        return va

    best = evaluate(0)
    best_state = copy.deepcopy(model.state_dict())
    stale = 0
    for epoch in range(1, max_epochs + 1):
        model.train()
        perm = torch.randperm(n_train, generator=gen)
        for start in range(0, n_train, batch_size):
            idx = perm[start:start + batch_size]
            opt.zero_grad()
            loss = batch_loss(idx)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
        va = evaluate(epoch)
        if val_loss is None:
            best, hist.best_epoch = va, epoch
            best_state = copy.deepcopy(model.state_dict())
            continue
        if va < best:
            best, hist.best_epoch, stale = va, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            stale += 1
            if stale >= patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    return hist


_GLOBAL_RNG_LOCK = threading.RLock()


@contextmanager
def seeded(seed):
    """Isolate torch's global RNG (weight init, dropout) under a fixed seed.

    Holds a process-wide lock: the global generator is shared, so seeded
    blocks from different threads run one at a time to stay reproducible.
    """
    with _GLOBAL_RNG_LOCK, torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def flat_weights(model):
    params = [p.detach().cpu().numpy().astype(np.float64) for p in model.state_dict().values()]
    shapes = [list(p.shape) for p in params]
    flat = np.concatenate([p.ravel() for p in params]) if params else np.zeros(0)
    return shapes, flat


def export_weights(model, path, extra=None):
    """Write ``[u64 header length][JSON header][float64 little-endian values]``."""
    shapes, flat = flat_weights(model)
    header = json.dumps({"shapes": shapes, "dtype": "float64", "names": list(model.state_dict()),
                         **(extra or {})}).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(flat.astype("<f8").tobytes())


def read_weights(path):
    """Inverse of :func:`export_weights`; returns ``(header, list of arrays)``."""
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode())
        flat = np.frombuffer(fh.read(), dtype="<f8")
    arrays, offset = [], 0
    for shape in header["shapes"]:
        size = int(np.prod(shape)) if shape else 1
        arrays.append(flat[offset:offset + size].reshape(shape))
        offset += size
    if offset != flat.size:
        raise ValueError(f"weight file has {flat.size} values, header describes {offset}")
    return header, arrays
