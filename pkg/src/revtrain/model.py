"""Model composition and the four backpropagation strategies.

A SequentialModel is a flat list of items (plain layers and reversible
blocks) followed by a classifier head.  The forward pass is a single code
path for every mode; only what gets saved differs:

* stored          -- keep the input of every parameterised layer.
* block           -- keep only segment boundaries; reversible blocks are
                     inverted during backward and their internals are
                     recomputed by one extra forward pass per block.
* layerwise       -- keep only the final activation; every layer of the
                     chain is inverted one at a time while gradients flow.
* hybrid          -- blocks are inverted analytically like `block`, but
                     their internals are reconstructed by layer inverses
                     instead of being recomputed and held.

Unparameterised layers never store their inputs in stored mode; a backward
walk replays the short gap from the nearest saved activation (a BN affine
re-application, never an extra convolution for the shapes used here).

Parameter gradients come back as a flat dict keyed by path, e.g.
``"3.F.0.f_kernel"`` for item 3's F-branch layer 0, or ``"head.weight"``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError, StateError
from .layers import ClassifierHead

__all__ = [
    "BackpropMode",
    "Module",
    "ReversibleBlock",
    "SequentialModel",
    "SavedState",
    "SnrRecord",
    "SnrTrace",
]


class BackpropMode(Enum):
    STORED = "stored"
    BLOCK_REVERSIBLE = "block"
    LAYER_WISE = "layerwise"
    HYBRID = "hybrid"

    @classmethod
    def parse(cls, name):
        for mode in cls:
            if mode.value == name:
                return mode
        valid = ", ".join(m.value for m in cls)
        raise ConfigError(f"unknown backprop mode {name!r} (expected one of: {valid})")


_PARAMETERISED = {"conv", "bn", "invconv", "head"}
_INVERTIBLE_KINDS = {"bn", "lrelu", "invconv", "pool_c", "pool_b"}


def _apply_layer(layer, x, train=True, update_running=True):
    if layer.kind == "bn":
        return layer.forward(x, train=train, update_running=update_running)
    return layer.forward(x)


def _replay_layer(layer, x):
    """Re-apply a layer during backward without touching any cached state."""
    if layer.kind == "bn":
        return layer.forward_cached(x)
    return layer.forward(x)


def _layer_backward(layer, grad, x):
    """Backward dispatch for layers whose input value x is at hand."""
    if layer.kind in ("pool_c", "pool_b"):
        return layer.backward(grad)
    return layer.backward(grad, x)


class _ValueChain:
    """Resolves the input value of position i in a layer chain.

    Anchors are saved activations (position -> tensor); gaps are replayed
    forward from the nearest anchor at or below the requested position.
    """

    def __init__(self, layers, anchors):
        self.layers = layers
        self.vals = dict(anchors)

    def value_before(self, i):
        if i in self.vals:
            return self.vals[i]
        below = [j for j in self.vals if j < i]
        if not below:
            raise StateError(f"no saved activation at or below position {i}")
        j = max(below)
        x = self.vals[j]
        for k in range(j, i):
            x = _replay_layer(self.layers[k], x)
            self.vals[k + 1] = x
        return x

    def release_above(self, i):
        for j in [j for j in self.vals if j > i]:
            del self.vals[j]


class _Cell:
    """Single-owner handoff for a tensor crossing a call boundary.

    Passing a bare array into a block's backward pins it in the caller's
    frame until the call returns; wrapping it lets the callee take the only
    reference and free the buffer as soon as it has been consumed.
    """

    __slots__ = ("v",)

    def __init__(self, v):
        self.v = v

    def take(self):
        v = self.v
        self.v = None
        return v


def _take(x):
    return x.take() if isinstance(x, _Cell) else x


class Module:
    """A chain of layers, used standalone or as a block's F / G branch."""

    def __init__(self, layers):
        self.layers = list(layers)

    def params(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"{i}.{name}"] = arr
        return out

    def apply(self, x, train=True, update_running=True):
        for layer in self.layers:
            x = _apply_layer(layer, x, train, update_running)
        return x

    def apply_record(self, x, train=True, update_running=True):
        """Forward pass that keeps the inputs of parameterised layers.

        The record also anchors position 0 so unparameterised prefixes can
        be replayed.  Returns (output, record) with record[i] = input of
        layer i.
        """
        rec = {0: x}
        for i, layer in enumerate(self.layers):
            if layer.kind in _PARAMETERISED:
                rec[i] = x
            x = _apply_layer(layer, x, train, update_running)
        return x, rec

    def backward_from_record(self, grad, rec):
        """Stored-style backward using recorded parameterised-layer inputs."""
        chain = _ValueChain(self.layers, rec)
        grads = {}
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            if layer.kind in ("pool_c", "pool_b"):
                grad, pg = layer.backward(grad)
            elif layer.kind == "invconv":
                x = chain.value_before(i)
                grad, pg = layer.backward(grad, x, y=chain.vals.get(i + 1))
            else:
                grad, pg = _layer_backward(layer, grad, chain.value_before(i))
            chain.release_above(i)
            for name, g in pg.items():
                grads[f"{i}.{name}"] = g
        return grad, grads

    def walk_backward(self, grad, output, trace=None, prefix=""):
        """Layer-wise inverse walk: rebuild each input while gradients flow.

        Returns (grad_in, reconstructed_input, param_grads).  Every layer
        must be invertible; the walk inverts first, then takes the layer's
        backward, then drops the output it no longer needs.
        """
        grads = {}
        y = output
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            if not layer.invertible:
                raise ConfigError(
                    f"layer {prefix}{i} ({layer.kind}) is not invertible; "
                    "a layer-wise walk cannot pass through it"
                )
            kind = layer.kind
            if kind == "lrelu":
                # The output carries the signs, so backward can run first
                # and the inverse reuses the same buffer walk.
                grad, pg = layer.backward(grad, y)
                x = layer.inverse(y)
            elif kind == "invconv":
                x = layer.inverse(y)
                grad, pg = layer.backward(grad, x, y=y)
            elif kind in ("pool_c", "pool_b"):
                x = layer.inverse(y)
                grad, pg = layer.backward(grad)
            else:
                x = layer.inverse(y)
                grad, pg = _layer_backward(layer, grad, x)
            if trace is not None:
                trace.record(f"{prefix}{i}", kind, x)
            for name, g in pg.items():
                grads[f"{i}.{name}"] = g
            y = x
        return grad, y, grads


class ReversibleBlock:
    """Additive coupling y1 = x1 + F(x2), y2 = x2 + G(y1)."""

    kind = "block"
    invertible = True

    def __init__(self, f_module, g_module):
        self.F = f_module
        self.G = g_module

    def params(self):
        out = {}
        for branch, module in (("F", self.F), ("G", self.G)):
            for name, arr in module.params().items():
                out[f"{branch}.{name}"] = arr
        return out

    def internals_invertible(self):
        return all(
            layer.invertible for layer in self.F.layers + self.G.layers
        )

    def forward(self, x, train=True, update_running=True, record=False):
        x1, x2 = ops.split_channels(x)
        if record:
            fv, f_rec = self.F.apply_record(x2, train, update_running)
            y1 = ops.add(x1, fv)
            gv, g_rec = self.G.apply_record(y1, train, update_running)
            y2 = ops.add(x2, gv)
            return ops.concat_channels(y1, y2), (f_rec, g_rec)
        y1 = ops.add(x1, self.F.apply(x2, train, update_running))
        y2 = ops.add(x2, self.G.apply(y1, train, update_running))
        return ops.concat_channels(y1, y2)

    def inverse(self, y, train=True):
        y1, y2 = ops.split_channels(y)
        x2 = ops.sub(y2, self.G.apply(y1, train, update_running=False))
        x1 = ops.sub(y1, self.F.apply(x2, train, update_running=False))
        return ops.concat_channels(x1, x2)

    def _coupling_backward(self, grad, f_rec, g_rec):
        grad = _take(grad)
        g1, g2 = ops.split_channels(grad)
        del grad
        gg_in, g_grads = self.G.backward_from_record(g2, g_rec)
        gy1 = ops.add(g1, gg_in)
        del g1, gg_in
        gf_in, f_grads = self.F.backward_from_record(gy1, f_rec)
        gx2 = ops.add(g2, gf_in)
        del g2, gf_in
        grads = {f"G.{k}": v for k, v in g_grads.items()}
        grads.update({f"F.{k}": v for k, v in f_grads.items()})
        return ops.concat_channels(gy1, gx2), grads

    def backward_stored(self, grad, rec):
        f_rec, g_rec = rec
        return self._coupling_backward(grad, f_rec, g_rec)

    def backward_blockrev(self, y, grad, train=True):
        """Invert the block while re-recording internals, then backprop.

        The inversion doubles as the recompute pass, so the block costs one
        extra forward per branch and nothing is kept beyond the block.
        Returns (x, grad_in, param_grads).
        """
        y = _take(y)
        y1, y2 = ops.split_channels(y)
        del y
        gv, g_rec = self.G.apply_record(y1, train, update_running=False)
        x2 = ops.sub(y2, gv)
        del y2, gv
        fv, f_rec = self.F.apply_record(x2, train, update_running=False)
        x1 = ops.sub(y1, fv)
        del y1, fv
        grad_in, grads = self._coupling_backward(grad, f_rec, g_rec)
        return ops.concat_channels(x1, x2), grad_in, grads

    def backward_hybrid(self, y, grad, train=True, trace=None, prefix=""):
        """Analytic block inverse plus layer-wise walks through F and G.

        Branch outputs from the inversion seed the walks, so internals are
        reconstructed one layer at a time and never all live at once.
        Returns (x, grad_in, param_grads).
        """
        y = _take(y)
        y1, y2 = ops.split_channels(y)
        del y
        gv = self.G.apply(y1, train, update_running=False)
        x2 = ops.sub(y2, gv)
        del y2
        fv = self.F.apply(x2, train, update_running=False)
        x1 = ops.sub(y1, fv)
        del y1
        grad = _take(grad)
        g1, g2 = ops.split_channels(grad)
        del grad
        gg_in, _, g_grads = self.G.walk_backward(g2, gv, trace, f"{prefix}G.")
        del gv
        gy1 = ops.add(g1, gg_in)
        del g1, gg_in
        gf_in, _, f_grads = self.F.walk_backward(gy1, fv, trace, f"{prefix}F.")
        del fv
        gx2 = ops.add(g2, gf_in)
        del g2, gf_in
        grads = {f"G.{k}": v for k, v in g_grads.items()}
        grads.update({f"F.{k}": v for k, v in f_grads.items()})
        return ops.concat_channels(x1, x2), ops.concat_channels(gy1, gx2), grads


@dataclass
class SnrRecord:
    index: int
    kind: str
    snr: float
    path: str = ""


@dataclass
class SnrTrace:
    """Reconstruction quality of every activation rebuilt during backward.

    Records appear in backward encounter order; for each block the internal
    records precede the block-input record.  snr = |x|^2 / |x_rec - x|^2
    (inf when the reconstruction is exact).
    """

    records: list = field(default_factory=list)
    _truth: dict = field(default_factory=dict, repr=False)

    def record(self, path, kind, reconstructed):
        true = self._truth.get(path)
        if true is None:
            return
        err = ops.sum_sq_norm(np.asarray(reconstructed, dtype=np.float64) - true)
        sig = ops.sum_sq_norm(true)
        snr = float("inf") if err == 0.0 else sig / err
        self.records.append(SnrRecord(len(self.records), kind, snr, path))

    def min_snr(self):
        return min(r.snr for r in self.records)


@dataclass
class SavedState:
    """What the forward pass kept around for backward, by mode."""

    mode: BackpropMode
    stored: dict = field(default_factory=dict)
    block_records: dict = field(default_factory=dict)
    final: np.ndarray | None = None

    def activation_bytes(self, model=None):
        """Bytes held for backward: saved tensors, BN stats, head cache."""
        total = 0
        for arr in self.stored.values():
            total += arr.nbytes
        for f_rec, g_rec in self.block_records.values():
            seen = set()
            for rec in (f_rec, g_rec):
                for arr in rec.values():
                    if id(arr) not in seen:
                        seen.add(id(arr))
                        total += arr.nbytes
        if self.final is not None:
            total += self.final.nbytes
        if model is not None:
            for layer in model.iter_layers():
                if layer.kind == "bn" and layer.cached_stats is not None:
                    total += sum(a.nbytes for a in layer.cached_stats)
            pooled = model.head.cached_pooled
            if pooled is not None:
                total += pooled.nbytes
        return total


class SequentialModel:
    """Flat list of plain layers and reversible blocks, then a head."""

    def __init__(self, items, head):
        if not isinstance(head, ClassifierHead):
            raise ConfigError("model head must be a ClassifierHead")
        self.items = list(items)
        self.head = head

    def params(self):
        out = {}
        for i, item in enumerate(self.items):
            for name, arr in item.params().items():
                out[f"{i}.{name}"] = arr
        for name, arr in self.head.params().items():
            out[f"head.{name}"] = arr
        return out

    def iter_layers(self):
        for item in self.items:
            if isinstance(item, ReversibleBlock):
                yield from item.F.layers
                yield from item.G.layers
            else:
                yield item

    def item_label(self, i):
        item = self.items[i]
        kind = item.kind
        return f"item {i} ({kind})"

    # -- mode validation ---------------------------------------------------

    def validate_mode(self, mode):
        blocks = [i for i, it in enumerate(self.items) if isinstance(it, ReversibleBlock)]
        if mode is BackpropMode.STORED:
            return
        if mode is BackpropMode.LAYER_WISE:
            if blocks:
                raise ConfigError(
                    f"layerwise mode needs a plain chain but {self.item_label(blocks[0])} "
                    "is a reversible block"
                )
            self._check_walkable_items(mode)
            return
        if not blocks:
            raise ConfigError(f"{mode.value} mode needs at least one reversible block")
        if mode is BackpropMode.HYBRID:
            self._check_walkable_items(mode)
            for i in blocks:
                if not self.items[i].internals_invertible():
                    bad = next(
                        layer.kind
                        for layer in self.items[i].F.layers + self.items[i].G.layers
                        if not layer.invertible
                    )
                    raise ConfigError(
                        f"hybrid mode needs invertible block internals but "
                        f"{self.item_label(i)} contains a {bad} layer"
                    )
        # block mode: any block internals are fine (they are recomputed).

    def _check_walkable_items(self, mode):
        # A non-invertible stem at position 0 is fine: its input is the
        # caller-owned batch, so the walk needs nothing saved for it.
        for i, item in enumerate(self.items):
            if i > 0 and not isinstance(item, ReversibleBlock) and not item.invertible:
                raise ConfigError(
                    f"{mode.value} mode needs invertible layers past the stem but "
                    f"{self.item_label(i)} is not invertible"
                )

    def supported_modes(self):
        out = []
        for mode in BackpropMode:
            try:
                self.validate_mode(mode)
            except ConfigError:
                continue
            out.append(mode)
        return out

    # -- forward -----------------------------------------------------------

    def forward(self, x, mode=BackpropMode.STORED, train=True):
        """Run the model; returns (logits, SavedState or None if not train).

        The computation is identical for every mode; only the saved state
        differs, so logits match bitwise across modes.
        """
        self.validate_mode(mode)
        if not train:
            for item in self.items:
                if isinstance(item, ReversibleBlock):
                    x = item.forward(x, train=False)
                else:
                    x = _apply_layer(item, x, train=False)
            return self.head.forward(x), None

        saved = SavedState(mode=mode)
        reversible = mode is not BackpropMode.STORED
        for i, item in enumerate(self.items):
            if isinstance(item, ReversibleBlock):
                if mode is BackpropMode.STORED:
                    x, rec = item.forward(x, record=True)
                    saved.block_records[i] = rec
                else:
                    x = item.forward(x)
            else:
                keep = False
                if mode is BackpropMode.STORED:
                    keep = item.kind in _PARAMETERISED and i > 0
                elif mode is BackpropMode.BLOCK_REVERSIBLE:
                    keep = (item.kind in _PARAMETERISED or item.kind == "maxpool") and i > 0
                else:
                    keep = not item.invertible and i > 0
                if keep:
                    saved.stored[str(i)] = x
                x = _apply_layer(item, x)
        if reversible:
            saved.final = x
        logits = self.head.forward(x)
        return logits, saved

    # -- backward ----------------------------------------------------------

    def backward(self, saved, grad_logits, x_input, trace=False):
        """Backprop according to saved.mode.

        x_input is the model input batch (owned by the caller; it is never
        part of the saved state).  Returns (param_grads, SnrTrace or None).
        The trace compares every reconstructed activation against a shadow
        stored-mode forward and is meant for diagnostics only.
        """
        if saved is None:
            raise StateError("backward needs the SavedState from a train-mode forward")
        mode = saved.mode
        snr = None
        if trace:
            if mode in (BackpropMode.STORED,):
                raise ConfigError("an SNR trace needs a reversible mode")
            snr = SnrTrace(_truth=self._shadow_truth(x_input))

        grad, head_grads = self.head.backward(grad_logits)
        grads = {f"head.{name}": arr for name, arr in head_grads.items()}
        if mode is BackpropMode.STORED:
            grads.update(self._backward_stored(grad, saved, x_input))
        else:
            grads.update(self._backward_reversible(grad, saved, x_input, snr))
        return grads, snr

    def _backward_stored(self, grad, saved, x_input):
        anchors = {int(k): v for k, v in saved.stored.items()}
        anchors[0] = x_input
        grads = {}
        chain = _StoredChain(self.items, anchors, saved.block_records)
        for i in reversed(range(len(self.items))):
            item = self.items[i]
            if isinstance(item, ReversibleBlock):
                grad, pg = item.backward_stored(grad, saved.block_records[i])
                saved.block_records.pop(i, None)
            elif item.kind in ("pool_c", "pool_b"):
                grad, pg = item.backward(grad)
            elif item.kind == "invconv":
                x = chain.value_before(i)
                grad, pg = item.backward(grad, x, y=chain.vals.get(i + 1))
            else:
                grad, pg = _layer_backward(item, grad, chain.value_before(i))
            chain.release_above(i)
            saved.stored.pop(str(i), None)
            for name, g in pg.items():
                grads[f"{i}.{name}"] = g
        return grads

    def _backward_reversible(self, grad, saved, x_input, snr):
        mode = saved.mode
        y = saved.final
        saved.final = None
        grads = {}
        for i in reversed(range(len(self.items))):
            item = self.items[i]
            if isinstance(item, ReversibleBlock):
                y_cell, y = _Cell(y), None
                g_cell, grad = _Cell(grad), None
                if mode is BackpropMode.BLOCK_REVERSIBLE:
                    y, grad, pg = item.backward_blockrev(y_cell, g_cell)
                else:
                    y, grad, pg = item.backward_hybrid(y_cell, g_cell, trace=snr, prefix=f"{i}.")
                if snr is not None:
                    snr.record(str(i), "block_input", y)
            elif item.kind in ("pool_c", "pool_b"):
                x = item.inverse(y)
                del y
                grad, pg = item.backward(grad)
                y = x
            elif str(i) in saved.stored or i == 0:
                x = saved.stored.pop(str(i), None)
                if x is None:
                    x = x_input
                grad, pg = _layer_backward(item, grad, x)
                y = x
            else:
                if not item.invertible:
                    raise StateError(
                        f"{self.item_label(i)} is not invertible and has no saved input"
                    )
                kind = item.kind
                if kind == "lrelu":
                    grad, pg = item.backward(grad, y)
                    x = item.inverse(y)
                elif kind == "invconv":
                    x = item.inverse(y)
                    grad, pg = item.backward(grad, x, y=y)
                else:
                    x = item.inverse(y)
                    grad, pg = _layer_backward(item, grad, x)
                if snr is not None:
                    snr.record(str(i), kind, x)
                del y
                y = x
            for name, g in pg.items():
                grads[f"{i}.{name}"] = g
        return grads

    def _shadow_truth(self, x):
        """Noise-free reference activations, keyed like trace paths."""
        truth = {}
        for i, item in enumerate(self.items):
            truth[str(i)] = np.asarray(x, dtype=np.float64)
            if isinstance(item, ReversibleBlock):
                x1, x2 = ops.split_channels(x)
                v = x2
                for j, layer in enumerate(item.F.layers):
                    truth[f"{i}.F.{j}"] = np.asarray(v, dtype=np.float64)
                    v = _replay_layer(layer, v)
                y1 = ops.add(x1, v)
                v = y1
                for j, layer in enumerate(item.G.layers):
                    truth[f"{i}.G.{j}"] = np.asarray(v, dtype=np.float64)
                    v = _replay_layer(layer, v)
                y2 = ops.add(x2, v)
                x = ops.concat_channels(y1, y2)
            else:
                x = _replay_layer(item, x)
        return truth


class _StoredChain:
    """Like _ValueChain but aware of reversible-block records at item level."""

    def __init__(self, items, anchors, block_records):
        self.items = items
        self.block_records = block_records
        self.vals = {k: v for k, v in anchors.items() if v is not None}

    def value_before(self, i):
        if i in self.vals:
            return self.vals[i]
        candidates = [j for j in self.vals if j < i]
        block_below = [j for j in self.block_records if j < i]
        j = max(candidates) if candidates else -1
        jb = max(block_below) if block_below else -1
        if j < 0 and jb < 0:
            raise StateError(f"no saved activation at or below item {i}")
        if jb > j:
            x = self._block_output(jb)
            start = jb + 1
        else:
            x = self.vals[j]
            start = j
        for k in range(start, i):
            x = _replay_layer(self.items[k], x)
            self.vals[k + 1] = x
        return x

    def _block_output(self, i):
        block = self.items[i]
        f_rec, g_rec = self.block_records[i]
        y1 = g_rec[0]
        gv = block.G.apply(y1, update_running=False)
        y2 = ops.add(f_rec[0], gv)
        return ops.concat_channels(y1, y2)

    def release_above(self, i):
        for j in [j for j in self.vals if j > i]:
            del self.vals[j]
