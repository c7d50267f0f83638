"""Symbolic memory costing for training schedules.

Costs split into a fixed weight budget, a per-pixel activation/gradient
budget (bytes per input pixel, one spatial position of one input sample),
and small bookkeeping items (batch statistics, the classifier head's pooled
features).  Two independent routes compute the budget: closed forms per
backprop mode, and an event-level replay of the whole training schedule
(`simulate_schedule`).

Both routes model the lean schedule: elementwise inverses and gradient
updates run in place, and coupling subtractions reuse their output buffer.
The executor in `model.py` allocates fresh buffers instead; that gap is a
separate `overhead_bytes` line item, never folded into the budget.

Conventions that the budgets rely on:
  * The input batch is owned by the caller, so the first standalone layer
    never pays for its input; the batch appears as its own line item.
  * Per-layer batch statistics and the head's pooled features do not scale
    with pixel count and live under `stats_bytes`.
  * In stored mode the peak sits at the first backward step, where every
    kept input is still live and the gradient is the deepest feature map.
    This holds whenever kept inputs dominate later gradients, true for
    every bundled spec.
"""

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .errors import ConfigError

BYTES_PER_ELEMENT = 4

KINDS = ("conv", "bn", "lrelu", "invconv", "pool_c", "pool_b", "maxpool", "head")
PARAM_KINDS = ("conv", "bn", "invconv", "head")
POOL_KINDS = ("pool_c", "pool_b", "maxpool")
INVERTIBLE_KINDS = ("bn", "lrelu", "invconv", "pool_c", "pool_b")
MODES = ("stored", "block", "layerwise", "hybrid")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    c_in: int
    c_out: int
    k: int = 1
    pool: int = None
    block: int | None = None
    branch: str | None = None

    def __post_init__(self):
        if self.pool is None:
            object.__setattr__(self, "pool", 2 if self.kind in POOL_KINDS else 1)

    def param_count(self):
        if self.kind == "conv":
            return self.c_in * self.c_out * self.k * self.k + self.c_out
        if self.kind == "invconv":
            half = self.c_in // 2
            return 2 * (half * half * self.k * self.k + half)
        if self.kind == "bn":
            return 2 * self.c_in
        if self.kind == "head":
            return self.c_in * self.c_out + self.c_out
        return 0


@dataclass
class ArchSpec:
    name: str
    input_channels: int
    layers: list
    mode: str = "stored"
    classes: int = 10
    bpe: int = BYTES_PER_ELEMENT

    def __post_init__(self):
        self.validate()

    # -- structural validation ----------------------------------------------

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(
                f"unknown mode {self.mode!r} (expected one of: {', '.join(MODES)})"
            )
        if not self.layers:
            raise ConfigError("architecture has no layers")
        for pos, layer in enumerate(self.layers):
            self._check_layer(pos, layer)
        if self.layers[-1].kind != "head":
            raise ConfigError("last layer must be a head")
        if any(l.kind == "head" for l in self.layers[:-1]):
            raise ConfigError("head must be the last layer")
        self._check_blocks()
        self._check_chain()

    def _check_layer(self, pos, layer):
        label = f"layer {pos} ({layer.kind})"
        if layer.kind not in KINDS:
            raise ConfigError(f"layer {pos}: unknown kind {layer.kind!r}")
        if layer.c_in <= 0 or layer.c_out <= 0:
            raise ConfigError(f"{label}: channel counts must be positive")
        if layer.kind in POOL_KINDS:
            if layer.pool != 2:
                raise ConfigError(f"{label}: pool layers use pool = 2")
        elif layer.pool != 1:
            raise ConfigError(f"{label}: only pool layers take a pool factor")
        expect_same = layer.kind in ("bn", "lrelu", "invconv", "pool_b", "maxpool")
        if expect_same and layer.c_in != layer.c_out:
            raise ConfigError(f"{label}: c_out must equal c_in")
        if layer.kind == "pool_c" and layer.c_out != 4 * layer.c_in:
            raise ConfigError(f"{label}: channel pooling gives c_out = 4 * c_in")
        if layer.kind == "invconv" and layer.c_in % 2:
            raise ConfigError(f"{label}: needs an even channel count")
        if layer.kind == "head" and layer.c_out != self.classes:
            raise ConfigError(f"{label}: c_out must equal the class count")
        if (layer.block is None) != (layer.branch is None):
            raise ConfigError(f"{label}: block and branch go together")
        if layer.branch is not None and layer.branch not in ("f", "g"):
            raise ConfigError(f"{label}: branch must be 'f' or 'g'")
        if layer.block is not None and layer.kind in POOL_KINDS:
            raise ConfigError(f"{label}: pooling cannot sit inside a block")
        if layer.block is not None and layer.kind == "head":
            raise ConfigError(f"{label}: the head cannot sit inside a block")

    def _check_blocks(self):
        seen = {}
        for pos, layer in enumerate(self.layers):
            if layer.block is None:
                continue
            runs = seen.setdefault(layer.block, [])
            if runs and runs[-1][1] != pos - 1:
                raise ConfigError(f"block {layer.block}: layers must be contiguous")
            if runs:
                runs[-1] = (runs[-1][0], pos)
            else:
                runs.append((pos, pos))
        for bid, runs in seen.items():
            lo, hi = runs[0]
            branches = [self.layers[p].branch for p in range(lo, hi + 1)]
            if "f" not in branches or "g" not in branches:
                raise ConfigError(f"block {bid}: needs both an f and a g branch")
            first_g = branches.index("g")
            if "f" in branches[first_g:]:
                raise ConfigError(f"block {bid}: list all f layers before g layers")

    def _check_chain(self):
        c = self.input_channels
        for pos, layer in enumerate(self.layers):
            label = f"layer {pos} ({layer.kind})"
            if layer.block is not None:
                first = pos == 0 or self.layers[pos - 1].block != layer.block
                if first and c != 2 * layer.c_in:
                    raise ConfigError(
                        f"{label}: branch width {layer.c_in} needs a block input "
                        f"of {2 * layer.c_in} channels, got {c}"
                    )
                if not first and self.layers[pos - 1].branch == layer.branch:
                    if layer.c_in != self.layers[pos - 1].c_out:
                        raise ConfigError(
                            f"{label}: expects {self.layers[pos - 1].c_out} "
                            f"channels, got {layer.c_in}"
                        )
                last = pos + 1 == len(self.layers) or self.layers[pos + 1].block != layer.block
                if last:
                    if 2 * layer.c_out != self._block_width(layer.block):
                        raise ConfigError(
                            f"block {layer.block}: branches must preserve width"
                        )
                    c = 2 * layer.c_out
            else:
                if layer.c_in != c:
                    raise ConfigError(f"{label}: expects {c} channels, got {layer.c_in}")
                c = layer.c_out

    def _block_width(self, bid):
        first = next(l for l in self.layers if l.block == bid)
        return 2 * first.c_in

    # -- derived quantities --------------------------------------------------

    def param_count(self):
        return sum(l.param_count() for l in self.layers)

    def head(self):
        return self.layers[-1]


@dataclass(frozen=True)
class Placed:
    """A layer with its position in the pixel/batch geometry.

    p is the pixel fraction per input pixel at the layer's input, b the
    batch multiplier; a and o are input/output element counts per input
    pixel, exact dyadic fractions.
    """

    layer: LayerSpec
    pos: int
    item: int
    p: Fraction
    b: int

    @property
    def a(self):
        return self.b * self.p * self.layer.c_in

    @property
    def o(self):
        p, b = self.p, self.b
        if self.layer.kind in POOL_KINDS:
            p = p / (self.layer.pool ** 2)
        if self.layer.kind == "pool_b":
            b = b * self.layer.pool ** 2
        return b * p * self.layer.c_out


@dataclass(frozen=True)
class Item:
    """One schedule step: a standalone layer or a whole reversible block."""

    index: int
    block_id: int | None
    placed: list

    @property
    def standalone(self):
        return self.block_id is None

    @property
    def kind(self):
        return "block" if self.block_id is not None else self.placed[0].layer.kind

    @property
    def width(self):
        if self.standalone:
            return self.placed[0].layer.c_in
        return 2 * self.placed[0].layer.c_in

    @property
    def volume(self):
        first = self.placed[0]
        return first.b * first.p * self.width

    def branch(self, name):
        return [pl for pl in self.placed if pl.layer.branch == name]

    def branch_has_invconv(self):
        return any(pl.layer.kind == "invconv" for pl in self.placed)


def place(spec):
    """Group layers into schedule items and track pixel/batch geometry."""
    items = []
    p, b = Fraction(1), 1
    pos = 0
    while pos < len(spec.layers):
        layer = spec.layers[pos]
        if layer.block is None:
            pl = Placed(layer, pos, len(items), p, b)
            items.append(Item(len(items), None, [pl]))
            if layer.kind in POOL_KINDS:
                p = p / (layer.pool ** 2)
                if layer.kind == "pool_b":
                    b = b * layer.pool ** 2
            pos += 1
        else:
            bid = layer.block
            run = []
            while pos < len(spec.layers) and spec.layers[pos].block == bid:
                run.append(Placed(spec.layers[pos], pos, len(items), p, b))
                pos += 1
            items.append(Item(len(items), bid, run))
    return items


# -- mode admissibility (mirrors the executor's validation) ------------------


def validate_mode(spec, mode):
    items = place(spec)
    blocks = [it for it in items if not it.standalone]
    if mode == "stored":
        return
    if mode == "layerwise" and blocks:
        raise ConfigError(
            f"layerwise mode needs a plain chain but item {blocks[0].index} "
            "is a reversible block"
        )
    if mode in ("block", "hybrid") and not blocks:
        raise ConfigError(f"{mode} mode needs at least one reversible block")
    if mode in ("layerwise", "hybrid"):
        for it in items:
            kind = it.kind
            if kind == "head":
                continue
            if it.standalone and it.index > 0 and kind not in INVERTIBLE_KINDS:
                raise ConfigError(
                    f"{mode} mode needs invertible layers past the stem but "
                    f"item {it.index} ({kind}) is not invertible"
                )
    if mode == "hybrid":
        for it in blocks:
            for pl in it.placed:
                if pl.layer.kind not in INVERTIBLE_KINDS:
                    raise ConfigError(
                        f"hybrid mode needs invertible block internals but "
                        f"item {it.index} (block) contains a {pl.layer.kind} layer"
                    )


# -- closed-form per-pixel budgets -------------------------------------------


def weight_bytes(spec):
    return spec.param_count() * spec.bpe


def _kept_internals(item):
    """Per-pixel elements a block's record keeps: parameterised inputs plus
    a branch anchor when the first branch layer keeps nothing itself."""
    total = Fraction(0)
    for name in ("f", "g"):
        branch = item.branch(name)
        if branch and branch[0].layer.kind not in PARAM_KINDS:
            total += branch[0].a
        for pl in branch:
            if pl.layer.kind in PARAM_KINDS:
                total += pl.a
    return total


def _stored_kept(items):
    """Standalone inputs stored mode keeps, per pixel (item 0 is free)."""
    total = Fraction(0)
    for it in items:
        if it.standalone and it.index > 0 and it.kind in PARAM_KINDS and it.kind != "head":
            total += it.placed[0].a
    return total


def _blockrev_kept(items):
    kept = {}
    for it in items:
        keepable = it.kind in PARAM_KINDS or it.kind == "maxpool"
        if it.standalone and it.index > 0 and keepable and it.kind != "head":
            kept[it.index] = it.placed[0].a
    return kept


def _final_volume(items):
    it = items[-2]
    return it.volume if not it.standalone else it.placed[0].o


def _stored_candidates(items):
    """Walk the stored-mode backward and return the worst (live, grad) pair.

    Keeps are freed as the walk consumes them; elementwise gradients run in
    place, conv-style layers hold both gradient buffers for a step, and a
    block's branch gradients add half its volume.  On chains whose keeps
    dominate, the winner is the first backward step with everything live.
    """
    kept = {}
    for it in items:
        if not it.standalone:
            kept[it.index] = _kept_internals(it)
        elif it.index > 0 and it.kind in PARAM_KINDS and it.kind != "head":
            kept[it.index] = it.placed[0].a
    live = sum(kept.values(), Fraction(0))
    best = (live, _final_volume(items))
    for it in reversed(items[:-1]):
        if not it.standalone:
            cand = (live + it.volume / 2, it.volume)
        else:
            pl = it.placed[0]
            if it.kind in ("conv", "invconv", "maxpool"):
                cand = (live + pl.o, pl.a)
            else:
                cand = (live, pl.a)
        if cand[0] + cand[1] > best[0] + best[1]:
            best = cand
        live -= kept.pop(it.index, Fraction(0))
    return best


def per_pixel_elems(spec, mode):
    """(activation, gradient) element counts per input pixel at the peak."""
    validate_mode(spec, mode)
    items = place(spec)
    g_final = _final_volume(items)
    if mode == "stored":
        return _stored_candidates(items)
    if mode == "block":
        kept = _blockrev_kept(items)
        best = (sum(kept.values(), Fraction(0)) + _final_volume(items), g_final)
        for it in items:
            if it.standalone:
                continue
            below = sum((v for i, v in kept.items() if i < it.index), Fraction(0))
            z = _kept_internals(it) + it.volume + below
            if z + it.volume > best[0] + best[1]:
                best = (z, it.volume)
        return best
    # walk modes: the frontier holds one activation and one gradient of the
    # local volume, plus reconstruction scratch.
    best = (_final_volume(items), g_final)
    for it in items:
        if it.kind == "head":
            continue
        if not it.standalone:
            scratch = it.volume / 2
            if it.branch_has_invconv():
                scratch += it.volume / 4
            z, g = it.volume + scratch, it.volume
        elif it.index == 0:
            # Stem backward: the walked value is still live and a conv swaps
            # gradients out of place.
            pl = it.placed[0]
            z, g = pl.o, pl.a + pl.o
        else:
            pl = it.placed[0]
            z = pl.a + (pl.layer.c_in * pl.b * pl.p / 2 if it.kind == "invconv" else 0)
            g = max(pl.a, pl.o)
        if z + g > best[0] + best[1]:
            best = (z, g)
    return best


def activation_bytes_per_pixel(spec, mode):
    return float(per_pixel_elems(spec, mode)[0] * spec.bpe)


def gradient_bytes_per_pixel(spec, mode):
    return float(per_pixel_elems(spec, mode)[1] * spec.bpe)


def bytes_per_pixel(spec, mode):
    z, g = per_pixel_elems(spec, mode)
    return float((z + g) * spec.bpe)


def stats_bytes(spec, bs):
    """Running plus cached batch statistics, and the head's pooled features."""
    total = 0
    for layer in spec.layers:
        if layer.kind == "bn":
            total += 4 * layer.c_in * spec.bpe
    total += bs * spec.head().c_in * spec.bpe
    return total


def stored_saved_bytes(spec, h, w, bs):
    """Bytes the executor's stored-mode SavedState should occupy, exactly:
    kept inputs, cached statistics, and the head's pooled features."""
    items = place(spec)
    px = h * w * bs
    kept = _stored_kept(items)
    for it in items:
        if not it.standalone:
            kept += _kept_internals(it)
    cached = sum(2 * l.c_in * spec.bpe for l in spec.layers if l.kind == "bn")
    total = kept * px * spec.bpe + cached + bs * spec.head().c_in * spec.bpe
    assert total.denominator == 1
    return int(total)


def input_batch_bytes(spec, h, w, bs):
    return bs * spec.input_channels * h * w * spec.bpe


def max_volume_elems(spec):
    items = place(spec)
    vols = [it.volume if not it.standalone else max(it.placed[0].a, it.placed[0].o)
            for it in items if it.kind != "head"]
    return max(vols)


# Executor concurrency allowance per mode, in units of the largest
# activation volume. The python executor splits by copying and allocates
# fresh buffers where the lean schedule works in place; walk modes carry
# extra concurrent halves while re-deriving values. Calibrated against
# tracked-allocator peaks on five specs at three sizes (per-case factors
# stable to <0.3 across a 4x pixel range; worst prediction error 8.4%).
OVERHEAD_FACTORS = {"stored": 3.0, "block": 3.0, "layerwise": 6.0, "hybrid": 5.0}


def overhead_bytes(spec, mode, h, w, bs):
    # parameter gradient buffers (one weight-sized set, live by the end of
    # backward) plus the per-mode concurrency allowance
    v = max_volume_elems(spec) * h * w * bs * spec.bpe
    return float(weight_bytes(spec) + OVERHEAD_FACTORS[mode] * v)


# -- schedule replay ----------------------------------------------------------


class _Ledger:
    def __init__(self, base):
        self.live = base
        self.peak = base
        self.events = []

    def note(self, label):
        self.events.append((label, float(self.live)))
        if self.live > self.peak:
            self.peak = self.live

    def alloc(self, label, n):
        self.live += n
        self.note(label)

    def free(self, n):
        self.live -= n

    def bump(self, label, n):
        self.alloc(label, n)
        self.free(n)


def simulate_schedule(spec, mode, h, w, bs):
    """Replay the lean training schedule step by step.

    Returns (peak_bytes, events); events are (label, live_bytes) pairs.
    Scope: weights, running and cached statistics, activations, gradients
    and the head's buffers.  The input batch, optimizer momentum and
    executor overhead are separate line items, as in the closed forms.
    """
    validate_mode(spec, mode)
    items = place(spec)
    px = h * w * bs
    bpe = spec.bpe

    def B(elems_per_px):
        return elems_per_px * px * bpe

    running = sum(2 * l.c_in * bpe for l in spec.layers if l.kind == "bn")
    led = _Ledger(weight_bytes(spec) + running)
    led.note("init")

    kept = {}
    cached = {}

    def bn_cached(item_index, layers):
        total = sum(2 * l.layer.c_in * bpe for l in layers if l.layer.kind == "bn")
        if total:
            cached[item_index] = cached.get(item_index, 0) + total
            led.alloc(f"stats {item_index}", total)

    # forward
    prev = Fraction(0)  # model input is caller-owned
    for it in items[:-1]:
        label = f"fwd {it.index}"
        if not it.standalone:
            if mode == "stored":
                kept[it.index] = B(_kept_internals(it))
                led.alloc(f"{label} record", kept[it.index])
            bn_cached(it.index, it.placed)
            # the input pair folds into its halves (and the record) at the split
            led.free(B(prev))
            led.bump(f"{label} work", B(it.volume * 3 / 4))
            led.alloc(label, B(it.volume))
            prev = it.volume
        else:
            pl = it.placed[0]
            keep = False
            if mode == "stored":
                keep = it.index > 0 and it.kind in PARAM_KINDS
            elif mode == "block":
                keep = it.index > 0 and (it.kind in PARAM_KINDS or it.kind == "maxpool")
            if keep:
                kept[it.index] = B(pl.a)
            bn_cached(it.index, it.placed)
            if not keep and it.kind in ("bn", "lrelu"):
                led.note(label)  # elementwise, runs in place
            else:
                led.alloc(label, B(pl.o))
                if not keep:
                    led.free(B(prev))
            prev = pl.o
    head = spec.head()
    led.alloc("fwd head pooled", bs * head.c_in * bpe)
    led.alloc("fwd head logits", bs * head.c_out * bpe)
    if mode == "stored":
        led.free(B(prev))  # final feature map is not retained

    # backward
    led.alloc("bwd logits grad", bs * head.c_out * bpe)
    led.alloc("bwd head", B(_final_volume(items)))
    led.free(2 * bs * head.c_out * bpe)
    led.free(bs * head.c_in * bpe)
    grad = _final_volume(items)
    value = Fraction(0) if mode == "stored" else prev

    for it in reversed(items[:-1]):
        label = f"bwd {it.index}"
        if not it.standalone:
            internals = _kept_internals(it)
            if mode == "stored":
                # Coupling gradients swap in place; branch value chains are
                # a transient on top of the records kept since the forward.
                led.bump(f"{label} replay", B(it.volume / 2))
                led.note(label)
                led.free(kept.pop(it.index))
                grad = it.volume
            elif mode == "block":
                # Inverting re-records the internals.  The module inputs
                # alias the activation pair while inverting, so less than
                # the full record is ever new; at the coupling step all
                # recorded tensors count.
                aliased = sum(
                    (it.branch(n)[0].a for n in ("f", "g")
                     if it.branch(n) and it.branch(n)[0].layer.kind in PARAM_KINDS),
                    Fraction(0),
                )
                led.bump(f"{label} invert",
                         B(max(internals - aliased + it.volume / 2, Fraction(0))))
                led.alloc(f"{label} record", B(internals))
                led.note(label)
                led.free(B(internals))
                grad = it.volume
            else:
                # Hybrid walk: one branch value at a time, invconv halves
                # as scratch, pair and gradients swapped in place.
                half = it.volume / 2
                quarter = it.volume / 4 if it.branch_has_invconv() else Fraction(0)
                for phase in ("g", "f"):
                    led.alloc(f"{label} {phase} value", B(half))
                    led.bump(f"{label} {phase} scratch", B(quarter))
                    led.free(B(half))
                grad = it.volume
            led.free(cached.pop(it.index, 0))
            continue
        pl = it.placed[0]
        kind = it.kind
        if it.index in kept:
            if kind == "bn":
                led.note(label)  # elementwise gradients run in place
            else:
                led.alloc(label, B(pl.a))
                led.free(B(grad))
            if mode == "stored":
                led.free(kept.pop(it.index))
                grad = pl.a
            else:
                # the kept input becomes the walked value below this point
                led.free(B(value))
                kept.pop(it.index)
                grad, value = pl.a, pl.a
        elif mode == "stored":
            if kind in POOL_KINDS or kind in ("conv", "invconv"):
                led.alloc(label, B(pl.a))
                led.free(B(grad))
                grad = pl.a
            else:
                led.note(label)  # elementwise gradients run in place
                grad = pl.a
        elif it.index == 0:
            led.alloc(label, B(pl.a))
            led.free(B(grad))
            led.free(B(value))
            grad, value = pl.a, Fraction(0)
        else:
            if kind == "invconv":
                led.bump(f"{label} walk", B(pl.a / 2))
            led.note(label)
            grad, value = pl.a, pl.a
        led.free(cached.pop(it.index, 0))
    led.note("done")
    return led.peak, led.events


# -- reports -------------------------------------------------------------------


@dataclass
class MemoryReport:
    name: str
    mode: str
    h: int
    w: int
    bs: int
    weight_bytes: int
    activation_bytes_per_pixel: float
    gradient_bytes_per_pixel: float
    stats_bytes: int
    input_batch_bytes: int
    momentum_bytes: int
    overhead_bytes: float

    @property
    def pixels(self):
        return self.h * self.w * self.bs

    @property
    def bytes_per_pixel(self):
        return self.activation_bytes_per_pixel + self.gradient_bytes_per_pixel

    @property
    def activation_bytes(self):
        return self.activation_bytes_per_pixel * self.pixels

    @property
    def gradient_bytes(self):
        return self.gradient_bytes_per_pixel * self.pixels

    @property
    def budget_total(self):
        """Weights plus the per-pixel budget: the quantity the memory
        figures in the report CSVs compare against."""
        return self.weight_bytes + self.bytes_per_pixel * self.pixels

    @property
    def grand_total(self):
        return (
            self.budget_total
            + self.stats_bytes
            + self.input_batch_bytes
            + self.momentum_bytes
            + self.overhead_bytes
        )

    def rows(self):
        px = self.pixels
        return [
            ("weights", float(self.weight_bytes), self.weight_bytes / px),
            ("activations", self.activation_bytes, self.activation_bytes_per_pixel),
            ("gradients", self.gradient_bytes, self.gradient_bytes_per_pixel),
            ("budget_total", float(self.budget_total), self.budget_total / px),
            ("batch_stats", float(self.stats_bytes), self.stats_bytes / px),
            ("input_batch", float(self.input_batch_bytes), self.input_batch_bytes / px),
            ("momentum", float(self.momentum_bytes), self.momentum_bytes / px),
            ("executor_overhead", self.overhead_bytes, self.overhead_bytes / px),
            ("grand_total", float(self.grand_total), self.grand_total / px),
        ]


def memory_report(spec, mode, h, w, bs):
    return MemoryReport(
        name=spec.name,
        mode=mode,
        h=h,
        w=w,
        bs=bs,
        weight_bytes=weight_bytes(spec),
        activation_bytes_per_pixel=activation_bytes_per_pixel(spec, mode),
        gradient_bytes_per_pixel=gradient_bytes_per_pixel(spec, mode),
        stats_bytes=stats_bytes(spec, bs),
        input_batch_bytes=input_batch_bytes(spec, h, w, bs),
        momentum_bytes=weight_bytes(spec),
        overhead_bytes=overhead_bytes(spec, mode, h, w, bs),
    )


def report_csv(report):
    lines = ["component,bytes,bytes_per_pixel"]
    for name, total, per_px in report.rows():
        lines.append(f"{name},{total:.0f},{per_px:.3f}")
    return "\n".join(lines) + "\n"


# -- architecture files --------------------------------------------------------

_META_KEYS = ("name", "mode", "input_channels", "classes", "bpe")
_LAYER_KEYS = ("kind", "c_in", "c_out", "k", "pool", "block", "branch")
_INT_LAYER_KEYS = ("c_in", "c_out", "k", "pool", "block")


def parse_arch_text(text, source="<arch>"):
    meta = {"name": "arch", "mode": "stored", "input_channels": 3, "classes": 10,
            "bpe": BYTES_PER_ELEMENT}
    layers = []
    section = None
    current = None
    current_line = 0

    def fail(lineno, msg):
        raise ConfigError(f"{source}:{lineno}: {msg}")

    def finish_layer():
        if current is None:
            return
        for key in ("kind", "c_in", "c_out"):
            if key not in current:
                fail(current_line, f"layer is missing the {key!r} key")
        defaults = {"k": 1, "pool": 2 if current["kind"] in POOL_KINDS else 1}
        for key, val in defaults.items():
            current.setdefault(key, val)
        layers.append(LayerSpec(**current))

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                fail(lineno, "unterminated section header")
            name = line[1:-1].strip()
            if name not in ("meta", "layer"):
                fail(lineno, f"unknown section {name!r}")
            finish_layer()
            current = {} if name == "layer" else None
            current_line = lineno
            section = name
            continue
        if "=" not in line:
            fail(lineno, "expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if section is None:
            fail(lineno, "key outside of a section")
        if section == "meta":
            if key not in _META_KEYS:
                fail(lineno, f"unknown meta key {key!r}")
            if key in ("input_channels", "classes", "bpe"):
                try:
                    meta[key] = int(value)
                except ValueError:
                    fail(lineno, f"{key} wants an integer, got {value!r}")
            else:
                meta[key] = value
        else:
            if key not in _LAYER_KEYS:
                fail(lineno, f"unknown layer key {key!r}")
            if key == "kind" and value not in KINDS:
                fail(lineno, f"unknown kind {value!r}")
            if key in _INT_LAYER_KEYS:
                try:
                    current[key] = int(value)
                except ValueError:
                    fail(lineno, f"{key} wants an integer, got {value!r}")
            else:
                current[key] = value
    finish_layer()
    try:
        return ArchSpec(layers=layers, **meta)
    except ConfigError as err:
        raise ConfigError(f"{source}: {err}") from None


def parse_arch_file(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as err:
        raise ConfigError(f"cannot read architecture file {path}: {err}") from None
    return parse_arch_text(text, source=str(path))


def format_arch(spec):
    lines = [
        "[meta]",
        f"name = {spec.name}",
        f"mode = {spec.mode}",
        f"input_channels = {spec.input_channels}",
        f"classes = {spec.classes}",
        f"bpe = {spec.bpe}",
    ]
    for layer in spec.layers:
        lines.append("")
        lines.append("[layer]")
        lines.append(f"kind = {layer.kind}")
        lines.append(f"c_in = {layer.c_in}")
        lines.append(f"c_out = {layer.c_out}")
        if layer.k != 1:
            lines.append(f"k = {layer.k}")
        if layer.kind in POOL_KINDS and layer.pool != 2:
            lines.append(f"pool = {layer.pool}")
        if layer.block is not None:
            lines.append(f"block = {layer.block}")
            lines.append(f"branch = {layer.branch}")
    return "\n".join(lines) + "\n"


def write_arch_file(spec, path):
    Path(path).write_text(format_arch(spec))
