"""Toy multi-exit network: stacked dense blocks with one classifier head each.

Exit c consumes blocks 1..c plus its own affine head, so deeper exits are
strictly more expensive. The default architecture is 4 blocks of one
64-wide relu layer. Cost accounting counts a dense in->out layer as
2*in*out + out FLOPs (multiply-accumulate = 2, bias add = 1); activations
are free.

Checkpoints are JSON with decimal float arrays. Python's float repr is
exact for 64-bit values, so save -> load -> forward is bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigurationError, ParseError, VersionedFormatError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    class_count: int
    block_widths: tuple[tuple[int, ...], ...] = ((64,), (64,), (64,), (64,))

    def __post_init__(self):
        object.__setattr__(self, "block_widths",
                           tuple(tuple(b) for b in self.block_widths))
        if self.input_dim < 1 or self.class_count < 2:
            raise ConfigurationError("ModelSpec: need input_dim >= 1, classes >= 2")
        if len(self.block_widths) < 2:
            raise ConfigurationError("ModelSpec: need at least 2 blocks (exits)")
        if any(w < 1 for block in self.block_widths for w in block):
            raise ConfigurationError("ModelSpec: layer widths must be positive")

    @property
    def exit_count(self) -> int:
        return len(self.block_widths)

    def block_dims(self, c: int) -> list[tuple[int, int]]:
        """(fan_in, fan_out) pairs for the dense layers of block c (1-based)."""
        fan_in = self.input_dim if c == 1 else self.block_widths[c - 2][-1]
        dims = []
        for width in self.block_widths[c - 1]:
            dims.append((fan_in, width))
            fan_in = width
        return dims


@dataclass(frozen=True)
class ExitCosts:
    flops: tuple[float, ...]

    def __post_init__(self):
        if any(lo >= hi for lo, hi in zip(self.flops, self.flops[1:])):
            raise ConfigurationError("ExitCosts: costs must be strictly increasing")

    def __getitem__(self, c: int) -> float:
        return self.flops[c]

    def __len__(self) -> int:
        return len(self.flops)


class MultiExitModel:
    """Parameters live as graph leaves so training can differentiate through
    `forward_all`; inference just reads `.data` off the outputs."""

    def __init__(self, spec: ModelSpec, blocks, heads, meta=None):
        self.spec = spec
        self.blocks = blocks   # list (per block) of [(W, b), ...]
        self.heads = heads     # list of (W, b)
        self.meta = dict(meta or {})

    @classmethod
    def build(cls, spec: ModelSpec, seed: int = 0) -> "MultiExitModel":
        """Seeded uniform init in +-sqrt(6 / (fan_in + fan_out))."""
        rng = np.random.default_rng(seed)

        def dense(fan_in, fan_out):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            w = dc.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)),
                          requires_grad=True)
            b = dc.Tensor(np.zeros(fan_out), requires_grad=True)
            return w, b

        blocks = []
        for c in range(1, spec.exit_count + 1):
            blocks.append([dense(*dims) for dims in spec.block_dims(c)])
        heads = [dense(spec.block_widths[c][-1], spec.class_count)
                 for c in range(spec.exit_count)]
        return cls(spec, blocks, heads, meta={"seed": seed})

    def parameters(self) -> list[dc.Tensor]:
        params = []
        for block in self.blocks:
            for w, b in block:
                params.extend((w, b))
        for w, b in self.heads:
            params.extend((w, b))
        return params

    def forward_all(self, x) -> list[dc.Tensor]:
        """Logit tensors for every exit; exit c depends on blocks 1..c only."""
        x = x if isinstance(x, dc.Tensor) else dc.Tensor(np.atleast_2d(x))
        if x.shape[-1] != self.spec.input_dim:
            raise ConfigurationError(
                f"forward_all: input width {x.shape[-1]} != {self.spec.input_dim}")
        rows = x.shape[0]
        logits = []
        h = x
        for block, head in zip(self.blocks, self.heads):
            for w, b in block:
                h = dc.relu(h @ w + _rows(b, rows))
            w, b = head
            logits.append(h @ w + _rows(b, rows))
        return logits

    def predict_logits(self, x) -> list[np.ndarray]:
        return [t.data for t in self.forward_all(x)]

    def state_arrays(self):
        blocks = [[[w.data, b.data] for w, b in block] for block in self.blocks]
        heads = [[w.data, b.data] for w, b in self.heads]
        return blocks, heads

    def copy_state(self):
        blocks, heads = self.state_arrays()
        return ([[ [w.copy(), b.copy()] for w, b in block] for block in blocks],
                [[w.copy(), b.copy()] for w, b in heads])

    def load_state(self, state) -> None:
        blocks, heads = state
        for block, saved in zip(self.blocks, blocks):
            for (w, b), (sw, sb) in zip(block, saved):
                w.data = np.asarray(sw, dtype=np.float64)
                b.data = np.asarray(sb, dtype=np.float64)
        for (w, b), (sw, sb) in zip(self.heads, heads):
            w.data = np.asarray(sw, dtype=np.float64)
            b.data = np.asarray(sb, dtype=np.float64)


def _rows(bias: dc.Tensor, rows: int) -> dc.Tensor:
    col = dc.reshape(bias, (1, bias.shape[0]))
    return dc.Tensor(np.ones((rows, 1))) @ col


def _dense_flops(fan_in: int, fan_out: int) -> int:
    return 2 * fan_in * fan_out + fan_out


def exit_costs(model: MultiExitModel) -> ExitCosts:
    """Cumulative FLOPs per exit: blocks 1..c plus head c."""
    spec = model.spec
    block_cost = []
    for c in range(1, spec.exit_count + 1):
        block_cost.append(sum(_dense_flops(*d) for d in spec.block_dims(c)))
    costs = []
    running = 0
    for c in range(spec.exit_count):
        running += block_cost[c]
        head_in = spec.block_widths[c][-1]
        costs.append(float(running + _dense_flops(head_in, spec.class_count)))
    return ExitCosts(flops=tuple(costs))


def save(model: MultiExitModel, path) -> None:
    from .cli import atomic_write
    blocks, heads = model.state_arrays()
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "arch": {
            "input_dim": model.spec.input_dim,
            "class_count": model.spec.class_count,
            "block_widths": [list(b) for b in model.spec.block_widths],
        },
        "params": {
            "blocks": [[[w.tolist(), b.tolist()] for w, b in block]
                       for block in blocks],
            "heads": [[w.tolist(), b.tolist()] for w, b in heads],
        },
        "meta": model.meta,
    }
    with atomic_write(path) as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load(path) -> MultiExitModel:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(
            f"checkpoint {path}: malformed JSON at byte offset {err.pos}") from err
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise ParseError(f"checkpoint {path}: missing format_version")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise VersionedFormatError(
            f"checkpoint {path}: format version {payload['format_version']!r} "
            f"unsupported (expected {CHECKPOINT_VERSION})")
    try:
        arch = payload["arch"]
        spec = ModelSpec(input_dim=int(arch["input_dim"]),
                         class_count=int(arch["class_count"]),
                         block_widths=tuple(tuple(int(w) for w in b)
                                            for b in arch["block_widths"]))
        blocks = [[(dc.Tensor(np.asarray(w, float), requires_grad=True),
                    dc.Tensor(np.asarray(b, float), requires_grad=True))
                   for w, b in block] for block in payload["params"]["blocks"]]
        heads = [(dc.Tensor(np.asarray(w, float), requires_grad=True),
                  dc.Tensor(np.asarray(b, float), requires_grad=True))
                 for w, b in payload["params"]["heads"]]
    except (KeyError, TypeError, ValueError) as err:
        raise ParseError(f"checkpoint {path}: invalid structure ({err})") from err
    model = MultiExitModel(spec, blocks, heads, meta=payload.get("meta", {}))
    _validate_shapes(model)
    return model


def _validate_shapes(model: MultiExitModel) -> None:
    spec = model.spec
    if len(model.blocks) != spec.exit_count or len(model.heads) != spec.exit_count:
        raise ParseError("checkpoint: block/head count mismatch with arch")
    for c in range(1, spec.exit_count + 1):
        dims = spec.block_dims(c)
        block = model.blocks[c - 1]
        if len(block) != len(dims):
            raise ParseError(f"checkpoint: block {c} layer count mismatch")
        for (w, b), (fan_in, fan_out) in zip(block, dims):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ParseError(f"checkpoint: block {c} shape mismatch")
        hw, hb = model.heads[c - 1]
        if hw.shape != (spec.block_widths[c - 1][-1], spec.class_count):
            raise ParseError(f"checkpoint: head {c} shape mismatch")
        if hb.shape != (spec.class_count,):
            raise ParseError(f"checkpoint: head {c} bias shape mismatch")
