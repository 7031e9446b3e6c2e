"""Model architectures and the forward/backward engine.

Two architectures are supported: ``cnn5`` (the five-layer CNN used for
28x28 grayscale images: conv3x3x32 + ReLU, conv3x3x64 + ReLU, maxpool 2x2,
dropout 0.5, FC 128 + ReLU, dropout 0.5, FC classes) and ``mlp-small``
(flatten, FC hidden + ReLU, FC classes) for cheap experiments and tests.

Convolutions use valid padding and stride 1 and are lowered to GEMMs.
Callers that run many batches pass a ``scratch`` dict so the large
im2col/output buffers are reused instead of reallocated (page faults on
fresh 40MB buffers dominate the runtime otherwise).  The engine is
dtype-agnostic: pass float64 inputs/params to run the whole pipeline in
double precision (used by the finite-difference gradient checks).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layermap import ArchitectureError, LayerEntry, LayerMap

__all__ = ["LayerDef", "Architecture", "cnn5", "mlp_small", "get_architecture",
           "forward", "backward"]


@dataclass(frozen=True)
class LayerDef:
    op: str  # conv | dense | relu | maxpool | dropout | flatten
    name: str = ""
    kernel: tuple = ()  # conv: (kh, kw, cin, cout); dense: (fan_in, fan_out)
    pool: int = 2
    rate: float = 0.5


@dataclass(frozen=True)
class Architecture:
    arch_id: str
    input_shape: tuple[int, ...]  # (H, W, C) or (D,)
    num_classes: int
    layers: tuple[LayerDef, ...]

    def param_defs(self) -> list[tuple[str, str, tuple[int, ...]]]:
        out = []
        for ld in self.layers:
            if ld.op == "conv":
                kh, kw, cin, cout = ld.kernel
                out.append((f"{ld.name}.weight", "weight", (kh, kw, cin, cout)))
                out.append((f"{ld.name}.bias", "bias", (cout,)))
            elif ld.op == "dense":
                fan_in, fan_out = ld.kernel
                out.append((f"{ld.name}.weight", "weight", (fan_in, fan_out)))
                out.append((f"{ld.name}.bias", "bias", (fan_out,)))
        return out

    def layer_names(self) -> list[str]:
        return [name for name, _, _ in self.param_defs()]

    def init_params(self, seed: int) -> LayerMap:
        """Kaiming-uniform (fan-in) weights, zero biases."""
        rng = np.random.default_rng(seed)
        entries = []
        for name, kind, shape in self.param_defs():
            if kind == "weight":
                fan_in = int(np.prod(shape[:-1]))
                bound = np.sqrt(6.0 / fan_in)
                vals = rng.uniform(-bound, bound, size=int(np.prod(shape))).astype(np.float32)
            else:
                vals = np.zeros(int(np.prod(shape)), dtype=np.float32)
            entries.append(LayerEntry(name, kind, shape, vals))
        return LayerMap(self.arch_id, entries)

    def check_model(self, model: LayerMap) -> None:
        defs = self.param_defs()
        if model.arch_id != self.arch_id or len(model) != len(defs):
            raise ArchitectureError(
                f"model {model.arch_id!r} does not match architecture {self.arch_id!r}"
            )
        for entry, (name, kind, shape) in zip(model.entries, defs):
            if entry.name != name or entry.kind != kind or entry.shape != shape:
                raise ArchitectureError(
                    f"entry {entry.name!r} ({entry.shape}) does not match "
                    f"architecture slot {name!r} ({shape})"
                )


def cnn5(num_classes: int = 10) -> Architecture:
    h = w = 28
    after_conv = (h - 2 - 2) // 2  # two valid 3x3 convs, then 2x2 pool
    flat = after_conv * after_conv * 64
    return Architecture(
        arch_id="cnn5",
        input_shape=(28, 28, 1),
        num_classes=num_classes,
        layers=(
            LayerDef("conv", "conv1", (3, 3, 1, 32)),
            LayerDef("relu"),
            LayerDef("conv", "conv2", (3, 3, 32, 64)),
            LayerDef("relu"),
            LayerDef("maxpool", pool=2),
            LayerDef("dropout", rate=0.5),
            LayerDef("flatten"),
            LayerDef("dense", "fc1", (flat, 128)),
            LayerDef("relu"),
            LayerDef("dropout", rate=0.5),
            LayerDef("dense", "fc2", (128, num_classes)),
        ),
    )


def mlp_small(input_shape: tuple[int, ...] = (2,), hidden: int = 32,
              num_classes: int = 2) -> Architecture:
    d = int(np.prod(input_shape))
    return Architecture(
        arch_id=f"mlp-small[{d}-{hidden}-{num_classes}]",
        input_shape=tuple(input_shape),
        num_classes=num_classes,
        layers=(
            LayerDef("flatten"),
            LayerDef("dense", "fc1", (d, hidden)),
            LayerDef("relu"),
            LayerDef("dense", "fc2", (hidden, num_classes)),
        ),
    )


def get_architecture(arch_id: str, **kwargs) -> Architecture:
    if arch_id == "cnn5":
        return cnn5(**kwargs)
    if arch_id == "mlp-small" or arch_id.startswith("mlp-small["):
        return mlp_small(**kwargs)
    raise ArchitectureError(f"unknown architecture id {arch_id!r}")


# -- scratch buffers ------------------------------------------------------

def _buf(scratch, key, shape, dtype) -> np.ndarray:
    """Reusable uninitialized buffer; fresh allocation when scratch is None."""
    if scratch is None:
        return np.empty(shape, dtype=dtype)
    full = key + (shape, np.dtype(dtype).str)
    arr = scratch.get(full)
    if arr is None:
        arr = np.empty(shape, dtype=dtype)
        scratch[full] = arr
    return arr


# -- conv lowering --------------------------------------------------------

def _conv_forward(x, w, bias, p, scratch, want_cache):
    kh, kw, cin, cout = w.shape
    b, h, w_in, _ = x.shape
    ho, wo = h - kh + 1, w_in - kw + 1
    n, kk = b * ho * wo, kh * kw
    out = _buf(scratch, ("convout", p), (n, cout), x.dtype)
    if want_cache:
        # interleaved im2col: one GEMM forward, one GEMM for dW later
        cols = _buf(scratch, ("cols", p), (n, kk * cin), x.dtype)
        colsv = cols.reshape(b, ho, wo, kk, cin)
        for ky in range(kh):
            for kx in range(kw):
                colsv[:, :, :, ky * kw + kx, :] = x[:, ky:ky + ho, kx:kx + wo, :]
        np.matmul(cols, w.reshape(kk * cin, cout), out=out)
        cache = (cols, x.shape)
    else:
        # contiguous per-offset blocks: cheapest assembly for inference
        blocks = _buf(scratch, ("blocks", p), (kk, n, cin), x.dtype)
        blocksv = blocks.reshape(kk, b, ho, wo, cin)
        for ky in range(kh):
            for kx in range(kw):
                blocksv[ky * kw + kx] = x[:, ky:ky + ho, kx:kx + wo, :]
        if cin == 1:
            np.matmul(blocks.reshape(kk, n).T, w.reshape(kk, cout), out=out)
        else:
            wmat = w.reshape(kk, cin, cout)
            np.matmul(blocks[0], wmat[0], out=out)
            tmp = _buf(scratch, ("convtmp", p), (n, cout), x.dtype)
            for k in range(1, kk):
                np.matmul(blocks[k], wmat[k], out=tmp)
                out += tmp
        cache = None
    out += bias
    return out.reshape(b, ho, wo, cout), cache


def _conv_backward(dy, w, cols, in_shape, need_dx, p, scratch):
    kh, kw, cin, cout = w.shape
    b, h, w_in, _ = in_shape
    ho, wo = h - kh + 1, w_in - kw + 1
    n, kk = b * ho * wo, kh * kw
    dyf = dy.reshape(n, cout)
    dw = np.matmul(cols.T, dyf).reshape(w.shape)
    db = dyf.sum(axis=0)
    dx = None
    if need_dx:
        dcols = _buf(scratch, ("dcols", p), (n, kk * cin), dy.dtype)
        np.matmul(dyf, w.reshape(kk * cin, cout).T, out=dcols)
        dcolsv = dcols.reshape(b, ho, wo, kk, cin)
        dx = _buf(scratch, ("dx", p), in_shape, dy.dtype)
        dx[:] = 0
        for ky in range(kh):
            for kx in range(kw):
                dx[:, ky:ky + ho, kx:kx + wo, :] += dcolsv[:, :, :, ky * kw + kx, :]
    return dw, db, dx


def _maxpool_forward(x, k, scratch):
    out = _buf(scratch, ("pool_out",), x[:, ::k, ::k, :].shape, x.dtype)
    out[:] = x[:, ::k, ::k, :]
    for ky in range(k):
        for kx in range(k):
            if ky or kx:
                np.maximum(out, x[:, ky::k, kx::k, :], out=out)
    return out


def _maxpool_backward(dy, x, out, k, scratch):
    # winner = first window cell (row-major scan) equal to the max
    dx = _buf(scratch, ("pool_dx",), x.shape, dy.dtype)
    taken = _buf(scratch, ("pool_taken",), out.shape, bool)
    taken[:] = False
    for ky in range(k):
        for kx in range(k):
            win = (x[:, ky::k, kx::k, :] == out) & ~taken
            dx[:, ky::k, kx::k, :] = dy * win
            taken |= win
    return dx


# -- forward / backward -------------------------------------------------

def forward(arch: Architecture, params: list[np.ndarray], x: np.ndarray, *,
            train: bool = False, rng: np.random.Generator | None = None,
            want_cache: bool = False, scratch: dict | None = None):
    """Run the network; returns (logits, cache).

    ``params`` is the list of per-entry arrays in LayerMap order, already
    reshaped to their natural shapes.  Dropout fires only when ``train``
    is set and an ``rng`` is supplied.  Buffers handed out from
    ``scratch`` are only valid until the next forward/backward call that
    shares the dict.
    """
    cache: list = []
    p = 0
    out = x
    for ld in arch.layers:
        if ld.op == "conv":
            w, bias = params[p], params[p + 1]
            out, c = _conv_forward(out, w, bias, p, scratch, want_cache)
            cache.append(c)
            p += 2
        elif ld.op == "dense":
            w, bias = params[p], params[p + 1]
            p += 2
            cache.append(out if want_cache else None)
            new = _buf(scratch, ("dense", p), (out.shape[0], w.shape[1]), out.dtype)
            np.matmul(out, w, out=new)
            new += bias
            out = new
        elif ld.op == "relu":
            buf = _buf(scratch, ("relu", len(cache)), out.shape, out.dtype)
            out = np.maximum(out, 0, out=buf)
            cache.append(out if want_cache else None)
        elif ld.op == "maxpool":
            xin = out
            out = _maxpool_forward(xin, ld.pool, scratch)
            cache.append((xin, out) if want_cache else None)
        elif ld.op == "dropout":
            if train and rng is not None:
                keep = 1.0 - ld.rate
                mask = rng.random(out.shape, dtype=np.float32) < keep
                scaled = mask.astype(out.dtype) / out.dtype.type(keep)
                buf = _buf(scratch, ("drop", len(cache)), out.shape, out.dtype)
                out = np.multiply(out, scaled, out=buf)
                cache.append(scaled if want_cache else None)
            else:
                cache.append(None)
        elif ld.op == "flatten":
            cache.append(out.shape if want_cache else None)
            out = out.reshape(out.shape[0], -1)
        else:
            raise ArchitectureError(f"unknown layer op {ld.op!r}")
    return out, cache


def backward(arch: Architecture, params: list[np.ndarray], cache: list,
             dlogits: np.ndarray, *, need_input_grad: bool = False,
             scratch: dict | None = None):
    """Backpropagate ``dlogits``; returns per-entry gradients in LayerMap order.

    The gradient w.r.t. the network input is skipped unless requested (the
    first layer never needs it during training).
    """
    grads: list = [None] * sum(2 for ld in arch.layers if ld.op in ("conv", "dense"))
    p = len(grads)
    dy = dlogits
    first_param_layer = next(
        i for i, ld in enumerate(arch.layers) if ld.op in ("conv", "dense")
    )
    for li in range(len(arch.layers) - 1, -1, -1):
        ld = arch.layers[li]
        c = cache[li]
        if ld.op == "conv":
            p -= 2
            cols, in_shape = c
            need_dx = li > first_param_layer or need_input_grad
            dw, db, dx = _conv_backward(dy, params[p], cols, in_shape, need_dx,
                                        p, scratch)
            grads[p], grads[p + 1] = dw, db
            dy = dx
        elif ld.op == "dense":
            p -= 2
            w = params[p]
            grads[p] = c.T @ dy
            grads[p + 1] = dy.sum(axis=0)
            if li > first_param_layer or need_input_grad:
                dy = dy @ w.T
            else:
                dy = None
        elif dy is None:
            continue  # below the first parameterized layer, nothing to do
        elif ld.op == "relu":
            dy = dy * (c > 0)
        elif ld.op == "maxpool":
            xin, out = c
            dy = _maxpool_backward(dy, xin, out, ld.pool, scratch)
        elif ld.op == "dropout":
            if c is not None:
                dy = dy * c
        elif ld.op == "flatten":
            dy = dy.reshape(c)
    return grads, dy
