"""Embedding network: strided 3x3 conv blocks, global average pooling, dense.

Forward/backward are exact analytic implementations over numpy arrays and
are dtype-generic (float32 in training, float64 under the finite-difference
oracles). The checkpoint container is a versioned binary format.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from patternid.errors import ConfigError, FormatError, OptimizerError, ShapeError

KERNEL = 3
STRIDE = 2
PAD = 1

EMBEDDING_DIMS = (32, 64, 128, 256, 512)

CHECKPOINT_MAGIC = b"PIDM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the embedding network."""

    conv_channels: tuple[int, ...] = (16, 32, 64, 128)
    embedding_dim: int = 256
    l2_normalize: bool = False

    def validate(self) -> None:
        if len(self.conv_channels) < 1:
            raise ConfigError("need at least one conv block")
        if any(c < 1 for c in self.conv_channels):
            raise ConfigError(f"conv_channels must be positive, got {self.conv_channels}")
        if self.embedding_dim not in EMBEDDING_DIMS:
            raise ConfigError(
                f"embedding_dim {self.embedding_dim} not in {EMBEDDING_DIMS}"
            )


def param_names(config: ModelConfig) -> list[str]:
    """Canonical parameter order used by init, checkpoints and the optimizer."""
    names: list[str] = []
    for i in range(len(config.conv_channels)):
        names.extend([f"conv{i}.kernel", f"conv{i}.bias"])
    names.extend(["embed.weight", "embed.bias"])
    return names


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, c_out in enumerate(config.conv_channels):
        shapes[f"conv{i}.kernel"] = (c_out, c_in, KERNEL, KERNEL)
        shapes[f"conv{i}.bias"] = (c_out,)
        c_in = c_out
    shapes["embed.weight"] = (config.embedding_dim, c_in)
    shapes["embed.bias"] = (config.embedding_dim,)
    return shapes


def param_count(config: ModelConfig) -> int:
    """Total scalar parameters, a pure function of the architecture."""
    return sum(int(np.prod(shape)) for shape in param_shapes(config).values())


def init_params(config: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """He-style init for conv kernels, 1/fan_in for the dense map, zero biases."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        elif name.startswith("conv"):
            fan_in = shape[1] * KERNEL * KERNEL
            std = np.sqrt(2.0 / fan_in)
            params[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
        else:  # embed.weight
            fan_in = shape[1]
            std = np.sqrt(1.0 / fan_in)
            params[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return params


def preprocess(pixels: np.ndarray) -> np.ndarray:
    """Scale {0..255} gray pixels to [-1, 1]; returns (1, H, W) float32."""
    arr = np.asarray(pixels)
    if arr.ndim != 2:
        raise ShapeError(f"expected (H, W) image, got shape {arr.shape}")
    return (arr.astype(np.float32) / np.float32(127.5) - np.float32(1.0))[None, :, :]


def preprocess_batch(pixels: np.ndarray) -> np.ndarray:
    """Scale a (N, H, W) uint8 stack to a (N, 1, H, W) float32 batch."""
    arr = np.asarray(pixels)
    if arr.ndim != 3:
        raise ShapeError(f"expected (N, H, W) stack, got shape {arr.shape}")
    return (arr.astype(np.float32) / np.float32(127.5) - np.float32(1.0))[:, None, :, :]


def embed_pixels(
    params: dict[str, np.ndarray],
    config: ModelConfig,
    pixels: np.ndarray,
    chunk: int = 128,
) -> np.ndarray:
    """Embed a (N, H, W) uint8 stack; chunked to bound peak memory."""
    arr = np.asarray(pixels)
    outputs = []
    for start in range(0, arr.shape[0], chunk):
        batch = preprocess_batch(arr[start : start + chunk])
        emb, _ = forward(params, config, batch)
        outputs.append(emb.astype(np.float32))
    if not outputs:
        return np.zeros((0, config.embedding_dim), dtype=np.float32)
    return np.concatenate(outputs, axis=0)


def _conv_out(extent: int) -> int:
    return (extent + 2 * PAD - KERNEL) // STRIDE + 1


def forward(
    params: dict[str, np.ndarray], config: ModelConfig, batch: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Run the network on a (B, 1, H, W) batch.

    Returns (embeddings (B, embedding_dim), cache for backward). Embedding
    width does not depend on H, W thanks to the global average pool.
    """
    config.validate()
    x = np.asarray(batch)
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeError(f"expected (B, 1, H, W) batch, got shape {x.shape}")
    dtype = x.dtype

    # Channels-last internally; im2col turns each conv into one matmul.
    act = np.ascontiguousarray(np.transpose(x, (0, 2, 3, 1)))
    cache: dict = {"config": config, "blocks": [], "dtype": dtype, "batch_shape": x.shape}
    for i, c_out in enumerate(config.conv_channels):
        kernel = params[f"conv{i}.kernel"].astype(dtype, copy=False)
        bias = params[f"conv{i}.bias"].astype(dtype, copy=False)
        b, h, w, c_in = act.shape
        h_out, w_out = _conv_out(h), _conv_out(w)
        if h_out < 1 or w_out < 1:
            raise ShapeError(
                f"conv{i}: input {h}x{w} underflows to {h_out}x{w_out}"
            )
        padded = np.zeros((b, h + 2 * PAD, w + 2 * PAD, c_in), dtype=dtype)
        padded[:, PAD : PAD + h, PAD : PAD + w, :] = act
        col = np.empty((b, h_out, w_out, KERNEL * KERNEL * c_in), dtype=dtype)
        for ki in range(KERNEL):
            for kj in range(KERNEL):
                tap = padded[
                    :, ki : ki + STRIDE * h_out - 1 : STRIDE, kj : kj + STRIDE * w_out - 1 : STRIDE, :
                ]
                k = ki * KERNEL + kj
                col[:, :, :, k * c_in : (k + 1) * c_in] = tap
        # Row order (ki, kj, ci) matches the col fill above.
        w_col = kernel.transpose(2, 3, 1, 0).reshape(KERNEL * KERNEL * c_in, c_out)
        z = col.reshape(-1, KERNEL * KERNEL * c_in) @ w_col
        z += bias
        z = z.reshape(b, h_out, w_out, c_out)
        mask = z > 0
        act = z * mask
        cache["blocks"].append(
            {"col": col, "mask": mask, "in_hw": (h, w), "w_col": w_col, "c_in": c_in}
        )

    b, h, w, c_last = act.shape
    pooled = act.mean(axis=(1, 2))
    weight = params["embed.weight"].astype(dtype, copy=False)
    bias = params["embed.bias"].astype(dtype, copy=False)
    emb = pooled @ weight.T + bias
    cache["pool_hw"] = (h, w)
    cache["pooled"] = pooled
    cache["embed_weight"] = weight
    if config.l2_normalize:
        norms = np.sqrt(np.sum(emb * emb, axis=1, keepdims=True))
        norms = np.maximum(norms, np.asarray(1e-12, dtype=dtype))
        out = emb / norms
        cache["norms"] = norms
        cache["normed"] = out
    else:
        out = emb
    if not np.all(np.isfinite(out)):
        raise ShapeError("non-finite values in embeddings")
    return out, cache


def backward(cache: dict, upstream: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of all parameters given d(loss)/d(embeddings)."""
    config: ModelConfig = cache["config"]
    dtype = cache["dtype"]
    pooled = cache["pooled"]
    g = np.asarray(upstream, dtype=dtype)
    if g.shape != (pooled.shape[0], config.embedding_dim):
        raise ShapeError(
            f"upstream shape {g.shape} does not match embeddings "
            f"({pooled.shape[0]}, {config.embedding_dim})"
        )

    grads: dict[str, np.ndarray] = {}
    if config.l2_normalize:
        normed, norms = cache["normed"], cache["norms"]
        g = (g - normed * np.sum(normed * g, axis=1, keepdims=True)) / norms

    grads["embed.weight"] = g.T @ pooled
    grads["embed.bias"] = g.sum(axis=0)
    dpooled = g @ cache["embed_weight"]

    h, w = cache["pool_hw"]
    dact = np.broadcast_to(
        dpooled[:, None, None, :] / np.asarray(h * w, dtype=dtype),
        (g.shape[0], h, w, dpooled.shape[1]),
    )

    for i in range(len(config.conv_channels) - 1, -1, -1):
        block = cache["blocks"][i]
        col, mask, w_col, c_in = block["col"], block["mask"], block["w_col"], block["c_in"]
        h_in, w_in = block["in_hw"]
        dz = dact * mask
        b, h_out, w_out, c_out = dz.shape
        dz_flat = dz.reshape(-1, c_out)
        col_flat = col.reshape(-1, KERNEL * KERNEL * c_in)

        grads[f"conv{i}.bias"] = dz.sum(axis=(0, 1, 2))
        dw_col = col_flat.T @ dz_flat
        grads[f"conv{i}.kernel"] = (
            dw_col.reshape(KERNEL, KERNEL, c_in, c_out).transpose(3, 2, 0, 1).copy()
        )

        dcol = (dz_flat @ w_col.T).reshape(b, h_out, w_out, KERNEL * KERNEL * c_in)
        dpadded = np.zeros((b, h_in + 2 * PAD, w_in + 2 * PAD, c_in), dtype=dtype)
        for ki in range(KERNEL):
            for kj in range(KERNEL):
                k = ki * KERNEL + kj
                dpadded[
                    :, ki : ki + STRIDE * h_out - 1 : STRIDE, kj : kj + STRIDE * w_out - 1 : STRIDE, :
                ] += dcol[:, :, :, k * c_in : (k + 1) * c_in]
        dact = dpadded[:, PAD : PAD + h_in, PAD : PAD + w_in, :]

    return grads


@dataclass
class AdamState:
    """First/second moment accumulators plus the update hyperparameters."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(
    params: dict[str, np.ndarray],
    lr: float = 1e-5,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    zeros = {name: np.zeros_like(p) for name, p in params.items()}
    return AdamState(
        m=zeros,
        v={name: np.zeros_like(p) for name, p in params.items()},
        t=0,
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
    )


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; params and state update in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise OptimizerError(
                f"gradient for {name} missing or mis-shaped "
                f"({None if g is None else g.shape} vs {p.shape})"
            )
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient in {name}; step aborted")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


def checkpoint_bytes(params: dict[str, np.ndarray], config: ModelConfig) -> bytes:
    """Serialize (params, config) into the versioned checkpoint container."""
    config.validate()
    names = param_names(config)
    shapes = param_shapes(config)
    manifest = []
    blobs = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        if arr.shape != shapes[name]:
            raise FormatError(f"{name}: shape {arr.shape} does not match config {shapes[name]}")
        raw = arr.tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "byte_offset": offset,
                "byte_length": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {
            "config": {
                "conv_channels": list(config.conv_channels),
                "embedding_dim": config.embedding_dim,
                "l2_normalize": config.l2_normalize,
            },
            "tensors": manifest,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += np.array(CHECKPOINT_VERSION, dtype="<u4").tobytes()
    out += np.array(len(header), dtype="<u8").tobytes()
    out += header
    for raw in blobs:
        out += raw
    return bytes(out)


def save_checkpoint(params: dict[str, np.ndarray], config: ModelConfig, path: Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(params, config))


def parse_checkpoint(data: bytes) -> tuple[dict[str, np.ndarray], ModelConfig]:
    """Decode a checkpoint blob, validating the container strictly."""
    if len(data) < 16:
        raise FormatError(f"checkpoint truncated at offset {len(data)}: no header")
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {data[:4]!r} at offset 0")
    version = int(np.frombuffer(data[4:8], dtype="<u4")[0])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at offset 4")
    header_len = int(np.frombuffer(data[8:16], dtype="<u8")[0])
    if 16 + header_len > len(data):
        raise FormatError(f"header claims {header_len} bytes but file ends at {len(data)}")
    try:
        header = json.loads(data[16 : 16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint header at offset 16: {exc}") from exc
    cfg_doc = header["config"]
    config = ModelConfig(
        conv_channels=tuple(cfg_doc["conv_channels"]),
        embedding_dim=cfg_doc["embedding_dim"],
        l2_normalize=cfg_doc["l2_normalize"],
    )
    config.validate()
    base = 16 + header_len
    params: dict[str, np.ndarray] = {}
    total = 0
    for entry in header["tensors"]:
        start = base + entry["byte_offset"]
        end = start + entry["byte_length"]
        if end > len(data):
            raise FormatError(
                f"tensor {entry['name']} extends to offset {end}, past end {len(data)}"
            )
        arr = np.frombuffer(data[start:end], dtype="<f4").reshape(entry["shape"]).copy()
        params[entry["name"]] = arr
        total += entry["byte_length"]
    if base + total != len(data):
        raise FormatError(
            f"container size mismatch: expected {base + total} bytes, file has {len(data)}"
        )
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in params or params[name].shape != shape:
            raise FormatError(f"tensor {name} missing or mis-shaped in checkpoint")
    return params, config


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], ModelConfig]:
    return parse_checkpoint(Path(path).read_bytes())


def fingerprint(data: bytes) -> str:
    """64-bit fingerprint of a checkpoint blob, hex encoded."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def fingerprint_file(path: Path) -> str:
    return fingerprint(Path(path).read_bytes())
