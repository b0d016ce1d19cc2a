"""The recurrent driving policy: pure forward math and parameter I/O.

Raw LiDAR ranges are squashed into "spatial pressure" tokens in (0, 1]
(1 at zero range, decaying to 0 with distance), the scalar ego speed is
lifted to a learnable embedding (replaceable by a learnable mask token
during training), a single GRU cell carries the temporal state, and a
two-layer MLP decodes the hidden state into (speed, steering) commands.
Everything is plain numpy in double precision; a packed single/double
precision inference session serves the real-time path.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np


class PolicyError(Exception):
    pass


class ShapeMismatch(PolicyError):
    pass


class VersionMismatch(PolicyError):
    pass


class CorruptCheckpoint(PolicyError):
    pass


@dataclass(frozen=True)
class PolicyConfig:
    n_beams: int = 360
    embed_dim: int = 16
    hidden_multiplier: int = 4
    sigmoid_k: float = 0.5        # 1/m; sets the effective sensing range
    use_speed_input: bool = True
    mlp_hidden: int | None = None  # defaults to hidden_dim // 4

    @property
    def input_dim(self) -> int:
        return self.n_beams + (self.embed_dim if self.use_speed_input else 0)

    @property
    def hidden_dim(self) -> int:
        return self.hidden_multiplier * self.input_dim

    @property
    def mlp_hidden_dim(self) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else max(1, self.hidden_dim // 4)


# field name -> shape factory; also the fixed checkpoint serialization order
def _tensor_shapes(cfg: PolicyConfig) -> dict[str, tuple[int, ...]]:
    i, h, m, e = cfg.input_dim, cfg.hidden_dim, cfg.mlp_hidden_dim, cfg.embed_dim
    return {
        "w_upd": (h, i), "u_upd": (h, h), "b_upd": (h,),
        "w_res": (h, i), "u_res": (h, h), "b_res": (h,),
        "w_cand": (h, i), "u_cand": (h, h), "b_cand_x": (h,), "b_cand_h": (h,),
        "speed_w": (e,), "speed_b": (e,), "mask_embed": (e,),
        "dec_w1": (m, h), "dec_b1": (m,), "dec_w2": (2, m), "dec_b2": (2,),
    }


@dataclass
class PolicyParameters:
    w_upd: np.ndarray
    u_upd: np.ndarray
    b_upd: np.ndarray
    w_res: np.ndarray
    u_res: np.ndarray
    b_res: np.ndarray
    w_cand: np.ndarray
    u_cand: np.ndarray
    b_cand_x: np.ndarray
    b_cand_h: np.ndarray
    speed_w: np.ndarray
    speed_b: np.ndarray
    mask_embed: np.ndarray
    dec_w1: np.ndarray
    dec_b1: np.ndarray
    dec_w2: np.ndarray
    dec_b2: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in TENSOR_ORDER}

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(**{k: v.copy() for k, v in self.tensors().items()})

    def validate(self, cfg: PolicyConfig) -> None:
        for name, shape in _tensor_shapes(cfg).items():
            t = getattr(self, name)
            if t.shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {t.shape}")
            if not np.all(np.isfinite(t)):
                raise PolicyError(f"{name} contains non-finite entries")


TENSOR_ORDER = tuple(_tensor_shapes(PolicyConfig()).keys())


def init_params(cfg: PolicyConfig, rng: np.random.Generator) -> PolicyParameters:
    """Uniform init in [-1/sqrt(hidden_dim), +1/sqrt(hidden_dim)] for every
    tensor, drawn in the fixed tensor order (deterministic per seed)."""
    bound = 1.0 / np.sqrt(cfg.hidden_dim)
    tensors = {name: rng.uniform(-bound, bound, size=shape)
               for name, shape in _tensor_shapes(cfg).items()}
    return PolicyParameters(**tensors)


def normalize_scan(z: np.ndarray, sigmoid_k: float) -> np.ndarray:
    """Pressure token per beam: 2 / (1 + e^(k x)); 1 at contact, -> 0 far."""
    z = np.asarray(z, dtype=float)
    return 2.0 / (1.0 + np.exp(np.minimum(sigmoid_k * z, 700.0)))


def normalize_scan_grad(z: np.ndarray, sigmoid_k: float) -> np.ndarray:
    """Analytic derivative of the pressure token wrt the raw range."""
    z = np.asarray(z, dtype=float)
    e = np.exp(np.minimum(-sigmoid_k * z, 700.0))
    return -2.0 * sigmoid_k * e / (1.0 + e) ** 2


def embed_speed(v, params: PolicyParameters, masked: bool = False) -> np.ndarray:
    """Affine lift of the scalar speed, or the mask token when masked."""
    if masked:
        return params.mask_embed.copy()
    return params.speed_w * v + params.speed_b


def _logistic(x):
    return 1.0 / (1.0 + np.exp(-x))


def gru_step(x: np.ndarray, h: np.ndarray, params: PolicyParameters) -> np.ndarray:
    """One GRU cell update. Supports (I,)/(H,) vectors or (B, I)/(B, H)
    batches. Hidden entries stay inside (-1, 1) for in-range inputs."""
    if x.shape[-1] != params.w_upd.shape[1] or h.shape[-1] != params.u_upd.shape[1]:
        raise ShapeMismatch(
            f"gru_step: x{x.shape} / h{h.shape} vs W{params.w_upd.shape}")
    u = _logistic(x @ params.w_upd.T + h @ params.u_upd.T + params.b_upd)
    r = _logistic(x @ params.w_res.T + h @ params.u_res.T + params.b_res)
    n = np.tanh(x @ params.w_cand.T + params.b_cand_x
                + r * (h @ params.u_cand.T + params.b_cand_h))
    return (1.0 - u) * n + u * h


def decode(h: np.ndarray, params: PolicyParameters) -> np.ndarray:
    """Two-layer rectifier MLP head -> raw (speed, steering). No clamping;
    the simulator's actuator model saturates on application."""
    if h.shape[-1] != params.dec_w1.shape[1]:
        raise ShapeMismatch(f"decode: h{h.shape} vs W1{params.dec_w1.shape}")
    hidden = np.maximum(h @ params.dec_w1.T + params.dec_b1, 0.0)
    return hidden @ params.dec_w2.T + params.dec_b2


def forward_step(scan: np.ndarray, v: float, h: np.ndarray,
                 params: PolicyParameters, cfg: PolicyConfig,
                 masked: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """One observation -> (action, next hidden state)."""
    tokens = normalize_scan(scan, cfg.sigmoid_k)
    if cfg.use_speed_input:
        x = np.concatenate([tokens, embed_speed(v, params, masked)])
    else:
        x = tokens
    h_next = gru_step(x, h, params)
    return decode(h_next, params), h_next


def zero_hidden(cfg: PolicyConfig) -> np.ndarray:
    return np.zeros(cfg.hidden_dim)


class InferenceSession:
    """Packed weights for low-latency single-step inference.

    The three input matrices (and the three hidden matrices) are stacked so
    one gemv each serves all gates. dtype float32 halves the memory traffic
    that bounds per-step latency; float64 reproduces forward_step exactly.
    """

    def __init__(self, params: PolicyParameters, cfg: PolicyConfig,
                 dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        h = cfg.hidden_dim
        self._h = h
        self.wx = np.ascontiguousarray(
            np.vstack([params.w_upd, params.w_res, params.w_cand]), dtype=dtype)
        self.uh = np.ascontiguousarray(
            np.vstack([params.u_upd, params.u_res, params.u_cand]), dtype=dtype)
        self.bx = np.concatenate([params.b_upd, params.b_res, params.b_cand_x]).astype(dtype)
        self.b_cand_h = params.b_cand_h.astype(dtype)
        self.speed_w = params.speed_w.astype(dtype)
        self.speed_b = params.speed_b.astype(dtype)
        self.mask_embed = params.mask_embed.astype(dtype)
        self.dec_w1 = np.ascontiguousarray(params.dec_w1, dtype=dtype)
        self.dec_b1 = params.dec_b1.astype(dtype)
        self.dec_w2 = np.ascontiguousarray(params.dec_w2, dtype=dtype)
        self.dec_b2 = params.dec_b2.astype(dtype)
        self._x = np.empty(cfg.input_dim, dtype=dtype)
        self._px = np.empty(3 * h, dtype=dtype)
        self._ph = np.empty(3 * h, dtype=dtype)

    def step(self, scan: np.ndarray, v: float, h: np.ndarray,
             masked: bool = False) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        x = self._x
        nb = cfg.n_beams
        np.minimum(cfg.sigmoid_k * np.asarray(scan, dtype=self.dtype), 700.0, out=x[:nb])
        np.exp(x[:nb], out=x[:nb])
        x[:nb] += 1.0
        np.divide(2.0, x[:nb], out=x[:nb])
        if cfg.use_speed_input:
            x[nb:] = self.mask_embed if masked else self.speed_w * v + self.speed_b
        np.dot(self.wx, x, out=self._px)
        self._px += self.bx
        np.dot(self.uh, h, out=self._ph)
        hd = self._h
        u = _logistic(self._px[:hd] + self._ph[:hd])
        r = _logistic(self._px[hd:2 * hd] + self._ph[hd:2 * hd])
        n = np.tanh(self._px[2 * hd:] + r * (self._ph[2 * hd:] + self.b_cand_h))
        h_next = (1.0 - u) * n + u * h
        hidden = np.maximum(self.dec_w1 @ h_next + self.dec_b1, 0.0)
        action = self.dec_w2 @ hidden + self.dec_b2
        return action, h_next

    def zero_hidden(self) -> np.ndarray:
        return np.zeros(self._h, dtype=self.dtype)


# ---------------------------------------------------------------------------
# checkpoint format: magic 'E2R1', u32 version, u32 config JSON length,
# config JSON (sorted keys), then tensors as little-endian float64 in
# TENSOR_ORDER


CHECKPOINT_MAGIC = b"E2R1"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: PolicyParameters, cfg: PolicyConfig) -> bytes:
    params.validate(cfg)
    cfg_json = json.dumps(asdict(cfg), sort_keys=True).encode()
    blob = bytearray()
    blob += CHECKPOINT_MAGIC
    blob += struct.pack("<I", CHECKPOINT_VERSION)
    blob += struct.pack("<I", len(cfg_json))
    blob += cfg_json
    for name in TENSOR_ORDER:
        blob += np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes()
    return bytes(blob)


def load_checkpoint(data: bytes) -> tuple[PolicyParameters, PolicyConfig]:
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint("bad magic")
    version = struct.unpack("<I", data[4:8])[0]
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (cfg_len,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + cfg_len:
        raise CorruptCheckpoint("truncated config block")
    try:
        cfg = PolicyConfig(**json.loads(data[12:12 + cfg_len].decode()))
    except (ValueError, TypeError) as exc:
        raise CorruptCheckpoint(f"unreadable config block: {exc}") from exc
    offset = 12 + cfg_len
    tensors = {}
    for name, shape in _tensor_shapes(cfg).items():
        count = int(np.prod(shape))
        nbytes = count * 8
        if len(data) < offset + nbytes:
            raise CorruptCheckpoint(f"truncated tensor {name}")
        tensors[name] = np.frombuffer(data[offset:offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise CorruptCheckpoint(f"{len(data) - offset} trailing bytes")
    return PolicyParameters(**tensors), cfg


def save_checkpoint_file(params: PolicyParameters, cfg: PolicyConfig, path) -> None:
    with open(path, "wb") as fh:
        fh.write(save_checkpoint(params, cfg))


def load_checkpoint_file(path) -> tuple[PolicyParameters, PolicyConfig]:
    with open(path, "rb") as fh:
        return load_checkpoint(fh.read())
