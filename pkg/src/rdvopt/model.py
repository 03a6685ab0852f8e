"""GPT-style sequence model over rendezvous trajectories.

Each trajectory step contributes four tokens in the fixed order
(reward-to-go, constraint-to-go, state, control); every modality has its
own linear encoder, a learned per-step embedding is added to all four
tokens of a step, and a stack of pre-norm causal-attention blocks feeds
two linear readouts: the control prediction is taken at state-token
positions (so it conditions on the current state) and the next-state
prediction at control-token positions.

Training is teacher-forced squared error on z-score-normalized states and
controls, optimized with Adam under global-norm gradient clipping and
micro-batch accumulation.  Everything runs on the numpy reverse-mode
engine in :mod:`rdvopt.autodiff`; runs are deterministic given the seed.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

_MASK_NEG = -1e30


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, checkpoint: dict):
        super().__init__(f"training loss became non-finite at step {step}")
        self.step = step
        self.checkpoint = checkpoint


class GradientError(RuntimeError):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    n_layers: int = 2
    n_heads: int = 2
    embed_dim: int = 64
    context_steps: int = 20     # window length K, in trajectory steps
    dropout: float = 0.1
    learn_rate: float = 1e-3
    grad_clip: float = 1.0
    batch_size: int = 16
    grad_accum: int = 2
    max_timesteps: int = 100

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if self.context_steps < 1:
            raise ValueError("context length must be at least one step")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError("dropout must lie in [0, 1)")


def paper_config() -> TransformerConfig:
    """Full-scale hyperparameters (reference preset, not used in tests)."""
    return TransformerConfig(n_layers=6, n_heads=6, embed_dim=384,
                             context_steps=100, dropout=0.1, learn_rate=3e-5,
                             grad_clip=1.0, batch_size=4, grad_accum=8,
                             max_timesteps=100)


def desk_config() -> TransformerConfig:
    """Small CPU-trainable preset."""
    return TransformerConfig()


@dataclass
class NormStats:
    """Per-modality z-score statistics fitted on the training split."""

    state_mean: np.ndarray
    state_std: np.ndarray
    control_mean: np.ndarray
    control_std: np.ndarray
    rtg_mean: float
    rtg_std: float
    ctg_mean: float
    ctg_std: float

    @classmethod
    def fit(cls, states: np.ndarray, controls: np.ndarray,
            rtg: np.ndarray, ctg: np.ndarray) -> "NormStats":
        floor = 1e-10

        def ms(x, axis):
            return x.mean(axis=axis), np.maximum(x.std(axis=axis), floor)

        sm, ss = ms(states.reshape(-1, 6), 0)
        cm, cs = ms(controls.reshape(-1, 3), 0)
        rm, rs = ms(rtg.reshape(-1), None)
        gm, gs = ms(ctg.astype(float).reshape(-1), None)
        return cls(sm, ss, cm, cs, float(rm), float(rs), float(gm), float(gs))

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.array(d["state_mean"]), np.array(d["state_std"]),
                   np.array(d["control_mean"]), np.array(d["control_std"]),
                   d["rtg_mean"], d["rtg_std"], d["ctg_mean"], d["ctg_std"])


def _param_spec(cfg: TransformerConfig) -> list[tuple[str, tuple]]:
    d = cfg.embed_dim
    spec = [
        ("enc_rtg_w", (1, d)), ("enc_rtg_b", (d,)),
        ("enc_ctg_w", (1, d)), ("enc_ctg_b", (d,)),
        ("enc_state_w", (6, d)), ("enc_state_b", (d,)),
        ("enc_ctrl_w", (3, d)), ("enc_ctrl_b", (d,)),
        ("timestep_table", (cfg.max_timesteps, d)),
    ]
    for i in range(cfg.n_layers):
        spec += [
            (f"block{i}_ln1_g", (d,)), (f"block{i}_ln1_b", (d,)),
            (f"block{i}_qkv_w", (d, 3 * d)), (f"block{i}_qkv_b", (3 * d,)),
            (f"block{i}_proj_w", (d, d)), (f"block{i}_proj_b", (d,)),
            (f"block{i}_ln2_g", (d,)), (f"block{i}_ln2_b", (d,)),
            (f"block{i}_fc_w", (d, 4 * d)), (f"block{i}_fc_b", (4 * d,)),
            (f"block{i}_out_w", (4 * d, d)), (f"block{i}_out_b", (d,)),
        ]
    spec += [
        ("ln_f_g", (d,)), ("ln_f_b", (d,)),
        ("head_state_w", (d, 6)), ("head_state_b", (6,)),
        ("head_ctrl_w", (d, 3)), ("head_ctrl_b", (3,)),
    ]
    return spec


def parameter_count(cfg: TransformerConfig) -> int:
    """Closed-form parameter count for a configuration."""
    d = cfg.embed_dim
    encoders = 15 * d
    table = cfg.max_timesteps * d
    per_block = 12 * d * d + 13 * d
    heads = 9 * d + 9
    return encoders + table + cfg.n_layers * per_block + 2 * d + heads


def init_params(cfg: TransformerConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in _param_spec(cfg):
        if name.endswith("_b") or name == "ln_f_b":
            data = np.zeros(shape)
        elif name.endswith("ln1_g") or name.endswith("ln2_g") or name == "ln_f_g":
            data = np.ones(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        params[name] = Tensor(data, requires_grad=True)
    total = sum(p.data.size for p in params.values())
    assert total == parameter_count(cfg)
    return params


def _layernorm(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = ad.mean(xc * xc, axis=-1, keepdims=True)
    return xc * ((var + 1e-8) ** -0.5) * g + b


def _dropout(x: Tensor, p: float, rng) -> Tensor:
    if rng is None or p <= 0.0:
        return x
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask


def _causal_mask(n_tokens: int) -> np.ndarray:
    m = np.zeros((n_tokens, n_tokens))
    m[np.triu_indices(n_tokens, k=1)] = _MASK_NEG
    return m


def causal_attention(params: dict, prefix: str, cfg: TransformerConfig,
                     x: Tensor, dropout_rng=None) -> Tensor:
    """Multi-head causal self-attention block body (pre-norm residual)."""
    b, t, d = x.shape
    hd = d // cfg.n_heads
    qkv = ad.matmul(x, params[f"{prefix}_qkv_w"]) + params[f"{prefix}_qkv_b"]
    parts = []
    for k in range(3):
        piece = qkv[:, :, k * d:(k + 1) * d]
        piece = ad.reshape(piece, (b, t, cfg.n_heads, hd))
        parts.append(ad.transpose(piece, (0, 2, 1, 3)))
    q, k_, v = parts
    scores = ad.matmul(q, ad.transpose(k_, (0, 1, 3, 2))) * (hd ** -0.5)
    scores = scores + _causal_mask(t)
    att = ad.softmax(scores, axis=-1)
    att = _dropout(att, cfg.dropout, dropout_rng)
    out = ad.matmul(att, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (b, t, d))
    out = ad.matmul(out, params[f"{prefix}_proj_w"]) + params[f"{prefix}_proj_b"]
    return _dropout(out, cfg.dropout, dropout_rng)


@dataclass
class Window:
    """A teacher-forcing batch of aligned context windows.

    ``timesteps`` are absolute 0-based step indices into the learned
    per-step embedding table; ``next_states`` holds the prediction targets
    for the state readout (the state one step after each window position).
    """

    rtg: np.ndarray          # (B, W)
    ctg: np.ndarray          # (B, W)
    states: np.ndarray       # (B, W, 6)
    controls: np.ndarray     # (B, W, 3)
    timesteps: np.ndarray    # (B, W) int
    next_states: np.ndarray | None = None  # (B, W, 6)


def forward_tokens(params: dict, cfg: TransformerConfig, stats: NormStats,
                   win: Window, dropout_rng=None) -> tuple[Tensor, Tensor]:
    """Normalized state/control predictions for every window position.

    Returns ``(state_preds, ctrl_preds)`` where ``ctrl_preds[:, i]`` is
    read at the state token of step i and ``state_preds[:, i]`` (the state
    of step i+1) at the control token of step i.
    """
    b, w = win.rtg.shape
    if w > cfg.context_steps:
        raise ValueError(f"window of {w} steps exceeds context length "
                         f"{cfg.context_steps}")
    if np.any(win.timesteps >= cfg.max_timesteps) or np.any(win.timesteps < 0):
        raise ValueError("timestep index outside the learned embedding table")

    rtg_n = ((win.rtg - stats.rtg_mean) / stats.rtg_std)[..., None]
    ctg_n = ((win.ctg - stats.ctg_mean) / stats.ctg_std)[..., None]
    st_n = (win.states - stats.state_mean) / stats.state_std
    ct_n = (win.controls - stats.control_mean) / stats.control_std

    time_emb = ad.embedding(params["timestep_table"], win.timesteps)
    tokens = []
    for arr, enc in ((rtg_n, "enc_rtg"), (ctg_n, "enc_ctg"),
                     (st_n, "enc_state"), (ct_n, "enc_ctrl")):
        emb = ad.matmul(Tensor(arr), params[f"{enc}_w"]) + params[f"{enc}_b"]
        emb = emb + time_emb
        tokens.append(ad.reshape(emb, (b, w, 1, cfg.embed_dim)))
    x = ad.reshape(ad.concat(tokens, axis=2), (b, 4 * w, cfg.embed_dim))
    x = _dropout(x, cfg.dropout, dropout_rng)

    for i in range(cfg.n_layers):
        x = x + causal_attention(params, f"block{i}", cfg,
                                 _layernorm(x, params[f"block{i}_ln1_g"],
                                            params[f"block{i}_ln1_b"]),
                                 dropout_rng)
        h = _layernorm(x, params[f"block{i}_ln2_g"], params[f"block{i}_ln2_b"])
        h = ad.relu(ad.matmul(h, params[f"block{i}_fc_w"]) + params[f"block{i}_fc_b"])
        h = ad.matmul(h, params[f"block{i}_out_w"]) + params[f"block{i}_out_b"]
        x = x + _dropout(h, cfg.dropout, dropout_rng)

    x = _layernorm(x, params["ln_f_g"], params["ln_f_b"])
    h_state_tok = x[:, 2::4, :]   # tokens carrying the current state
    h_ctrl_tok = x[:, 3::4, :]    # tokens carrying the applied control
    ctrl_pred = ad.matmul(h_state_tok, params["head_ctrl_w"]) + params["head_ctrl_b"]
    state_pred = ad.matmul(h_ctrl_tok, params["head_state_w"]) + params["head_state_b"]
    return state_pred, ctrl_pred


def forward(params: dict, cfg: TransformerConfig, stats: NormStats,
            win: Window) -> tuple[np.ndarray, np.ndarray]:
    """De-normalized predictions (next states [per-step ROE], controls [m/s])."""
    state_pred, ctrl_pred = forward_tokens(params, cfg, stats, win)
    states = state_pred.data * stats.state_std + stats.state_mean
    controls = ctrl_pred.data * stats.control_std + stats.control_mean
    return states, controls


def loss(params: dict, cfg: TransformerConfig, stats: NormStats,
         win: Window, dropout_rng=None) -> Tensor:
    """Teacher-forced mean squared error on normalized states and controls."""
    state_pred, ctrl_pred = forward_tokens(params, cfg, stats, win, dropout_rng)
    st_t = (win.next_states - stats.state_mean) / stats.state_std
    ct_t = (win.controls - stats.control_mean) / stats.control_std
    b, w = win.rtg.shape
    ds = state_pred - st_t
    du = ctrl_pred - ct_t
    total = ad.sum_(ds * ds) + ad.sum_(du * du)
    return total * (1.0 / (b * w))


def gradients(params: dict, cfg: TransformerConfig, stats: NormStats,
              win: Window, dropout_rng=None) -> tuple[float, dict[str, np.ndarray]]:
    """Reverse-mode gradients of the loss for every parameter."""
    for p in params.values():
        p.grad = None
    out = loss(params, cfg, stats, win, dropout_rng)
    ad.backward(out)
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient in parameter '{name}'")
        grads[name] = g
    return float(out.data), grads


# ---------------------------------------------------------------------------
# training


class Adam:
    """Adaptive-moment optimizer with global-norm clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray],
             clip: float = np.inf) -> None:
        norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        scale = 1.0
        if np.isfinite(clip) and norm > clip:
            scale = clip / norm
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, p in params.items():
            g = grads[name] * scale
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            mh = self.m[name] / bc1
            vh = self.v[name] / bc2
            p.data = p.data - self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass
class TrajectoryBatchSource:
    """Uniform window sampler over a set of trajectory arrays."""

    rtg: np.ndarray        # (R, N)
    ctg: np.ndarray        # (R, N)
    states: np.ndarray     # (R, N+1, 6)
    controls: np.ndarray   # (R, N, 3)

    @classmethod
    def from_records(cls, records) -> "TrajectoryBatchSource":
        return cls(rtg=np.array(records["rtg"], dtype=float),
                   ctg=np.array(records["ctg"], dtype=float),
                   states=np.array(records["states"], dtype=float),
                   controls=np.array(records["controls"], dtype=float))

    @property
    def n_steps(self) -> int:
        return self.controls.shape[1]

    def fit_stats(self) -> NormStats:
        return NormStats.fit(self.states, self.controls, self.rtg, self.ctg)

    def sample(self, batch: int, window: int, rng) -> Window:
        n_rec, n = self.rtg.shape
        w = min(window, n)
        rec = rng.integers(0, n_rec, size=batch)
        start = rng.integers(0, n - w + 1, size=batch)
        idx = start[:, None] + np.arange(w)[None, :]
        rows = rec[:, None]
        return Window(rtg=self.rtg[rows, idx], ctg=self.ctg[rows, idx],
                      states=self.states[rows, idx],
                      controls=self.controls[rows, idx],
                      timesteps=idx,
                      next_states=self.states[rows, idx + 1])


@dataclass
class TrainResult:
    steps: list[int]
    train_loss: list[float]
    val_loss: list[float]

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("step,train_loss,val_loss\n")
            for s, tr, vl in zip(self.steps, self.train_loss, self.val_loss):
                fh.write(f"{s},{format(tr, '.17g')},{format(vl, '.17g')}\n")


def train(params: dict[str, Tensor], cfg: TransformerConfig, stats: NormStats,
          train_source: TrajectoryBatchSource,
          val_source: TrajectoryBatchSource | None,
          steps: int, seed: int = 0, log_every: int = 50) -> TrainResult:
    """Teacher-forced training; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    opt = Adam(params, lr=cfg.learn_rate)
    curves = TrainResult([], [], [])
    val_rng = np.random.default_rng(seed + 1)
    val_batch = None
    if val_source is not None:
        val_batch = val_source.sample(min(64, len(val_source.rtg)),
                                      cfg.context_steps, val_rng)

    for step in range(1, steps + 1):
        accum: dict[str, np.ndarray] | None = None
        loss_acc = 0.0
        for _ in range(cfg.grad_accum):
            win = train_source.sample(cfg.batch_size, cfg.context_steps, rng)
            lval, grads = gradients(params, cfg, stats, win, dropout_rng=rng)
            loss_acc += lval
            if accum is None:
                accum = grads
            else:
                for k in accum:
                    accum[k] += grads[k]
        for k in accum:
            accum[k] /= cfg.grad_accum
        loss_mean = loss_acc / cfg.grad_accum
        if not np.isfinite(loss_mean):
            raise TrainingDiverged(step, {k: p.data.copy()
                                          for k, p in params.items()})
        opt.step(params, accum, clip=cfg.grad_clip)

        if step % log_every == 0 or step == steps or step == 1:
            vl = np.nan
            if val_batch is not None:
                vl = float(loss(params, cfg, stats, val_batch).data)
            curves.steps.append(step)
            curves.train_loss.append(loss_mean)
            curves.val_loss.append(vl)
    return curves


# ---------------------------------------------------------------------------
# checkpoint io

_CKPT_MAGIC = b"RVCKPT01"


def save_checkpoint(path, cfg: TransformerConfig, stats: NormStats,
                    params: dict[str, Tensor]) -> None:
    names = list(params.keys())
    header = {
        "config": dataclasses.asdict(cfg),
        "stats": stats.to_dict(),
        "params": [(n, list(params[n].data.shape)) for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(params[n].data, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[TransformerConfig, NormStats, dict[str, Tensor]]:
    with open(path, "rb") as fh:
        if fh.read(8) != _CKPT_MAGIC:
            raise ValueError(f"not a model checkpoint: {path}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(blob_len).decode())
        cfg = TransformerConfig(**header["config"])
        stats = NormStats.from_dict(header["stats"])
        params = {}
        for name, shape in header["params"]:
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).copy()
            params[name] = Tensor(data, requires_grad=True)
    return cfg, stats, params
