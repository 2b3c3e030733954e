"""The cross-domain attentional network (xDom) and the reference baseline CNN.

xDom ingests a complex frame as a 2xL IQ tensor and fuses three feature
domains: two parallel 1-D conv branches over raw IQ, two 2-D conv branches
over the magnitude and phase planes of a runtime STFT, and a two-layer
many-to-1 GRU whose final state is scored by a softmax attention head. The
fused vector feeds a fingerprint classifier head and, in multi-task mode, a
second protocol classifier head.

The baseline is a plain conv1d/max-pool/dense stack over raw IQ with the
same head arrangement, used as the comparison point in experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, field

import numpy as np

from . import autograd as ag
from . import stft as sf


@dataclass
class XDomConfig:
    n_devices: int
    n_protocols: int = 2
    multi_task: bool = True
    frame_len: int = 1024
    conv1d_kernels: tuple = (3, 7)
    conv1d_filters: int = 32
    conv2d_filters: tuple = (16, 32)
    conv2d_kernel: int = 3
    conv2d_stride: tuple = (2, 2)
    conv2d_padding: tuple = (1, 1)
    gru_hidden: int = 132
    gru_layers: int = 2
    head_hidden: int = 128
    stft_win: int = 128
    stft_hop: int = 1
    stft_window: str = "hann"
    stft_centered: bool = True
    log_magnitude: bool = False
    conv_activation: str = "relu"  # activation inside the conv banks
    tau_mode: str = "concat"  # how the attention scores enter the fusion
    profile: str = "faithful"

    def __post_init__(self):
        if self.tau_mode not in ("concat", "scale"):
            raise ValueError(f"unknown tau_mode {self.tau_mode!r}")
        if self.conv_activation not in ("relu", "tanh"):
            raise ValueError(f"unknown conv activation {self.conv_activation!r}")

    @property
    def attention_out_dim(self):
        # Attention scores the concatenated temporal vector, same dimension.
        return 2 * self.gru_hidden

    @property
    def fused_dim(self):
        return 4 * self.conv1d_filters + self.attention_out_dim

    @classmethod
    def faithful(cls, n_devices, **kw):
        return cls(n_devices=n_devices, **kw)

    @classmethod
    def reduced(cls, n_devices, **kw):
        """CI-scale profile: short frames, coarse STFT, narrow GRU."""
        defaults = dict(
            frame_len=64,
            conv1d_filters=8,
            conv2d_filters=(4, 8),
            gru_hidden=8,
            head_hidden=32,
            stft_win=16,
            stft_hop=8,
            profile="reduced",
        )
        defaults.update(kw)
        return cls(n_devices=n_devices, **defaults)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("conv1d_kernels", "conv2d_filters", "conv2d_stride", "conv2d_padding"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class BaselineConfig:
    """Reference CNN: two conv1d/max-pool blocks then a dense trunk."""

    n_devices: int
    n_protocols: int = 2
    multi_task: bool = True
    frame_len: int = 1024
    conv_filters: tuple = (64, 128)
    conv_kernel: int = 7
    pool: int = 2
    dense: int = 256
    profile: str = "faithful"

    @classmethod
    def faithful(cls, n_devices, **kw):
        return cls(n_devices=n_devices, **kw)

    @classmethod
    def reduced(cls, n_devices, **kw):
        defaults = dict(frame_len=64, conv_filters=(16, 32), dense=64, profile="reduced")
        defaults.update(kw)
        return cls(n_devices=n_devices, **defaults)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "conv_filters" in d:
            d["conv_filters"] = tuple(d["conv_filters"])
        return cls(**d)


@dataclass
class PreparedInputs:
    """Numeric inputs for a set of frames, ready to batch-slice."""

    iq: np.ndarray  # [N, 2, L]
    seq: np.ndarray  # [N, L, 2]
    magnitude: np.ndarray | None  # [N, 1, bins, frames]
    phase: np.ndarray | None

    def __len__(self):
        return self.iq.shape[0]


def _activation(name):
    return ag.relu if name == "relu" else ag.tanh


class _ParamStore:
    """Shared bookkeeping for parameter registration and checkpoints."""

    def __init__(self, dtype):
        self.dtype = dtype
        self.params = {}

    def add(self, name, array):
        p = ag.Parameter(array, dtype=self.dtype)
        self.params[name] = p
        return p

    def named_parameters(self):
        return dict(self.params)

    def parameters(self):
        return list(self.params.values())

    def load_state(self, state):
        for name, p in self.params.items():
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=p.tensor.data.dtype)
            if arr.shape != p.tensor.data.shape:
                raise ValueError(
                    f"checkpoint shape {arr.shape} does not match {name!r} {p.tensor.data.shape}"
                )
            p.tensor.data = arr.copy()

    def state_arrays(self):
        return {name: p.tensor.data for name, p in self.params.items()}


class XDomModel(_ParamStore):
    def __init__(self, cfg, seed=0, dtype=np.float32):
        super().__init__(dtype)
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xA0])
        F = cfg.conv1d_filters
        for k in cfg.conv1d_kernels:
            fan = 2 * k
            self.add(f"conv1d.k{k}.w", ag.uniform_init(rng, (F, 2, k), fan))
            self.add(f"conv1d.k{k}.b", ag.uniform_init(rng, (F,), fan))
        kk = cfg.conv2d_kernel
        f1, f2 = cfg.conv2d_filters
        for branch in ("mag", "phase"):
            self.add(f"conv2d.{branch}.c1.w", ag.uniform_init(rng, (f1, 1, kk, kk), kk * kk))
            self.add(f"conv2d.{branch}.c1.b", ag.uniform_init(rng, (f1,), kk * kk))
            self.add(f"conv2d.{branch}.c2.w", ag.uniform_init(rng, (f2, f1, kk, kk), f1 * kk * kk))
            self.add(f"conv2d.{branch}.c2.b", ag.uniform_init(rng, (f2,), f1 * kk * kk))
        # conv2d branches must land on the same width as the conv1d branches
        # for the fusion layout below; keep them equal by construction.
        if f2 != F:
            raise ValueError(f"final conv2d filters {f2} must equal conv1d filters {F}")
        self.gru = ag.GRU(2, cfg.gru_hidden, layers=cfg.gru_layers, rng=rng, dtype=dtype)
        self.params.update(self.gru.params)
        d_attn = cfg.attention_out_dim
        self.add("attn.w", ag.uniform_init(rng, (d_attn, d_attn), d_attn))
        self.add("attn.b", ag.uniform_init(rng, (d_attn,), d_attn))
        heads = ["head_f"] + (["head_p"] if cfg.multi_task else [])
        n_out = {"head_f": cfg.n_devices, "head_p": cfg.n_protocols}
        for head in heads:
            self.add(f"{head}.fc1.w", ag.uniform_init(rng, (cfg.fused_dim, cfg.head_hidden), cfg.fused_dim))
            self.add(f"{head}.fc1.b", ag.uniform_init(rng, (cfg.head_hidden,), cfg.fused_dim))
            self.add(f"{head}.fc2.w", ag.uniform_init(rng, (cfg.head_hidden, n_out[head]), cfg.head_hidden))
            self.add(f"{head}.fc2.b", ag.uniform_init(rng, (n_out[head],), cfg.head_hidden))

    # -- input preparation ------------------------------------------------

    def tf_planes(self, frame):
        """Magnitude and phase planes for one complex frame, network-scaled."""
        cfg = self.cfg
        z = sf.stft(
            frame, win=cfg.stft_win, hop=cfg.stft_hop,
            window=cfg.stft_window, centered=cfg.stft_centered,
        )
        mag, phase = sf.split_mag_phase(z)
        if cfg.log_magnitude:
            mag = np.log1p(mag)
        else:
            mag = mag / cfg.stft_win  # keep conv inputs O(1)
        return mag, phase

    def prepare(self, frames):
        """Precompute IQ layouts and TF planes for an [N, L] complex array."""
        frames = np.atleast_2d(np.asarray(frames))
        n, length = frames.shape
        if length != self.cfg.frame_len:
            raise ValueError(f"frames of length {length}, model expects {self.cfg.frame_len}")
        iq = np.stack([frames.real, frames.imag], axis=1).astype(self.dtype)
        seq = iq.transpose(0, 2, 1).copy()
        mags, phases = [], []
        for i in range(n):
            m, p = self.tf_planes(frames[i])
            mags.append(m)
            phases.append(p)
        mag = np.asarray(mags, dtype=self.dtype)[:, None, :, :]
        phase = np.asarray(phases, dtype=self.dtype)[:, None, :, :]
        return PreparedInputs(iq=iq, seq=seq, magnitude=mag, phase=phase)

    # -- forward passes ----------------------------------------------------

    def forward_spatial(self, iq, mag, phase):
        """Four pooled branch outputs: (x1_iq, x2_iq, x3_phase, x4_mag)."""
        cfg = self.cfg
        act = _activation(cfg.conv_activation)
        branches = []
        for k in cfg.conv1d_kernels:
            w = self.params[f"conv1d.k{k}.w"].tensor
            b = self.params[f"conv1d.k{k}.b"].tensor
            branches.append(ag.global_avg_pool(act(ag.conv1d(iq, w, b, stride=1, padding=k // 2))))
        x1_iq, x2_iq = branches

        def conv2d_branch(x, name):
            h = x
            for layer in ("c1", "c2"):
                w = self.params[f"conv2d.{name}.{layer}.w"].tensor
                b = self.params[f"conv2d.{name}.{layer}.b"].tensor
                h = act(ag.conv2d(h, w, b, stride=cfg.conv2d_stride, padding=cfg.conv2d_padding))
            return ag.global_avg_pool(h)

        x3_phase = conv2d_branch(phase, "phase")
        x4_mag = conv2d_branch(mag, "mag")
        return x1_iq, x2_iq, x3_phase, x4_mag

    def forward_temporal(self, seq):
        """Many-to-1 GRU: (x_o, h, x_h) with x_h = concat(x_o, h)."""
        out_last, h_layers = self.gru.forward(seq)
        x_o = out_last
        h = h_layers[-1]  # top layer's final hidden state
        x_h = ag.concat([x_o, h], axis=-1)
        return x_o, h, x_h

    def attention_score(self, x_h):
        """tau = softmax(tanh(x_h W + b)); a probability vector per row."""
        w = self.params["attn.w"].tensor
        b = self.params["attn.b"].tensor
        return ag.softmax(ag.tanh(ag.linear(x_h, w, b)))

    def fuse(self, x1_iq, x2_iq, x3_phase, x4_mag, tau, x_h):
        if self.cfg.tau_mode == "concat":
            tail = tau
        else:  # "scale": use the scores to reweight the temporal vector
            tail = ag.mul(tau, x_h)
        return ag.concat([x1_iq, x2_iq, x3_phase, x4_mag, tail], axis=-1)

    def _head(self, name, fused):
        h = ag.relu(ag.linear(fused, self.params[f"{name}.fc1.w"].tensor,
                              self.params[f"{name}.fc1.b"].tensor))
        logits = ag.linear(h, self.params[f"{name}.fc2.w"].tensor,
                           self.params[f"{name}.fc2.b"].tensor)
        return ag.softmax(logits)

    def forward(self, inputs, idx=None, want_protocol=None):
        """Class probabilities for a batch.

        inputs: PreparedInputs; idx: optional index array selecting the batch.
        Returns (fingerprint_probs, protocol_probs-or-None).
        """
        sel = slice(None) if idx is None else idx
        iq = ag.Tensor(inputs.iq[sel])
        seq = ag.Tensor(inputs.seq[sel])
        mag = ag.Tensor(inputs.magnitude[sel])
        phase = ag.Tensor(inputs.phase[sel])
        x1, x2, x3, x4 = self.forward_spatial(iq, mag, phase)
        x_o, h, x_h = self.forward_temporal(seq)
        tau = self.attention_score(x_h)
        fused = self.fuse(x1, x2, x3, x4, tau, x_h)
        probs_f = self._head("head_f", fused)
        if want_protocol is None:
            want_protocol = self.cfg.multi_task
        probs_p = self._head("head_p", fused) if want_protocol and self.cfg.multi_task else None
        return probs_f, probs_p

    def forward_frame(self, samples):
        """Single complex frame convenience wrapper."""
        inputs = self.prepare(np.asarray(samples)[None, :])
        return self.forward(inputs)

    def dim_chain(self, inputs=None):
        """Dimensions along the fusion path, for the architecture audit."""
        cfg = self.cfg
        bins, frames = sf.stft_shape(cfg.frame_len, cfg.stft_win, cfg.stft_hop, cfg.stft_centered)
        return {
            "iq": (2, cfg.frame_len),
            "tf_map": (bins, frames),
            "x_o": (1, cfg.gru_hidden),
            "x_h": (1, 2 * cfg.gru_hidden),
            "tau": (1, cfg.attention_out_dim),
            "a_xdom": (1, cfg.fused_dim),
            "heads": (cfg.n_devices, cfg.n_protocols if cfg.multi_task else None),
        }


class BaselineModel(_ParamStore):
    """Conv1d/max-pool/dense reference CNN over raw IQ."""

    def __init__(self, cfg, seed=0, dtype=np.float32):
        super().__init__(dtype)
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0xB0])
        f1, f2 = cfg.conv_filters
        k = cfg.conv_kernel
        self.add("conv1.w", ag.uniform_init(rng, (f1, 2, k), 2 * k))
        self.add("conv1.b", ag.uniform_init(rng, (f1,), 2 * k))
        self.add("conv2.w", ag.uniform_init(rng, (f2, f1, k), f1 * k))
        self.add("conv2.b", ag.uniform_init(rng, (f2,), f1 * k))
        flat = f2 * (cfg.frame_len // cfg.pool // cfg.pool)
        self.add("dense.w", ag.uniform_init(rng, (flat, cfg.dense), flat))
        self.add("dense.b", ag.uniform_init(rng, (cfg.dense,), flat))
        heads = ["head_f"] + (["head_p"] if cfg.multi_task else [])
        n_out = {"head_f": cfg.n_devices, "head_p": cfg.n_protocols}
        for head in heads:
            self.add(f"{head}.w", ag.uniform_init(rng, (cfg.dense, n_out[head]), cfg.dense))
            self.add(f"{head}.b", ag.uniform_init(rng, (n_out[head],), cfg.dense))

    def prepare(self, frames):
        frames = np.atleast_2d(np.asarray(frames))
        if frames.shape[1] != self.cfg.frame_len:
            raise ValueError(f"frames of length {frames.shape[1]}, model expects {self.cfg.frame_len}")
        iq = np.stack([frames.real, frames.imag], axis=1).astype(self.dtype)
        return PreparedInputs(iq=iq, seq=iq.transpose(0, 2, 1).copy(), magnitude=None, phase=None)

    def forward(self, inputs, idx=None, want_protocol=None):
        sel = slice(None) if idx is None else idx
        x = ag.Tensor(inputs.iq[sel])
        cfg = self.cfg
        pad = cfg.conv_kernel // 2
        h = ag.relu(ag.conv1d(x, self.params["conv1.w"].tensor, self.params["conv1.b"].tensor,
                              padding=pad))
        h = ag.maxpool1d(h, cfg.pool)
        h = ag.relu(ag.conv1d(h, self.params["conv2.w"].tensor, self.params["conv2.b"].tensor,
                              padding=pad))
        h = ag.maxpool1d(h, cfg.pool)
        b = h.shape[0]
        h = ag.reshape(h, (b, h.shape[1] * h.shape[2]))
        trunk = ag.relu(ag.linear(h, self.params["dense.w"].tensor, self.params["dense.b"].tensor))
        probs_f = ag.softmax(ag.linear(trunk, self.params["head_f.w"].tensor,
                                       self.params["head_f.b"].tensor))
        if want_protocol is None:
            want_protocol = cfg.multi_task
        probs_p = None
        if want_protocol and cfg.multi_task:
            probs_p = ag.softmax(ag.linear(trunk, self.params["head_p.w"].tensor,
                                           self.params["head_p.b"].tensor))
        return probs_f, probs_p

    def forward_frame(self, samples):
        inputs = self.prepare(np.asarray(samples)[None, :])
        return self.forward(inputs)


def count_params(model):
    """Total number of scalar parameters."""
    return int(sum(p.tensor.data.size for p in model.parameters()))


def build_model(kind, cfg, seed=0, dtype=np.float32):
    if kind == "xdom":
        return XDomModel(cfg, seed=seed, dtype=dtype)
    if kind == "baseline":
        return BaselineModel(cfg, seed=seed, dtype=dtype)
    raise ValueError(f"unknown model kind {kind!r}")


def config_for(kind, profile, n_devices, multi_task, **kw):
    """Construct the right config dataclass for a model kind and profile."""
    cls = XDomConfig if kind == "xdom" else BaselineConfig
    ctor = cls.faithful if profile == "faithful" else cls.reduced
    return ctor(n_devices=n_devices, multi_task=multi_task, **kw)


def save_model_config(path, kind, cfg):
    with open(path, "w") as fh:
        json.dump({"kind": kind, "config": cfg.to_dict()}, fh, indent=1, sort_keys=True)


def load_model_config(path):
    with open(path) as fh:
        d = json.load(fh)
    cls = XDomConfig if d["kind"] == "xdom" else BaselineConfig
    return d["kind"], cls.from_dict(d["config"])
