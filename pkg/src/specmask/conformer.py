"""Denoising mask network: BN+linear front-end, Conformer blocks, sigmoid head.

Every architectural ablation (swish->relu, no convolution module, single
full-step FFN instead of the half-step pair, absolute instead of relative
position encoding) is a config toggle so ablation rows share one code path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import (BatchNormState, ConfigurationError, ContractError, Tensor,
                       layer_norm, op_attention, op_conv1d, op_linear,
                       op_squeeze_excite, sigmoid)
from .dsp import Spectrogram, Waveform, reconstruct_with_noisy_phase

FORMAT_VERSION = 1


@dataclass
class ConformerConfig:
    attention_dim: int = 240
    num_blocks: int = 4
    heads: int = 4
    conv_kernel: int = 15
    se_factor: int = 8
    ffn_expansion: int = 4
    max_rel_dist: int = 64
    use_swish: bool = True
    use_conv_module: bool = True
    use_macaron: bool = True
    use_relative_pe: bool = True

    def validate(self):
        if self.attention_dim % self.heads != 0:
            raise ConfigurationError(
                f"attention_dim {self.attention_dim} not divisible by heads {self.heads}")
        if self.conv_kernel % 2 == 0:
            raise ConfigurationError(f"conv_kernel must be odd, got {self.conv_kernel}")
        if self.use_conv_module and self.attention_dim % self.se_factor != 0:
            raise ConfigurationError(
                f"se_factor {self.se_factor} must divide attention_dim {self.attention_dim}")


def glorot(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[:-1]))
    fan_out = shape[-1]
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class ParamStore:
    """Ordered named parameters plus batch-norm running-stat buffers."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        self.bn_states: dict[str, BatchNormState] = {}

    def weight(self, name, shape):
        t = Tensor(glorot(self.rng, shape), requires_grad=True)
        self.params[name] = t
        return t

    def zeros(self, name, shape):
        t = Tensor(np.zeros(shape), requires_grad=True)
        self.params[name] = t
        return t

    def ones(self, name, shape):
        t = Tensor(np.ones(shape), requires_grad=True)
        self.params[name] = t
        return t

    def bn(self, name, n):
        self.ones(f"{name}.gamma", (n,))
        self.zeros(f"{name}.beta", (n,))
        self.bn_states[name] = BatchNormState(n)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def checksum(self) -> float:
        return float(sum(np.abs(p.data).sum() for p in self.params.values()))


class MaskNet:
    """Mask-estimation network; values of the predicted mask lie in (0, 1)."""

    def __init__(self, cfg: ConformerConfig, f_bins: int, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.f_bins = f_bins
        self.seed = seed
        s = ParamStore(seed)
        self.store = s
        D = cfg.attention_dim
        E = D * cfg.ffn_expansion

        s.bn("front.bn", f_bins)
        s.weight("front.w", (f_bins, D))
        s.zeros("front.b", (D,))

        for i in range(cfg.num_blocks):
            p = f"block{i}"
            # first FFN (half-step when macaron, full-step otherwise)
            s.ones(f"{p}.ffn1.ln.gamma", (D,)); s.zeros(f"{p}.ffn1.ln.beta", (D,))
            s.weight(f"{p}.ffn1.w1", (D, E)); s.zeros(f"{p}.ffn1.b1", (E,))
            s.weight(f"{p}.ffn1.w2", (E, D)); s.zeros(f"{p}.ffn1.b2", (D,))
            # attention
            s.ones(f"{p}.att.ln.gamma", (D,)); s.zeros(f"{p}.att.ln.beta", (D,))
            for nm in ("wq", "wk", "wv", "wo"):
                s.weight(f"{p}.att.{nm}", (D, D))
            for nm in ("bq", "bk", "bv", "bo"):
                s.zeros(f"{p}.att.{nm}", (D,))
            if cfg.use_relative_pe:
                s.zeros(f"{p}.att.rel_bias", (cfg.heads, 2 * cfg.max_rel_dist + 1))
            # convolution module
            if cfg.use_conv_module:
                s.ones(f"{p}.conv.ln.gamma", (D,)); s.zeros(f"{p}.conv.ln.beta", (D,))
                s.weight(f"{p}.conv.pw1", (D, 2 * D)); s.zeros(f"{p}.conv.pw1_b", (2 * D,))
                s.weight(f"{p}.conv.dw", (cfg.conv_kernel, D))
                s.bn(f"{p}.conv.bn", D)
                se = D // cfg.se_factor
                s.weight(f"{p}.conv.se_w1", (D, se)); s.zeros(f"{p}.conv.se_b1", (se,))
                s.weight(f"{p}.conv.se_w2", (se, D)); s.zeros(f"{p}.conv.se_b2", (D,))
                s.weight(f"{p}.conv.pw2", (D, D)); s.zeros(f"{p}.conv.pw2_b", (D,))
            # second half-step FFN (macaron only)
            if cfg.use_macaron:
                s.ones(f"{p}.ffn2.ln.gamma", (D,)); s.zeros(f"{p}.ffn2.ln.beta", (D,))
                s.weight(f"{p}.ffn2.w1", (D, E)); s.zeros(f"{p}.ffn2.b1", (E,))
                s.weight(f"{p}.ffn2.w2", (E, D)); s.zeros(f"{p}.ffn2.b2", (D,))
            s.ones(f"{p}.final_ln.gamma", (D,)); s.zeros(f"{p}.final_ln.beta", (D,))

        s.weight("head.w", (D, f_bins))
        s.zeros("head.b", (f_bins,))

    # -- helpers -----------------------------------------------------------
    @property
    def params(self):
        return self.store.params

    def param_count(self):
        return self.store.param_count()

    def checksum(self):
        return self.store.checksum()

    def _p(self, name):
        return self.store.params[name]

    def _act(self, x):
        return ad.swish(x) if self.cfg.use_swish else ad.relu(x)

    def _ffn(self, x, prefix):
        h = layer_norm(x, self._p(f"{prefix}.ln.gamma"), self._p(f"{prefix}.ln.beta"))
        h = self._act(op_linear(h, self._p(f"{prefix}.w1"), self._p(f"{prefix}.b1")))
        return op_linear(h, self._p(f"{prefix}.w2"), self._p(f"{prefix}.b2"))

    def _conv_module(self, x, prefix, training):
        cfg = self.cfg
        h = layer_norm(x, self._p(f"{prefix}.ln.gamma"), self._p(f"{prefix}.ln.beta"))
        h = op_linear(h, self._p(f"{prefix}.pw1"), self._p(f"{prefix}.pw1_b"))
        h = ad.glu_lastdim(h)
        h = op_conv1d(h, self._p(f"{prefix}.dw"), mode="depthwise")
        h = ad.batch_norm(h, self._p(f"{prefix}.bn.gamma"), self._p(f"{prefix}.bn.beta"),
                          self.store.bn_states[f"{prefix}.bn"], training)
        h = self._act(h)
        h = op_squeeze_excite(h, self._p(f"{prefix}.se_w1"), self._p(f"{prefix}.se_b1"),
                              self._p(f"{prefix}.se_w2"), self._p(f"{prefix}.se_b2"),
                              cfg.se_factor)
        return op_linear(h, self._p(f"{prefix}.pw2"), self._p(f"{prefix}.pw2_b"))

    def block_forward(self, x: Tensor, i: int, training: bool = True) -> Tensor:
        cfg = self.cfg
        if x.shape[-1] != cfg.attention_dim:
            raise ContractError(f"block expects dim {cfg.attention_dim}, got {x.shape[-1]}")
        p = f"block{i}"
        half = 0.5 if cfg.use_macaron else 1.0
        x = x + Tensor(half) * self._ffn(x, f"{p}.ffn1")
        h = layer_norm(x, self._p(f"{p}.att.ln.gamma"), self._p(f"{p}.att.ln.beta"))
        att_params = {nm: self._p(f"{p}.att.{nm}")
                      for nm in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}
        if cfg.use_relative_pe:
            att_params["rel_bias"] = self._p(f"{p}.att.rel_bias")
        x = x + op_attention(h, att_params, cfg.heads, cfg.use_relative_pe, cfg.max_rel_dist)
        if cfg.use_conv_module:
            x = x + self._conv_module(x, f"{p}.conv", training)
        if cfg.use_macaron:
            x = x + Tensor(0.5) * self._ffn(x, f"{p}.ffn2")
        return layer_norm(x, self._p(f"{p}.final_ln.gamma"), self._p(f"{p}.final_ln.beta"))

    def forward(self, noisy_mag: Tensor, training: bool = True) -> Tensor:
        """noisy_mag [B,T,F] -> mask [B,T,F] in (0,1)."""
        if noisy_mag.shape[-1] != self.f_bins:
            raise ContractError(
                f"input has {noisy_mag.shape[-1]} bins, network built for {self.f_bins}")
        h = ad.batch_norm(noisy_mag, self._p("front.bn.gamma"), self._p("front.bn.beta"),
                          self.store.bn_states["front.bn"], training)
        h = op_linear(h, self._p("front.w"), self._p("front.b"))
        for i in range(self.cfg.num_blocks):
            h = self.block_forward(h, i, training)
        return sigmoid(op_linear(h, self._p("head.w"), self._p("head.b")))


def build(cfg: ConformerConfig, f_bins: int, seed: int = 0) -> MaskNet:
    return MaskNet(cfg, f_bins, seed)


def predict_mask(net: MaskNet, noisy_mag: Tensor, training: bool = False) -> Tensor:
    return net.forward(noisy_mag, training=training)


def enhance(net: MaskNet, noisy: Spectrogram) -> tuple[np.ndarray, Waveform]:
    with ad.tape():
        mask = predict_mask(net, Tensor(noisy.magnitude[None]), training=False)
    enhanced_mag = mask.data[0] * noisy.magnitude
    return enhanced_mag, reconstruct_with_noisy_phase(enhanced_mag, noisy)


# ---------------------------------------------------------------------------
# checkpoint container (shared with the auxiliary networks)


def save_params(path, store: ParamStore, config: dict, extra: dict | None = None):
    """Container: npz of little-endian float64 arrays, config echo as JSON."""
    arrays = {f"param/{k}": v.data.astype("<f8") for k, v in store.params.items()}
    for name, st in store.bn_states.items():
        arrays[f"bnstate/{name}/running_mean"] = st.running_mean.astype("<f8")
        arrays[f"bnstate/{name}/running_var"] = st.running_var.astype("<f8")
    meta = {"format_version": FORMAT_VERSION, "config": config, "extra": extra or {}}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_container(path):
    with np.load(path) as z:
        meta = json.loads(bytes(z["__meta__"]))
        if meta["format_version"] != FORMAT_VERSION:
            raise ContractError(f"unsupported checkpoint version {meta['format_version']}")
        params = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
        bn = {k[len("bnstate/"):]: z[k] for k in z.files if k.startswith("bnstate/")}
    return meta, params, bn


def _restore_store(store: ParamStore, params, bn):
    for k, v in params.items():
        store.params[k].data = np.asarray(v, dtype=np.float64)
    for k, v in bn.items():
        name, _, field_name = k.rpartition("/")
        setattr(store.bn_states[name], field_name, np.asarray(v, dtype=np.float64))


def save_masknet(path, net: MaskNet):
    save_params(path, net.store, {"kind": "masknet", "f_bins": net.f_bins,
                                  "seed": net.seed, "conformer": asdict(net.cfg)})


def load_masknet(path) -> MaskNet:
    meta, params, bn = load_container(path)
    cfg_d = meta["config"]
    net = MaskNet(ConformerConfig(**cfg_d["conformer"]), cfg_d["f_bins"], cfg_d["seed"])
    _restore_store(net.store, params, bn)
    return net
