"""Frozen auxiliary feature extractors and the ensemble loss.

Six small networks stand in for the large pre-trained models of the
full-scale setting; each exposes the activations of its first ``n_layers``
blocks ("taps", post-activation) and the layer counts are fixed per network:
event=4, acoustic=3, speaker=3, emotion=3, pase=6, wav2vec=5.

The total training objective is a weighted sum of per-network deep-feature
losses (each averaged over its taps) plus a spectral l1 term.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, ContractError, Tensor
from .conformer import ParamStore, load_container, save_params, _restore_store
from .corpus import NUM_CONTENT_UNITS, NUM_PROSODY_CLASSES, read_manifest
from .dsp import read_wav, stft

TERMS = ("event", "acoustic", "speaker", "emotion", "pase", "wav2vec", "l1")

AUX_DEFS = {
    # name: (n_layers, input_kind)
    "event": (4, "magnitude"),
    "acoustic": (3, "magnitude"),
    "speaker": (3, "waveform"),
    "emotion": (3, "waveform"),
    "pase": (6, "waveform"),
    "wav2vec": (5, "waveform"),
}

NUM_SPEAKER_CLASSES = 10


@dataclass
class AuxSpec:
    name: str
    checkpoint: str = "random_frozen"

    def __post_init__(self):
        if self.name not in AUX_DEFS:
            raise ConfigurationError(f"unknown auxiliary network {self.name!r}")

    @property
    def n_layers(self):
        return AUX_DEFS[self.name][0]

    @property
    def input_kind(self):
        return AUX_DEFS[self.name][1]


@dataclass
class LossWeights:
    event: float = 0.0
    acoustic: float = 0.0
    speaker: float = 0.0
    emotion: float = 0.0
    pase: float = 0.0
    wav2vec: float = 0.0
    l1: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"weight {f.name}={v} must be finite and >= 0")

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


# greedy hand-tuned weight vector, in TERMS order
HAND_TUNED = LossWeights(event=5e-03, acoustic=1e-04, speaker=1.25e-04,
                         emotion=4e-05, pase=1.7e-04, wav2vec=3.5e-05, l1=1.1e-01)

EQUAL = LossWeights(**{t: 1.0 / 7.0 for t in TERMS})


class AuxNet:
    """One toy feature extractor.  Parameters are frozen after pretraining;
    forward taps propagate gradients to the input only."""

    def __init__(self, spec: AuxSpec, f_bins: int = 257, seed: int = 0):
        self.spec = spec
        self.f_bins = f_bins
        self.seed = seed
        s = ParamStore(seed)
        self.store = s
        name = spec.name
        if name == "event":
            s.weight("c1", (5, f_bins, 24)); s.zeros("c1_b", (24,))
            for i in (2, 3, 4):
                s.weight(f"c{i}", (5, 24, 24)); s.zeros(f"c{i}_b", (24,))
            s.weight("head", (24, 4)); s.zeros("head_b", (4,))
        elif name == "acoustic":
            s.weight("c1", (5, f_bins, 24)); s.zeros("c1_b", (24,))
            s.weight("c2", (5, 24, 24)); s.zeros("c2_b", (24,))
            s.weight("rnn_wx", (24, 24)); s.weight("rnn_wh", (24, 24))
            s.zeros("rnn_b", (24,))
            s.weight("head", (24, NUM_CONTENT_UNITS)); s.zeros("head_b", (NUM_CONTENT_UNITS,))
        elif name == "speaker":
            s.weight("c1", (31, 1, 16)); s.zeros("c1_b", (16,))
            for i in (1, 2):
                s.weight(f"b{i}_down", (7, 16, 16)); s.zeros(f"b{i}_down_b", (16,))
                s.weight(f"b{i}_res", (5, 16, 16)); s.zeros(f"b{i}_res_b", (16,))
            s.weight("head", (16, NUM_SPEAKER_CLASSES)); s.zeros("head_b", (NUM_SPEAKER_CLASSES,))
        elif name == "emotion":
            s.weight("c1", (31, 1, 12)); s.zeros("c1_b", (12,))
            s.weight("c2", (7, 12, 12)); s.zeros("c2_b", (12,))
            s.weight("c3", (5, 12, 12)); s.zeros("c3_b", (12,))
            s.weight("head", (12, NUM_PROSODY_CLASSES)); s.zeros("head_b", (NUM_PROSODY_CLASSES,))
        elif name == "pase":
            s.weight("c1", (31, 1, 16)); s.zeros("c1_b", (16,))
            for i in range(2, 7):
                s.weight(f"c{i}", (5, 16, 16)); s.zeros(f"c{i}_b", (16,))
            s.weight("head", (16, 2)); s.zeros("head_b", (2,))
        elif name == "wav2vec":
            s.weight("c1", (31, 1, 16)); s.zeros("c1_b", (16,))
            s.weight("c2", (7, 16, 16)); s.zeros("c2_b", (16,))
            D = 16
            for i in range(4):
                p = f"blk{i}"
                s.ones(f"{p}.ln1.gamma", (D,)); s.zeros(f"{p}.ln1.beta", (D,))
                for nm in ("wq", "wk", "wv", "wo"):
                    s.weight(f"{p}.{nm}", (D, D))
                for nm in ("bq", "bk", "bv", "bo"):
                    s.zeros(f"{p}.{nm}", (D,))
                s.ones(f"{p}.ln2.gamma", (D,)); s.zeros(f"{p}.ln2.beta", (D,))
                s.weight(f"{p}.fw1", (D, 32)); s.zeros(f"{p}.fb1", (32,))
                s.weight(f"{p}.fw2", (32, D)); s.zeros(f"{p}.fb2", (D,))
            s.weight("proj", (D, D)); s.zeros("proj_b", (D,))
        self.frozen = False

    # -- plumbing ----------------------------------------------------------
    def _p(self, name):
        return self.store.params[name]

    def freeze(self):
        for p in self.store.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True

    def checksum(self):
        return self.store.checksum()

    def trainable_params(self):
        return list(self.store.params.values())

    def _conv(self, x, name, stride=1, mode="full"):
        return ad.relu(ad.op_conv1d(x, self._p(name), mode=mode,
                                    bias=self._p(f"{name}_b"), stride=stride))

    # -- taps --------------------------------------------------------------
    def forward_taps(self, x: Tensor) -> list[Tensor]:
        kind = self.spec.input_kind
        if kind == "magnitude" and (x.data.ndim != 3 or x.shape[-1] != self.f_bins):
            raise ContractError(
                f"{self.spec.name} expects magnitude [B,T,{self.f_bins}], got {x.shape}")
        if kind == "waveform":
            if x.data.ndim != 2:
                raise ContractError(
                    f"{self.spec.name} expects waveform [B,N], got {x.shape}")
            x = ad.reshape(x, (x.shape[0], x.shape[1], 1))
        name = self.spec.name
        taps = []
        if name == "event":
            h = x
            for i in (1, 2, 3, 4):
                h = self._conv(h, f"c{i}")
                taps.append(h)
        elif name == "acoustic":
            h = self._conv(x, "c1"); taps.append(h)
            h = self._conv(h, "c2"); taps.append(h)
            taps.append(self._rnn(h))
        elif name == "speaker":
            h = self._conv(x, "c1", stride=16); taps.append(h)
            for i in (1, 2):
                h = self._conv(h, f"b{i}_down", stride=4)
                h = h + self._conv(h, f"b{i}_res")
                taps.append(h)
        elif name == "emotion":
            h = self._conv(x, "c1", stride=16); taps.append(h)
            h = self._conv(h, "c2", stride=4); taps.append(h)
            h = self._conv(h, "c3", stride=2); taps.append(h)
        elif name == "pase":
            h = self._conv(x, "c1", stride=16); taps.append(h)
            strides = (2, 2, 1, 1, 1)
            for i, st in zip(range(2, 7), strides):
                h = self._conv(h, f"c{i}", stride=st)
                taps.append(h)
        elif name == "wav2vec":
            h = self._conv(x, "c1", stride=16)
            h = self._conv(h, "c2", stride=8)
            taps.append(h)
            for i in range(4):
                h = self._transformer_block(h, f"blk{i}")
                taps.append(h)
        assert len(taps) == self.spec.n_layers
        return taps

    def _rnn(self, x: Tensor) -> Tensor:
        wx, wh, b = self._p("rnn_wx"), self._p("rnn_wh"), self._p("rnn_b")
        B, T, _ = x.shape
        H = wh.shape[0]
        h = Tensor(np.zeros((B, H)))
        outs = []
        proj = ad.op_linear(x, wx, b)  # [B,T,H], input projection hoisted out of the loop
        for t in range(T):
            step = _slice_time(proj, t)
            h = ad.tanh(step + ad.matmul(h, wh))
            outs.append(ad.reshape(h, (B, 1, H)))
        return ad.concat(outs, axis=1)

    def _transformer_block(self, x, p):
        h = ad.layer_norm(x, self._p(f"{p}.ln1.gamma"), self._p(f"{p}.ln1.beta"))
        att = {nm: self._p(f"{p}.{nm}")
               for nm in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")}
        x = x + ad.op_attention(h, att, heads=2, rel_pe=False)
        h = ad.layer_norm(x, self._p(f"{p}.ln2.gamma"), self._p(f"{p}.ln2.beta"))
        h = ad.relu(ad.op_linear(h, self._p(f"{p}.fw1"), self._p(f"{p}.fb1")))
        return x + ad.op_linear(h, self._p(f"{p}.fw2"), self._p(f"{p}.fb2"))

    # -- task heads (pretraining only) ------------------------------------
    def head_logits(self, taps):
        name = self.spec.name
        if name in ("event", "speaker", "emotion"):
            pooled = ad.tmean(taps[-1], axis=1)
            return ad.op_linear(pooled, self._p("head"), self._p("head_b"))
        if name == "acoustic":
            return ad.op_linear(taps[-1], self._p("head"), self._p("head_b"))
        raise ConfigurationError(f"{name} has no classification head")


def _slice_time(x: Tensor, t: int) -> Tensor:
    """Differentiable x[:, t, :] for [B,T,H] tensors."""
    out = Tensor(x.data[:, t, :])

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[:, t, :] = g
        return (gx,)

    return ad._record(out, (x,), bwd)


def aux_forward_taps(net: AuxNet, x: Tensor) -> list[Tensor]:
    return net.forward_taps(x)


def perceptual_loss(net: AuxNet, enhanced: Tensor, clean) -> Tensor:
    """Layer-averaged mean-absolute deep feature distance.

    ``clean`` is either a raw input array (same shape as ``enhanced``) or a
    precomputed list of tap arrays (cached once per utterance).
    """
    if isinstance(clean, list):
        clean_taps = clean
    else:
        clean = np.asarray(clean)
        if clean.shape != tuple(enhanced.shape):
            raise ContractError(
                f"enhanced {enhanced.shape} vs clean {clean.shape}")
        clean_taps = [t.data for t in net.forward_taps(Tensor(clean))]
    taps = net.forward_taps(enhanced)
    total = None
    for t, c in zip(taps, clean_taps):
        d = ad.tmean(ad.absolute(t - Tensor(np.asarray(c))))
        total = d if total is None else total + d
    return total * Tensor(1.0 / net.spec.n_layers)


def clean_taps(net: AuxNet, clean_input: np.ndarray) -> list[np.ndarray]:
    """Tap activations of a reference input, outside any tape."""
    return [t.data for t in net.forward_taps(Tensor(np.asarray(clean_input)))]


def l1_stft_loss(enhanced_mag: Tensor, clean_mag) -> Tensor:
    clean_mag = np.asarray(clean_mag)
    if tuple(enhanced_mag.shape) != clean_mag.shape:
        raise ContractError(
            f"magnitude shapes differ: {enhanced_mag.shape} vs {clean_mag.shape}")
    return ad.tmean(ad.absolute(enhanced_mag - Tensor(clean_mag)))


@dataclass
class LossReport:
    raw: dict
    weights: dict
    weighted: dict
    total: float


def perl_total(weights: LossWeights, enabled, loss_terms: dict):
    """Weighted sum over enabled terms.

    ``loss_terms`` maps term name to a zero-argument callable returning the
    scalar loss Tensor, so disabled terms cost nothing.  Returns
    (total Tensor, LossReport).
    """
    enabled = tuple(enabled)
    if not enabled:
        raise ConfigurationError("no loss terms enabled")
    unknown = set(enabled) - set(TERMS)
    if unknown:
        raise ConfigurationError(f"unknown loss terms {sorted(unknown)}")
    wd = weights.as_dict()
    raw, weighted = {}, {}
    total = None
    for term in enabled:
        lt = loss_terms[term]()
        raw[term] = float(lt.data)
        contrib = Tensor(wd[term]) * lt
        weighted[term] = float(contrib.data)
        total = contrib if total is None else total + contrib
    report = LossReport(raw=raw, weights={t: wd[t] for t in enabled},
                        weighted=weighted, total=float(total.data))
    return total, report


# ---------------------------------------------------------------------------
# toy pretraining

TASK_TO_NAME = {
    "event": "event", "acoustic": "acoustic", "speaker": "speaker",
    "emotion": "emotion", "pase_multitask": "pase", "wav2vec_contrastive": "wav2vec",
}


def _pase_targets(wav: np.ndarray, frames: int) -> np.ndarray:
    """Per-frame [log-RMS, roughness] targets at the pase frame rate."""
    block = len(wav) // frames
    w = wav[:frames * block].reshape(frames, block)
    log_rms = np.log(np.sqrt(np.mean(w ** 2, axis=1)) + 1e-6)
    rough = np.log(np.mean(np.abs(np.diff(w, axis=1)), axis=1) + 1e-6)
    return np.stack([log_rms, rough], axis=1)


def pretrain_toy_aux(task: str, corpus_dir, epochs: int = 4, seed: int = 0,
                     out_path=None, max_items: int = 160, batch: int = 8,
                     lr: float = 2e-3):
    """Train one toy auxiliary network on the synthetic corpus, freeze it,
    and (optionally) save a checkpoint tagged with the task and its
    validation score."""
    from pathlib import Path
    corpus_dir = Path(corpus_dir)
    if task not in TASK_TO_NAME:
        raise ConfigurationError(f"unknown pretraining task {task!r}")
    name = TASK_TO_NAME[task]
    spec = AuxSpec(name)
    net = AuxNet(spec, seed=seed)

    rows = read_manifest(corpus_dir / "train.tsv")[:max_items]
    n_val = max(4, len(rows) // 10)
    if task == "event":
        # noise classes appear in the validation split too
        val_rows = read_manifest(corpus_dir / "val.tsv")[:40]
        train_rows = rows
    else:
        val_rows, train_rows = rows[:n_val], rows[n_val:]

    def load_item(r):
        if name == "event":
            w = read_wav(r.noisy_path)
        else:
            w = read_wav(r.clean_path)
        lab = r.labels()
        if spec.input_kind == "magnitude":
            x = stft(w).magnitude
        else:
            x = w.samples
        if task == "event":
            from .corpus import NOISE_CLASSES
            y = NOISE_CLASSES.index(r.noise_class)
        elif task == "acoustic":
            y = np.asarray(lab["frame_units"])
        elif task == "speaker":
            y = lab["speaker_id"]
        elif task == "emotion":
            y = lab["prosody_class"]
        else:
            y = None
        return x, y

    train = [load_item(r) for r in train_rows]
    val = [load_item(r) for r in val_rows]
    opt = ad.Adam(net.trainable_params(), lr=lr)
    rng = np.random.default_rng(seed + 1)

    def batch_loss(items):
        xs = Tensor(np.stack([x for x, _ in items]))
        if task in ("event", "speaker", "emotion"):
            labels = np.array([y for _, y in items])
            taps = net.forward_taps(xs)
            return ad.cross_entropy(net.head_logits(taps), labels)
        if task == "acoustic":
            labels = np.stack([y for _, y in items])
            taps = net.forward_taps(xs)
            return ad.cross_entropy(net.head_logits(taps), labels)
        taps = net.forward_taps(xs)
        feats = taps[-1]
        if task == "pase_multitask":
            T = feats.shape[1]
            tgt = np.stack([_pase_targets(x, T) for x, _ in items])
            pred = ad.op_linear(feats, net._p("head"), net._p("head_b"))
            diff = pred - Tensor(tgt)
            return ad.tmean(ad.mul(diff, diff))
        # wav2vec_contrastive: distinguish the aligned front frame among all
        # frames of the same utterance
        front = taps[0].data
        ctx = ad.op_linear(feats, net._p("proj"), net._p("proj_b"))
        logits = ad.matmul(ctx, Tensor(np.swapaxes(front, 1, 2)))
        logits = logits * Tensor(1.0 / np.sqrt(front.shape[-1]))
        T = logits.shape[1]
        labels = np.tile(np.arange(T), (logits.shape[0], 1))
        return ad.cross_entropy(logits, labels)

    history = []
    for ep in range(epochs):
        order = rng.permutation(len(train))
        ep_loss = 0.0
        nb = 0
        for i in range(0, len(train) - batch + 1, batch):
            items = [train[j] for j in order[i:i + batch]]
            opt.zero_grad()
            with ad.tape() as t:
                loss = batch_loss(items)
                ad.backward(loss, t)
            opt.step()
            ep_loss += float(loss.data)
            nb += 1
        history.append(ep_loss / max(nb, 1))

    val_acc = None
    if task in ("event", "speaker", "emotion", "acoustic"):
        correct = total = 0
        for x, y in val:
            with ad.tape():
                taps = net.forward_taps(Tensor(x[None]))
                logits = net.head_logits(taps).data
            if task == "acoustic":
                correct += int((logits[0].argmax(-1) == y).sum())
                total += len(y)
            else:
                correct += int(logits[0].argmax() == y)
                total += 1
        val_acc = correct / total

    net.freeze()
    if out_path is not None:
        save_aux(out_path, net, task, val_acc, history)
    return net, val_acc, history


def save_aux(path, net: AuxNet, task: str | None = None, val_acc=None, history=None):
    save_params(path, net.store,
                {"kind": "aux", "name": net.spec.name, "f_bins": net.f_bins,
                 "seed": net.seed},
                extra={"task": task, "val_accuracy": val_acc, "history": history})


def load_aux(path) -> AuxNet:
    meta, params, bn = load_container(path)
    cfg = meta["config"]
    net = AuxNet(AuxSpec(cfg["name"]), f_bins=cfg["f_bins"], seed=cfg["seed"])
    _restore_store(net.store, params, bn)
    net.freeze()
    return net


def build_random_frozen(name: str, f_bins: int = 257, seed: int = 0) -> AuxNet:
    net = AuxNet(AuxSpec(name, checkpoint="random_frozen"), f_bins=f_bins, seed=seed)
    net.freeze()
    return net
