"""Training recipe: balanced epoch sampling, augmentation, BCE loss, AdamW and
the hold / linear-decay / fine-tune learning-rate schedule.
"""

import csv
from dataclasses import dataclass, field, replace
import json
import logging
import os
import zlib

import numpy as np

from passt import autograd as ag
from passt import frontend, net
from passt.eval import mean_ap
from passt.tokenizer import PatchoutSpec

log = logging.getLogger(__name__)

LABEL_SMOOTHING = 100.0
METRICS_HEADER = ("epoch", "step", "loss", "lr", "train_map")


@dataclass(frozen=True)
class LabeledExample:
    id: str
    wav: object  # path to a WAV file or an in-memory frontend.Waveform
    labels: frozenset = frozenset()

    def __post_init__(self):
        if not self.id:
            raise ValueError("example id must be non-empty")
        object.__setattr__(self, "labels", frozenset(int(c) for c in self.labels))

    def waveform(self):
        if isinstance(self.wav, frontend.Waveform):
            return self.wav
        return frontend.load_pcm(self.wav)


def load_manifest(path):
    """Read a JSON-lines manifest of ``{"id", "wav", "labels"}`` objects.

    Relative wav paths resolve against the manifest's directory.
    """
    base = os.path.dirname(os.path.abspath(path))
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                wav = obj["wav"]
                out.append(LabeledExample(obj["id"], os.path.join(base, wav), frozenset(obj["labels"])))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest entry ({exc})") from exc
    return out


def write_manifest(path, dataset):
    with open(path, "w") as f:
        for ex in dataset:
            f.write(json.dumps({"id": ex.id, "wav": str(ex.wav), "labels": sorted(ex.labels)}) + "\n")


def label_frequencies(dataset, n_classes=None):
    if not dataset:
        raise ValueError("empty dataset")
    top = max((max(ex.labels) for ex in dataset if ex.labels), default=-1) + 1
    n_classes = top if n_classes is None else n_classes
    if top > n_classes:
        raise ValueError(f"label {top - 1} outside [0, {n_classes})")
    counts = np.zeros(n_classes, dtype=np.int64)
    for ex in dataset:
        for c in ex.labels:
            counts[c] += 1
    return counts


def sample_weights(dataset, counts, smoothing=LABEL_SMOOTHING):
    """Per-example weight ``sum over labels of 1 / (count[label] + smoothing)``.

    Unlabeled examples get the smallest weight found among labeled ones so they
    can still be drawn.
    """
    counts = np.asarray(counts, dtype=np.float64)
    w = np.array([sum(1.0 / (counts[c] + smoothing) for c in ex.labels) for ex in dataset])
    empty = w == 0
    if empty.any():
        w[empty] = w[~empty].min() if (~empty).any() else 1.0
    return w


@dataclass(frozen=True)
class SamplerState:
    ids: tuple
    weights: np.ndarray
    epoch_size: int
    seed: int = 0

    def __post_init__(self):
        if len(self.ids) != len(self.weights):
            raise ValueError("one weight per id required")
        if np.any(np.asarray(self.weights) <= 0):
            raise ValueError("sampling weights must be positive")
        if not 0 < self.epoch_size <= len(self.ids):
            raise ValueError(f"epoch_size {self.epoch_size} must be in [1, {len(self.ids)}]")


def epoch_sample(state, epoch=0):
    """Weighted sampling without replacement via exponential keys.

    Each item gets ``key = -ln(u) / w`` with ``u ~ U(0, 1]``; the ``epoch_size``
    smallest keys are returned in ascending key order. This is equivalent to
    drawing items one at a time with probability proportional to weight.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([state.seed, epoch])))
    u = 1.0 - rng.random(len(state.ids))
    keys = -np.log(u) / np.asarray(state.weights, dtype=np.float64)
    order = np.argsort(keys, kind="stable")[:state.epoch_size]
    return [state.ids[i] for i in order]


def specaugment(spec, rng, max_f=48, max_t=192):
    """Zero one frequency stripe of width U{0..max_f} and one time stripe of width U{0..max_t}."""
    values = spec.values.copy()
    F, T = values.shape
    wf = min(int(rng.integers(0, max_f + 1)), F)
    wt = min(int(rng.integers(0, max_t + 1)), T)
    f0 = int(rng.integers(0, F - wf + 1))
    t0 = int(rng.integers(0, T - wt + 1))
    values[f0:f0 + wf, :] = 0
    values[:, t0:t0 + wt] = 0
    return frontend.MelSpectrogram(values, spec.hop_ms, spec.win_ms)


def mixup_spectrogram(a, b, lam):
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mix-up lambda must lie in [0, 1], got {lam}")
    if a.values.shape != b.values.shape:
        raise ValueError(f"shape mismatch: {a.values.shape} vs {b.values.shape}")
    if lam == 1.0:
        return a
    if lam == 0.0:
        return b
    mixed = lam * a.values + (1.0 - lam) * b.values
    return frontend.MelSpectrogram(mixed.astype(a.values.dtype), a.hop_ms, a.win_ms)


def bce_loss(logits, targets):
    """Mean sigmoid binary cross-entropy over all entries."""
    logits = np.asarray(logits)
    targets = np.asarray(targets, dtype=logits.dtype)
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    if np.any((targets < 0) | (targets > 1)):
        raise ValueError("targets must lie in [0, 1]")
    return float(ag.bce_with_logits(logits, targets).data)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state, lr, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
    """One AdamW update with decoupled decay. Returns new ``(params, state)``."""
    b1, b2 = betas
    t = state.step + 1
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        decayed = p - lr * weight_decay * p
        new_params[name] = (decayed - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(t, m_out, v_out)


@dataclass(frozen=True)
class ScheduleConfig:
    lr_max: float = 1e-5
    lr_min: float = 1e-7
    warm_hold_epochs: float = 50
    decay_end_epoch: float = 100
    finetune_epochs: float = 20
    weight_decay: float = 1e-4

    def __post_init__(self):
        if not self.lr_min < self.lr_max:
            raise ValueError("lr_min must be below lr_max")
        if not 0 <= self.warm_hold_epochs <= self.decay_end_epoch:
            raise ValueError("hold must end before decay ends")

    @property
    def total_epochs(self):
        return self.decay_end_epoch + self.finetune_epochs


def lr_at(epoch, cfg=ScheduleConfig()):
    """Constant ``lr_max``, then linear decay to ``lr_min``, then constant ``lr_min``."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if epoch < cfg.warm_hold_epochs:
        return cfg.lr_max
    if epoch >= cfg.decay_end_epoch:
        return cfg.lr_min
    frac = (epoch - cfg.warm_hold_epochs) / (cfg.decay_end_epoch - cfg.warm_hold_epochs)
    return cfg.lr_max + frac * (cfg.lr_min - cfg.lr_max)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    clip_seconds: float = 10.0
    epoch_size: int = 0  # 0 means the whole dataset
    max_steps: int = 0  # 0 means run the full schedule
    seed: int = 0
    gain_db: float = 7.0
    roll: bool = True
    mixup_alpha: float = 0.3
    mixup_prob: float = 0.5
    specaug_freq: int = 48
    specaug_time: int = 192
    norm_mean: float = frontend.NORM_MEAN
    norm_std: float = frontend.NORM_STD
    label_smoothing: float = LABEL_SMOOTHING
    init_seed: int = 0


def example_rng(seed, example_id, epoch):
    """Independent stream per (seed, example, epoch) so batch order does not matter."""
    key = zlib.crc32(example_id.encode("utf-8"))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, key, epoch])))


def _targets(labels, n_classes):
    y = np.zeros(n_classes)
    y[list(labels)] = 1.0
    return y


def _clip_spectrogram(w, cfg):
    n = int(round(cfg.clip_seconds * frontend.SAMPLE_RATE))
    spec = frontend.mel_spectrogram(frontend.fit_length(w, n))
    return frontend.normalize(spec, cfg.norm_mean, cfg.norm_std)


def _mix_batch(items, targets, rng, cfg, mix):
    """Pair each item with a shuffled partner and blend with one Beta-drawn lambda."""
    if rng.random() >= cfg.mixup_prob or len(items) < 2:
        return items, targets
    lam = float(rng.beta(cfg.mixup_alpha, cfg.mixup_alpha))
    perm = rng.permutation(len(items))
    items = [mix(items[i], items[j], lam) for i, j in enumerate(perm)]
    return items, lam * targets + (1.0 - lam) * targets[perm]


def make_batch(examples, waves, n_classes, cfg, epoch, step):
    """Augmented, normalized spectrogram batch ``(b, F, T)`` and soft targets ``(b, C)``."""
    n = int(round(cfg.clip_seconds * frontend.SAMPLE_RATE))
    batch_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, epoch, step, 1])))
    wavs = []
    for ex in examples:
        rng = example_rng(cfg.seed, ex.id, epoch)
        w = frontend.fit_length(waves[ex.id], n)
        if cfg.roll:
            w = frontend.roll_waveform(w, int(rng.integers(0, n)))
        if cfg.gain_db:
            w = frontend.random_gain(w, float(rng.uniform(-cfg.gain_db, cfg.gain_db)))
        wavs.append(w)
    targets = np.stack([_targets(ex.labels, n_classes) for ex in examples])
    wavs, targets = _mix_batch(wavs, targets, batch_rng, cfg, frontend.mixup_waveform)
    specs = [frontend.normalize(frontend.mel_spectrogram(w), cfg.norm_mean, cfg.norm_std) for w in wavs]
    specs = [specaugment(s, example_rng(cfg.seed + 1, ex.id, epoch), cfg.specaug_freq, cfg.specaug_time)
             for s, ex in zip(specs, examples)]
    specs, targets = _mix_batch(specs, targets, batch_rng, cfg, mixup_spectrogram)
    return np.stack([s.values for s in specs]), targets, int(batch_rng.integers(0, 2**63))


def predict(params, config, specs, batch_size=8):
    out = [net.model_forward(specs[i:i + batch_size], params, config, training=False)
           for i in range(0, len(specs), batch_size)]
    return np.concatenate(out)


@dataclass
class TrainResult:
    params: dict
    metrics: list  # one dict per step, keys METRICS_HEADER
    attn_elems: list  # attention-matrix elements per step, summed over layers
    optimizer: AdamState = None


def train_loop(dataset, model_config, schedule=ScheduleConfig(), patchout=PatchoutSpec(),
               cfg=TrainConfig(), params=None, metrics_path=None):
    """Run the full recipe and return parameters plus a per-step metrics log.

    Every epoch draws ``epoch_size`` examples by inverse-label-frequency
    importance sampling, builds augmented batches, runs the model with
    Patchout, and applies AdamW at ``lr_at(fractional epoch)``. Training mAP
    on clean inputs is evaluated at the end of every epoch.
    """
    n_classes = model_config.n_classes
    counts = label_frequencies(dataset, n_classes)
    weights = sample_weights(dataset, counts, cfg.label_smoothing)
    epoch_size = cfg.epoch_size or len(dataset)
    sampler = SamplerState(tuple(ex.id for ex in dataset), weights, epoch_size, cfg.seed)
    by_id = {ex.id: ex for ex in dataset}
    waves = {ex.id: ex.waveform() for ex in dataset}
    clean = np.stack([_clip_spectrogram(waves[ex.id], cfg).values for ex in dataset])
    clean_targets = np.stack([_targets(ex.labels, n_classes) for ex in dataset])

    if params is None:
        params = net.init_params(model_config, seed=cfg.init_seed)
    net.check_params(params, model_config)
    opt = AdamState()
    steps_per_epoch = -(-epoch_size // cfg.batch_size)
    n_epochs = int(np.ceil(schedule.total_epochs))
    metrics, attn = [], []
    step = 0

    writer = None
    fh = open(metrics_path, "w", newline="") if metrics_path else None
    try:
        if fh:
            writer = csv.writer(fh)
            writer.writerow(METRICS_HEADER)
        for epoch in range(n_epochs):
            ids = epoch_sample(sampler, epoch)
            for i in range(steps_per_epoch):
                if cfg.max_steps and step >= cfg.max_steps:
                    break
                batch = [by_id[x] for x in ids[i * cfg.batch_size:(i + 1) * cfg.batch_size]]
                x, y, po_seed = make_batch(batch, waves, n_classes, cfg, epoch, step)
                trace = net.AttentionTrace()
                loss, grads, _ = net.value_and_grad(
                    params, x, y, model_config, replace(patchout, seed=po_seed), True, trace)
                lr = lr_at(min(epoch + i / steps_per_epoch, schedule.total_epochs), schedule)
                params, opt = adamw_step(params, grads, opt, lr, schedule.weight_decay)
                step += 1
                last = i == steps_per_epoch - 1 or step == cfg.max_steps
                row = {"epoch": epoch, "step": step, "loss": loss, "lr": lr, "train_map": ""}
                if last:
                    row["train_map"] = mean_ap(predict(params, model_config, clean), clean_targets)
                    log.info("epoch %d step %d loss %.5f lr %.3g mAP %.4f",
                             epoch, step, loss, lr, row["train_map"])
                metrics.append(row)
                attn.append(trace.total_attn_elems)
                if writer:
                    writer.writerow([row[k] for k in METRICS_HEADER])
            if cfg.max_steps and step >= cfg.max_steps:
                break
    finally:
        if fh:
            fh.close()
    return TrainResult(params, metrics, attn, opt)


def synthetic_dataset(n_examples=10, n_classes=4, seconds=10.0, seed=0):
    """Tone mixtures where class ``c`` is a chord of sinusoids on its own mel bands.

    Every example carries one or two labels and every class has both
    positives and negatives, which makes a clean overfitting target.
    """
    rng = np.random.default_rng(seed)
    sr = frontend.SAMPLE_RATE
    t = np.arange(int(seconds * sr)) / sr
    # Each class owns one band in every 32-band octave-ish region, so its
    # evidence survives the loss of whole frequency rows of patches.
    step = max(32 // n_classes, 1)
    bands = np.array([[(5 + step * c + 32 * k) % frontend.N_MELS for k in range(4)]
                      for c in range(n_classes)])
    edges = frontend.mel_to_hz(np.linspace(frontend.hz_to_mel(frontend.F_MIN),
                                           frontend.hz_to_mel(frontend.F_MAX), frontend.N_MELS + 2))
    freqs = edges[bands + 1]
    out = []
    for i in range(n_examples):
        labels = {i % n_classes}
        if i >= n_classes and rng.random() < 0.5:
            labels.add(int(rng.integers(0, n_classes)))
        x = 0.01 * rng.standard_normal(t.size)
        for c in labels:
            for f in freqs[c]:
                x += 0.1 * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        out.append(LabeledExample(f"toy{i:03d}", frontend.Waveform(x.astype(np.float32)), frozenset(labels)))
    return out


def write_dataset(directory, dataset):
    """Persist in-memory examples as 16-bit WAVs plus ``manifest.jsonl``."""
    os.makedirs(directory, exist_ok=True)
    stored = []
    for ex in dataset:
        name = f"{ex.id}.wav"
        frontend.save_pcm(os.path.join(directory, name), ex.waveform())
        stored.append(LabeledExample(ex.id, name, ex.labels))
    path = os.path.join(directory, "manifest.jsonl")
    write_manifest(path, stored)
    return path
