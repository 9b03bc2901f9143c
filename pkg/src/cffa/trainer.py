"""Source pretraining and coarse-to-fine adaptation loops.

Each adaptation step combines, on one source and one target image,

    L_total = L_det(source) + lambda1 * L_ART + lambda2 * L_PSA

with L_PSA switched on from ``psa_start_iter``. The detector is stepped by SGD
with momentum, the domain classifiers by Adam.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .art import SOURCE, TARGET, adversarial_loss_map, art_loss, compute_attention, make_classifiers
from .config import RunConfig, TrainConfig, format_config, parse_config_text
from .detector import DetectorConfig, DetectorModel, detection_loss, propose, roi_head_forward
from .psa import (
    PrototypeBank,
    init_global_prototypes,
    psa_loss,
    source_local_prototypes,
    target_local_prototypes,
    update_global,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

METRICS_HEADER = "iter,l_det,l_rpn,l_reg,l_cls,l_art,l_psa,l_total,lr"
PHASES = ("pretrain", "adapt")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class TrainingError(RuntimeError):
    pass


class SampleStream:
    """Epoch-shuffled, without-replacement index stream over one dataset."""

    def __init__(self, size: int, rng: np.random.Generator):
        if size <= 0:
            raise ValueError("cannot sample from an empty dataset")
        self.size = size
        self.rng = rng
        self.order = np.zeros(0, dtype=np.int64)
        self.pos = 0

    def next(self) -> int:
        if self.pos >= len(self.order):
            self.order = self.rng.permutation(self.size)
            self.pos = 0
        i = int(self.order[self.pos])
        self.pos += 1
        return i


@dataclass
class UnlabeledView:
    """What the training loop sees of a target sample: pixels and an id."""

    image: np.ndarray
    id: str


@dataclass
class TrainState:
    config: RunConfig
    model: DetectorModel
    classifiers: list
    momentum: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    adam_step: int = 0
    source_bank: PrototypeBank | None = None
    target_bank: PrototypeBank | None = None
    phase: str = "pretrain"
    iteration: int = 0
    source_stream: SampleStream | None = None
    target_stream: SampleStream | None = None
    metrics: list = field(default_factory=list)

    def classifier_params(self) -> dict[str, Tensor]:
        out = {}
        for c in self.classifiers:
            out.update(c.params)
        return out


def detector_config(train: TrainConfig) -> DetectorConfig:
    return DetectorConfig(num_classes=train.num_classes)


def init_state(config: RunConfig, n_source: int, n_target: int) -> TrainState:
    seq = np.random.SeedSequence(config.train.seed)
    init_seq, src_seq, tgt_seq = seq.spawn(3)
    init_rng = np.random.default_rng(init_seq)
    model = DetectorModel(detector_config(config.train), init_rng)
    classifiers = make_classifiers(model.config.channels, init_rng, config.train.classifier_hidden)
    state = TrainState(config, model, classifiers)
    state.source_stream = SampleStream(n_source, np.random.default_rng(src_seq))
    state.target_stream = SampleStream(n_target, np.random.default_rng(tgt_seq))
    return state


def sample_batch(source_dataset, target_dataset, batch_size: int, state: TrainState):
    """B/2 labelled source samples and B/2 unlabelled target views."""
    if batch_size % 2:
        raise ValueError("batch size must be even")
    if not len(source_dataset) or not len(target_dataset):
        raise ValueError("cannot sample from an empty dataset")
    half = batch_size // 2
    sources = [source_dataset[state.source_stream.next()] for _ in range(half)]
    targets = []
    for _ in range(half):
        t = target_dataset[state.target_stream.next()]
        targets.append(UnlabeledView(t.image, t.id))
    return sources, targets


# ------------------------------------------------------------------ optimizers

def sgd_step(params: dict[str, Tensor], momentum: dict[str, np.ndarray], lr: float, mu: float):
    for name, p in params.items():
        if p.grad is None:
            continue
        buf = momentum.get(name)
        buf = p.grad.copy() if buf is None else mu * buf + p.grad
        momentum[name] = buf
        p.data = p.data - lr * buf


def adam_step(state: TrainState, lr: float):
    params = state.classifier_params()
    if not any(p.grad is not None for p in params.values()):
        return
    state.adam_step += 1
    b1, b2 = ADAM_BETAS
    t = state.adam_step
    for name, p in params.items():
        g = np.zeros_like(p.data) if p.grad is None else p.grad
        m = b1 * state.adam_m.get(name, np.zeros_like(p.data)) + (1 - b1) * g
        v = b2 * state.adam_v.get(name, np.zeros_like(p.data)) + (1 - b2) * g * g
        state.adam_m[name], state.adam_v[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def _zero_grads(state: TrainState):
    state.model.zero_grad()
    for p in state.classifier_params().values():
        p.grad = None


# --------------------------------------------------------------------- metrics

def _fmt(x) -> str:
    return "" if x is None else repr(float(x))


class MetricsLog:
    def __init__(self, path):
        self.path = None if path is None else Path(path)
        if self.path is not None and not self.path.exists():
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="\n") as f:
                f.write(METRICS_HEADER + "\n")
        self.rows: list[dict] = []

    def append(self, row: dict):
        self.rows.append(row)
        if self.path is not None:
            fields = ["iter", "l_det", "l_rpn", "l_reg", "l_cls", "l_art", "l_psa", "l_total", "lr"]
            line = ",".join(str(row["iter"]) if k == "iter" else _fmt(row.get(k)) for k in fields)
            with open(self.path, "a", newline="\n") as f:
                f.write(line + "\n")


def _check_finite(terms: dict, sample_ids, iteration: int):
    bad = {k: v for k, v in terms.items() if v is not None and not math.isfinite(v)}
    if bad:
        dump = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        raise TrainingError(f"non-finite loss at iteration {iteration} on {sample_ids}: {dump}")


# ------------------------------------------------------------------ the loops

def current_lr(train: TrainConfig, phase: str, iteration: int) -> float:
    if phase == "pretrain":
        return train.pretrain_lr
    return train.detector_lr if iteration < train.lr_decay_iter else train.detector_lr_after_decay


def _pretrain_step(state: TrainState, source_dataset) -> dict:
    train = state.config.train
    sample = source_dataset[state.source_stream.next()]
    _zero_grads(state)
    outputs = state.model.forward(sample.image)
    losses = detection_loss(state.model, outputs, sample.annotations)
    total = losses.total
    row = {
        "l_det": total.item(), "l_rpn": losses.rpn_loss.item(), "l_reg": losses.reg_loss.item(),
        "l_cls": losses.cls_loss.item(), "l_total": total.item(),
    }
    _check_finite(row, [sample.id], state.iteration)
    total.backward()
    lr = current_lr(train, "pretrain", state.iteration)
    sgd_step(state.model.params, state.momentum, lr, train.momentum)
    row["lr"] = lr
    return row


def _adapt_step(state: TrainState, source_dataset, target_dataset) -> dict:
    train = state.config.train
    model = state.model
    (src,), (tgt,) = sample_batch(source_dataset, target_dataset, train.batch_size, state)
    _zero_grads(state)

    out_s = model.forward(src.image)
    losses = detection_loss(model, out_s, src.annotations)
    l_det = losses.total
    total = l_det
    l_art = l_psa = None

    if train.lambda1 > 0:
        out_t = model.forward(tgt.image)
        per_image = []
        for out, domain in ((out_s, SOURCE), (out_t, TARGET)):
            attention = compute_attention(out.f_rpn) if train.use_attention else None
            maps = [
                adversarial_loss_map(f, d, domain, train.grl_coeff)
                for f, d in zip(out.features, state.classifiers)
            ]
            per_image.append(art_loss(maps, attention, normalize=train.normalize_art))
        l_art = (per_image[0] + per_image[1]) * 0.5
        total = total + l_art * train.lambda1
    else:
        out_t = None

    psa_active = train.lambda2 > 0 and state.iteration >= train.psa_start_iter
    if psa_active:
        if out_t is None:
            out_t = model.forward(tgt.image)
        gt_boxes = np.asarray([tuple(b) for b, _ in src.annotations], dtype=np.float64).reshape(-1, 4)
        gt_labels = [k for _, k in src.annotations]
        fc2_s, _, _ = roi_head_forward(model, out_s.features[-1], gt_boxes)
        local_s = source_local_prototypes(fc2_s, gt_labels)
        rois, _ = propose(model, out_t)
        fc2_t, scores_t, _ = roi_head_forward(model, out_t.features[-1], rois)
        local_t = target_local_prototypes(fc2_t, scores_t, train.pseudo_score_thresh)
        state.source_bank = update_global(state.source_bank, local_s)
        state.target_bank = update_global(state.target_bank, local_t)
        l_psa = psa_loss(state.source_bank, state.target_bank)
        total = total + l_psa * train.lambda2

    row = {
        "l_det": l_det.item(), "l_rpn": losses.rpn_loss.item(), "l_reg": losses.reg_loss.item(),
        "l_cls": losses.cls_loss.item(),
        "l_art": None if l_art is None else l_art.item(),
        "l_psa": None if l_psa is None else l_psa.item(),
        "l_total": total.item(),
    }
    _check_finite(row, [src.id, tgt.id], state.iteration)
    total.backward()
    lr = current_lr(train, "adapt", state.iteration)
    sgd_step(model.params, state.momentum, lr, train.momentum)
    if l_art is not None:
        adam_step(state, train.classifier_lr)
    if psa_active:
        state.source_bank = state.source_bank.detach()
        state.target_bank = state.target_bank.detach()
    row["lr"] = lr
    return row


def run_phase(state: TrainState, source_dataset, target_dataset=None, stop_at: int | None = None,
              metrics_path=None) -> TrainState:
    """Advance ``state`` in its current phase up to ``stop_at`` (default: phase end)."""
    train = state.config.train
    end = train.pretrain_iters if state.phase == "pretrain" else train.adapt_iters
    stop = end if stop_at is None else min(stop_at, end)
    metrics = MetricsLog(metrics_path)
    while state.iteration < stop:
        if state.phase == "pretrain":
            row = _pretrain_step(state, source_dataset)
        else:
            row = _adapt_step(state, source_dataset, target_dataset)
        row["iter"] = state.iteration
        metrics.append(row)
        state.iteration += 1
        if state.iteration % 100 == 0:
            log.info("%s iter %d: total %.4f", state.phase, state.iteration, row["l_total"])
    state.metrics = metrics.rows
    return state


def pretrain(config: RunConfig, source_dataset, stop_at: int | None = None, metrics_path=None,
             n_target: int = 1) -> TrainState:
    """Supervised training on the labelled source domain only."""
    state = init_state(config, len(source_dataset), max(n_target, 1))
    return run_phase(state, source_dataset, None, stop_at, metrics_path)


def start_adaptation(state: TrainState, source_dataset, target_dataset) -> TrainState:
    """Switch a pretrained state into the adaptation phase; builds the initial banks."""
    train = state.config.train
    state.phase = "adapt"
    state.iteration = 0
    state.target_stream = SampleStream(len(target_dataset), state.target_stream.rng)
    if train.lambda2 > 0:
        views = [UnlabeledView(s.image, s.id) for s in target_dataset]
        state.source_bank, state.target_bank = init_global_prototypes(
            state.model, source_dataset, views, train.pseudo_score_thresh
        )
    else:
        dim, k = state.model.config.fc_dim, train.num_classes
        state.source_bank = PrototypeBank.empty("source", k, dim)
        state.target_bank = PrototypeBank.empty("target", k, dim)
    return state


def adapt(config: RunConfig, pretrained, source_dataset, target_dataset, stop_at: int | None = None,
          metrics_path=None) -> TrainState:
    """Run the adaptation phase from a pretrained state or checkpoint dict.

    ``config`` replaces the configuration stored with the pretrained state.
    """
    state = pretrained if isinstance(pretrained, TrainState) else state_from_tensors(pretrained, config)
    if state.phase != "pretrain":
        raise TrainingError("adapt() expects a pretraining checkpoint; use resume() to continue")
    state.config = config
    start_adaptation(state, source_dataset, target_dataset)
    return run_phase(state, source_dataset, target_dataset, stop_at, metrics_path)


def resume(tensors_or_state, config: RunConfig | None, source_dataset, target_dataset=None,
           stop_at: int | None = None, metrics_path=None) -> TrainState:
    """Continue a run exactly where its checkpoint stopped.

    ``config=None`` reuses the stored configuration.
    """
    state = (
        tensors_or_state if isinstance(tensors_or_state, TrainState)
        else state_from_tensors(tensors_or_state, config)
    )
    if config is not None:
        state.config = config
    return run_phase(state, source_dataset, target_dataset, stop_at, metrics_path)


# --------------------------------------------------------------- serialization

def _rng_json(rng: np.random.Generator) -> str:
    return json.dumps(rng.bit_generator.state, sort_keys=True)


def _restore_rng(text: str) -> np.random.Generator:
    state = json.loads(text)
    gen = np.random.Generator(getattr(np.random, state["bit_generator"])())
    gen.bit_generator.state = state
    return gen


def state_to_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for name, p in state.model.params.items():
        out[f"model/{name}"] = p.data
    for name, p in state.classifier_params().items():
        out[f"classifier/{name}"] = p.data
    for name in state.model.params:
        if name in state.momentum:
            out[f"sgd/{name}"] = state.momentum[name]
    for name in state.classifier_params():
        if name in state.adam_m:
            out[f"adam_m/{name}"] = state.adam_m[name]
            out[f"adam_v/{name}"] = state.adam_v[name]
    out["adam/step"] = np.array([float(state.adam_step)])
    for bank in (state.source_bank, state.target_bank):
        if bank is not None:
            out[f"bank/{bank.domain}/vectors"] = bank.vectors
            out[f"bank/{bank.domain}/initialized"] = bank.initialized.astype(np.float64)
    out["state/phase"] = np.array([float(PHASES.index(state.phase))])
    out["state/iteration"] = np.array([float(state.iteration)])
    for key, stream in (("source", state.source_stream), ("target", state.target_stream)):
        out[f"stream/{key}/size"] = np.array([float(stream.size)])
        out[f"stream/{key}/order"] = stream.order.astype(np.float64)
        out[f"stream/{key}/pos"] = np.array([float(stream.pos)])
    out["__config__"] = ckpt.encode_text(format_config(state.config))
    rng_text = json.dumps(
        {"source": _rng_json(state.source_stream.rng), "target": _rng_json(state.target_stream.rng)},
        sort_keys=True,
    )
    out["__rng__"] = ckpt.encode_text(rng_text)
    return out


def state_from_tensors(tensors: dict[str, np.ndarray], config: RunConfig | None = None) -> TrainState:
    try:
        stored = parse_config_text(ckpt.decode_text(tensors["__config__"]), "<checkpoint>")
        config = stored if config is None else config
        model = DetectorModel(detector_config(stored.train), np.random.default_rng(0))
        model.load_state_dict({n: tensors[f"model/{n}"] for n in model.params})
        classifiers = make_classifiers(model.config.channels, np.random.default_rng(0), stored.train.classifier_hidden)
        state = TrainState(config, model, classifiers)
        for c in classifiers:
            for name, p in c.params.items():
                value = tensors[f"classifier/{name}"]
                if value.shape != p.shape:
                    raise ckpt.CheckpointError(f"classifier/{name}: shape {value.shape} != {p.shape}")
                p.data = value.copy()
        for name in model.params:
            if f"sgd/{name}" in tensors:
                state.momentum[name] = tensors[f"sgd/{name}"].copy()
        for name in state.classifier_params():
            if f"adam_m/{name}" in tensors:
                state.adam_m[name] = tensors[f"adam_m/{name}"].copy()
                state.adam_v[name] = tensors[f"adam_v/{name}"].copy()
        state.adam_step = int(tensors["adam/step"][0])
        for domain in ("source", "target"):
            if f"bank/{domain}/vectors" in tensors:
                bank = PrototypeBank(
                    domain, tensors[f"bank/{domain}/vectors"].copy(),
                    tensors[f"bank/{domain}/initialized"].astype(bool),
                )
                setattr(state, f"{domain}_bank", bank)
        state.phase = PHASES[int(tensors["state/phase"][0])]
        state.iteration = int(tensors["state/iteration"][0])
        rngs = json.loads(ckpt.decode_text(tensors["__rng__"]))
        for key in ("source", "target"):
            stream = SampleStream(int(tensors[f"stream/{key}/size"][0]), _restore_rng(rngs[key]))
            stream.order = tensors[f"stream/{key}/order"].astype(np.int64)
            stream.pos = int(tensors[f"stream/{key}/pos"][0])
            setattr(state, f"{key}_stream", stream)
    except KeyError as exc:
        raise ckpt.CheckpointError(f"checkpoint is missing entry {exc}") from None
    return state


def save_state(state: TrainState, path) -> Path:
    return ckpt.save(state_to_tensors(state), path)


def load_state(path, config: RunConfig | None = None) -> TrainState:
    return state_from_tensors(ckpt.load(path), config)
