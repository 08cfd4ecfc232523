"""Per-category stroke generator.

A conditional sequence VAE: a bidirectional LSTM encodes a Stroke-5 drawing
into a 128-d latent; an LSTM decoder, fed the latent plus a mask embedding
and the target aspect ratio at every step, emits mixture-density offsets and
a 3-way pen state until the end-of-drawing state is drawn.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import (
    AlignmentError,
    ConfigError,
    DimensionError,
    EmptySketchError,
    MappingError,
)
from .nn import (
    BiLSTMEncoder,
    ClippedAdam,
    ConvMaskEncoder,
    ExpSchedule,
    LSTMDecoderCell,
    gmm_log_likelihood,
    gmm_params_from_raw,
    gmm_sample,
    load_checkpoint,
    sample_categorical,
    save_checkpoint,
    seeded_init_,
)
from .nn.checkpoint import load_module_arrays, module_arrays
from .strokes import INITIAL_STROKE, AspectRatio, Mask, SketchDrawing, aspect_ratio, build_mask, render

LATENT_DIM = 128


@dataclass(frozen=True)
class GeneratorConfig:
    """Architecture and schedule constants for one category model."""

    latent_dim: int = LATENT_DIM
    encoder_hidden: int = 256
    decoder_hidden: int = 512
    mixtures: int = 20
    mask_size: int = 64
    mask_embed_dim: int = 64
    max_steps: int = 250
    temperature: float = 0.4
    kl_initial: float = 0.01
    kl_bound: float = 0.5
    kl_rate: float = 0.99995
    lr_initial: float = 1e-3
    lr_floor: float = 1e-5
    lr_rate: float = 0.9999
    clip_norm: float = 1.0
    train_steps: int = 600
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.latent_dim, self.encoder_hidden, self.decoder_hidden, self.mixtures) < 1:
            raise ConfigError("model widths must be positive")
        if self.max_steps < 1 or self.train_steps < 1 or self.batch_size < 1:
            raise ConfigError("step counts must be positive")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")

    def kl_schedule(self) -> ExpSchedule:
        return ExpSchedule(self.kl_initial, self.kl_bound, self.kl_rate, "grow")

    def lr_schedule(self) -> ExpSchedule:
        return ExpSchedule(self.lr_initial, self.lr_floor, self.lr_rate, "decay")


@dataclass
class EncoderOutput:
    """Posterior parameters and one reparameterized draw."""

    mu: np.ndarray
    logvar: np.ndarray
    z: np.ndarray


@dataclass
class GeneratorCondition:
    """Decode-time conditioning: occupancy mask, target aspect ratio and the
    mask's convolutional embedding."""

    mask: Mask
    ratio: AspectRatio
    mask_embedding: np.ndarray


@dataclass
class DecodeResult:
    drawing: SketchDrawing
    forced_end: bool
    ratio: float


@dataclass
class GeneratorLoss:
    total: torch.Tensor
    l_r: torch.Tensor
    l_kl: torch.Tensor
    lambda_kl: float

    def as_floats(self) -> dict[str, float]:
        return {
            "L_R": float(self.l_r.detach()),
            "L_KL": float(self.l_kl.detach()),
            "lambda_KL": self.lambda_kl,
            "total": float(self.total.detach()),
        }


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form divergence of N(mu, exp(logvar)) from the standard normal,
    averaged over latent dimensions (and any batch dimensions)."""
    return torch.mean(-0.5 * (1.0 + logvar - mu * mu - torch.exp(logvar)))


def reconstruction_nll(
    raw: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor | None = None
) -> torch.Tensor:
    """Mean per-step negative log likelihood of the target strokes under the
    head output: GMM density for the offsets plus categorical pen state.

    raw: (..., 6m + 3); targets: (..., 5); mask: (...) bool step validity.
    """
    if raw.shape[:-1] != targets.shape[:-1]:
        raise AlignmentError(f"raw {tuple(raw.shape)} vs targets {tuple(targets.shape)}")
    if targets.shape[-1] != 5:
        raise DimensionError("targets must be Stroke-5 rows")
    params = gmm_params_from_raw(raw[..., :-3])
    offset_ll = gmm_log_likelihood(params, targets[..., :2])
    pen_logp = F.log_softmax(raw[..., -3:], dim=-1)
    pen_target = targets[..., 2:].argmax(dim=-1)
    pen_ll = pen_logp.gather(-1, pen_target.unsqueeze(-1)).squeeze(-1)
    nll = -(offset_ll + pen_ll)
    if mask is None:
        return nll.mean()
    mask = mask.to(nll.dtype)
    return (nll * mask).sum() / mask.sum()


def sample_prior(generator: torch.Generator | None = None, dim: int = LATENT_DIM) -> np.ndarray:
    """One standard-normal latent draw."""
    return torch.randn(dim, generator=generator).numpy()


class ObjectGenerator(nn.Module):
    """Encoder/decoder pair for a single sketch category."""

    def __init__(self, config: GeneratorConfig, category: str = ""):
        super().__init__()
        self.config = config
        self.category = category
        self.encoder = BiLSTMEncoder(5, config.encoder_hidden)
        self.enc_mu = nn.Linear(2 * config.encoder_hidden, config.latent_dim)
        self.enc_logvar = nn.Linear(2 * config.encoder_hidden, config.latent_dim)
        self.mask_encoder = ConvMaskEncoder(config.mask_size, config.mask_embed_dim)
        step_dim = 5 + config.latent_dim + 1 + config.mask_embed_dim
        self.decoder = LSTMDecoderCell(step_dim, config.decoder_hidden)
        self.init_state = nn.Linear(config.latent_dim, 2 * config.decoder_hidden)
        self.head = nn.Linear(config.decoder_hidden, 6 * config.mixtures + 3)
        g = torch.Generator()
        g.manual_seed(config.seed)
        seeded_init_(self, g)

    # encoder -----------------------------------------------------------

    def _encode_tensor(
        self, strokes: torch.Tensor, lengths: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        _, final = self.encoder(strokes, lengths)
        return self.enc_mu(final), self.enc_logvar(final)

    def encode(
        self, drawing: SketchDrawing, generator: torch.Generator | None = None
    ) -> EncoderOutput:
        strokes = np.asarray(drawing.strokes, dtype=np.float32)
        if strokes.shape[0] < 2:
            raise EmptySketchError("drawing has no movement to encode")
        with torch.no_grad():
            mu, logvar = self._encode_tensor(torch.from_numpy(strokes).unsqueeze(0))
            eps = torch.randn(self.config.latent_dim, generator=generator)
            z = mu[0] + torch.exp(0.5 * logvar[0]) * eps
        return EncoderOutput(mu=mu[0].numpy(), logvar=logvar[0].numpy(), z=z.numpy())

    # conditions --------------------------------------------------------

    def make_condition(self, mask: Mask, ratio: AspectRatio) -> GeneratorCondition:
        """Embeds the mask once so repeated decodes can reuse it."""
        bits = torch.from_numpy(mask.bitmap.bits.astype(np.float32)).unsqueeze(0)
        with torch.no_grad():
            emb = self.mask_encoder(bits)[0].numpy()
        return GeneratorCondition(mask=mask, ratio=ratio, mask_embedding=emb)

    def condition_from_drawing(self, drawing: SketchDrawing) -> GeneratorCondition:
        mask = build_mask(render(drawing, self.config.mask_size, self.config.mask_size))
        return self.make_condition(mask, aspect_ratio(drawing))

    # decoder -----------------------------------------------------------

    def _step_input(
        self, prev: torch.Tensor, z: torch.Tensor, ratio: float, emb: torch.Tensor
    ) -> torch.Tensor:
        r = torch.full((prev.shape[0], 1), float(ratio), dtype=prev.dtype)
        return torch.cat([prev, z, r, emb], dim=-1)

    def _initial_state(self, z: torch.Tensor):
        hc = torch.tanh(self.init_state(z))
        h0, c0 = hc.split(self.config.decoder_hidden, dim=-1)
        return self.decoder.initial_state(h0, c0)

    def decode(
        self,
        z: np.ndarray,
        condition: GeneratorCondition,
        temperature: float | None = None,
        max_steps: int | None = None,
        generator: torch.Generator | None = None,
    ) -> DecodeResult:
        """Samples strokes until the pen-end state or the step cap; the
        first row is always the fixed initial stroke."""
        temperature = self.config.temperature if temperature is None else temperature
        max_steps = max_steps or self.config.max_steps
        if temperature < 0:
            raise ConfigError("temperature must be >= 0")
        z_t = torch.as_tensor(np.asarray(z, dtype=np.float32)).reshape(1, -1)
        if z_t.shape[1] != self.config.latent_dim:
            raise DimensionError(f"latent must have {self.config.latent_dim} dims")
        emb = torch.from_numpy(condition.mask_embedding).reshape(1, -1)
        rows = [INITIAL_STROKE.copy()]
        forced = True
        with torch.no_grad():
            state = self._initial_state(z_t)
            prev = torch.from_numpy(INITIAL_STROKE).reshape(1, 5)
            for _ in range(max_steps):
                out, state = self.decoder.step(
                    self._step_input(prev, z_t, condition.ratio.r, emb), state
                )
                raw = self.head(out)[0]
                params = gmm_params_from_raw(raw[:-3])
                offset = gmm_sample(params, temperature, generator)
                pen = sample_categorical(raw[-3:], temperature, generator)
                row = np.zeros(5, dtype=np.float32)
                row[0], row[1] = float(offset[0]), float(offset[1])
                row[2 + pen] = 1.0
                rows.append(row)
                prev = torch.from_numpy(row).reshape(1, 5)
                if pen == 2:
                    forced = False
                    break
            if forced:
                rows.append(np.array([0, 0, 0, 0, 1], dtype=np.float32))
        drawing = SketchDrawing(strokes=np.stack(rows), category=self.category)
        return DecodeResult(drawing=drawing, forced_end=forced, ratio=condition.ratio.r)

    def regenerate_with_pose(
        self,
        z: np.ndarray,
        condition: GeneratorCondition,
        temperature: float | None = None,
        generator: torch.Generator | None = None,
    ) -> DecodeResult:
        """Redraws an existing object under a new mask/ratio, keeping its
        latent so the sketch style carries over."""
        return self.decode(z, condition, temperature=temperature, generator=generator)

    # loss --------------------------------------------------------------

    def _teacher_raw(
        self, strokes: torch.Tensor, lengths: torch.Tensor, z: torch.Tensor,
        ratios: torch.Tensor, embs: torch.Tensor,
    ) -> torch.Tensor:
        """Teacher-forced decode over a right-padded batch: raw head output
        for every input position (predicting the following row)."""
        b, t, _ = strokes.shape
        inputs = strokes[:, :-1]
        cond = torch.cat(
            [
                z.unsqueeze(1).expand(b, t - 1, -1),
                ratios.reshape(b, 1, 1).expand(b, t - 1, 1),
                embs.unsqueeze(1).expand(b, t - 1, -1),
            ],
            dim=-1,
        )
        out, _ = self.decoder(torch.cat([inputs, cond], dim=-1), self._initial_state(z))
        return self.head(out)

    def _batch_loss(
        self,
        strokes: torch.Tensor,
        lengths: torch.Tensor,
        ratios: torch.Tensor,
        mask_bits: torch.Tensor,
        step: int,
        generator: torch.Generator | None,
    ) -> GeneratorLoss:
        mu, logvar = self._encode_tensor(strokes, lengths)
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        z = mu + torch.exp(0.5 * logvar) * eps
        embs = self.mask_encoder(mask_bits)
        raw = self._teacher_raw(strokes, lengths, z, ratios, embs)
        targets = strokes[:, 1:]
        steps = torch.arange(strokes.shape[1] - 1).unsqueeze(0)
        valid = steps < (lengths - 1).unsqueeze(1)
        l_r = reconstruction_nll(raw, targets, valid)
        l_kl = kl_divergence(mu, logvar)
        lam = self.config.kl_schedule().value(step)
        return GeneratorLoss(total=lam * l_kl + l_r, l_r=l_r, l_kl=l_kl, lambda_kl=lam)

    def loss_s(
        self,
        drawing: SketchDrawing,
        condition: GeneratorCondition,
        step: int,
        generator: torch.Generator | None = None,
    ) -> GeneratorLoss:
        """Single-drawing training objective at the given schedule step."""
        strokes = np.asarray(drawing.strokes, dtype=np.float32)
        if strokes.shape[0] < 2:
            raise EmptySketchError("drawing has no movement")
        bits = torch.from_numpy(condition.mask.bitmap.bits.astype(np.float32)).unsqueeze(0)
        return self._batch_loss(
            torch.from_numpy(strokes).unsqueeze(0),
            torch.tensor([strokes.shape[0]]),
            torch.tensor([condition.ratio.r], dtype=torch.float32),
            bits,
            step,
            generator,
        )


def _pad_batch(drawings: list[SketchDrawing]) -> tuple[torch.Tensor, torch.Tensor]:
    t_max = max(d.strokes.shape[0] for d in drawings)
    out = np.zeros((len(drawings), t_max, 5), dtype=np.float32)
    lengths = []
    for i, d in enumerate(drawings):
        out[i, : d.strokes.shape[0]] = d.strokes
        lengths.append(d.strokes.shape[0])
    return torch.from_numpy(out), torch.tensor(lengths)


@dataclass
class _PreparedCorpus:
    strokes: torch.Tensor
    lengths: torch.Tensor
    ratios: torch.Tensor
    masks: torch.Tensor


def _prepare_corpus(model: ObjectGenerator, drawings: list[SketchDrawing]) -> _PreparedCorpus:
    for d in drawings:
        if d.strokes.shape[0] < 2:
            raise EmptySketchError("corpus contains an empty drawing")
    strokes, lengths = _pad_batch(drawings)
    size = model.config.mask_size
    masks = np.stack(
        [build_mask(render(d, size, size)).bitmap.bits.astype(np.float32) for d in drawings]
    )
    ratios = torch.tensor([aspect_ratio(d).r for d in drawings], dtype=torch.float32)
    return _PreparedCorpus(
        strokes=strokes, lengths=lengths, ratios=ratios, masks=torch.from_numpy(masks)
    )


def evaluate_generator_loss(
    model: ObjectGenerator, drawings: list[SketchDrawing], step: int = 0, seed: int = 0
) -> GeneratorLoss:
    """Loss over a whole corpus with a fixed reparameterization draw."""
    corpus = _prepare_corpus(model, drawings)
    g = torch.Generator()
    g.manual_seed(seed)
    with torch.no_grad():
        return model._batch_loss(
            corpus.strokes, corpus.lengths, corpus.ratios, corpus.masks, step, g
        )


def train_generator(
    model: ObjectGenerator,
    train_drawings: list[SketchDrawing],
    val_drawings: list[SketchDrawing] | None = None,
    checkpoint_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    steps: int | None = None,
    log_every: int = 20,
) -> dict:
    """Minibatch training with the learning-rate and KL-weight schedules and
    global-norm clipping; keeps the best-validation checkpoint."""
    if not train_drawings:
        raise ConfigError("empty training corpus")
    config = model.config
    steps = steps or config.train_steps
    corpus = _prepare_corpus(model, train_drawings)
    val = _prepare_corpus(model, val_drawings) if val_drawings else None
    lr_schedule = config.lr_schedule()
    optimizer = ClippedAdam(model.parameters(), lr=config.lr_initial, clip_norm=config.clip_norm)
    rng = np.random.default_rng(config.seed)
    g = torch.Generator()
    g.manual_seed(config.seed)
    n = len(train_drawings)
    best = float("inf")
    best_step = -1
    lines = []
    start = time.monotonic()
    for step in range(steps):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=False)
        tidx = torch.from_numpy(idx)
        optimizer.lr = lr_schedule.value(step)
        optimizer.zero_grad()
        loss = model._batch_loss(
            corpus.strokes[tidx], corpus.lengths[tidx], corpus.ratios[tidx],
            corpus.masks[tidx], step, g,
        )
        loss.total.backward()
        optimizer.step()
        record = step % log_every == 0 or step == steps - 1
        if record:
            lines.append(json.dumps({"step": step, "split": "train", "lr": optimizer.lr,
                                     **loss.as_floats()}))
        monitored = float(loss.total.detach())
        if val is not None:
            with torch.no_grad():
                vg = torch.Generator()
                vg.manual_seed(config.seed)
                vloss = model._batch_loss(val.strokes, val.lengths, val.ratios, val.masks, step, vg)
            if record:
                lines.append(json.dumps({"step": step, "split": "val", "lr": optimizer.lr,
                                         **vloss.as_floats()}))
            monitored = float(vloss.total)
        if monitored < best:
            best = monitored
            best_step = step
            if checkpoint_path is not None:
                save_checkpoint(
                    checkpoint_path,
                    module_arrays(model),
                    meta={"kind": "generator", "category": model.category, "step": step,
                          "loss": best, "config": config.__dict__},
                )
    if metrics_path is not None:
        Path(metrics_path).write_text("\n".join(lines) + "\n")
    return {"best_loss": best, "best_step": best_step, "steps": steps,
            "seconds": time.monotonic() - start}


def load_generator(path: str | Path) -> ObjectGenerator:
    ck = load_checkpoint(path)
    if ck.meta.get("kind") != "generator":
        raise ConfigError(f"checkpoint at {path} is not a stroke generator")
    model = ObjectGenerator(GeneratorConfig(**ck.meta["config"]), category=ck.meta.get("category", ""))
    load_module_arrays(model, ck.tensors)
    model.eval()
    return model


# category registry ------------------------------------------------------


@dataclass(frozen=True)
class RegistryEntry:
    """One trained category: its checkpoint and the scene classes it draws."""

    category: str
    checkpoint: str
    class_ids: tuple[int, ...]


def save_registry(path: str | Path, entries: list[RegistryEntry]) -> None:
    payload = [
        {"category": e.category, "checkpoint": e.checkpoint, "class_ids": list(e.class_ids)}
        for e in entries
    ]
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_registry(path: str | Path) -> list[RegistryEntry]:
    try:
        payload = json.loads(Path(path).read_text())
        return [
            RegistryEntry(
                category=e["category"],
                checkpoint=e["checkpoint"],
                class_ids=tuple(int(c) for c in e["class_ids"]),
            )
            for e in payload
        ]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad registry file {path}: {exc}") from exc


class GeneratorBank:
    """Lazy checkpoint loader keyed by scene class id."""

    def __init__(self, registry_path: str | Path):
        self.base = Path(registry_path).parent
        self.entries = load_registry(registry_path)
        self._by_class: dict[int, RegistryEntry] = {}
        for e in self.entries:
            for cid in e.class_ids:
                self._by_class[cid] = e
        self._models: dict[str, ObjectGenerator] = {}

    def supports(self, class_id: int) -> bool:
        return class_id in self._by_class

    def category_for(self, class_id: int) -> str:
        if class_id not in self._by_class:
            raise MappingError(f"no generator category for class {class_id}")
        return self._by_class[class_id].category

    def model_for(self, class_id: int) -> ObjectGenerator:
        entry = self._by_class.get(class_id)
        if entry is None:
            raise MappingError(f"no generator category for class {class_id}")
        if entry.category not in self._models:
            self._models[entry.category] = load_generator(self.base / entry.checkpoint)
        return self._models[entry.category]
