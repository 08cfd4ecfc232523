"""Scene layout model.

A causal transformer reads the interleaved instruction/object sequence and
emits, position by position, the next scene element: a 3-way token kind, the
categorical object properties and a sigmoid position. Scenes are regenerated
from scratch every turn by greedy decoding until the end sentinel.
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

from .errors import AlignmentError, ConfigError, DimensionError
from .nn import ClippedAdam, TransformerStack, load_checkpoint, save_checkpoint, seeded_init_
from .nn.checkpoint import load_module_arrays, module_arrays
from .scene import (
    CLASS_OFFSET,
    FLIP_OFFSET,
    MAX_CONTEXT_TURNS,
    NUM_CLASSES,
    NUM_SIZES,
    NUM_SUBTYPES,
    OBJECT_DIM,
    POS_OFFSET,
    SEQ_DIM,
    SIZE_OFFSET,
    SUBTYPE_OFFSET,
    ContextWindow,
    ObjectKind,
    Scene,
    SceneObject,
    build_context_sequence,
    encode_object,
    pad_object,
    sequence_labels,
)

DEFAULT_STOPWORDS = frozenset(
    """a an the this that these those there here it its is are was were be been am
    i you we they he she my your our of to in on at by with from into onto for and
    or not no yes please then now next also just very want like see put place add
    draw make move give show bring set have has had do does did will would should
    can could left right top bottom middle center centre side corner edge up down
    above below over under near far small medium large big little tiny huge flip
    flipped facing face again more less bit slightly scene canvas picture drawing
    image""".split()
)


@dataclass(frozen=True)
class ProposerConfig:
    """Architecture and training constants for the layout model."""

    layers: int = 6
    heads: int = 8
    model_dim: int = 128
    ff_dim: int = 512
    context_turns: int = MAX_CONTEXT_TURNS
    max_positions: int = 1024
    max_objects: int = 20
    lambda_sub: float = 5e-2
    lambda_flip: float = 5e-2
    lambda_size: float = 5e-2
    lambda_xy: float = 1.0
    lr: float = 1e-4
    epochs: int = 200
    batch_size: int = 32
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.model_dim < 1:
            raise ConfigError("layers, heads and model_dim must be positive")
        if self.model_dim % self.heads != 0:
            raise ConfigError("heads must divide model_dim")
        if self.max_objects < 1 or self.max_positions < 2:
            raise ConfigError("max_objects and max_positions too small")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr, epochs and batch_size must be positive")


@dataclass
class ObjectPrediction:
    """Per-position head outputs: kind scores are 3-way logits over
    (start, end, object); position is already sigmoid-squashed."""

    kind_scores: np.ndarray
    class_logits: np.ndarray
    subtype_logits: np.ndarray
    size_logits: np.ndarray
    flip_logits: np.ndarray
    position: np.ndarray


@dataclass
class AttentionMap:
    """Per-layer (heads, rows, rows) weights with one label per row and the
    index of the generation prompt row."""

    weights: list[np.ndarray]
    labels: list[str]
    base_index: int


@dataclass
class GenerationResult:
    scene: Scene
    attention: AttentionMap
    truncated: bool = False


@dataclass
class LossComponents:
    """loss_cm pieces; tensors so the total can backpropagate."""

    total: torch.Tensor
    l_c: torch.Tensor
    l_sub: torch.Tensor
    l_flip: torch.Tensor
    l_size: torch.Tensor
    l_xy: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "L_c": float(self.l_c.detach()),
            "L_sub": float(self.l_sub.detach()),
            "L_flip": float(self.l_flip.detach()),
            "L_size": float(self.l_size.detach()),
            "L_xy": float(self.l_xy.detach()),
            "total": float(self.total.detach()),
        }


@dataclass(frozen=True)
class TrainingPair:
    """One supervised example: a context window and the scene the drawer
    produced in response."""

    context: ContextWindow
    target: Scene


class CompositionProposer(nn.Module):
    """Decoder-only attention stack over 402-d rows with a shared 102-d
    output head sliced into the kind/class/subtype/size/flip/position blocks."""

    def __init__(self, config: ProposerConfig):
        super().__init__()
        self.config = config
        self.pos_emb = nn.Embedding(config.max_positions, SEQ_DIM)
        self.in_proj = nn.Linear(SEQ_DIM, config.model_dim)
        self.stack = TransformerStack(config.model_dim, config.heads, config.ff_dim, config.layers)
        self.out_proj = nn.Linear(config.model_dim, OBJECT_DIM)
        g = torch.Generator()
        g.manual_seed(config.seed)
        seeded_init_(self, g)

    def _forward_tensor(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        if x.dim() != 3 or x.shape[-1] != SEQ_DIM:
            raise DimensionError(f"expected (batch, rows, {SEQ_DIM}), got {tuple(x.shape)}")
        if x.shape[1] == 0:
            raise DimensionError("empty sequence")
        if x.shape[1] > self.config.max_positions:
            raise DimensionError(
                f"sequence of {x.shape[1]} rows exceeds max_positions {self.config.max_positions}"
            )
        positions = torch.arange(x.shape[1], device=x.device)
        h = self.in_proj(x + self.pos_emb(positions))
        h, weights = self.stack(h)
        return self.out_proj(h), weights

    @staticmethod
    def _slice_heads(out: torch.Tensor) -> dict[str, torch.Tensor]:
        """Split the 102-d head output; the object kind acts as the softmax
        reference class with a fixed zero logit."""
        v0 = out[..., 0]
        kind = torch.stack([v0, out[..., 1], torch.zeros_like(v0)], dim=-1)
        return {
            "kind": kind,
            "class": out[..., CLASS_OFFSET:SUBTYPE_OFFSET],
            "subtype": out[..., SUBTYPE_OFFSET:SIZE_OFFSET],
            "size": out[..., SIZE_OFFSET:FLIP_OFFSET],
            "flip": out[..., FLIP_OFFSET:POS_OFFSET],
            "position": torch.sigmoid(out[..., POS_OFFSET:]),
        }

    @staticmethod
    def _prediction(heads: dict[str, torch.Tensor], b: int, t: int) -> ObjectPrediction:
        pick = lambda k: heads[k][b, t].detach().numpy().astype(np.float64)
        return ObjectPrediction(
            kind_scores=pick("kind"),
            class_logits=pick("class"),
            subtype_logits=pick("subtype"),
            size_logits=pick("size"),
            flip_logits=pick("flip"),
            position=pick("position"),
        )

    @staticmethod
    def _derive_labels(seq: np.ndarray) -> list[str]:
        labels = []
        for row in seq:
            obj = row[:OBJECT_DIM]
            if not obj.any():
                labels.append("<text>")
            elif obj[0] == 1.0:
                labels.append("<start>")
            elif obj[1] == 1.0:
                labels.append("<end>")
            else:
                labels.append(f"class_{int(np.argmax(obj[CLASS_OFFSET:SUBTYPE_OFFSET]))}")
        return labels

    def forward(
        self, seq: np.ndarray, labels: list[str] | None = None
    ) -> tuple[list[ObjectPrediction], AttentionMap]:
        """One prediction per input row plus the full attention map."""
        seq = np.asarray(seq, dtype=np.float32)
        if seq.ndim != 2 or seq.shape[-1] != SEQ_DIM:
            raise DimensionError(f"expected (rows, {SEQ_DIM}), got {seq.shape}")
        if seq.shape[0] == 0:
            raise DimensionError("empty sequence")
        with torch.no_grad():
            out, weights = self._forward_tensor(torch.from_numpy(seq).unsqueeze(0))
            heads = self._slice_heads(out)
        preds = [self._prediction(heads, 0, t) for t in range(seq.shape[0])]
        if labels is None:
            labels = self._derive_labels(seq)
        if len(labels) != seq.shape[0]:
            raise AlignmentError(f"{len(labels)} labels for {seq.shape[0]} rows")
        starts = np.flatnonzero(seq[:, 0] == 1.0)
        base = int(starts[-1]) if len(starts) else seq.shape[0] - 1
        amap = AttentionMap(
            weights=[w[0].detach().numpy() for w in weights], labels=list(labels), base_index=base
        )
        return preds, amap

    @staticmethod
    def _decode_prediction(pred: ObjectPrediction) -> SceneObject:
        kind = ObjectKind(int(np.argmax(pred.kind_scores)))
        if kind is not ObjectKind.OBJECT:
            return SceneObject.start() if kind is ObjectKind.START else SceneObject.end()
        return SceneObject(
            class_id=int(np.argmax(pred.class_logits)),
            subtype_id=int(np.argmax(pred.subtype_logits)),
            size_id=int(np.argmax(pred.size_logits)),
            flip=bool(np.argmax(pred.flip_logits) == 1),
            x=float(np.clip(pred.position[0], 0.0, 1.0)),
            y=float(np.clip(pred.position[1], 0.0, 1.0)),
        )

    def generate_scene(
        self, ctx: ContextWindow, class_names: list[str] | None = None
    ) -> GenerationResult:
        """Greedy autoregressive decode: emit objects until the end sentinel
        or the object cap, feeding each decoded object back as input."""
        rows = [r for r in build_context_sequence(ctx)]
        labels = sequence_labels(ctx, class_names)
        base = len(rows) - 1
        turn = ctx.turns[-1][1].turn_index + 1 if ctx.turns else 0
        objects: list[SceneObject] = []
        truncated = False
        while True:
            preds, amap = self.forward(np.stack(rows), labels)
            emitted = self._decode_prediction(preds[-1])
            if emitted.kind is not ObjectKind.OBJECT:
                break
            if len(objects) >= self.config.max_objects:
                truncated = True
                break
            objects.append(emitted)
            rows.append(pad_object(encode_object(emitted)))
            labels = labels + [
                class_names[emitted.class_id] if class_names else f"class_{emitted.class_id}"
            ]
        amap.base_index = base
        scene = Scene(objects=tuple(objects), turn_index=turn)
        return GenerationResult(scene=scene, attention=amap, truncated=truncated)


def _loss_from_parts(
    kind_logits: torch.Tensor,
    kind_targets: torch.Tensor,
    class_logits: torch.Tensor,
    subtype_logits: torch.Tensor,
    size_logits: torch.Tensor,
    flip_logits: torch.Tensor,
    positions: torch.Tensor,
    obj_targets: dict[str, torch.Tensor],
    config: ProposerConfig,
    grad_safe: bool,
) -> LossComponents:
    """Shared loss formula. kind rows cover every emitting position (objects
    plus the end sentinel); the remaining heads cover object positions only."""
    zero = torch.zeros((), dtype=kind_logits.dtype)
    l_kind = F.cross_entropy(kind_logits, kind_targets)
    n_obj = class_logits.shape[0]
    if n_obj:
        l_class = F.cross_entropy(class_logits, obj_targets["class"])
        l_sub = F.cross_entropy(subtype_logits, obj_targets["subtype"])
        l_size = F.cross_entropy(size_logits, obj_targets["size"])
        l_flip = F.cross_entropy(flip_logits, obj_targets["flip"])
        sq = ((positions - obj_targets["position"]) ** 2).sum(dim=-1)
        # the tiny floor keeps the sqrt gradient finite at zero distance
        l_xy = (torch.sqrt(sq + 1e-24) if grad_safe else torch.sqrt(sq)).mean()
    else:
        l_class = l_sub = l_size = l_flip = l_xy = zero
    l_c = l_kind + l_class
    total = (
        l_c
        + config.lambda_sub * l_sub
        + config.lambda_flip * l_flip
        + config.lambda_size * l_size
        + config.lambda_xy * l_xy
    )
    return LossComponents(total=total, l_c=l_c, l_sub=l_sub, l_flip=l_flip, l_size=l_size, l_xy=l_xy)


def loss_cm(
    predictions: list[ObjectPrediction], truth: Scene, config: ProposerConfig | None = None
) -> LossComponents:
    """Teacher-forced layout loss for one scene: predictions must line up
    with the truth objects followed by one end-sentinel prediction."""
    config = config or ProposerConfig()
    m = len(truth.objects)
    if len(predictions) != m + 1:
        raise AlignmentError(f"need {m + 1} predictions for {m} objects, got {len(predictions)}")
    t64 = lambda arrs: torch.tensor(np.array(arrs), dtype=torch.float64)
    kind_logits = t64([p.kind_scores for p in predictions])
    kind_targets = torch.tensor([ObjectKind.OBJECT.value] * m + [ObjectKind.END.value])
    obj_preds = predictions[:m]
    obj_targets = {
        "class": torch.tensor([o.class_id for o in truth.objects], dtype=torch.long),
        "subtype": torch.tensor([o.subtype_id for o in truth.objects], dtype=torch.long),
        "size": torch.tensor([o.size_id for o in truth.objects], dtype=torch.long),
        "flip": torch.tensor([int(o.flip) for o in truth.objects], dtype=torch.long),
        "position": t64([[o.x, o.y] for o in truth.objects]) if m else torch.zeros(0, 2),
    }
    empty = torch.zeros(0, dtype=torch.float64)
    return _loss_from_parts(
        kind_logits,
        kind_targets,
        t64([p.class_logits for p in obj_preds]) if m else empty,
        t64([p.subtype_logits for p in obj_preds]) if m else empty,
        t64([p.size_logits for p in obj_preds]) if m else empty,
        t64([p.flip_logits for p in obj_preds]) if m else empty,
        t64([p.position for p in obj_preds]) if m else empty,
        obj_targets,
        config,
        grad_safe=False,
    )


@dataclass
class _PreparedBatch:
    """Right-padded batch with flat gather indices into (batch * rows)."""

    x: torch.Tensor
    kind_positions: torch.Tensor
    kind_targets: torch.Tensor
    obj_positions: torch.Tensor
    obj_targets: dict[str, torch.Tensor]


def _prepare_batch(pairs: list[TrainingPair], max_positions: int) -> _PreparedBatch:
    seqs = []
    for pair in pairs:
        ctx_rows = build_context_sequence(pair.context)
        obj_rows = [pad_object(encode_object(o)) for o in pair.target.objects]
        seq = np.concatenate([ctx_rows, np.array(obj_rows, dtype=np.float32).reshape(-1, SEQ_DIM)])
        if seq.shape[0] > max_positions:
            raise DimensionError(
                f"training sequence of {seq.shape[0]} rows exceeds max_positions {max_positions}"
            )
        seqs.append(seq)
    t_max = max(s.shape[0] for s in seqs)
    x = np.zeros((len(seqs), t_max, SEQ_DIM), dtype=np.float32)
    kind_pos, kind_tgt, obj_pos = [], [], []
    cls, sub, size, flip, posxy = [], [], [], [], []
    for b, (pair, seq) in enumerate(zip(pairs, seqs)):
        x[b, : seq.shape[0]] = seq
        m = len(pair.target.objects)
        prompt = seq.shape[0] - m - 1
        for j, obj in enumerate(pair.target.objects):
            flat = b * t_max + prompt + j
            kind_pos.append(flat)
            kind_tgt.append(ObjectKind.OBJECT.value)
            obj_pos.append(flat)
            cls.append(obj.class_id)
            sub.append(obj.subtype_id)
            size.append(obj.size_id)
            flip.append(int(obj.flip))
            posxy.append([obj.x, obj.y])
        kind_pos.append(b * t_max + prompt + m)
        kind_tgt.append(ObjectKind.END.value)
    return _PreparedBatch(
        x=torch.from_numpy(x),
        kind_positions=torch.tensor(kind_pos, dtype=torch.long),
        kind_targets=torch.tensor(kind_tgt, dtype=torch.long),
        obj_positions=torch.tensor(obj_pos, dtype=torch.long),
        obj_targets={
            "class": torch.tensor(cls, dtype=torch.long),
            "subtype": torch.tensor(sub, dtype=torch.long),
            "size": torch.tensor(size, dtype=torch.long),
            "flip": torch.tensor(flip, dtype=torch.long),
            "position": torch.tensor(posxy, dtype=torch.float32).reshape(-1, 2),
        },
    )


def _batch_loss(model: CompositionProposer, batch: _PreparedBatch, grad_safe: bool = True) -> LossComponents:
    out, _ = model._forward_tensor(batch.x)
    heads = model._slice_heads(out)
    flat = lambda k: heads[k].reshape(-1, heads[k].shape[-1])
    return _loss_from_parts(
        flat("kind")[batch.kind_positions],
        batch.kind_targets,
        flat("class")[batch.obj_positions],
        flat("subtype")[batch.obj_positions],
        flat("size")[batch.obj_positions],
        flat("flip")[batch.obj_positions],
        flat("position")[batch.obj_positions],
        batch.obj_targets,
        model.config,
        grad_safe=grad_safe,
    )


def evaluate_loss(model: CompositionProposer, pairs: list[TrainingPair]) -> LossComponents:
    if not pairs:
        raise ConfigError("no pairs to evaluate")
    batch = _prepare_batch(pairs, model.config.max_positions)
    with torch.no_grad():
        return _batch_loss(model, batch, grad_safe=False)


def teacher_forced_class_accuracy(model: CompositionProposer, pairs: list[TrainingPair]) -> float:
    """Fraction of ground-truth objects whose class head argmax is right
    under teacher forcing."""
    batch = _prepare_batch(pairs, model.config.max_positions)
    if batch.obj_positions.numel() == 0:
        raise ConfigError("pairs contain no objects")
    with torch.no_grad():
        out, _ = model._forward_tensor(batch.x)
        heads = model._slice_heads(out)
        logits = heads["class"].reshape(-1, NUM_CLASSES)[batch.obj_positions]
        hits = (logits.argmax(dim=-1) == batch.obj_targets["class"]).float()
    return float(hits.mean())


def train_proposer(
    model: CompositionProposer,
    train_pairs: list[TrainingPair],
    val_pairs: list[TrainingPair] | None = None,
    checkpoint_path: str | Path | None = None,
    metrics_path: str | Path | None = None,
    epochs: int | None = None,
    log_every: int = 1,
) -> dict:
    """Clipped-Adam training with per-epoch metrics and best-val checkpoint.

    Returns a summary dict with the best validation loss, its epoch and the
    elapsed seconds. Metrics are written as one JSON object per line.
    """
    if not train_pairs:
        raise ConfigError("empty training set")
    config = model.config
    epochs = epochs or config.epochs
    rng = np.random.default_rng(config.seed)
    optimizer = ClippedAdam(model.parameters(), lr=config.lr, clip_norm=config.clip_norm)
    val_batch = _prepare_batch(val_pairs, config.max_positions) if val_pairs else None
    best_val = float("inf")
    best_epoch = -1
    start = time.monotonic()
    lines: list[str] = []

    def log(epoch: int, split: str, comps: LossComponents) -> None:
        lines.append(json.dumps({"epoch": epoch, "split": split, **comps.as_floats()}))

    order = np.arange(len(train_pairs))
    for epoch in range(epochs):
        rng.shuffle(order)
        model.train()
        epoch_total = None
        for lo in range(0, len(order), config.batch_size):
            chunk = [train_pairs[i] for i in order[lo : lo + config.batch_size]]
            batch = _prepare_batch(chunk, config.max_positions)
            optimizer.zero_grad()
            comps = _batch_loss(model, batch)
            comps.total.backward()
            optimizer.step()
            epoch_total = comps
        model.eval()
        if epoch % log_every == 0 and epoch_total is not None:
            log(epoch, "train", epoch_total)
        monitored = float(epoch_total.total.detach())
        if val_batch is not None:
            with torch.no_grad():
                val_comps = _batch_loss(model, val_batch, grad_safe=False)
            if epoch % log_every == 0:
                log(epoch, "val", val_comps)
            monitored = float(val_comps.total)
        if monitored < best_val:
            best_val = monitored
            best_epoch = epoch
            if checkpoint_path is not None:
                save_checkpoint(
                    checkpoint_path,
                    module_arrays(model),
                    meta={"kind": "proposer", "epoch": epoch, "val_loss": best_val,
                          "config": config.__dict__},
                )
    if metrics_path is not None:
        Path(metrics_path).write_text("\n".join(lines) + "\n")
    return {
        "best_loss": best_val,
        "best_epoch": best_epoch,
        "epochs": epochs,
        "seconds": time.monotonic() - start,
    }


def load_proposer(path: str | Path) -> CompositionProposer:
    ck = load_checkpoint(path)
    if ck.meta.get("kind") != "proposer":
        raise ConfigError(f"checkpoint at {path} is not a layout model")
    config = ProposerConfig(**ck.meta["config"])
    model = CompositionProposer(config)
    load_module_arrays(model, ck.tensors)
    model.eval()
    return model


def attention_for_object(
    amap: AttentionMap, object_index: int, layer: int = -1
) -> list[tuple[str, float]]:
    """Head-averaged attention row at the position that emitted the given
    object, as (label, weight) pairs sorted by descending weight."""
    weights = amap.weights[layer]
    row_index = amap.base_index + object_index
    if object_index < 0 or row_index >= weights.shape[-1]:
        raise DimensionError(f"object index {object_index} outside the generated range")
    row = weights[:, row_index, :].mean(axis=0)
    if len(amap.labels) != row.shape[0]:
        raise AlignmentError(f"{len(amap.labels)} labels for {row.shape[0]} attention columns")
    ranked = sorted(zip(amap.labels, row.tolist()), key=lambda kv: kv[1], reverse=True)
    return [(label, float(w)) for label, w in ranked]


def detect_unknown_object(
    ctx: ContextWindow,
    result: GenerationResult,
    stopwords: frozenset[str] = DEFAULT_STOPWORDS,
    layer: int = -1,
) -> str | None:
    """When generation added nothing new, name the current-instruction word
    the model attended to most at the end-sentinel position."""
    if result.truncated:
        return None
    prev = ctx.turns[-1][1] if ctx.turns else Scene()
    prev_counts: dict[int, int] = {}
    for obj in prev.objects:
        prev_counts[obj.class_id] = prev_counts.get(obj.class_id, 0) + 1
    for obj in result.scene.objects:
        prev_counts[obj.class_id] = prev_counts.get(obj.class_id, 0) - 1
        if prev_counts[obj.class_id] < 0:
            return None
    m_i = len(ctx.current_instruction)
    if m_i == 0:
        return None
    base = result.attention.base_index
    end_pos = base + len(result.scene.objects)
    weights = result.attention.weights[layer]
    row = weights[:, end_pos, :].mean(axis=0)
    best: tuple[float, str] | None = None
    for k, token in enumerate(ctx.current_instruction):
        surface = token.surface
        if surface in stopwords or not any(c.isalnum() for c in surface):
            continue
        w = float(row[base - m_i + k])
        if best is None or w > best[0]:
            best = (w, surface)
    return best[1] if best else None
