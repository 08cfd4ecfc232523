"""Discrete scene representation and the interleaved instruction/object sequence.

A scene is an ordered list of discrete objects, each carrying a class, a
sub-type, a 3-level size, a horizontal flip bit and a center position on the
unit canvas.  Objects round-trip through a fixed 102-dimensional vector made
of two sentinel bits, four one-hot blocks and the two position coordinates.
Text tokens ride along as fixed 300-dimensional embeddings.  Both modalities
are zero-padded into a shared 402-dimensional row so they can be interleaved
chronologically into a single sequence for the layout model.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, DimensionError

NUM_CLASSES = 58
NUM_SUBTYPES = 35
NUM_SIZES = 3

# Vector layout: [start, end, class(58), subtype(35), size(3), flip(2), x, y]
CLASS_OFFSET = 2
SUBTYPE_OFFSET = CLASS_OFFSET + NUM_CLASSES  # 60
SIZE_OFFSET = SUBTYPE_OFFSET + NUM_SUBTYPES  # 95
FLIP_OFFSET = SIZE_OFFSET + NUM_SIZES  # 98
POS_OFFSET = FLIP_OFFSET + 2  # 100
OBJECT_DIM = POS_OFFSET + 2  # 102
TEXT_DIM = 300
SEQ_DIM = OBJECT_DIM + TEXT_DIM  # 402

MAX_CONTEXT_TURNS = 10

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^\w\s]")


class ObjectKind(Enum):
    START = 0
    END = 1
    OBJECT = 2


@dataclass(frozen=True)
class SceneObject:
    """One discrete scene element: a sentinel or a placed object."""

    kind: ObjectKind = ObjectKind.OBJECT
    class_id: int = 0
    subtype_id: int = 0
    size_id: int = 0
    flip: bool = False
    x: float = 0.0
    y: float = 0.0

    def __post_init__(self):
        if self.kind is ObjectKind.OBJECT:
            if not 0 <= self.class_id < NUM_CLASSES:
                raise ValueError(f"class_id {self.class_id} out of range")
            if not 0 <= self.subtype_id < NUM_SUBTYPES:
                raise ValueError(f"subtype_id {self.subtype_id} out of range")
            if not 0 <= self.size_id < NUM_SIZES:
                raise ValueError(f"size_id {self.size_id} out of range")
            if not (0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0):
                raise ValueError(f"position ({self.x}, {self.y}) outside unit canvas")

    @classmethod
    def start(cls) -> "SceneObject":
        return cls(kind=ObjectKind.START)

    @classmethod
    def end(cls) -> "SceneObject":
        return cls(kind=ObjectKind.END)


@dataclass(frozen=True)
class Scene:
    """An ordered list of placed objects at one conversation turn."""

    objects: tuple[SceneObject, ...] = ()
    turn_index: int = 0

    def __post_init__(self):
        for obj in self.objects:
            if obj.kind is not ObjectKind.OBJECT:
                raise ValueError("Scene.objects must contain only OBJECT entries")
        if self.turn_index < 0:
            raise ValueError("turn_index must be >= 0")

    def __len__(self) -> int:
        return len(self.objects)


@dataclass(frozen=True)
class TextToken:
    """A surface word or punctuation mark with its fixed 300-d embedding."""

    surface: str
    embedding: np.ndarray = field(repr=False)

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float32)
        if emb.shape != (TEXT_DIM,):
            raise DimensionError(f"token embedding must have shape ({TEXT_DIM},), got {emb.shape}")
        object.__setattr__(self, "embedding", emb)


@dataclass(frozen=True)
class ContextWindow:
    """Up to 10 prior (instruction, scene) turns plus the current instruction."""

    turns: tuple[tuple[tuple[TextToken, ...], Scene], ...] = ()
    current_instruction: tuple[TextToken, ...] = ()

    def __post_init__(self):
        if len(self.turns) > MAX_CONTEXT_TURNS:
            raise ConfigError(
                f"context window holds at most {MAX_CONTEXT_TURNS} turns, got {len(self.turns)}"
            )


def tokenize(text: str) -> list[str]:
    """Lowercase and split into word and punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def encode_object(obj: SceneObject) -> np.ndarray:
    """Encode a scene element as its 102-d vector."""
    v = np.zeros(OBJECT_DIM, dtype=np.float32)
    if obj.kind is ObjectKind.START:
        v[0] = 1.0
    elif obj.kind is ObjectKind.END:
        v[1] = 1.0
    else:
        v[CLASS_OFFSET + obj.class_id] = 1.0
        v[SUBTYPE_OFFSET + obj.subtype_id] = 1.0
        v[SIZE_OFFSET + obj.size_id] = 1.0
        v[FLIP_OFFSET + (1 if obj.flip else 0)] = 1.0
        v[POS_OFFSET] = obj.x
        v[POS_OFFSET + 1] = obj.y
    return v


def decode_object(v: np.ndarray) -> SceneObject:
    """Decode a (possibly soft) 102-d vector back to a scene element.

    Kind is a 3-way argmax over (start score, end score, 1 - start - end);
    each one-hot block decodes by argmax with lowest-index tie-breaking;
    positions are clamped to the unit canvas.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (OBJECT_DIM,):
        raise DimensionError(f"object vector must have shape ({OBJECT_DIM},), got {v.shape}")
    kind_scores = np.array([v[0], v[1], 1.0 - v[0] - v[1]])
    kind = ObjectKind(int(np.argmax(kind_scores)))
    if kind is ObjectKind.START:
        return SceneObject.start()
    if kind is ObjectKind.END:
        return SceneObject.end()
    return SceneObject(
        kind=ObjectKind.OBJECT,
        class_id=int(np.argmax(v[CLASS_OFFSET:SUBTYPE_OFFSET])),
        subtype_id=int(np.argmax(v[SUBTYPE_OFFSET:SIZE_OFFSET])),
        size_id=int(np.argmax(v[SIZE_OFFSET:FLIP_OFFSET])),
        flip=bool(np.argmax(v[FLIP_OFFSET:POS_OFFSET]) == 1),
        x=float(np.clip(v[POS_OFFSET], 0.0, 1.0)),
        y=float(np.clip(v[POS_OFFSET + 1], 0.0, 1.0)),
    )


def pad_object(v: np.ndarray) -> np.ndarray:
    """Lift a 102-d object vector into the shared 402-d row: [v, 0_300]."""
    v = np.asarray(v, dtype=np.float32)
    if v.shape != (OBJECT_DIM,):
        raise DimensionError(f"expected ({OBJECT_DIM},) object vector, got {v.shape}")
    out = np.zeros(SEQ_DIM, dtype=np.float32)
    out[:OBJECT_DIM] = v
    return out


def pad_token(v: np.ndarray) -> np.ndarray:
    """Lift a 300-d token embedding into the shared 402-d row: [0_102, v]."""
    v = np.asarray(v, dtype=np.float32)
    if v.shape != (TEXT_DIM,):
        raise DimensionError(f"expected ({TEXT_DIM},) token embedding, got {v.shape}")
    out = np.zeros(SEQ_DIM, dtype=np.float32)
    out[OBJECT_DIM:] = v
    return out


def context_sequence_length(ctx: ContextWindow) -> int:
    """Predicted row count: sum over past turns of (m_j + l_j + 2), plus m_i + 1."""
    total = 0
    for instruction, scene in ctx.turns:
        total += len(instruction) + len(scene) + 2
    return total + len(ctx.current_instruction) + 1


def build_context_sequence(ctx: ContextWindow) -> np.ndarray:
    """Interleave the window chronologically into 402-d rows.

    Each past turn contributes its instruction tokens followed by the scene
    bracketed with start/end sentinels; the sequence ends with the current
    instruction's tokens and a single start sentinel as the generation prompt.
    """
    rows: list[np.ndarray] = []
    for instruction, scene in ctx.turns:
        for token in instruction:
            rows.append(pad_token(token.embedding))
        rows.append(pad_object(encode_object(SceneObject.start())))
        for obj in scene.objects:
            rows.append(pad_object(encode_object(obj)))
        rows.append(pad_object(encode_object(SceneObject.end())))
    for token in ctx.current_instruction:
        rows.append(pad_token(token.embedding))
    rows.append(pad_object(encode_object(SceneObject.start())))
    return np.stack(rows).astype(np.float32)


def sequence_labels(ctx: ContextWindow, class_names: list[str] | None = None) -> list[str]:
    """Human-readable label per sequence row, in build_context_sequence order:
    token surfaces for text rows, class names (or class_<id>) for objects,
    <start>/<end> for the sentinels."""

    def name(obj: SceneObject) -> str:
        return class_names[obj.class_id] if class_names else f"class_{obj.class_id}"

    labels: list[str] = []
    for instruction, scene in ctx.turns:
        labels.extend(t.surface for t in instruction)
        labels.append("<start>")
        labels.extend(name(o) for o in scene.objects)
        labels.append("<end>")
    labels.extend(t.surface for t in ctx.current_instruction)
    labels.append("<start>")
    return labels
