"""Recurrent pieces: a bidirectional sequence encoder and a unidirectional
decoder cell that supports both full teacher-forced runs and stepwise decode."""

from __future__ import annotations

import torch
from torch import nn

from sketchchat.errors import DimensionError

LSTMState = tuple[torch.Tensor, torch.Tensor]


def _check_seq(x: torch.Tensor, dim: int) -> None:
    if x.dim() != 3:
        raise DimensionError(f"expected (batch, time, dim), got rank {x.dim()}")
    if x.shape[1] == 0:
        raise DimensionError("zero-length sequence")
    if x.shape[2] != dim:
        raise DimensionError(f"expected width {dim}, got {x.shape[2]}")


class BiLSTMEncoder(nn.Module):
    """Runs an LSTM over the sequence in both directions and exposes the
    concatenated final hidden states."""

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.lstm = nn.LSTM(input_dim, hidden_dim, batch_first=True, bidirectional=True)

    def forward(
        self, x: torch.Tensor, lengths: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (per-step outputs (b, t, 2h), final states (b, 2h)).
        With `lengths`, right padding is excluded from the final states."""
        _check_seq(x, self.input_dim)
        if lengths is None:
            out, (h, _) = self.lstm(x)
            return out, torch.cat([h[0], h[1]], dim=1)
        packed = nn.utils.rnn.pack_padded_sequence(
            x, lengths.cpu(), batch_first=True, enforce_sorted=False
        )
        packed_out, (h, _) = self.lstm(packed)
        out, _ = nn.utils.rnn.pad_packed_sequence(packed_out, batch_first=True, total_length=x.shape[1])
        return out, torch.cat([h[0], h[1]], dim=1)


class LSTMDecoderCell(nn.Module):
    """Single-layer decoder. `forward` consumes a whole teacher-forced
    sequence in one call; `step` advances one tick during sampling."""

    def __init__(self, input_dim: int, hidden_dim: int):
        super().__init__()
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.lstm = nn.LSTM(input_dim, hidden_dim, batch_first=True)

    def forward(self, x: torch.Tensor, state: LSTMState | None = None) -> tuple[torch.Tensor, LSTMState]:
        _check_seq(x, self.input_dim)
        return self.lstm(x, state)

    def step(self, x: torch.Tensor, state: LSTMState | None = None) -> tuple[torch.Tensor, LSTMState]:
        if x.dim() != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"expected (batch, {self.input_dim}), got {tuple(x.shape)}")
        out, state = self.lstm(x.unsqueeze(1), state)
        return out.squeeze(1), state

    def initial_state(self, h0: torch.Tensor, c0: torch.Tensor) -> LSTMState:
        """Packs externally computed (b, h) tensors into the layer-major
        layout the cell expects."""
        if h0.shape != c0.shape or h0.dim() != 2 or h0.shape[1] != self.hidden_dim:
            raise DimensionError("initial state must be a (batch, hidden) pair")
        return h0.unsqueeze(0).contiguous(), c0.unsqueeze(0).contiguous()
