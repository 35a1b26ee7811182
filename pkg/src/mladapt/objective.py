"""Auxiliary language-identification CTC loss and the combined objective."""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import log_softmax
from .ctc import ctc_loss
from .model import AdaptationPlan, Linear


@dataclass(frozen=True)
class ObjectiveConfig:
    """Weighting and placement of the auxiliary LID CTC loss.

    `beta` = 0 degrades exactly to plain CTC training; `lid_layers` must sit
    inside the fine-tune window.
    """

    beta: float = 0.0
    lid_layers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.beta > 0 and not self.lid_layers:
            raise ValueError("beta > 0 requires at least one LID layer")

    def validate_against(self, plan):
        if self.beta == 0:
            return
        if plan is None or plan.mode != AdaptationPlan.FINETUNE:
            raise ValueError("LID CTC applies only to fine-tune window plans")
        window = set(plan.window_layers())
        outside = sorted(set(self.lid_layers) - window)
        if outside:
            raise ValueError(
                f"LID layers {outside} outside fine-tune window {plan.window}"
            )


class LidHeads:
    """One linear head per selected layer, mapping frames to language codes
    plus blank."""

    def __init__(self, lid_layers, dim, n_codes, rng):
        self.lid_layers = tuple(lid_layers)
        self.heads = {
            layer: Linear(dim, n_codes + 1, rng, f"lid.layer{layer}")
            for layer in self.lid_layers
        }

    def __getitem__(self, layer):
        return self.heads[layer]

    def params(self):
        out = []
        for layer in self.lid_layers:
            out += self.heads[layer].params()
        return out


def build_lid_target(utterance, vocab):
    """The utterance's language code id, repeated once per target symbol.

    Ids index the LID vocabulary: 0 is blank, then language codes in
    vocabulary order.
    """
    if not utterance.target:
        raise ValueError(f"utterance {utterance.id} has an empty target")
    code = utterance.target[0]
    codes = list(vocab.language_codes)
    if code not in codes:
        raise ValueError(f"unknown language code {code!r}")
    lid_id = codes.index(code) + 1
    return [lid_id] * len(utterance.target)


def lid_ctc_loss(layer_output, head, lid_target):
    """CTC loss of the repeated-code sequence against one layer's frames.

    Uses the full pre-subsampling frame count; a length-S repeated target
    needs at least 2S-1 frames, otherwise the loss is +inf.
    """
    log_probs = log_softmax(head(layer_output))
    return ctc_loss(log_probs, lid_target)


def combined_loss(ctc, lid_losses, beta):
    """Blend the primary CTC loss with the mean auxiliary LID loss.

    Computed as ctc + beta * (mean(lid) - ctc), which equals
    (1 - beta) * ctc + beta * mean(lid); with beta = 0 the primary loss is
    returned unchanged.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    if beta == 0.0:
        return ctc
    lid_losses = list(lid_losses)
    if not lid_losses:
        raise ValueError("beta > 0 requires at least one LID loss")
    total = lid_losses[0]
    for term in lid_losses[1:]:
        total = total + term
    mean_lid = total / len(lid_losses)
    if beta == 1.0:
        return mean_lid
    return ctc + (mean_lid - ctc) * beta
