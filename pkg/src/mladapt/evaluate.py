"""Character error rate, LID accuracy, and per-language report aggregation."""

import json
from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import no_grad
from .ctc import greedy_decode
from .data import DEV_DIALECT

# reporting-schema reference row at full scale (best published system):
# macro LID accuracy and CER in percent
REFERENCE_FULL_SCALE = {"lid_accuracy": 86.9, "cer": 15.6}

DEFAULT_WORST_K = 15


def _encode_pair(ref, hyp):
    mapping = {}

    def enc(seq):
        out = np.empty(len(seq), dtype=np.int64)
        for i, tok in enumerate(seq):
            out[i] = mapping.setdefault(tok, len(mapping))
        return out

    return enc(list(ref)), enc(list(hyp))


def cer(reference, hypothesis):
    """Levenshtein distance over tokens divided by reference length.

    Normalized by the reference only; may exceed 1.
    """
    ref, hyp = _encode_pair(reference, hypothesis)
    if ref.size == 0:
        raise ValueError("cer: reference must be nonempty")
    return kernels.edit_distance(ref, hyp) / ref.size


def lid_predict(decoded, vocab):
    """Language code read off a decoded sequence: its first token if that
    token is a language code, else None (counted incorrect)."""
    if decoded and vocab.is_language_code(decoded[0]):
        return vocab.tokens[decoded[0]]
    return None


@dataclass
class EvalReport:
    split: str
    per_language: dict
    cer_full: float
    lid_accuracy_full: float
    cer_std: float
    worst_k: int
    cer_worst_k: float
    few_shot: dict = None
    dialect: dict = None

    def to_dict(self):
        doc = {
            "split": self.split,
            "languages": len(self.per_language),
            "full": {"cer": self.cer_full, "lid_accuracy": self.lid_accuracy_full},
            "cer_std": self.cer_std,
            "worst_k": {"k": self.worst_k, "cer": self.cer_worst_k},
            "per_language": self.per_language,
        }
        if self.few_shot is not None:
            doc["few_shot"] = self.few_shot
        if self.dialect is not None:
            doc["dialect"] = self.dialect
        return doc

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_tsv(self):
        lines = ["language\tcer\tlid_accuracy\tutterances"]
        for code in sorted(self.per_language):
            row = self.per_language[code]
            lines.append(
                f"{code}\t{row['cer']:.6f}\t{row['lid_accuracy']:.6f}"
                f"\t{row['utterances']}"
            )
        return "\n".join(lines) + "\n"


def decode_corpus(model, corpus, vocab):
    """Greedy hypotheses for every utterance: (utterance, decoded ids)."""
    out = []
    with no_grad():
        for utt in corpus.utterances:
            log_probs, _ = model.forward(utt.features)
            out.append((utt, greedy_decode(log_probs)))
    return out


def _aggregate(stats, codes):
    cers = [stats[c]["edits"] / stats[c]["ref_len"] for c in codes]
    lids = [stats[c]["lid_correct"] / stats[c]["utterances"] for c in codes]
    return float(np.mean(cers)), float(np.mean(lids))


def evaluate(model, corpus, vocab, worst_k=DEFAULT_WORST_K, few_shot=()):
    """Decode a split greedily and aggregate per-language CER / LID accuracy.

    The leading language token is stripped from both reference and
    hypothesis before CER. Macro averages are unweighted over languages;
    the deviation is the population standard deviation of per-language CER.
    """
    if not corpus.utterances:
        raise ValueError("evaluate: empty split")
    stats = {}
    for utt, decoded in decode_corpus(model, corpus, vocab):
        predicted = lid_predict(decoded, vocab)
        hyp = decoded
        if hyp and vocab.is_language_code(hyp[0]):
            hyp = hyp[1:]
        ref = vocab.encode(utt.transcript)
        entry = stats.setdefault(
            utt.language,
            {"edits": 0, "ref_len": 0, "lid_correct": 0, "utterances": 0},
        )
        entry["edits"] += kernels.edit_distance(
            np.asarray(ref, np.int64), np.asarray(hyp, np.int64)
        )
        entry["ref_len"] += len(ref)
        entry["lid_correct"] += int(predicted == utt.language)
        entry["utterances"] += 1

    codes = sorted(stats)
    per_language = {}
    for code in codes:
        entry = stats[code]
        per_language[code] = {
            "cer": entry["edits"] / entry["ref_len"],
            "lid_accuracy": entry["lid_correct"] / entry["utterances"],
            "utterances": entry["utterances"],
        }
    cer_full, lid_full = _aggregate(stats, codes)
    cers = np.array([per_language[c]["cer"] for c in codes])
    k = min(worst_k, len(codes))
    worst = sorted(codes, key=lambda c: (-per_language[c]["cer"], c))[:k]
    cer_worst = float(np.mean([per_language[c]["cer"] for c in worst]))

    few_shot_block = None
    fs_codes = [c for c in codes if c in set(few_shot)]
    if fs_codes:
        fs_cer, fs_lid = _aggregate(stats, fs_codes)
        few_shot_block = {"cer": fs_cer, "lid_accuracy": fs_lid,
                          "languages": len(fs_codes)}

    dialect_block = None
    if corpus.split == DEV_DIALECT:
        dialect_block = {"cer": cer_full, "lid_accuracy": lid_full}

    return EvalReport(
        split=corpus.split,
        per_language=per_language,
        cer_full=cer_full,
        lid_accuracy_full=lid_full,
        cer_std=float(np.std(cers)),
        worst_k=k,
        cer_worst_k=cer_worst,
        few_shot=few_shot_block,
        dialect=dialect_block,
    )
