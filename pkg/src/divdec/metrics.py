"""Corpus-level automatic evaluation.

BLEU-4 (clipped modified precision with brevity penalty and closest-length
multi-reference matching), Self-BLEU reported as 1 - Self-BLEU, distinct-n,
distinct-sentence, and slot error rate over delexicalized placeholders.

Conventions pinned here and mirrored by the test oracles:
  - orders with zero total n-grams across the corpus are skipped from the
    geometric mean (all hypotheses shorter than n); a counted order with zero
    matches makes the score 0;
  - closest reference length ties resolve to the shorter reference;
  - an empty hypothesis set is an error, an empty hypothesis scores 0.
"""

import math
from collections import Counter
from dataclasses import dataclass

from .corpus import is_placeholder

MAX_ORDER = 4


def ngram_counts(tokens, n: int) -> dict:
    counts: dict = {}
    for i in range(len(tokens) - n + 1):
        gram = tuple(tokens[i : i + n])
        counts[gram] = counts.get(gram, 0) + 1
    return counts


class NgramProfile:
    """Per-order maximum reference counts; clips hypothesis n-gram counts."""

    def __init__(self, refs, max_order: int = MAX_ORDER):
        self.max_order = max_order
        self.max_counts = [dict() for _ in range(max_order)]
        for ref in refs:
            for n in range(1, max_order + 1):
                mc = self.max_counts[n - 1]
                for gram, cnt in ngram_counts(ref, n).items():
                    if cnt > mc.get(gram, 0):
                        mc[gram] = cnt

    def clipped(self, window, n: int) -> tuple:
        """(clipped matches, total n-grams) of `window` at order n."""
        total = len(window) - n + 1
        if total <= 0:
            return 0, 0
        clipped = 0
        mc = self.max_counts[n - 1]
        for gram, cnt in ngram_counts(window, n).items():
            have = mc.get(gram, 0)
            if have:
                clipped += min(cnt, have)
        return clipped, total

    def precision(self, window) -> float:
        """Geometric-mean clipped precision over computable orders, no brevity
        penalty: the expert's window score. Zero matches at any computed order
        give 0; orders longer than the window are skipped."""
        window = tuple(window)
        log_sum = 0.0
        levels = 0
        for n in range(1, self.max_order + 1):
            clipped, total = self.clipped(window, n)
            if total == 0:
                continue
            if clipped == 0:
                return 0.0
            log_sum += math.log(clipped / total)
            levels += 1
        return math.exp(log_sum / levels) if levels else 0.0


def closest_ref_length(hyp_len: int, ref_lengths) -> int:
    """Reference length closest to the hypothesis; ties pick the shorter."""
    return min(ref_lengths, key=lambda r: (abs(r - hyp_len), r))


def _bleu_from_totals(clipped, totals, c_len, r_len) -> float:
    log_sum = 0.0
    levels = 0
    for cl, tot in zip(clipped, totals):
        if tot == 0:
            continue
        if cl == 0:
            return 0.0
        log_sum += math.log(cl / tot)
        levels += 1
    if levels == 0 or c_len == 0:
        return 0.0
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_sum / levels)


def bleu4(pairs) -> float:
    """Corpus BLEU-4 over (hypothesis, reference set) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("empty hypothesis set")
    clipped = [0] * MAX_ORDER
    totals = [0] * MAX_ORDER
    c_len = 0
    r_len = 0
    for hyp, refs in pairs:
        hyp = tuple(hyp)
        refs = [tuple(r) for r in refs]
        if not refs:
            raise ValueError("every hypothesis needs at least one reference")
        c_len += len(hyp)
        r_len += closest_ref_length(len(hyp), [len(r) for r in refs])
        profile = NgramProfile(refs)
        for n in range(1, MAX_ORDER + 1):
            cl, tot = profile.clipped(hyp, n)
            clipped[n - 1] += cl
            totals[n - 1] += tot
    return _bleu_from_totals(clipped, totals, c_len, r_len)


def self_bleu(outputs) -> float:
    """1 - mean leave-one-out BLEU-4 of each output against all the others.

    Uses a per-n-gram top-two count table so excluding the scored sentence
    from its own reference set costs O(1) per n-gram; equivalent to the naive
    pairwise computation.
    """
    outs = [tuple(o) for o in outputs]
    if len(outs) < 2:
        raise ValueError("self-BLEU needs at least two outputs")
    # gram -> (best count, owner index, second-best count), per order
    tops = [dict() for _ in range(MAX_ORDER)]
    per_sentence = []
    for j, out in enumerate(outs):
        orders = []
        for n in range(1, MAX_ORDER + 1):
            counts = ngram_counts(out, n)
            orders.append(counts)
            table = tops[n - 1]
            for gram, cnt in counts.items():
                best, owner, second = table.get(gram, (0, -1, 0))
                if cnt > best:
                    table[gram] = (cnt, j, best)
                elif cnt > second:
                    table[gram] = (best, owner, cnt)
        per_sentence.append(orders)
    length_counts = Counter(len(o) for o in outs)
    total_bleu = 0.0
    for j, out in enumerate(outs):
        clipped = [0] * MAX_ORDER
        totals = [0] * MAX_ORDER
        for n in range(1, MAX_ORDER + 1):
            table = tops[n - 1]
            tot = len(out) - n + 1
            if tot <= 0:
                continue
            totals[n - 1] = tot
            cl = 0
            for gram, cnt in per_sentence[j][n - 1].items():
                best, owner, second = table[gram]
                avail = second if owner == j else best
                if avail:
                    cl += min(cnt, avail)
            clipped[n - 1] = cl
        lengths = length_counts.copy()
        lengths[len(out)] -= 1
        ref_lengths = [l for l, c in lengths.items() if c > 0]
        r_len = closest_ref_length(len(out), ref_lengths)
        total_bleu += _bleu_from_totals(clipped, totals, len(out), r_len)
    return 1.0 - total_bleu / len(outs)


def distinct_n(outputs, n: int) -> float:
    """Unique n-grams divided by total n-grams across the whole corpus."""
    if not outputs:
        raise ValueError("outputs must be non-empty")
    seen = set()
    total = 0
    for out in outputs:
        out = tuple(out)
        for i in range(len(out) - n + 1):
            seen.add(out[i : i + n])
            total += 1
    return len(seen) / total if total else 0.0


def distinct_sentence(outputs) -> float:
    if not outputs:
        raise ValueError("outputs must be non-empty")
    return len({tuple(o) for o in outputs}) / len(outputs)


@dataclass
class SlotErrorResult:
    err: float  # (missing + redundant) / required; may exceed 1, uncapped
    no_required: bool = False


def slot_error(tokens, mr) -> SlotErrorResult:
    """Slot error of a delexicalized output against its MR.

    missing = required placeholders absent from the output; redundant =
    surplus repeats of required placeholders plus any occurrence of
    placeholders the MR does not require.
    """
    required = Counter(mr.required_placeholders())
    produced = Counter(t for t in tokens if is_placeholder(t))
    if not required:
        return SlotErrorResult(err=0.0, no_required=True)
    missing = sum((required - produced).values())
    redundant = sum((produced - required).values())
    return SlotErrorResult(err=(missing + redundant) / sum(required.values()))


@dataclass
class EvalReport:
    bleu: float
    one_minus_self_bleu: float
    dist1: float
    dist2: float
    dist4: float
    dist_sent: float
    slot_error_pct: float  # percentage

    CSV_HEADER = "BLEU,1-SB,Dist-1,Dist-2,Dist-4,Dist-Sent,SlotError"

    def csv_row(self) -> str:
        return (
            f"{self.bleu:.6f},{self.one_minus_self_bleu:.6f},{self.dist1:.6f},"
            f"{self.dist2:.6f},{self.dist4:.6f},{self.dist_sent:.6f},"
            f"{self.slot_error_pct:.6f}"
        )

    @staticmethod
    def from_csv(text: str) -> "EvalReport":
        lines = [l for l in text.strip().splitlines() if l.strip()]
        values = [float(x) for x in lines[-1].split(",")]
        return EvalReport(*values)


def evaluate_outputs(items, ref_groups) -> EvalReport:
    """Full report for chosen outputs.

    items: list of (MeaningRepresentation, surface token list) pairs;
    ref_groups: canonical MR key -> list of reference surface token lists
    (EOS already stripped on both sides).
    """
    pairs = []
    slot_errs = []
    outputs = []
    for mr, toks in items:
        refs = ref_groups.get(mr.key())
        if not refs:
            refs = [toks]  # degenerate: score against itself
        pairs.append((toks, refs))
        slot_errs.append(slot_error(toks, mr).err)
        outputs.append(tuple(toks))
    return EvalReport(
        bleu=bleu4(pairs),
        one_minus_self_bleu=self_bleu(outputs) if len(outputs) >= 2 else 0.0,
        dist1=distinct_n(outputs, 1),
        dist2=distinct_n(outputs, 2),
        dist4=distinct_n(outputs, 4),
        dist_sent=distinct_sentence(outputs),
        slot_error_pct=100.0 * sum(slot_errs) / max(1, len(slot_errs)),
    )
