"""Synthetic scene-scan dataset: generation, validation, file format, stats.

Each sample is a token-encoded scene of object/attribute pairs headed by
a global anchor, a single-token query naming one object, a scan chain
that narrows from the anchor through objects to the deciding attribute,
and a one-token answer derived from that attribute by a fixed published
rule. Everything is recomputable: an independent validator re-derives
the answer from scene and query alone.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, Sequence

GLOBAL = "GLOBAL"
OBJECT = "OBJECT"
ATTRIBUTE = "ATTRIBUTE"
ANSWER = "ANSWER"
SPECIAL = "SPECIAL"
UNUSED = "UNUSED"

_CLASS_ORDER = {GLOBAL: 0, OBJECT: 1, ATTRIBUTE: 2}

MIN_CHAIN = 1
MAX_CHAIN = 20


class DatasetFormatError(Exception):
    pass


@dataclass(frozen=True)
class VocabLayout:
    """Id assignment: five specials, then four disjoint class ranges."""
    pad: int = 0
    bos: int = 1
    laser_end: int = 2
    answer_start: int = 3
    eos: int = 4
    global_range: tuple[int, int] = (5, 13)
    object_range: tuple[int, int] = (13, 37)
    attribute_range: tuple[int, int] = (37, 53)
    answer_range: tuple[int, int] = (53, 57)

    def __post_init__(self):
        specials = [self.pad, self.bos, self.laser_end, self.answer_start, self.eos]
        if len(set(specials)) != 5:
            raise ValueError("special ids must be distinct")
        ranges = [self.global_range, self.object_range,
                  self.attribute_range, self.answer_range]
        for lo, hi in ranges:
            if hi - lo < 4:
                raise ValueError("each class range needs at least 4 ids")
        spans = sorted(ranges)
        for (alo, ahi), (blo, bhi) in zip(spans, spans[1:]):
            if ahi > blo:
                raise ValueError("class ranges overlap")
        for s in specials:
            for lo, hi in ranges:
                if lo <= s < hi:
                    raise ValueError("special id inside a class range")

    @property
    def vocab_floor(self) -> int:
        return max(r[1] for r in (self.global_range, self.object_range,
                                  self.attribute_range, self.answer_range))

    def token_class(self, tok: int) -> str:
        if tok in (self.pad, self.bos, self.laser_end, self.answer_start, self.eos):
            return SPECIAL
        for name, (lo, hi) in ((GLOBAL, self.global_range), (OBJECT, self.object_range),
                               (ATTRIBUTE, self.attribute_range), (ANSWER, self.answer_range)):
            if lo <= tok < hi:
                return name
        return UNUSED

    def answer_for_attribute(self, attribute: int) -> int:
        """Published rule: attribute index modulo the answer-range width."""
        lo, hi = self.attribute_range
        alo, ahi = self.answer_range
        if not lo <= attribute < hi:
            raise ValueError(f"token {attribute} is not an attribute")
        return alo + (attribute - lo) % (ahi - alo)

    def answer_ids(self) -> list[int]:
        return list(range(*self.answer_range))


@dataclass
class ScanPathSample:
    scene: list[int]
    query: list[int]
    chain: list[int]
    answer: list[int]


@dataclass(frozen=True)
class LengthProfile:
    """Discretized clipped gaussian over chain lengths.

    The defaults leave headroom for the end step: a model that replays a
    chain faithfully spends len(chain)+1 latent steps, so the realized
    mean length (~6.8) keeps that total under 8.
    """
    mean: float = 6.8
    sd: float = 2.5
    lo: int = MIN_CHAIN
    hi: int = MAX_CHAIN


# Every scene holds exactly this many object-attribute pairs. A constant
# scene shape keeps token positions aligned across samples, which is what
# lets a small model learn the copy-and-advance scan as positional
# attention patterns instead of memorizing scenes.
_N_OBJECTS = 10


def _sample_one(seed: int, index: int, layout: VocabLayout,
                profile: LengthProfile) -> ScanPathSample:
    """One scan-path sample.

    The chain is the scan itself: the anchor, then scene objects in listed
    order up to the queried one, then its attribute. Every chain token is
    recoverable from scene+query, so each step of the path is a learnable
    target rather than an arbitrary draw. Chain length is controlled by
    where the queried object sits in the scene.
    """
    rng = random.Random((seed << 32) + index)
    glo, ghi = layout.global_range
    olo, ohi = layout.object_range
    alo, ahi = layout.attribute_range

    t = min(max(round(rng.gauss(profile.mean, profile.sd)), profile.lo), profile.hi)
    anchor = rng.randrange(glo, ghi)
    objects = rng.sample(range(olo, ohi), _N_OBJECTS)
    attrs = [rng.randrange(alo, ahi) for _ in objects]
    scan = min(max(t - 2, 1), _N_OBJECTS)  # objects visited before the attribute
    obj_q, attr_q = objects[scan - 1], attrs[scan - 1]

    scene = [anchor]
    for o, a in zip(objects, attrs):
        scene += [o, a]
    query = [obj_q]
    answer = [layout.answer_for_attribute(attr_q)]

    if t == 1:
        chain = [attr_q]
    elif t == 2:
        chain = [obj_q, attr_q]
    else:
        chain = [anchor] + objects[:scan] + [attr_q]
    return ScanPathSample(scene=scene, query=query, chain=chain, answer=answer)


def generate_dataset(seed: int, count: int, layout: VocabLayout | None = None,
                     profile: LengthProfile | None = None) -> list[ScanPathSample]:
    """Deterministic per (seed, index): slicing and full runs agree."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    layout = layout or VocabLayout()
    profile = profile or LengthProfile()
    return [_sample_one(seed, i, layout, profile) for i in range(count)]


def validate_sample(sample: ScanPathSample, layout: VocabLayout) -> bool:
    """Independent re-derivation of every structural promise and the label."""
    scene, query, chain, answer = sample.scene, sample.query, sample.chain, sample.answer
    if len(scene) < 3 or len(scene) % 2 == 0:
        return False
    if layout.token_class(scene[0]) != GLOBAL:
        return False
    pairs = {}
    for o, a in zip(scene[1::2], scene[2::2]):
        if layout.token_class(o) != OBJECT or layout.token_class(a) != ATTRIBUTE:
            return False
        if o in pairs:
            return False
        pairs[o] = a
    if len(query) != 1 or query[0] not in pairs:
        return False
    if not MIN_CHAIN <= len(chain) <= MAX_CHAIN:
        return False
    ranks = []
    for tok in chain:
        cls = layout.token_class(tok)
        if cls not in _CLASS_ORDER:
            return False
        ranks.append(_CLASS_ORDER[cls])
    if any(a > b for a, b in zip(ranks, ranks[1:])):
        return False
    if layout.token_class(chain[-1]) != ATTRIBUTE:
        return False
    expected = [layout.answer_for_attribute(pairs[query[0]])]
    if chain[-1] != pairs[query[0]]:
        return False
    return answer == expected


def split_dataset(samples: Sequence[ScanPathSample]
                  ) -> tuple[list[ScanPathSample], list[ScanPathSample]]:
    """Fixed 90/10 split by a multiplicative hash of the sample index."""
    train, held = [], []
    for i, s in enumerate(samples):
        h = (i * 2654435761) % (2 ** 32)
        (held if h % 10 == 0 else train).append(s)
    return train, held


# --------------------------------------------------------------------------
# sequence assembly for the model

def assemble_tokens(sample: ScanPathSample, layout: VocabLayout
                    ) -> tuple[list[int], int, int]:
    """Full training sequence plus the offsets the losses need.

    Returns (tokens, chain_start, first_answer) where chain_start indexes
    the first chain token and first_answer the first answer token.
    Layout: bos, scene, query, chain, end, answer-start, answer, eos.
    """
    tokens = [layout.bos] + list(sample.scene) + list(sample.query)
    chain_start = len(tokens)
    tokens += list(sample.chain)
    tokens += [layout.laser_end, layout.answer_start]
    first_answer = len(tokens)
    tokens += list(sample.answer)
    tokens.append(layout.eos)
    return tokens, chain_start, first_answer


def prompt_tokens(sample: ScanPathSample, layout: VocabLayout) -> list[int]:
    return [layout.bos] + list(sample.scene) + list(sample.query)


# --------------------------------------------------------------------------
# file format: one line per sample, four tab-separated token sections

def write_dataset(path, samples: Iterable[ScanPathSample]) -> None:
    with open(path, "w", encoding="ascii") as fh:
        for s in samples:
            fh.write("\t".join(" ".join(str(t) for t in sec)
                               for sec in (s.scene, s.query, s.chain, s.answer)))
            fh.write("\n")


def read_dataset(path) -> list[ScanPathSample]:
    # a missing path is a caller mistake and propagates as-is; only
    # unreadable content counts as a format error
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.read().split("\n")
    except FileNotFoundError:
        raise
    except (OSError, UnicodeDecodeError) as e:
        raise DatasetFormatError(f"cannot read dataset: {e}") from e
    if lines and lines[-1] == "":
        lines.pop()
    out = []
    for ln, line in enumerate(lines, start=1):
        parts = line.split("\t")
        if len(parts) != 4:
            raise DatasetFormatError(
                f"line {ln}: expected 4 tab-separated sections, got {len(parts)}")
        secs = []
        for part in parts:
            try:
                secs.append([int(t) for t in part.split()] if part else [])
            except ValueError as e:
                raise DatasetFormatError(f"line {ln}: non-integer token") from e
        out.append(ScanPathSample(*secs))
    return out


# --------------------------------------------------------------------------
# stats report

def chain_lengths(samples: Sequence[ScanPathSample]) -> list[int]:
    return [len(s.chain) for s in samples]


def stats_report(samples: Sequence[ScanPathSample], layout: VocabLayout | None = None) -> str:
    """Aligned-text report: counts, length histogram, class transitions."""
    layout = layout or VocabLayout()
    lens = chain_lengths(samples)
    lines = []
    lines.append(f"samples          {len(samples)}")
    if not samples:
        return "\n".join(lines) + "\n"
    mean = sum(lens) / len(lens)
    lines.append(f"chain length     min {min(lens)}  max {max(lens)}  mean {mean:.3f}")
    lines.append("")
    lines.append("length histogram")
    hist = {}
    for n in lens:
        hist[n] = hist.get(n, 0) + 1
    peak = max(hist.values())
    for n in range(min(hist), max(hist) + 1):
        c = hist.get(n, 0)
        bar = "#" * max(1, round(40 * c / peak)) if c else ""
        lines.append(f"  {n:2d} {c:6d} {bar}")
    lines.append("")
    lines.append("class transitions (chain bigrams)")
    classes = [GLOBAL, OBJECT, ATTRIBUTE]
    counts = {(a, b): 0 for a in classes for b in classes}
    for s in samples:
        cls = [layout.token_class(t) for t in s.chain]
        for a, b in zip(cls, cls[1:]):
            if a in _CLASS_ORDER and b in _CLASS_ORDER:
                counts[(a, b)] += 1
    header = "  " + " " * 10 + "".join(f"{c:>10}" for c in classes)
    lines.append(header)
    for a in classes:
        lines.append(f"  {a:<10}" + "".join(f"{counts[(a, b)]:>10}" for b in classes))
    return "\n".join(lines) + "\n"
