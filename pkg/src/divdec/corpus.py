"""Synthetic concept-to-text corpus and its encodings.

A meaning representation (MR) is an ordered list of dialogue acts, each with
attribute/value slots. Values are delexicalized placeholders end to end: the
generator emits tokens like ``[rest-name]`` and never raw values, which makes
slot error exact. The grammar file drives both corpus generation and the
vocabulary, and deliberately contains near-synonymous templates so that safe
lexical diversity exists to be learned.
"""

import json
import re
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .errors import ConfigError, ParseError, SchemaError
from .util import rng_for

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
RESERVED = (BOS, EOS, UNK)

REQUESTED = "?"  # slot value marking a requested (not informed) attribute


# -- meaning representations --------------------------------------------------


@dataclass(frozen=True)
class DialogueAct:
    act: str
    slots: tuple = ()  # tuple of (attribute, value) pairs

    def keys(self):
        """Decomposition keys: (act, attr) per slot, or (act,) if slotless."""
        if not self.slots:
            return [(self.act,)]
        return [(self.act, attr) for attr, _ in self.slots]


@dataclass(frozen=True)
class MeaningRepresentation:
    acts: tuple  # tuple of DialogueAct

    def __post_init__(self):
        if not self.acts:
            raise ValueError("an MR needs at least one act")

    def key(self) -> tuple:
        """Canonical act-order-insensitive identity."""
        return tuple(sorted((a.act, a.slots) for a in self.acts))

    def decomposition_keys(self):
        out = []
        for a in self.acts:
            out.extend(a.keys())
        return out

    def required_placeholders(self):
        """Multiset (as sorted tuple) of placeholder values the output must contain."""
        req = []
        for a in self.acts:
            for _, value in a.slots:
                if value != REQUESTED:
                    req.append(value)
        return tuple(sorted(req))

    def to_obj(self):
        return [
            {"act": a.act, "slots": [{"attr": k, "value": v} for k, v in a.slots]}
            for a in self.acts
        ]

    @staticmethod
    def from_obj(obj) -> "MeaningRepresentation":
        acts = tuple(
            DialogueAct(
                entry["act"],
                tuple((s["attr"], s["value"]) for s in entry.get("slots", [])),
            )
            for entry in obj
        )
        return MeaningRepresentation(acts)


def placeholder_for(attr: str) -> str:
    return f"[{attr}]"


def is_placeholder(token: str) -> bool:
    return token.startswith("[") and token.endswith("]") and len(token) > 2


# -- grammar -------------------------------------------------------------------

_GROUP_RE = re.compile(r"\(([^()]*)\)")


@dataclass
class Template:
    """A surface template: literal tokens and alternation groups.

    parts is a list where a str is a literal chunk and a tuple is a group of
    alternatives (each itself a token string, possibly empty).
    """

    raw: str
    parts: list

    def realize(self, rng: np.random.Generator) -> tuple:
        pieces = []
        for part in self.parts:
            if isinstance(part, tuple):
                pieces.append(part[int(rng.integers(len(part)))])
            else:
                pieces.append(part)
        return tuple(" ".join(pieces).split())

    def all_realizations(self):
        outs = [[]]
        for part in self.parts:
            alts = part if isinstance(part, tuple) else (part,)
            outs = [prev + [alt] for prev in outs for alt in alts]
        return [tuple(" ".join(p).split()) for p in outs]


def _parse_template(text: str, line_no: int) -> Template:
    if text.count("(") != text.count(")"):
        raise ParseError("unbalanced parentheses in template", line_no)
    if re.search(r"\([^()]*\(", text):
        raise ParseError("nested alternation groups are not supported", line_no)
    parts = []
    pos = 0
    for m in _GROUP_RE.finditer(text):
        if m.start() > pos:
            parts.append(text[pos : m.start()])
        alts = tuple(a.strip() for a in m.group(1).split("|"))
        if len(alts) < 2:
            raise ParseError("alternation group needs at least two options", line_no)
        parts.append(alts)
        pos = m.end()
    if pos < len(text):
        parts.append(text[pos:])
    return Template(raw=text, parts=parts)


@dataclass
class GrammarAct:
    name: str
    slots: list = field(default_factory=list)  # informed attributes
    rslots: list = field(default_factory=list)  # requested attributes
    templates: list = field(default_factory=list)

    def mr_slots(self) -> tuple:
        pairs = [(attr, placeholder_for(attr)) for attr in self.slots]
        pairs += [(attr, REQUESTED) for attr in self.rslots]
        return tuple(pairs)


@dataclass
class Grammar:
    acts: list  # list of GrammarAct, declaration order is canonical

    def act_names(self):
        return [a.name for a in self.acts]

    def attributes(self):
        out = []
        for a in self.acts:
            for attr in a.slots + a.rslots:
                if attr not in out:
                    out.append(attr)
        return out

    def validate(self) -> None:
        if not self.acts:
            raise ConfigError("grammar declares no acts")
        for a in self.acts:
            if not a.templates:
                raise ConfigError(f"act {a.name!r} declares no templates")
            for tpl in a.templates:
                for real in tpl.all_realizations():
                    for attr in a.slots:
                        if real.count(placeholder_for(attr)) != 1:
                            raise ConfigError(
                                f"act {a.name!r} template {tpl.raw!r} must "
                                f"mention {placeholder_for(attr)} exactly once"
                            )

    def surface_tokens(self):
        toks = set()
        for a in self.acts:
            for tpl in a.templates:
                for real in tpl.all_realizations():
                    toks.update(real)
        return sorted(toks)


def parse_grammar(text: str) -> Grammar:
    acts = []
    current = None
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("act "):
            current = GrammarAct(name=line[4:].strip())
            if not current.name:
                raise ParseError("act needs a name", line_no)
            if current.name in [a.name for a in acts]:
                raise ParseError(f"duplicate act {current.name!r}", line_no)
            acts.append(current)
        elif line.startswith(("slot ", "rslot ", "template ")):
            if current is None:
                raise ParseError("directive before any 'act'", line_no)
            if line.startswith("slot "):
                current.slots.append(line[5:].strip())
            elif line.startswith("rslot "):
                current.rslots.append(line[6:].strip())
            else:
                current.templates.append(_parse_template(line[9:].strip(), line_no))
        else:
            raise ParseError(f"unrecognized directive {line.split()[0]!r}", line_no)
    grammar = Grammar(acts)
    grammar.validate()
    return grammar


def load_grammar(path) -> Grammar:
    with open(path, "r", encoding="utf-8") as f:
        return parse_grammar(f.read())


def default_grammar_text() -> str:
    return resources.files("divdec").joinpath("data/default_grammar.txt").read_text()


def default_grammar() -> Grammar:
    return parse_grammar(default_grammar_text())


# -- vocabulary ----------------------------------------------------------------


class Vocab:
    """Token <-> id bijection with stable reserved ids."""

    def __init__(self, tokens):
        self._tokens = list(tokens)
        if self._tokens[: len(RESERVED)] != list(RESERVED):
            raise ValueError(f"vocab must start with reserved tokens {RESERVED}")
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        if len(self._ids) != len(self._tokens):
            raise ValueError("vocab tokens must be unique")
        self.bos_id = self._ids[BOS]
        self.eos_id = self._ids[EOS]
        self.unk_id = self._ids[UNK]

    @staticmethod
    def from_grammar(grammar: Grammar) -> "Vocab":
        return Vocab(list(RESERVED) + grammar.surface_tokens())

    def __len__(self):
        return len(self._tokens)

    def __contains__(self, token):
        return token in self._ids

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    def token(self, idx: int) -> str:
        return self._tokens[idx]

    def encode(self, tokens) -> list:
        return [self.id(t) for t in tokens]

    def decode(self, ids) -> list:
        return [self._tokens[i] for i in ids]

    def placeholder_ids(self):
        return [i for i, t in enumerate(self._tokens) if is_placeholder(t)]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for t in self._tokens:
                f.write(t + "\n")

    @staticmethod
    def load(path) -> "Vocab":
        with open(path, "r", encoding="utf-8") as f:
            return Vocab([line.rstrip("\n") for line in f if line.rstrip("\n")])

    def tokens(self):
        return list(self._tokens)


# -- dialogue-act vector schema -------------------------------------------------


class DASchema:
    """Index map from act names and (act, attribute) pairs to vector positions."""

    def __init__(self, entries):
        self.entries = [tuple(e) for e in entries]
        self.index = {e: i for i, e in enumerate(self.entries)}
        if len(self.index) != len(self.entries):
            raise ValueError("schema entries must be unique")

    @staticmethod
    def from_grammar(grammar: Grammar) -> "DASchema":
        entries = [(a.name,) for a in grammar.acts]
        for a in grammar.acts:
            for attr in a.slots + a.rslots:
                entries.append((a.name, attr))
        return DASchema(entries)

    def __len__(self):
        return len(self.entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"entries": [list(e) for e in self.entries]}, f, indent=1)

    @staticmethod
    def load(path) -> "DASchema":
        with open(path, "r", encoding="utf-8") as f:
            return DASchema(json.load(f)["entries"])


def encode_mr(mr: MeaningRepresentation, schema: DASchema) -> np.ndarray:
    """Multi-hot control vector: 1 at the MR's act and (act, attr) positions."""
    vec = np.zeros(len(schema), dtype=np.float64)
    for a in mr.acts:
        if (a.act,) not in schema.index:
            raise SchemaError(f"unknown act {a.act!r}")
        vec[schema.index[(a.act,)]] = 1.0
        for attr, _ in a.slots:
            key = (a.act, attr)
            if key not in schema.index:
                raise SchemaError(f"unknown attribute {attr!r} for act {a.act!r}")
            vec[schema.index[key]] = 1.0
    return vec


# -- datasets ------------------------------------------------------------------


@dataclass(frozen=True)
class Instance:
    mr: MeaningRepresentation
    ref: tuple  # surface tokens, EOS-terminated


@dataclass
class Dataset:
    instances: list
    split: str = "train"

    def __post_init__(self):
        for inst in self.instances:
            if not inst.ref or inst.ref[-1] != EOS:
                raise ValueError("every reference must end with the EOS token")

    def __len__(self):
        return len(self.instances)

    def by_mr(self) -> dict:
        """Group references by canonical MR key."""
        groups = {}
        for inst in self.instances:
            groups.setdefault(inst.mr.key(), []).append(inst)
        return groups


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inst in dataset.instances:
            rec = {"mr": inst.mr.to_obj(), "ref": " ".join(inst.ref[:-1])}
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_dataset(path, split: str = "train") -> Dataset:
    instances = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                mr = MeaningRepresentation.from_obj(rec["mr"])
                ref = tuple(rec["ref"].split()) + (EOS,)
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad dataset record ({exc})", line_no) from exc
            instances.append(Instance(mr=mr, ref=ref))
    return Dataset(instances, split=split)


# -- corpus generation -----------------------------------------------------------

# acts per MR are drawn from this distribution; combinations are realized in
# grammar declaration order so the mapping MR -> surface order is learnable
# from the order-free control vector
ACTS_PER_MR = ((1, 0.40), (2, 0.60))


def _sample_instance(grammar: Grammar, rng: np.random.Generator) -> Instance:
    counts = np.array([c for c, _ in ACTS_PER_MR])
    weights = np.array([w for _, w in ACTS_PER_MR])
    k = int(rng.choice(counts, p=weights / weights.sum()))
    k = min(k, len(grammar.acts))
    picks = sorted(rng.choice(len(grammar.acts), size=k, replace=False).tolist())
    acts = []
    tokens = []
    for idx in picks:
        gact = grammar.acts[idx]
        acts.append(DialogueAct(gact.name, gact.mr_slots()))
        tpl = gact.templates[int(rng.integers(len(gact.templates)))]
        tokens.extend(tpl.realize(rng))
    return Instance(MeaningRepresentation(tuple(acts)), tuple(tokens) + (EOS,))


def generate_corpus(grammar: Grammar, seed: int, sizes) -> tuple:
    """Deterministically sample (train, val, test) datasets from the grammar."""
    grammar.validate()
    names = ("train", "val", "test")
    out = []
    for split, size in zip(names, sizes):
        rng = rng_for(seed, "corpus", split)
        instances = [_sample_instance(grammar, rng) for _ in range(size)]
        out.append(Dataset(instances, split=split))
    return tuple(out)


# -- decomposed-attribute reference index ----------------------------------------


class ReferenceIndex:
    """Training references retrievable by (act, attribute) decomposition keys.

    Built once from the training split and immutable afterwards; also keeps a
    full-MR map so exact-match references are always retrievable.
    """

    def __init__(self, by_key: dict, by_mr: dict):
        self.by_key = by_key  # decomposition key -> sorted tuple of refs
        self.by_mr = by_mr  # canonical MR key -> sorted tuple of refs

    @staticmethod
    def build(train: Dataset) -> "ReferenceIndex":
        key_sets: dict = {}
        mr_sets: dict = {}
        for inst in train.instances:
            for key in inst.mr.decomposition_keys():
                key_sets.setdefault(key, set()).add(inst.ref)
            mr_sets.setdefault(inst.mr.key(), set()).add(inst.ref)
        index = ReferenceIndex(
            by_key={k: tuple(sorted(v)) for k, v in key_sets.items()},
            by_mr={k: tuple(sorted(v)) for k, v in mr_sets.items()},
        )
        # completeness: every instance is retrievable under each of its keys
        for inst in train.instances:
            for key in inst.mr.decomposition_keys():
                assert inst.ref in key_sets[key], (
                    f"reference index lost {inst.ref!r} under {key!r}"
                )
        return index


@dataclass
class RefLookup:
    refs: list  # list of reference token tuples
    missing_keys: tuple = ()
    capped: bool = False


def references_for(
    mr: MeaningRepresentation,
    index: ReferenceIndex,
    cap: int = 500,
    seed: int = 0,
) -> RefLookup:
    """Union of indexed references over the MR's decomposition keys.

    Keys absent from the index are skipped and reported via `missing_keys`.
    When the union exceeds `cap`, a seeded deterministic subsample of size
    `cap` is returned that always retains every reference of the exact MR.
    """
    own = index.by_mr.get(mr.key(), ())
    seen = dict.fromkeys(own)
    missing = []
    for key in mr.decomposition_keys():
        refs = index.by_key.get(key)
        if refs is None:
            missing.append(key)
            continue
        for ref in refs:
            seen.setdefault(ref)
    union = list(seen.keys())
    capped = False
    if len(union) > cap:
        capped = True
        if len(own) >= cap:
            union = list(own)
        else:
            rest = union[len(own) :]
            rng = rng_for(seed, "refsub", mr.key())
            keep = rng.choice(len(rest), size=cap - len(own), replace=False)
            union = list(own) + [rest[i] for i in sorted(keep.tolist())]
    return RefLookup(refs=union, missing_keys=tuple(missing), capped=capped)
