"""Synthetic ground-truth universe: scenes, a paraphrasing caption grammar
with style variants, a closed-world tokenizer, and corpus generation.

Scenes hold 1-3 objects with (shape, color, size) attributes and a spatial
relation between the first two objects when there are at least two. The
grammar renders a scene into many distinct surface forms (template and
synonym choice) that all assert exactly the same attributes, which makes
semantic correctness of generated captions machine-checkable.
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

GRAMMAR_VERSION = 1

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"

SHAPES = {
    "circle": ["circle", "disk"],
    "square": ["square", "block"],
    "triangle": ["triangle", "wedge"],
    "star": ["star", "burst"],
    "ring": ["ring", "hoop"],
    "cross": ["cross", "plus"],
    "spiral": ["spiral", "coil"],
    "diamond": ["diamond", "rhombus"],
}

COLORS = {
    "red": ["red", "crimson"],
    "blue": ["blue", "cobalt"],
    "green": ["green", "jade"],
    "yellow": ["yellow", "gold"],
    "purple": ["purple", "violet"],
    "pink": ["pink", "rose"],
    "black": ["black", "coal"],
    "white": ["white", "chalk"],
}

SIZES = {
    "small": ["small", "little"],
    "medium": ["medium", "modest"],
    "big": ["big", "large"],
}

RELATIONS = {
    "left_of": ["left of"],
    "right_of": ["right of"],
    "above": ["above", "over"],
    "below": ["below", "beneath"],
    "beside": ["beside", "alongside"],
    "near": ["near", "close to"],
}

TEMPLATE_PREFIXES = ["", "there is", "you can see", "the picture shows", "this shows"]

STYLE_PHRASES = {
    "romantic_like": [
        "glowing with tender romance",
        "like a lovely dream",
        "bathed in sweet moonlight",
        "full of enchanting charm",
        "wrapped in gentle starlight",
        "whispering of quiet devotion",
    ],
    "humorous_like": [
        "doing a silly wiggly dance",
        "like a goofy clown",
        "telling a wacky joke",
        "wearing a ridiculous hat",
        "giggling at pure nonsense",
        "bouncing like a jolly balloon",
    ],
}

STYLES = ("neutral", "romantic_like", "humorous_like")

OBJECT_COUNT_WEIGHTS = {1: 0.4, 2: 0.4, 3: 0.2}


class WorldError(ValueError):
    """Grammar, tokenizer, or corpus constraint violation."""


def normalize(text: str) -> str:
    return " ".join(text.lower().split())


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    size: str


@dataclass(frozen=True)
class Scene:
    scene_id: int
    objects: tuple[ObjectSpec, ...]
    relation: str | None

    def __post_init__(self):
        if not 1 <= len(self.objects) <= 3:
            raise WorldError(f"scene must hold 1-3 objects, got {len(self.objects)}")
        if (self.relation is not None) != (len(self.objects) >= 2):
            raise WorldError("relation must be present iff the scene has >= 2 objects")
        for o in self.objects:
            if o.shape not in SHAPES or o.color not in COLORS or o.size not in SIZES:
                raise WorldError(f"unknown attribute in {o}")
        if self.relation is not None and self.relation not in RELATIONS:
            raise WorldError(f"unknown relation {self.relation!r}")

    def content_key(self) -> tuple:
        """Scene content, independent of scene_id; identical content embeds identically."""
        return (tuple((o.size, o.color, o.shape) for o in self.objects), self.relation)

    def attribute_multiset(self) -> Counter:
        c = Counter()
        for o in self.objects:
            c[("size", o.size)] += 1
            c[("color", o.color)] += 1
            c[("shape", o.shape)] += 1
        if self.relation is not None:
            c[("relation", self.relation)] += 1
        return c


@dataclass(frozen=True)
class Caption:
    text: str
    tokens: tuple[int, ...]
    scene_id: int
    style: str = "neutral"


# -- vocabulary -----------------------------------------------------------------


def _neutral_words() -> set[str]:
    words = {"a", "and"}
    for table in (SHAPES, COLORS, SIZES):
        for surfaces in table.values():
            words.update(surfaces)
    for surfaces in RELATIONS.values():
        for s in surfaces:
            words.update(s.split())
    for prefix in TEMPLATE_PREFIXES:
        words.update(prefix.split())
    words.discard("")
    return words


def _style_words() -> set[str]:
    words = set()
    for phrases in STYLE_PHRASES.values():
        for p in phrases:
            words.update(p.split())
    return words


def style_marker_lexicon(style: str | None = None) -> frozenset[str]:
    """Words that occur only in styled caption tails, never in neutral text."""
    neutral = _neutral_words()
    if style is None:
        return frozenset(_style_words() - neutral)
    if style not in STYLE_PHRASES:
        raise WorldError(f"unknown style {style!r}")
    words = set()
    for p in STYLE_PHRASES[style]:
        words.update(p.split())
    return frozenset(words - neutral)


class Vocabulary:
    """Closed token/id bijection with reserved pad/bos/eos ids.

    Built from the static grammar lexicon, so it is stable across runs
    for a given grammar version.
    """

    def __init__(self):
        words = sorted(_neutral_words() | _style_words())
        self.id_to_word = [PAD, BOS, EOS] + words
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}
        self.pad_id, self.bos_id, self.eos_id = PAD_ID, BOS_ID, EOS_ID

    def __len__(self):
        return len(self.id_to_word)

    def vocab_hash(self) -> str:
        payload = f"v{GRAMMAR_VERSION}:" + "\n".join(self.id_to_word)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def tokenize(self, text: str) -> tuple[int, ...]:
        ids = [BOS_ID]
        for word in normalize(text).split():
            wid = self.word_to_id.get(word)
            if wid is None:
                raise WorldError(f"word {word!r} is not in the closed vocabulary")
            ids.append(wid)
        ids.append(EOS_ID)
        return tuple(ids)

    def detokenize(self, ids) -> str:
        words = []
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            if not 0 <= i < len(self.id_to_word):
                raise WorldError(f"token id {i} out of range")
            words.append(self.id_to_word[i])
        return " ".join(words)


# -- grammar --------------------------------------------------------------------


def _word_to_attribute() -> dict[str, tuple[str, str]]:
    out = {}
    for table, category in ((SHAPES, "shape"), (COLORS, "color"), (SIZES, "size")):
        for canonical, surfaces in table.items():
            for s in surfaces:
                out[s] = (category, canonical)
    return out


class Grammar:
    """Renders scenes into paraphrased captions and parses captions back."""

    def __init__(self):
        self.vocab = Vocabulary()
        self._attr = _word_to_attribute()
        # relation surfaces as word tuples, longest first for greedy parsing
        self._rel_surfaces = sorted(
            ((tuple(s.split()), canon) for canon, ss in RELATIONS.items() for s in ss),
            key=lambda x: -len(x[0]),
        )
        self._prefixes = sorted(
            (tuple(p.split()) for p in TEMPLATE_PREFIXES if p), key=len, reverse=True
        )
        self._style_tails = {
            style: [tuple(p.split()) for p in phrases]
            for style, phrases in STYLE_PHRASES.items()
        }

    # lexemes: synonym-invariant concept ids used by the text encoder
    def lexeme_table(self) -> dict[str, int]:
        """word -> lexeme id; synonyms of one attribute value share a lexeme."""
        concepts = {}
        for word in self.vocab.id_to_word:
            if word in (PAD, BOS, EOS):
                continue
            attr = self._attr.get(word)
            concepts[word] = f"{attr[0]}:{attr[1]}" if attr else f"word:{word}"
        names = sorted(set(concepts.values()))
        name_id = {n: i for i, n in enumerate(names)}
        return {w: name_id[c] for w, c in concepts.items()}

    def n_lexemes(self) -> int:
        return len(set(self.lexeme_table().values()))

    def capacity(self, scene: Scene, style: str = "neutral") -> int:
        """Number of distinct surface forms the grammar can produce for a scene."""
        cap = len(TEMPLATE_PREFIXES)
        for o in self.objects_choices(scene):
            cap *= o
        if scene.relation is not None:
            cap *= len(RELATIONS[scene.relation])
        if style != "neutral":
            cap *= len(STYLE_PHRASES[style])
        return cap

    def objects_choices(self, scene: Scene):
        for o in scene.objects:
            yield len(SIZES[o.size]) * len(COLORS[o.color]) * len(SHAPES[o.shape])

    def _render_index(self, scene: Scene, style: str, index: int) -> str:
        """Decode a flat choice index (mixed radix) into a caption string."""
        radices = [len(TEMPLATE_PREFIXES)]
        for o in scene.objects:
            radices += [len(SIZES[o.size]), len(COLORS[o.color]), len(SHAPES[o.shape])]
        if scene.relation is not None:
            radices.append(len(RELATIONS[scene.relation]))
        if style != "neutral":
            radices.append(len(STYLE_PHRASES[style]))
        choices = []
        for r in radices:
            choices.append(index % r)
            index //= r
        it = iter(choices)
        parts = []
        prefix = TEMPLATE_PREFIXES[next(it)]
        if prefix:
            parts.append(prefix)
        rendered_objects = []
        for o in scene.objects:
            size = SIZES[o.size][next(it)]
            color = COLORS[o.color][next(it)]
            shape = SHAPES[o.shape][next(it)]
            rendered_objects.append(f"a {size} {color} {shape}")
        parts.append(rendered_objects[0])
        if scene.relation is not None:
            parts.append(RELATIONS[scene.relation][next(it)])
            parts.append(rendered_objects[1])
        if len(scene.objects) == 3:
            parts.append("and")
            parts.append(rendered_objects[2])
        if style != "neutral":
            parts.append(STYLE_PHRASES[style][next(it)])
        return " ".join(parts)

    def paraphrases(self, scene: Scene, n: int, rng: np.random.Generator,
                    style: str = "neutral") -> list[Caption]:
        """n mutually distinct paraphrases of one scene."""
        if style not in STYLES:
            raise WorldError(f"unknown style {style!r}")
        cap = self.capacity(scene, style)
        if n > cap:
            raise WorldError(
                f"requested {n} captions but scene {scene.scene_id} has template "
                f"capacity {cap}"
            )
        indices = rng.choice(cap, size=n, replace=False)
        out = []
        for idx in indices:
            text = self._render_index(scene, style, int(idx))
            out.append(Caption(text=text, tokens=self.vocab.tokenize(text),
                               scene_id=scene.scene_id, style=style))
        return out

    # -- parsing -----------------------------------------------------------------

    def parse(self, text: str):
        """Parse a caption into its asserted attributes.

        Returns (objects, relation, has_style_tail) or None when the text
        does not fit the grammar. Style tails are stripped before parsing
        so styled captions score on their factual content.
        """
        words = normalize(text).split()
        has_tail = False
        for tails in self._style_tails.values():
            for tail in tails:
                if len(words) > len(tail) and tuple(words[-len(tail):]) == tail:
                    words = words[: -len(tail)]
                    has_tail = True
                    break
            if has_tail:
                break
        for p in self._prefixes:
            if tuple(words[: len(p)]) == p:
                words = words[len(p):]
                break

        def parse_np(pos):
            if pos + 4 > len(words) or words[pos] != "a":
                return None
            triple = []
            for offset, want in ((1, "size"), (2, "color"), (3, "shape")):
                attr = self._attr.get(words[pos + offset])
                if attr is None or attr[0] != want:
                    return None
                triple.append(attr[1])
            return ObjectSpec(shape=triple[2], color=triple[1], size=triple[0]), pos + 4

        first = parse_np(0)
        if first is None:
            return None
        objects = [first[0]]
        pos = first[1]
        relation = None
        if pos < len(words):
            for surface, canon in self._rel_surfaces:
                if tuple(words[pos: pos + len(surface)]) == surface:
                    nxt = parse_np(pos + len(surface))
                    if nxt is None:
                        return None
                    relation = canon
                    objects.append(nxt[0])
                    pos = nxt[1]
                    break
            else:
                return None
        if pos < len(words):
            if words[pos] != "and":
                return None
            nxt = parse_np(pos + 1)
            if nxt is None:
                return None
            objects.append(nxt[0])
            pos = nxt[1]
        if pos != len(words):
            return None
        if (relation is not None) != (len(objects) >= 2):
            return None
        return tuple(objects), relation, has_tail


def attributes_of(text_or_caption, grammar: Grammar) -> Counter | None:
    """Attribute multiset a caption asserts; None when unparseable."""
    text = text_or_caption.text if isinstance(text_or_caption, Caption) else text_or_caption
    parsed = grammar.parse(text)
    if parsed is None:
        return None
    objects, relation, _ = parsed
    c = Counter()
    for o in objects:
        c[("size", o.size)] += 1
        c[("color", o.color)] += 1
        c[("shape", o.shape)] += 1
    if relation is not None:
        c[("relation", relation)] += 1
    return c


def contains_style_marker(text: str, style: str | None = None) -> bool:
    lex = style_marker_lexicon(style)
    return any(w in lex for w in normalize(text).split())


# -- corpus ---------------------------------------------------------------------


@dataclass
class Corpus:
    captions: list[Caption]
    split_of_scene: dict[int, str] = field(default_factory=dict)

    def by_scene(self) -> dict[int, list[Caption]]:
        groups: dict[int, list[Caption]] = {}
        for c in self.captions:
            groups.setdefault(c.scene_id, []).append(c)
        return groups

    def split(self, name: str) -> list[Caption]:
        return [c for c in self.captions if self.split_of_scene[c.scene_id] == name]

    def scene_ids(self, split: str | None = None) -> list[int]:
        ids = sorted(self.by_scene())
        if split is None:
            return ids
        return [i for i in ids if self.split_of_scene[i] == split]

    def validate(self):
        groups = self.by_scene()
        for sid, caps in groups.items():
            split = self.split_of_scene.get(sid)
            if split is None:
                raise WorldError(f"scene {sid} has no split tag")
            if split == "train" and len(caps) < 1:
                raise WorldError(f"training scene {sid} has no captions")
            if split in ("val", "test") and len(caps) < 5:
                raise WorldError(
                    f"evaluation scene {sid} carries {len(caps)} captions, needs >= 5"
                )


def sample_scene(scene_id: int, rng: np.random.Generator) -> Scene:
    counts = sorted(OBJECT_COUNT_WEIGHTS)
    probs = np.array([OBJECT_COUNT_WEIGHTS[c] for c in counts])
    n = int(rng.choice(counts, p=probs / probs.sum()))
    objects = tuple(
        ObjectSpec(
            shape=str(rng.choice(sorted(SHAPES))),
            color=str(rng.choice(sorted(COLORS))),
            size=str(rng.choice(sorted(SIZES))),
        )
        for _ in range(n)
    )
    relation = str(rng.choice(sorted(RELATIONS))) if n >= 2 else None
    return Scene(scene_id=scene_id, objects=objects, relation=relation)


def generate_corpus(seed: int, n_scenes: int, captions_per_scene: int,
                    style: str = "neutral",
                    split_counts: tuple[int, int, int] | None = None,
                    grammar: Grammar | None = None):
    """Deterministic (seed, config) -> (scenes, corpus).

    split_counts gives (train, val, test) scene counts and must sum to
    n_scenes; default puts roughly 70/15/15.
    """
    if n_scenes < 1 or captions_per_scene < 1:
        raise WorldError("n_scenes and captions_per_scene must be >= 1")
    grammar = grammar or Grammar()
    if split_counts is None:
        n_val = max(1, round(0.15 * n_scenes)) if n_scenes >= 3 else 0
        n_test = max(1, round(0.15 * n_scenes)) if n_scenes >= 3 else 0
        split_counts = (n_scenes - n_val - n_test, n_val, n_test)
    if sum(split_counts) != n_scenes:
        raise WorldError(f"split counts {split_counts} do not sum to {n_scenes}")
    rng = np.random.default_rng(seed)
    scenes = [sample_scene(i, rng) for i in range(n_scenes)]
    split_of_scene = {}
    bounds = np.cumsum(split_counts)
    for s in scenes:
        if s.scene_id < bounds[0]:
            split_of_scene[s.scene_id] = "train"
        elif s.scene_id < bounds[1]:
            split_of_scene[s.scene_id] = "val"
        else:
            split_of_scene[s.scene_id] = "test"
    captions = []
    for s in scenes:
        captions.extend(grammar.paraphrases(s, captions_per_scene, rng, style))
    corpus = Corpus(captions=captions, split_of_scene=split_of_scene)
    if captions_per_scene >= 5 or (split_counts[1] == 0 and split_counts[2] == 0):
        corpus.validate()
    return scenes, corpus


# -- persistence (line-delimited JSON, UTF-8, LF) --------------------------------


def save_corpus(corpus: Corpus, scenes: list[Scene], captions_path, scenes_path):
    with open(captions_path, "w", encoding="utf-8", newline="\n") as f:
        for c in corpus.captions:
            rec = {"scene_id": c.scene_id,
                   "split": corpus.split_of_scene[c.scene_id],
                   "style": c.style, "text": c.text}
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    with open(scenes_path, "w", encoding="utf-8", newline="\n") as f:
        for s in scenes:
            rec = {
                "scene_id": s.scene_id,
                "objects": [{"shape": o.shape, "color": o.color, "size": o.size}
                            for o in s.objects],
                "relation": s.relation,
                "split": corpus.split_of_scene[s.scene_id],
            }
            f.write(json.dumps(rec, sort_keys=True) + "\n")


def load_corpus(captions_path, scenes_path, grammar: Grammar | None = None):
    grammar = grammar or Grammar()
    scenes = []
    split_of_scene = {}
    with open(scenes_path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            scenes.append(Scene(
                scene_id=rec["scene_id"],
                objects=tuple(ObjectSpec(**o) for o in rec["objects"]),
                relation=rec["relation"],
            ))
            split_of_scene[rec["scene_id"]] = rec["split"]
    captions = []
    with open(captions_path, encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            captions.append(Caption(
                text=rec["text"],
                tokens=grammar.vocab.tokenize(rec["text"]),
                scene_id=rec["scene_id"],
                style=rec["style"],
            ))
            split_of_scene.setdefault(rec["scene_id"], rec.get("split"))
    return scenes, Corpus(captions=captions, split_of_scene=split_of_scene)
