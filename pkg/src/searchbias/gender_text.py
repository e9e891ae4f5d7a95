"""Gendered-language handling: word lists, caption labeling, and neutral rewrites.

Tokenization is ASCII lowercasing with non-alphabetic delimiters, and matching
is exact token membership (no stemming), so possessives like "man's" match via
the stem token "man". Neutralization rewrites gendered tokens to neutral ones
("man" -> "person", "mother" -> "parent") and removes bare attributive
"male"/"female"; the result never contains a gendered token and re-running the
rewrite is a no-op.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum

from .core import DataError, GenderLabel, _parse_jsonl

_WORD_RE = re.compile(r"[A-Za-z]+")

_MASCULINE = frozenset(
    ["man", "men", "male", "boy", "gentleman", "father", "brother", "son", "husband", "boyfriend"]
)
_FEMININE = frozenset(
    [
        "woman",
        "women",
        "female",
        "girl",
        "lady",
        "mother",
        "mom",
        "sister",
        "daughter",
        "wife",
        "girlfriend",
    ]
)
_NEUTRAL = frozenset(
    ["person", "people", "human", "adult", "baby", "child", "kid", "children", "guy", "teenage", "crowd"]
)

# None means the token is dropped when used attributively ("a female surfer").
_REPLACEMENT = {
    "man": "person",
    "men": "people",
    "male": None,
    "boy": "child",
    "gentleman": "person",
    "father": "parent",
    "brother": "sibling",
    "son": "child",
    "husband": "spouse",
    "boyfriend": "partner",
    "woman": "person",
    "women": "people",
    "female": None,
    "girl": "child",
    "lady": "person",
    "mother": "parent",
    "mom": "parent",
    "sister": "sibling",
    "daughter": "child",
    "wife": "spouse",
    "girlfriend": "partner",
}

# Mixed-gender plural phrases collapse to one word before token rules run.
_PHRASE_RE = re.compile(r"\b(?:men\s+and\s+women|women\s+and\s+men)\b", re.IGNORECASE)

# If one of these follows "male"/"female", the use is not attributive, so the
# token is replaced with "person" instead of dropped.
_NON_ATTRIBUTIVE_NEXT = frozenset(
    [
        "is", "are", "was", "were", "be", "been", "being", "am",
        "and", "or", "nor", "but",
        "who", "whom", "whose", "which", "that",
        "in", "on", "at", "of", "with", "by", "to", "for", "from", "as", "not",
    ]
)

_ARTICLES = frozenset(["a", "an", "the"])
_VOWELS = "aeiou"


def tokenize(text):
    """Lowercased alphabetic tokens of `text`."""
    return [m.group().lower() for m in _WORD_RE.finditer(text)]


@dataclass(frozen=True)
class GenderLexicon:
    """Masculine/feminine/neutral word sets plus the neutral replacement map."""

    masculine: frozenset = _MASCULINE
    feminine: frozenset = _FEMININE
    neutral: frozenset = _NEUTRAL
    replacement: dict = field(default_factory=lambda: dict(_REPLACEMENT))

    def __post_init__(self):
        masc = frozenset(w.lower() for w in self.masculine)
        fem = frozenset(w.lower() for w in self.feminine)
        neu = frozenset(w.lower() for w in self.neutral)
        object.__setattr__(self, "masculine", masc)
        object.__setattr__(self, "feminine", fem)
        object.__setattr__(self, "neutral", neu)
        if masc & fem:
            raise DataError(f"words in both masculine and feminine lists: {sorted(masc & fem)}")
        gendered = masc | fem
        repl = {k.lower(): (v.lower() if isinstance(v, str) else v) for k, v in self.replacement.items()}
        object.__setattr__(self, "replacement", repl)
        for key, value in repl.items():
            if key not in gendered:
                raise DataError(f"replacement key {key!r} is not a gendered word")
            if value is not None and (not value or set(tokenize(value)) & gendered):
                raise DataError(f"replacement target {value!r} for {key!r} is itself gendered")

    @classmethod
    def default(cls):
        return cls()

    def to_json(self):
        return json.dumps(
            {
                "masculine": sorted(self.masculine),
                "feminine": sorted(self.feminine),
                "neutral": sorted(self.neutral),
                "replacement": {k: self.replacement[k] for k in sorted(self.replacement)},
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid lexicon JSON ({exc.msg})") from None
        for key in ("masculine", "feminine", "neutral", "replacement"):
            if key not in obj:
                raise DataError(f"lexicon JSON missing {key!r}")
        return cls(
            masculine=frozenset(obj["masculine"]),
            feminine=frozenset(obj["feminine"]),
            neutral=frozenset(obj["neutral"]),
            replacement=dict(obj["replacement"]),
        )

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json() + "\n")


class CaptionGender(Enum):
    HAS_MASC = "has_masc"
    HAS_FEM = "has_fem"
    HAS_BOTH = "has_both"
    NONE = "none"


def caption_gender(text, lexicon=None):
    """Which gendered word sets a caption hits (exact token match)."""
    lexicon = lexicon or GenderLexicon.default()
    tokens = set(tokenize(text))
    has_masc = bool(tokens & lexicon.masculine)
    has_fem = bool(tokens & lexicon.feminine)
    if has_masc and has_fem:
        return CaptionGender.HAS_BOTH
    if has_masc:
        return CaptionGender.HAS_MASC
    if has_fem:
        return CaptionGender.HAS_FEM
    return CaptionGender.NONE


def image_gender(caption_texts, lexicon=None):
    """Aggregate an image's captions into a single gender label.

    Male iff at least one caption mentions a masculine word and none mentions
    a feminine word; Female symmetrically; Neutral otherwise. Order of the
    captions does not matter.
    """
    caption_texts = list(caption_texts)
    if not caption_texts:
        raise DataError("image_gender needs at least one caption")
    lexicon = lexicon or GenderLexicon.default()
    any_masc = False
    any_fem = False
    for text in caption_texts:
        tokens = set(tokenize(text))
        any_masc = any_masc or bool(tokens & lexicon.masculine)
        any_fem = any_fem or bool(tokens & lexicon.feminine)
    if any_masc and not any_fem:
        return GenderLabel.MALE
    if any_fem and not any_masc:
        return GenderLabel.FEMALE
    return GenderLabel.NEUTRAL


def _match_case(template, word):
    if len(template) > 1 and template.isupper():
        return word.upper()
    if template[:1].isupper():
        return word[:1].upper() + word[1:]
    return word


def _phrase_sub(match):
    return _match_case(match.group(), "people")


def neutralize(text, lexicon=None):
    """Rewrite a caption into gender-neutral language.

    Phrase rules run first ("men and women" -> "people"), then token rules.
    A None replacement drops the token and one adjacent space when it is used
    attributively (next word follows directly and is not a function word);
    otherwise it degrades to "person". Sentence-initial capitalization is
    preserved. Output never contains a gendered token, so the rewrite is
    idempotent.
    """
    lexicon = lexicon or GenderLexicon.default()
    text = _PHRASE_RE.sub(_phrase_sub, text)
    gendered = lexicon.masculine | lexicon.feminine

    tokens = [(m.start(), m.end(), m.group()) for m in _WORD_RE.finditer(text)]
    out = []
    last_word_slot = None  # index in `out` of the most recent word piece
    capitalize_next = False
    prev_end = 0
    for i, (start, end, word) in enumerate(tokens):
        gap = text[prev_end:start]
        low = word.lower()
        if low not in gendered:
            out.append(gap)
            piece = word
            if capitalize_next:
                piece = piece[:1].upper() + piece[1:]
                capitalize_next = False
            last_word_slot = len(out)
            out.append(piece)
            prev_end = end
            continue

        target = lexicon.replacement.get(low, "person")
        if target is None:
            nxt = tokens[i + 1] if i + 1 < len(tokens) else None
            joined_by_space = nxt is not None and text[end : nxt[0]].strip() == "" and nxt[0] > end
            attributive = (
                joined_by_space and nxt[2].lower() not in _NON_ATTRIBUTIVE_NEXT
            )
            if attributive:
                out.append(gap)
                # Drop the token plus one adjacent space.
                if text[end : end + 1] == " ":
                    prev_end = end + 1
                elif out and out[-1].endswith(" "):
                    out[-1] = out[-1][:-1]
                    prev_end = end
                else:
                    prev_end = end
                if i == 0 and word[:1].isupper():
                    capitalize_next = True
                # Fix article agreement: "a" vs "an" against the word now adjacent.
                if last_word_slot is not None and out[last_word_slot].lower() in ("a", "an"):
                    article = out[last_word_slot]
                    wanted = "an" if nxt[2][:1].lower() in _VOWELS else "a"
                    out[last_word_slot] = _match_case(article, wanted)
                continue
            target = "person"

        out.append(gap)
        piece = _match_case(word, target)
        if capitalize_next:
            piece = piece[:1].upper() + piece[1:]
            capitalize_next = False
        last_word_slot = len(out)
        out.append(piece)
        prev_end = end
    out.append(text[prev_end:])
    return "".join(out)


@dataclass
class Caption:
    id: str
    image_id: str
    text: str

    def __post_init__(self):
        if not self.id or not isinstance(self.id, str):
            raise DataError(f"caption id must be a non-empty string, got {self.id!r}")
        if not self.image_id or not isinstance(self.image_id, str):
            raise DataError(f"caption {self.id!r}: image_id must be a non-empty string")
        if not self.text or not isinstance(self.text, str):
            raise DataError(f"caption {self.id!r}: text must be a non-empty string")


def load_captions(path):
    """Load {"id", "image_id", "text"} JSONL records in file order."""
    captions = []
    seen = set()
    for lineno, obj in _parse_jsonl(path):
        for key in ("id", "image_id", "text"):
            if key not in obj:
                raise DataError(f"{path}, line {lineno}: record needs {key!r}")
        if obj["id"] in seen:
            raise DataError(f"{path}, line {lineno}: duplicate caption id {obj['id']!r}")
        seen.add(obj["id"])
        try:
            captions.append(Caption(id=obj["id"], image_id=obj["image_id"], text=obj["text"]))
        except DataError as exc:
            raise DataError(f"{path}, line {lineno}: {exc}") from None
    return captions


def save_captions(captions, path):
    with open(path, "w", encoding="utf-8") as fh:
        for cap in captions:
            fh.write(json.dumps({"id": cap.id, "image_id": cap.image_id, "text": cap.text}) + "\n")
