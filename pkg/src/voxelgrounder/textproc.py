"""Word-level tokenizer with byte fallback and the special-token vocabulary.

Tokenization splits on whitespace, words, and single punctuation marks; the
segmentation trigger ``[SEG]`` and the visual placeholder ``<image>`` survive
as single tokens. Words never seen at vocabulary-build time fall back to
UTF-8 byte tokens, so encoding never fails. Detokenization re-joins with
standard spacing rules (no space before closing punctuation, none after an
opening bracket), which is an exact inverse for the template corpus.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

SEG_TOKEN = "[SEG]"
IMAGE_TOKEN = "<image>"
PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"

_TOKEN_RE = re.compile(r"\[SEG\]|<image>|[A-Za-z0-9]+|[^\sA-Za-z0-9]")
_BYTE_RE = re.compile(r"<0x([0-9A-Fa-f]{2})>")

_NO_SPACE_BEFORE = set(".,:;?!%)]}'")
_NO_SPACE_AFTER = set("([{")


def word_tokenize(text: str) -> list[str]:
    """Surface segmentation shared by the tokenizer and the text metrics."""
    return _TOKEN_RE.findall(text)


def detokenize_words(tokens: list[str]) -> str:
    out: list[str] = []
    prev = ""
    for tok in tokens:
        if not out:
            out.append(tok)
        elif len(tok) == 1 and tok in _NO_SPACE_BEFORE:
            out.append(tok)
        elif len(prev) == 1 and prev in _NO_SPACE_AFTER:
            out.append(tok)
        else:
            out.append(" " + tok)
        prev = tok
    return "".join(out)


@dataclass
class Vocabulary:
    """Token list with fixed special-token ids.

    Layout: ``<pad> <bos> <eos> [SEG] <image>``, then 256 byte-fallback
    tokens, then the sorted corpus tokens.
    """

    tokens: list[str]

    def __post_init__(self):
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        if len(self._ids) != len(self.tokens):
            raise ValueError("vocabulary contains duplicate tokens")
        for required in (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, SEG_TOKEN, IMAGE_TOKEN):
            if required not in self._ids:
                raise ValueError(f"vocabulary missing special token {required!r}")

    # -- construction --------------------------------------------------

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        seen: set[str] = set()
        for text in texts:
            seen.update(word_tokenize(text))
        seen.discard(SEG_TOKEN)
        seen.discard(IMAGE_TOKEN)
        specials = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, SEG_TOKEN, IMAGE_TOKEN]
        byte_tokens = [f"<0x{b:02X}>" for b in range(256)]
        return cls(tokens=specials + byte_tokens + sorted(seen))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls(tokens=json.loads(Path(path).read_text()))

    def save(self, path: str | Path):
        Path(path).write_text(json.dumps(self.tokens, indent=0))

    # -- lookups -------------------------------------------------------

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._ids[token]

    @property
    def pad_id(self) -> int:
        return self._ids[PAD_TOKEN]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS_TOKEN]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS_TOKEN]

    @property
    def seg_id(self) -> int:
        return self._ids[SEG_TOKEN]

    @property
    def image_id(self) -> int:
        return self._ids[IMAGE_TOKEN]

    # -- encode / decode ----------------------------------------------

    def encode(self, text: str) -> list[int]:
        """Text to ids; out-of-vocabulary words become byte tokens.

        Adjacent byte runs merge into one word at decode time, so a space
        byte is emitted whenever two fallback tokens were separated in the
        source text (mid-word splits of non-ASCII words stay fused).
        """
        ids: list[int] = []
        prev_end = -1
        prev_fallback = False
        for m in _TOKEN_RE.finditer(text):
            tok = m.group(0)
            if tok in self._ids:
                ids.append(self._ids[tok])
                prev_fallback = False
            else:
                if prev_fallback and m.start() > prev_end:
                    ids.append(self._ids["<0x20>"])
                for b in tok.encode("utf-8"):
                    ids.append(self._ids[f"<0x{b:02X}>"])
                prev_fallback = True
            prev_end = m.end()
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        """Ids back to text. Control tokens are dropped; byte runs merge."""
        words: list[str] = []
        byte_run: list[int] = []

        def flush():
            if byte_run:
                words.append(bytes(byte_run).decode("utf-8", errors="replace"))
                byte_run.clear()

        for i in ids:
            tok = self.tokens[int(i)]
            if tok in (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN):
                flush()
                continue
            m = _BYTE_RE.fullmatch(tok)
            if m:
                byte_run.append(int(m.group(1), 16))
                continue
            flush()
            words.append(tok)
        flush()
        return detokenize_words(words)
