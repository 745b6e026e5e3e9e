"""Section-segmented document ingestion.

Input documents arrive pre-parsed (PDF extraction is out of scope): a JSON
object with keys doc_id, title, origin and an ordered sections list. This
module normalizes that into SourceDocument values, cleans section text, and
splits documents into token-budgeted chunks without losing a single character.
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from dataclasses import dataclass, replace

from .errors import DocumentSyntaxError, DuplicateSectionId

logger = logging.getLogger(__name__)

_KNOWN_DOC_KEYS = {"doc_id", "title", "origin", "sections"}
_KNOWN_SECTION_KEYS = {"section_id", "heading", "body"}

# Heuristic sentence boundary: terminal punctuation, whitespace, then an
# uppercase letter or digit.
_SENT_BOUNDARY = re.compile(r"(?<=[.!?])\s+(?=[A-Z0-9])")
_WS_RUN = re.compile(r"\s+")
# Non-whitespace runs with their trailing whitespace attached, so that
# re-joining atoms reproduces the text exactly.
_ATOM = re.compile(r"\S+\s*|\s+")


@dataclass(frozen=True)
class Section:
    section_id: str
    heading: str
    body: str
    char_span: tuple[int, int] = (0, 0)


@dataclass(frozen=True)
class SourceDocument:
    doc_id: str
    title: str
    sections: tuple[Section, ...]
    origin: str = ""

    @property
    def text(self) -> str:
        """Concatenation of all section bodies (the span coordinate space)."""
        return "".join(s.body for s in self.sections)

    def section_ids(self) -> list[str]:
        return [s.section_id for s in self.sections]

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "title": self.title,
            "origin": self.origin,
            "sections": [
                {
                    "section_id": s.section_id,
                    "heading": s.heading,
                    "body": s.body,
                    "char_span": list(s.char_span),
                }
                for s in self.sections
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourceDocument":
        return cls(
            doc_id=d["doc_id"],
            title=d.get("title", ""),
            origin=d.get("origin", ""),
            sections=tuple(
                Section(
                    section_id=s["section_id"],
                    heading=s.get("heading", ""),
                    body=s.get("body", ""),
                    char_span=tuple(s.get("char_span", (0, 0))),
                )
                for s in d.get("sections", [])
            ),
        )


@dataclass(frozen=True)
class DocumentChunk:
    """A contiguous slice of the document text plus its source sections."""

    index: int
    text: str
    section_ids: tuple[str, ...]


def parse_structured_article(data: bytes | str) -> SourceDocument:
    """Parse the section-document JSON format into a SourceDocument.

    Unknown keys are ignored with a warning; duplicate section ids are an
    error. Char spans are computed over the concatenation of section bodies.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    if not data.strip():
        raise DocumentSyntaxError("empty document")
    try:
        raw = json.loads(data)
    except json.JSONDecodeError as e:
        raise DocumentSyntaxError(f"not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise DocumentSyntaxError("top level must be an object")

    for key in sorted(set(raw) - _KNOWN_DOC_KEYS):
        logger.warning("ignoring unknown document key %r", key)

    doc_id = raw.get("doc_id")
    if not doc_id or not isinstance(doc_id, str):
        raise DocumentSyntaxError("doc_id must be a non-empty string")
    sections_raw = raw.get("sections", [])
    if not isinstance(sections_raw, list):
        raise DocumentSyntaxError("sections must be a list")

    sections: list[Section] = []
    seen: set[str] = set()
    cursor = 0
    for i, sec in enumerate(sections_raw):
        if not isinstance(sec, dict):
            raise DocumentSyntaxError(f"sections[{i}] must be an object")
        for key in sorted(set(sec) - _KNOWN_SECTION_KEYS):
            logger.warning("ignoring unknown section key %r", key)
        sid = sec.get("section_id")
        if not sid or not isinstance(sid, str):
            raise DocumentSyntaxError(f"sections[{i}].section_id must be a non-empty string")
        if sid in seen:
            raise DuplicateSectionId(sid)
        seen.add(sid)
        body = sec.get("body", "")
        if not isinstance(body, str):
            raise DocumentSyntaxError(f"sections[{i}].body must be a string")
        sections.append(
            Section(
                section_id=sid,
                heading=str(sec.get("heading", "")),
                body=body,
                char_span=(cursor, cursor + len(body)),
            )
        )
        cursor += len(body)

    return SourceDocument(
        doc_id=doc_id,
        title=str(raw.get("title", "")),
        origin=str(raw.get("origin", "")),
        sections=tuple(sections),
    )


def normalize_whitespace(text: str) -> str:
    """Strip control characters and collapse whitespace runs to single spaces.

    Idempotent; everything that is neither whitespace nor a control character
    is preserved byte-for-byte.
    """
    # Drop non-whitespace control characters first so stranded controls
    # between spaces cannot leave a double space behind.
    cleaned = "".join(
        ch for ch in text if not (unicodedata.category(ch) == "Cc" and not ch.isspace())
    )
    return _WS_RUN.sub(" ", cleaned).strip()


def normalize_text(section: Section) -> Section:
    """Return the section with its body whitespace-normalized."""
    return replace(section, body=normalize_whitespace(section.body))


def normalize_document(doc: SourceDocument) -> SourceDocument:
    """Normalize every section body and recompute char spans."""
    sections: list[Section] = []
    cursor = 0
    for sec in doc.sections:
        body = normalize_whitespace(sec.body)
        sections.append(replace(sec, body=body, char_span=(cursor, cursor + len(body))))
        cursor += len(body)
    return replace(doc, sections=tuple(sections))


def split_sentences(text: str) -> list[str]:
    """Split into sentence pieces whose concatenation equals the input."""
    if not text:
        return []
    pieces: list[str] = []
    last = 0
    for m in _SENT_BOUNDARY.finditer(text):
        pieces.append(text[last : m.end()])
        last = m.end()
    pieces.append(text[last:])
    return [p for p in pieces if p]


def word_count(text: str) -> int:
    """Default counting contract: whitespace-delimited tokens."""
    return len(text.split())


def chunk_document(
    doc: SourceDocument,
    max_units: int,
    tokenizer=word_count,
) -> list[DocumentChunk]:
    """Split the document into chunks of at most max_units counted tokens.

    Sentences are kept whole unless a single sentence alone exceeds the
    budget, in which case it is hard-split. The concatenation of chunk texts
    equals the concatenation of section bodies exactly.
    """
    if max_units < 1:
        raise ValueError("max_units must be >= 1")

    # (piece, section_id) units whose concatenation reproduces doc.text.
    units: list[tuple[str, str]] = []
    for sec in doc.sections:
        for sentence in split_sentences(sec.body):
            if tokenizer(sentence) > max_units:
                units.extend((frag, sec.section_id) for frag in _hard_split(sentence, max_units, tokenizer))
            else:
                units.append((sentence, sec.section_id))

    chunks: list[DocumentChunk] = []
    buf: list[str] = []
    buf_sections: list[str] = []

    def flush() -> None:
        if buf:
            chunks.append(
                DocumentChunk(index=len(chunks), text="".join(buf), section_ids=tuple(dict.fromkeys(buf_sections)))
            )
            buf.clear()
            buf_sections.clear()

    for piece, sid in units:
        if buf and tokenizer("".join(buf) + piece) > max_units:
            flush()
        buf.append(piece)
        buf_sections.append(sid)
    flush()
    return chunks


def _hard_split(text: str, max_units: int, tokenizer) -> list[str]:
    """Greedily split an oversized sentence on atom (word) boundaries."""
    atoms = _ATOM.findall(text)
    frags: list[str] = []
    buf = ""
    for atom in atoms:
        if buf and tokenizer(buf + atom) > max_units:
            frags.append(buf)
            buf = ""
        buf += atom
    if buf:
        frags.append(buf)
    return frags
