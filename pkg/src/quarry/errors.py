"""Exception hierarchy shared across the engine.

Every domain failure raised by quarry subclasses QuarryError so callers
(CLI, HTTP service) can map them to exit codes / status codes in one place.
"""

from __future__ import annotations


class QuarryError(Exception):
    """Base class for all domain errors."""


# --- configuration / task specs -------------------------------------------

class ConfigSyntaxError(QuarryError):
    """Task-spec configuration document is not parseable."""


class ConfigSchemaError(QuarryError):
    """Task-spec document violates the closed schema."""

    def __init__(self, paths: list[str]):
        self.paths = list(paths)
        super().__init__("invalid task spec: " + "; ".join(self.paths))


# --- ingestion --------------------------------------------------------------

class DocumentSyntaxError(QuarryError):
    """Section-document bytes are not well-formed."""


class DuplicateSectionId(QuarryError):
    def __init__(self, section_id: str):
        self.section_id = section_id
        super().__init__(f"duplicate section id: {section_id!r}")


# --- gateway ----------------------------------------------------------------

class TransportError(QuarryError):
    """Transient transport failure that survived the retry budget."""


class ProviderError(QuarryError):
    def __init__(self, status: int, body: str):
        self.status = status
        self.body = body
        super().__init__(f"provider error {status}: {body[:200]}")


class FixtureMissing(ProviderError):
    """Scripted provider has no completion for the request digest."""

    def __init__(self, digest: str, preview: str):
        self.digest = digest
        super().__init__(0, f"no fixture for digest {digest} (last message: {preview[:120]!r})")


class BudgetExceeded(QuarryError):
    def __init__(self, run_id: str, cap: float, cost: float):
        self.run_id = run_id
        self.cap = cap
        self.cost = cost
        super().__init__(f"run {run_id} cost {cost:.6f} exceeds cap {cap:.6f}")


class DimensionMismatch(QuarryError):
    """Embedding provider returned ragged vectors."""


# --- ontology store ---------------------------------------------------------

class DuplicateInBatch(QuarryError):
    def __init__(self, curie: str):
        self.curie = curie
        super().__init__(f"duplicate curie in batch: {curie}")


class EmbedderError(QuarryError):
    pass


class EmptyIndex(QuarryError):
    pass


class NotFound(QuarryError):
    def __init__(self, curie: str):
        self.curie = curie
        super().__init__(f"unknown curie: {curie}")


# --- agents / pipeline ------------------------------------------------------

class StageError(QuarryError):
    """An agent stage failed after exhausting its repair budget."""

    def __init__(self, role: str, reason: str):
        self.role = role
        self.reason = reason
        super().__init__(f"stage {role} failed: {reason}")


class SchemaViolation(QuarryError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("schema violation: " + "; ".join(self.errors))


class CandidateEscape(QuarryError):
    """Alignment model named a concept outside the candidate list."""

    def __init__(self, item_id: str, curie: str):
        self.item_id = item_id
        self.curie = curie
        super().__init__(f"item {item_id}: {curie} is not among the candidates")


class MissingProfile(QuarryError):
    def __init__(self, role: str):
        self.role = role
        super().__init__(f"no agent profile for role: {role}")


class EmptyDocument(QuarryError):
    pass


class WrongState(QuarryError):
    def __init__(self, state: str, wanted: str):
        self.state = state
        self.wanted = wanted
        super().__init__(f"run is in state {state}, expected {wanted}")


class UnknownFieldPath(QuarryError):
    def __init__(self, path: str):
        self.path = path
        super().__init__(f"correction addresses unknown field path: {path}")


class FeedbackTimeout(QuarryError):
    pass


class CorruptSnapshot(QuarryError):
    pass


class VersionMismatch(QuarryError):
    def __init__(self, found: int, supported: int):
        self.found = found
        self.supported = supported
        super().__init__(f"snapshot format version {found}, this build reads {supported}")


# --- memory -----------------------------------------------------------------

class UnknownRun(QuarryError):
    def __init__(self, run_id: str):
        self.run_id = run_id
        super().__init__(f"unknown run: {run_id}")


# --- review sessions --------------------------------------------------------

class SessionExists(QuarryError):
    def __init__(self, run_id: str):
        self.run_id = run_id
        super().__init__(f"run {run_id} already has an open session")


class SessionClosed(QuarryError):
    pass


class SessionOpen(QuarryError):
    pass


class UnknownItem(QuarryError):
    def __init__(self, item_id: str):
        self.item_id = item_id
        super().__init__(f"unknown review item: {item_id}")


class IncompleteReview(QuarryError):
    def __init__(self, unreviewed: int):
        self.unreviewed = unreviewed
        super().__init__(f"{unreviewed} item(s) unreviewed; review all or approve the remainder")


# --- eval -------------------------------------------------------------------

class FormatError(QuarryError):
    def __init__(self, line: int, reason: str):
        self.line = line
        self.reason = reason
        super().__init__(f"review file line {line}: {reason}")


class LengthMismatch(QuarryError):
    pass


class EmptyDistribution(QuarryError):
    pass


class EmptyInput(QuarryError):
    pass
