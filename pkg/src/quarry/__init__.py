"""quarry: structured information extraction with ontology grounding.

Four specialized agents (extractor, alignment, judge, feedback) run over
section-segmented documents; extracted terms are grounded in an in-process
ontology concept store via hybrid lexical+vector search; runs can pause for
human review before finalization; a metrics layer scores the results.
"""

__version__ = "0.1.0"
