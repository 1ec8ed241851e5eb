"""Toolchain for synthesizing music-grounded QA datasets and scoring model outputs."""

from .corpus import ClipRecord, LabelFrequencyTable, Source
from .errors import MusicQaError, ParseError
from .ontology import Ontology, OntologyNode, leaf_labels, parent_categories, parse_ontology
from .rulegen import FormatPlan, Method, QAFormat, QAItem, QuestionTemplate, generate_rule_dataset

__version__ = "0.1.0"

__all__ = [
    "ClipRecord",
    "FormatPlan",
    "LabelFrequencyTable",
    "Method",
    "MusicQaError",
    "Ontology",
    "OntologyNode",
    "ParseError",
    "QAFormat",
    "QAItem",
    "QuestionTemplate",
    "Source",
    "__version__",
    "generate_rule_dataset",
    "leaf_labels",
    "parent_categories",
    "parse_ontology",
]
