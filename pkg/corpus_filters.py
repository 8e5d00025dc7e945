"""
Language-tuned quality filters
Line-wise boilerplate removal, word-length and stop-word heuristics, code sample
filters, and per-language removal-rate reports
"""

import json
import logging
import os
import re
import string
from abc import ABC, abstractmethod
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import pandas as pd

from config import RULES_DIR

logger = logging.getLogger(__name__)

FALLBACK_LANGUAGE = "en"
_EDGE_PUNCTUATION = string.punctuation + "“”‘’«»„…–—¿¡"


class UnknownLanguageError(ValueError):
    """No rule set for the requested language"""


class RejectReason(Enum):
    WORD_LENGTH = "word-length"
    STOP_WORDS = "stop-words"
    LINE_FILTER = "line-filter"
    SCORE = "score"
    WORD_COUNT = "word-count"
    ALNUM_RATIO = "alnum-ratio"
    AVG_WORD_LENGTH = "avg-word-length"
    PROGRAMMING_LANGUAGE = "programming-language"
    NATURAL_LANGUAGE = "natural-language"


@dataclass(frozen=True)
class FilterVerdict:
    passed: bool
    reasons: Tuple[RejectReason, ...] = ()

    @property
    def reason(self) -> Optional[RejectReason]:
        return self.reasons[0] if self.reasons else None

    @classmethod
    def from_reasons(cls, reasons: Sequence[RejectReason]) -> "FilterVerdict":
        return cls(passed=not reasons, reasons=tuple(reasons))


@dataclass(frozen=True)
class LanguageRuleSet:
    """Per-language filter parameters; character-per-word bounds are inclusive"""
    language: str
    char_per_word_min: float
    char_per_word_max: float
    stop_words: Tuple[str, ...]
    min_stop_word_count: int = 2
    line_patterns: Tuple[str, ...] = ()
    min_remaining_words: int = 1
    aliases: Tuple[str, ...] = ()
    name: str = ""
    _compiled: Tuple = field(default=(), init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "stop_words", tuple(w.lower() for w in self.stop_words))
        object.__setattr__(self, "line_patterns", tuple(self.line_patterns))
        object.__setattr__(self, "aliases", tuple(self.aliases))
        if not self.char_per_word_min < self.char_per_word_max:
            raise ValueError(f"{self.language}: char_per_word_min must be below char_per_word_max")
        if not self.stop_words:
            raise ValueError(f"{self.language}: stop word list is empty")
        if self.min_stop_word_count < 1:
            raise ValueError(f"{self.language}: min_stop_word_count must be >= 1")
        try:
            compiled = tuple(re.compile(p, re.IGNORECASE) for p in self.line_patterns)
        except re.error as exc:
            raise ValueError(f"{self.language}: bad line pattern: {exc}") from exc
        object.__setattr__(self, "_compiled", compiled)

    @property
    def compiled_patterns(self) -> Tuple:
        return self._compiled

    @classmethod
    def from_dict(cls, data: Dict) -> "LanguageRuleSet":
        return cls(
            language=data["language"],
            char_per_word_min=data["char_per_word_min"],
            char_per_word_max=data["char_per_word_max"],
            stop_words=tuple(data["stop_words"]),
            min_stop_word_count=data.get("min_stop_word_count", 2),
            line_patterns=tuple(data.get("line_patterns", ())),
            min_remaining_words=data.get("min_remaining_words", 1),
            aliases=tuple(data.get("aliases", ())),
            name=data.get("name", ""),
        )

    @classmethod
    def from_file(cls, path: str) -> "LanguageRuleSet":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def load_rule_sets(rules_dir: str = RULES_DIR) -> Dict[str, LanguageRuleSet]:
    """Every *.json rule file in a directory, keyed by language code"""
    if not os.path.isdir(rules_dir):
        raise FileNotFoundError(f"rules directory not found: {rules_dir}")
    rule_sets = {}
    for name in sorted(os.listdir(rules_dir)):
        if name.endswith(".json"):
            rules = LanguageRuleSet.from_file(os.path.join(rules_dir, name))
            rule_sets[rules.language] = rules
    logger.debug("loaded %d language rule sets from %s", len(rule_sets), rules_dir)
    return rule_sets


def resolve_language(language: str, rule_sets: Mapping[str, LanguageRuleSet]) -> LanguageRuleSet:
    code = (language or "").lower()
    if code in rule_sets:
        return rule_sets[code]
    for rules in rule_sets.values():
        if code in rules.aliases:
            return rules
    raise UnknownLanguageError(f"no rule set for language '{language}'")


def _normalize_word(word: str) -> str:
    return word.strip(_EDGE_PUNCTUATION).lower().replace("'", "’")


def mean_word_length(text: str) -> Optional[float]:
    words = text.split()
    if not words:
        return None
    return sum(len(w) for w in words) / len(words)


def stop_word_count(text: str, rules: LanguageRuleSet) -> int:
    """Number of distinct stop words present"""
    stop_words = {w.replace("'", "’") for w in rules.stop_words}
    return len({_normalize_word(w) for w in text.split()} & stop_words)


def heuristic_filter(text: str, rules: Union[LanguageRuleSet, Mapping[str, LanguageRuleSet]],
                     language: Optional[str] = None) -> FilterVerdict:
    """
    Mean characters per word inside the language's range and at least
    min_stop_word_count distinct stop words

    Args:
        text: Document text
        rules: A rule set, or a mapping of rule sets to pick from by language
        language: Language code, required when rules is a mapping
    """
    if not isinstance(rules, LanguageRuleSet):
        rules = resolve_language(language, rules)
    reasons = []
    avg = mean_word_length(text)
    if avg is None or not rules.char_per_word_min <= avg <= rules.char_per_word_max:
        reasons.append(RejectReason.WORD_LENGTH)
    if stop_word_count(text, rules) < rules.min_stop_word_count:
        reasons.append(RejectReason.STOP_WORDS)
    return FilterVerdict.from_reasons(reasons)


@dataclass
class LineFilterResult:
    text: str
    lines_total: int
    lines_removed: int
    dropped: bool

    @property
    def removal_rate(self) -> float:
        return self.lines_removed / self.lines_total if self.lines_total else 0.0


def line_quality_filter(text: str, rules: LanguageRuleSet) -> LineFilterResult:
    """Remove boilerplate lines; drop the document when fewer than min_remaining_words words remain"""
    lines = text.split("\n")
    if not rules.compiled_patterns:
        return LineFilterResult(text, len(lines), 0, False)
    kept = []
    removed = 0
    for line in lines:
        stripped = line.strip()
        if stripped and any(p.search(stripped) for p in rules.compiled_patterns):
            removed += 1
        else:
            kept.append(line)
    filtered = "\n".join(kept)
    dropped = len(filtered.split()) < rules.min_remaining_words
    return LineFilterResult(filtered, len(lines), removed, dropped)


# Code samples

PROGRAMMING_LANGUAGES: Tuple[str, ...] = (
    "Assembly", "Batchfile", "C", "CMake", "C++", "C#", "CSS", "Dart", "Dockerfile", "Fortran",
    "Go", "Haskell", "HTML", "Java", "JavaScript", "Julia", "Kotlin", "Labview", "Lua", "Makefile",
    "Maple", "Markdown", "Mathematica", "Matlab", "Nix", "Objective-C++", "Octave", "Perl", "PHP",
    "Powershell", "Python", "R", "Ruby", "Rust", "SAS", "Scala", "Scilab", "Shell", "SQL", "Swift",
    "TeX", "TypeScript", "Visual Basic",
)

NATURAL_LANGUAGES: Tuple[str, ...] = ("en", "de", "es", "fr", "it", "nl", "pl", "pt", "cs", "ro", "sv")


@dataclass(frozen=True)
class CodeFilterConfig:
    programming_languages: Tuple[str, ...] = PROGRAMMING_LANGUAGES
    natural_languages: Tuple[str, ...] = NATURAL_LANGUAGES
    min_language_score: float = 0.15
    min_words: int = 50
    min_alnum_ratio: float = 0.1
    max_avg_word_length: float = 100

    def __post_init__(self):
        object.__setattr__(self, "programming_languages", tuple(self.programming_languages))
        object.__setattr__(self, "natural_languages", tuple(self.natural_languages))
        if not 0 <= self.min_language_score <= 1:
            raise ValueError("min_language_score must lie in [0, 1]")
        if self.min_words < 0 or self.max_avg_word_length <= 0 or not 0 <= self.min_alnum_ratio <= 1:
            raise ValueError("invalid code filter thresholds")

    def allows_programming_language(self, language: str) -> bool:
        return language.lower() in {p.lower() for p in self.programming_languages}


@dataclass
class CodeSample:
    text: str
    programming_language: str
    natural_language: Optional[str] = None
    language_score: Optional[float] = None
    id: str = ""


class LanguageScorer(ABC):
    """Natural-language identification for code samples"""

    @abstractmethod
    def score(self, text: str) -> Tuple[str, float]:
        """Return (language code, confidence in [0, 1])"""
        pass


class StopWordLanguageScorer(LanguageScorer):
    """Deterministic stand-in: share of words that are stop words of the best-matching language"""

    def __init__(self, rule_sets: Mapping[str, LanguageRuleSet]):
        self.rule_sets = dict(rule_sets)

    def score(self, text: str) -> Tuple[str, float]:
        words = [_normalize_word(w) for w in text.split()]
        words = [w for w in words if w]
        if not words:
            return FALLBACK_LANGUAGE, 0.0
        best_language, best_score = FALLBACK_LANGUAGE, 0.0
        for code in sorted(self.rule_sets):
            stop_words = {w.replace("'", "’") for w in self.rule_sets[code].stop_words}
            hits = sum(1 for w in words if w in stop_words)
            share = hits / len(words)
            if share > best_score:
                best_language, best_score = code, share
        return best_language, best_score


def annotate_code_sample(sample: CodeSample, scorer: LanguageScorer) -> CodeSample:
    language, score = scorer.score(sample.text)
    return CodeSample(sample.text, sample.programming_language, language, score, sample.id)


def code_filter(sample: CodeSample, cfg: CodeFilterConfig = CodeFilterConfig()) -> FilterVerdict:
    """All gates must pass: registry language, natural language of interest, score, word statistics"""
    if sample.language_score is None or sample.natural_language is None:
        raise ValueError(f"code sample {sample.id!r} has no language-score annotation")
    reasons = []
    if not cfg.allows_programming_language(sample.programming_language):
        reasons.append(RejectReason.PROGRAMMING_LANGUAGE)
    if sample.natural_language.lower() not in cfg.natural_languages:
        reasons.append(RejectReason.NATURAL_LANGUAGE)
    if not sample.language_score > cfg.min_language_score:
        reasons.append(RejectReason.SCORE)
    words = sample.text.split()
    avg = sum(len(w) for w in words) / len(words) if words else 0.0
    if avg > cfg.max_avg_word_length:
        reasons.append(RejectReason.AVG_WORD_LENGTH)
    alnum = sum(ch.isalnum() for ch in sample.text) / len(sample.text) if sample.text else 0.0
    if alnum < cfg.min_alnum_ratio:
        reasons.append(RejectReason.ALNUM_RATIO)
    if len(words) < cfg.min_words:
        reasons.append(RejectReason.WORD_COUNT)
    return FilterVerdict.from_reasons(reasons)


# Corpus runs

@dataclass
class TextDocument:
    id: str
    lang: str
    text: str

    @classmethod
    def from_record(cls, record: Dict) -> "TextDocument":
        return cls(id=str(record.get("id", "")), lang=str(record.get("lang", FALLBACK_LANGUAGE)), text=record["text"])

    def to_record(self) -> Dict:
        return {"id": self.id, "lang": self.lang, "text": self.text}


@dataclass
class DocumentOutcome:
    document: TextDocument
    language: str
    stage: Optional[str]  # None when kept, else "line-wise" or "heuristics"
    verdict: FilterVerdict

    @property
    def kept(self) -> bool:
        return self.stage is None


REPORT_COLUMNS = ["Language", "Documents", "Line-wise filter (%)", "Extra heuristics (%)", "Total removed (%)"]


class FilterReport:
    """Per-language removal rates, as percentages of input documents"""

    def __init__(self, outcomes: Sequence[DocumentOutcome]):
        self.outcomes = list(outcomes)

    def counts(self) -> Dict[str, Dict[str, int]]:
        table: Dict[str, Dict[str, int]] = {}
        for outcome in self.outcomes:
            row = table.setdefault(outcome.language, {"documents": 0, "line-wise": 0, "heuristics": 0})
            row["documents"] += 1
            if outcome.stage is not None:
                row[outcome.stage] += 1
        return dict(sorted(table.items()))

    def reason_counts(self) -> Counter:
        return Counter(r.value for o in self.outcomes for r in o.verdict.reasons)

    @staticmethod
    def _row(language: str, docs: int, line: int, heur: int) -> Dict:
        pct = (lambda n: 100.0 * n / docs) if docs else (lambda n: 0.0)
        return {
            "Language": language,
            "Documents": docs,
            "Line-wise filter (%)": pct(line),
            "Extra heuristics (%)": pct(heur),
            "Total removed (%)": pct(line + heur),
        }

    def rows(self) -> List[Dict]:
        counts = self.counts()
        rows = [self._row(lang, c["documents"], c["line-wise"], c["heuristics"]) for lang, c in counts.items()]
        rows.append(self._row(
            "all",
            sum(c["documents"] for c in counts.values()),
            sum(c["line-wise"] for c in counts.values()),
            sum(c["heuristics"] for c in counts.values()),
        ))
        return rows

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows(), columns=REPORT_COLUMNS)

    def to_csv(self, path: str, decimals: int = 2):
        self.to_dataframe().round(decimals).to_csv(path, index=False)

    def to_json(self) -> str:
        return json.dumps({"rows": self.rows(), "reasons": dict(self.reason_counts())}, indent=2)


def filter_document(document: TextDocument, rule_sets: Mapping[str, LanguageRuleSet]) -> Tuple[DocumentOutcome, TextDocument]:
    """Line-wise filter then heuristics; unknown languages take the English path"""
    try:
        rules = resolve_language(document.lang, rule_sets)
    except UnknownLanguageError:
        logger.debug("document %s: no rules for '%s', using %s", document.id, document.lang, FALLBACK_LANGUAGE)
        rules = resolve_language(FALLBACK_LANGUAGE, rule_sets)
    lines = line_quality_filter(document.text, rules)
    filtered = TextDocument(document.id, document.lang, lines.text)
    if lines.dropped:
        return DocumentOutcome(document, rules.language, "line-wise",
                               FilterVerdict.from_reasons([RejectReason.LINE_FILTER])), filtered
    verdict = heuristic_filter(lines.text, rules)
    return DocumentOutcome(document, rules.language, None if verdict.passed else "heuristics", verdict), filtered


def filter_corpus(documents: Iterable[TextDocument], rule_sets: Mapping[str, LanguageRuleSet],
                  workers: int = 1) -> Tuple[List[TextDocument], FilterReport]:
    """
    Filter a corpus; kept documents come back in input order for any worker count

    Returns:
        (kept documents with boilerplate lines removed, removal report)
    """
    documents = list(documents)
    if workers <= 1:
        results = [filter_document(d, rule_sets) for d in documents]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda d: filter_document(d, rule_sets), documents))
    kept = [filtered for outcome, filtered in results if outcome.kept]
    report = FilterReport([outcome for outcome, _ in results])
    logger.info("filtered %d documents: kept %d", len(documents), len(kept))
    return kept, report


def read_text_documents(path: str) -> List[TextDocument]:
    docs = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                docs.append(TextDocument.from_record(json.loads(line)))
    return docs
