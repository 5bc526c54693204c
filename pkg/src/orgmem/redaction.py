"""Four-tier pattern-based PII/secret detection with validated anonymization.

Tier 1 covers secrets (API keys, private keys, passwords), tier 2 financial
PII (cards with Luhn check, IBAN with mod-97), tier 3 identity PII (SSN with
structural check), tier 4 contact PII (emails, phones, IPv4). Three
strategies: redact (typed placeholder), mask (keep last 4), hash (stable
SHA-256 prefix token). The pipeline applies redaction both before extraction
and again over extracted texts.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Callable

STRATEGY_REDACT = "redact"
STRATEGY_MASK = "mask"
STRATEGY_HASH = "hash"

ALL_TIERS = frozenset({1, 2, 3, 4})


class MalformedNumber(ValueError):
    """Raised when a card candidate contains non-digit residue."""


@dataclass(frozen=True)
class RedactionConfig:
    enabled_tiers: frozenset[int] = ALL_TIERS
    strategy: str = STRATEGY_REDACT
    skip_emails: bool = False
    skip_phones: bool = False

    def __post_init__(self) -> None:
        bad = set(self.enabled_tiers) - ALL_TIERS
        if bad:
            raise ValueError(f"unknown redaction tiers {sorted(bad)}")
        if not self.enabled_tiers:
            raise ValueError("enabledTiers must be non-empty")
        if self.strategy not in (STRATEGY_REDACT, STRATEGY_MASK, STRATEGY_HASH):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class RedactionAudit:
    tier: int
    entity_type: str
    count: int
    warning: bool = False

    def to_json(self) -> dict:
        out = {"tier": self.tier, "entityType": self.entity_type, "count": self.count}
        if self.warning:
            out["warning"] = True
        return out


@dataclass(frozen=True)
class EntityPattern:
    tier: int
    entity_type: str
    pattern: re.Pattern
    validate: Callable[[str], bool] | None = None


def luhn_valid(digits: str) -> bool:
    """Standard mod-10 checksum over a separator-stripped digit string."""
    cleaned = re.sub(r"[ \-]", "", digits)
    if not cleaned.isdigit():
        raise MalformedNumber(f"non-digit residue in {digits!r}")
    total = 0
    for i, ch in enumerate(reversed(cleaned)):
        d = int(ch)
        if i % 2 == 1:
            d *= 2
            if d > 9:
                d -= 9
        total += d
    return total % 10 == 0


def _card_valid(match: str) -> bool:
    cleaned = re.sub(r"[ \-]", "", match)
    if not 13 <= len(cleaned) <= 19:
        return False
    return luhn_valid(cleaned)


def iban_valid(candidate: str) -> bool:
    """ISO 13616 mod-97 check."""
    s = candidate.replace(" ", "").upper()
    if not re.fullmatch(r"[A-Z]{2}\d{2}[A-Z0-9]{11,30}", s):
        return False
    rearranged = s[4:] + s[:4]
    numeric = "".join(str(int(c, 36)) for c in rearranged)
    return int(numeric) % 97 == 1


def ssn_valid(candidate: str) -> bool:
    """Structural check: area not 000/666/9xx, group not 00, serial not 0000."""
    m = re.fullmatch(r"(\d{3})-(\d{2})-(\d{4})", candidate)
    if not m:
        return False
    area, group, serial = m.groups()
    if area == "000" or area == "666" or area.startswith("9"):
        return False
    return group != "00" and serial != "0000"


def ipv4_valid(candidate: str) -> bool:
    parts = candidate.split(".")
    return len(parts) == 4 and all(p.isdigit() and int(p) <= 255 for p in parts)


ENTITY_TYPES = (
    "apiKey",
    "privateKey",
    "password",
    "creditCard",
    "iban",
    "ssn",
    "email",
    "phone",
    "ipAddress",
)

# Order within a tier matters only through the longest-match-first overlap
# rule; the bodies are table-driven so deployments can swap patterns in.
DEFAULT_PATTERNS: tuple[EntityPattern, ...] = (
    EntityPattern(
        1,
        "apiKey",
        re.compile(
            r"\b(?:sk|pk|rk|ghp|gho|ghu|glpat|xox[abps]|AKIA|AIza)[-_A-Za-z0-9]{16,}\b"
        ),
    ),
    EntityPattern(
        1,
        "privateKey",
        re.compile(
            r"-----BEGIN [A-Z ]*PRIVATE KEY-----(?:.|\n)*?-----END [A-Z ]*PRIVATE KEY-----"
            r"|-----BEGIN [A-Z ]*PRIVATE KEY-----"
        ),
    ),
    EntityPattern(
        1,
        "password",
        re.compile(r"(?i)\bpassword\s*[:=]\s*\S+"),
    ),
    EntityPattern(
        2,
        "creditCard",
        # Lazy repetition + word boundary stops the candidate at the end of a
        # digit run instead of greedily spanning into a neighbouring number.
        re.compile(r"\b\d(?:[ \-]?\d){12,18}?\b"),
        validate=_card_valid,
    ),
    EntityPattern(
        2,
        "iban",
        re.compile(r"\b[A-Z]{2}\d{2}[A-Z0-9]{11,30}\b"),
        validate=iban_valid,
    ),
    EntityPattern(
        3,
        "ssn",
        re.compile(r"\b\d{3}-\d{2}-\d{4}\b"),
        validate=ssn_valid,
    ),
    EntityPattern(
        4,
        "email",
        re.compile(r"\b[A-Za-z0-9._%+\-]+@[A-Za-z0-9.\-]+\.[A-Za-z]{2,}\b"),
    ),
    EntityPattern(
        4,
        "phone",
        # The country-code prefix is one atomic optional group so a bare
        # separator can never start the match and swallow preceding space.
        re.compile(r"(?<![\d.])(?:\+?\d{1,3}[ \-.])?\(?\d{3}\)?[ \-.]\d{3}[ \-.]\d{4}(?![\d.])"),
    ),
    EntityPattern(
        4,
        "ipAddress",
        re.compile(r"\b(?:\d{1,3}\.){3}\d{1,3}\b"),
        validate=ipv4_valid,
    ),
)

_VALIDATORS: dict[str, Callable[[str], bool]] = {
    "luhn": _card_valid,
    "iban": iban_valid,
    "ssn": ssn_valid,
    "ipv4": ipv4_valid,
}


def load_pattern_table(path) -> tuple[EntityPattern, ...]:
    """Read a pattern table: one `tier<TAB>entityType<TAB>pattern[<TAB>validator]` per line."""
    patterns = []
    for raw in open(path, encoding="utf-8"):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 3:
            raise ValueError(f"malformed pattern line: {line!r}")
        tier, entity_type, body = int(parts[0]), parts[1], parts[2]
        validator = _VALIDATORS.get(parts[3]) if len(parts) > 3 and parts[3] else None
        patterns.append(EntityPattern(tier, entity_type, re.compile(body), validator))
    return tuple(patterns)


def _placeholder(entity_type: str) -> str:
    snake = re.sub(r"([a-z0-9])([A-Z])", r"\1_\2", entity_type).upper()
    return f"[{snake}]"


def apply_strategy(match: str, entity_type: str, strategy: str) -> str:
    if strategy == STRATEGY_REDACT:
        return _placeholder(entity_type)
    if strategy == STRATEGY_MASK:
        if len(match) <= 4:
            return match
        return "*" * (len(match) - 4) + match[-4:]
    if strategy == STRATEGY_HASH:
        digest = hashlib.sha256(match.encode("utf-8")).hexdigest()[:12]
        snake = re.sub(r"([a-z0-9])([A-Z])", r"\1_\2", entity_type).upper()
        return f"[{snake}:{digest}]"
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class _Span:
    start: int
    end: int
    text: str
    pattern: EntityPattern


def redact(
    text: str,
    config: RedactionConfig | None = None,
    patterns: tuple[EntityPattern, ...] = DEFAULT_PATTERNS,
) -> tuple[str, list[RedactionAudit]]:
    """Replace every validated match from the enabled tiers.

    Overlapping matches resolve longest-first, left-to-right, and replacements
    are never re-scanned. A pattern whose regex machinery fails reports a
    count-0 warning audit for its tier and leaves the text untouched
    (redaction never fails open silently).
    """
    config = config or RedactionConfig()
    if not text:
        return text, []

    spans: list[_Span] = []
    warnings: list[RedactionAudit] = []
    for pat in patterns:
        if pat.tier not in config.enabled_tiers:
            continue
        if pat.entity_type == "email" and config.skip_emails:
            continue
        if pat.entity_type == "phone" and config.skip_phones:
            continue
        try:
            # Manual scan loop: a candidate that fails validation resumes one
            # character past its start, not past its end, so a valid match
            # nested inside a rejected span is still found.
            scan = 0
            while scan <= len(text):
                m = pat.pattern.search(text, scan)
                if m is None:
                    break
                if m.end() == m.start():
                    scan = m.start() + 1
                    continue
                ok = True
                if pat.validate is not None:
                    try:
                        ok = pat.validate(m.group(0))
                    except MalformedNumber:
                        ok = False
                if not ok:
                    scan = m.start() + 1
                    continue
                spans.append(_Span(m.start(), m.end(), m.group(0), pat))
                scan = m.end()
        except re.error:
            warnings.append(RedactionAudit(pat.tier, pat.entity_type, 0, warning=True))

    # Longest-match-first: prefer earlier start, then longer span.
    spans.sort(key=lambda s: (s.start, -(s.end - s.start)))
    chosen: list[_Span] = []
    cursor = 0
    for span in spans:
        if span.start >= cursor:
            chosen.append(span)
            cursor = span.end

    counts: dict[tuple[int, str], int] = {}
    out: list[str] = []
    pos = 0
    for span in chosen:
        out.append(text[pos : span.start])
        out.append(apply_strategy(span.text, span.pattern.entity_type, config.strategy))
        pos = span.end
        key = (span.pattern.tier, span.pattern.entity_type)
        counts[key] = counts.get(key, 0) + 1
    out.append(text[pos:])

    audits = [
        RedactionAudit(tier, entity_type, count)
        for (tier, entity_type), count in sorted(counts.items())
    ]
    audits.extend(warnings)
    return "".join(out), audits


@dataclass
class TwoPhaseResult:
    clean_content: str
    clean_extracted: list[str]
    audits: list[RedactionAudit] = field(default_factory=list)

    @property
    def redaction_applied(self) -> bool:
        return any(a.count > 0 for a in self.audits)


def two_phase_redact(
    content: str,
    extracted: list[str],
    config: RedactionConfig | None = None,
    patterns: tuple[EntityPattern, ...] = DEFAULT_PATTERNS,
) -> TwoPhaseResult:
    """Phase 1 scrubs the source before extraction; phase 2 re-scans every
    extracted text, catching values the model reconstructed from context.
    A fact that is entirely PII is rewritten to placeholders, never dropped.
    """
    config = config or RedactionConfig()
    clean_content, audits = redact(content, config, patterns)
    clean_extracted = []
    for item in extracted:
        cleaned, item_audits = redact(item, config, patterns)
        clean_extracted.append(cleaned)
        audits.extend(item_audits)
    return TwoPhaseResult(clean_content, clean_extracted, audits)
