"""Community-based authorization and quota control.

Decisions combine explicit policy rules with per-capability community
grants compiled into allow rules.  Any matching deny wins, then any
matching allow whose quota condition holds, otherwise the default is
deny.  The ledger tracks resource usage per (community, capability,
kind) and refuses charges that would cross a configured limit.

Policy documents are line oriented::

    # effect community predicate action [if counter<limit]
    allow students attr:type=compute create if activities<2
    deny * * migrate
    quota students * activities 4
"""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass, field
from typing import Optional

from .errors import PolicyParseError, QuotaExceeded

ACTION_ANY = "*"
COMMUNITY_ANY = "*"


@dataclass(frozen=True, slots=True)
class PrincipalId:
    name: str
    communities: frozenset[str] = frozenset()

    def token(self) -> str:
        return "%s:%s" % (self.name, ",".join(sorted(self.communities)))

    @classmethod
    def parse(cls, token: str) -> "PrincipalId":
        name, _, comms = token.partition(":")
        parts = frozenset(c.strip() for c in comms.split(",") if c.strip())
        return cls(name=name.strip(), communities=parts)


def sign_principal(secret: str, token: str) -> str:
    return hmac.new(secret.encode(), token.encode(), hashlib.sha256).hexdigest()


def verify_principal(secret: str, token: str, mac: str) -> bool:
    return hmac.compare_digest(sign_principal(secret, token), mac)


def _as_number(value) -> Optional[float]:
    if isinstance(value, (int, float)):
        return float(value)
    try:
        return float(value)
    except (TypeError, ValueError):
        return None


@dataclass(frozen=True, slots=True)
class Clause:
    """One attribute condition: equality or an inclusive numeric range."""

    attr: str
    op: str                 # "eq" | "range"
    value: str = ""
    lo: float = 0.0
    hi: float = 0.0

    def matches(self, attrs: dict) -> bool:
        if self.attr not in attrs:
            return False
        present = attrs[self.attr]
        if self.op == "eq":
            num = _as_number(present)
            wanted = _as_number(self.value)
            if num is not None and wanted is not None:
                return num == wanted
            return str(present) == self.value
        num = _as_number(present)
        return num is not None and self.lo <= num <= self.hi

    def key(self) -> str:
        if self.op == "eq":
            return "%s=%s" % (self.attr, self.value)
        return "%s in %s..%s" % (self.attr, _fmt_num(self.lo), _fmt_num(self.hi))


def _fmt_num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(x)


@dataclass(frozen=True, slots=True)
class AttrPredicate:
    """Conjunction of clauses; an empty conjunction matches everything."""

    clauses: tuple[Clause, ...] = ()

    def matches(self, attrs: dict) -> bool:
        return all(c.matches(attrs) for c in self.clauses)

    def key(self) -> str:
        return ",".join(c.key() for c in self.clauses) or "*"


def parse_clause(text: str) -> Clause:
    text = text.strip()
    if text.startswith("attr:"):
        text = text[len("attr:"):]
    if " in " in text:
        attr, _, rng = text.partition(" in ")
        lo_s, sep, hi_s = rng.partition("..")
        if not sep:
            raise PolicyParseError("range clause needs lo..hi: %r" % text)
        try:
            return Clause(attr=attr.strip(), op="range", lo=float(lo_s), hi=float(hi_s))
        except ValueError as exc:
            raise PolicyParseError("bad range bounds in %r" % text) from exc
    if "=" in text:
        attr, _, value = text.partition("=")
        value = value.strip()
        if ".." in value:
            lo_s, _, hi_s = value.partition("..")
            try:
                return Clause(attr=attr.strip(), op="range", lo=float(lo_s), hi=float(hi_s))
            except ValueError as exc:
                raise PolicyParseError("bad range bounds in %r" % text) from exc
        return Clause(attr=attr.strip(), op="eq", value=value)
    raise PolicyParseError("cannot parse clause %r" % text)


def parse_predicate(text: str) -> AttrPredicate:
    text = text.strip()
    if text == "*":
        return AttrPredicate()
    return AttrPredicate(tuple(parse_clause(part) for part in text.split(",") if part.strip()))


@dataclass(frozen=True, slots=True)
class PolicyRule:
    effect: str                       # "allow" | "deny"
    community: str                    # name or "*"
    predicate: AttrPredicate
    action: str                       # name or "*"
    condition: Optional[tuple[str, float]] = None  # (quota kind, limit)

    def matches(self, principal: PrincipalId, attrs: dict, action: str) -> bool:
        if self.community != COMMUNITY_ANY and self.community not in principal.communities:
            return False
        if self.action != ACTION_ANY and self.action != action:
            return False
        return self.predicate.matches(attrs)

    def line(self) -> str:
        parts = [self.effect, self.community, self.predicate.key(), self.action]
        if self.condition is not None:
            kind, limit = self.condition
            parts.append("if %s<%s" % (kind, _fmt_num(limit)))
        return " ".join(parts)


@dataclass(frozen=True, slots=True)
class QuotaLimit:
    community: str
    predicate: AttrPredicate
    kind: str
    limit: float


@dataclass(slots=True)
class Decision:
    allowed: bool
    reason: str
    community: str = ""

    def __bool__(self) -> bool:
        return self.allowed


def parse_rule_line(line: str, lineno: int = 0) -> PolicyRule | QuotaLimit:
    tokens = line.split()
    where = "line %d: " % lineno if lineno else ""
    if not tokens:
        raise PolicyParseError(where + "empty rule")
    if tokens[0] == "quota":
        if len(tokens) != 5:
            raise PolicyParseError(where + "quota needs: quota community predicate kind limit")
        try:
            limit = float(tokens[4])
        except ValueError as exc:
            raise PolicyParseError(where + "bad quota limit %r" % tokens[4]) from exc
        return QuotaLimit(
            community=tokens[1], predicate=parse_predicate(tokens[2]), kind=tokens[3], limit=limit
        )
    if tokens[0] not in ("allow", "deny"):
        raise PolicyParseError(where + "effect must be allow|deny|quota, got %r" % tokens[0])
    if len(tokens) < 4:
        raise PolicyParseError(where + "rule needs: effect community predicate action")
    condition = None
    if len(tokens) > 4:
        if tokens[4] != "if" or len(tokens) != 6:
            raise PolicyParseError(where + "trailing condition must be: if counter<limit")
        cond = tokens[5]
        kind, sep, limit_s = cond.partition("<")
        if not sep:
            raise PolicyParseError(where + "condition must be counter<limit, got %r" % cond)
        try:
            condition = (kind, float(limit_s))
        except ValueError as exc:
            raise PolicyParseError(where + "bad condition limit %r" % limit_s) from exc
    try:
        predicate = parse_predicate(tokens[2])
    except PolicyParseError as exc:
        raise PolicyParseError(where + str(exc)) from exc
    return PolicyRule(
        effect=tokens[0], community=tokens[1], predicate=predicate, action=tokens[3],
        condition=condition,
    )


def parse_document(text: str) -> tuple[list[PolicyRule], list[QuotaLimit]]:
    rules: list[PolicyRule] = []
    limits: list[QuotaLimit] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parsed = parse_rule_line(line, lineno)
        if isinstance(parsed, QuotaLimit):
            limits.append(parsed)
        else:
            rules.append(parsed)
    return rules, limits


class QuotaLedger:
    """Usage counters with declared limits; charges never exceed a limit."""

    def __init__(self):
        self.used: dict[tuple[str, str, str], float] = {}
        self.limits: list[QuotaLimit] = []
        self.clamp_warnings = 0

    def effective_limit(self, community: str, cap_attrs: dict, kind: str) -> Optional[float]:
        best: Optional[float] = None
        for lim in self.limits:
            if lim.kind != kind:
                continue
            if lim.community != COMMUNITY_ANY and lim.community != community:
                continue
            if not lim.predicate.matches(cap_attrs):
                continue
            best = lim.limit if best is None else min(best, lim.limit)
        return best

    def get_used(self, community: str, cap_key: str, kind: str) -> float:
        return self.used.get((community, cap_key, kind), 0.0)

    def charge(self, community: str, cap_key: str, cap_attrs: dict, kind: str, amount: float) -> None:
        if amount < 0:
            raise ValueError("charge amount must be >= 0")
        limit = self.effective_limit(community, cap_attrs, kind)
        key = (community, cap_key, kind)
        current = self.used.get(key, 0.0)
        if limit is not None and current + amount > limit:
            raise QuotaExceeded(
                "%s/%s %s: %s + %s > %s" % (community, kind, cap_key[:8], _fmt_num(current), _fmt_num(amount), _fmt_num(limit))
            )
        self.used[key] = current + amount

    def refund(self, community: str, cap_key: str, kind: str, amount: float) -> None:
        if amount < 0:
            raise ValueError("refund amount must be >= 0")
        key = (community, cap_key, kind)
        current = self.used.get(key, 0.0)
        if amount > current:
            self.clamp_warnings += 1
            amount = current
        self.used[key] = current - amount


class SecurityEngine:
    """The evaluation point every entity operation passes through."""

    def __init__(self):
        self.rules: list[PolicyRule] = []
        self.ledger = QuotaLedger()
        self.check_count = 0
        self.dispatch_checks = 0

    # -- policy management ----------------------------------------------------

    def load_document(self, text: str) -> None:
        rules, limits = parse_document(text)  # parse first; active set untouched on error
        self.rules = rules
        self.ledger.limits = limits

    def add_line(self, line: str) -> None:
        parsed = parse_rule_line(line.strip())
        if isinstance(parsed, QuotaLimit):
            self.ledger.limits.append(parsed)
        else:
            self.rules.append(parsed)

    def dump_lines(self) -> list[str]:
        out = [r.line() for r in self.rules]
        for lim in self.ledger.limits:
            out.append("quota %s %s %s %s" % (lim.community, lim.predicate.key(), lim.kind, _fmt_num(lim.limit)))
        return out

    # -- decision -------------------------------------------------------------

    def check(self, principal: PrincipalId, capability, action: str) -> Decision:
        """Deny-overrides decision for one principal/capability/action triple.

        ``capability`` needs ``attributes``, ``grants`` and a stable
        ``quota_key()``; grants compile to allow rules scoped to it.
        """
        self.check_count += 1
        attrs = capability.attributes
        matched_allow: Optional[PolicyRule] = None
        for rule in self.rules:
            if not rule.matches(principal, attrs, action):
                continue
            if rule.effect == "deny":
                return Decision(False, "explicit-deny")
            if matched_allow is None and self._condition_holds(rule, principal, capability):
                matched_allow = rule
        for grant in capability.grants:
            if grant.community in principal.communities and action in grant.rights:
                if matched_allow is None:
                    matched_allow = PolicyRule(
                        effect="allow", community=grant.community,
                        predicate=AttrPredicate(), action=action,
                    )
        if matched_allow is not None:
            community = matched_allow.community
            if community == COMMUNITY_ANY:
                community = min(principal.communities) if principal.communities else principal.name
            return Decision(True, "allow", community=community)
        return Decision(False, "default-deny")

    def _condition_holds(self, rule: PolicyRule, principal: PrincipalId, capability) -> bool:
        if rule.condition is None:
            return True
        kind, limit = rule.condition
        community = rule.community
        if community == COMMUNITY_ANY:
            community = min(principal.communities) if principal.communities else principal.name
        return self.ledger.get_used(community, capability.quota_key(), kind) < limit

    def gate_dispatch(self, granted_actions: frozenset[str] | set[str]) -> bool:
        """Sandbox gate applied to every message entering an activity core."""
        self.dispatch_checks += 1
        return "invoke" in granted_actions

    # -- quota ------------------------------------------------------------------

    def charge(self, community: str, capability, kind: str, amount: float = 1.0) -> None:
        self.ledger.charge(community, capability.quota_key(), capability.attributes, kind, amount)

    def refund(self, community: str, capability, kind: str, amount: float = 1.0) -> None:
        self.ledger.refund(community, capability.quota_key(), kind, amount)
