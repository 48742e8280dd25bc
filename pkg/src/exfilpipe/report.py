"""Breach-notification drafting for the Garante Privacy form, sections F/G/H.

Merges static analysis, the classifier verdict, and dynamic behaviors into an
evidence bundle, then produces a schema-valid notification draft. Drafting
runs in two phases against an external language-model service (phase 1 from
logs, phase 2 enriched with capture evidence); every service response is
validated client-side and retried with the violation list, and any transport
failure or retry exhaustion falls back to a deterministic template that only
restates recorded evidence.

Drafts are plain JSON-able documents: section_f / section_g / section_h
objects, a provenance map (field path -> evidence refs), and a degraded flag
that is true exactly when the fallback produced the content.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import os
import urllib.error
import urllib.request
from dataclasses import dataclass

from .binfmt import EnvProfile
from .dynamics import BehaviorSummary
from .errors import PipelineError
from .graphs import GraphStats


class MissingVerdict(PipelineError):
    """Evidence assembly requires a classifier verdict."""


class ServiceUnavailable(PipelineError):
    """The language-model service could not be reached."""


PHASE_LOGS_ONLY = "logs_only"
PHASE_WITH_PCAP = "with_pcap"

DATA_CATEGORIES = ("credentials", "network_config", "device_identifiers", "files", "unknown")
EXFIL_CHANNELS = ("dns", "tcp", "other")
RISK_LEVELS = ("low", "medium", "high")

# Narrative fields must carry provenance whenever they are populated.
NARRATIVE_FIELDS = (
    "section_f.breach_nature",
    "section_f.probable_cause",
    "section_f.systems_affected",
    "section_f.discovery_method",
    "section_g.data_categories",
    "section_g.exfil_channels",
    "section_g.destinations",
    "section_h.measures_taken",
    "section_h.measures_planned",
)

GARANTE_SCHEMA = {
    "type": "object",
    "required": ["section_f", "section_g", "section_h", "provenance", "degraded"],
    "properties": {
        "section_f": {
            "type": "object",
            "required": ["breach_nature", "probable_cause", "timeline",
                         "systems_affected", "discovery_method"],
            "properties": {
                "breach_nature": {"type": "string"},
                "probable_cause": {"type": "string"},
                "timeline": {
                    "type": "object",
                    "required": ["detected"],
                    "properties": {
                        "start": {"type": ["number", "null"]},
                        "detected": {"type": "number"},
                    },
                },
                "systems_affected": {"type": "array", "items": {"type": "string"}},
                "discovery_method": {"type": "string"},
            },
        },
        "section_g": {
            "type": "object",
            "required": ["data_categories", "special_categories_suspected",
                         "est_subjects", "est_records", "exfil_channels",
                         "destinations"],
            "properties": {
                "data_categories": {"type": "array", "items": {"enum": list(DATA_CATEGORIES)}},
                "special_categories_suspected": {"type": "boolean"},
                "est_subjects": {"type": ["integer", "null"]},
                "est_records": {"type": ["integer", "null"]},
                "exfil_channels": {"type": "array", "items": {"enum": list(EXFIL_CHANNELS)}},
                "destinations": {"type": "array", "items": {"type": "string"}},
            },
        },
        "section_h": {
            "type": "object",
            "required": ["measures_taken", "measures_planned", "residual_risk"],
            "properties": {
                "measures_taken": {"type": "array", "items": {"type": "string"}},
                "measures_planned": {"type": "array", "items": {"type": "string"}},
                "residual_risk": {"enum": list(RISK_LEVELS)},
            },
        },
        "provenance": {"type": "object"},
        "degraded": {"type": "boolean"},
    },
}

SYSTEM_INSTRUCTION = (
    "You are drafting a personal-data breach notification for the Italian "
    "supervisory authority (Garante per la protezione dei dati personali), "
    "sections F, G and H of the official form. Use only the evidence supplied "
    "in this request. Respond with exactly one JSON document conforming to "
    "the provided schema. Record, for every field you populate, a provenance "
    "entry citing the artifact and locator the content came from. Never "
    "invent endpoints, file paths, or counts."
)


# ---------------------------------------------------------------------------
# evidence bundle

@dataclass(frozen=True)
class Verdict:
    label: int
    score: float


@dataclass(frozen=True)
class ArtifactFile:
    role: str
    path: str
    size: int


@dataclass(frozen=True)
class StaticSummary:
    env: EnvProfile | None = None
    fcg_stats: GraphStats | None = None
    icfg_stats: GraphStats | None = None


_BEHAVIOR_CATEGORIES = ("masquerade_renames", "dns_queries", "scan_findings",
                        "outbound_tcp", "exfil_candidates", "credential_accesses")


@dataclass(frozen=True)
class EvidenceBundle:
    sample_id: str
    static: StaticSummary
    verdict: Verdict
    behaviors: BehaviorSummary
    inventory: tuple[ArtifactFile, ...]
    phase: str

    def behavior_kinds(self) -> tuple[str, ...]:
        return tuple(name for name in _BEHAVIOR_CATEGORIES
                     if getattr(self.behaviors, name))


def _has_capture_evidence(behaviors: BehaviorSummary, inventory) -> bool:
    if any(f.role == "packet_capture" for f in inventory):
        return True
    return bool(behaviors.dns_queries or behaviors.scan_findings
                or behaviors.outbound_tcp or behaviors.exfil_candidates)


def assemble_evidence(static: StaticSummary, verdict: Verdict | None,
                      behaviors: BehaviorSummary, inventory, phase: str,
                      sample_id: str = "") -> EvidenceBundle:
    if verdict is None:
        raise MissingVerdict("a classifier verdict is required to assemble evidence")
    if phase not in (PHASE_LOGS_ONLY, PHASE_WITH_PCAP):
        raise ValueError(f"unknown phase {phase!r}")
    inv = tuple(sorted(inventory, key=lambda f: (f.role, f.path)))
    if phase == PHASE_WITH_PCAP and not _has_capture_evidence(behaviors, inv):
        raise ValueError("phase with_pcap requires capture-derived evidence")
    return EvidenceBundle(sample_id=sample_id, static=static, verdict=verdict,
                          behaviors=behaviors, inventory=inv, phase=phase)


# ---------------------------------------------------------------------------
# draft document and validation

@dataclass(frozen=True)
class Violation:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


@dataclass(frozen=True)
class NotificationDraft:
    section_f: dict
    section_g: dict
    section_h: dict
    provenance: dict
    degraded: bool

    def to_document(self) -> dict:
        return copy.deepcopy({
            "section_f": self.section_f,
            "section_g": self.section_g,
            "section_h": self.section_h,
            "provenance": self.provenance,
            "degraded": self.degraded,
        })

    @classmethod
    def from_document(cls, doc: dict, degraded: bool | None = None) -> "NotificationDraft":
        doc = copy.deepcopy(doc)
        return cls(section_f=doc["section_f"], section_g=doc["section_g"],
                   section_h=doc["section_h"], provenance=doc["provenance"],
                   degraded=doc["degraded"] if degraded is None else degraded)


def _is_number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_str(sec: dict, key: str, prefix: str, out: list[Violation]) -> None:
    path = f"{prefix}.{key}"
    if key not in sec:
        out.append(Violation(path, "missing"))
    elif not isinstance(sec[key], str):
        out.append(Violation(path, "expected string"))


def _check_str_list(sec: dict, key: str, prefix: str, out: list[Violation]) -> None:
    path = f"{prefix}.{key}"
    if key not in sec:
        out.append(Violation(path, "missing"))
        return
    if not isinstance(sec[key], list):
        out.append(Violation(path, "expected array"))
        return
    for i, item in enumerate(sec[key]):
        if not isinstance(item, str):
            out.append(Violation(f"{path}[{i}]", "expected string"))


def _check_enum_list(sec: dict, key: str, prefix: str, allowed, out: list[Violation]) -> None:
    path = f"{prefix}.{key}"
    if key not in sec:
        out.append(Violation(path, "missing"))
        return
    if not isinstance(sec[key], list):
        out.append(Violation(path, "expected array"))
        return
    for i, item in enumerate(sec[key]):
        if item not in allowed:
            out.append(Violation(f"{path}[{i}]",
                                 f"{item!r} is not one of {', '.join(allowed)}"))


def _check_unknown_keys(sec: dict, prefix: str, allowed, out: list[Violation]) -> None:
    for key in sec:
        if key not in allowed:
            out.append(Violation(f"{prefix}.{key}", "unexpected field"))


def validate_draft(doc) -> list[Violation]:
    """Check a draft document against the section F/G/H schema.

    Returns violation records (path plus message); an empty list means valid.
    Provenance coverage is one-directional: every populated narrative field
    needs at least one evidence ref, extra provenance keys are allowed.
    """
    out: list[Violation] = []
    if not isinstance(doc, dict):
        return [Violation("$", "draft is not an object")]
    _check_unknown_keys(doc, "$", GARANTE_SCHEMA["required"], out)

    sec_f = doc.get("section_f")
    if sec_f is None:
        out.append(Violation("section_f", "missing"))
    elif not isinstance(sec_f, dict):
        out.append(Violation("section_f", "expected object"))
    else:
        _check_unknown_keys(sec_f, "section_f",
                            GARANTE_SCHEMA["properties"]["section_f"]["required"], out)
        _check_str(sec_f, "breach_nature", "section_f", out)
        _check_str(sec_f, "probable_cause", "section_f", out)
        _check_str_list(sec_f, "systems_affected", "section_f", out)
        _check_str(sec_f, "discovery_method", "section_f", out)
        timeline = sec_f.get("timeline")
        if timeline is None:
            out.append(Violation("section_f.timeline", "missing"))
        elif not isinstance(timeline, dict):
            out.append(Violation("section_f.timeline", "expected object"))
        else:
            _check_unknown_keys(timeline, "section_f.timeline", ("start", "detected"), out)
            if "detected" not in timeline:
                out.append(Violation("section_f.timeline.detected", "missing"))
            elif not _is_number(timeline["detected"]):
                out.append(Violation("section_f.timeline.detected", "expected number"))
            if timeline.get("start") is not None and not _is_number(timeline["start"]):
                out.append(Violation("section_f.timeline.start", "expected number or null"))

    sec_g = doc.get("section_g")
    if sec_g is None:
        out.append(Violation("section_g", "missing"))
    elif not isinstance(sec_g, dict):
        out.append(Violation("section_g", "expected object"))
    else:
        _check_unknown_keys(sec_g, "section_g",
                            GARANTE_SCHEMA["properties"]["section_g"]["required"], out)
        _check_enum_list(sec_g, "data_categories", "section_g", DATA_CATEGORIES, out)
        if "special_categories_suspected" not in sec_g:
            out.append(Violation("section_g.special_categories_suspected", "missing"))
        elif not isinstance(sec_g["special_categories_suspected"], bool):
            out.append(Violation("section_g.special_categories_suspected", "expected boolean"))
        for key in ("est_subjects", "est_records"):
            if key not in sec_g:
                out.append(Violation(f"section_g.{key}", "missing"))
            else:
                v = sec_g[key]
                if v is not None and (isinstance(v, bool) or not isinstance(v, int) or v < 0):
                    out.append(Violation(f"section_g.{key}",
                                         "expected non-negative integer or null"))
        _check_enum_list(sec_g, "exfil_channels", "section_g", EXFIL_CHANNELS, out)
        _check_str_list(sec_g, "destinations", "section_g", out)

    sec_h = doc.get("section_h")
    if sec_h is None:
        out.append(Violation("section_h", "missing"))
    elif not isinstance(sec_h, dict):
        out.append(Violation("section_h", "expected object"))
    else:
        _check_unknown_keys(sec_h, "section_h",
                            GARANTE_SCHEMA["properties"]["section_h"]["required"], out)
        _check_str_list(sec_h, "measures_taken", "section_h", out)
        _check_str_list(sec_h, "measures_planned", "section_h", out)
        risk = sec_h.get("residual_risk")
        if risk is None:
            out.append(Violation("section_h.residual_risk", "missing"))
        elif risk not in RISK_LEVELS:
            out.append(Violation("section_h.residual_risk",
                                 f"{risk!r} is not one of {', '.join(RISK_LEVELS)}"))

    prov = doc.get("provenance")
    if prov is None:
        out.append(Violation("provenance", "missing"))
    elif not isinstance(prov, dict):
        out.append(Violation("provenance", "expected object"))
    else:
        for key, refs in prov.items():
            if not isinstance(refs, list) or not refs:
                out.append(Violation(f"provenance.{key}", "expected non-empty array of refs"))
                continue
            for i, ref in enumerate(refs):
                if (not isinstance(ref, dict)
                        or not isinstance(ref.get("artifact"), str)
                        or not isinstance(ref.get("locator"), str)
                        or not ref["artifact"] or not ref["locator"]):
                    out.append(Violation(f"provenance.{key}[{i}]",
                                         "ref needs artifact and locator strings"))
        for path in NARRATIVE_FIELDS:
            sec_name, field_name = path.split(".", 1)
            sec = doc.get(sec_name)
            if not isinstance(sec, dict):
                continue
            value = sec.get(field_name)
            populated = bool(value) if isinstance(value, (str, list)) else False
            if populated and not prov.get(path):
                out.append(Violation(f"provenance.{path}",
                                     "populated field lacks evidence refs"))

    if "degraded" not in doc:
        out.append(Violation("degraded", "missing"))
    elif not isinstance(doc["degraded"], bool):
        out.append(Violation("degraded", "expected boolean"))

    return out


# ---------------------------------------------------------------------------
# service transport

@dataclass(frozen=True)
class LlmServiceConfig:
    endpoint: str
    model: str = "garante-drafter"
    token_env: str = "EXFILPIPE_SERVICE_TOKEN"
    timeout: float = 30.0
    max_retries: int = 3  # total attempts per phase

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")


class HttpLlmService:
    """POSTs structured request documents; bearer token read from the environment."""

    def __init__(self, config: LlmServiceConfig):
        self.config = config

    def generate(self, request: dict):
        body = json.dumps(request).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.token_env, "")
        if token:
            headers["Authorization"] = "Bearer " + token
        req = urllib.request.Request(self.config.endpoint, data=body,
                                     headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                payload = resp.read()
        except (urllib.error.URLError, OSError, ValueError) as exc:
            raise ServiceUnavailable(str(exc)) from exc
        try:
            return json.loads(payload.decode("utf-8", errors="replace"))
        except json.JSONDecodeError:
            # Not transport failure; surfaced as an invalid (retryable) response.
            return payload.decode("utf-8", errors="replace")


# ---------------------------------------------------------------------------
# evidence serialization for requests

def _stats_dict(stats: GraphStats | None):
    if stats is None:
        return None
    d = dataclasses.asdict(stats)
    d["component_size_histogram"] = [[size, count] for size, count
                                     in sorted(stats.component_size_histogram.items())]
    return d


def _phase1_evidence(bundle: EvidenceBundle) -> dict:
    env = bundle.static.env
    return {
        "sample_id": bundle.sample_id,
        "phase": bundle.phase,
        "verdict": {"label": bundle.verdict.label, "score": bundle.verdict.score},
        "environment": None if env is None else {
            "arch": env.arch.value, "endian": env.endian.value,
            "bits": env.bits, "libc": env.libc.value,
        },
        "graph_stats": {
            "fcg": _stats_dict(bundle.static.fcg_stats),
            "icfg": _stats_dict(bundle.static.icfg_stats),
        },
        "artifacts": [{"role": f.role, "path": f.path, "size": f.size}
                      for f in bundle.inventory],
        "masquerade_renames": [{"old": m.old, "new": m.new, "event_seq": m.event_seq}
                               for m in bundle.behaviors.masquerade_renames],
        "credential_accesses": [{"path": c.path, "event_seq": c.event_seq}
                                for c in bundle.behaviors.credential_accesses],
    }


def _capture_evidence(bundle: EvidenceBundle) -> dict:
    b = bundle.behaviors
    return {
        "dns_queries": [{"name": q.name, "resolver": q.resolver, "port": q.port}
                        for q in b.dns_queries],
        "scan_findings": [{"port": s.port, "unique_addrs": s.unique_addrs,
                           "flow_count": s.flow_count,
                           "mean_duration": s.mean_duration}
                          for s in b.scan_findings],
        "outbound_tcp": [{"ip": ip, "port": port, "bytes_out": nbytes}
                         for ip, port, nbytes in b.outbound_tcp],
        "exfil_candidates": [{"channel": c.channel, "destination": c.destination,
                              "evidence": list(c.evidence)}
                             for c in b.exfil_candidates],
    }


def _capture_evidence_empty(bundle: EvidenceBundle) -> bool:
    b = bundle.behaviors
    return not (b.dns_queries or b.scan_findings or b.outbound_tcp or b.exfil_candidates)


# ---------------------------------------------------------------------------
# generation

def _ref(artifact: str, locator: str) -> dict:
    return {"artifact": artifact, "locator": locator}


def _service_round(service, base_request: dict, attempts: int):
    """Run the request/validate/retry loop; None means fall back."""
    prior = None
    violations: list[Violation] = []
    for _ in range(attempts):
        request = dict(base_request)
        if prior is not None:
            request["prior_draft"] = prior
        if violations:
            request["violations"] = [str(v) for v in violations]
        try:
            response = service.generate(request)
        except ServiceUnavailable:
            return None
        if not isinstance(response, dict):
            prior, violations = None, [Violation("$", "response is not a JSON object")]
            continue
        found = validate_draft(response)
        if not found:
            return response
        prior, violations = response, found
    return None


def generate_phase1(bundle: EvidenceBundle, svc: LlmServiceConfig | None = None,
                    service=None) -> NotificationDraft:
    """Draft from log-derived evidence; degrades to the deterministic template."""
    if service is None:
        if svc is None:
            return fallback_generate(bundle)
        service = HttpLlmService(svc)
    attempts = svc.max_retries if svc is not None else getattr(
        getattr(service, "config", None), "max_retries", 3)
    base = {
        "system_instruction": SYSTEM_INSTRUCTION,
        "model": svc.model if svc is not None else getattr(
            getattr(service, "config", None), "model", "garante-drafter"),
        "schema": GARANTE_SCHEMA,
        "evidence": _phase1_evidence(bundle),
    }
    doc = _service_round(service, base, attempts)
    if doc is None:
        return fallback_generate(bundle)
    return NotificationDraft.from_document(doc, degraded=False)


def _provenance_superset(phase1: dict, phase2: dict) -> bool:
    for key, refs in phase1.items():
        new_refs = phase2.get(key)
        if not isinstance(new_refs, list):
            return False
        have = [(r.get("artifact"), r.get("locator")) for r in new_refs
                if isinstance(r, dict)]
        for ref in refs:
            if (ref.get("artifact"), ref.get("locator")) not in have:
                return False
    return True


def generate_phase2(draft: NotificationDraft, bundle: EvidenceBundle,
                    svc: LlmServiceConfig | None = None, service=None) -> NotificationDraft:
    """Enrich a phase-1 draft with capture evidence.

    Provenance is monotone: a response that drops any phase-1 ref is rejected
    and the deterministic merge is used instead. With no capture evidence the
    draft is returned unchanged apart from a provenance note and no request
    is made.
    """
    if _capture_evidence_empty(bundle):
        prov = copy.deepcopy(draft.provenance)
        prov.setdefault("phase2", [_ref("packet_capture",
                                        "no capture evidence supplied; phase 2 skipped")])
        return dataclasses.replace(draft, provenance=prov)
    if service is None:
        if svc is None:
            return _fallback_merge(draft, bundle)
        service = HttpLlmService(svc)
    attempts = svc.max_retries if svc is not None else getattr(
        getattr(service, "config", None), "max_retries", 3)
    base = {
        "system_instruction": SYSTEM_INSTRUCTION,
        "model": svc.model if svc is not None else getattr(
            getattr(service, "config", None), "model", "garante-drafter"),
        "schema": GARANTE_SCHEMA,
        "evidence": _capture_evidence(bundle),
        "prior_draft": draft.to_document(),
    }
    doc = _service_round(service, base, attempts)
    if doc is None or not _provenance_superset(draft.provenance, doc["provenance"]):
        return _fallback_merge(draft, bundle)
    return NotificationDraft.from_document(doc, degraded=draft.degraded)


def _ordered_union(base: list, extra) -> list:
    out = list(base)
    for item in extra:
        if item not in out:
            out.append(item)
    return out


def _merge_refs(existing, new_refs) -> list:
    out = list(existing)
    have = {(r["artifact"], r["locator"]) for r in out}
    for ref in new_refs:
        key = (ref["artifact"], ref["locator"])
        if key not in have:
            have.add(key)
            out.append(ref)
    return out


def _scan_summary(s) -> str:
    return f"scan port {s.port}: {s.unique_addrs} unique external addresses"


def _fallback_merge(draft: NotificationDraft, bundle: EvidenceBundle) -> NotificationDraft:
    """Deterministic capture-evidence merge used when the service cannot."""
    b = bundle.behaviors
    doc = draft.to_document()
    g = doc["section_g"]

    channels = set(g["exfil_channels"]) | {c.channel for c in b.exfil_candidates}
    g["exfil_channels"] = [ch for ch in EXFIL_CHANNELS if ch in channels]

    destinations = _ordered_union(g["destinations"],
                                  [c.destination for c in b.exfil_candidates])
    destinations = _ordered_union(destinations,
                                  [_scan_summary(s) for s in b.scan_findings])
    g["destinations"] = destinations

    categories = set(g["data_categories"])
    if any(c.channel == "dns" for c in b.exfil_candidates):
        categories.update(("device_identifiers", "unknown"))
    if categories:
        g["data_categories"] = [c for c in DATA_CATEGORIES if c in categories]

    if b.exfil_candidates:
        doc["section_h"]["residual_risk"] = "high"

    prov = doc["provenance"]
    new_refs = [_ref("packet_capture", c.evidence[0] if c.evidence else c.destination)
                for c in b.exfil_candidates]
    scan_refs = [_ref("packet_capture", _scan_summary(s)) for s in b.scan_findings]
    if g["exfil_channels"]:
        prov["section_g.exfil_channels"] = _merge_refs(
            prov.get("section_g.exfil_channels", []), new_refs or scan_refs)
    if g["destinations"]:
        prov["section_g.destinations"] = _merge_refs(
            prov.get("section_g.destinations", []), new_refs + scan_refs)
    if g["data_categories"]:
        prov.setdefault("section_g.data_categories",
                        [_ref("packet_capture", "observed traffic channels")])
    prov.setdefault("section_h.residual_risk",
                    [_ref("packet_capture", "exfiltration candidates observed")])

    doc["degraded"] = True
    return NotificationDraft.from_document(doc)


def fallback_generate(bundle: EvidenceBundle) -> NotificationDraft:
    """Deterministic template: restates bundle evidence, never invents content."""
    b = bundle.behaviors
    verdict = bundle.verdict
    exfil = bool(b.exfil_candidates)

    if verdict.label == 1 and exfil:
        nature = "malware-driven exfiltration of data from the analysed device"
    elif verdict.label == 1:
        nature = "malware infection flagged by graph classification; no exfiltration behavior observed in emulation"
    else:
        nature = "no exfiltration behavior observed"
    if b.masquerade_renames:
        m = b.masquerade_renames[0]
        nature += f"; the binary masqueraded as a system file by renaming {m.old} to {m.new}"

    cause = ("execution of a malicious binary on the device"
             if verdict.label == 1 else "not determined")
    if b.scan_findings:
        ports = ", ".join(str(s.port) for s in b.scan_findings)
        cause += f"; propagation scanning observed on port {ports}"

    systems = [f"device running sample {bundle.sample_id}"] if bundle.sample_id else []
    systems += [m.new for m in b.masquerade_renames]

    channels = [ch for ch in EXFIL_CHANNELS
                if ch in {c.channel for c in b.exfil_candidates}]
    destinations = []
    for c in b.exfil_candidates:
        if c.destination not in destinations:
            destinations.append(c.destination)
    destinations += [_scan_summary(s) for s in b.scan_findings]

    categories: set[str] = set()
    if any(c.channel == "dns" for c in b.exfil_candidates):
        categories.update(("device_identifiers", "unknown"))
    if b.credential_accesses:
        categories.add("credentials")
    if not categories:
        categories.add("unknown")

    if exfil:
        risk = "high"
    elif b.scan_findings:
        risk = "medium"
    else:
        risk = "low"

    measures_taken = ["sample detonated only inside an isolated emulation sandbox; "
                      "no production system was exposed during analysis"]
    measures_planned = ["remove the malicious binary and restore affected devices "
                        "from known-good firmware",
                        "block the listed destination endpoints at the network boundary"]
    if b.credential_accesses:
        measures_planned.append("rotate credentials stored on affected devices")

    emulog_refs = [_ref("emulation_log", f"event {m.event_seq}: rename {m.old} -> {m.new}")
                   for m in b.masquerade_renames]
    cred_refs = [_ref("emulation_log", f"event {c.event_seq}: access to {c.path}")
                 for c in b.credential_accesses]
    verdict_ref = _ref("binary", f"classifier verdict {verdict.label} score {verdict.score}")
    capture_refs = [_ref("packet_capture", c.evidence[0] if c.evidence else c.destination)
                    for c in b.exfil_candidates]
    scan_refs = [_ref("packet_capture", _scan_summary(s)) for s in b.scan_findings]

    provenance: dict = {}

    def put(path, refs):
        if refs:
            provenance[path] = refs

    put("section_f.breach_nature", [verdict_ref] + emulog_refs)
    put("section_f.probable_cause", [verdict_ref] + scan_refs)
    put("section_f.systems_affected",
        ([_ref("binary", f"sample {bundle.sample_id}")] if bundle.sample_id else [])
        + emulog_refs)
    put("section_f.discovery_method", [verdict_ref])
    put("section_g.data_categories",
        (capture_refs or [verdict_ref]) + cred_refs)
    put("section_g.exfil_channels", capture_refs)
    put("section_g.destinations", capture_refs + scan_refs)
    put("section_h.measures_taken",
        [_ref("emulation_log", "analysis confined to the emulation sandbox")])
    put("section_h.measures_planned",
        [verdict_ref] + capture_refs + cred_refs)
    put("section_h.residual_risk", [verdict_ref] + capture_refs + scan_refs)

    doc = {
        "section_f": {
            "breach_nature": nature,
            "probable_cause": cause,
            "timeline": {"start": None, "detected": 0.0},
            "systems_affected": systems,
            "discovery_method": "static call-graph classification followed by "
                                "sandboxed dynamic analysis of the sample",
        },
        "section_g": {
            "data_categories": [c for c in DATA_CATEGORIES if c in categories],
            "special_categories_suspected": False,
            "est_subjects": None,
            "est_records": None,
            "exfil_channels": channels,
            "destinations": destinations,
        },
        "section_h": {
            "measures_taken": measures_taken,
            "measures_planned": measures_planned,
            "residual_risk": risk,
        },
        "provenance": provenance,
        "degraded": True,
    }
    return NotificationDraft.from_document(doc)


# ---------------------------------------------------------------------------
# rendering

_SECTION_HEADINGS = {
    "F": "# Section F. Description of the breach (Sezione F. Descrizione della violazione)",
    "G": "# Section G. Categories of data (Sezione G. Categorie di dati)",
    "H": "# Section H. Security measures (Sezione H. Misure di sicurezza)",
}

DEGRADED_BANNER = ("> This draft was generated without language-model assistance "
                   "(deterministic fallback from recorded evidence).")


def _render_refs(lines: list[str], provenance: dict, path: str) -> None:
    for ref in provenance.get(path, []):
        lines.append(f"    evidence: {ref['artifact']}: {ref['locator']}")


def _render_list(lines: list[str], label: str, items, provenance: dict, path: str) -> None:
    lines.append(f"{label}:")
    for item in items:
        lines.append(f"  - {item}")
    if not items:
        lines.append("  (none)")
    _render_refs(lines, provenance, path)


def render_text(draft: NotificationDraft) -> str:
    """Plain-text rendering: three section headings, labeled fields, citations."""
    f, g, h = draft.section_f, draft.section_g, draft.section_h
    prov = draft.provenance
    lines: list[str] = []
    if draft.degraded:
        lines.append(DEGRADED_BANNER)
        lines.append("")

    lines.append(_SECTION_HEADINGS["F"])
    lines.append(f"Nature of the breach: {f['breach_nature']}")
    _render_refs(lines, prov, "section_f.breach_nature")
    lines.append(f"Probable cause: {f['probable_cause']}")
    _render_refs(lines, prov, "section_f.probable_cause")
    start = f["timeline"].get("start")
    lines.append(f"Timeline: start={'unknown' if start is None else start}, "
                 f"detected={f['timeline']['detected']}")
    _render_list(lines, "Systems affected", f["systems_affected"],
                 prov, "section_f.systems_affected")
    lines.append(f"Discovery method: {f['discovery_method']}")
    _render_refs(lines, prov, "section_f.discovery_method")
    lines.append("")

    lines.append(_SECTION_HEADINGS["G"])
    lines.append("Data categories: " + (", ".join(g["data_categories"]) or "(none)"))
    _render_refs(lines, prov, "section_g.data_categories")
    lines.append("Special categories suspected: "
                 + ("yes" if g["special_categories_suspected"] else "no"))
    est_s = g["est_subjects"]
    est_r = g["est_records"]
    lines.append(f"Estimated subjects: {'unknown' if est_s is None else est_s}")
    lines.append(f"Estimated records: {'unknown' if est_r is None else est_r}")
    lines.append("Exfiltration channels: " + (", ".join(g["exfil_channels"]) or "(none)"))
    _render_refs(lines, prov, "section_g.exfil_channels")
    _render_list(lines, "Destinations", g["destinations"], prov, "section_g.destinations")
    lines.append("")

    lines.append(_SECTION_HEADINGS["H"])
    _render_list(lines, "Measures taken", h["measures_taken"],
                 prov, "section_h.measures_taken")
    _render_list(lines, "Measures planned", h["measures_planned"],
                 prov, "section_h.measures_planned")
    lines.append(f"Residual risk: {h['residual_risk']}")
    _render_refs(lines, prov, "section_h.residual_risk")
    lines.append("")
    return "\n".join(lines)


def draft_to_json(draft: NotificationDraft) -> str:
    doc = draft.to_document()
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
