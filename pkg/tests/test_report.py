import io
import json
from types import SimpleNamespace

import pytest

from exfilpipe import report, synth
from exfilpipe.dynamics import (
    BehaviorSummary,
    detect_behaviors,
    extract_dns_queries,
    parse_emulation_log,
    parse_pcap,
    reconstruct_flows,
)
from exfilpipe.report import (
    DEGRADED_BANNER,
    PHASE_LOGS_ONLY,
    PHASE_WITH_PCAP,
    ArtifactFile,
    LlmServiceConfig,
    MissingVerdict,
    NotificationDraft,
    ServiceUnavailable,
    StaticSummary,
    Verdict,
    Violation,
    assemble_evidence,
    draft_to_json,
    fallback_generate,
    generate_phase1,
    generate_phase2,
    render_text,
    validate_draft,
)


def _demo_behaviors():
    trace = parse_emulation_log(io.StringIO(synth.demo_emulog()))
    records = parse_pcap(synth.demo_capture())
    flows = reconstruct_flows(records)
    dns = extract_dns_queries(records)
    return trace, detect_behaviors(trace, flows, dns)


@pytest.fixture(scope="module")
def pcap_bundle():
    _, behaviors = _demo_behaviors()
    inventory = (ArtifactFile(role="packet_capture", path="packets_1.pcap", size=4096),
                 ArtifactFile(role="emulation_log", path="emulation_results.txt", size=512))
    return assemble_evidence(StaticSummary(), Verdict(1, 0.94), behaviors,
                             inventory, PHASE_WITH_PCAP, sample_id="deadbeef")


@pytest.fixture(scope="module")
def logs_bundle():
    trace, _ = _demo_behaviors()
    behaviors = detect_behaviors(trace, [], [])
    inventory = (ArtifactFile(role="emulation_log", path="emulation_results.txt", size=512),)
    return assemble_evidence(StaticSummary(), Verdict(1, 0.94), behaviors,
                             inventory, PHASE_LOGS_ONLY, sample_id="deadbeef")


class ScriptedService:
    """Canned responses; an Exception instance in the script is raised."""

    def __init__(self, responses, max_retries=3):
        self.responses = list(responses)
        self.requests = []
        self.config = SimpleNamespace(max_retries=max_retries, model="garante-drafter")

    def generate(self, request):
        self.requests.append(request)
        item = self.responses.pop(0)
        if isinstance(item, Exception):
            raise item
        return item


def _valid_doc(bundle):
    doc = fallback_generate(bundle).to_document()
    doc["section_f"]["discovery_method"] = "narrative supplied by the drafting service"
    return doc


# ---------------------------------------------------------------------------
# evidence bundle

def test_assemble_requires_verdict(pcap_bundle):
    with pytest.raises(MissingVerdict):
        assemble_evidence(StaticSummary(), None, pcap_bundle.behaviors,
                          pcap_bundle.inventory, PHASE_WITH_PCAP)


def test_assemble_rejects_unknown_phase():
    with pytest.raises(ValueError):
        assemble_evidence(StaticSummary(), Verdict(0, 0.0), BehaviorSummary(),
                          (), "phase3")


def test_with_pcap_needs_capture_evidence():
    with pytest.raises(ValueError):
        assemble_evidence(StaticSummary(), Verdict(1, 1.0), BehaviorSummary(),
                          (ArtifactFile(role="emulation_log", path="e.txt", size=1),),
                          PHASE_WITH_PCAP)
    # the artifact alone satisfies the requirement even with empty behaviors
    ok = assemble_evidence(StaticSummary(), Verdict(1, 1.0), BehaviorSummary(),
                           (ArtifactFile(role="packet_capture", path="p.pcap", size=1),),
                           PHASE_WITH_PCAP)
    assert ok.phase == PHASE_WITH_PCAP


def test_inventory_sorted_and_kinds(pcap_bundle):
    assert [f.role for f in pcap_bundle.inventory] == ["emulation_log", "packet_capture"]
    kinds = pcap_bundle.behavior_kinds()
    assert "masquerade_renames" in kinds
    assert "scan_findings" in kinds
    empty = assemble_evidence(StaticSummary(), Verdict(0, 0.0), BehaviorSummary(),
                              (), PHASE_LOGS_ONLY)
    assert empty.behavior_kinds() == ()


# ---------------------------------------------------------------------------
# schema validation

def test_fallback_draft_is_schema_valid(pcap_bundle):
    doc = fallback_generate(pcap_bundle).to_document()
    assert validate_draft(doc) == []


def test_violation_renders_as_path_message():
    assert str(Violation("section_g.destinations", "missing")) == \
        "section_g.destinations: missing"


def test_validate_non_object():
    found = validate_draft([1, 2])
    assert [v.path for v in found] == ["$"]


def test_validate_missing_section(pcap_bundle):
    doc = _valid_doc(pcap_bundle)
    del doc["section_g"]
    paths = [v.path for v in validate_draft(doc)]
    assert "section_g" in paths


def test_validate_flags_unknown_keys(pcap_bundle):
    doc = _valid_doc(pcap_bundle)
    doc["section_x"] = {}
    doc["section_f"]["extra"] = 1
    doc["section_f"]["timeline"]["end"] = 5
    paths = [v.path for v in validate_draft(doc)]
    assert "$.section_x" in paths
    assert "section_f.extra" in paths
    assert "section_f.timeline.end" in paths


def test_validate_type_errors(pcap_bundle):
    doc = _valid_doc(pcap_bundle)
    doc["section_f"]["breach_nature"] = 7
    doc["section_g"]["est_subjects"] = -1
    doc["section_g"]["est_records"] = True
    doc["section_h"]["residual_risk"] = "catastrophic"
    doc["degraded"] = "yes"
    paths = [v.path for v in validate_draft(doc)]
    assert set(paths) >= {"section_f.breach_nature", "section_g.est_subjects",
                          "section_g.est_records", "section_h.residual_risk",
                          "degraded"}


def test_validate_enum_items(pcap_bundle):
    doc = _valid_doc(pcap_bundle)
    doc["section_g"]["data_categories"] = ["credentials", "emails"]
    doc["section_g"]["exfil_channels"] = ["dns", "carrier-pigeon"]
    paths = [v.path for v in validate_draft(doc)]
    assert "section_g.data_categories[1]" in paths
    assert "section_g.exfil_channels[1]" in paths


def test_validate_narrative_needs_provenance(pcap_bundle):
    doc = _valid_doc(pcap_bundle)
    del doc["provenance"]["section_f.breach_nature"]
    paths = [v.path for v in validate_draft(doc)]
    assert "provenance.section_f.breach_nature" in paths


def test_validate_ref_shapes(pcap_bundle):
    doc = _valid_doc(pcap_bundle)
    doc["provenance"]["section_f.discovery_method"] = []
    doc["provenance"]["section_f.breach_nature"] = [{"artifact": "binary"}]
    found = validate_draft(doc)
    assert any(v.path == "provenance.section_f.discovery_method"
               and "expected non-empty array" in v.message for v in found)
    assert any(v.path == "provenance.section_f.breach_nature[0]" for v in found)


# ---------------------------------------------------------------------------
# deterministic fallback

def test_fallback_is_deterministic(pcap_bundle):
    a = fallback_generate(pcap_bundle)
    b = fallback_generate(pcap_bundle)
    assert draft_to_json(a) == draft_to_json(b)
    assert a.degraded is True


def test_fallback_restates_demo_evidence(pcap_bundle):
    draft = fallback_generate(pcap_bundle)
    f, g, h = draft.section_f, draft.section_g, draft.section_h

    assert "renaming /tmp/dvr.arm to /usr/dvrHelper" in f["breach_nature"]
    assert "/usr/dvrHelper" in f["systems_affected"]
    assert "port 23" in f["probable_cause"]

    assert g["exfil_channels"] == ["dns", "tcp"]
    assert "credentials" in g["data_categories"]
    assert f"{synth.DEMO_RESOLVER}:53" in g["destinations"]
    assert "scan port 23: 120 unique external addresses" in g["destinations"]

    assert h["residual_risk"] == "high"
    assert any("rotate credentials" in m for m in h["measures_planned"])


def test_fallback_never_invents_endpoints(pcap_bundle):
    draft = fallback_generate(pcap_bundle)
    known = {c.destination for c in pcap_bundle.behaviors.exfil_candidates}
    known |= {report._scan_summary(s) for s in pcap_bundle.behaviors.scan_findings}
    assert set(draft.section_g["destinations"]) <= known


def test_fallback_benign_shape():
    bundle = assemble_evidence(StaticSummary(), Verdict(0, 0.0), BehaviorSummary(),
                               (), PHASE_LOGS_ONLY)
    draft = fallback_generate(bundle)
    assert validate_draft(draft.to_document()) == []
    assert draft.section_f["breach_nature"] == "no exfiltration behavior observed"
    assert draft.section_g["exfil_channels"] == []
    assert draft.section_g["data_categories"] == ["unknown"]
    assert draft.section_h["residual_risk"] == "low"


def test_fallback_scan_only_is_medium_risk():
    _, behaviors = _demo_behaviors()
    scan_only = BehaviorSummary(scan_findings=behaviors.scan_findings)
    bundle = assemble_evidence(StaticSummary(), Verdict(1, 1.0), scan_only,
                               (), PHASE_WITH_PCAP)
    assert fallback_generate(bundle).section_h["residual_risk"] == "medium"


# ---------------------------------------------------------------------------
# phase 1 generation

def test_phase1_offline_uses_fallback(logs_bundle):
    draft = generate_phase1(logs_bundle)
    assert draft.degraded is True
    assert validate_draft(draft.to_document()) == []


def test_phase1_accepts_valid_response(logs_bundle):
    doc = _valid_doc(logs_bundle)
    svc = ScriptedService([doc])
    draft = generate_phase1(logs_bundle, service=svc)
    assert draft.degraded is False
    assert draft.section_f["discovery_method"] == doc["section_f"]["discovery_method"]
    assert len(svc.requests) == 1
    first = svc.requests[0]
    assert set(first) == {"system_instruction", "model", "schema", "evidence"}
    assert first["evidence"]["sample_id"] == "deadbeef"
    assert "prior_draft" not in first


def test_phase1_retries_then_degrades(logs_bundle):
    svc = ScriptedService([{"bad": 1}, {"bad": 2}, {"bad": 3}], max_retries=3)
    draft = generate_phase1(logs_bundle, service=svc)
    assert draft.degraded is True
    assert len(svc.requests) == 3
    second = svc.requests[1]
    assert second["prior_draft"] == {"bad": 1}
    assert any("missing" in v for v in second["violations"])


def test_phase1_retry_recovers(logs_bundle):
    svc = ScriptedService([{"bad": 1}, _valid_doc(logs_bundle)])
    draft = generate_phase1(logs_bundle, service=svc)
    assert draft.degraded is False
    assert len(svc.requests) == 2


def test_phase1_non_json_response_is_retried(logs_bundle):
    svc = ScriptedService(["plain text", _valid_doc(logs_bundle)])
    draft = generate_phase1(logs_bundle, service=svc)
    assert draft.degraded is False
    second = svc.requests[1]
    assert "prior_draft" not in second
    assert second["violations"] == ["$: response is not a JSON object"]


def test_phase1_unreachable_service_degrades_immediately(logs_bundle):
    svc = ScriptedService([ServiceUnavailable("connection refused")])
    draft = generate_phase1(logs_bundle, service=svc)
    assert draft.degraded is True
    assert len(svc.requests) == 1


# ---------------------------------------------------------------------------
# phase 2 generation

def test_phase2_without_capture_evidence_skips_service(logs_bundle):
    draft = generate_phase1(logs_bundle)
    svc = ScriptedService([{"never": "called"}])
    enriched = generate_phase2(draft, logs_bundle, service=svc)
    assert svc.requests == []
    assert "phase2" in enriched.provenance
    assert enriched.section_g == draft.section_g
    assert enriched.degraded == draft.degraded


def test_phase2_offline_merge(logs_bundle, pcap_bundle):
    draft = generate_phase1(logs_bundle)
    assert draft.section_g["exfil_channels"] == []
    merged = generate_phase2(draft, pcap_bundle)
    assert merged.degraded is True
    assert validate_draft(merged.to_document()) == []
    assert merged.section_g["exfil_channels"] == ["dns", "tcp"]
    assert f"{synth.DEMO_RESOLVER}:53" in merged.section_g["destinations"]
    assert merged.section_h["residual_risk"] == "high"
    # phase-1 provenance survives the merge untouched
    for key, refs in draft.provenance.items():
        assert all(r in merged.provenance[key] for r in refs)


def test_phase2_accepts_superset_response(logs_bundle, pcap_bundle):
    p1 = generate_phase1(logs_bundle, service=ScriptedService([_valid_doc(logs_bundle)]))
    response = p1.to_document()
    response["section_g"]["est_records"] = 42
    response["provenance"]["section_g.est_records"] = [
        {"artifact": "packet_capture", "locator": "payload accounting"}]
    svc = ScriptedService([response])
    enriched = generate_phase2(p1, pcap_bundle, service=svc)
    assert len(svc.requests) == 1
    assert svc.requests[0]["prior_draft"] == p1.to_document()
    assert enriched.section_g["est_records"] == 42
    assert enriched.degraded is False


def test_phase2_rejects_provenance_regression(logs_bundle, pcap_bundle):
    p1 = generate_phase1(logs_bundle, service=ScriptedService([_valid_doc(logs_bundle)]))
    response = p1.to_document()
    response["provenance"]["section_f.breach_nature"] = [
        {"artifact": "binary", "locator": "rewritten citation"}]
    enriched = generate_phase2(p1, pcap_bundle, service=ScriptedService([response]))
    # valid but evidence-dropping response is discarded for the merge
    assert enriched.degraded is True
    assert enriched.section_g["exfil_channels"] == ["dns", "tcp"]


# ---------------------------------------------------------------------------
# service transport and config

def test_service_config_validation():
    cfg = LlmServiceConfig(endpoint="http://127.0.0.1:9/v1")
    assert cfg.model == "garante-drafter"
    assert cfg.token_env == "EXFILPIPE_SERVICE_TOKEN"
    assert cfg.max_retries == 3
    with pytest.raises(ValueError):
        LlmServiceConfig(endpoint="e", max_retries=-1)
    with pytest.raises(ValueError):
        LlmServiceConfig(endpoint="e", timeout=0.0)


def test_http_service_maps_transport_errors():
    svc = report.HttpLlmService(LlmServiceConfig(endpoint="http://127.0.0.1:9/v1",
                                                 timeout=0.2))
    with pytest.raises(ServiceUnavailable):
        svc.generate({"ping": 1})


def test_phase1_with_endpoint_config_degrades(logs_bundle):
    cfg = LlmServiceConfig(endpoint="http://127.0.0.1:9/v1", timeout=0.2)
    draft = generate_phase1(logs_bundle, svc=cfg)
    assert draft.degraded is True


# ---------------------------------------------------------------------------
# rendering

def test_render_has_three_section_headings(pcap_bundle):
    text = render_text(fallback_generate(pcap_bundle))
    headings = [l for l in text.splitlines() if l.startswith("# Section")]
    assert headings == [
        "# Section F. Description of the breach (Sezione F. Descrizione della violazione)",
        "# Section G. Categories of data (Sezione G. Categorie di dati)",
        "# Section H. Security measures (Sezione H. Misure di sicurezza)",
    ]


def test_render_banner_only_when_degraded(pcap_bundle):
    degraded = fallback_generate(pcap_bundle)
    assert render_text(degraded).splitlines()[0] == DEGRADED_BANNER
    fresh = NotificationDraft.from_document(degraded.to_document(), degraded=False)
    assert DEGRADED_BANNER not in render_text(fresh)


def test_render_cites_evidence(pcap_bundle):
    text = render_text(fallback_generate(pcap_bundle))
    assert "    evidence: emulation_log: event 3: rename /tmp/dvr.arm -> /usr/dvrHelper" in text
    assert "    evidence: binary: classifier verdict 1 score 0.94" in text


def test_render_marks_empty_lists():
    bundle = assemble_evidence(StaticSummary(), Verdict(0, 0.0), BehaviorSummary(),
                               (), PHASE_LOGS_ONLY)
    text = render_text(fallback_generate(bundle))
    assert "Destinations:\n  (none)" in text


def test_draft_json_is_stable(pcap_bundle):
    draft = fallback_generate(pcap_bundle)
    blob = draft_to_json(draft)
    assert blob.endswith("\n")
    assert json.loads(blob) == draft.to_document()
    assert draft_to_json(fallback_generate(pcap_bundle)) == blob
