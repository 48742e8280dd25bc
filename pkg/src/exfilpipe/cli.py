"""Command-line pipeline driver.

Subcommands run each stage on its own (inspect, graph, train, classify,
report) or the whole flagged-sample pipeline end to end (pipeline). Exit
codes: 0 success, 1 operational error, 2 usage error, 3 the --fail-on-exfil
gate. All output files are written atomically via a temp file plus rename,
and samples are identified by the sha256 of their bytes.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from . import binfmt, classifier, dynamics, features, graphs, report
from .errors import PipelineError

# artifact roles recognized in an artifacts directory, by file name
REQUIRED_ARTIFACTS = ("emulation_results.txt",)
ROLE_BY_NAME = {
    "emulation_results.txt": "emulation_log",
    "ip_trace.log": "pc_trace",
    "ip_flow_path.csv": "flow_csv",
    "qiling_output.txt": "runtime_output",
}


@dataclass
class PipelineConfig:
    seed: int = 0
    embedding: features.EmbeddingConfig = field(default_factory=features.EmbeddingConfig)
    hyperparams: classifier.Hyperparams = field(default_factory=classifier.Hyperparams)
    scan: dynamics.ScanConfig = field(default_factory=dynamics.ScanConfig)
    service: report.LlmServiceConfig | None = None
    out_dir: str = "."
    parallelism: int = 1
    train_fraction: float = 0.75

    def __post_init__(self):
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")


def parse_config_file(path) -> dict[str, str]:
    """Flat key=value lines; '#' comments and blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise PipelineError(f"{path}:{lineno}: expected key=value, got {stripped!r}")
        out[key.strip()] = value.strip()
    return out


def resolve_config(args) -> PipelineConfig:
    """Defaults, overlaid by the config file, overlaid by flags."""
    raw: dict[str, str] = {}
    if getattr(args, "config", None):
        raw = parse_config_file(args.config)

    def take(key, cast, default):
        return cast(raw[key]) if key in raw else default

    seed = take("seed", int, 0)
    if getattr(args, "seed", None) is not None:
        seed = args.seed
    out_dir = take("out_dir", str, ".")
    if getattr(args, "out", None):
        out_dir = args.out
    parallelism = take("parallelism", int, 1)
    if getattr(args, "parallelism", None):
        parallelism = args.parallelism

    emb = features.EmbeddingConfig(
        walks_per_node=take("walks_per_node", int, 10),
        walk_length=take("walk_length", int, 40),
        window=take("window", int, 5),
        power_iterations=take("power_iterations", int, 50),
        seed=seed,
    )
    max_depth = take("max_depth", int, 0)
    hp = classifier.Hyperparams(
        n_trees=(args.trees if getattr(args, "trees", None) else take("n_trees", int, 100)),
        max_features=take("max_features", int, classifier.Hyperparams().max_features),
        min_samples_split=take("min_samples_split", int, 2),
        max_depth=max_depth or None,
        seed=seed,
    )
    scan = dynamics.ScanConfig(
        duration_threshold=take("scan_duration_threshold", float, 2.0),
        unique_threshold=take("scan_unique_threshold", int, 100),
    )
    service = None
    if raw.get("service_endpoint"):
        service = report.LlmServiceConfig(
            endpoint=raw["service_endpoint"],
            model=take("service_model", str, "garante-drafter"),
            token_env=take("service_token_env", str, "EXFILPIPE_SERVICE_TOKEN"),
            timeout=take("service_timeout", float, 30.0),
            max_retries=take("service_max_retries", int, 3),
        )
    return PipelineConfig(seed=seed, embedding=emb, hyperparams=hp, scan=scan,
                          service=service, out_dir=out_dir,
                          parallelism=parallelism,
                          train_fraction=take("train_fraction", float, 0.75))


# ---------------------------------------------------------------------------
# plumbing

def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_atomic(path, data) -> None:
    """Write via temp file + rename so partial files never appear."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def _err(message: str) -> int:
    sys.stderr.write(f"error: {message}\n")
    return 1


def _fail(exc: Exception, stage: str | None = None) -> int:
    where = f"{stage}: " if stage else ""
    return _err(f"{where}{type(exc).__name__}: {exc}")


def _colored(text: str, code: str) -> str:
    if os.environ.get("NO_COLOR") or not sys.stdout.isatty():
        return text
    return f"\x1b[{code}m{text}\x1b[0m"


def _featurize_binary(path, emb: features.EmbeddingConfig):
    image = binfmt.load_binary(path)
    fcg = graphs.build_fcg(image)
    return features.featurize(fcg, emb)


# ---------------------------------------------------------------------------
# subcommands

def cmd_inspect(args) -> int:
    try:
        image = binfmt.load_binary(args.binary)
        env = binfmt.detect_environment(image.meta, image.dynamic)
    except (PipelineError, OSError) as exc:
        return _fail(exc)
    print(f"arch: {env.arch.value}")
    print(f"endian: {env.endian.value}")
    print(f"bits: {env.bits}")
    print(f"libc: {env.libc.value}")
    print(f"entry: 0x{image.meta.entry:x}")
    print(f"sections: {len(image.sections)}")
    print(f"symbols: {len(image.symbols)}")
    print(f"needed: {', '.join(image.dynamic.needed_libs) or '(none)'}")
    return 0


def _export_to_path(exporter, path) -> None:
    sink = io.StringIO()
    exporter(sink)
    write_atomic(path, sink.getvalue())


def cmd_graph(args) -> int:
    out_dir = Path(args.out)
    try:
        sha = sha256_of(args.binary)
        image = binfmt.load_binary(args.binary)
        ext = args.format
        path = out_dir / f"{sha}_{args.kind}.{ext}"
        if args.kind == "fcg":
            g = graphs.build_fcg(image)
            stats = graphs.graph_stats(g.nodes.keys(), g.edges)
            _export_to_path(lambda s: graphs.export_graph(g, args.format, s), path)
            print(graphs.format_stats_summary(stats))
        elif args.kind == "icfg":
            g = graphs.build_icfg(image)
            stats = graphs.graph_stats(g.nodes.keys(), g.edges)
            _export_to_path(lambda s: graphs.export_graph(g, args.format, s), path)
            print(graphs.format_stats_summary(stats))
        else:
            g = graphs.build_import_graph(image)
            _export_to_path(lambda s: graphs.export_import_graph(g, args.format, s), path)
            print(f"{len(g.libraries)} libraries, "
                  f"{len(g.symbol_edges) + len(g.unattributed)} imported symbols")
    except (PipelineError, OSError) as exc:
        return _fail(exc)
    print(f"wrote {path}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(cfg.out_dir)
    try:
        samples = binfmt.load_manifest(args.manifest)
    except (PipelineError, OSError) as exc:
        return _fail(exc, "manifest")

    def one(item):
        path, label = item
        return sha256_of(path), label, _featurize_binary(path, cfg.embedding)

    rows = []
    if cfg.parallelism > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            futures = [pool.submit(one, item) for item in samples]
            for item, fut in zip(samples, futures):
                try:
                    rows.append(fut.result())
                except (PipelineError, OSError) as exc:
                    if not args.skip_bad:
                        return _fail(exc, str(item[0]))
                    sys.stderr.write(f"skipping {item[0]}: {exc}\n")
    else:
        for item in samples:
            try:
                rows.append(one(item))
            except (PipelineError, OSError) as exc:
                if not args.skip_bad:
                    return _fail(exc, str(item[0]))
                sys.stderr.write(f"skipping {item[0]}: {exc}\n")

    try:
        ds = classifier.Dataset.from_rows(
            [(sid, fv.values, classifier.LABEL_TO_CLASS[label])
             for sid, label, fv in rows])
        train, test = classifier.split_dataset(ds, cfg.train_fraction, cfg.seed)
        model = classifier.train_forest(train, cfg.hyperparams,
                                        embedding=cfg.embedding)
        metrics = classifier.evaluate(model, test)
    except (PipelineError, ValueError) as exc:
        return _fail(exc, "training")

    sink = io.StringIO()
    features.export_features([(sid, label, fv) for sid, label, fv in rows], sink)
    write_atomic(out_dir / "features.csv", sink.getvalue())
    sink = io.StringIO()
    classifier.save_model(model, sink)
    write_atomic(out_dir / "model.json", sink.getvalue())
    write_atomic(out_dir / "metrics.json",
                 json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"trained on {len(train)} samples, evaluated on {len(test)}")
    for key, value in sorted(metrics.to_dict().items()):
        if isinstance(value, float):
            print(f"{key}: {value:.4f}")
    print(f"wrote {out_dir / 'model.json'}")
    return 0


def _classify_image(path, model_path, emb_override=None):
    model = classifier.load_model(model_path)
    emb = emb_override or model.embedding or features.EmbeddingConfig()
    fv = _featurize_binary(path, emb)
    label, score = classifier.predict(model, fv.values)
    return model, label, score


def cmd_classify(args) -> int:
    try:
        _model, label, score = _classify_image(args.binary, args.model)
    except (PipelineError, OSError) as exc:
        return _fail(exc)
    name = "exfiltrator" if label == 1 else "non-exfiltrator"
    color = "31" if label == 1 else "32"
    print(f"{_colored(name, color)} score={score!r}")
    if label == 1 and args.fail_on_exfil:
        return 3
    return 0


def _collect_artifacts(art_dir: Path):
    """Map the artifact directory to roles; returns (paths-by-role, missing)."""
    by_role: dict[str, list[Path]] = {}
    for name, role in ROLE_BY_NAME.items():
        p = art_dir / name
        if p.is_file():
            by_role.setdefault(role, []).append(p)
    pcaps = sorted(art_dir.glob("packets_*.pcap"))
    if pcaps:
        by_role["packet_capture"] = pcaps
    missing = [n for n in REQUIRED_ARTIFACTS if not (art_dir / n).is_file()]
    return by_role, missing


def _ingest_dynamics(by_role: dict, scan: dynamics.ScanConfig):
    emulog_path = by_role["emulation_log"][0]
    with open(emulog_path, encoding="utf-8") as fh:
        trace = dynamics.parse_emulation_log(fh, source=str(emulog_path))
    # PC traces carry no behavior signal, but malformed ones should fail here
    for p in by_role.get("pc_trace", []):
        with open(p, encoding="utf-8") as fh:
            dynamics.parse_pc_trace(fh)
    for p in by_role.get("flow_csv", []):
        with open(p, encoding="utf-8") as fh:
            dynamics.parse_flow_csv(fh)
    packets = []
    for p in by_role.get("packet_capture", []):
        packets.extend(dynamics.parse_pcap(p.read_bytes()))
    flows = dynamics.reconstruct_flows(packets)
    dns = dynamics.extract_dns_queries(packets)
    behaviors = dynamics.detect_behaviors(trace, flows, dns, scan)
    return trace, packets, flows, behaviors


def _inventory(by_role: dict, binary_path=None):
    rows = []
    if binary_path is not None:
        rows.append(report.ArtifactFile(role="binary", path=str(binary_path),
                                        size=os.path.getsize(binary_path)))
    for role, paths in by_role.items():
        for p in paths:
            rows.append(report.ArtifactFile(role=role, path=str(p),
                                            size=os.path.getsize(p)))
    return rows


def _write_draft(draft, out_dir: Path, sample_id: str) -> tuple[Path, Path]:
    json_path = out_dir / f"{sample_id}_notification.json"
    md_path = out_dir / f"{sample_id}_notification.md"
    write_atomic(json_path, report.draft_to_json(draft))
    write_atomic(md_path, report.render_text(draft))
    return json_path, md_path


def cmd_report(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(cfg.out_dir)
    by_role: dict[str, list[Path]] = {"emulation_log": [Path(args.emulog)]}
    if args.pcap:
        by_role["packet_capture"] = [Path(p) for p in args.pcap]
    for t in args.traces or []:
        role = ROLE_BY_NAME.get(Path(t).name, "pc_trace")
        by_role.setdefault(role, []).append(Path(t))

    try:
        trace, packets, flows, behaviors = _ingest_dynamics(by_role, cfg.scan)
    except (PipelineError, OSError) as exc:
        return _fail(exc, "dynamics")

    static = report.StaticSummary()
    verdict = report.Verdict(label=1, score=1.0)
    if args.binary and args.model:
        try:
            _model, label, score = _classify_image(args.binary, args.model)
            image = binfmt.load_binary(args.binary)
            env = binfmt.detect_environment(image.meta, image.dynamic)
            fcg = graphs.build_fcg(image)
            icfg = graphs.build_icfg(image)
            static = report.StaticSummary(
                env=env,
                fcg_stats=graphs.graph_stats(fcg.nodes.keys(), fcg.edges),
                icfg_stats=graphs.graph_stats(icfg.nodes.keys(), icfg.edges))
            verdict = report.Verdict(label=label, score=score)
        except (PipelineError, OSError) as exc:
            return _fail(exc, "classification")

    try:
        phase = report.PHASE_WITH_PCAP if args.pcap else report.PHASE_LOGS_ONLY
        bundle = report.assemble_evidence(
            static, verdict, behaviors,
            _inventory(by_role, args.binary), phase, sample_id=args.sample)
        svc = None if args.offline else cfg.service
        draft = report.generate_phase1(bundle, svc)
        if args.pcap:
            draft = report.generate_phase2(draft, bundle, svc)
    except (PipelineError, OSError, ValueError) as exc:
        return _fail(exc, "report")

    json_path, md_path = _write_draft(draft, out_dir, args.sample)
    print(f"wrote {json_path}")
    print(f"wrote {md_path}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = resolve_config(args)
    out_dir = Path(cfg.out_dir)
    try:
        sha = sha256_of(args.binary)
        image = binfmt.load_binary(args.binary)
        env = binfmt.detect_environment(image.meta, image.dynamic)
    except (PipelineError, OSError) as exc:
        return _fail(exc, "inspect")
    print(f"sample {sha}")
    print(f"arch: {env.arch.value} endian: {env.endian.value} "
          f"bits: {env.bits} libc: {env.libc.value}")

    try:
        fcg = graphs.build_fcg(image)
        icfg = graphs.build_icfg(image)
        imports = graphs.build_import_graph(image)
        fcg_stats = graphs.graph_stats(fcg.nodes.keys(), fcg.edges)
        icfg_stats = graphs.graph_stats(icfg.nodes.keys(), icfg.edges)
        for kind, g in (("fcg", fcg), ("icfg", icfg)):
            for fmt in ("graphml", "json"):
                _export_to_path(lambda s, g=g, fmt=fmt: graphs.export_graph(g, fmt, s),
                                out_dir / f"{sha}_{kind}.{fmt}")
        _export_to_path(lambda s: graphs.export_import_graph(imports, "json", s),
                        out_dir / f"{sha}_imports.json")
        print("fcg: " + graphs.format_stats_summary(fcg_stats))
        print("icfg: " + graphs.format_stats_summary(icfg_stats))
    except (PipelineError, OSError) as exc:
        return _fail(exc, "graphs")

    try:
        model = classifier.load_model(args.model)
        emb = model.embedding or cfg.embedding
        fv = features.featurize(fcg, emb)
        label, score = classifier.predict(model, fv.values)
    except (PipelineError, OSError) as exc:
        return _fail(exc, "classify")
    name = "exfiltrator" if label == 1 else "non-exfiltrator"
    verdict_doc = {"sample": sha, "label": label, "verdict": name, "score": score}
    write_atomic(out_dir / f"{sha}_verdict.json",
                 json.dumps(verdict_doc, indent=2, sort_keys=True) + "\n")
    print(f"{name} score={score!r}")

    if label == 0:
        print("non-exfiltrator, no report generated")
        return 0

    art_dir = Path(args.artifacts) if args.artifacts else None
    if art_dir is None or not art_dir.is_dir():
        return _err(f"artifacts directory required for a flagged sample: "
                    f"{args.artifacts or '(not given)'}")
    by_role, missing = _collect_artifacts(art_dir)
    if missing:
        return _err("missing required artifacts: " + ", ".join(missing))

    try:
        trace, packets, flows, behaviors = _ingest_dynamics(by_role, cfg.scan)
    except (PipelineError, OSError) as exc:
        return _fail(exc, "dynamics")
    print(f"parsed {len(trace.events)} events, {len(packets)} packets, "
          f"{len(flows)} flows")

    try:
        has_pcap = bool(by_role.get("packet_capture"))
        phase = report.PHASE_WITH_PCAP if has_pcap else report.PHASE_LOGS_ONLY
        static = report.StaticSummary(env=env, fcg_stats=fcg_stats,
                                      icfg_stats=icfg_stats)
        bundle = report.assemble_evidence(
            static, report.Verdict(label=label, score=score), behaviors,
            _inventory(by_role, args.binary), phase, sample_id=sha)
        svc = None if args.offline else cfg.service
        draft = report.generate_phase1(bundle, svc)
        if has_pcap:
            draft = report.generate_phase2(draft, bundle, svc)
    except (PipelineError, OSError, ValueError) as exc:
        return _fail(exc, "report")

    json_path, md_path = _write_draft(draft, out_dir, sha)
    print(f"wrote {json_path}")
    print(f"wrote {md_path}")
    if args.fail_on_exfil:
        return 3
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exfilpipe",
                                description="Static-plus-dynamic exfiltration "
                                            "triage for ARM Linux binaries")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seeded=True):
        sp.add_argument("--config", help="flat key=value configuration file")
        sp.add_argument("--out", help="output directory")
        if seeded:
            sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("inspect", help="print ELF metadata")
    sp.add_argument("binary")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("graph", help="export a graph artifact")
    sp.add_argument("binary")
    sp.add_argument("--kind", choices=("fcg", "icfg", "imports"), default="fcg")
    sp.add_argument("--format", choices=("graphml", "json"), default="graphml")
    sp.add_argument("--out", default=".")
    sp.set_defaults(func=cmd_graph)

    sp = sub.add_parser("train", help="train the classifier from a manifest")
    sp.add_argument("manifest")
    common(sp)
    sp.add_argument("--trees", type=int, default=None)
    sp.add_argument("--parallelism", type=int, default=None)
    sp.add_argument("--skip-bad", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("classify", help="classify one binary")
    sp.add_argument("binary")
    sp.add_argument("--model", required=True)
    sp.add_argument("--fail-on-exfil", action="store_true")
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("report", help="draft a breach notification")
    sp.add_argument("--sample", required=True, help="sample id (sha256)")
    sp.add_argument("--emulog", required=True)
    sp.add_argument("--pcap", action="append", default=[])
    sp.add_argument("--traces", nargs="*", default=[])
    sp.add_argument("--binary")
    sp.add_argument("--model")
    sp.add_argument("--offline", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("pipeline", help="run the full pipeline on one sample")
    sp.add_argument("binary")
    sp.add_argument("--model", required=True)
    sp.add_argument("--artifacts", help="directory of dynamic-analysis artifacts")
    sp.add_argument("--offline", action="store_true")
    sp.add_argument("--fail-on-exfil", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_pipeline)

    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PipelineError as exc:
        return _fail(exc)


if __name__ == "__main__":
    sys.exit(main())
