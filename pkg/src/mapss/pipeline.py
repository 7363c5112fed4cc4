"""End-to-end orchestration: config, per-frame scoring, aggregation, report.

A run loads reference and per-system output waveforms, normalizes loudness,
detects overlap frames, synthesizes both distortion-bank variants, builds one
diffusion map per (frame, variant), scores every active source, attaches
frame bounds, aggregates to utterance level and renders the report. All
stochastic stages derive from the run seed.
"""

import csv
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import aggregate as agg
from . import bounds as bnd
from . import distortions as dst
from . import evalreport as rpt
from . import manifold as mfd
from . import measures as msr
from . import preprocess as pre
from .audio import Role, Utterance, read_wav, write_wav
from .embeddings import (
    KIND_DISTORTION,
    KIND_OUTPUT,
    KIND_REFERENCE,
    EmbeddingMatrix,
    assemble_frame_set,
    read_embedding_file,
)
from .errors import MapssError, SilentInput

log = logging.getLogger("mapss")

SCENARIOS = ("english", "spanish", "music_drums", "music_nodrums")


@dataclass
class RunConfig:
    """Resolved run parameters; scenario presets fill unset fields."""

    scenario: str = "english"
    references: list = field(default_factory=list)
    systems: dict = field(default_factory=dict)      # name -> list of output paths
    out_dir: str = "mapss_out"
    trial: str = "trial0"
    encoder: str = "raw"                             # "raw" or "file"
    embeddings: dict = field(default_factory=dict)   # variant -> path, for "file"
    mos: str | None = None
    seed: int = 0
    alpha: float | None = None                       # None -> scenario preset
    t: int = 1
    tau: float = 0.99
    delta: float = 0.05
    target_lufs: float = pre.DEFAULT_TARGET_LUFS
    activity_db: float = pre.DEFAULT_ACTIVITY_DB
    frame_ms: float | None = None
    hop_ms: float | None = None
    agg_window: int = 30
    agg_hop: int = 15
    agg_p: float = 6.0
    mc_draws: int = 10_000
    bank_seed: int | None = None                     # None -> run seed
    bank_config: str | None = None
    bound_constants: dict = field(default_factory=dict)  # c_trunc/c_cov/c1/c2
    rho_within_trial: float = 0.0
    workers: int = 1
    resume: bool = False
    plots: bool = False
    dump_spectra: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"scenario must be one of {SCENARIOS}")
        if self.encoder not in ("raw", "file"):
            raise ValueError("encoder must be 'raw' or 'file'")
        if self.alpha is None:
            self.alpha = 0.0 if self.scenario == "music_drums" else 1.0
        if self.bank_seed is None:
            self.bank_seed = self.seed

    @property
    def aggregation(self) -> dict:
        return {"PS": "pesq", "PM": "average"}

    @classmethod
    def from_yaml(cls, path) -> "RunConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if "outputs" in raw:  # single anonymous system shorthand
            raw.setdefault("systems", {})["system0"] = raw.pop("outputs")
        if "out" in raw:
            raw["out_dir"] = raw.pop("out")
        if "agg" in raw:  # nested aggregation keys
            agg_keys = raw.pop("agg")
            for key in ("window", "hop", "p"):
                if key in agg_keys:
                    raw[f"agg_{key}"] = agg_keys[key]
        if isinstance(raw.get("embeddings"), str):
            raw["embeddings"] = {"PS": raw["embeddings"], "PM": raw["embeddings"]}
        known = {f.name for f in cls.__dataclass_fields__.values()}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = Path(path).parent
        cfg = cls(**raw)
        cfg.references = [str((base / p)) if not Path(p).is_absolute() else p
                          for p in cfg.references]
        cfg.systems = {name: [str(base / p) if not Path(p).is_absolute() else p
                              for p in paths]
                       for name, paths in cfg.systems.items()}
        for key in ("mos", "bank_config"):
            value = getattr(cfg, key)
            if value and not Path(value).is_absolute():
                setattr(cfg, key, str(base / value))
        cfg.embeddings = {k: (str(base / v) if not Path(v).is_absolute() else v)
                          for k, v in cfg.embeddings.items()}
        if not Path(cfg.out_dir).is_absolute():
            cfg.out_dir = str(base / cfg.out_dir)
        return cfg


def _safe_normalize(u: Utterance, target: float) -> Utterance:
    try:
        return pre.normalize_loudness(u, target)
    except SilentInput:
        log.warning("source %s (%s): loudness unmeasurable, left unscaled",
                    u.source_id, u.role.value)
        return u


@dataclass
class FrameRecord:
    """Flat, JSON-ready record of one (frame, source) score pair."""

    frame: int
    source: int
    ps: float | None = None
    pm: float | None = None
    a_hat: float | None = None
    b_hat: float | None = None
    a_sq_hat: float | None = None
    j_star: int | None = None
    d: int | None = None
    n: int | None = None
    d_pm: int | None = None
    n_pm: int | None = None
    ks_statistic: float | None = None
    ks_pass: bool | None = None
    ps_radius: float | None = None
    ps_half_width: float | None = None
    pm_radius: float | None = None
    pm_half_width: float | None = None
    pm_valid: bool = True


def _variant_matrix(outputs, references, banks, plan, f, variant_banks):
    """EmbeddingMatrix of frame f for one bank variant under the raw encoder."""
    active = plan.active_sources[f]
    sl = plan.frame_slice(f)
    outs = {i: outputs[i].samples[sl] for i in active}
    refs = {i: references[i].samples[sl] for i in active}
    bank_rows = {i: [u.samples[sl] for u in variant_banks[i]] for i in active}
    return assemble_frame_set(outs, refs, bank_rows, f)


def _score_variant_frame(matrix: EmbeddingMatrix, cfg: RunConfig, variant: str):
    """Graph, spectrum and per-source scores/bounds for one variant frame."""
    graph = mfd.build_graph(matrix.vectors, alpha=cfg.alpha)
    spectrum = mfd.decompose(graph, t=cfg.t, tau=cfg.tau)
    full = spectrum.coordinates()
    trunc = full[:, : spectrum.dim]
    row_sources, row_kinds = matrix.row_arrays()
    consts = cfg.bound_constants
    spectrum_info = None
    if cfg.dump_spectra:
        spectrum_info = {"frame": matrix.frame_index, "variant": variant,
                         "d": spectrum.dim, "n": matrix.n_items,
                         "eigenvalues": [round(float(v), 9)
                                         for v in spectrum.eigenvalues]}

    out = {}
    if variant == "PS":
        scores = msr.score_frame(trunc, row_sources, row_kinds, with_ks=False,
                                 measures=("ps",))
        geometries = {
            i: bnd.ClusterGeometry(
                full[(row_sources == i) & (row_kinds != KIND_OUTPUT)],
                spectrum.dim)
            for i in matrix.sources
        }
        for s in scores:
            out_row = np.flatnonzero((row_sources == s.source)
                                     & (row_kinds == KIND_OUTPUT))[0]
            bound = bnd.ps_frame_bound_from_geometry(
                full[out_row], geometries, s.source, s.nearest_foreign,
                s.a_hat, s.b_hat, delta=cfg.delta,
                c_cov=consts.get("c_cov", 1.0))
            out[s.source] = (s, bound, spectrum.dim, matrix.n_items)
    else:
        scores = msr.score_frame(trunc, row_sources, row_kinds, with_ks=True,
                                 measures=("pm",))
        for s in scores:
            if s.pm is None:
                out[s.source] = (s, None, spectrum.dim, matrix.n_items)
                continue
            mask = row_sources == s.source
            ref_row = np.flatnonzero(mask & (row_kinds == KIND_REFERENCE))[0]
            out_row = np.flatnonzero(mask & (row_kinds == KIND_OUTPUT))[0]
            dist_rows = np.flatnonzero(mask & (row_kinds == KIND_DISTORTION))
            cluster = msr.ClusterStatsPM.from_members(trunc[ref_row],
                                                      trunc[dist_rows])
            g_set = msr.squared_distance_set(cluster, trunc[dist_rows])
            bound = bnd.pm_frame_bound(
                full[out_row], full[ref_row], full[dist_rows], s.gamma,
                g_set, s.a_sq_hat, spectrum.dim, delta=cfg.delta,
                c1=consts.get("c1", 1.0), c2=consts.get("c2", 1.0))
            out[s.source] = (s, bound, spectrum.dim, matrix.n_items)
    return out, spectrum_info


def _frame_records(f, ps_result, pm_result) -> list[FrameRecord]:
    records = []
    for source in sorted(ps_result):
        s_ps, b_ps, d_ps, n_ps = ps_result[source]
        rec = FrameRecord(frame=f, source=source, ps=s_ps.ps, a_hat=s_ps.a_hat,
                          b_hat=s_ps.b_hat, j_star=s_ps.nearest_foreign,
                          d=d_ps, n=n_ps,
                          ps_radius=b_ps.radius, ps_half_width=b_ps.half_width)
        if source in pm_result:
            s_pm, b_pm, d_pm, n_pm = pm_result[source]
            rec.pm = s_pm.pm
            rec.a_sq_hat = s_pm.a_sq_hat
            rec.ks_statistic = s_pm.ks_statistic
            rec.ks_pass = s_pm.ks_pass
            rec.d_pm, rec.n_pm = d_pm, n_pm
            if b_pm is not None:
                rec.pm_radius = b_pm.radius
                rec.pm_half_width = b_pm.half_width
                rec.pm_valid = b_pm.valid
            else:
                rec.pm_valid = s_pm.pm is not None
        records.append(rec)
    return records


def evaluate_system(references: list[Utterance], outputs: list[Utterance],
                    plan: pre.FramePlan, banks: dict, cfg: RunConfig,
                    embeddings_by_variant: dict | None = None,
                    done_frames: set | None = None):
    """Per-frame (records, spectra) of one system, yielded in frame order.

    ``banks`` maps variant -> source -> list of distorted utterances."""
    refs = {u.source_id: u for u in references}
    outs = {u.source_id: u for u in outputs}
    done = done_frames or set()
    frames = [f for f in plan.active_frames if f not in done]

    def matrices_for(f):
        out = {}
        for variant in ("PS", "PM"):
            if cfg.encoder == "file":
                table = embeddings_by_variant[variant]
                if f not in table:
                    raise MapssError(f"frame {f} missing from {variant} embeddings")
                out[variant] = table[f]
            else:
                out[variant] = _variant_matrix(outs, refs, None, plan, f,
                                               banks[variant])
        return out

    def work(f):
        try:
            mats = matrices_for(f)
            ps_result, ps_spectrum = _score_variant_frame(mats["PS"], cfg, "PS")
            pm_result, pm_spectrum = _score_variant_frame(mats["PM"], cfg, "PM")
        except MapssError as exc:
            raise RuntimeError(f"frame {f}: {exc}") from exc
        spectra = [rec for rec in (ps_spectrum, pm_spectrum) if rec]
        return _frame_records(f, ps_result, pm_result), spectra

    # Per-frame matrices are small; multithreaded BLAS only adds spin-wait
    # overhead here, so pin it to one thread for the frame loop.
    with threadpool_limits(limits=1, user_api="blas"):
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
                yield from pool.map(work, frames)
        else:
            for f in frames:
                yield work(f)


def _utterance_rows(system: str, cfg: RunConfig, records: list[FrameRecord]):
    """Aggregate frame records of one system to per-source utterance rows."""
    rows = []
    pool_cfg = agg.AggregationConfig(window=cfg.agg_window, hop=cfg.agg_hop,
                                     p=cfg.agg_p)
    sources = sorted({r.source for r in records})
    for source in sources:
        recs = sorted((r for r in records if r.source == source),
                      key=lambda r: r.frame)
        ps_vals = [r.ps for r in recs if r.ps is not None]
        pm_recs = [r for r in recs if r.pm is not None and r.pm_valid]
        row = {"trial": cfg.trial, "system": system, "source": source,
               "n_frames": len(recs)}
        if ps_vals:
            u = agg.pooled_input(ps_vals, pool_cfg)
            row["ps_utt"] = agg.logistic_map(u)
            row["ps_utt_01"] = agg.rescale_pooled(row["ps_utt"])
            b, h = bnd.propagate_utterance(
                [r.ps_radius for r in recs if r.ps is not None],
                [r.ps_half_width for r in recs if r.ps is not None],
                "pesq", confidence=1.0 - cfg.delta,
                window=cfg.agg_window, hop=cfg.agg_hop, pooled_input=u)
            row["ps_radius"], row["ps_half_width"] = b, h
        if pm_recs:
            row["pm_utt"] = agg.aggregate_average([r.pm for r in pm_recs])
            b, h = bnd.propagate_utterance(
                [r.pm_radius for r in pm_recs],
                [r.pm_half_width for r in pm_recs],
                "average", confidence=1.0 - cfg.delta)
            row["pm_radius"], row["pm_half_width"] = b, h
        rows.append(row)
    return rows


def _correlation_section(cfg: RunConfig, utt_rows, mos_rows, measure: str):
    """Scenario correlations plus propagated bounds for one measure."""
    value_key = "ps_utt" if measure == "ps" else "pm_utt"
    table = rpt.ScoreTable()
    for row in utt_rows:
        if value_key in row:
            table.add(row["trial"], row["system"], row["source"],
                      **{measure: row[value_key]})
    table.attach_mos(mos_rows)
    vectors = table.vectors(measure)
    if not vectors or any(v[0].size < 3 for v in vectors.values()):
        return None, None
    section = rpt.scenario_report(table, measure, min_systems=3)

    bound_pairs = {}
    for metric in ("pcc", "srcc"):
        by_trial = {}
        for (trial, source), (values, mos) in sorted(vectors.items()):
            radii, halves = [], []
            for row in utt_rows:
                if (row["trial"], row["source"]) == (trial, source) and value_key in row:
                    radii.append(row.get(f"{measure}_radius", 0.0))
                    halves.append(row.get(f"{measure}_half_width", 0.0))
            cb = bnd.propagate_correlation(
                values, radii, halves, mos, metric,
                confidence=1.0 - cfg.delta, mc_draws=cfg.mc_draws, seed=cfg.seed)
            by_trial.setdefault(trial, []).append(cb)
        combined = bnd.combine_scenario(by_trial, metric,
                                        confidence=1.0 - cfg.delta,
                                        rho_within_trial=cfg.rho_within_trial)
        bound_pairs[metric] = {"radius": combined.radius,
                               "half_width": combined.half_width,
                               "confidence": combined.confidence}
    return section, bound_pairs


def run_evaluation(cfg: RunConfig) -> dict:
    """Full evaluation run; returns the report dict and writes all artifacts."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    references = [
        _safe_normalize(read_wav(p, role=Role.REFERENCE, source_id=i),
                        cfg.target_lufs)
        for i, p in enumerate(cfg.references)
    ]
    systems = {
        name: [_safe_normalize(read_wav(p, role=Role.OUTPUT, source_id=i),
                               cfg.target_lufs)
               for i, p in enumerate(paths)]
        for name, paths in cfg.systems.items()
    }
    return evaluate(references, systems, cfg)


def evaluate(references: list[Utterance], systems: dict, cfg: RunConfig) -> dict:
    """Evaluation over already-loaded (and normalized) waveforms."""
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rate = references[0].sample_rate
    frame_len, hop = pre.frame_geometry(cfg.scenario, rate)
    if cfg.frame_ms is not None:
        frame_len = int(round(cfg.frame_ms * rate / 1000.0))
    if cfg.hop_ms is not None:
        hop = int(round(cfg.hop_ms * rate / 1000.0))
    plan = pre.detect_overlap_frames(references, frame_len, hop,
                                     activity_db=cfg.activity_db)
    log.info("%d of %d frames have overlapping sources",
             len(plan.active_frames), plan.n_frames)

    banks = {}
    bank_cfg = dst.load_bank_config(cfg.bank_config) if cfg.bank_config else None
    if cfg.encoder == "raw":
        for variant in ("PS", "PM"):
            banks[variant] = {}
            for ref in references:
                distorted, _ = dst.generate_bank(ref, variant,
                                                 seed=cfg.bank_seed,
                                                 config=bank_cfg)
                banks[variant][ref.source_id] = [
                    _safe_normalize(u, cfg.target_lufs) for u in distorted]

    embeddings_by_variant = None
    if cfg.encoder == "file":
        embeddings_by_variant = {}
        for variant in ("PS", "PM"):
            path = cfg.embeddings.get(variant)
            if path is None:
                raise MapssError(f"encoder 'file' needs an embeddings path for {variant}")
            embeddings_by_variant[variant] = {
                m.frame_index: m for m in read_embedding_file(path)}

    all_utt_rows = []
    frame_values = {"ps": {}, "pm": {}}
    for name in sorted(systems):
        outputs = systems[name]
        jsonl_path = out_dir / f"frames_{name}.jsonl"
        done = set()
        existing = []
        if cfg.resume and jsonl_path.exists():
            with open(jsonl_path) as fh:
                for line in fh:
                    rec = json.loads(line)
                    existing.append(FrameRecord(**rec))
                    done.add(rec["frame"])
        # Stream results to disk frame by frame so partial progress survives
        # interruption and --resume can pick it up.
        mode = "a" if cfg.resume and existing else "w"
        records = []
        spectra_fh = (open(out_dir / f"spectra_{name}.jsonl", mode)
                      if cfg.dump_spectra else None)
        with open(jsonl_path, mode) as fh:
            for frame_records, frame_spectra in evaluate_system(
                    references, outputs, plan, banks, cfg,
                    embeddings_by_variant, done_frames=done):
                for rec in sorted(frame_records,
                                  key=lambda r: (r.frame, r.source)):
                    fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")
                fh.flush()
                records.extend(frame_records)
                if spectra_fh is not None:
                    for rec in sorted(frame_spectra,
                                      key=lambda r: (r["frame"], r["variant"])):
                        spectra_fh.write(json.dumps(rec, sort_keys=True) + "\n")
        if spectra_fh is not None:
            spectra_fh.close()
        records = existing + records
        all_utt_rows.extend(_utterance_rows(name, cfg, records))
        for measure in ("ps", "pm"):
            for rec in records:
                value = getattr(rec, measure)
                if value is not None and (measure == "ps" or rec.pm_valid):
                    key = (name, rec.source)
                    frame_values[measure].setdefault(key, []).append(value)

    utt_path = out_dir / "utterances.csv"
    fieldnames = ["trial", "system", "source", "n_frames", "ps_utt", "ps_utt_01",
                  "ps_radius", "ps_half_width", "pm_utt", "pm_radius",
                  "pm_half_width"]
    with open(utt_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in sorted(all_utt_rows,
                          key=lambda r: (r["system"], r["source"])):
            writer.writerow({k: row.get(k) for k in fieldnames})

    report = {
        "scenario": cfg.scenario,
        "trial": cfg.trial,
        "alpha": cfg.alpha,
        "t": cfg.t,
        "tau": cfg.tau,
        "delta": cfg.delta,
        "seed": cfg.seed,
        "n_active_frames": len(plan.active_frames),
        "systems": sorted(systems),
        "utterances": sorted(all_utt_rows, key=lambda r: (r["system"], r["source"])),
    }

    mos_rows = rpt.read_mos_csv(cfg.mos) if cfg.mos else []
    for measure in ("ps", "pm"):
        if mos_rows:
            section, bounds_section = _correlation_section(
                cfg, all_utt_rows, mos_rows, measure)
            if section:
                report[f"{measure}_correlation"] = section
                report[f"{measure}_correlation_bounds"] = bounds_section

    # Complementarity curve over aligned frame pairs, grouped per utterance.
    ps_lists, pm_lists = [], []
    for key in sorted(frame_values["ps"]):
        ps_seq = frame_values["ps"].get(key, [])
        pm_seq = frame_values["pm"].get(key, [])
        n = min(len(ps_seq), len(pm_seq))
        if n:
            ps_lists.append(np.asarray(ps_seq[:n]))
            pm_lists.append(np.asarray(pm_seq[:n]))
    if ps_lists and sum(len(a) for a in ps_lists) >= rpt.NMI_MIN_FRAMES:
        report["nmi"] = rpt.nmi_thresholded(ps_lists, pm_lists)
    report["frame_histograms"] = {
        "ps": [v for seq in frame_values["ps"].values() for v in seq],
        "pm": [v for seq in frame_values["pm"].values() for v in seq],
    }

    rpt.write_report(report, out_dir, plots=cfg.plots)
    return report


def misalignment_sweep(cfg: RunConfig, delays_ms: list[float]) -> list[dict]:
    """One evaluation per artificial output delay; returns the summary table."""
    references = [
        _safe_normalize(read_wav(p, role=Role.REFERENCE, source_id=i),
                        cfg.target_lufs)
        for i, p in enumerate(cfg.references)
    ]
    base_systems = {
        name: [_safe_normalize(read_wav(p, role=Role.OUTPUT, source_id=i),
                               cfg.target_lufs)
               for i, p in enumerate(paths)]
        for name, paths in cfg.systems.items()
    }
    table = []
    root = Path(cfg.out_dir)
    for delay in delays_ms:
        sub_cfg = RunConfig(**{**asdict(cfg),
                               "out_dir": str(root / f"delay_{delay:g}ms")})
        delayed = {
            name: [pre.inject_delay(u, delay) for u in outs]
            for name, outs in base_systems.items()
        }
        report = evaluate(references, delayed, sub_cfg)
        hist = report["frame_histograms"]
        row = {"delay_ms": delay,
               "mean_ps": float(np.mean(hist["ps"])) if hist["ps"] else None,
               "mean_pm": float(np.mean(hist["pm"])) if hist["pm"] else None}
        for measure in ("ps", "pm"):
            section = report.get(f"{measure}_correlation")
            if section:
                row[f"{measure}_pcc"] = section["pcc"]
                row[f"{measure}_srcc"] = section["srcc"]
        table.append(row)
    with open(root / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=sorted({k for r in table for k in r}))
        writer.writeheader()
        writer.writerows(table)
    return table


def dump_bank(ref_path, variant: str, seed: int, out_dir,
              bank_config: str | None = None,
              target_lufs: float = pre.DEFAULT_TARGET_LUFS) -> list[str]:
    """Write every distorted copy of a reference to disk for auditing."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ref = _safe_normalize(read_wav(ref_path), target_lufs)
    config = dst.load_bank_config(bank_config) if bank_config else None
    distorted, specs = dst.generate_bank(ref, variant, seed=seed, config=config)
    written = []
    for p, (u, spec) in enumerate(zip(distorted, specs), start=1):
        name = f"{p:03d}_{spec.family}.wav"
        write_wav(out_dir / name, u.with_samples(np.clip(u.samples, -1, 1)))
        written.append(name)
    manifest = [{"index": s.index + 1, "family": s.family, "params": s.params}
                for s in specs]
    (out_dir / "bank.json").write_text(json.dumps(manifest, indent=2, default=str))
    return written
