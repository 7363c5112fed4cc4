import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from mapss.audio import Utterance, write_wav
from mapss.cli import main as cli_main
from mapss.pipeline import RunConfig, dump_bank, run_evaluation

RATE = 16000


def _voice_pair(seconds=1.2, seed=0):
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * RATE)) / RATE
    a = 0.4 * np.sin(2 * np.pi * 130 * t) * (0.6 + 0.4 * np.sin(2 * np.pi * 2 * t))
    b_sig = 0.3 * np.sign(np.sin(2 * np.pi * 210 * t)) \
        * (0.6 + 0.4 * np.sin(2 * np.pi * 3.1 * t))
    b_sig = b_sig + 0.02 * rng.standard_normal(t.size)
    a = a + 0.02 * rng.standard_normal(t.size)
    return a, b_sig


def _micro_setup(tmp_path, scenario="english", n_systems=1, seconds=1.2):
    a, b = _voice_pair(seconds=seconds)
    refs = []
    for i, x in enumerate((a, b)):
        path = tmp_path / f"ref{i}.wav"
        write_wav(path, Utterance(x, RATE, source_id=i))
        refs.append(str(path))
    systems = {}
    rng = np.random.default_rng(9)
    for q in range(n_systems):
        leak = 0.05 + 0.12 * q
        paths = []
        for i, x in enumerate((a, b)):
            other = b if i == 0 else a
            y = (1 - leak) * x + leak * other + 0.01 * rng.standard_normal(x.size)
            path = tmp_path / f"sys{q}_out{i}.wav"
            write_wav(path, Utterance(y, RATE, source_id=i))
            paths.append(str(path))
        systems[f"sys{q}"] = paths
    return refs, systems


def _micro_config(tmp_path, scenario="english", n_systems=1, **overrides):
    refs, systems = _micro_setup(tmp_path, scenario, n_systems)
    cfg = RunConfig(scenario=scenario, references=refs, systems=systems,
                    out_dir=str(tmp_path / "out"), trial="t0", seed=1,
                    tau=0.999, **overrides)
    return cfg


def test_micro_run_produces_scores(tmp_path):
    cfg = _micro_config(tmp_path)
    report = evaluate_from_cfg(cfg)
    assert report["scenario"] == "english"
    hist = report["frame_histograms"]
    assert hist["ps"] and all(0.0 <= v <= 1.0 for v in hist["ps"])
    assert all(0.0 <= v <= 1.0 for v in hist["pm"])
    utt = report["utterances"]
    assert {row["system"] for row in utt} == {"sys0"}
    for row in utt:
        assert row["ps_radius"] >= 0 and row["ps_half_width"] >= 0
    out = tmp_path / "out"
    assert (out / "frames_sys0.jsonl").exists()
    assert (out / "utterances.csv").exists()
    assert (out / "report.json").exists()


def evaluate_from_cfg(cfg):
    return run_evaluation(cfg)


def test_music_drums_preset_applies_alpha_zero(tmp_path):
    cfg = _micro_config(tmp_path, scenario="music_drums")
    assert cfg.alpha == 0.0
    cfg_en = _micro_config(tmp_path, scenario="english")
    assert cfg_en.alpha == 1.0
    # explicit override wins over the preset
    cfg_ov = _micro_config(tmp_path, scenario="music_drums", alpha=0.7)
    assert cfg_ov.alpha == 0.7


def test_music_scenario_runs_with_alpha_zero(tmp_path):
    cfg = _micro_config(tmp_path, scenario="music_drums")
    report = run_evaluation(cfg)
    assert report["alpha"] == 0.0
    assert report["n_active_frames"] > 0


def test_rerun_is_byte_identical(tmp_path):
    cfg = _micro_config(tmp_path)
    run_evaluation(cfg)
    first = (tmp_path / "out" / "frames_sys0.jsonl").read_bytes()
    run_evaluation(cfg)
    second = (tmp_path / "out" / "frames_sys0.jsonl").read_bytes()
    assert first == second


def test_resume_skips_done_frames(tmp_path):
    cfg = _micro_config(tmp_path)
    run_evaluation(cfg)
    jsonl = tmp_path / "out" / "frames_sys0.jsonl"
    full = jsonl.read_text().splitlines()
    cut = len(full) // 2
    if cut % 2:  # keep whole frames (two sources per frame)
        cut -= 1
    jsonl.write_text("\n".join(full[:cut]) + "\n")
    cfg.resume = True
    run_evaluation(cfg)
    resumed = jsonl.read_text().splitlines()
    assert sorted(resumed) == sorted(full)
    assert resumed[:cut] == full[:cut]  # existing lines untouched


def test_correlation_report_with_mos(tmp_path):
    cfg = _micro_config(tmp_path, n_systems=4)
    # fabricate ratings anti-correlated with leakage
    mos_path = tmp_path / "mos.csv"
    rows = ["trial,system,source,mos"]
    for q in range(4):
        for src in (0, 1):
            rows.append(f"t0,sys{q},{src},{90 - 20 * q}")
    mos_path.write_text("\n".join(rows) + "\n")
    cfg.mos = str(mos_path)
    report = run_evaluation(cfg)
    for measure in ("ps", "pm"):
        section = report.get(f"{measure}_correlation")
        assert section is not None
        assert -1.0 <= section["pcc"] <= 1.0
        assert section["n_pairs"] == 2
        bounds = report[f"{measure}_correlation_bounds"]
        for metric in ("pcc", "srcc"):
            assert bounds[metric]["radius"] >= 0.0
            assert bounds[metric]["half_width"] >= 0.0
    # separation should degrade with leakage, tracking the fabricated MOS
    assert report["ps_correlation"]["pcc"] > 0.5


def test_file_encoder_round_trip(tmp_path):
    # Scores from precomputed embeddings match the raw-encoder run when the
    # file holds exactly the raw frame vectors.
    from mapss import distortions as dst
    from mapss import preprocess as pre
    from mapss.audio import read_wav, Role
    from mapss.embeddings import write_embedding_file
    from mapss.pipeline import _safe_normalize, _variant_matrix

    cfg = _micro_config(tmp_path)
    refs = [_safe_normalize(read_wav(p, role=Role.REFERENCE, source_id=i),
                            cfg.target_lufs)
            for i, p in enumerate(cfg.references)]
    outs = [_safe_normalize(read_wav(p, role=Role.OUTPUT, source_id=i),
                            cfg.target_lufs)
            for i, p in enumerate(cfg.systems["sys0"])]
    frame_len, hop = pre.frame_geometry(cfg.scenario, RATE)
    plan = pre.detect_overlap_frames(refs, frame_len, hop)
    for variant in ("PS", "PM"):
        banks = {r.source_id: [
            _safe_normalize(u, cfg.target_lufs)
            for u in dst.generate_bank(r, variant, seed=cfg.bank_seed)[0]]
            for r in refs}
        frames = [
            _variant_matrix({u.source_id: u for u in outs},
                            {u.source_id: u for u in refs},
                            None, plan, f, banks)
            for f in plan.active_frames
        ]
        write_embedding_file(tmp_path / f"emb_{variant}.mapssemb", frames)

    raw_report = run_evaluation(cfg)
    cfg_file = _micro_config(tmp_path)
    cfg_file.encoder = "file"
    cfg_file.embeddings = {v: str(tmp_path / f"emb_{v}.mapssemb")
                           for v in ("PS", "PM")}
    cfg_file.out_dir = str(tmp_path / "out_file")
    file_report = run_evaluation(cfg_file)
    # float32 storage rounds the inputs; scores agree to that precision
    a = raw_report["frame_histograms"]["ps"]
    b = file_report["frame_histograms"]["ps"]
    np.testing.assert_allclose(a, b, atol=5e-4)


def test_bank_dump(tmp_path):
    a, _ = _voice_pair()
    ref_path = tmp_path / "ref.wav"
    write_wav(ref_path, Utterance(a, RATE))
    written = dump_bank(ref_path, "PM", seed=3, out_dir=tmp_path / "bank")
    assert len(written) >= 40
    assert (tmp_path / "bank" / "bank.json").exists()
    assert (tmp_path / "bank" / written[0]).exists()


def test_config_yaml_round_trip(tmp_path):
    refs, systems = _micro_setup(tmp_path)
    config = {
        "scenario": "spanish",
        "references": [str(p) for p in refs],
        "systems": systems,
        "out": "results",
        "seed": 5,
        "tau": 0.98,
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(config))
    cfg = RunConfig.from_yaml(path)
    assert cfg.scenario == "spanish"
    assert cfg.alpha == 1.0
    assert cfg.tau == 0.98
    assert cfg.out_dir == str(tmp_path / "results")
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**config, "surprise": 1}))
    with pytest.raises(ValueError):
        RunConfig.from_yaml(bad)


def test_cli_demo_eval_and_bank(tmp_path):
    runner = CliRunner()
    demo_dir = tmp_path / "demo"
    result = runner.invoke(cli_main, ["demo", "--out", str(demo_dir),
                                      "--systems", "1"])
    assert result.exit_code == 0, result.output
    assert (demo_dir / "config.yaml").exists()

    # shrink the demo to a micro run for CLI testing
    (tmp_path / "micro").mkdir()
    refs, systems = _micro_setup(tmp_path / "micro")
    config = {"scenario": "english", "references": refs, "systems": systems,
              "out": "results", "seed": 1, "tau": 0.999}
    config_path = tmp_path / "micro" / "config.yaml"
    config_path.write_text(yaml.safe_dump(config))
    result = runner.invoke(cli_main, ["eval", "--config", str(config_path)])
    assert result.exit_code == 0, result.output
    assert "report written" in result.output
    report = json.loads((tmp_path / "micro" / "results" / "report.json")
                        .read_text())
    assert report["seed"] == 1

    bank_dir = tmp_path / "bankdump"
    result = runner.invoke(cli_main, ["bank", "--ref", refs[0],
                                      "--variant", "PS",
                                      "--out", str(bank_dir)])
    assert result.exit_code == 0, result.output
    assert "distorted copies" in result.output


def test_cli_sweep(tmp_path):
    refs, systems = _micro_setup(tmp_path)
    config = {"scenario": "english", "references": refs, "systems": systems,
              "out": "results", "seed": 1, "tau": 0.999}
    config_path = tmp_path / "config.yaml"
    config_path.write_text(yaml.safe_dump(config))
    runner = CliRunner()
    result = runner.invoke(cli_main, ["sweep-delay", "--config",
                                      str(config_path), "--delays", "0,30"])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "results" / "sweep.csv").exists()
    assert (tmp_path / "results" / "delay_30ms" / "report.json").exists()


def test_spectra_dump_and_nested_agg_keys(tmp_path):
    refs, systems = _micro_setup(tmp_path)
    config = {"scenario": "english", "references": refs, "systems": systems,
              "out": "results", "seed": 1, "tau": 0.999,
              "dump_spectra": True,
              "agg": {"window": 20, "hop": 10, "p": 4}}
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(config))
    cfg = RunConfig.from_yaml(path)
    assert (cfg.agg_window, cfg.agg_hop, cfg.agg_p) == (20, 10, 4)
    run_evaluation(cfg)
    spectra_path = tmp_path / "results" / "spectra_sys0.jsonl"
    assert spectra_path.exists()
    first = json.loads(spectra_path.read_text().splitlines()[0])
    assert first["variant"] in ("PS", "PM")
    assert first["d"] <= len(first["eigenvalues"])
