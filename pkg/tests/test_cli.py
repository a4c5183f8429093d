import json
from pathlib import Path

import pytest
import yaml

from fedseq.cli import main
from fedseq.config import ValidationError, load_config
from fedseq.ingest import deduplicate, generate_synthetic

SYNTH = {"users": 10, "apps": 8, "latent_dim": 4, "steps_per_user": 120}


def seed0_span_days():
    log = deduplicate(
        generate_synthetic(
            SYNTH["users"], SYNTH["apps"], SYNTH["latent_dim"],
            SYNTH["steps_per_user"], seed=0,
        )
    )
    return int((log.events[-1].timestamp - log.events[0].timestamp) // 86_400) + 1


def write_config(tmp_path, **overrides):
    span = seed0_span_days()
    config = {
        "environment": "static",
        "synthetic": dict(SYNTH),
        "models": ["random", "mru", "mfu", "sr", "sr_od", "mf", "seqmf"],
        "hyperparams": {"dim": 6, "reg": 0.1, "alpha": 0.1, "gamma": 0.5, "lr": 0.05},
        "seeds": [0],
        "train_days": span - 2,
        "val_days": 1,
        "test_days": 1,
        "train_rounds": 10,
        "pretrain_rounds": 8,
        "target_active_users": 4,
        "out_dir": str(tmp_path / "out"),
    }
    config.update(overrides)
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(config))
    return path


# --- validation ----------------------------------------------------------------


def test_minimal_config_resolves_defaults(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump({"synthetic": {"users": 5, "apps": 6}}))
    cfg = load_config(path)
    echo = cfg.echo()
    assert echo["hyperparams"]["dim"] == 32
    assert echo["hyperparams"]["reg"] == 0.1
    assert echo["hyperparams"]["lr"] == 0.05
    assert cfg.seeds == (0,)


def test_negative_epsilon_names_key(tmp_path):
    path = write_config(tmp_path, epsilon=-1.0)
    with pytest.raises(ValidationError, match="epsilon"):
        load_config(path)


def test_oversized_k_cross_field_error(tmp_path):
    # k must not exceed apps * dim for the chosen dataset
    path = write_config(tmp_path, k=8 * 6 + 1)
    with pytest.raises(ValidationError, match="k:"):
        load_config(path)


def test_unknown_key_rejected(tmp_path):
    path = write_config(tmp_path, turbo=True)
    with pytest.raises(ValidationError, match="turbo"):
        load_config(path)


def test_unknown_model_rejected(tmp_path):
    path = write_config(tmp_path, models=["random", "gru4rec"])
    with pytest.raises(ValidationError, match="gru4rec"):
        load_config(path)


def test_missing_dataset_rejected(tmp_path):
    path = write_config(tmp_path, synthetic=None, dataset=str(tmp_path / "nope.csv"))
    with pytest.raises(ValidationError, match="dataset"):
        load_config(path)


def test_env_override(tmp_path, monkeypatch):
    path = write_config(tmp_path)
    monkeypatch.setenv("FEDSEQ_EPSILON", "1.25")
    monkeypatch.setenv("FEDSEQ_K", "7")
    cfg = load_config(path)
    assert cfg.epsilon == 1.25
    assert cfg.k == 7


def test_env_override_bad_value(tmp_path, monkeypatch):
    path = write_config(tmp_path)
    monkeypatch.setenv("FEDSEQ_EPSILON", "lots")
    with pytest.raises(ValidationError, match="epsilon"):
        load_config(path)


# --- commands -------------------------------------------------------------------


def test_synth_writes_deterministic_events(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "synth_out"
    assert main(["synth", "--config", str(path), "--out", str(out)]) == 0
    events = (out / "seed0" / "events.csv").read_bytes()
    assert main(["synth", "--config", str(path), "--out", str(out)]) == 0
    assert (out / "seed0" / "events.csv").read_bytes() == events
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["seeds"] == [0]


def test_ingest_roundtrip(tmp_path):
    config_path = write_config(tmp_path)
    synth_out = tmp_path / "synth_out"
    main(["synth", "--config", str(config_path), "--out", str(synth_out)])
    events_file = synth_out / "seed0" / "events.csv"

    ingest_cfg = write_config(tmp_path, dataset=str(events_file), synthetic=None)
    out = tmp_path / "ingest_out"
    assert main(["ingest", "--config", str(ingest_cfg), "--out", str(out)]) == 0
    stats = json.loads((out / "stats.json").read_text())
    assert stats["users"] == 10
    assert stats["apps"] == 8
    assert stats["events_clean"] <= stats["events_raw"]
    assert (out / "cleaned.csv").exists()


def test_static_experiment_writes_full_table(tmp_path):
    path = write_config(tmp_path)
    out = tmp_path / "static_out"
    assert main(["static", "--config", str(path), "--out", str(out)]) == 0
    metrics = (out / "seed0" / "metrics.csv").read_text().splitlines()
    assert metrics[0] == "environment,cycle,model,metric,n,value"
    assert len(metrics) == 1 + 7 * 9  # 7 models x 9 metric columns
    assert (out / "seed0" / "round_log_train.csv").exists()
    # byte-identical rerun with the same seed
    first = (out / "seed0" / "metrics.csv").read_bytes()
    assert main(["static", "--config", str(path), "--out", str(out)]) == 0
    assert (out / "seed0" / "metrics.csv").read_bytes() == first


def test_dynamic_experiment_emits_regime_plot_rows(tmp_path):
    path = write_config(
        tmp_path,
        environment="dynamic",
        models=["seqmf"],
        regimes=["full", "rare", "global"],
        q_update_period=2,
    )
    out = tmp_path / "dyn_out"
    assert main(["dynamic", "--config", str(path), "--out", str(out)]) == 0
    plot = (out / "seed0" / "plot_data.csv").read_text().splitlines()
    assert plot[0] == "cycle,model,regime,hr5,delta_hr5_cum"
    body = [line.split(",") for line in plot[1:]]
    evaluated_cycles = {row[0] for row in body}
    # one row per regime per evaluated cycle
    assert len(body) == 3 * len(evaluated_cycles)
    assert (out / "seed0" / "round_log_seqmf-full.csv").exists()
    assert (out / "seed0" / "q_pretrained_seqmf-full.txt").exists()


def test_privacy_passthrough_reference_has_zero_delta(tmp_path):
    path = write_config(
        tmp_path,
        environment="dynamic",
        mechanisms=["none"],
        epsilon=4.5,
        k=3,
        q_update_period=2,
    )
    out = tmp_path / "priv_out"
    assert main(["privacy", "--config", str(path), "--out", str(out)]) == 0
    plot = (out / "seed0" / "plot_data.csv").read_text().splitlines()
    rows = [line.split(",") for line in plot[1:] if line]
    assert rows
    for row in rows:
        assert row[2] == "none"
        assert float(row[4]) == 0.0


def test_bad_config_exit_code(tmp_path):
    path = write_config(tmp_path, epsilon=-2.0)
    assert main(["static", "--config", str(path)]) == 2


def test_missing_config_exit_code(tmp_path):
    assert main(["static", "--config", str(tmp_path / "absent.yaml")]) == 2


def test_seed_flag_overrides_config(tmp_path):
    path = write_config(tmp_path, seeds=[0, 1])
    out = tmp_path / "seeded"
    assert main(["synth", "--config", str(path), "--seed", "5", "--out", str(out)]) == 0
    assert (out / "seed5").exists()
    assert not (out / "seed0").exists()
