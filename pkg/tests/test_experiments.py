import textwrap

import pytest
import yaml

from phibal.cli import EXIT_CONFIG, EXIT_OK, main
from phibal.config import (
    ConfigError,
    config_from_dict,
    config_to_dict,
    parse_config,
    with_seed,
)
from phibal.experiments import (
    CSV_SCHEMA,
    ExperimentPlan,
    config_digest,
    expand_plan,
    read_run_csv,
    run_plan,
    summarize_runs,
    write_run_csv,
)
from phibal.training import TrainConfig, train

TINY = textwrap.dedent(
    """
    model: {layers: 1, experts: 4, top_k: 2, dim: 6, ffn_dim: 8}
    balance: {mechanism: phi, phi: neg_shannon, eta: 0.7, alpha: 0.01}
    corpus: {domains: 3, cluster_scale: 0.4, seed: 0}
    train: {batch_tokens: 16, steps: 30, eval_every: 10, eval_tokens: 64, seed: 0, load_window: 20}
    """
)


def write_tiny_config(tmp_path, extra: str = "") -> str:
    path = tmp_path / "run.yaml"
    path.write_text(TINY + extra)
    return str(path)


def write_tiny_plan(tmp_path, axis="phi", values=("neg_shannon", "euclidean"),
                    seeds=(0, 1)) -> str:
    raw = yaml.safe_load(TINY)
    raw["sweep"] = {"axis": axis, "values": list(values), "seeds": list(seeds)}
    path = tmp_path / "plan.yaml"
    path.write_text(yaml.safe_dump(raw))
    return str(path)


# -- config parsing -----------------------------------------------------------------


def test_parse_run_config(tmp_path):
    cfg = parse_config(write_tiny_config(tmp_path))
    assert isinstance(cfg, TrainConfig)
    assert cfg.model.experts == 4
    assert cfg.balance.phi == "neg_shannon"
    assert cfg.corpus.n_domains == 3


def test_phi_token_pins(tmp_path):
    cfg = parse_config(write_tiny_config(tmp_path))
    assert cfg.balance.potential().family == "neg_shannon"

    raw = yaml.safe_load(TINY)
    raw["balance"]["phi"] = "lp:p=inf"
    import math

    cfg = config_from_dict(raw)
    assert math.isinf(cfg.balance.potential().p)

    raw["balance"]["phi"] = "tsallis:alpha=1.0"
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_unknown_keys_rejected_with_context():
    raw = yaml.safe_load(TINY)
    raw["model"]["n_heads"] = 4
    with pytest.raises(ConfigError, match="n_heads.*model"):
        config_from_dict(raw)
    raw = yaml.safe_load(TINY)
    raw["extras"] = {}
    with pytest.raises(ConfigError, match="extras"):
        config_from_dict(raw)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        parse_config(tmp_path / "nope.yaml")


def test_config_round_trip_is_stable():
    raw = yaml.safe_load(TINY)
    cfg = config_from_dict(raw)
    once = config_to_dict(cfg)
    again = config_to_dict(config_from_dict(once))
    assert once == again
    assert yaml.safe_dump(once) == yaml.safe_dump(again)


def test_parse_plan(tmp_path):
    plan = parse_config(write_tiny_plan(tmp_path))
    assert isinstance(plan, ExperimentPlan)
    assert plan.axis == "phi"
    assert plan.seeds == (0, 1)


def test_plan_rejects_empty_values(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(write_tiny_plan(tmp_path, values=()))


def test_plan_rejects_unknown_axis(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(write_tiny_plan(tmp_path, axis="temperature"))


# -- plan expansion and CSVs ----------------------------------------------------------


def test_expand_plan_covers_grid(tmp_path):
    plan = parse_config(write_tiny_plan(tmp_path))
    combos = expand_plan(plan)
    assert len(combos) == 4
    labels = {(label, seed) for label, seed, _ in combos}
    assert labels == {
        ("neg_shannon", 0),
        ("neg_shannon", 1),
        ("euclidean", 0),
        ("euclidean", 1),
    }
    for _, seed, cfg in combos:
        assert cfg.seed == seed and cfg.corpus.seed == seed


def test_mechanism_and_statistic_axes(tmp_path):
    plan = parse_config(
        write_tiny_plan(tmp_path, axis="mechanism", values=("st_moe", "none"), seeds=(0,))
    )
    combos = expand_plan(plan)
    assert combos[0][2].balance.mechanism == "st_moe"
    assert combos[1][2].balance.mechanism == "none"

    plan = parse_config(
        write_tiny_plan(
            tmp_path, axis="statistic", values=("probability", "frequency"), seeds=(0,)
        )
    )
    for _, _, cfg in expand_plan(plan):
        assert cfg.balance.statistic in ("probability", "frequency")


def test_csv_round_trip(tmp_path):
    cfg = with_seed(parse_config(write_tiny_config(tmp_path)), 0)
    record = train(cfg)
    path = tmp_path / "run.csv"
    write_run_csv(path, cfg, record)
    rows = read_run_csv(path)
    assert len(rows) == len(record.rows)
    assert rows[0]["mech"] == "phi"
    assert rows[0]["phi"] == "neg_shannon"
    assert rows[-1]["task_loss"] == record.rows[-1].task_loss  # exact repr round trip
    with open(path) as fh:
        header = fh.readline()
        assert header.startswith("#")
        columns = tuple(fh.readline().strip().split(","))
    assert columns == CSV_SCHEMA


def test_run_plan_writes_csvs_and_summary(tmp_path):
    plan = parse_config(write_tiny_plan(tmp_path))
    out = tmp_path / "out"
    outcomes = run_plan(plan, out)
    assert len(outcomes) == 4
    assert all(oc.error is None for oc in outcomes)
    csvs = sorted(out.glob("run_*.csv"))
    assert len(csvs) == 4
    summary = (out / "summary.md").read_text()
    assert "neg_shannon" in summary and "euclidean" in summary
    # The summary is derived from the CSVs alone.
    rebuilt = summarize_runs(plan.axis, outcomes)
    assert rebuilt == summary


def test_single_config_single_seed_yields_one_csv(tmp_path):
    plan = parse_config(write_tiny_plan(tmp_path, values=("neg_shannon",), seeds=(0,)))
    out = tmp_path / "solo"
    outcomes = run_plan(plan, out)
    assert len(outcomes) == 1
    assert len(list(out.glob("run_*.csv"))) == 1


def test_failed_run_records_error_and_spares_siblings(tmp_path):
    # eta is validated at run construction, so a bad eta fails inside the run.
    plan = parse_config(write_tiny_plan(tmp_path, axis="eta", values=(0.7, 5.0), seeds=(0,)))
    out = tmp_path / "err"
    outcomes = run_plan(plan, out)
    by_label = {oc.label: oc for oc in outcomes}
    assert by_label["0.7"].error is None
    assert by_label["5.0"].error is not None
    summary = (out / "summary.md").read_text()
    assert "ERROR" in summary
    assert len(list(out.glob("run_*.csv"))) == 1


def test_deterministic_rerun_is_byte_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("PHIBAL_DETERMINISTIC", "1")
    plan_path = write_tiny_plan(tmp_path)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    run_plan(parse_config(plan_path), out_a, jobs=4)
    run_plan(parse_config(plan_path), out_b, jobs=4)
    files_a = sorted(p.name for p in out_a.iterdir())
    files_b = sorted(p.name for p in out_b.iterdir())
    assert files_a == files_b
    for name in files_a:
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()


def test_config_digest_distinguishes_configs(tmp_path):
    cfg = parse_config(write_tiny_config(tmp_path))
    assert config_digest(cfg) != config_digest(with_seed(cfg, 1))
    assert config_digest(cfg) == config_digest(parse_config(write_tiny_config(tmp_path)))


def test_eta_sweep_completes_across_band(tmp_path):
    plan = parse_config(
        write_tiny_plan(
            tmp_path, axis="eta", values=(0.05, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0), seeds=(0,)
        )
    )
    out = tmp_path / "eta"
    outcomes = run_plan(plan, out)
    assert all(oc.error is None for oc in outcomes)
    assert len(list(out.glob("run_*.csv"))) == 7


def test_full_catalog_sweep_yields_ranked_summary(tmp_path):
    from phibal.potentials import default_catalog

    tokens = tuple(spec.token() for spec in default_catalog())
    plan = parse_config(write_tiny_plan(tmp_path, axis="phi", values=tokens, seeds=(0,)))
    out = tmp_path / "catalog"
    outcomes = run_plan(plan, out)
    assert all(oc.error is None for oc in outcomes)
    assert len(list(out.glob("run_*.csv"))) == 9
    summary = (out / "summary.md").read_text()
    # Rows are ranked by terminal imbalance: parse the table back out.
    rows = [line for line in summary.splitlines() if line.startswith("| `")]
    assert len(rows) == 9
    values = [float(line.split("|")[3].split("±")[0]) for line in rows]
    assert values == sorted(values)


# -- CLI ----------------------------------------------------------------------------------


def test_cli_run_and_csv(tmp_path, capsys):
    code = main(["run", "--config", write_tiny_config(tmp_path), "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    out = capsys.readouterr().out
    assert "task_loss=" in out and "max_vio=" in out
    assert len(list((tmp_path / "o").glob("run_*.csv"))) == 1


def test_cli_run_seed_override(tmp_path, capsys):
    path = write_tiny_config(tmp_path)
    main(["run", "--config", path, "--seed", "3"])
    first = capsys.readouterr().out
    main(["run", "--config", path, "--seed", "3"])
    assert capsys.readouterr().out == first


def test_cli_sweep(tmp_path, capsys):
    code = main(["sweep", "--config", write_tiny_plan(tmp_path), "--out", str(tmp_path / "s")])
    assert code == EXIT_OK
    assert (tmp_path / "s" / "summary.md").exists()


def test_cli_bad_config_exit_code(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: {bogus_key: 1}\n")
    assert main(["run", "--config", str(bad)]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.yaml")]) == EXIT_CONFIG


def test_cli_run_rejects_plan(tmp_path):
    assert main(["run", "--config", write_tiny_plan(tmp_path)]) == EXIT_CONFIG


def test_cli_budget(capsys):
    assert main(["budget", "1"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "tokens_per_param=27.2752" in out
