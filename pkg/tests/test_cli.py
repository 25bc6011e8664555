import csv
import io
import json

import pytest

from selcopy.cli import load_config_file, main, parse_sizes
from selcopy.metrics import REPORT_COLUMNS


def test_parse_sizes_fixed_and_range():
    assert parse_sizes("500") == (500, 500)
    assert parse_sizes("10:90") == (10, 90)
    for bad in ("9:2", "-1", "5:-5"):
        with pytest.raises(Exception):
            parse_sizes(bad)


def test_config_file_round_trip(tmp_path):
    cfg = tmp_path / "run.conf"
    cfg.write_text(
        "# scenario shape\n"
        "seed = 7\n"
        "max-frags = 45\n"
        "sizes = 100:200\n"
        "\n"
        "stress = yes\n")
    values = load_config_file(str(cfg))
    assert values == {"seed": "7", "max_frags": "45",
                      "sizes": "100:200", "stress": "yes"}


def test_config_file_rejects_garbage(tmp_path):
    cfg = tmp_path / "bad.conf"
    cfg.write_text("just some words\n")
    with pytest.raises(ValueError):
        load_config_file(str(cfg))


def run_cli(capsys, argv):
    code = main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_run_both_modes_csv(capsys):
    code, out, err = run_cli(capsys, [
        "run", "--sizes", "2000:9000", "--connections", "1",
        "--exchanges", "2", "--seed", "3"])
    assert code == 0 and err == ""
    rows = list(csv.DictReader(io.StringIO(out)))
    # 2 measured sockets + 1 total row per mode, 2 modes
    assert len(rows) == 6
    assert {r["mode"] for r in rows} == {"baseline", "selective"}
    assert set(REPORT_COLUMNS) <= set(rows[0].keys())
    base_total = next(r for r in rows
                      if r["mode"] == "baseline" and r["sock"] == "total")
    sel_total = next(r for r in rows
                     if r["mode"] == "selective" and r["sock"] == "total")
    assert int(base_total["std_copy_bytes"]) > int(sel_total["std_copy_bytes"])
    assert int(sel_total["meta_skb_trans_count"]) > 0
    assert int(base_total["meta_skb_trans_count"]) == 0


def test_run_jsonl_to_file(tmp_path, capsys):
    out_file = tmp_path / "rows.jsonl"
    code, out, _ = run_cli(capsys, [
        "run", "--mode", "selective", "--sizes", "1000", "--connections", "1",
        "--exchanges", "1", "--format", "jsonl", "--out", str(out_file)])
    assert code == 0
    assert out == ""                      # everything went to the file
    lines = out_file.read_text().splitlines()
    assert len(lines) == 3                # two measured sockets + total
    parsed = [json.loads(line) for line in lines]
    assert parsed[-1]["sock"] == "total"
    assert all(isinstance(p["meta_selcopy_bytes"], int) for p in parsed)


def test_flags_beat_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.conf"
    cfg.write_text("connections = 3\nexchanges = 1\nsizes = 500\nseed = 2\n")
    code, out, _ = run_cli(capsys, [
        "run", "--config", str(cfg), "--connections", "1",
        "--mode", "baseline"])
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    # 1 connection from the flag (not 3 from the file): 2 socket rows + total
    assert len(rows) == 3


def test_unknown_config_key_is_fatal(tmp_path, capsys):
    cfg = tmp_path / "c.conf"
    cfg.write_text("warp_speed = 9\n")
    with pytest.raises(SystemExit):
        main(["run", "--config", str(cfg)])


def test_fuzz_small_run(capsys):
    code, out, err = run_cli(capsys, [
        "fuzz", "--iterations", "3", "--seed", "11", "--fault-every", "2"])
    assert code == 0 and err == ""
    assert "3/3 iterations equivalent" in out


def test_bad_mode_rejected(capsys):
    with pytest.raises(SystemExit):
        main(["run", "--mode", "sideways"])
