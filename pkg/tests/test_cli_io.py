import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tavp.checkpoint import MAGIC, read_checkpoint, read_header, write_checkpoint
from tavp.config import RunConfig, config_hash, parse_config, parse_config_text, serialize_config
from tavp.errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
)
from tavp.metrics import CSV_COLUMNS, MetricsWriter, read_jsonl
from tavp.netcore.params import ParamStore

PUBLISHED = {
    "K": 3, "r_min": 0.75, "r_max": 1.3, "theta_max": math.pi, "resolution": 224, "n_points": 2048,
    "n_gates": 8, "n_experts": 16, "top_k": 2, "embed_dim": 512, "stage2_epochs": 20,
    "ppo_batch_size": 96, "ppo_lr": 2.0e-6,
}


@pytest.mark.parametrize("field,value", sorted(PUBLISHED.items()))
def test_defaults_match_published_constants(tmp_path, field, value):
    (tmp_path / "empty.cfg").write_text("")
    assert getattr(parse_config(tmp_path / "empty.cfg"), field) == value


def test_range_error_names_fields():
    with pytest.raises(ConfigError) as exc:
        parse_config_text("r_max = 0.5\n")
    assert exc.value.field == "r_min/r_max"
    assert "r_min/r_max" in str(exc.value)


@pytest.mark.parametrize("text,line", [
    ("seed = 1\nbogus = 2\n", 2),
    ("# c\n\nK = three\n", 3),
    ("K = 3\nK = 4\n", 2),
    ("just words\n", 1),
    ("use_moe = maybe\n", 1),
    ("ppo_lr = nan\n", 1),
])
def test_parse_errors_carry_line_numbers(text, line):
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert exc.value.line == line
    assert str(exc.value).startswith(f"line {line}: ")


def test_missing_file():
    with pytest.raises(ConfigError):
        parse_config("/nonexistent/x.cfg")


def test_other_range_checks():
    for text in ("K = 1", "theta_max = 4.0", "top_k = 20", "n_gates = 12", "tasks = nope", "sigma_px = 0"):
        with pytest.raises(ConfigError):
            parse_config_text(text)


def test_comments_and_values():
    cfg = parse_config_text("seed = 7  # trailing\nuse_moe = false\ntasks = reveal-red, reveal-blue\n")
    assert cfg.seed == 7 and cfg.use_moe is False
    assert cfg.task_names() == ["reveal-red", "reveal-blue"]


@given(
    st.integers(0, 2**64 - 1),
    st.floats(0.1, 1.0),
    st.floats(1.01, 3.0),
    st.booleans(),
    st.sampled_from(["all", "reveal-red", "reach-clear-red,two-target-blue"]),
    st.floats(1e-9, 1.0),
)
def test_config_round_trip(seed, r_min, r_scale, use_moe, tasks, lr):
    cfg = RunConfig(seed=seed, r_min=r_min, r_max=r_min * r_scale, use_moe=use_moe, tasks=tasks, ppo_lr=lr)
    text = serialize_config(cfg)
    assert parse_config_text(text) == cfg
    assert serialize_config(parse_config_text(text)) == text
    assert config_hash(parse_config_text(text)) == config_hash(cfg)


def _store(seed=0):
    s = ParamStore(seed)
    s.add("a.w", (3, 4))
    s.add("a.b", (4,), "zeros")
    s.add("scalarish", (1,))
    return s


def test_checkpoint_round_trip(tmp_path):
    s = _store()
    s["a.b"].data[:] = [np.pi, -0.0, 1e-300, np.nextafter(1.0, 2.0)]
    hdr = write_checkpoint(tmp_path / "c.ckpt", s, "stage1", "seed = 0\n", ["abc"])
    t = _store(seed=99)
    back = read_checkpoint(tmp_path / "c.ckpt", t)
    for name, p in s.items():
        assert p.data.tobytes() == t[name].data.tobytes()
    assert back.stage == "stage1" and back.chain == ["abc"] and back.config_hash == hdr.config_hash
    offsets = sorted((e["offset"], e["offset"] + e["nbytes"]) for e in back.manifest)
    assert all(a[1] <= b[0] for a, b in zip(offsets, offsets[1:]))
    assert not (tmp_path / "c.ckpt.tmp").exists()


def test_checkpoint_corruptions(tmp_path):
    path = tmp_path / "c.ckpt"
    write_checkpoint(path, _store(), "stage1", "seed = 0\n")
    raw = path.read_bytes()

    bad = tmp_path / "magic.ckpt"
    bad.write_bytes(b"X" + raw[1:])
    with pytest.raises(CheckpointMagicError):
        read_checkpoint(bad, _store())

    ver = tmp_path / "ver.ckpt"
    ver.write_bytes(raw[:4] + struct.pack("<I", 99) + raw[8:])
    with pytest.raises(CheckpointVersionError):
        read_checkpoint(ver, _store())

    short = tmp_path / "short.ckpt"
    short.write_bytes(raw[:-8])
    with pytest.raises(CheckpointTruncatedError):
        read_checkpoint(short, _store())
    (tmp_path / "tiny.ckpt").write_bytes(raw[:5])
    with pytest.raises(CheckpointTruncatedError):
        read_checkpoint(tmp_path / "tiny.ckpt", _store())

    hlen = struct.unpack_from("<I", raw, 8)[0]
    head = json.loads(raw[12:12 + hlen])
    head["manifest"][0]["shape"] = [4, 3]
    new_head = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    edited = tmp_path / "shape.ckpt"
    edited.write_bytes(MAGIC + struct.pack("<II", 1, len(new_head)) + new_head + raw[12 + hlen:])
    with pytest.raises(CheckpointShapeError) as exc:
        read_checkpoint(edited, _store())
    assert exc.value.tensor == "a.w" and "a.w" in str(exc.value)

    head = json.loads(raw[12:12 + hlen])
    head["config"] = "seed = 1\n"
    new_head = json.dumps(head, sort_keys=True, separators=(",", ":")).encode()
    tampered = tmp_path / "hash.ckpt"
    tampered.write_bytes(MAGIC + struct.pack("<II", 1, len(new_head)) + new_head + raw[12 + hlen:])
    with pytest.raises(CheckpointError):
        read_header(tampered)


def test_checkpoint_missing_parameter(tmp_path):
    write_checkpoint(tmp_path / "c.ckpt", _store(), "stage1", "")
    bigger = _store()
    bigger.add("extra", (2,))
    with pytest.raises(CheckpointShapeError) as exc:
        read_checkpoint(tmp_path / "c.ckpt", bigger)
    assert exc.value.tensor == "extra"


def test_metrics_writer(tmp_path):
    w = MetricsWriter(tmp_path)
    w.log("stage1", 1, loss=1.5, lr=0.1)
    w.log("stage1", 2, loss=float("nan"))
    w.log("stage2", 1, reward=0.25, r0=1 / 3)
    with pytest.raises(ValueError):
        w.log("stage1", 2, loss=1.0)
    with pytest.raises(KeyError):
        w.log("stage1", 3, made_up=1.0)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0].split(",") == list(CSV_COLUMNS)
    assert len(lines) == 4
    assert float(lines[3].split(",")[CSV_COLUMNS.index("r0")]) == 1 / 3
    rows = read_jsonl(tmp_path / "metrics.jsonl")
    assert [r["step"] for r in rows] == [1, 2, 1]
    assert rows[2]["r0"] == 1 / 3 and "wall_clock" in rows[0]
    assert "wall_clock" not in lines[0]


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=1, max_size=5))
def test_jsonl_lossless(values):
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        w = MetricsWriter(d)
        for i, v in enumerate(values):
            w.log("s", i, loss=v)
        assert [r["loss"] for r in read_jsonl(f"{d}/metrics.jsonl")] == values


def test_cli_config_error_exit_code(tmp_path, capsys):
    from tavp.cli import main

    cfg = tmp_path / "bad.cfg"
    cfg.write_text("r_max = 0.5\n")
    assert main(["stage1", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "r_min/r_max" in capsys.readouterr().err


def test_cli_missing_checkpoint(tmp_path, capsys):
    from tavp.cli import main

    assert main(["stage2", "--out", str(tmp_path)]) == 1
    assert "stage1.ckpt" in capsys.readouterr().err


def test_cli_rejects_bad_seed(tmp_path):
    from tavp.cli import main

    with pytest.raises(SystemExit):
        main(["stage1", "--seed", "-1", "--out", str(tmp_path)])
    with pytest.raises(SystemExit):
        main(["stage1", "--seed", str(2**64), "--out", str(tmp_path)])
