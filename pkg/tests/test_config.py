"""Config tests: presets, validation, parameter accounting, serialization."""

from dataclasses import replace

import pytest

from mtformer.config import (TASKS, ArchConfig, count_parameters, from_text,
                             linear_params, load, preset, require_valid,
                             resolve, save, stage_channels, stage_grids,
                             task_channels, to_text, validate)
from mtformer.errors import ConfigurationError


def test_presets_are_valid():
    for name in ("mult-large", "mult-tiny", "desk-nano"):
        assert validate(preset(name)) == []


def test_preset_values_pinned():
    large = preset("mult-large")
    assert large.base_channels == 192
    assert large.stage_depths == (2, 2, 18, 2)
    assert large.encoder_heads == (6, 12, 24, 48)
    assert large.decoder_heads == (48, 24, 12, 6)
    assert large.window == 7 and large.shift == 3
    assert large.patch_size == 4
    assert large.reference_task == "N"
    assert large.seg_classes == 8
    assert large.shared_attention

    tiny = preset("mult-tiny")
    assert tiny.stage_depths == (2, 2, 6, 2) and tiny.base_channels == 96

    nano = preset("desk-nano")
    assert nano.img_size == 128 and nano.base_channels == 16
    assert nano.stage_depths == (1, 1, 2, 1)
    assert nano.encoder_heads == (1, 2, 4, 8)
    assert nano.window == 4 and nano.shift == 2
    assert stage_grids(nano) == (32, 16, 8, 4)
    assert stage_channels(nano) == (16, 32, 64, 128)


def test_unknown_preset_lists_valid_names():
    with pytest.raises(ConfigurationError) as err:
        preset("mult-giant")
    msg = str(err.value)
    assert "mult-large" in msg and "desk-nano" in msg


def test_validation_catches_geometry_violations():
    nano = preset("desk-nano")
    assert any("divide" in p for p in validate(replace(nano, window=3)))
    assert any("shift" in p for p in validate(replace(nano, shift=4)))
    assert any("divisible by 8" in p for p in validate(replace(nano, img_size=16)))
    assert any("patch_size" in p for p in validate(replace(nano, img_size=130)))
    assert any("encoder_heads" in p for p in validate(replace(nano, encoder_heads=(3, 2, 4, 8))))
    assert any("decoder_heads" in p for p in validate(replace(nano, decoder_heads=(7, 4, 2, 1))))
    assert any("reference_task" in p for p in validate(replace(nano, tasks=("S", "D"))))
    assert any("unknown task" in p for p in validate(replace(nano, tasks=("S", "X", "N"))))
    assert any("duplicate" in p for p in validate(replace(nano, tasks=("S", "S", "N"))))
    assert any("tasks" in p for p in validate(replace(nano, tasks=())))
    assert any("base_channels" in p for p in validate(replace(nano, base_channels=18)))
    with pytest.raises(ConfigurationError):
        require_valid(replace(nano, window=3))


def test_task_channels():
    nano = preset("desk-nano")
    assert task_channels(nano, "S") == 8
    assert task_channels(nano, "N") == 3
    for t in "DKER":
        assert task_channels(nano, t) == 1
    with pytest.raises(ConfigurationError):
        task_channels(nano, "Q")


# ------------------------------------------------------------ parameter count

def test_linear_param_rule():
    assert linear_params(4, 2) == 10  # 4*2 weights + 2 biases
    assert linear_params(4, 2, bias=False) == 8


def test_breakdown_sums_to_total():
    for name in ("desk-nano", "mult-tiny"):
        pc = count_parameters(preset(name))
        assert pc.encoder + sum(pc.decoder.values()) + sum(pc.heads.values()) == pc.total


def test_shared_attention_strictly_cheaper_for_two_plus_tasks():
    nano = preset("desk-nano")
    for tasks in (("S", "N"), ("S", "D", "N"), TASKS):
        on = count_parameters(replace(nano, tasks=tasks, shared_attention=True)).total
        off = count_parameters(replace(nano, tasks=tasks, shared_attention=False)).total
        assert on < off


def test_shared_attention_equal_cost_for_single_task():
    nano = preset("desk-nano")
    single = replace(nano, tasks=("N",), reference_task="N")
    on = count_parameters(replace(single, shared_attention=True)).total
    off = count_parameters(replace(single, shared_attention=False)).total
    assert on == off


def test_non_reference_decoders_are_lighter_when_shared():
    pc = count_parameters(preset("desk-nano"))
    assert pc.decoder["N"] > pc.decoder["S"]  # reference owns q/k and the bias table
    off = count_parameters(replace(preset("desk-nano"), shared_attention=False))
    assert off.decoder["N"] == off.decoder["S"] == off.decoder["D"]


def test_parameter_count_monotone_in_tasks():
    nano = preset("desk-nano")
    totals = []
    for k in range(1, 7):
        cfg = replace(nano, tasks=TASKS[:k], reference_task="S")
        totals.append(count_parameters(cfg).total)
    assert all(a < b for a, b in zip(totals, totals[1:]))


def test_desk_nano_count_matches_independent_closed_form():
    # spreadsheet oracle, derived by hand from the layer inventory before the
    # counting code was written; C=16, window 4 so bias tables have 49 rows
    embed = 3 * 16 * 16 + 16                                   # 784
    enc_block = lambda C, M: 12 * C * C + 13 * C + 49 * M      # 2 norms + qkv + out + 4x MLP
    merge = lambda C: 8 * C * C + 8 * C
    encoder = (embed + enc_block(16, 1) + enc_block(32, 2) + 2 * enc_block(64, 4)
               + enc_block(128, 8) + merge(16) + merge(32) + merge(64))
    assert encoder == 359843

    # decoder blocks use 2x MLPs: block1 8C^2+11C+49M, block2 task part 6C^2+9C,
    # fuse C^2+C, so 15 C^2 + 21 C + 49 M per task and stage
    stage = lambda C, M: 15 * C * C + 21 * C + 49 * M
    per_task = (stage(128, 8) + stage(64, 4) + stage(32, 2) + stage(16, 1)
                + (128 * 128 + 128)                            # stream init
                + 2 * 128 * 128 + 2 * 64 * 64 + 2 * 32 * 32)   # three patch expands
    assert per_task == 391695
    cross = lambda C, M: 2 * (C * C + C) + 49 * M              # shared q/k + table, once
    shared = cross(128, 8) + cross(64, 4) + cross(32, 2) + cross(16, 1)
    assert shared == 44735
    heads = (512 + 128 + 4 * 8 + 8) + (512 + 128 + 4 * 3 + 3) + 4 * (512 + 128 + 4 * 1 + 1)

    expected_total = encoder + 6 * per_task + shared + heads
    assert expected_total == 2758663

    pc = count_parameters(preset("desk-nano"))
    assert pc.total == expected_total
    assert pc.encoder == encoder
    assert pc.decoder["N"] == per_task + shared
    assert pc.decoder["S"] == per_task

    off_total = encoder + 6 * (per_task + shared) + heads
    assert off_total == 2982338
    assert count_parameters(replace(preset("desk-nano"), shared_attention=False)).total == off_total


def test_mult_large_lands_near_published_total():
    total = count_parameters(preset("mult-large")).total
    assert total == 535621209  # frozen from the same closed form at C=192
    assert abs(total - 545_000_000) / 545_000_000 <= 0.20


# ------------------------------------------------------------- serialization

def test_text_roundtrip_identity():
    cfg = preset("desk-nano")
    assert from_text(to_text(cfg)) == cfg
    custom = replace(cfg, tasks=("S", "N"), reference_task="S", shared_attention=False)
    assert from_text(to_text(custom)) == custom


def test_file_roundtrip(tmp_path):
    path = tmp_path / "cfg.txt"
    cfg = preset("mult-tiny")
    save(cfg, path)
    assert load(path) == cfg


def test_unknown_key_is_an_error():
    with pytest.raises(ConfigurationError) as err:
        from_text("img_size=128\nwidht=7\n")
    assert "widht" in str(err.value)


def test_malformed_and_duplicate_lines_rejected():
    with pytest.raises(ConfigurationError):
        from_text("img_size\n")
    with pytest.raises(ConfigurationError):
        from_text("img_size=128\nimg_size=64\n")
    with pytest.raises(ConfigurationError):
        from_text("window=seven\n")
    with pytest.raises(ConfigurationError):
        from_text("shared_attention=maybe\n")


def test_comments_and_partial_files_allowed():
    cfg = from_text("# tiny tweak\nwindow=2\nshift=1\n\n")
    assert cfg.window == 2 and cfg.shift == 1
    assert cfg.img_size == ArchConfig().img_size


def test_resolve_requires_exactly_one_source(tmp_path):
    with pytest.raises(ConfigurationError):
        resolve(None, None)
    with pytest.raises(ConfigurationError):
        resolve("x", "y")
    assert resolve(None, "desk-nano") == preset("desk-nano")
    path = tmp_path / "c.txt"
    save(preset("desk-nano"), path)
    assert resolve(path, None) == preset("desk-nano")
