"""Architecture descriptions: validation, presets, accounting, JSON."""

import dataclasses

import numpy as np
import pytest

from vitslim import arch
from vitslim.errors import SpecError
from vitslim.model import Model


def replace_stage(spec, j, **kw):
    stages = list(spec.stages)
    stages[j] = dataclasses.replace(stages[j], **kw)
    return dataclasses.replace(spec, stages=tuple(stages))


class TestValidation:
    def test_presets_valid(self):
        for name in ("L1", "L3", "L7"):
            assert arch.validate(arch.preset(name)) == []
        assert arch.validate(arch.toy_arch()) == []

    def test_resolution_multiple_of_32(self):
        bad = dataclasses.replace(arch.toy_arch(), resolution=60)
        assert any("multiple of 32" in v for v in arch.validate(bad))

    def test_width_floor(self):
        bad = replace_stage(arch.toy_arch(), 0, width=8,
                            blocks=(arch.Mb4dSpec(8), arch.Mb4dSpec(8)))
        assert any("below the minimum" in v for v in arch.validate(bad))

    def test_block_width_must_match_stage(self):
        bad = replace_stage(arch.toy_arch(), 1, blocks=(arch.Mb4dSpec(24),))
        assert any("!= stage width" in v for v in arch.validate(bad))

    def test_no_3d_in_early_stages(self):
        bad = replace_stage(arch.toy_arch(), 0,
                            blocks=(arch.Mb3dSpec(16),))
        assert any("early stage" in v for v in arch.validate(bad))

    def test_no_4d_after_3d_within_stage(self):
        bad = replace_stage(arch.toy_arch(), 3,
                            blocks=(arch.Mb3dSpec(64), arch.Mb4dSpec(64)))
        assert any("dimension inconsistency" in v for v in arch.validate(bad))

    def test_no_stage3_3d_before_stage4_4d(self):
        spec = replace_stage(arch.toy_arch(), 2, blocks=(arch.Mb4dSpec(48), arch.Mb3dSpec(48)))
        spec = replace_stage(spec, 3, blocks=(arch.Mb4dSpec(64),))
        assert any("stage 3" in v for v in arch.validate(spec))

    def test_identity_blocks_are_transparent(self):
        spec = replace_stage(arch.toy_arch(), 1,
                             blocks=(arch.IdentitySpec(), arch.Mb4dSpec(32)))
        assert arch.validate(spec) == []

    def test_check_raises(self):
        with pytest.raises(SpecError):
            arch.check(dataclasses.replace(arch.toy_arch(), resolution=50))

    def test_unknown_preset(self):
        with pytest.raises(SpecError):
            arch.preset("L2")


class TestPresetStructure:
    def test_l1_shape(self):
        spec = arch.preset("L1")
        assert [s.width for s in spec.stages] == [48, 96, 224, 448]
        assert spec.stem_mid == 24
        kinds = [b.kind for b in spec.stages[3].blocks]
        assert kinds == ["mb4d"] * 3 + ["mb3d"]

    def test_l7_stage4_all_attention(self):
        spec = arch.preset("L7")
        assert [b.kind for b in spec.stages[3].blocks] == ["mb3d"] * 8

    def test_stage_resolutions(self):
        spec = arch.preset("L1", resolution=224)
        assert [spec.stage_resolution(j) for j in range(4)] == [56, 28, 14, 7]
        assert spec.tokens() == 49


class TestAccounting:
    def test_1x1_conv_param_closed_form(self):
        # 48*96 weights + 96 biases
        assert arch._conv_params(48, 96, 1) == 4704

    def test_1x1_conv_macs_closed_form(self):
        spec = arch.toy_arch()
        # a width-48 exp-1 4D block at 56x56 runs two 1x1 convs of 48->48;
        # check the primitive formula instead: 48*96*56*56
        assert 48 * 96 * 56 * 56 == 14450688
        b = arch.Mb4dSpec(48, exp=2)
        assert arch.block_macs(b, 56) == 2 * 48 * 96 * 56 * 56

    @pytest.mark.parametrize("name,params_m,macs_g", [
        ("L1", 12.3, 1.3), ("L3", 31.3, 3.9), ("L7", 82.1, 10.2)])
    def test_preset_totals_within_10pct(self, name, params_m, macs_g):
        spec = arch.preset(name)
        p = arch.count_params(spec) / 1e6
        m = arch.count_macs(spec, 224) / 1e9
        assert abs(p - params_m) / params_m < 0.10, f"{name} params {p}M vs {params_m}M"
        assert abs(m - macs_g) / macs_g < 0.10, f"{name} macs {m}G vs {macs_g}G"

    def test_params_equal_model_tensor_count(self):
        spec = arch.toy_arch()
        model = Model(spec, seed=0)
        n = sum(t.data.size for _, t, trainable in model.named_tensors() if trainable)
        assert n == arch.count_params(spec)

    def test_macs_additive_in_blocks(self):
        spec = arch.toy_arch()
        extra = replace_stage(spec, 1, blocks=spec.stages[1].blocks + (arch.Mb4dSpec(32),))
        got = arch.count_macs(extra) - arch.count_macs(spec)
        assert got == arch.block_macs(arch.Mb4dSpec(32), spec.stage_resolution(1))

    def test_identity_costs_nothing(self):
        assert arch.block_params(arch.IdentitySpec(), 49) == 0
        assert arch.block_macs(arch.IdentitySpec(), 7) == 0

    def test_pooling_is_free(self):
        # the 4D block counts only its two pointwise convs
        b = arch.Mb4dSpec(32, exp=4)
        assert arch.block_macs(b, 8) == (32 * 128 + 128 * 32) * 64

    def test_count_rejects_invalid(self):
        with pytest.raises(SpecError):
            arch.count_params(dataclasses.replace(arch.toy_arch(), resolution=50))


class TestJson:
    def test_round_trip(self):
        spec = arch.preset("L3")
        assert arch.from_json(arch.to_json(spec)) == spec

    def test_toy_round_trip_with_identity(self):
        spec = replace_stage(arch.toy_arch(), 1,
                             blocks=(arch.IdentitySpec(), arch.Mb4dSpec(32)))
        assert arch.from_json(arch.to_json(spec)) == spec

    def test_schema_guard(self):
        text = arch.to_json(arch.toy_arch()).replace(arch.SCHEMA, "other-v9")
        with pytest.raises(SpecError, match="schema"):
            arch.from_json(text)

    def test_missing_key_path_in_error(self):
        with pytest.raises(SpecError, match=r"\$\.stem_mid|missing key"):
            arch.from_json('{"schema": "%s", "stages": [{}, {}, {}, {}]}' % arch.SCHEMA)

    def test_invalid_json(self):
        with pytest.raises(SpecError, match="invalid JSON"):
            arch.from_json("{nope")

    def test_file_round_trip(self, tmp_path):
        p = tmp_path / "a.json"
        arch.save(arch.toy_arch(), p)
        assert arch.load(p) == arch.toy_arch()
