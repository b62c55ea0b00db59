import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policylab.rewards import (
    MaskedSequence,
    cot_sft_loss,
    parse_response,
    reward_clevr,
    reward_gta,
    vm_cpt_loss,
)
from policylab.tools import Rule, ToolCall, ToolRuleSet, ToolSpec


def test_parse_well_formed():
    parsed = parse_response("<think>x</think> \\boxed{Case 3}")
    assert parsed.answer == "Case 3"
    assert parsed.think == "x"
    assert parsed.format_ok


def test_parse_token_sequence_input():
    parsed = parse_response(["<think>", "a", "b", "</think>", "\\boxed{", "Case", "1", "}"])
    assert parsed.answer == "Case 1"
    assert parsed.format_ok


def test_parse_missing_think_block():
    parsed = parse_response("\\boxed{Case 1}")
    assert not parsed.format_ok
    assert parsed.answer == "Case 1"


def test_parse_two_boxes_first_wins_format_penalized():
    parsed = parse_response("<think>x</think> \\boxed{Case 1} \\boxed{Case 2}")
    assert not parsed.format_ok
    assert parsed.answer == "Case 1"


def test_parse_box_before_think_not_ok():
    parsed = parse_response("\\boxed{Case 1} <think>x</think>")
    assert not parsed.format_ok
    assert parsed.answer == "Case 1"


def test_parse_nested_braces_in_box():
    parsed = parse_response('<think>t</think> \\boxed{ {"name":"OCR_v1","arguments":{}} }')
    assert parsed.format_ok
    assert parsed.answer == '{"name":"OCR_v1","arguments":{}}'


def test_parse_unclosed_box():
    parsed = parse_response("<think>x</think> \\boxed{Case 1")
    assert not parsed.format_ok
    assert parsed.answer == ""


def test_parse_garbage():
    parsed = parse_response("nothing here")
    assert not parsed.format_ok
    assert parsed.answer == ""


def test_reward_clevr_exact_match():
    parsed = parse_response("<think>r</think> \\boxed{Case 0}")
    r = reward_clevr(parsed, "Case 0")
    assert r.acc == 1.0 and r.format == 1.0
    assert r.total == pytest.approx(1.1)


def test_reward_clevr_case_sensitive():
    parsed = parse_response("<think>r</think> \\boxed{case 0}")
    assert reward_clevr(parsed, "Case 0").acc == 0.0


def test_reward_clevr_malformed_is_zero():
    r = reward_clevr(parse_response("junk"), "Case 0")
    assert r.acc == 0.0 and r.format == 0.0 and r.total == 0.0


def test_reward_clevr_weight_configurable():
    parsed = parse_response("<think>r</think> \\boxed{Case 0}")
    assert reward_clevr(parsed, "Case 1", format_weight=0.25).total == pytest.approx(0.25)


def _gta_rules():
    tools = [ToolSpec("OCR", "v1", "", (("image", "exact"),)),
             ToolSpec("OCR", "v2", "", (("image", "exact"),))]
    return ToolRuleSet(tools=tools, rules=[Rule("OCR", {"p": True}, "v2")],
                       defaults={"OCR": "v1"})


def test_reward_gta_perfect():
    gold = ToolCall("OCR_v2", {"image": "a.jpg"})
    resp = '<think>t</think> \\boxed{ {"name":"OCR_v2","arguments":{"image":"a.jpg"}} }'
    r = reward_gta(parse_response(resp), gold, _gta_rules())
    assert r.total == pytest.approx(1.1)


def test_reward_gta_wrong_tool_perfect_args():
    gold = ToolCall("OCR_v2", {"image": "a.jpg"})
    resp = '<think>t</think> \\boxed{ {"name":"OCR_v1","arguments":{"image":"a.jpg"}} }'
    r = reward_gta(parse_response(resp), gold, _gta_rules())
    assert r.total == pytest.approx(0.5 + 0.1)


def test_reward_gta_unparseable_answer():
    gold = ToolCall("OCR_v2", {"image": "a.jpg"})
    r = reward_gta(parse_response("<think>t</think> \\boxed{not json}"), gold, _gta_rules())
    assert r.acc == 0.0
    assert r.total == pytest.approx(0.1)  # format reward only


# -- losses ------------------------------------------------------------------


def test_vm_cpt_uniform_quarter_prob():
    seq = MaskedSequence(logprobs=np.log([0.25, 0.25, 0.25]), mask=[True, True, True])
    assert vm_cpt_loss(seq) == pytest.approx(math.log(4))


def test_vm_cpt_mask_restricts_to_kept_half():
    lp = np.log([0.5, 0.1, 0.5, 0.1])
    seq = MaskedSequence(logprobs=lp, mask=[True, False, True, False])
    assert vm_cpt_loss(seq) == pytest.approx(math.log(2))


def test_vm_cpt_matches_brute_force_sum():
    rng = np.random.default_rng(5)
    lp = np.log(rng.uniform(0.01, 1.0, size=50))
    mask = rng.random(50) < 0.6
    seq = MaskedSequence(logprobs=lp, mask=mask)
    brute = -sum(l for l, m in zip(lp, mask) if m) / sum(mask)
    assert abs(vm_cpt_loss(seq) - brute) < 1e-12


def test_vm_cpt_invariant_to_masked_values():
    lp = np.log([0.5, 0.1, 0.5, 0.9])
    mask = np.array([True, False, True, False])
    a = vm_cpt_loss(MaskedSequence(logprobs=lp, mask=mask))
    lp2 = lp.copy()
    lp2[~mask] = -123.0  # perturb only masked-out entries
    b = vm_cpt_loss(MaskedSequence(logprobs=lp2, mask=mask))
    assert a == b


def test_vm_cpt_all_masked_errors():
    with pytest.raises(ValueError):
        vm_cpt_loss(MaskedSequence(logprobs=np.array([-1.0]), mask=[False]))


def test_masked_sequence_length_mismatch():
    with pytest.raises(ValueError):
        MaskedSequence(logprobs=np.array([-1.0, -2.0]), mask=[True])


def test_cot_sft_prob_one_is_zero():
    assert cot_sft_loss(np.array([0.0])).total == 0.0


def test_cot_sft_half_probs():
    loss = cot_sft_loss(np.log([0.5, 0.5]))
    assert loss.total == pytest.approx(2 * math.log(2))
    assert loss.mean == pytest.approx(math.log(2))


def test_cot_sft_empty_errors():
    with pytest.raises(ValueError):
        cot_sft_loss(np.array([]))


def test_cot_sft_equals_vm_cpt_on_full_mask():
    lp = np.log([0.3, 0.9, 0.2])
    sft = cot_sft_loss(lp)
    cpt = vm_cpt_loss(MaskedSequence(logprobs=lp, mask=[True] * 3))
    assert sft.mean == pytest.approx(cpt)


@given(st.lists(st.floats(min_value=0.01, max_value=1.0), min_size=1, max_size=30))
@settings(max_examples=100, deadline=None)
def test_losses_nonnegative_zero_iff_prob_one(probs):
    lp = np.log(probs)
    loss = cot_sft_loss(lp)
    assert loss.total >= 0.0
    if all(p == 1.0 for p in probs):
        assert loss.total == 0.0
    cpt = vm_cpt_loss(MaskedSequence(logprobs=lp, mask=[True] * len(probs)))
    assert cpt >= 0.0
