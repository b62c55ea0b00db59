import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policylab.exprcalc import ExpressionError, eval_expression
from policylab.tools import (
    Rule,
    ToolCall,
    ToolCallError,
    ToolRuleSet,
    ToolSpec,
    bbox_iou,
    gen_gta_like,
    parse_tool_call,
    resolve_required_version,
    score_call,
    text_similarity,
)


def make_ruleset():
    tools = [
        ToolSpec("OCR", "v1", "optical character recognition", (("image", "exact"),)),
        ToolSpec("OCR", "v2", "optical character recognition", (("image", "exact"),)),
        ToolSpec("TextToBbox", "v1", "grounding",
                 (("bbox", "bbox"), ("text", "text"), ("expression", "expression"))),
    ]
    rules = [
        Rule("OCR", {"premium": True}, "v2"),
        Rule("OCR", {"region": "eu"}, "v1"),
    ]
    return ToolRuleSet(tools=tools, rules=rules, defaults={"OCR": "v1", "TextToBbox": "v1"})


# -- parsing -----------------------------------------------------------------


def test_parse_plain_call():
    call = parse_tool_call('{"name":"OCR_v2","arguments":{"image":"a.jpg"}}')
    assert call.name == "OCR_v2"
    assert call.arguments == {"image": "a.jpg"}


def test_parse_embedded_call():
    call = parse_tool_call('blah {"name":"OCR_v1","arguments":{}} blah')
    assert call.name == "OCR_v1"


def test_parse_missing_fields_is_schema_error():
    with pytest.raises(ToolCallError):
        parse_tool_call('{"tool": "OCR"}')


def test_parse_no_object_is_parse_error():
    with pytest.raises(ToolCallError):
        parse_tool_call("no json here")


def test_parse_skips_nonmatching_objects():
    text = '{"a": 1} then {"name":"OCR_v1","arguments":{"image":"x"}}'
    assert parse_tool_call(text).name == "OCR_v1"


# -- version resolution ------------------------------------------------------


def test_resolve_rule_match():
    rules = make_ruleset()
    assert resolve_required_version(rules, {"premium": True}, "OCR") == "v2"


def test_resolve_falls_through_to_default():
    rules = make_ruleset()
    assert resolve_required_version(rules, {"premium": False}, "OCR") == "v1"


def test_resolve_first_match_wins():
    rules = make_ruleset()
    # profile satisfies both rules; the earlier one decides
    assert resolve_required_version(rules, {"premium": True, "region": "eu"}, "OCR") == "v2"


def test_resolve_unknown_base_errors():
    with pytest.raises(ToolCallError):
        resolve_required_version(make_ruleset(), {}, "Nope")


# -- expression evaluator ----------------------------------------------------


def test_expression_precedence():
    assert eval_expression("2+3*4") == 14


def test_expression_parens():
    assert eval_expression("(1+2)/4") == 0.75


def test_expression_right_assoc_power():
    # verified against python eval: 2**3**2 == 2**(3**2) == 512
    assert eval_expression("2**3**2") == 512


def test_expression_unary_minus():
    assert eval_expression("-3+5") == 2
    assert eval_expression("-2**2") == -4  # unary minus binds looser than **
    assert eval_expression("2**-1") == 0.5


def test_expression_division_by_zero():
    with pytest.raises(ExpressionError):
        eval_expression("1/0")


def test_expression_syntax_error():
    with pytest.raises(ExpressionError):
        eval_expression("2+*3")
    with pytest.raises(ExpressionError):
        eval_expression("")


def _random_expression(rng, depth=0):
    if depth > 3 or rng.random() < 0.35:
        return str(int(rng.integers(0, 50)))
    op = ("+", "-", "*", "/", "**")[int(rng.integers(5))]
    left = _random_expression(rng, depth + 1)
    right = _random_expression(rng, depth + 1)
    if op == "**":  # keep magnitudes sane for the oracle comparison
        left = str(int(rng.integers(0, 9)))
        right = str(int(rng.integers(0, 5)))
    expr = f"{left} {op} {right}"
    return f"( {expr} )" if rng.random() < 0.4 else expr


def test_expression_agrees_with_python_eval_on_1000_random():
    rng = np.random.default_rng(42)
    checked = 0
    for _ in range(1000):
        expr = _random_expression(rng)
        try:
            expected = eval(expr)  # independent oracle over generated expressions
        except ZeroDivisionError:
            with pytest.raises(ExpressionError):
                eval_expression(expr)
            continue
        got = eval_expression(expr)
        assert got == pytest.approx(expected, rel=1e-12, abs=1e-12), expr
        checked += 1
    assert checked > 800


# -- bbox and text metrics ---------------------------------------------------


def test_iou_identical():
    assert bbox_iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0


def test_iou_disjoint():
    assert bbox_iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0


def test_iou_known_overlap():
    # inter = 1x1 = 1, union = 4 + 4 - 1 = 7
    assert bbox_iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)


def test_iou_degenerate_scores_zero_with_warning():
    with pytest.warns(UserWarning):
        assert bbox_iou((0, 0, 0, 2), (0, 0, 2, 2)) == 0.0


@given(
    x1=st.floats(-50, 50), y1=st.floats(-50, 50),
    w1=st.floats(0.1, 50), h1=st.floats(0.1, 50),
    x2=st.floats(-50, 50), y2=st.floats(-50, 50),
    w2=st.floats(0.1, 50), h2=st.floats(0.1, 50),
)
@settings(max_examples=200, deadline=None)
def test_iou_symmetric_and_bounded(x1, y1, w1, h1, x2, y2, w2, h2):
    a = (x1, y1, x1 + w1, y1 + h1)
    b = (x2, y2, x2 + w2, y2 + h2)
    iou = bbox_iou(a, b)
    assert 0.0 <= iou <= 1.0
    assert iou == pytest.approx(bbox_iou(b, a), abs=1e-12)


def test_text_similarity_exact():
    assert text_similarity("red car", "red car") == 1.0


def test_text_similarity_disjoint():
    assert text_similarity("red car", "blue boat") == 0.0


def test_text_similarity_partial_f1():
    # multiset overlap 2, precision = recall = 2/3, F1 = 2/3
    assert text_similarity("a red car", "red car photo") == pytest.approx(2 / 3)


def test_text_similarity_empty_rules():
    assert text_similarity("", "") == 1.0
    assert text_similarity("", "x") == 0.0
    assert text_similarity("x", "") == 0.0


def test_text_similarity_normalizes_case_and_punct():
    assert text_similarity("Red, Car!", "red car") == 1.0


# -- call scoring ------------------------------------------------------------


def test_score_identity_is_one():
    rules = make_ruleset()
    call = ToolCall("TextToBbox_v1", {"bbox": [0, 0, 2, 2], "text": "a dog",
                                      "expression": "1+1"})
    score = score_call(call, call, rules)
    assert score.tool_acc == 1.0
    assert score.arg_score == 1.0
    assert score.overall == 1.0


def test_score_wrong_tool_perfect_args():
    rules = make_ruleset()
    gold = ToolCall("OCR_v2", {"image": "a.jpg"})
    pred = ToolCall("OCR_v1", {"image": "a.jpg"})
    assert score_call(pred, gold, rules).overall == 0.5


def test_score_bbox_only_arm():
    tools = [ToolSpec("Box", "v1", "", (("bbox", "bbox"),))]
    rules = ToolRuleSet(tools=tools, rules=[], defaults={"Box": "v1"})
    gold = ToolCall("Box_v1", {"bbox": [0, 0, 2, 2]})
    pred = ToolCall("Box_v1", {"bbox": [1, 1, 3, 3]})
    assert score_call(pred, gold, rules).overall == pytest.approx(0.5 + 0.5 / 7, abs=1e-9)


def test_score_missing_arg_zero_extra_ignored():
    rules = make_ruleset()
    gold = ToolCall("OCR_v1", {"image": "a.jpg"})
    pred = ToolCall("OCR_v1", {"unrelated": 1})
    score = score_call(pred, gold, rules)
    assert score.per_arg == {"image": 0.0}
    assert score.overall == 0.5


def test_score_monotone_in_arg_score():
    tools = [ToolSpec("Box", "v1", "", (("bbox", "bbox"), ("text", "text")))]
    rules = ToolRuleSet(tools=tools, rules=[], defaults={"Box": "v1"})
    gold = ToolCall("Box_v1", {"bbox": [0, 0, 2, 2], "text": "red car"})
    good = ToolCall("Box_v1", {"bbox": [0, 0, 2, 2], "text": "red car"})
    worse = ToolCall("Box_v1", {"bbox": [1, 1, 3, 3], "text": "red car"})
    assert score_call(worse, gold, rules).overall < score_call(good, gold, rules).overall


def test_score_version_suffix_required():
    rules = make_ruleset()
    gold = ToolCall("OCR_v2", {"image": "a.jpg"})
    pred = ToolCall("OCR", {"image": "a.jpg"})  # no version suffix
    assert score_call(pred, gold, rules).tool_acc == 0.0


def test_score_unknown_gold_arg_kind_errors():
    tools = [ToolSpec("Odd", "v1", "", (("mystery", "exact"),))]
    rules = ToolRuleSet(tools=tools, rules=[], defaults={"Odd": "v1"})
    gold = ToolCall("Odd_v1", {"not_in_spec_or_table": 3})
    with pytest.raises(ToolCallError):
        score_call(gold, gold, rules)


# -- synthetic dataset -------------------------------------------------------


def test_gen_gta_like_counts_and_consistency(tmp_path):
    ruleset, records = gen_gta_like(7, 13, 24, 451, tmp_path, "train.jsonl",
                                    n_test_records=106)
    assert len(ruleset.defaults) == 13
    assert len(ruleset.rules) == 24
    assert len(records) == 451
    test_lines = (tmp_path / "test.jsonl").read_text().strip().split("\n")
    assert len(test_lines) == 106
    # gold version always matches rule resolution on the record's profile
    for rec in records + [json.loads(l) for l in test_lines]:
        call = ToolCall(rec["gold_call"]["name"], rec["gold_call"]["arguments"])
        base, version = call.split_name()
        assert resolve_required_version(ruleset, rec["profile"], base) == version


def test_gen_gta_like_deterministic(tmp_path):
    gen_gta_like(3, 5, 8, 40, tmp_path / "a", "train.jsonl")
    gen_gta_like(3, 5, 8, 40, tmp_path / "b", "train.jsonl")
    assert (tmp_path / "a" / "train.jsonl").read_bytes() == \
        (tmp_path / "b" / "train.jsonl").read_bytes()
    assert (tmp_path / "a" / "ruleset.json").read_bytes() == \
        (tmp_path / "b" / "ruleset.json").read_bytes()


def test_ruleset_roundtrip(tmp_path):
    ruleset = make_ruleset()
    ruleset.save(tmp_path / "rs.json")
    clone = ToolRuleSet.load(tmp_path / "rs.json")
    assert clone.to_dict() == ruleset.to_dict()
