import pytest

from pipewright.contracts import SchemaContract
from pipewright.gateway import PromptBlock, compose
from pipewright.model import ColumnProfile, ColumnType, DataProfile, FileProfile, Phase, Plan, Substep
from pipewright.prompts import (ParseError, arg_name, codegen_blocks, contract_only_view,
                                extract_code, parse_critique, parse_plan, parse_semantic, plan_text,
                                parse_substeps, schema_block, stage_function_name)
from pipewright.recovery import Severity

PLAN = """Here is the plan.
```yaml
phases:
  - id: load
    objective: read the files
    rationale: nothing works without data
  - id: answer
    objective: compute the answer
```
"""

SUBSTEPS = """```yaml
substeps:
  - id: revenue
    agent_type: DataProcessor
    objective: add revenue
    contract:
      required_inputs: {units: numeric}
      columns_add: {revenue: real}
      value_constraints:
        revenue: [{range: [0, null]}]
      row_relation: less
```"""


def test_parse_plan():
    plan = parse_plan(PLAN, revision=2)
    assert [p.id for p in plan.phases] == ["load", "answer"] and plan.revision == 2
    assert plan.phases[0].rationale == "nothing works without data"


@pytest.mark.parametrize("text", ["no yaml here: [", "```yaml\n- a\n```", "```yaml\nphases: []\n```",
                                  "```yaml\nphases:\n  - objective: x\n```"])
def test_bad_plans(text):
    with pytest.raises(ParseError):
        parse_plan(text)


def test_parse_substeps_with_contract():
    (s,) = parse_substeps(SUBSTEPS)
    assert s.contract.row_relation.value == "LESS"
    assert s.contract.value_constraints["revenue"][0].lo == 0
    with pytest.raises(ParseError):
        parse_substeps("```yaml\nsubsteps:\n  - id: x\n    contract: {columns_add: {a: number}}\n```")


def test_parse_critique():
    c = parse_critique("```yaml\nseverity: major\nissues:\n  - description: wrong key\n    target: p1\n```")
    assert c.severity is Severity.MAJOR and c.issues[0].target == "p1"
    assert parse_critique("```yaml\nseverity: NONE\nissues: [stray]\n```").issues == ()
    with pytest.raises(ParseError):
        parse_critique("```yaml\nseverity: fatal\n```")


def test_parse_semantic():
    assert parse_semantic("```yaml\nverdict: Plausible\n```") == ("plausible", "")
    assert parse_semantic("```yaml\nverdict: implausible\nreason: negative\n```") == ("replan", "negative")
    with pytest.raises(ParseError):
        parse_semantic("```yaml\nverdict: maybe\n```")


def test_extract_code_prefers_python_fence():
    text = "```yaml\na: 1\n```\n```python\ndef stage_x(t):\n    return t\n```"
    assert extract_code(text) == "def stage_x(t):\n    return t\n"
    assert extract_code("def stage_x(t): return t") == "def stage_x(t): return t\n"


def test_names():
    assert stage_function_name("Top-Region") == "stage_top_region"
    assert arg_name("2021 data") == "t_2021_data"


def profile():
    cols = (ColumnProfile("region", ColumnType.TEXT, 0.0, 4, sample_values=("west", "east")),
            ColumnProfile("units", ColumnType.INTEGER, 0.04, 50, 1, 99, ("12",)))
    return DataProfile((FileProfile("/x/sales.csv", "sales", 1500, True, ",", cols),), "summary")


def test_schema_block_carries_no_row_values():
    text = schema_block(profile(), "total revenue by region")
    assert "units: integer, 4% null, range 1 to 99" in text
    assert "west" not in text and "east" not in text


def test_codegen_prompt_keeps_contract_under_pressure():
    s = Substep("revenue", "DataProcessor", "add revenue",
                contract=SchemaContract(columns_add={"revenue": "real"}))
    blocks = codegen_blocks(s, ["sales"], "x" * 4000, ["drop nulls"], "g" * 400, "KeyError", ["w"])
    c = compose(blocks, 200)
    assert "contract" in c.included and "task" in c.included and "tools" in c.dropped
    assert "def stage_revenue(sales):" in c.prompt


def test_contract_only_view():
    producer = Substep("revenue", "DataProcessor", "x",
                       contract=SchemaContract(columns_add={"revenue": "real"}, columns_remove=["junk"]))
    view = contract_only_view("revenue", producer, ["region", "junk"])
    assert "expected columns: region, revenue" in view and "adds column `revenue`" in view
    assert isinstance(PromptBlock("v", 1, view).token_estimate, int)


def test_plan_round_trip_through_text():
    plan = Plan([Phase("a", "do a", "because")])
    assert parse_plan(plan_text(plan)).to_dict() == plan.to_dict()
