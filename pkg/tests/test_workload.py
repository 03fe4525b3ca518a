"""Workload script parsing, loop expansion, and attack mutations."""

import pytest

from mvxsim.syscalls import SyscallKind
from mvxsim.workload import (
    AttackSpec,
    ScenarioFormatError,
    VariantProgram,
    directive_args,
    mutate,
    parse_attack,
    parse_workload,
)


def kinds(program):
    return [d.kind.value for d in program]


# -- parsing -------------------------------------------------------------------


def test_single_call_line():
    program = parse_workload("call getcwd\ncall exit code=0\n")
    assert kinds(program) == ["getcwd", "exit"]
    assert program[1].kwargs == {"code": 0}


def test_empty_script_parses_to_no_events():
    program = parse_workload("# nothing but comments\n\n")
    assert program == []
    vp = VariantProgram(program, 0, None)
    assert vp.next_event() is None


def test_first_event_seq_zero():
    program = parse_workload("call getcwd\ncall exit code=0\n")
    vp = VariantProgram(program, 0, None)
    first = vp.next_event()
    assert first.kind is SyscallKind.GETCWD and first.seq_no == 0


def test_loop_unrolls_with_sequential_seq_nos():
    program = parse_workload("loop 3\ncall read fd=3 len=8\nend\n")
    assert kinds(program) == ["read", "read", "read"]
    vp = VariantProgram(program, 1, None)
    seqs = []
    while True:
        e = vp.next_event()
        if e is None:
            break
        seqs.append(e.seq_no)
    assert seqs == [0, 1, 2]


def test_nested_loops_expand_eagerly():
    program = parse_workload(
        "loop 2\ncall getcwd\nloop 2\ncall brk inc=1\nend\nend\n")
    assert kinds(program) == ["getcwd", "brk", "brk", "getcwd", "brk", "brk"]


def test_parse_errors_cite_line_numbers():
    with pytest.raises(ScenarioFormatError) as err:
        parse_workload("call getcwd\ncall nosuchcall\n")
    assert "line 2" in str(err.value)


def test_unterminated_loop_rejected():
    with pytest.raises(ScenarioFormatError):
        parse_workload("loop 2\ncall getcwd\n")


def test_end_without_loop_rejected():
    with pytest.raises(ScenarioFormatError):
        parse_workload("call getcwd\nend\n")


def test_bad_key_value_cites_line():
    with pytest.raises(ScenarioFormatError) as err:
        parse_workload("call read fd\n")
    assert "line 1" in str(err.value)


# -- directive to normalized args ----------------------------------------------


def test_open_flags_comma_split():
    program = parse_workload("call open path=/a flags=wronly,create\n")
    args = directive_args(program[0])
    assert args.flags == frozenset({"wronly", "create"})
    assert args.path == "/a"


def test_write_data_becomes_digest():
    program = parse_workload("call write fd=3 data=hello\n")
    args = directive_args(program[0])
    assert args.payload_len == 5
    assert args.payload_digest is not None


def test_setsockopt_symbols_and_value():
    program = parse_workload(
        "call setsockopt fd=4 level=tcp opt=nodelay value=1\n")
    args = directive_args(program[0])
    assert args.symbols == ("tcp", "nodelay")
    assert args.numbers == (1,)


def test_missing_required_argument_rejected():
    with pytest.raises(ScenarioFormatError):
        parse_workload("call open flags=rdonly\n")


# -- attack grammar ------------------------------------------------------------


def test_parse_extra_attack():
    spec = parse_attack("extra:mprotect@1:5")
    assert spec.op == "extra" and spec.kind is SyscallKind.MPROTECT
    assert spec.variant_id == 1 and spec.position == 5


def test_parse_perturb_attack():
    spec = parse_attack("perturb:len:8@0:2")
    assert (spec.op, spec.tfield, spec.delta) == ("perturb", "len", "8")
    assert spec.variant_id == 0 and spec.position == 2


def test_parse_skip_and_token_attacks():
    assert parse_attack("skip@1:3").op == "skip"
    assert parse_attack("token-tamper@0:1").is_token_attack
    assert parse_attack("token-replay@1:9").is_token_attack
    assert not parse_attack("skip@1:3").is_token_attack


def test_parse_attack_rejects_garbage():
    for bad in ("extra@1:2", "extra:nosuchkind@1:2", "perturb:len@1:2",
                "skip@x:2", "frobnicate@1:2", ""):
        with pytest.raises(ScenarioFormatError):
            parse_attack(bad)


def test_mutate_extra_inserts_only_on_target_variant():
    program = parse_workload("call getcwd\ncall getcwd\n")
    spec = parse_attack("extra:mprotect@1:1")
    v0 = mutate(program, spec, 0)
    v1 = mutate(program, spec, 1)
    assert kinds(v0) == ["getcwd", "getcwd"]
    assert kinds(v1) == ["getcwd", "mprotect", "getcwd"]


def test_mutate_skip_removes_directive():
    program = parse_workload("call getcwd\ncall brk inc=1\ncall exit code=0\n")
    spec = parse_attack("skip@0:1")
    assert kinds(mutate(program, spec, 0)) == ["getcwd", "exit"]


def test_mutate_perturb_int_field():
    program = parse_workload("call read fd=3 len=8\n")
    spec = parse_attack("perturb:len:8@0:0")
    mutated = mutate(program, spec, 0)
    assert mutated[0].kwargs["len"] == 16


def test_mutate_perturb_str_field():
    program = parse_workload("call open path=/app/f flags=rdonly\n")
    spec = parse_attack("perturb:path:x@0:0")
    assert mutate(program, spec, 0)[0].kwargs["path"] == "/app/f-x"


def test_mutated_program_renumbers_without_gaps():
    program = parse_workload("loop 4\ncall getcwd\nend\n")
    spec = parse_attack("skip@0:2")
    vp = VariantProgram(program, 0, spec)
    seqs = []
    while True:
        e = vp.next_event()
        if e is None:
            break
        seqs.append(e.seq_no)
    assert seqs == [0, 1, 2]


def test_token_attacks_leave_program_untouched():
    program = parse_workload("call getcwd\ncall getcwd\n")
    spec = parse_attack("token-tamper@0:1")
    assert kinds(mutate(program, spec, 0)) == ["getcwd", "getcwd"]


def test_attack_applies_to_position_in_expanded_program():
    program = parse_workload("loop 3\ncall brk inc=4\nend\n")
    spec = AttackSpec(op="perturb", variant_id=1, position=2,
                      tfield="inc", delta="1")
    mutated = mutate(program, spec, 1)
    assert [d.kwargs["inc"] for d in mutated] == [4, 4, 5]
