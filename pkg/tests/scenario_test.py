import os
import re

import pytest

from gcsim import scenario
from gcsim.scenario import (EventKind, ParseError, SchemeMismatch, compare_runs, load_scenario, parse_scenario,
                            run)

GROUP8 = """
scheme lkh
degree 3
kappa 128
setup u1 u2 u3 u4 u5 u6 u7 u8
join u9
leave u8
leave u6
corrupt u7
recover
"""

DIFFERING = ('msg ', 'ct ', 'group ', 'tree ', 'captured ', 'recovery ', 'recovered ')


def test_parse_group8():
    s = parse_scenario(GROUP8)
    assert s.scheme == 'lkh' and s.family == 'stateful'
    assert s.params == {'degree': 3, 'kappa': 128}
    assert [e.kind for e in s.events] == [EventKind.SETUP, EventKind.JOIN, EventKind.LEAVE, EventKind.LEAVE,
                                          EventKind.CORRUPT, EventKind.RECOVER]
    assert s.events[0].users == tuple('u%d' % i for i in range(1, 9))
    assert [e.time for e in s.events[1:]] == [1, 2, 3, 3, 3]
    assert s.events[1].lineno == 6


def test_packaged_group8_matches():
    path = os.path.join(scenario.DATA_FOLDER, 'group8.scn')
    assert load_scenario('group8') == load_scenario(path)
    assert len(load_scenario('group8.scn').events) == 6
    assert 'broadcast5' in scenario.packaged_scenarios()


@pytest.mark.parametrize('text, lineno', [
    ('scheme lkh\njoin u9\nsetup u1 u2', 2),
    ('scheme lkx\nsetup u1', 1),
    ('degree 3\nscheme lkh', 1),
    ('scheme lkh\nsetup u1 u2\ndegree 4', 3),
    ('scheme lkh\nsetup u1 u1', 2),
    ('scheme lkh\nsetup u1 u2\nleave u3', 3),
    ('scheme lkh\nsetup u1 u2\nleave u1\nleave u2', 4),
    ('scheme lkh\nsetup u1 u2\njoin u2', 3),
    ('scheme lkh\nsetup u1 u2\nrecover', 3),
    ('scheme lkh\nsetup u1\nsetup u2', 3),
    ('scheme lkh\nkappa 100', 2),
    ('scheme lkh\ndegree 1', 2),
    ('scheme cs\nn 6', 2),
    ('scheme cs\nn 8\nbroadcast revoke=9', 3),
    ('scheme cs\nn 8\nbroadcast msg="unterminated', 3),
    ('scheme lkh\nsetup u1 u2\nfly u1', 3),
    ('scheme lkh\nsetup u1 u2\ncorrupt u1\nforward-recover u1', 4),
])
def test_parse_errors(text, lineno):
    with pytest.raises(ParseError) as info:
        parse_scenario(text)
    assert info.value.lineno == lineno
    assert str(info.value).startswith('line %d:' % lineno)


def test_parse_errors_without_line():
    with pytest.raises(ParseError):
        parse_scenario('# nothing here\n')
    with pytest.raises(ParseError):
        parse_scenario('scheme cs\n')
    with pytest.raises(ParseError):
        parse_scenario('scheme lkh\ndegree 3\n')


@pytest.mark.parametrize('text', [
    'scheme lkh\nn 8',
    'scheme lkh\nsetup u1 u2\nbroadcast revoke=1',
    'scheme cs\ndegree 3',
    'scheme cs\nn 8\njoin u1',
    'scheme cs\nn 8\ncorrupt 1',
    'scheme lkh\nsetup u1 u2\ncorrupt-receiver 1',
])
def test_scheme_mismatch(text):
    with pytest.raises(SchemeMismatch):
        parse_scenario(text)


def test_repeated_parameter_warns():
    with pytest.warns(UserWarning, match='degree given again'):
        s = parse_scenario('scheme lkh\ndegree 3\ndegree 4\nsetup u1 u2')
    assert s.params['degree'] == 4


def test_stateless_script():
    s = parse_scenario('scheme cs-strong\nn 8\nbroadcast revoke=1,8 msg="hello # not a comment" offline=3  # comment\n'
                       'corrupt-receiver 5\nforward-recover 5\nreveal 5\nrecover')
    assert [e.kind for e in s.events] == [EventKind.SETUP, EventKind.BROADCAST, EventKind.CORRUPT,
                                          EventKind.FORWARD_RECOVER, EventKind.REVEAL, EventKind.RECOVER]
    b = s.events[1]
    assert (b.revoke, b.message, b.offline, b.time) == ((1, 8), b'hello # not a comment', (3,), 1)
    assert s.events[3].time == 2
    assert parse_scenario('scheme cs\nn 4\nsetup').events[0].kind == EventKind.SETUP


def test_churn_and_forward_recover():
    s = parse_scenario('scheme lkh-strong\nsetup a b c\ncorrupt a\nchurn leave=a,b join=d\nforward-recover a')
    churn = s.events[2]
    assert (churn.leaves, churn.joins, churn.time) == (('a', 'b'), ('d',), 3)
    assert s.events[3].time == 1
    with pytest.raises(ParseError):
        parse_scenario('scheme lkh\nsetup a b\nchurn')


def test_with_scheme():
    s = parse_scenario(GROUP8)
    assert s.with_scheme('lkh-strong-opt').policy.value == 'strong-opt'
    with pytest.raises(SchemeMismatch):
        s.with_scheme('cs')
    with pytest.raises(ParseError):
        s.with_scheme('oft')


def test_load_missing():
    with pytest.raises(FileNotFoundError):
        load_scenario('no-such-scenario')


@pytest.mark.parametrize('scheme, expected, counts', [('lkh', 4, [8, 3, 5, 5]), ('lkh-strong', 1, [8, 3, 5, 5]),
                                                      ('lkh-strong-opt', 1, [8, 1, 5, 5])])
def test_run_group8(scheme, expected, counts):
    trace, stats = run(parse_scenario(GROUP8).with_scheme(scheme))
    assert stats.final_recovery == expected
    assert stats.violations == [] and stats.exit_code == 0
    assert list(stats.events['op']) == ['setup', 'join', 'leave', 'leave']
    assert list(stats.events['ciphertexts']) == counts
    assert stats.events['ciphertexts'].sum() == stats.tape_items
    assert 'final_recovery=%d' % expected in stats.lines()
    assert trace.splitlines()[0] == 'event=0 op=setup line=5'


def test_run_is_deterministic():
    s = load_scenario('group8')
    a, stats_a = run(s, seed=3)
    b, stats_b = run(s, seed=3)
    assert a == b
    assert stats_a.lines() == stats_b.lines()
    assert run(s, seed=4)[0] != a


def test_compare_runs():
    s = load_scenario('group8')
    base, _ = run(s)
    assert compare_runs(base, base).empty
    strong, _ = run(s.with_scheme('lkh-strong'))
    diff = compare_runs(base, strong)
    assert not diff.empty
    for text in list(diff['a'].dropna()) + list(diff['b'].dropna()):
        assert text.startswith(DIFFERING), text
    tampered = base.replace('op=join', 'op=leave', 1)
    diff = compare_runs(base, tampered)
    assert len(diff) == 1 and diff['tag'][0] == 'replace'


def test_dump_keys_warns():
    octets = re.compile(r' key=[0-9a-f]{32}$')
    with pytest.warns(UserWarning):
        trace, _ = run(load_scenario('group8'), dump_keys=True)
    assert any(octets.search(line) for line in trace.splitlines())
    assert not any(octets.search(line) for line in run(load_scenario('group8'))[0].splitlines())


def test_run_stateful_stats():
    trace, stats = run(load_scenario('group8'))
    events = stats.events
    assert list(events.columns) == ['op', 't', 'ciphertexts', 'bytes', 'prf_controller', 'prf_member_max',
                                    'prf_member_total', 'height']
    assert list(events['prf_controller']) == [0, 0, 0, 0]
    assert list(events['height']) == [2, 2, 2, 2]
    strong_trace, strong = run(load_scenario('group8').with_scheme('lkh-strong'))
    assert list(strong.events['ciphertexts']) == list(events['ciphertexts'])
    assert (strong.events['prf_controller'] > 0).all()
    # join: 2 sealing f(0) + 12 NEXT; leaves: 5 sealing f(0) + 11 and 10 NEXT
    assert list(strong.events['prf_controller'])[1:] == [14, 16, 15]


@pytest.mark.parametrize('scheme, expected', [('cs', 5), ('cs-strong', 1)])
def test_run_broadcast5(scheme, expected):
    trace, stats = run(load_scenario('broadcast5').with_scheme(scheme))
    assert stats.final_recovery == expected
    assert stats.violations == []
    assert len(stats.events) == 5
    assert 'rx seq=3 user=6 result=offline' in trace
    assert 'rx seq=2 user=8 result=revoked' in trace


def test_cs_strong_center_prf():
    trace, stats = run(load_scenario('broadcast5').with_scheme('cs-strong'))
    covers = list(stats.events['ciphertexts'] - 1)
    nexts = [15, 15, 15, 15, 0]
    assert list(stats.events['prf_controller']) == [c + k for c, k in zip(covers, nexts)]


def test_forward_scenario():
    for scheme in ('lkh', 'lkh-strong', 'lkh-strong-opt'):
        trace, stats = run(load_scenario('forward').with_scheme(scheme))
        assert stats.violations == []
        assert stats.recoveries == [dict(kind='forward', user='u7', count=0)]
        assert stats.final_recovery is None


def test_reveal_in_run():
    text = 'scheme lkh-strong-opt\nsetup a b c d\njoin e\nreveal a\nleave b\nreveal e\n'
    trace, stats = run(parse_scenario(text))
    assert stats.violations == []
    assert sum(line.startswith('reveal ') for line in trace.splitlines()) == 2


@pytest.mark.parametrize('scheme, revealed', [('cs', True), ('cs-strong', False)])
def test_receiver_reveal_after_revoking_broadcast(scheme, revealed):
    text = 'scheme %s\nn 8\nbroadcast revoke=1 msg="a"\nreveal 5\n' % scheme
    trace, stats = run(parse_scenario(text))
    assert stats.violations == []
    assert ('reveal user=5 t=1 none' in trace.splitlines()) != revealed


def test_violations_are_reported(monkeypatch):
    monkeypatch.setattr(scenario.lkh, 'check_correctness', lambda ctrl, members: ['forced'])
    trace, stats = run(load_scenario('group8'))
    assert stats.violations and stats.exit_code == 2
    assert stats.lines()[-1] == 'violations=%d' % len(stats.violations)
