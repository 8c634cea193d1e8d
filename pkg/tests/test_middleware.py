import itertools
import threading

import pytest
from hypothesis import given, settings, strategies as st

from hwros.arena import Arena
from hwros.middleware import (
    AlreadyAnsweredError,
    DuplicateNameError,
    GoalStateError,
    Graph,
    ServiceUnavailableError,
    TakeTimeout,
    TypeMismatchError,
    UnknownCorrelationError,
)
from hwros.msg import TypeRegistry, write_value


@pytest.fixture
def graph():
    reg = TypeRegistry()
    reg.register_text("""
    demo action-goal Count { n: u32; }
    demo action-feedback Count { i: u32; }
    demo action-result Count { total: u32; }
    """)
    return Graph(reg, Arena(1 << 22))


def u32(graph):
    return graph.registry.get("std_msgs", "msg", "UInt32")


def test_pub_sub_fifo_and_ownership(graph):
    t = u32(graph)
    a, b = graph.create_node("a"), graph.create_node("b")
    pub = a.create_publisher("/x", t)
    sub = b.create_subscriber("/x", t, queue_depth=16)
    for i in range(10):
        pub.publish_value({"data": i})
    got = []
    for _ in range(10):
        m = sub.take(1)
        got.append(m.read()["data"])
        m.free()
    assert got == list(range(10))
    assert graph.arena.used_bytes == 0


def test_take_times_out_when_empty(graph):
    sub = graph.create_node("a").create_subscriber("/x", u32(graph))
    with pytest.raises(TakeTimeout):
        sub.take(0.01)


def test_published_snapshot_is_isolated_from_later_writes(graph):
    t = graph.registry.get("std_msgs", "msg", "String")
    pub = graph.create_node("a").create_publisher("/s", t)
    sub = graph.create_node("b").create_subscriber("/s", t)
    inst = write_value(graph.arena, t, {"data": "hello"})
    pub.publish(inst)
    ptr = graph.arena.read_u32(inst.root)
    graph.arena.mem_write(ptr, b"HELL")
    taken = sub.take(1)
    assert taken.read()["data"] == "hello"
    assert taken.root != inst.root


def test_every_subscriber_gets_a_private_copy(graph):
    t = u32(graph)
    pub = graph.create_node("p").create_publisher("/x", t)
    subs = [graph.create_node(f"s{i}").create_subscriber("/x", t) for i in range(3)]
    pub.publish_value({"data": 5})
    roots = {s.take(1).root for s in subs}
    assert len(roots) == 3


def test_type_mismatch_on_topic(graph):
    graph.create_node("a").create_publisher("/x", u32(graph))
    with pytest.raises(TypeMismatchError):
        graph.create_node("b").create_subscriber("/x", graph.registry.get("std_msgs", "msg", "String"))


def test_publish_wrong_instance_type(graph):
    pub = graph.create_node("a").create_publisher("/x", u32(graph))
    s = write_value(graph.arena, graph.registry.get("std_msgs", "msg", "String"), {"data": "x"})
    with pytest.raises(TypeMismatchError):
        pub.publish(s)


def test_duplicate_node_and_server(graph):
    graph.create_node("n")
    with pytest.raises(DuplicateNameError):
        graph.create_node("n")
    t = u32(graph)
    graph.create_node("m").create_service_server("svc", t, t)
    with pytest.raises(DuplicateNameError):
        graph.create_node("k").create_service_server("svc", t, t)


def keep_last_oracle(ops, depth):
    """Expected (taken values, dropped count) of a keep-last queue, as plain list operations."""
    queue, taken, dropped = [], [], 0
    for op in ops:
        if op is None:
            if queue:
                taken.append(queue.pop(0))
        else:
            queue.append(op)
            if len(queue) > depth:
                queue = queue[-depth:]
                dropped += 1
    return taken, queue, dropped


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 6), st.lists(st.one_of(st.none(), st.integers(0, 1000)), max_size=60))
def test_keep_last_drop_oldest_matches_oracle(depth, ops):
    graph = Graph(TypeRegistry(), Arena(1 << 16))
    t = u32(graph)
    pub = graph.create_node("p").create_publisher("/q", t)
    sub = graph.create_node("s").create_subscriber("/q", t, queue_depth=depth)
    taken = []
    for op in ops:
        if op is None:
            if sub.pending():
                m = sub.take(0)
                taken.append(m.read()["data"])
                m.free()
        else:
            pub.publish_value({"data": op})
    want_taken, want_left, want_dropped = keep_last_oracle(ops, depth)
    assert taken == want_taken
    assert sub.dropped == want_dropped
    rest = [sub.take(0).read()["data"] for _ in range(sub.pending())]
    assert rest == want_left


def test_correlation_ids_are_unique_and_tagged(graph):
    ids = {graph.next_correlation_id() for _ in range(1000)}
    assert len(ids) == 1000
    assert {i >> 32 for i in ids} == {graph.tag}


def _srv(graph):
    t = u32(graph)
    server = graph.create_node("server").create_service_server("double", t, t)
    return t, server


def test_service_round_trip(graph):
    t, server = _srv(graph)
    client = graph.create_node("client").create_service_client("double", t, t)
    corr = client.send_request_value({"data": 21})
    rc, req = server.take_request(1)
    assert rc == corr
    server.send_response_value(rc, {"data": 2 * req.read()["data"]})
    assert client.take_response(corr, 1).read()["data"] == 42


@pytest.mark.parametrize("order", list(itertools.permutations(["a", "b"])))
@pytest.mark.parametrize("answer", list(itertools.permutations([0, 1])))
def test_two_clients_two_requests_all_interleavings(graph, order, answer):
    t, server = _srv(graph)
    clients = {name: graph.create_node(name).create_service_client("double", t, t) for name in "ab"}
    sent = {}
    for name in order:
        sent[name] = clients[name].send_request_value({"data": ord(name)})
    taken = [server.take_request(1) for _ in range(2)]
    for i in answer:
        corr, inst = taken[i]
        server.send_response_value(corr, {"data": inst.read()["data"] * 2})
    for name in reversed(order):
        assert clients[name].take_response(sent[name], 1).read()["data"] == 2 * ord(name)


def test_responses_answer_their_own_request(graph):
    t, server = _srv(graph)
    client = graph.create_node("c").create_service_client("double", t, t)
    c1 = client.send_request_value({"data": 1})
    c2 = client.send_request_value({"data": 2})
    reqs = [server.take_request(1) for _ in range(2)]
    for corr, inst in reversed(reqs):
        server.send_response_value(corr, {"data": inst.read()["data"] * 10})
    assert client.take_response(c2, 1).read()["data"] == 20
    assert client.take_response(c1, 1).read()["data"] == 10


def test_duplicate_and_unknown_responses(graph):
    t, server = _srv(graph)
    client = graph.create_node("c").create_service_client("double", t, t)
    corr = client.send_request_value({"data": 1})
    server.take_request(1)
    server.send_response_value(corr, {"data": 2})
    with pytest.raises(AlreadyAnsweredError):
        server.send_response_value(corr, {"data": 3})
    with pytest.raises(UnknownCorrelationError):
        server.send_response_value(12345, {"data": 3})
    with pytest.raises(UnknownCorrelationError):
        client.take_response(999, 0.01)


def test_request_without_server(graph):
    t = u32(graph)
    client = graph.create_node("c").create_service_client("nobody", t, t)
    with pytest.raises(ServiceUnavailableError):
        client.send_request_value({"data": 1})


def test_concurrent_clients_no_mismatch(graph):
    t, server = _srv(graph)
    stop = threading.Event()

    def serve():
        while not stop.is_set():
            try:
                corr, inst = server.take_request(0.05)
            except TakeTimeout:
                continue
            server.send_response_value(corr, {"data": inst.read()["data"] * 2})
            inst.free()

    worker = threading.Thread(target=serve)
    worker.start()
    errors = []

    def client_loop(k):
        client = graph.create_node(f"c{k}").create_service_client("double", t, t)
        for i in range(50):
            v = k * 1000 + i
            corr = client.send_request_value({"data": v})
            got = client.take_response(corr, 5)
            if got.read()["data"] != 2 * v:
                errors.append((k, i))
            got.free()

    clients = [threading.Thread(target=client_loop, args=(k,)) for k in range(4)]
    for c in clients:
        c.start()
    for c in clients:
        c.join()
    stop.set()
    worker.join()
    assert errors == []


def _action(graph):
    reg = graph.registry
    types = (reg.get("demo", "action-goal", "Count"), reg.get("demo", "action-feedback", "Count"),
             reg.get("demo", "action-result", "Count"))
    server = graph.create_node("srv").create_action_server("count", *types)
    client = graph.create_node("cli").create_action_client("count", *types)
    return types, server, client


def test_action_goal_feedback_result(graph):
    (goal_t, fb_t, res_t), server, client = _action(graph)
    watcher = graph.create_node("watch").create_subscriber("count/feedback", fb_t, queue_depth=16)
    goal_id = client.send_goal(write_value(graph.arena, goal_t, {"n": 3}))
    gid, goal = server.take_goal(1)
    assert gid == goal_id
    for i in range(goal.read()["n"]):
        server.publish_feedback(gid, write_value(graph.arena, fb_t, {"i": i}))
    server.send_result(gid, write_value(graph.arena, res_t, {"total": 3}), 1)
    assert [client.take_feedback(goal_id, 1).read()["i"] for _ in range(3)] == [0, 1, 2]
    assert client.take_result(goal_id, 1).read()["total"] == 3
    envs = [watcher.take_envelope(0) for _ in range(watcher.pending())]
    assert len(envs) == 3 and all(e.correlation_id == goal_id for e in envs)
    with pytest.raises(GoalStateError):
        server.publish_feedback(gid, write_value(graph.arena, fb_t, {"i": 9}))


def test_action_is_two_services_and_a_topic(graph):
    _, server, _ = _action(graph)
    assert {"count/_goal", "count/_result"} <= set(graph.servers)
    assert "count/feedback" in graph.topics


def test_feedback_for_two_goals_is_demultiplexed(graph):
    (goal_t, fb_t, res_t), server, client = _action(graph)
    g1 = client.send_goal(write_value(graph.arena, goal_t, {"n": 1}))
    g2 = client.send_goal(write_value(graph.arena, goal_t, {"n": 2}))
    s1, _ = server.take_goal(1)
    s2, _ = server.take_goal(1)
    server.publish_feedback(s2, write_value(graph.arena, fb_t, {"i": 20}))
    server.publish_feedback(s1, write_value(graph.arena, fb_t, {"i": 10}))
    assert client.take_feedback(g1, 1).read()["i"] == 10
    assert client.take_feedback(g2, 1).read()["i"] == 20
    server.send_result(s2, write_value(graph.arena, res_t, {"total": 2}), 1)
    server.send_result(s1, write_value(graph.arena, res_t, {"total": 1}), 1)
    assert client.take_result(g1, 1).read()["total"] == 1
    assert client.take_result(g2, 1).read()["total"] == 2
