import pytest
from hypothesis import given, settings, strategies as st

from hwros.config import (
    Arg,
    ConfigError,
    ProjectConfig,
    ResourceDecl,
    ResourceGroup,
    ThreadConfig,
    format_size,
    parse_config,
    parse_size,
    render_config,
)

LISTING = """\
[ResourceGroup(at)ResourceGroupSobel]
node_3 = rosnode, "Sobel"
filter_service_msg = rossrvmsg, application_msgs, srv, SobelSrv
filter_server = rossrvs, node_3, filter_service_msg, "sobelservice", 10000

[ResourceGroup(at)ResourceGroupDIP]
node_2 = rosnode, "DIP"
filter_service_msg = rossrvmsg, application_msgs, srv, SobelSrv
filter_client = rossrvc, node_2, filter_service_msg, "sobelservice", 10000
image_msg = rosmsg, sensor_msgs, msg, Image
sub = rossub, node_2, image_msg, "/image_raw", 10000
pub = rospub, node_2, image_msg, "/image_filtered"
"""


def q(v):
    return Arg(v, True)


def a(v):
    return Arg(v)


EXPECTED_GROUPS = [
    ResourceGroup("ResourceGroupSobel", [
        ResourceDecl("node_3", "rosnode", (q("Sobel"),)),
        ResourceDecl("filter_service_msg", "rossrvmsg", (a("application_msgs"), a("srv"), a("SobelSrv"))),
        ResourceDecl("filter_server", "rossrvs",
                     (a("node_3"), a("filter_service_msg"), q("sobelservice"), a("10000"))),
    ]),
    ResourceGroup("ResourceGroupDIP", [
        ResourceDecl("node_2", "rosnode", (q("DIP"),)),
        ResourceDecl("filter_service_msg", "rossrvmsg", (a("application_msgs"), a("srv"), a("SobelSrv"))),
        ResourceDecl("filter_client", "rossrvc",
                     (a("node_2"), a("filter_service_msg"), q("sobelservice"), a("10000"))),
        ResourceDecl("image_msg", "rosmsg", (a("sensor_msgs"), a("msg"), a("Image"))),
        ResourceDecl("sub", "rossub", (a("node_2"), a("image_msg"), q("/image_raw"), a("10000"))),
        ResourceDecl("pub", "rospub", (a("node_2"), a("image_msg"), q("/image_filtered"))),
    ]),
]


def test_listing_parses_to_exact_object_graph():
    cfg = parse_config(LISTING)
    assert cfg.groups == EXPECTED_GROUPS
    assert cfg.threads == []


def test_listing_derived_facts():
    cfg = parse_config(LISTING)
    sobel, dip = cfg.groups
    assert sobel.node.target == "Sobel"
    assert dip.node.target == "DIP"
    server = sobel["filter_server"]
    assert (server.node_ref, server.msg_ref, server.target, server.polling_us) == \
        ("node_3", "filter_service_msg", "sobelservice", 10000)
    assert dip["filter_client"].target == "sobelservice"
    assert dip["sub"].target == "/image_raw" and dip["sub"].polling_us == 10000
    assert dip["pub"].target == "/image_filtered" and dip["pub"].polling_us is None
    assert dip["image_msg"].message_key == ("sensor_msgs", "msg", "Image")


def test_render_parse_round_trip_is_stable():
    cfg = parse_config(LISTING)
    text = render_config(cfg)
    again = parse_config(text)
    assert again == cfg
    assert render_config(again) == text


def test_empty_text_gives_empty_config():
    assert parse_config("") == ProjectConfig()
    assert parse_config("# nothing\n\n") == ProjectConfig()


def test_at_sign_header_equivalent():
    a_ = parse_config(LISTING)
    b_ = parse_config(LISTING.replace("(at)", "@"))
    assert a_ == b_


@pytest.mark.parametrize("text, message", [
    ('[ResourceGroup@G]\nn = rosnode, "N"\nm = rosmsg, std_msgs, msg, UInt32\n'
     'x = rossub, nodeX, m, "/t", 10', "unresolved reference to rosnode 'nodeX'"),
    ('[ResourceGroup@G]\nn = rosnode, "N"\nx = rossub, n, missing, "/t", 10', "unresolved reference"),
    ('[ResourceGroup@G]\nn = rosthing, "N"', "unknown kind"),
    ('[ResourceGroup@G]\nn = rosnode, "N", extra', "takes 1 arguments"),
    ('[ResourceGroup@G]\nn = rosnode, "N"\nn = rosnode, "M"', "duplicate name"),
    ('[ResourceGroup@G]\nn = rosnode, "N"\nm = rosmsg, std_msgs, msg, UInt32\n'
     'x = rossub, n, m, "/t", 0', "polling period"),
    ('[ResourceGroup@G]\nn = rosnode, "N"\nm = rosmsg, std_msgs, msg, UInt32\n'
     'x = rossub, n, m, "/t", ten', "polling period"),
    ('[ResourceGroup@G]\nm = rossrvmsg, application_msgs, msg, SobelSrv', "expects 'srv'"),
    ("[Nonsense]\n", "unknown section"),
    ("x = 1\n", "outside any section"),
])
def test_config_errors(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(text)


def test_rossub_with_wrong_message_kind_is_rejected():
    text = ('[ResourceGroup@G]\nn = rosnode, "N"\nm = rossrvmsg, application_msgs, srv, SobelSrv\n'
            'x = rossub, n, m, "/t", 10')
    with pytest.raises(ConfigError, match="unresolved reference to rosmsg"):
        parse_config(text)


FULL = """\
[General]
SlotCount = 2
ArenaSize = 16MiB
MaxMessageSize = 7MiB

[Transport]
Listen = 127.0.0.1:7000
Peers = 127.0.0.1:7001, 127.0.0.1:7002

[Benchmark]
Sizes = 4B,8KiB
Iterations = 7
Timeout = 2.5

[ResourceGroup@A]
n = rosnode, "alpha"
m = rosmsg, std_msgs, msg, UInt32
s = rossub, n, m, "/in", 500
p = rospub, n, m, "/out"

[ResourceGroup@B]
n = rosnode, "beta"
m = rosactmsg, demo, action, Move
srv = rosacts, n, m, "move", 1000
cli = rosactc, n, m, "move", 1000

[Thread@a]
ResourceGroup = A
Behavior = copy
Mapping = hw
Slot = 1

[Thread@b]
ResourceGroup = B
Behavior = copy
Mapping = sw
"""


def test_full_config_sections():
    cfg = parse_config(FULL)
    assert cfg.slot_count == 2 and cfg.slots == 2
    assert cfg.arena_size == 16 * 1024 * 1024
    assert cfg.max_message_size == 7 * 1024 * 1024
    assert cfg.listen == "127.0.0.1:7000"
    assert cfg.peers == ["127.0.0.1:7001", "127.0.0.1:7002"]
    assert cfg.sizes == (4, 8192)
    assert cfg.iterations == 7 and cfg.timeout == 2.5
    assert cfg.threads == [ThreadConfig("a", "A", "copy", "hw", 1), ThreadConfig("b", "B", "copy", "sw", None)]
    assert parse_config(render_config(cfg)) == cfg


def test_slot_rules():
    bad_bounds = FULL.replace("Slot = 1", "Slot = 2")
    with pytest.raises(ConfigError, match="outside"):
        parse_config(bad_bounds)
    two_on_zero = FULL.replace("Slot = 1", "Slot = 0").replace("Mapping = sw", "Mapping = hw\nSlot = 0")
    with pytest.raises(ConfigError, match="slot conflict"):
        parse_config(two_on_zero)
    c2 = parse_config(FULL).with_mapping({"b": "hw"})
    c2.thread("b").slot = 1
    with pytest.raises(ConfigError, match="slot conflict"):
        c2.validate()


def test_with_mapping_assigns_free_slot():
    cfg = parse_config(FULL)
    c2 = cfg.with_mapping({"beta": "hw"})
    assert c2.thread("b").mapping == "hw"
    assert c2.thread("b").slot == 0
    assert cfg.thread("b").mapping == "sw"
    with pytest.raises(ConfigError):
        cfg.with_mapping({"nobody": "hw"})


def test_thread_group_needs_exactly_one_node():
    text = '[ResourceGroup@G]\nm = rosmsg, std_msgs, msg, UInt32\n[Thread@t]\nResourceGroup = G\nBehavior = copy\n'
    with pytest.raises(ConfigError, match="rosnode"):
        parse_config(text)


@pytest.mark.parametrize("text, n", [("4B", 4), ("8KiB", 8192), ("1MiB", 1 << 20), ("6MiB", 6 << 20), ("12", 12)])
def test_parse_size(text, n):
    assert parse_size(text) == n
    assert parse_size(format_size(n)) == n


_ident = st.from_regex(r"[a-z][a-z0-9_]{0,8}", fullmatch=True)
_quoted = st.text(st.characters(blacklist_categories=("Cc", "Cs")), max_size=12).filter(lambda s: s.strip() == s)


@settings(max_examples=100, deadline=None)
@given(_ident, _quoted, _quoted, st.integers(1, 10 ** 6))
def test_round_trip_random_groups(node, node_name, topic, poll):
    if not node_name or not topic:
        return
    cfg = ProjectConfig(groups=[ResourceGroup("G", [
        ResourceDecl(node, "rosnode", (q(node_name),)),
        ResourceDecl("m_" + node, "rosmsg", (a("std_msgs"), a("msg"), a("UInt32"))),
        ResourceDecl("s_" + node, "rossub", (a(node), a("m_" + node), q(topic), a(str(poll)))),
    ])])
    assert parse_config(render_config(cfg)) == cfg
