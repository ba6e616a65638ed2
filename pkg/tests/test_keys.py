import random

from app.core.keys import KeyExtractor, canonicalize_key, extract_key
from app.models.packet import FieldRef, parse_field, parse_ip
from app.models.schemas import ExtractorConfig
from tests.conftest import make_packet

FOUR_TUPLE = ["ip_src", "l4_src", "ip_dst", "l4_dst"]


def test_bidirectional_key_is_direction_free():
    config = ExtractorConfig(selectors=FOUR_TUPLE, bidirectional=True)
    out = make_packet("10.0.0.2:123", "8.0.0.5:678", in_port=2)
    back = make_packet("8.0.0.5:678", "10.0.0.2:123", in_port=1)
    assert extract_key(out, config) == extract_key(back, config)


def test_directed_key_tells_directions_apart():
    config = ExtractorConfig(selectors=FOUR_TUPLE)
    out = make_packet("10.0.0.2:123", "8.0.0.5:678", in_port=2)
    back = make_packet("8.0.0.5:678", "10.0.0.2:123", in_port=1)
    assert extract_key(out, config) != extract_key(back, config)


def test_key_text_puts_smaller_endpoint_first():
    config = ExtractorConfig(selectors=FOUR_TUPLE, bidirectional=True)
    key = extract_key(make_packet("10.0.0.2:123", "8.0.0.5:678", in_port=2), config)
    assert str(key) == "{8.0.0.5:678,10.0.0.2:123}"
    assert key.as_dict() == {
        "ip_src": "8.0.0.5", "l4_src": 678, "ip_dst": "10.0.0.2", "l4_dst": 123,
    }


def test_metadata_selector_reads_bit_range():
    extractor = KeyExtractor(ExtractorConfig(selectors=["meta[15:0]"]))
    pkt = make_packet("10.0.0.2:1", "8.0.0.5:2", in_port=2)
    pkt.metadata = (1 << 16) | 41
    key = extractor.extract(pkt)
    assert extractor.uses_metadata
    assert key.values == (41).to_bytes(2, "big")


def test_from_mapping_matches_extracted_key():
    extractor = KeyExtractor(ExtractorConfig(selectors=FOUR_TUPLE, bidirectional=True))
    pkt = make_packet("10.0.0.2:123", "8.0.0.5:678", in_port=2)
    mapped = extractor.from_mapping(
        {"ip_src": "10.0.0.2", "l4_src": 123, "ip_dst": "8.0.0.5", "l4_dst": 678}
    )
    assert mapped == extractor.extract(pkt)


def test_canonicalize_swaps_pairs_once():
    pairs = [
        (FieldRef("ip_src"), parse_ip("9.9.9.9")),
        (FieldRef("l4_src"), 1),
        (FieldRef("ip_dst"), parse_ip("1.1.1.1")),
        (FieldRef("l4_dst"), 2),
        (parse_field("ip_proto"), 6),
    ]
    key = canonicalize_key(pairs, bidirectional=True)
    values = [value for _, value in key.decode()]
    assert values == [parse_ip("1.1.1.1"), 2, parse_ip("9.9.9.9"), 1, 6]


def test_key_equality_is_over_value_bytes():
    a = canonicalize_key([(FieldRef("l4_src"), 80)])
    b = canonicalize_key([(FieldRef("l4_dst"), 80)])
    assert a == b
    assert hash(a) == hash(b)


def test_random_tuples_fold_and_stay_distinct():
    rng = random.Random(7)
    extractor = KeyExtractor(ExtractorConfig(selectors=FOUR_TUPLE, bidirectional=True))
    tuples = set()
    while len(tuples) < 1000:
        tuples.add(
            (rng.getrandbits(32), rng.getrandbits(16), rng.getrandbits(32), rng.getrandbits(16))
        )
    keys = set()
    canonical = set()
    for a, pa, b, pb in tuples:
        fwd = make_packet("0.0.0.0", "0.0.0.0", in_port=0)
        fwd.ip_src, fwd.l4_src, fwd.ip_dst, fwd.l4_dst = a, pa, b, pb
        rev = fwd.reversed(1)
        key = extractor.extract(fwd)
        assert key == extractor.extract(rev)
        keys.add(key)
        canonical.add(min((a, pa, b, pb), (b, pb, a, pa)))
    assert len(keys) == len(canonical)


def test_empty_selector_list_gives_one_shared_key():
    extractor = KeyExtractor(ExtractorConfig(selectors=[]))
    a = extractor.extract(make_packet("10.0.0.2:1", "8.0.0.5:2", in_port=2))
    b = extractor.extract(make_packet("2.0.0.7:9", "1.0.0.1:80", in_port=0))
    assert a == b
    assert a.values == b""
    assert str(a) == "{}"


def test_source_only_key_text():
    config = ExtractorConfig(selectors=["ip_src", "l4_src"])
    key = extract_key(make_packet("2.0.0.7:678", "1.0.0.1:80", in_port=0), config)
    assert str(key) == "{2.0.0.7:678}"
