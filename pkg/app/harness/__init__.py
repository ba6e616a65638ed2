"""Traffic harness: pcap I/O, synthetic flows, replay with oracle, benchmarks."""
from app.harness.bench import bench, synthetic_pipeline
from app.harness.pcap import ingest_pcap, read_pcap, write_pcap
from app.harness.replay import replay
from app.harness.traffic import gen_traffic

__all__ = [
    "bench",
    "gen_traffic",
    "ingest_pcap",
    "read_pcap",
    "replay",
    "synthetic_pipeline",
    "write_pcap",
]
