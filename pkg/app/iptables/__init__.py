"""iptables frontend: rule parsing, translation to pipelines, NAT port refill."""
from app.iptables.port_bucket import PortBucket, SyncResult, bootstrap, port_bucket_sync
from app.iptables.rules import IptablesRule, effective_rules, parse_rule, parse_rules
from app.iptables.topology import Interface, Topology, load_topology
from app.iptables.translator import conntrack_template, translate

__all__ = [
    "Interface",
    "IptablesRule",
    "PortBucket",
    "SyncResult",
    "Topology",
    "bootstrap",
    "conntrack_template",
    "effective_rules",
    "load_topology",
    "parse_rule",
    "parse_rules",
    "port_bucket_sync",
    "translate",
]
