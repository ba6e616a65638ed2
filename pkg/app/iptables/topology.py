"""Port / interface / subnet bindings of the device being programmed."""
import json
from pathlib import Path
from typing import Optional, Union

import netaddr
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from app.core.exceptions import TranslationError
from app.models.packet import parse_ip


class Interface(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    port: int = Field(ge=0)
    subnet: Optional[str] = None
    address: Optional[str] = None

    def network(self) -> Optional[tuple[int, int]]:
        """(value, mask) of the attached subnet."""
        if self.subnet is None:
            return None
        net = netaddr.IPNetwork(self.subnet, version=4)
        return int(net.network), int(net.netmask)


class Topology(BaseModel):
    """Interfaces, the public address, and which interfaces face out and in."""

    model_config = ConfigDict(frozen=True)

    interfaces: list[Interface]
    public_address: str
    uplink: str = "e0"
    inside: str = "e2"

    @model_validator(mode="after")
    def _check(self) -> "Topology":
        names = [i.name for i in self.interfaces]
        ports = [i.port for i in self.interfaces]
        if len(set(names)) != len(names) or len(set(ports)) != len(ports):
            raise ValueError("interface names and ports must be unique")
        for role in (self.uplink, self.inside):
            if role not in names:
                raise ValueError(f"interface {role!r} is not declared")
        parse_ip(self.public_address)
        return self

    @property
    def ports(self) -> int:
        return max(i.port for i in self.interfaces) + 1

    @property
    def port_names(self) -> dict[str, int]:
        return {i.name: i.port for i in self.interfaces}

    def interface(self, name: Optional[str]) -> Interface:
        for iface in self.interfaces:
            if iface.name == name:
                return iface
        raise TranslationError(f"unknown interface {name!r}")

    def port_of(self, name: str) -> int:
        return self.interface(name).port


def load_topology(source: Union[str, Path, dict]) -> Topology:
    try:
        if isinstance(source, dict):
            return Topology.model_validate(source)
        return Topology.model_validate(json.loads(Path(source).read_text()))
    except ValidationError as exc:
        raise TranslationError(f"bad topology: {exc.errors()[0]['msg']}") from exc
