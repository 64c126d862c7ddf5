"""Symbolic domain schema, entity database, and goal generation.

The ontology declares, per domain, an ordered list of attributes. A subset of
the attributes are constraint slots (categorical with a closed candidate list,
or free-valued); the rest are requestable-only attributes such as reference
codes and phone numbers. The reserved domain "general" carries no attributes
and is used for small talk and closing turns.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

GENERAL_DOMAIN = "general"
UNKNOWN = "unknown"
DONTCARE = "dontcare"

CATEGORICAL = "categorical"
FREE = "free"


class DomainNotFoundError(KeyError):
    """Raised when an operation names a domain the ontology does not define."""


class GoalGenerationError(RuntimeError):
    """Raised when no satisfiable goal could be drawn within the retry budget."""


def normalize_value(value: str) -> str:
    """Lowercase, trim, and collapse internal whitespace."""
    return " ".join(value.lower().split())


@dataclass(frozen=True)
class SlotSpec:
    """One attribute of a domain.

    ``kind`` is None for requestable-only attributes, otherwise "categorical"
    (with ``values`` as the candidate list) or "free".
    """

    name: str
    kind: str | None = None
    values: tuple[str, ...] = ()

    @property
    def is_constraint(self) -> bool:
        return self.kind is not None


@dataclass(frozen=True)
class DomainSpec:
    name: str
    attributes: tuple[SlotSpec, ...]

    @property
    def slots(self) -> tuple[SlotSpec, ...]:
        return tuple(a for a in self.attributes if a.is_constraint)

    @property
    def slot_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes if a.is_constraint)

    @property
    def requestables(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes if not a.is_constraint)

    @property
    def attribute_names(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.attributes)

    def slot(self, name: str) -> SlotSpec:
        for a in self.attributes:
            if a.name == name:
                return a
        raise KeyError(f"domain {self.name!r} has no attribute {name!r}")


class Ontology:
    """Immutable registry of domains, slots, and requestable attributes."""

    def __init__(self, domains: list[DomainSpec]):
        names = [d.name for d in domains]
        if len(set(names)) != len(names):
            raise ValueError("duplicate domain names")
        self._domains = {d.name: d for d in domains}
        if GENERAL_DOMAIN not in self._domains:
            self._domains[GENERAL_DOMAIN] = DomainSpec(GENERAL_DOMAIN, ())
        general = self._domains[GENERAL_DOMAIN]
        if general.attributes:
            raise ValueError("the general domain must not declare attributes")
        for d in self._domains.values():
            for a in d.attributes:
                if a.kind == CATEGORICAL and len(a.values) < 2:
                    raise ValueError(
                        f"categorical slot {d.name}.{a.name} needs >= 2 candidate values"
                    )

    @property
    def domain_names(self) -> tuple[str, ...]:
        return tuple(self._domains)

    @property
    def task_domains(self) -> tuple[str, ...]:
        """Domains with actual content, i.e. everything but general."""
        return tuple(n for n in self._domains if n != GENERAL_DOMAIN)

    def domain(self, name: str) -> DomainSpec:
        try:
            return self._domains[name]
        except KeyError:
            raise DomainNotFoundError(name) from None

    def has_domain(self, name: str) -> bool:
        return name in self._domains

    def to_dict(self) -> dict:
        return {
            "domains": [
                {
                    "name": d.name,
                    "attributes": [
                        {"name": a.name, "kind": a.kind, "values": list(a.values)}
                        for a in d.attributes
                    ],
                }
                for d in self._domains.values()
            ]
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Ontology":
        domains = []
        for d in data["domains"]:
            attrs = tuple(
                SlotSpec(a["name"], a.get("kind"), tuple(a.get("values") or ()))
                for a in d["attributes"]
            )
            domains.append(DomainSpec(d["name"], attrs))
        return cls(domains)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Ontology":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Entity:
    """One database row: a domain plus a full attribute-value mapping."""

    domain: str
    attributes: dict[str, str]

    def validate(self, ontology: Ontology) -> None:
        spec = ontology.domain(self.domain)
        expected = set(spec.attribute_names)
        got = set(self.attributes)
        if expected != got:
            raise ValueError(
                f"entity attributes {sorted(got)} != ontology attributes {sorted(expected)}"
            )
        for k, v in self.attributes.items():
            if v != normalize_value(v):
                raise ValueError(f"attribute {k}={v!r} is not normalized")


class Database:
    """Read-only entity store with stable insertion order per domain."""

    def __init__(self, ontology: Ontology, entities: list[Entity] | None = None):
        self.ontology = ontology
        self._by_domain: dict[str, list[Entity]] = {
            name: [] for name in ontology.task_domains
        }
        for e in entities or []:
            self.add(e)

    def add(self, entity: Entity) -> None:
        entity.validate(self.ontology)
        self._by_domain[entity.domain].append(entity)

    def entities(self, domain: str) -> list[Entity]:
        if domain == GENERAL_DOMAIN:
            return []
        if domain not in self._by_domain:
            raise DomainNotFoundError(domain)
        return list(self._by_domain[domain])

    def __len__(self) -> int:
        return sum(len(v) for v in self._by_domain.values())

    def all_entities(self) -> list[Entity]:
        return [e for v in self._by_domain.values() for e in v]

    def find_by_name(self, domain: str, name: str) -> Entity | None:
        name = normalize_value(name)
        for e in self.entities(domain):
            if e.attributes.get("name") == name or e.attributes.get("trainid") == name:
                return e
        return None

    def value_pool(self, domain: str, attribute: str) -> list[str]:
        """Distinct values observed for one attribute, insertion-ordered."""
        seen: dict[str, None] = {}
        for e in self.entities(domain):
            seen.setdefault(e.attributes[attribute])
        return list(seen)

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for e in self.all_entities():
                fh.write(json.dumps({"domain": e.domain, "attributes": e.attributes}) + "\n")

    @classmethod
    def load(cls, path: str | Path, ontology: Ontology) -> "Database":
        db = cls(ontology)
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                db.add(Entity(rec["domain"], dict(rec["attributes"])))
        return db


@dataclass
class DialogueState:
    """Active-domain slot-value estimate; unset slots hold "unknown"."""

    domain: str
    slots: dict[str, str] = field(default_factory=dict)

    def validate(self, ontology: Ontology) -> None:
        spec = ontology.domain(self.domain)
        if set(self.slots) != set(spec.slot_names):
            raise ValueError(
                f"state slots {sorted(self.slots)} != domain slots {sorted(spec.slot_names)}"
            )
        for name, value in self.slots.items():
            slot = spec.slot(name)
            if slot.kind == CATEGORICAL and value not in (UNKNOWN, DONTCARE):
                if value not in slot.values:
                    raise ValueError(
                        f"{self.domain}.{name}={value!r} not a candidate value"
                    )

    @classmethod
    def empty(cls, ontology: Ontology, domain: str) -> "DialogueState":
        spec = ontology.domain(domain)
        return cls(domain, {s: UNKNOWN for s in spec.slot_names})

    def constrained_items(self) -> list[tuple[str, str]]:
        return [
            (k, v) for k, v in self.slots.items() if v not in (UNKNOWN, DONTCARE)
        ]

    def copy(self) -> "DialogueState":
        return DialogueState(self.domain, dict(self.slots))


@dataclass
class DomainGoal:
    informable: dict[str, str]
    requestable: list[str]


@dataclass
class UserGoal:
    """Per-domain constraints and information requests, in domain order."""

    domains: dict[str, DomainGoal]

    def validate(self, ontology: Ontology) -> None:
        if not any(g.requestable for g in self.domains.values()):
            raise ValueError("goal must request at least one attribute")
        for name, g in self.domains.items():
            spec = ontology.domain(name)
            for slot, value in g.informable.items():
                s = spec.slot(slot)
                if not s.is_constraint:
                    raise ValueError(f"{name}.{slot} is not an informable slot")
                if s.kind == CATEGORICAL and value not in s.values:
                    raise ValueError(f"{name}.{slot}={value!r} not in ontology")
            for r in g.requestable:
                if r not in spec.requestables:
                    raise ValueError(f"{name}.{r} is not requestable")

    def to_dict(self) -> dict:
        return {
            d: {"informable": g.informable, "requestable": list(g.requestable)}
            for d, g in self.domains.items()
        }

    @classmethod
    def from_dict(cls, data: dict) -> "UserGoal":
        return cls(
            {
                d: DomainGoal(dict(g["informable"]), list(g["requestable"]))
                for d, g in data.items()
            }
        )


def query(db: Database, domain: str, state: DialogueState) -> list[Entity]:
    """Entities matching every constrained slot of ``state``, insertion order.

    "unknown" and "dontcare" slots do not filter; matching is case-insensitive
    exact after normalization. The general domain has no database.
    """
    if domain == GENERAL_DOMAIN:
        return []
    constraints = [
        (k, normalize_value(v)) for k, v in state.constrained_items()
    ]
    out = []
    for e in db.entities(domain):
        if all(e.attributes.get(k) == v for k, v in constraints):
            out.append(e)
    return out


def describe_db_result(
    entities: list[Entity], ontology: Ontology, domain: str
) -> str:
    """Render the query outcome: count plus the first match's attributes."""
    if domain == GENERAL_DOMAIN:
        return "database not available"
    if not entities:
        return "0 found :"
    first = entities[0]
    spec = ontology.domain(domain)
    parts = [f"{len(entities)} found :"]
    for name in spec.attribute_names:
        parts.append(f"{name} {first.attributes[name]}")
    return " ".join(parts)


def default_ontology() -> Ontology:
    """The built-in four-domain schema used by the synthetic environment."""
    areas = ("centre", "north", "south", "east", "west")
    prices = ("cheap", "moderate", "expensive")
    foods = ("italian", "chinese", "indian", "british", "french")
    stations = ("cambridge", "london", "broxbourne", "ely", "stevenage", "norwich")
    days = ("monday", "tuesday", "wednesday", "thursday", "friday", "saturday", "sunday")
    return Ontology(
        [
            DomainSpec(
                "restaurant",
                (
                    SlotSpec("name"),
                    SlotSpec("area", CATEGORICAL, areas),
                    SlotSpec("pricerange", CATEGORICAL, prices),
                    SlotSpec("food", CATEGORICAL, foods),
                    SlotSpec("postcode"),
                    SlotSpec("phone"),
                    SlotSpec("address"),
                ),
            ),
            DomainSpec(
                "hotel",
                (
                    SlotSpec("name"),
                    SlotSpec("area", CATEGORICAL, areas),
                    SlotSpec("pricerange", CATEGORICAL, prices),
                    SlotSpec("type", CATEGORICAL, ("hotel", "guesthouse")),
                    SlotSpec("parking", CATEGORICAL, ("yes", "no")),
                    SlotSpec("postcode"),
                    SlotSpec("phone"),
                ),
            ),
            DomainSpec(
                "train",
                (
                    SlotSpec("trainid"),
                    SlotSpec("departure", CATEGORICAL, stations),
                    SlotSpec("destination", CATEGORICAL, stations),
                    SlotSpec("day", CATEGORICAL, days),
                    SlotSpec("arriveby", FREE),
                    SlotSpec("leaveat", FREE),
                    SlotSpec("price"),
                    SlotSpec("duration"),
                ),
            ),
            DomainSpec(GENERAL_DOMAIN, ()),
        ]
    )


_RESTAURANT_NAMES = [
    "pizza express", "golden wok", "river bistro", "royal spice", "the ivy house",
    "curry garden", "blue lotus", "la margherita", "the oak table", "noodle bar",
    "saffron kitchen", "old mill diner", "the copper pot", "bangkok city",
    "little venice", "the green room", "dragon palace", "cote brasserie",
    "taj mahal", "the lame duck",
]
_HOTEL_NAMES = [
    "alpha lodge", "city stop hotel", "the grand arms", "acorn guest house",
    "riverside inn", "the white hart", "kings lodge", "sunset guest house",
    "the bell tower", "garden view hotel", "red lion inn", "harbour lights",
    "the old rectory", "station hotel", "maple guest house", "the crown plaza",
]
_STREETS = [
    "mill road", "king street", "station road", "high street", "bridge lane",
    "market square", "park avenue", "castle hill", "church lane", "regent street",
]


def _postcode(rng: random.Random) -> str:
    letters = "abcdefghjkmnpqrstuvwxyz"
    return "cb{}{}{}{}".format(
        rng.randint(1, 5), rng.randint(0, 9), rng.choice(letters), rng.choice(letters)
    )


def _phone(rng: random.Random) -> str:
    return "01223" + "".join(str(rng.randint(0, 9)) for _ in range(6))


def _time(rng: random.Random) -> str:
    return f"{rng.randint(5, 23):02d}:{rng.choice([0, 15, 32, 45]):02d}"


def generate_database(ontology: Ontology, seed: int, size: int = 60) -> Database:
    """Deterministic synthetic database with ``size`` entities total."""
    if size < 1:
        raise ValueError("size must be >= 1")
    rng = random.Random(seed)
    db = Database(ontology)
    domains = ontology.task_domains
    pools = {"restaurant": list(_RESTAURANT_NAMES), "hotel": list(_HOTEL_NAMES)}
    for pool in pools.values():
        rng.shuffle(pool)
    used: dict[str, int] = {d: 0 for d in pools}
    for i in range(size):
        domain = domains[i % len(domains)]
        spec = ontology.domain(domain)
        attrs: dict[str, str] = {}
        for a in spec.attributes:
            if a.kind == CATEGORICAL:
                attrs[a.name] = rng.choice(a.values)
        if domain == "train":
            leave = rng.randint(5, 21)
            attrs["trainid"] = f"tr{rng.randint(0, 9999):04d}"
            attrs["leaveat"] = f"{leave:02d}:{rng.choice([0, 15, 32, 45]):02d}"
            attrs["arriveby"] = f"{min(leave + 1, 23):02d}:{rng.choice([0, 15, 32, 45]):02d}"
            attrs["price"] = f"{rng.randint(5, 40)} pounds"
            attrs["duration"] = f"{rng.randint(30, 110)} minutes"
        else:
            pool = pools[domain]
            idx = used[domain]
            used[domain] += 1
            # names are unique within one database; numbered past the pool
            name = pool[idx] if idx < len(pool) else f"{pool[idx % len(pool)]} {idx}"
            attrs["name"] = name
            attrs["postcode"] = _postcode(rng)
            attrs["phone"] = _phone(rng)
            if "address" in spec.attribute_names:
                attrs["address"] = f"{rng.randint(1, 99)} {rng.choice(_STREETS)}"
        db.add(Entity(domain, attrs))
    return db


@dataclass
class GoalConfig:
    n_domains: int = 1
    n_constraints: int = 2
    n_requestables: int = 1


def generate_goal(
    ontology: Ontology,
    db: Database,
    seed: int | random.Random,
    config: GoalConfig | None = None,
) -> UserGoal:
    """Draw a satisfiable goal by projecting constraints from a real entity."""
    config = config or GoalConfig()
    rng = seed if isinstance(seed, random.Random) else random.Random(seed)
    candidates = [d for d in ontology.task_domains if db.entities(d)]
    if config.n_domains > len(candidates):
        raise GoalGenerationError(
            f"requested {config.n_domains} domains, only {len(candidates)} populated"
        )
    for _ in range(50):
        domains = rng.sample(candidates, config.n_domains)
        goal_domains: dict[str, DomainGoal] = {}
        ok = True
        for d in domains:
            spec = ontology.domain(d)
            entity = rng.choice(db.entities(d))
            slot_names = list(spec.slot_names)
            n_con = min(config.n_constraints, len(slot_names))
            n_req = min(config.n_requestables, len(spec.requestables))
            if n_con < 1 or n_req < 1:
                ok = False
                break
            chosen = rng.sample(slot_names, n_con)
            informable = {s: entity.attributes[s] for s in sorted(
                chosen, key=slot_names.index)}
            requestable = sorted(
                rng.sample(list(spec.requestables), n_req),
                key=list(spec.requestables).index,
            )
            goal_domains[d] = DomainGoal(informable, requestable)
        if not ok:
            continue
        goal = UserGoal(goal_domains)
        goal.validate(ontology)
        return goal
    raise GoalGenerationError("no satisfiable goal within retry budget")
