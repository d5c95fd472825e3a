"""File formats: topology, inventory, footprint, plan, experiment config,
summary, manifest, and binary checkpoints.

Everything textual is flat key=value under [sections] or whitespace rows;
no nesting, no includes. Every emitted file carries a schema tag and the
readers reject unknown versions.
"""

from __future__ import annotations

import configparser
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import modelcore
from .clusterform import GAParams, ModelFootprint, SessionPlan
from .errors import ConfigError, SchemaError
from .modelcore import ModelSpec, SubmodelSpec
from .multiring import Ring, RingSchedule, validate_schedule
from .orchestrator import TrainConfig
from .simnet import LinkSpec, NodeSpec

PLAN_SCHEMA = "ravnest-plan-v1"
SUMMARY_SCHEMA = "ravnest-summary-v1"
MANIFEST_SCHEMA = "ravnest-manifest-v1"
CHECKPOINT_MAGIC = b"RAVNCKPT"
CHECKPOINT_VERSION = 1


def _clean_lines(text: str):
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            yield line


def _sections(text: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    current = None
    for line in _clean_lines(text):
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            out.setdefault(current, [])
        else:
            if current is None:
                raise SchemaError(f"content before any section header: {line!r}")
            out[current].append(line)
    return out


# ---------------------------------------------------------------------------
# topology and inventory


def parse_inventory(text: str) -> list[NodeSpec]:
    """Rows: node_id ram_bytes bandwidth_Bps [speed_factor]."""
    nodes = []
    for line in _clean_lines(text):
        if line.startswith("["):
            continue  # tolerate a [nodes] header
        parts = line.split()
        if len(parts) not in (3, 4):
            raise SchemaError(f"inventory row needs 3 or 4 fields: {line!r}")
        speed = float(parts[3]) if len(parts) == 4 else 1.0
        nodes.append(NodeSpec(parts[0], float(parts[1]), float(parts[2]), speed))
    if not nodes:
        raise SchemaError("inventory holds no nodes")
    return nodes


def serialize_inventory(nodes: list[NodeSpec]) -> str:
    lines = ["# node_id ram_bytes bandwidth_Bps speed_factor", "[nodes]"]
    for n in nodes:
        lines.append(f"{n.node_id} {n.ram_bytes!r} {n.bandwidth_Bps!r} {n.speed_factor!r}")
    return "\n".join(lines) + "\n"


def parse_topology(text: str):
    """Returns (nodes, link overrides, default latency)."""
    secs = _sections(text)
    unknown = set(secs) - {"defaults", "nodes", "links"}
    if unknown:
        raise SchemaError(f"unknown topology sections: {sorted(unknown)}")
    latency = 0.0
    for line in secs.get("defaults", []):
        key, _, val = line.partition("=")
        key = key.strip()
        if key != "latency":
            raise SchemaError(f"unknown topology default {key!r}")
        latency = float(val.strip())
    nodes: dict[str, NodeSpec] = {}
    for line in secs.get("nodes", []):
        parts = line.split()
        if len(parts) not in (3, 4):
            raise SchemaError(f"node row needs 3 or 4 fields: {line!r}")
        speed = float(parts[3]) if len(parts) == 4 else 1.0
        nodes[parts[0]] = NodeSpec(parts[0], float(parts[1]), float(parts[2]), speed)
    links: dict[tuple[str, str], LinkSpec] = {}
    for line in secs.get("links", []):
        parts = line.split()
        if len(parts) != 4:
            raise SchemaError(f"link row needs 4 fields (src dst latency bw): {line!r}")
        src, dst = parts[0], parts[1]
        for end in (src, dst):
            if end not in nodes:
                raise SchemaError(f"link references unknown node {end!r}")
        links[(src, dst)] = LinkSpec(src, dst, float(parts[2]), float(parts[3]))
    if not nodes:
        raise SchemaError("topology holds no nodes")
    return nodes, links, latency


# ---------------------------------------------------------------------------
# model footprint file


def parse_footprint(text: str) -> tuple[ModelSpec, int]:
    """[model] arch/activation/loss/batch_size -> (ModelSpec, batch_size)."""
    secs = _sections(text)
    if set(secs) != {"model"}:
        raise SchemaError(f"footprint file needs exactly a [model] section, got {sorted(secs)}")
    kv = {}
    for line in secs["model"]:
        key, sep, val = line.partition("=")
        if not sep:
            raise SchemaError(f"expected key = value, got {line!r}")
        kv[key.strip()] = val.strip()
    unknown = set(kv) - {"arch", "activation", "loss", "batch_size"}
    if unknown:
        raise SchemaError(f"unknown footprint keys: {sorted(unknown)}")
    for required in ("arch", "batch_size"):
        if required not in kv:
            raise SchemaError(f"footprint file missing {required!r}")
    arch = [int(a) for a in kv["arch"].split(",")]
    model = modelcore.model_spec(arch, kv.get("activation", "tanh"), kv.get("loss", "mse"))
    return model, int(kv["batch_size"])


# ---------------------------------------------------------------------------
# session plan


def serialize_plan(plan: SessionPlan) -> str:
    lines = [f"# schema: {PLAN_SCHEMA}", "[meta]"]
    lines.append(f"q = {plan.q}")
    lines.append(f"arch = {','.join(str(a) for a in plan.model.arch)}")
    hidden = plan.model.layers[0].activation if len(plan.model.layers) > 1 else "identity"
    lines.append(f"activation = {hidden}")
    lines.append(f"loss = {plan.model.loss}")
    lines.append(f"batch_size = {plan.footprint.batch_size}")
    lines.append("[nodes]")
    for n in plan.nodes.values():  # pool order; assignment rows align with it
        lines.append(f"{n.node_id} {n.ram_bytes!r} {n.bandwidth_Bps!r} {n.speed_factor!r}")
    lines.append("[assignment]")
    for node_id, cid in zip(plan.nodes, plan.assignment):
        lines.append(f"{node_id} {cid}")
    lines.append("[pipelines]")
    for cid in plan.cluster_ids:
        lines.append(f"{cid} " + " ".join(plan.pipelines[cid]))
    lines.append("[layouts]")
    for cid in plan.cluster_ids:
        for peer, sub in enumerate(plan.layouts[cid]):
            lines.append(
                f"{cid} {peer} {sub.layer_lo} {sub.layer_hi} {sub.param_start} {sub.param_len}"
            )
    lines.append("[rings]")
    for ring in plan.ring_schedule.rings:
        members = ",".join(f"{c}:{p}" for c, p in ring.members)
        lines.append(f"{ring.ring_id} {ring.start} {ring.length} {members}")
    return "\n".join(lines) + "\n"


def _submodel_from_range(model: ModelSpec, lo: int, hi: int, param_start: int) -> SubmodelSpec:
    layers = model.layers[lo:hi]
    plen = sum(l.param_count for l in layers)
    return SubmodelSpec(
        layer_lo=lo,
        layer_hi=hi,
        layers=layers,
        block_ids=tuple(l.index for l in layers),
        param_start=param_start,
        param_len=plen,
        activation_bytes_per_sample=layers[-1].activation_bytes_per_sample,
    )


def parse_plan(text: str) -> SessionPlan:
    first = text.splitlines()[0].strip() if text.splitlines() else ""
    if first != f"# schema: {PLAN_SCHEMA}":
        raise SchemaError(f"not a {PLAN_SCHEMA} file (got {first!r})")
    secs = _sections(text)
    needed = {"meta", "nodes", "assignment", "pipelines", "layouts", "rings"}
    if set(secs) != needed:
        raise SchemaError(f"plan needs sections {sorted(needed)}, got {sorted(secs)}")
    meta = {}
    for line in secs["meta"]:
        key, _, val = line.partition("=")
        meta[key.strip()] = val.strip()
    arch = [int(a) for a in meta["arch"].split(",")]
    model = modelcore.model_spec(arch, meta["activation"], meta["loss"])
    batch_size = int(meta["batch_size"])
    footprint = ModelFootprint.from_model(model, batch_size)

    nodes: dict[str, NodeSpec] = {}
    for line in secs["nodes"]:
        parts = line.split()
        nodes[parts[0]] = NodeSpec(parts[0], float(parts[1]), float(parts[2]), float(parts[3]))
    assignment = []
    if len(secs["assignment"]) != len(nodes):
        raise SchemaError("assignment rows do not match the node list")
    for line, expected in zip(secs["assignment"], nodes):
        node_id, cid = line.split()
        if node_id != expected:
            raise SchemaError(
                f"assignment rows out of order: {node_id!r} where {expected!r} expected"
            )
        assignment.append(int(cid))
    pipelines: dict[int, list[str]] = {}
    for line in secs["pipelines"]:
        parts = line.split()
        pipelines[int(parts[0])] = parts[1:]
    layouts: dict[int, list[SubmodelSpec]] = {cid: [] for cid in pipelines}
    for line in secs["layouts"]:
        cid, peer, lo, hi, pstart, plen = (int(v) for v in line.split())
        sub = _submodel_from_range(model, lo, hi, pstart)
        if sub.param_len != plen:
            raise SchemaError(
                f"layout row for cluster {cid} peer {peer}: param_len {plen} "
                f"does not match the architecture ({sub.param_len})"
            )
        if len(layouts[cid]) != peer:
            raise SchemaError(f"layout rows for cluster {cid} out of order")
        layouts[cid].append(sub)
    rings = []
    for line in secs["rings"]:
        rid, start, length, members = line.split()
        pairs = tuple(
            (int(c), int(p)) for c, p in (m.split(":") for m in members.split(","))
        )
        rings.append(Ring(int(rid), int(start), int(length), pairs))
    schedule = RingSchedule(tuple(rings), model.param_count)
    validate_schedule(schedule, layouts)
    plan = SessionPlan(
        q=int(meta["q"]),
        assignment=tuple(assignment),
        nodes=nodes,
        pipelines=pipelines,
        layouts=layouts,
        ring_schedule=schedule,
        model=model,
        footprint=footprint,
    )
    return plan


# ---------------------------------------------------------------------------
# experiment config


@dataclass
class ExperimentConfig:
    name: str
    seed: int
    out_dir: str
    arch: list[int]
    activation: str
    loss: str
    generator: str
    n_samples: int
    noise: float
    inventory_path: Path
    topology_path: Path | None
    q: int
    train: TrainConfig
    ga: GAParams = field(default_factory=GAParams)
    link_overrides: dict = field(default_factory=dict)

    def model(self) -> ModelSpec:
        return modelcore.model_spec(self.arch, self.activation, self.loss)


_CONFIG_KEYS = {
    "experiment": {"name", "seed", "out_dir"},
    "model": {"arch", "activation", "loss"},
    "data": {"generator", "n_samples", "noise"},
    "cluster": {"inventory", "q"},
    "topology": {"file", "default_latency"},
    "train": {
        "eta", "kappa", "k_target", "batch_size", "n_accum", "max_inflight",
        "enforce_t", "t_bound", "barrier_mode", "fwd_cost_coeff", "bwd_cost_ratio",
        "max_events", "trace_enabled",
    },
    "ga": {"pop_size", "generations", "crossover_rate", "mutation_rate", "elitism_k",
           "tournament_k"},
}


def parse_experiment_config(path: str | Path) -> ExperimentConfig:
    """Strict INI parse: unknown sections or keys are rejected, referenced
    files must exist, numeric ranges are validated downstream."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    cp.read(path)
    for section in cp.sections():
        if section not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(cp[section]) - _CONFIG_KEYS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    for required in ("experiment", "model", "data", "cluster", "train"):
        if required not in cp:
            raise ConfigError(f"config missing section [{required}]")

    exp = cp["experiment"]

    inventory_path = (path.parent / cp["cluster"]["inventory"]).resolve()
    if not inventory_path.exists():
        raise ConfigError(f"inventory file not found: {inventory_path}")
    topology_path = None
    link_overrides: dict = {}
    topo_latency = 0.0
    if "topology" in cp and cp["topology"].get("file"):
        topology_path = (path.parent / cp["topology"]["file"]).resolve()
        if not topology_path.exists():
            raise ConfigError(f"topology file not found: {topology_path}")
        _, link_overrides, topo_latency = parse_topology(topology_path.read_text())
    latency_override = cp.getfloat("topology", "default_latency", fallback=None)

    train_sec = cp["train"]
    eta_raw = train_sec.get("eta", "auto").strip()
    eta: float | str = "auto" if eta_raw == "auto" else float(eta_raw)
    max_inflight = train_sec.getint("max_inflight", 0)
    max_events = train_sec.getint("max_events", 0)
    train = TrainConfig(
        eta=eta,
        kappa=train_sec.getint("kappa"),
        k_target=train_sec.getint("k_target"),
        batch_size=train_sec.getint("batch_size"),
        n_accum=train_sec.getint("n_accum", 1),
        max_inflight=max_inflight if max_inflight > 0 else None,
        enforce_T=train_sec.getboolean("enforce_t", False),
        T_bound=train_sec.getint("t_bound", 0),
        barrier_mode=train_sec.get("barrier_mode", "drain"),
        seed=exp.getint("seed", 0),
        fwd_cost_coeff=train_sec.getfloat("fwd_cost_coeff", 1e-9),
        bwd_cost_ratio=train_sec.getfloat("bwd_cost_ratio", 2.0),
        default_latency=latency_override if latency_override is not None else topo_latency,
        max_events=max_events if max_events > 0 else None,
        trace_enabled=train_sec.getboolean("trace_enabled", False),
    )
    ga = GAParams(seed=train.seed)
    if "ga" in cp:
        g = cp["ga"]
        ga = GAParams(
            pop_size=g.getint("pop_size", ga.pop_size),
            generations=g.getint("generations", ga.generations),
            crossover_rate=g.getfloat("crossover_rate", ga.crossover_rate),
            mutation_rate=g.getfloat("mutation_rate", ga.mutation_rate),
            elitism_k=g.getint("elitism_k", ga.elitism_k),
            tournament_k=g.getint("tournament_k", ga.tournament_k),
            seed=train.seed,
        )

    return ExperimentConfig(
        name=exp.get("name", path.stem),
        seed=train.seed,
        out_dir=exp.get("out_dir", "runs"),
        arch=[int(a) for a in cp["model"]["arch"].split(",")],
        activation=cp["model"].get("activation", "tanh"),
        loss=cp["model"].get("loss", "mse"),
        generator=cp["data"]["generator"],
        n_samples=cp["data"].getint("n_samples"),
        noise=cp["data"].getfloat("noise", 0.0),
        inventory_path=inventory_path,
        topology_path=topology_path,
        q=cp["cluster"].getint("q"),
        train=train,
        ga=ga,
        link_overrides=link_overrides,
    )


def resolved_config_text(cfg: ExperimentConfig) -> str:
    """Canonical key=value dump of the fully resolved configuration."""
    t = cfg.train
    lines = [
        "# schema: ravnest-config-resolved-v1",
        "[experiment]",
        f"name = {cfg.name}",
        f"seed = {cfg.seed}",
        f"out_dir = {cfg.out_dir}",
        "[model]",
        f"arch = {','.join(str(a) for a in cfg.arch)}",
        f"activation = {cfg.activation}",
        f"loss = {cfg.loss}",
        "[data]",
        f"generator = {cfg.generator}",
        f"n_samples = {cfg.n_samples}",
        f"noise = {cfg.noise!r}",
        "[cluster]",
        f"inventory = {cfg.inventory_path}",
        f"q = {cfg.q}",
        "[topology]",
        f"file = {cfg.topology_path if cfg.topology_path else ''}",
        f"default_latency = {t.default_latency!r}",
        "[train]",
        f"eta = {t.eta!r}",
        f"kappa = {t.kappa}",
        f"k_target = {t.k_target}",
        f"batch_size = {t.batch_size}",
        f"n_accum = {t.n_accum}",
        f"max_inflight = {t.max_inflight if t.max_inflight else 0}",
        f"enforce_t = {str(t.enforce_T).lower()}",
        f"t_bound = {t.T_bound}",
        f"barrier_mode = {t.barrier_mode}",
        f"fwd_cost_coeff = {t.fwd_cost_coeff!r}",
        f"bwd_cost_ratio = {t.bwd_cost_ratio!r}",
        "[ga]",
        f"pop_size = {cfg.ga.pop_size}",
        f"generations = {cfg.ga.generations}",
        f"crossover_rate = {cfg.ga.crossover_rate!r}",
        f"mutation_rate = {cfg.ga.mutation_rate!r}",
        f"elitism_k = {cfg.ga.elitism_k}",
        f"tournament_k = {cfg.ga.tournament_k}",
    ]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# metrics / summary / manifest / checkpoints


def read_metrics_csv(text: str) -> list[dict]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# schema: "):
        raise SchemaError("metrics csv missing its schema line")
    schema = lines[0][len("# schema: "):]
    if schema != "ravnest-metrics-v1":
        raise SchemaError(f"unknown metrics schema {schema!r}")
    header = lines[1].split(",")
    rows = []
    for line in lines[2:]:
        if not line:
            continue
        vals = line.split(",")
        row = {}
        for key, val in zip(header, vals):
            row[key] = None if val == "" else float(val)
        rows.append(row)
    return rows


def write_summary(summary: dict) -> str:
    lines = [f"# schema: {SUMMARY_SCHEMA}"]
    for key in sorted(summary):
        val = summary[key]
        lines.append(f"{key} = {'' if val is None else repr(val) if isinstance(val, float) else val}")
    return "\n".join(lines) + "\n"


def parse_summary(text: str) -> dict:
    lines = text.splitlines()
    if not lines or lines[0] != f"# schema: {SUMMARY_SCHEMA}":
        raise SchemaError("not a ravnest summary file")
    out = {}
    for line in lines[1:]:
        if not line.strip():
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def write_manifest(entries: dict) -> str:
    lines = [f"# schema: {MANIFEST_SCHEMA}"]
    for key in sorted(entries):
        lines.append(f"{key} = {entries[key]}")
    return "\n".join(lines) + "\n"


def write_checkpoint(path: str | Path, values: np.ndarray) -> None:
    """magic | u32 version | u64 count | count x little-endian fp64."""
    arr = np.ascontiguousarray(values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, arr.size))
        fh.write(arr.tobytes())


def read_checkpoint(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise SchemaError(f"{path}: not a ravnest checkpoint")
    version, count = struct.unpack_from("<IQ", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise SchemaError(f"{path}: unsupported checkpoint version {version}")
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=8 + 12)
    return values.astype(np.float64)
