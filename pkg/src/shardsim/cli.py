"""Experiment harness: configuration, runs, verification, sweeps.

Configuration comes from an optional YAML file plus command-line overrides;
every run is fully determined by (config, seed), and metric streams are
byte-identical across reruns.  Metrics are line-delimited JSON records in
elements / bytes / simulated time units.
"""
from __future__ import annotations

import dataclasses
import itertools
import json
import os
import sys
from dataclasses import dataclass
from fractions import Fraction
from typing import Any

import click
import yaml

from .collectives import build_plan
from .engine import (
    ACCUM_NO_COMM,
    ACCUM_OFF,
    ACCUM_WITH_COMM,
    EngineConfig,
    PrecisionPolicy,
    Session,
    local_train,
    max_param_delta,
)
from .flatparam import build_unit_layouts, dump_plan_lines, peak_param_memory
from .memsim import CostModel, SimulatedOOM, retry_experiment
from .numerics import ModelSpec, NumericsError

SCHEMA_VERSION = 1
SEED_ENV_VAR = "SHARDSIM_SEED"

EXIT_CONFIG = 2
EXIT_OOM = 3
EXIT_VERIFY_FAIL = 1


class ConfigError(Exception):
    def __init__(self, fld: str, message: str):
        super().__init__(f"invalid config field '{fld}': {message}")
        self.field = fld


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class RunConfig:
    world_size: int = 2
    sharding_factor: int = 2
    host_size: int | None = None
    strategy: str | None = None       # full | hybrid | replicate (derived)
    raf: str = "RAF"
    backward_prefetch: bool = True
    forward_prefetch: bool = False
    rate_limit: int | None = 2
    precision: str = "uniform"        # uniform | mixed
    reduce_in_low: bool = True
    accumulation: str = ACCUM_OFF
    accumulation_steps: int = 1
    keep_outermost_unsharded: bool = True
    init_path: str = "deferred"
    dims: tuple[int, ...] = (4, 8, 8, 2)
    unit_sizes: tuple[int, ...] | None = None
    activation: str = "relu"
    init_style: str = "dyadic"
    bias: bool = True
    optimizer: str = "sgd"
    lr: float | None = None
    loss_reduction: str = "mean"
    use_scaler: bool = False
    seed: int | None = None
    steps: int = 3
    batch: int = 8
    regime: str = "integer"
    capacity_bytes: int | None = None
    alpha: float = 1.0
    beta: float = 1e-3
    gamma: float = 1e-3
    delta: float = 1e-6
    threaded: bool = False

    def resolved_seed(self) -> int:
        if self.seed is not None:
            return self.seed
        env = os.environ.get(SEED_ENV_VAR)
        if env is not None:
            try:
                return int(env)
            except ValueError as exc:
                raise ConfigError(
                    "seed", f"{SEED_ENV_VAR}={env!r} is not an integer"
                ) from exc
        return 0

    def validate(self, schedule: bool = True) -> None:
        """Check field consistency; `schedule=False` skips the training-
        schedule fields (steps/batch) for commands that never train."""
        w, f = self.world_size, self.sharding_factor
        if w < 1:
            raise ConfigError("world_size", f"must be >= 1, got {w}")
        if f < 1 or w % f != 0:
            raise ConfigError(
                "sharding_factor", f"must divide world_size {w}, got {f}")
        g = self.host_size if self.host_size is not None else w
        if g < 1 or w % g != 0:
            raise ConfigError(
                "host_size", f"must divide world_size {w}, got {g}")
        derived = "replicate" if f == 1 else ("full" if f == w else "hybrid")
        if self.strategy is not None and self.strategy != derived:
            raise ConfigError(
                "strategy",
                f"'{self.strategy}' inconsistent with sharding_factor {f} at "
                f"world_size {w} (implies '{derived}': full means F=W, "
                f"replicate means F=1)")
        if self.raf not in ("RAF", "NRAF"):
            raise ConfigError("raf", f"must be RAF or NRAF, got {self.raf!r}")
        if self.precision not in ("uniform", "mixed"):
            raise ConfigError(
                "precision", f"must be uniform or mixed, got {self.precision!r}")
        if self.accumulation not in (ACCUM_OFF, ACCUM_WITH_COMM,
                                     ACCUM_NO_COMM):
            raise ConfigError(
                "accumulation",
                f"must be off, with_comm or no_comm, got {self.accumulation!r}")
        if self.accumulation != ACCUM_OFF and self.accumulation_steps < 2:
            raise ConfigError(
                "accumulation_steps",
                f"accumulation '{self.accumulation}' needs >= 2 micro-batches, "
                f"got {self.accumulation_steps}")
        if self.accumulation == ACCUM_OFF and self.accumulation_steps != 1:
            raise ConfigError(
                "accumulation_steps", "must be 1 when accumulation is off")
        if self.rate_limit is not None and self.rate_limit < 1:
            raise ConfigError(
                "rate_limit", f"must be >= 1 or none, got {self.rate_limit}")
        if self.init_path not in ("deferred", "device", "streamed"):
            raise ConfigError(
                "init_path",
                f"must be deferred, device or streamed, got {self.init_path!r}")
        if len(self.dims) < 2:
            raise ConfigError("dims", f"need at least 2 sizes, got {self.dims}")
        if any(d < 1 for d in self.dims):
            raise ConfigError("dims", f"sizes must be positive: {self.dims}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(
                "optimizer", f"must be sgd or adam, got {self.optimizer!r}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ConfigError(
                "loss_reduction",
                f"must be mean or sum, got {self.loss_reduction!r}")
        if self.regime not in ("integer", "uniform"):
            raise ConfigError(
                "regime", f"must be integer or uniform, got {self.regime!r}")
        if schedule:
            if self.steps < 1:
                raise ConfigError("steps", f"must be >= 1, got {self.steps}")
            if self.batch < 1 or self.batch % w != 0:
                raise ConfigError(
                    "batch", f"must be positive and divisible by world_size "
                             f"{w}, got {self.batch}")
        if self.capacity_bytes is not None and self.capacity_bytes < 1:
            raise ConfigError(
                "capacity_bytes", f"must be positive, got {self.capacity_bytes}")
        try:
            ModelSpec(dims=tuple(self.dims), activation=self.activation,
                      unit_sizes=self.unit_sizes, init=self.init_style,
                      bias=self.bias).units
        except NumericsError as exc:
            raise ConfigError("unit_sizes", str(exc)) from exc

    def model_spec(self) -> ModelSpec:
        return ModelSpec(dims=tuple(self.dims), activation=self.activation,
                         unit_sizes=self.unit_sizes, init=self.init_style,
                         bias=self.bias)

    def engine_config(self) -> EngineConfig:
        plan = build_plan(self.world_size, self.sharding_factor,
                          host_size=self.host_size)
        return EngineConfig(
            plan=plan,
            reshard_after_forward=self.raf,
            backward_prefetch=self.backward_prefetch,
            forward_prefetch=self.forward_prefetch,
            rate_limit=self.rate_limit,
            precision=PrecisionPolicy(mixed=self.precision == "mixed",
                                      reduce_in_low=self.reduce_in_low),
            accumulation=self.accumulation,
            accumulation_steps=self.accumulation_steps,
            keep_outermost_unsharded=self.keep_outermost_unsharded,
            loss_reduction=self.loss_reduction,
            optimizer=self.optimizer,
            lr=self.lr,
            use_scaler=self.use_scaler,
            init_path=self.init_path,
            capacity_bytes=self.capacity_bytes,
            cost=CostModel(alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                           delta=self.delta),
        )

    def session(self) -> Session:
        return Session(self.model_spec(), self.engine_config(),
                       seed=self.resolved_seed())


_CONFIG_KEYS = {f.name for f in dataclasses.fields(RunConfig)}
_TUPLE_KEYS = {"dims", "unit_sizes"}


def load_config(path: str | None, overrides: dict[str, Any],
                schedule: bool = True) -> RunConfig:
    """Merge YAML file values (flat or one-level nested) with CLI overrides."""
    raw: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            try:
                loaded = yaml.safe_load(fh) or {}
            except yaml.YAMLError as exc:
                raise ConfigError("config", f"{path} is not valid YAML: {exc}")
        if not isinstance(loaded, dict):
            raise ConfigError("config", f"{path} must hold a mapping")
        for key, value in loaded.items():
            if isinstance(value, dict):  # nesting groups, e.g. model:, cost:
                raw.update(value)
            else:
                raw[key] = value
    raw.update({k: v for k, v in overrides.items() if v is not None})
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    for key in _TUPLE_KEYS & set(raw):
        if raw[key] is not None:
            raw[key] = tuple(int(v) for v in raw[key])
    cfg = RunConfig(**raw)
    cfg.validate(schedule=schedule)
    return cfg


def _parse_rate_limit(value: str | None) -> int | None | str:
    if value is None:
        return None  # not overridden
    if value.lower() in ("none", "inf", "unlimited"):
        return "none"
    try:
        return int(value)
    except ValueError as exc:
        raise ConfigError(
            "rate_limit", f"expected an integer or 'none', got {value!r}"
        ) from exc


# ---------------------------------------------------------------------------
# metric emission
# ---------------------------------------------------------------------------

def _frac(x: Fraction) -> str:
    return str(x)


def step_record(cfg: RunConfig, sess: Session, result,
                traffic_before: list[tuple[Fraction, Fraction]],
                retries_before: int) -> dict:
    w = cfg.world_size
    traffic = []
    for r in range(w):
        intra = sess.fabric.traffic[r].total("intra") - traffic_before[r][0]
        cross = sess.fabric.traffic[r].total("cross") - traffic_before[r][1]
        traffic.append({"rank": r, "intra_elements": _frac(intra),
                        "cross_elements": _frac(cross)})
    peak_bytes = {
        cat: max(dev.ledger.peak_bytes[cat] for dev in sess.devices)
        for cat in sess.devices[0].ledger.peak_bytes
    }
    retries = sum(dev.allocator.num_alloc_retries for dev in sess.devices)
    events = result.event_counts
    return {
        "schema": SCHEMA_VERSION,
        "step": result.step,
        "loss": result.loss,
        "stepped": result.stepped,
        "found_inf": result.found_inf,
        "scale": result.scale,
        "sim_step_time": result.sim_time,
        "sim_makespan": result.makespan,
        "events": {"AG": events.get("AG", 0), "RS": events.get("RS", 0),
                   "AR": events.get("AR", 0)},
        "retries": retries - retries_before,
        "peak_memory_bytes": peak_bytes,
        "peak_param_bytes": max(dev.ledger.peak_param_bytes
                                for dev in sess.devices),
        "traffic": traffic,
    }


def drive(cfg: RunConfig, sess: Session, emit=None) -> list[dict]:
    """Run cfg.steps training steps, emitting one metrics record per step."""
    from .numerics import batch_stream

    k = cfg.accumulation_steps
    stream = batch_stream(sess.seed, cfg.steps * k, cfg.batch,
                          cfg.dims[0], cfg.dims[-1], cfg.regime)
    records = []
    for _ in range(cfg.steps):
        before = [(sess.fabric.traffic[r].total("intra"),
                   sess.fabric.traffic[r].total("cross"))
                  for r in range(cfg.world_size)]
        retries_before = sum(dev.allocator.num_alloc_retries
                             for dev in sess.devices)
        micro = [next(stream) for _ in range(k)]
        result = sess.train_step(micro, threaded=cfg.threaded)
        rec = step_record(cfg, sess, result, before, retries_before)
        records.append(rec)
        if emit is not None:
            emit(json.dumps(rec, sort_keys=True))
    return records


def write_trace(sess: Session, path: str) -> None:
    records = sorted(sess.trace.records, key=lambda r: (r.rank, r.seq))
    with open(path, "w") as fh:
        for r in records:
            fh.write(r.line() + "\n")


# ---------------------------------------------------------------------------
# click plumbing
# ---------------------------------------------------------------------------

def config_options(fn):
    opts = [
        click.option("--config", "config_path", type=click.Path(exists=True),
                     default=None, help="YAML config file."),
        click.option("--world-size", "-W", type=int, default=None),
        click.option("--sharding-factor", "-F", type=int, default=None),
        click.option("--host-size", "-G", type=int, default=None),
        click.option("--strategy",
                     type=click.Choice(["full", "hybrid", "replicate"]),
                     default=None),
        click.option("--raf", type=click.Choice(["RAF", "NRAF"]),
                     default=None),
        click.option("--backward-prefetch/--no-backward-prefetch",
                     default=None),
        click.option("--forward-prefetch/--no-forward-prefetch",
                     default=None),
        click.option("--rate-limit", type=str, default=None,
                     help="Positive integer or 'none'."),
        click.option("--precision",
                     type=click.Choice(["uniform", "mixed"]), default=None),
        click.option("--accumulation",
                     type=click.Choice(["off", "with_comm", "no_comm"]),
                     default=None),
        click.option("--accumulation-steps", type=int, default=None),
        click.option("--keep-outermost/--no-keep-outermost",
                     "keep_outermost_unsharded", default=None),
        click.option("--init-path",
                     type=click.Choice(["deferred", "device", "streamed"]),
                     default=None),
        click.option("--dims", type=str, default=None,
                     help="Comma-separated layer sizes, e.g. 4,8,8,2."),
        click.option("--unit-sizes", type=str, default=None,
                     help="Comma-separated linears per unit."),
        click.option("--activation", type=click.Choice(["relu", "tanh"]),
                     default=None),
        click.option("--init-style", type=str, default=None),
        click.option("--bias/--no-bias", default=None),
        click.option("--optimizer", type=click.Choice(["sgd", "adam"]),
                     default=None),
        click.option("--lr", type=float, default=None),
        click.option("--loss-reduction", type=click.Choice(["mean", "sum"]),
                     default=None),
        click.option("--scaler/--no-scaler", "use_scaler", default=None),
        click.option("--seed", type=int, default=None,
                     help=f"Default: ${SEED_ENV_VAR} or 0."),
        click.option("--steps", type=int, default=None),
        click.option("--batch", type=int, default=None),
        click.option("--regime", type=click.Choice(["integer", "uniform"]),
                     default=None),
        click.option("--capacity-bytes", type=int, default=None),
        click.option("--alpha", type=float, default=None),
        click.option("--beta", type=float, default=None),
        click.option("--gamma", type=float, default=None),
        click.option("--delta", type=float, default=None),
        click.option("--threaded/--round-robin", default=None,
                     help="Worker threads per rank vs deterministic "
                          "cooperative scheduling."),
    ]
    for opt in reversed(opts):
        fn = opt(fn)
    return fn


def _gather_config(kwargs: dict[str, Any],
                   schedule: bool = True) -> RunConfig:
    path = kwargs.pop("config_path", None)
    for key in ("dims", "unit_sizes"):
        if kwargs.get(key) is not None:
            kwargs[key] = tuple(int(v) for v in kwargs[key].split(","))
    rl = _parse_rate_limit(kwargs.get("rate_limit"))
    if rl == "none":
        cfg = load_config(path, {**kwargs, "rate_limit": None},
                          schedule=schedule)
        cfg.rate_limit = None
        cfg.validate(schedule=schedule)
        return cfg
    kwargs["rate_limit"] = rl
    return load_config(path, kwargs, schedule=schedule)


def _fail_config(exc: ConfigError) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(EXIT_CONFIG)


def _fail_oom(exc: SimulatedOOM) -> None:
    click.echo(f"error: simulated out-of-memory: {exc}", err=True)
    click.echo(json.dumps(exc.snapshot, sort_keys=True), err=True)
    sys.exit(EXIT_OOM)


@click.group()
@click.version_option(package_name="shardsim", prog_name="shardsim")
def main() -> None:
    """Deterministic simulation of sharded data-parallel training."""


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

@main.command()
@config_options
@click.option("--out", type=click.Path(), default=None,
              help="Write metrics here instead of stdout.")
@click.option("--trace", "trace_path", type=click.Path(), default=None,
              help="Write the device/collective trace to this file.")
def run(out: str | None, trace_path: str | None, **kwargs) -> None:
    """Train for --steps iterations and emit one metrics line per step."""
    try:
        cfg = _gather_config(kwargs)
    except ConfigError as exc:
        _fail_config(exc)
    try:
        sess = cfg.session()
        sink = open(out, "w") if out else None
        try:
            emit = (lambda line: print(line, file=sink)) if sink else print
            drive(cfg, sess, emit)
        finally:
            if sink:
                sink.close()
        if trace_path:
            write_trace(sess, trace_path)
    except SimulatedOOM as exc:
        _fail_oom(exc)


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------

def _verify_tolerance(cfg: RunConfig) -> float:
    if cfg.precision == "mixed":
        return 1e-3
    return 0.0 if cfg.regime == "integer" and cfg.optimizer == "sgd" else 1e-8


def verify_run(cfg: RunConfig, inject_fault: str | None = None,
               echo=click.echo) -> bool:
    """Sharded-vs-local comparison plus formula checks; True iff PASS."""
    from .numerics import batch_stream

    sess = cfg.session()
    if inject_fault == "misordered-reduction":
        sess.fabric.misorder_reduce_scatter = True
    elif inject_fault == "inf-grad":
        sess.inject_inf = {(0, min(1, cfg.steps - 1))}
    seed = cfg.resolved_seed()
    local = local_train(
        cfg.model_spec(), seed, cfg.steps, cfg.batch, regime=cfg.regime,
        optimizer=cfg.optimizer, lr=cfg.lr,
        accumulation_steps=cfg.accumulation_steps,
        loss_reduction=cfg.loss_reduction, use_scaler=cfg.use_scaler,
        forwards_per_micro=1,
        grad_slices=cfg.world_size, grad_block=cfg.sharding_factor,
        deferred_reduce=cfg.accumulation == ACCUM_NO_COMM)
    tol = _verify_tolerance(cfg)
    ok = True
    k = cfg.accumulation_steps
    stream = batch_stream(seed, cfg.steps * k, cfg.batch, cfg.dims[0],
                          cfg.dims[-1], cfg.regime)
    records = []
    stepped = []
    for step in range(cfg.steps):
        before = [(sess.fabric.traffic[r].total("intra"),
                   sess.fabric.traffic[r].total("cross"))
                  for r in range(cfg.world_size)]
        retries_before = sum(dev.allocator.num_alloc_retries
                             for dev in sess.devices)
        micro = [next(stream) for _ in range(k)]
        result = sess.train_step(micro, threaded=cfg.threaded)
        records.append(step_record(cfg, sess, result, before, retries_before))
        stepped.append(result.stepped)
        delta = max_param_delta(sess.gather_full_params(),
                                local.snapshots[step])
        loss_delta = abs(result.loss - local.losses[step])
        marker = "ok" if delta <= tol else "EXCEEDED"
        echo(f"step {step}: loss sharded={result.loss:.12g} "
             f"local={local.losses[step]:.12g} |Δloss|={loss_delta:.3e} "
             f"max|Δparam|={delta:.3e} {marker}")
        if delta > tol or loss_delta > max(tol, 1e-8):
            ok = False
    if stepped != local.stepped:
        echo(f"step/skip divergence: sharded={stepped} local={local.stepped}")
        ok = False

    # formula checks, where the run's configuration permits them
    plan = sess.plan
    traffic_ok = (cfg.raf == "RAF" and not cfg.keep_outermost_unsharded
                  and cfg.accumulation == ACCUM_OFF and not cfg.use_scaler
                  and cfg.precision == "uniform"
                  and plan.num_hosts >= 2
                  and (plan.strategy != "hybrid"
                       or plan.shard_factor == plan.host_size)
                  and all(lay.padding == 0 for lay in sess.layouts))
    if traffic_ok:
        rep = sess.traffic_report()
        match = (rep["measured_cross_per_gpu"]
                 == rep["predicted_cross_per_gpu"])
        echo(f"traffic: measured cross/GPU {rep['measured_cross_per_gpu']} "
             f"predicted {rep['predicted_cross_per_gpu']} "
             f"{'ok' if match else 'MISMATCH'}")
        if not match:
            ok = False
    else:
        echo("traffic: skipped (requires RAF, no keep-outermost, no "
             "accumulation, no scaler, uniform precision, zero padding, "
             ">= 2 hosts, and for hybrid a shard group per host)")
    serialized = (cfg.rate_limit == 1 and not cfg.backward_prefetch
                  and not cfg.forward_prefetch and cfg.raf == "RAF"
                  and not cfg.keep_outermost_unsharded)
    if serialized and cfg.world_size > 1 and cfg.sharding_factor > 1:
        psis = [lay.psi for lay in sess.layouts]
        pred = peak_param_memory(
            psis, cfg.sharding_factor,
            k_low=4 if cfg.precision == "mixed" else None,
            variant="serialized")
        measured = max(dev.ledger.peak_param_bytes for dev in sess.devices)
        match = measured == pred["bytes"]
        echo(f"memory: peak param bytes measured {measured} "
             f"predicted {pred['bytes']} {'ok' if match else 'MISMATCH'}")
        if not match:
            ok = False
    else:
        echo("memory: peak formula skipped (requires serialized sharded run: "
             "rate_limit=1, no prefetch, RAF, no keep-outermost)")
    echo("PASS" if ok else "FAIL")
    return ok


@main.command()
@config_options
@click.option("--inject-fault",
              type=click.Choice(["misordered-reduction", "inf-grad"]),
              default=None,
              help="Corrupt the sharded run to demonstrate sensitivity.")
def verify(inject_fault: str | None, **kwargs) -> None:
    """Compare sharded training against the local oracle and the formulas."""
    try:
        cfg = _gather_config(kwargs)
    except ConfigError as exc:
        _fail_config(exc)
    try:
        ok = verify_run(cfg, inject_fault)
    except SimulatedOOM as exc:
        _fail_oom(exc)
    sys.exit(0 if ok else EXIT_VERIFY_FAIL)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

_SWEEP_AXES = ("world_size", "sharding_factor", "rate_limit", "raf",
               "prefetch")


def _parse_axis(spec: str) -> tuple[str, list[Any]]:
    if "=" not in spec:
        raise ConfigError("axis", f"expected name=v1,v2,..., got {spec!r}")
    name, _, values = spec.partition("=")
    name = name.strip().replace("-", "_")
    alias = {"W": "world_size", "F": "sharding_factor"}
    name = alias.get(name, name)
    if name not in _SWEEP_AXES:
        raise ConfigError(
            "axis", f"{name!r} not sweepable; choose from {_SWEEP_AXES}")
    parsed: list[Any] = []
    for v in values.split(","):
        v = v.strip()
        if name in ("world_size", "sharding_factor"):
            parsed.append(int(v))
        elif name == "rate_limit":
            parsed.append(None if v.lower() in ("none", "inf") else int(v))
        elif name == "raf":
            if v not in ("RAF", "NRAF"):
                raise ConfigError("axis", f"raf value {v!r}")
            parsed.append(v)
        else:  # prefetch
            if v not in ("on", "off"):
                raise ConfigError("axis", f"prefetch value {v!r} (on/off)")
            parsed.append(v)
    return name, parsed


@main.command()
@config_options
@click.option("--axis", "axes", multiple=True, required=True,
              help="Sweep axis, e.g. --axis sharding_factor=1,2,4 "
                   "--axis raf=RAF,NRAF.  May be repeated.")
@click.option("--scenario", type=click.Choice(["train", "retry"]),
              default="train",
              help="retry = allocator-retry scenario (rate_limit axis only).")
@click.option("--out", type=click.Path(), default=None)
def sweep(axes: tuple[str, ...], scenario: str, out: str | None,
          **kwargs) -> None:
    """Cartesian sweep over config axes; emits a tab-separated table."""
    try:
        base = _gather_config(kwargs)
        parsed = [_parse_axis(a) for a in axes]
    except ConfigError as exc:
        _fail_config(exc)
    names = [n for n, _ in parsed]
    rows: list[list[str]] = []
    if scenario == "retry":
        if names != ["rate_limit"]:
            _fail_config(ConfigError(
                "axis", "the retry scenario sweeps exactly one axis: "
                        "rate_limit"))
        header = ["rate_limit", "retries", "sim_makespan", "max_inflight"]
        for (value,) in itertools.product(*(v for _, v in parsed)):
            res = retry_experiment(rate_limit=value)
            rows.append([str(value), str(res.retries),
                         f"{res.makespan:.6g}", str(res.max_inflight)])
    else:
        header = names + ["final_loss", "AG", "RS", "AR", "retries",
                          "peak_param_bytes", "peak_total_bytes",
                          "sim_makespan", "cross_per_gpu", "intra_per_gpu"]
        for combo in itertools.product(*(v for _, v in parsed)):
            cfg = dataclasses.replace(base)
            for name, value in zip(names, combo):
                if name == "prefetch":
                    cfg.backward_prefetch = value == "on"
                    cfg.forward_prefetch = value == "on"
                else:
                    setattr(cfg, name, value)
            try:
                cfg.validate()
            except ConfigError as exc:
                _fail_config(ConfigError(
                    exc.field, f"at sweep point {dict(zip(names, combo))}: "
                               f"{exc}"))
            try:
                sess = cfg.session()
                records = drive(cfg, sess)
            except SimulatedOOM as exc:
                _fail_oom(exc)
            last = records[-1]
            w = cfg.world_size
            iters = sess.fabric.iterations
            cross = sum((sess.fabric.traffic[r].total("cross")
                         for r in range(w)), Fraction(0)) / (w * iters)
            intra = sum((sess.fabric.traffic[r].total("intra")
                         for r in range(w)), Fraction(0)) / (w * iters)
            ag = sum(r["events"]["AG"] for r in records)
            rs = sum(r["events"]["RS"] for r in records)
            ar = sum(r["events"]["AR"] for r in records)
            row = [("on" if cfg.backward_prefetch else "off")
                   if name == "prefetch" else str(getattr(cfg, name))
                   for name in names]
            row += [f"{last['loss']:.12g}", str(ag), str(rs), str(ar),
                    str(sum(r["retries"] for r in records)),
                    str(last["peak_param_bytes"]),
                    str(max(dev.ledger.peak_total_bytes
                            for dev in sess.devices)),
                    f"{last['sim_makespan']:.6g}",
                    _frac(cross), _frac(intra)]
            rows.append(row)
    table = "\t".join(header) + "\n" + "\n".join("\t".join(r) for r in rows)
    if out:
        with open(out, "w") as fh:
            fh.write(table + "\n")
    else:
        click.echo(table)


# ---------------------------------------------------------------------------
# dump-plan
# ---------------------------------------------------------------------------

@main.command("dump-plan")
@config_options
def dump_plan(**kwargs) -> None:
    """Print the sharding plan's groups and the flat-parameter layout."""
    try:
        cfg = _gather_config(kwargs, schedule=False)
    except ConfigError as exc:
        _fail_config(exc)
    plan = build_plan(cfg.world_size, cfg.sharding_factor,
                      host_size=cfg.host_size)
    spec = cfg.model_spec()
    layouts = build_unit_layouts(spec.param_shapes(), spec.unit_param_names(),
                                 plan.shard_factor)
    click.echo(f"world_size={plan.world_size} "
               f"sharding_factor={plan.shard_factor} "
               f"host_size={plan.host_size} strategy={plan.strategy} "
               f"hosts={plan.num_hosts}")
    click.echo("sharded groups:    "
               + " ".join(str(g) for g in plan.sharded_groups))
    click.echo("replicated groups: "
               + " ".join(str(g) for g in plan.replicated_groups))
    for line in dump_plan_lines(layouts):
        click.echo(line)


if __name__ == "__main__":
    main()
