"""Experiment driver behind the ``actiongrad`` command line.

Commands take a plain JSON-style dictionary (config file merged with CLI
overrides) and write their artifacts under ``out``. Config resolution is
layered: command/env defaults, then the user's top-level keys, then the
user's ``env_overrides[env]`` block.

Result CSVs have a header row, LF line endings and floats printed with 17
significant digits, so identical config and seed give byte-identical files.
Wall-clock costs go to a separate ``timing.csv`` for the same reason.
"""

from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from actiongrad.autodiff.rng import RngStream
from actiongrad.critic import (
    CriticConfig,
    QNet,
    analytic_critic,
    load_critic,
    q_value,
    save_critic,
    train_critic_bellman,
    train_critic_iql,
    train_critic_regression,
)
from actiongrad.data import Dataset, load_dataset, save_dataset
from actiongrad.envs import ENVS, GOAL_REWARD, STATE_NAMES, bandit_reward, generate_dataset
from actiongrad.errors import ConfigurationError
from actiongrad.inference import AGConfig, EvalConfig, EvalResult, evaluate
from actiongrad.policy import DTConfig, load_policy, save_policy, train_policy

CRITIC_KINDS = ("iql", "regression", "bellman", "analytic")
# Ablation labels for the gradient methods: none = plain ascent, then first
# moment, second moment, and both.
ABLATION_METHODS = {"none": "plain", "momentum": "momentum", "rmsprop": "rmsprop", "adam": "adam"}
DEFAULT_COUNTS = {"bandit-v0": 10_000, "stitch-v0": 1000}

METRICS_HEADER = ("experiment", "method", "env", "seed", "episode", "raw_return", "normalized",
                  "eta", "n", "grad_method")
TIMING_HEADER = ("experiment", "method", "env", "seed", "episode", "wall_ms")


# ------------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    env: str = "bandit-v0"
    dataset: str | None = None
    count: int | None = None  # None: the env's default dataset size
    bandit_sides: str = "both"
    critic_kind: str = "iql"
    critic_path: str | None = None
    policy_path: str | None = None
    out: str = "runs"
    seed: int = 0
    experiment: str = "run"
    method: str | None = None  # label for eval rows
    critic: dict = field(default_factory=dict)
    policy: dict = field(default_factory=dict)
    ag: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    # Per-method policy overrides, keyed by method label.
    variants: dict = field(default_factory=dict)
    eta_grid: list = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2])
    n_grid: list = field(default_factory=lambda: [0, 1, 5, 10, 20])
    methods: list = field(default_factory=lambda: list(ABLATION_METHODS))
    envs: list = field(default_factory=lambda: ["stitch-v0", "bandit-v0"])
    env_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.env not in ENVS:
            raise ConfigurationError(f"unknown environment {self.env!r}; known: {sorted(ENVS)}")
        if self.critic_kind not in CRITIC_KINDS:
            raise ConfigurationError(f"critic_kind must be one of {CRITIC_KINDS}")
        if self.bandit_sides not in ("both", "positive"):
            raise ConfigurationError("bandit_sides must be 'both' or 'positive'")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigurationError(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.count is not None and self.count < 0:
            raise ConfigurationError("count must be >= 0")
        unknown = [m for m in self.methods if m not in ABLATION_METHODS]
        if unknown:
            raise ConfigurationError(f"unknown gradient methods {unknown}; known: {list(ABLATION_METHODS)}")

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys {unknown}")
        return cls(**raw)

    @property
    def dataset_size(self) -> int:
        return DEFAULT_COUNTS[self.env] if self.count is None else self.count

    @property
    def out_dir(self) -> Path:
        path = Path(self.out)
        path.mkdir(parents=True, exist_ok=True)
        return path

    # The master seed seeds every training run unless a section sets its own.
    def critic_config(self) -> CriticConfig:
        return _build(CriticConfig, {"seed": self.seed, **self.critic}, "critic")

    def policy_config(self, **overrides) -> DTConfig:
        return _build(DTConfig, {"seed": self.seed, **self.policy, **overrides}, "policy")

    def ag_config(self, **overrides) -> AGConfig:
        return _build(AGConfig, {**self.ag, **overrides}, "ag")

    def eval_config(self, **overrides) -> EvalConfig:
        return _build(EvalConfig, {**self.eval, **overrides}, "eval")

    def variant(self, label: str) -> dict:
        try:
            return dict(self.variants[label])
        except KeyError:
            raise ConfigurationError(f"no policy variant {label!r} configured") from None


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"unknown {section} keys {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigurationError(f"bad {section} config: {exc}") from None


def deep_merge(base: dict, *overs: dict) -> dict:
    out = copy.deepcopy(base)
    for over in overs:
        for key, value in over.items():
            if isinstance(value, dict) and isinstance(out.get(key), dict):
                out[key] = deep_merge(out[key], value)
            else:
                out[key] = copy.deepcopy(value)
    return out


def parse_override(text: str) -> dict:
    """``"policy.lr=0.001"`` -> ``{"policy": {"lr": 0.001}}``; values are JSON, else strings."""
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override {text!r} is not KEY=VALUE")
    try:
        parsed = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    out: dict = {}
    node = out
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = parsed
    return out


def load_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc.msg} (line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return raw


_FAST_CRITIC = {"lr": 1e-3, "steps": 2000}
_AG = {"eta": 0.05, "n": 10}
_RF_VARIANTS = {
    "RF": {"loss_mode": "rf_nll"},
    "RF+PG": {"loss_mode": "rf_pg", "alpha": 0.1},
    "RF+AWAC": {"loss_mode": "rf_awac", "lam": 1.0},
}

# (command, env) -> defaults layered under the user's config.
COMMAND_DEFAULTS: dict[tuple[str, str], dict] = {
    ("toy", "bandit-v0"): {
        "bandit_sides": "positive",
        "critic_kind": "regression",
        "critic": _FAST_CRITIC,
        "policy": {"k": 1, "steps": 600, "lr": 1e-3, "batch": 64, "tau_rtg": 0.999},
        "ag": _AG,
        "variants": {"DT+PG": {"loss_mode": "dt_pg", "alpha": 0.8}},
    },
    ("toy", "stitch-v0"): {
        "policy": {"k": 20, "steps": 300, "lr": 1e-3, "batch": 64, "tau_rtg": 0.9},
        "eval": {"start": "s2"},
        "variants": {"RF": {"loss_mode": "rf_nll"}, "DT": {"loss_mode": "dt_mse"}},
    },
    # Evaluation is raw-policy unless refinement is asked for.
    ("eval", "bandit-v0"): {"ag": {"n": 0}},
    ("eval", "stitch-v0"): {"ag": {"n": 0}},
    ("compare", "bandit-v0"): {
        "bandit_sides": "positive",
        "critic": _FAST_CRITIC,
        "policy": {"k": 1, "steps": 600, "lr": 1e-3, "batch": 64, "tau_rtg": 0.999},
        "ag": _AG,
        "variants": _RF_VARIANTS,
    },
    ("compare", "stitch-v0"): {
        "critic": _FAST_CRITIC,
        "policy": {"k": 20, "steps": 300, "lr": 1e-3, "batch": 64, "tau_rtg": 0.9},
        "eval": {"adaptive_context": True},
        "ag": _AG,
        "variants": _RF_VARIANTS,
    },
}


def resolve(command: str, raw: dict, env: str | None = None) -> ExperimentConfig:
    """Defaults for ``(command, env)`` < user top-level keys < user ``env_overrides[env]``."""
    env = env or raw.get("env", "bandit-v0")
    layered = deep_merge(COMMAND_DEFAULTS.get((command, env), {}), raw,
                         raw.get("env_overrides", {}).get(env, {}), {"env": env})
    return ExperimentConfig.from_dict(layered)


# ---------------------------------------------------------------------- csv


def format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        if not math.isfinite(value):
            raise ConfigurationError(f"refusing to write non-finite value {value}")
        return f"{float(value):.17g}"
    return str(value)


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_cell(v) for v in row])
    return path


def format_delta(score: float, base: float) -> str:
    """Relative change versus a baseline score, e.g. ``+21.2%``.

    Divides by ``|base|`` so an improvement reads positive even when the
    baseline's normalized score is negative.
    """
    if base == 0:
        return "n/a"
    pct = round((score - base) / abs(base) * 100, 1) + 0.0  # + 0.0 turns -0.0 into 0.0
    return f"{pct:+.1f}%"


@dataclass
class CommandResult:
    outputs: dict[str, Path] = field(default_factory=dict)
    summary: list[str] = field(default_factory=list)


class RowSink:
    """Collects per-episode metric and timing rows in evaluation order."""

    def __init__(self, experiment: str):
        self.experiment = experiment
        self.metrics: list[tuple] = []
        self.timing: list[tuple] = []

    def add(self, method: str, result: EvalResult, ag: AGConfig) -> None:
        for e in result.episodes:
            key = (self.experiment, method, result.env, e.seed, e.episode)
            self.metrics.append(key + (e.raw_return, e.normalized, ag.eta, ag.n, ag.method))
            self.timing.append(key + (e.wall_ms,))

    def write(self, out: Path, result: CommandResult) -> None:
        result.outputs["metrics"] = write_csv(out / "metrics.csv", METRICS_HEADER, self.metrics)
        result.outputs["timing"] = write_csv(out / "timing.csv", TIMING_HEADER, self.timing)


def seed_std(result: EvalResult, attr: str = "raw_return") -> float:
    """Standard deviation over seeds of the per-seed mean of ``attr``."""
    per_seed: dict[int, list[float]] = {}
    for e in result.episodes:
        per_seed.setdefault(e.seed, []).append(getattr(e, attr))
    return float(np.std([np.mean(v) for v in per_seed.values()]))


# ------------------------------------------------------------------ helpers


def _require_file(path, what: str) -> Path:
    if path is None:
        raise ConfigurationError(f"no {what} given")
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"{what} not found: {path}")
    return path


def _make_dataset(cfg: ExperimentConfig) -> Dataset:
    kwargs = {"sides": cfg.bandit_sides} if cfg.env == "bandit-v0" else {}
    return generate_dataset(cfg.env, cfg.dataset_size, RngStream(cfg.seed, "dataset"), **kwargs)


def _load_critic(cfg: ExperimentConfig, obs_dim: int, act_dim: int) -> QNet:
    if cfg.critic_kind == "analytic":
        return analytic_critic(obs_dim, act_dim)
    qnet, _, _ = load_critic(_require_file(cfg.critic_path, "critic checkpoint"))
    return qnet


def _train_critic(cfg: ExperimentConfig, ds: Dataset):
    """Returns (qnet, vnet or None, loss columns)."""
    config = cfg.critic_config()
    if cfg.critic_kind == "iql":
        qnet, vnet, tlog = train_critic_iql(ds, config)
        return qnet, vnet, {"q_loss": tlog.q_loss, "v_loss": tlog.v_loss}
    if cfg.critic_kind == "regression":
        qnet, tlog = train_critic_regression(ds, config)
    elif cfg.critic_kind == "bellman":
        qnet, tlog = train_critic_bellman(ds, config)
    else:
        raise ConfigurationError("the analytic critic is fixed and cannot be trained")
    return qnet, None, {"q_loss": tlog.q_loss}


def _loss_csv(path, columns: dict[str, list[float]]) -> Path:
    names = list(columns)
    rows = [(i, *vals) for i, vals in enumerate(zip(*(columns[n] for n in names)))]
    return write_csv(path, ("step", *names), rows)


def _slug(label: str) -> str:
    return label.lower().replace("+", "_")


def _mean_line(label: str, result: EvalResult) -> str:
    return (f"{label} on {result.env}: score {result.mean_score:.2f} +- {result.std_score:.2f}"
            f" (raw return {result.mean_return:.4f}, {len(result.episodes)} episodes)")


# ----------------------------------------------------------------- commands


def cmd_gen_data(raw: dict) -> CommandResult:
    cfg = resolve("gen-data", raw)
    ds = _make_dataset(cfg)
    path = cfg.out_dir / f"{cfg.env}.jsonl"
    save_dataset(path, ds)
    return CommandResult({"dataset": path}, [f"wrote {len(ds)} episodes to {path}"])


def cmd_train_critic(raw: dict) -> CommandResult:
    cfg = resolve("train-critic", raw)
    ds = load_dataset(_require_file(cfg.dataset, "dataset"))
    qnet, vnet, losses = _train_critic(cfg, ds)
    out = cfg.out_dir
    digest = save_critic(out / "critic.ckpt", qnet, vnet, cfg.critic_config())
    res = CommandResult({"critic": out / "critic.ckpt", "loss": _loss_csv(out / "critic_loss.csv", losses)})
    res.summary.append(f"critic ({cfg.critic_kind}) sha256 {digest}")
    return res


def cmd_train_policy(raw: dict) -> CommandResult:
    cfg = resolve("train-policy", raw)
    ds = load_dataset(_require_file(cfg.dataset, "dataset"))
    config = cfg.policy_config()
    qnet = None
    if config.loss_mode in ("dt_pg", "rf_pg", "rf_awac"):
        qnet = _load_critic(cfg, ds.obs_dim, ds.act_dim)
    model, tlog = train_policy(ds, config, qnet)
    out = cfg.out_dir
    digest = save_policy(out / "policy.ckpt", model)
    res = CommandResult({"policy": out / "policy.ckpt",
                         "loss": _loss_csv(out / "policy_loss.csv", {"loss": tlog.loss})})
    res.summary.append(f"policy ({config.loss_mode}) sha256 {digest}")
    return res


def cmd_eval(raw: dict) -> CommandResult:
    cfg = resolve("eval", raw)
    model = load_policy(_require_file(cfg.policy_path, "policy checkpoint"))
    ag = cfg.ag_config()
    qnet = _load_critic(cfg, model.obs_dim, model.act_dim) if ag.n > 0 else None
    result = evaluate(cfg.env, model, qnet, cfg.eval_config(), ag)
    label = cfg.method or ("policy+AG" if ag.n > 0 else "policy")
    sink = RowSink(cfg.experiment)
    sink.add(label, result, ag)
    res = CommandResult()
    res.outputs["summary"] = write_csv(
        cfg.out_dir / "summary.csv",
        ("method", "env", "episodes", "mean_return", "mean_score", "std_score", "eta", "n", "grad_method"),
        [(label, cfg.env, len(result.episodes), result.mean_return, result.mean_score, result.std_score,
          ag.eta, ag.n, ag.method)])
    sink.write(cfg.out_dir, res)
    res.summary.append(_mean_line(label, result))
    return res


def cmd_toy(raw: dict) -> CommandResult:
    cfg = resolve("toy", raw)
    if cfg.env == "bandit-v0":
        return _toy_bandit(cfg)
    return _toy_stitch(cfg)


def _toy_bandit(cfg: ExperimentConfig) -> CommandResult:
    """DT, DT+TP, DT+PG and DT+AG on one bandit dataset, plus the critic's response curve."""
    out = cfg.out_dir
    res = CommandResult()
    ds = _make_dataset(cfg)
    save_dataset(out / "dataset.jsonl", ds)
    qnet, vnet, losses = _train_critic(cfg, ds)
    digest = save_critic(out / "critic.ckpt", qnet, vnet, cfg.critic_config())
    _loss_csv(out / "critic_loss.csv", losses)

    grid = np.linspace(-1.0, 1.0, 201)
    q = q_value(qnet, np.zeros((len(grid), ds.obs_dim)), grid[:, None])
    res.outputs["critic_curve"] = write_csv(
        out / "critic_curve.csv", ("action", "q_value", "reward"),
        [(a, qa, bandit_reward(a)) for a, qa in zip(grid, q)])

    dt_model, _ = train_policy(ds, cfg.policy_config())
    pg_model, _ = train_policy(ds, cfg.policy_config(**cfg.variant("DT+PG")), qnet)
    save_policy(out / "dt.ckpt", dt_model)
    save_policy(out / "dt_pg.ckpt", pg_model)

    # DT conditions on the best return it has seen.
    preset = cfg.eval_config(rtg_mode="preset", rtg_value=float(np.max(ds.returns())))
    predicted = cfg.eval_config(rtg_mode="predicted_per_step")
    off, ag = AGConfig(n=0), cfg.ag_config()
    runs = [
        ("DT", dt_model, preset, off),
        ("DT+TP", dt_model, predicted, off),
        ("DT+PG", pg_model, preset, off),
        ("DT+AG", dt_model, preset, ag),
    ]
    sink, rows = RowSink(cfg.experiment), []
    for label, model, ev, agc in runs:
        result = evaluate(cfg.env, model, qnet if agc.n > 0 else None, ev, agc)
        sink.add(label, result, agc)
        rows.append((label, result.mean_return, seed_std(result), result.mean_score, result.std_score,
                     agc.eta, agc.n, digest))
        res.summary.append(_mean_line(label, result))
    res.outputs["toy"] = write_csv(
        out / "toy.csv",
        ("method", "mean_reward", "std_reward", "mean_score", "std_score", "eta", "n", "critic_hash"), rows)
    sink.write(out, res)
    return res


def _toy_stitch(cfg: ExperimentConfig) -> CommandResult:
    """RF with predicted RTG against DT with a dataset-consistent preset RTG, from a fixed start."""
    out = cfg.out_dir
    res = CommandResult()
    ds = _make_dataset(cfg)
    save_dataset(out / "dataset.jsonl", ds)
    rf_model, _ = train_policy(ds, cfg.policy_config(**cfg.variant("RF")))
    dt_model, _ = train_policy(ds, cfg.policy_config(**cfg.variant("DT")))
    save_policy(out / "rf.ckpt", rf_model)
    save_policy(out / "dt.ckpt", dt_model)

    # Dataset-consistent preset: the best return observed from the same start state.
    start = cfg.eval_config(rtg_mode="predicted_per_step").start
    returns = ds.returns()
    if start is not None:
        idx = STATE_NAMES.index(start) if isinstance(start, str) else int(start)
        returns = [r for t, r in zip(ds, returns) if np.argmax(t.states[0]) == idx]
    preset = float(np.max(returns))

    off = AGConfig(n=0)
    runs = [
        ("RF", rf_model, cfg.eval_config(rtg_mode="predicted_per_step", adaptive_context=True)),
        ("DT", dt_model, cfg.eval_config(rtg_mode="preset", rtg_value=preset)),
    ]
    sink, rows = RowSink(cfg.experiment), []
    for label, model, ev in runs:
        result = evaluate(cfg.env, model, None, ev, off)
        sink.add(label, result, off)
        raw = np.array([e.raw_return for e in result.episodes])
        rows.append((label, ev.rtg_mode, len(raw), float(np.mean(raw == GOAL_REWARD)),
                     float(np.mean(raw == 0.0)), result.mean_return, result.mean_score))
        res.summary.append(_mean_line(label, result))
    res.outputs["stitch"] = write_csv(
        out / "stitch.csv",
        ("method", "rtg_mode", "episodes", "goal_fraction", "zero_fraction", "mean_return", "mean_score"),
        rows)
    sink.write(out, res)
    return res


def cmd_ablate(raw: dict) -> CommandResult:
    """Sweep eta x n x gradient method around one trained policy and critic."""
    cfg = resolve("ablate", raw)
    if not cfg.eta_grid or not cfg.n_grid or not cfg.methods:
        raise ConfigurationError("eta_grid, n_grid and methods must be non-empty")
    model = load_policy(_require_file(cfg.policy_path, "policy checkpoint"))
    qnet = _load_critic(cfg, model.obs_dim, model.act_dim)
    ev = cfg.eval_config()
    sink, rows, res = RowSink(cfg.experiment), [], CommandResult()
    for method in cfg.methods:
        for eta in cfg.eta_grid:
            for n in cfg.n_grid:
                ag = cfg.ag_config(eta=float(eta), n=int(n), method=ABLATION_METHODS[method])
                result = evaluate(cfg.env, model, qnet if ag.n > 0 else None, ev, ag)
                sink.add(method, result, ag)
                rows.append((method, ag.eta, ag.n, result.mean_return, seed_std(result),
                             result.mean_score, result.std_score))
    res.outputs["grid"] = write_csv(
        cfg.out_dir / "grid.csv",
        ("method", "eta", "n", "mean_return", "std_return", "mean_score", "std_score"), rows)
    sink.write(cfg.out_dir, res)
    res.summary.append(f"{len(rows)} cells on {cfg.env}")
    return res


def cmd_compare(raw: dict) -> CommandResult:
    """RF, RF+PG, RF+AWAC and RF+AG sharing one IQL critic per environment."""
    top = resolve("compare", raw)
    if not top.envs:
        raise ConfigurationError("envs must be non-empty")
    out = top.out_dir
    sink, rows, res = RowSink(top.experiment), [], CommandResult()
    for env in top.envs:
        cfg = resolve("compare", raw, env)
        env_dir = out / env
        env_dir.mkdir(exist_ok=True)
        ds = _make_dataset(cfg)
        qnet, vnet, _ = train_critic_iql(ds, cfg.critic_config())
        digest = save_critic(env_dir / "critic.ckpt", qnet, vnet, cfg.critic_config())
        models = {}
        for label in ("RF", "RF+PG", "RF+AWAC"):
            models[label], _ = train_policy(ds, cfg.policy_config(**cfg.variant(label)), qnet)
            save_policy(env_dir / f"{_slug(label)}.ckpt", models[label])
        off, ag = AGConfig(n=0), cfg.ag_config()
        ev = cfg.eval_config()
        runs = [("RF", models["RF"], off), ("RF+PG", models["RF+PG"], off),
                ("RF+AWAC", models["RF+AWAC"], off), ("RF+AG", models["RF"], ag)]
        base = None
        for label, model, agc in runs:
            result = evaluate(env, model, qnet if agc.n > 0 else None, ev, agc)
            sink.add(label, result, agc)
            base = result.mean_score if base is None else base
            rows.append((env, label, digest, result.mean_return, result.mean_score, result.std_score,
                         format_delta(result.mean_score, base)))
            res.summary.append(_mean_line(label, result))
    res.outputs["compare"] = write_csv(
        out / "compare.csv",
        ("env", "method", "critic_hash", "mean_return", "mean_score", "std_score", "delta_vs_rf"), rows)
    sink.write(out, res)
    return res


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-critic": cmd_train_critic,
    "train-policy": cmd_train_policy,
    "eval": cmd_eval,
    "toy": cmd_toy,
    "ablate": cmd_ablate,
    "compare": cmd_compare,
}
