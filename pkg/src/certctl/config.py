"""Run configuration (TOML) and construction of plants, CLF, barriers and rows.

Schema (``schema_version = 1``)::

    schema_version = 1
    seed = 0
    out_dir = "runs/example"

    [plant]                 # id + physical parameters of the nominal model
    id = "pendulum"         # pendulum | double_integrator | planar_cart
    mass = 1.0

    [uncertainty]           # how the true plant differs from the nominal one
    mode = "scale"          # scale | payload | none
    scale = 2.0
    payload = 0.5           # payload mass as a fraction of the nominal mass

    [controller]
    variant = "rl-clf-qp"   # clf-qp | cbf-clf-qp | io-rl-clf-qp | rl-clf-qp | rl-cbf-clf-qp
    relax_penalty = 1000.0

    [clf]
    epsilon = 0.8
    poles = [-1.0, -2.0]
    rate = 2.0              # optional lambda/epsilon; default lambda = 0.5 min eig(Q)/max eig(P)
    q_diag = [1.0, 1.0]     # optional

    [[barriers]]
    type = "wall"           # wall | bound
    index = 0
    side = "upper"
    wall = 1.0
    psi = [0.8, 1.2]        # optional uniform range; makes the wall position a parameter
    poles = [-2.0, -4.0]

    [[constraints]]
    type = "accel_bound"
    index = 0
    bound = 4.0

    [episode]
    horizon = 5.0
    ts = 0.01
    x0_low = [-0.4, 0.0]
    x0_high = [0.4, 0.0]

    [learning]              # see LearningConfig for every key
    [eval]
    episodes = 50
    mode = "scale"          # optional override of the uncertainty mode
    [compare]
    variants = ["clf-qp", "rl-clf-qp"]
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .cbf import BARRIERS
from .controllers import VARIANTS, QpController, acceleration_bound
from .dynamics import PLANTS, DynamicsError, make_plant, uncertain_pair
from .fblin_clf import build_res_clf
from .sim import EpisodeConfig

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class LearningConfig:
    episodes: int = 300
    batch: int = 64
    buffer: int = 100_000
    gamma: float = 0.99
    tau: float = 0.005
    lr_actor: float = 1e-4
    lr_critic: float = 1e-3
    hidden: list = field(default_factory=lambda: [64, 64])
    alpha_max: float = 5.0
    beta_max: float = 20.0
    # exploration: sigma on mu (decayed per episode) and on the unit-scaled actor output
    sigma: float = 0.1
    sigma_decay: float = 0.995
    action_noise: float = 0.1
    action_noise_decay: float = 0.995
    w_v: float = 1.0
    w_b: list = field(default_factory=list)
    w_c: list = field(default_factory=list)
    failure_penalty: float = 100.0
    reward_scale: float = 1.0
    updates_per_step: float = 1.0
    warmup: int = 256
    eval_every: int = 10
    eval_episodes: int = 5
    early_stop_patience: int = 0
    obs_scale: list = field(default_factory=list)
    actor_out_scale: float = 1e-3
    actor_reg: float = 0.0
    # per-row loss cap before weighting (0 = no cap)
    loss_clip: float = 0.0
    loss_power: float = 1.0


@dataclass
class RunConfig:
    plant_id: str
    plant_params: dict
    mode: str = "scale"
    scale: float = 2.0
    payload: float = 0.5
    variant: str = "clf-qp"
    relax_penalty: float = 1e3
    u_max: float | None = None
    epsilon: float = 0.8
    poles: list = field(default_factory=lambda: [-1.0, -2.0])
    rate: float | None = None
    q_diag: list | None = None
    barriers: list = field(default_factory=list)
    constraints: list = field(default_factory=list)
    episode: dict = field(default_factory=dict)
    learning: LearningConfig = field(default_factory=LearningConfig)
    eval: dict = field(default_factory=dict)
    compare: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: str = "runs/out"
    violation_tol: float = 1e-3
    raw: dict = field(default_factory=dict, repr=False)

    # ------------------------------------------------------------ loading
    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"schema_version must be {SCHEMA_VERSION}")
        plant = dict(d.get("plant", {}))
        plant_id = plant.pop("id", None)
        if plant_id not in PLANTS:
            raise ConfigError(f"unknown plant {plant_id!r}")
        unc = d.get("uncertainty", {})
        ctl = d.get("controller", {})
        clf = d.get("clf", {})
        lk = {f.name for f in fields(LearningConfig)}
        learn = d.get("learning", {})
        bad = set(learn) - lk
        if bad:
            raise ConfigError(f"unknown learning keys {sorted(bad)}")
        cfg = cls(
            plant_id=plant_id,
            plant_params=plant,
            mode=unc.get("mode", "scale"),
            scale=float(unc.get("scale", 2.0)),
            payload=float(unc.get("payload", 0.5)),
            variant=ctl.get("variant", "clf-qp"),
            relax_penalty=float(ctl.get("relax_penalty", 1e3)),
            u_max=ctl.get("u_max"),
            epsilon=float(clf.get("epsilon", 0.8)),
            poles=list(clf.get("poles", [-1.0, -2.0])),
            rate=clf.get("rate"),
            q_diag=clf.get("q_diag"),
            barriers=list(d.get("barriers", [])),
            constraints=list(d.get("constraints", [])),
            episode=dict(d.get("episode", {})),
            learning=LearningConfig(**learn),
            eval=dict(d.get("eval", {})),
            compare=dict(d.get("compare", {})),
            seed=int(d.get("seed", 0)),
            out_dir=str(d.get("out_dir", "runs/out")),
            violation_tol=float(d.get("violation_tol", 1e-3)),
            raw=d,
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
        return cls.from_dict(data)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown controller variant {self.variant!r}")
        if self.mode not in ("scale", "payload", "none"):
            raise ConfigError(f"unknown uncertainty mode {self.mode!r}")
        if self.scale <= 0 or self.payload < 0:
            raise ConfigError("scale must be positive and payload non-negative")
        if not 0 < self.epsilon <= 1:
            raise ConfigError("epsilon must lie in (0, 1]")
        if self.relax_penalty <= 0:
            raise ConfigError("relax_penalty must be positive")
        for b in self.barriers:
            if b.get("type") not in BARRIERS:
                raise ConfigError(f"unknown barrier type {b.get('type')!r}")
        for c in self.constraints:
            if c.get("type") != "accel_bound":
                raise ConfigError(f"unknown constraint type {c.get('type')!r}")
        for v in self.compare.get("variants", []):
            if v not in VARIANTS:
                raise ConfigError(f"unknown controller variant {v!r}")
        try:
            self.episode_config()
            self.nominal_plant()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def config_hash(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    # ------------------------------------------------------------ building
    def nominal_plant(self):
        try:
            return make_plant(self.plant_id, **self.plant_params)
        except DynamicsError as exc:
            raise ConfigError(str(exc)) from None
        except TypeError as exc:
            raise ConfigError(f"invalid parameters for plant {self.plant_id!r}: {exc}") from None

    def pair(self, mode=None):
        return uncertain_pair(self.nominal_plant(), mode or self.mode, self.scale, self.payload)

    def clf(self):
        nom = self.nominal_plant()
        Q = None if self.q_diag is None else np.diag(self.q_diag)
        lam = None if self.rate is None else float(self.rate) * self.epsilon
        return build_res_clf(nom.m, nom.r, self.poles, self.epsilon, lam, Q)

    def psi_ranges(self):
        return [tuple(b["psi"]) for b in self.barriers if "psi" in b]

    def ecbfs(self):
        out, k = [], 0
        for b in self.barriers:
            kw = {key: v for key, v in b.items() if key not in ("type", "psi")}
            if "poles" in kw:
                kw["poles"] = tuple(kw["poles"])
            if "psi" in b:
                kw["psi_index"] = k
                k += 1
            out.append(BARRIERS[b["type"]](**kw))
        return out

    def specs(self):
        nom = self.nominal_plant()
        rows = []
        for c in self.constraints:
            rows += acceleration_bound(nom, int(c.get("index", 0)), float(c["bound"]))
        return rows

    def controller(self, variant=None, policy=None):
        variant = variant or self.variant
        return QpController(variant, self.clf(), self.nominal_plant(), self.ecbfs(),
                            self.specs(), policy=policy, relax_penalty=self.relax_penalty,
                            u_max=self.u_max)

    def episode_config(self, seed=None, sigma=0.0) -> EpisodeConfig:
        e = self.episode
        n = 2 * PLANTS[self.plant_id].n_q
        return EpisodeConfig(
            horizon=float(e.get("horizon", 5.0)),
            ts=float(e.get("ts", 0.01)),
            x0_low=tuple(e.get("x0_low", [0.0] * n)),
            x0_high=tuple(e.get("x0_high", [0.0] * n)),
            psi_dist=self.psi_ranges(),
            sigma=sigma,
            seed=self.seed if seed is None else seed,
            max_consecutive_infeasible=int(e.get("max_consecutive_infeasible", 50)),
        )

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("raw")
        return d
