"""Small run configurations shared by the training, config and CLI tests."""

import copy

PENDULUM = {
    "schema_version": 1,
    "seed": 3,
    "out_dir": "runs/test",
    "plant": {"id": "pendulum", "mass": 1.0},
    "uncertainty": {"mode": "scale", "scale": 2.0},
    "controller": {"variant": "rl-clf-qp"},
    "clf": {"epsilon": 0.8, "poles": [-1.0, -1.5], "rate": 2.5},
    "episode": {"horizon": 0.3, "ts": 0.01, "x0_low": [-0.3, -0.1], "x0_high": [0.3, 0.1]},
    "learning": {"episodes": 4, "batch": 16, "buffer": 500, "hidden": [8, 8], "warmup": 16,
                 "eval_every": 2, "eval_episodes": 2, "alpha_max": 0.5, "beta_max": 1.0},
    "eval": {"episodes": 2},
    "compare": {"variants": ["clf-qp", "rl-clf-qp"], "episodes": 2},
}

WALL = {
    "schema_version": 1,
    "seed": 1,
    "out_dir": "runs/test",
    "plant": {"id": "double_integrator", "mass": 1.0, "target": 1.5, "u_max": 10.0},
    "uncertainty": {"mode": "scale", "scale": 2.0},
    "controller": {"variant": "rl-cbf-clf-qp", "relax_penalty": 1000.0},
    "clf": {"epsilon": 0.8, "poles": [-1.0, -2.0]},
    "barriers": [{"type": "wall", "index": 0, "side": "upper", "wall": 1.0,
                  "psi": [0.8, 1.2], "poles": [-2.0, -4.0]}],
    "constraints": [{"type": "accel_bound", "index": 0, "bound": 4.0}],
    "episode": {"horizon": 0.3, "ts": 0.01, "x0_low": [-0.5, 0.0], "x0_high": [0.0, 0.5]},
    "learning": {"episodes": 4, "batch": 16, "buffer": 500, "hidden": [8, 8], "warmup": 16,
                 "eval_every": 2, "eval_episodes": 2, "alpha_max": 0.5, "beta_max": 0.5},
    "eval": {"episodes": 2},
}


def config(base, **overrides):
    """Deep copy of ``base`` with dotted-key overrides, e.g. ``learning__episodes=6``."""
    d = copy.deepcopy(base)
    for key, value in overrides.items():
        node = d
        parts = key.split("__")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return d


def toml_text(d, prefix=""):
    """Minimal TOML writer for the flat-table dicts above."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return f'"{v}"'
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        return repr(v)

    lines = [f"{k} = {fmt(v)}" for k, v in d.items() if not isinstance(v, (dict, list)) or
             (isinstance(v, list) and not (v and isinstance(v[0], dict)))]
    for k, v in d.items():
        if isinstance(v, dict):
            lines.append(f"\n[{k}]")
            lines += [f"{kk} = {fmt(vv)}" for kk, vv in v.items()]
        elif isinstance(v, list) and v and isinstance(v[0], dict):
            for item in v:
                lines.append(f"\n[[{k}]]")
                lines += [f"{kk} = {fmt(vv)}" for kk, vv in item.items()]
    return "\n".join(lines) + "\n"
