"""Problem configuration and the flat key-value config file format.

The config file is plain text, one ``key = value`` per line, ``#`` comments
allowed.  Recognized keys (exactly):

    d_z, p, p_T, p_S, sigma_y, sigma_xi, eta_l, eta_u, eta_t,
    n, N, beta_star_norm, xi_frob_sq, mu_T_sq, mu_S_sq, seed
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

__all__ = [
    "ProblemConfig",
    "GeometryTargets",
    "RunConfig",
    "ConfigError",
    "load_config",
    "parse_grid",
    "CONFIG_KEYS",
]


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


_INT_KEYS = {"d_z", "p", "p_T", "p_S", "n", "N", "seed"}
_FLOAT_KEYS = {
    "sigma_y", "sigma_xi", "eta_l", "eta_u", "eta_t",
    "beta_star_norm", "xi_frob_sq", "mu_T_sq", "mu_S_sq",
}
CONFIG_KEYS = (
    "d_z", "p", "p_T", "p_S", "sigma_y", "sigma_xi", "eta_l", "eta_u",
    "eta_t", "n", "N", "beta_star_norm", "xi_frob_sq", "mu_T_sq",
    "mu_S_sq", "seed",
)


@dataclass(frozen=True)
class ProblemConfig:
    """Scalar parameters of the synthetic regression task."""

    d_z: int
    p: int
    p_T: int
    p_S: int
    sigma_y: float
    sigma_xi: float
    eta_l: float
    eta_u: float
    eta_t: float
    n: int
    N: int
    beta_star_norm: float = 1.0

    @property
    def gamma_z(self) -> float:
        return self.d_z / self.n

    @property
    def nu_z(self) -> float:
        return self.d_z / self.N

    @property
    def d_T(self) -> int:
        return self.p_T * self.d_z

    @property
    def d_S(self) -> int:
        return self.p_S * self.d_z

    def violations(self) -> list[str]:
        """All violated scalar invariants; empty list means valid."""
        out = []
        if self.d_z < 1:
            out.append("d_z must be a positive integer")
        if self.p < 1:
            out.append("p must be a positive integer")
        if not (2 <= self.p_T <= self.p):
            out.append(f"p_T must lie in [2, p]; got p_T={self.p_T}, p={self.p}")
        if not (2 <= self.p_S <= self.p_T):
            out.append(f"p_S must lie in [2, p_T]; got p_S={self.p_S}, p_T={self.p_T}")
        if self.sigma_y < 0:
            out.append("sigma_y must be nonnegative")
        if self.sigma_xi <= 0:
            out.append("sigma_xi must be positive")
        for name, lo, hi in (("eta_l", 0.0, 0.5), ("eta_u", 0.0, 0.5), ("eta_t", 0.0, 1.0)):
            v = getattr(self, name)
            if not (lo <= v <= hi):
                out.append(f"{name}={v} outside [{lo}, {hi}]")
        if self.n <= self.p_T * self.d_z:
            out.append(f"n > d_T violated: n={self.n}, d_T={self.p_T * self.d_z}")
        if self.N <= self.p_S * self.d_z:
            out.append(f"N > d_S violated: N={self.N}, d_S={self.p_S * self.d_z}")
        if self.beta_star_norm < 0:
            out.append("beta_star_norm must be nonnegative")
        return out


@dataclass(frozen=True)
class GeometryTargets:
    """Norm targets realized by the frame/mean construction."""

    xi_frob_sq: float = 0.2
    mu_T_sq: float = 10.0
    mu_S_sq: float = 0.1


@dataclass(frozen=True)
class RunConfig:
    """Everything a run needs: task scalars, geometry targets, master seed."""

    problem: ProblemConfig
    targets: GeometryTargets = field(default_factory=GeometryTargets)
    seed: int = 0

    def as_dict(self) -> dict:
        d = {f.name: getattr(self.problem, f.name) for f in fields(ProblemConfig)}
        d.update({f.name: getattr(self.targets, f.name) for f in fields(GeometryTargets)})
        d["seed"] = self.seed
        return d

    def with_updates(self, **kwargs) -> "RunConfig":
        prob = {k: v for k, v in kwargs.items() if k in {f.name for f in fields(ProblemConfig)}}
        targ = {k: v for k, v in kwargs.items() if k in {f.name for f in fields(GeometryTargets)}}
        seed = kwargs.get("seed", self.seed)
        unknown = set(kwargs) - set(prob) - set(targ) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(
            problem=replace(self.problem, **prob),
            targets=replace(self.targets, **targ),
            seed=seed,
        )


def _parse_value(key: str, raw: str, lineno: int):
    try:
        if key in _INT_KEYS:
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: key '{key}' has non-numeric value '{raw}'") from None


def parse_config_text(text: str) -> RunConfig:
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line}'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        values[key] = _parse_value(key, raw, lineno)

    missing = [k for k in CONFIG_KEYS if k not in values]
    if missing:
        raise ConfigError(f"missing config keys: {', '.join(missing)}")

    problem_keys = [f.name for f in fields(ProblemConfig)]
    problem = ProblemConfig(**{k: values[k] for k in problem_keys})
    targets = GeometryTargets(
        xi_frob_sq=values["xi_frob_sq"], mu_T_sq=values["mu_T_sq"], mu_S_sq=values["mu_S_sq"]
    )
    return RunConfig(problem=problem, targets=targets, seed=values["seed"])


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def dump_config(cfg: RunConfig) -> str:
    d = cfg.as_dict()
    return "\n".join(f"{k} = {d[k]}" for k in CONFIG_KEYS) + "\n"


def parse_grid(spec: str) -> list[float]:
    """Grid values from 'a,b,c' or 'start:stop:step' (stop inclusive)."""
    spec = spec.strip()
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid '{spec}' must be start:stop:step")
        start, stop, step = (float(x) for x in parts)
        if step <= 0:
            raise ConfigError("grid step must be positive")
        count = int(round((stop - start) / step))
        vals = [start + i * step for i in range(count + 1)]
        if vals and vals[-1] > stop + 1e-12:
            vals.pop()
        return [round(v, 12) for v in vals]
    try:
        return [float(x) for x in spec.split(",") if x.strip() != ""]
    except ValueError:
        raise ConfigError(f"grid '{spec}' is not a comma list or start:stop:step") from None
