"""Flat ``key = value`` run configuration with typed overrides.

Precedence, lowest to highest: built-in and per-case defaults, the
invoking command's own defaults, the config file, command-line flags.
Name matching for tests, frameworks, and schemes is forgiving:
underscores count as hyphens and any unambiguous prefix is accepted.

Every problem found during resolution is collected and reported in a
single ConfigError, one line per problem, before anything is computed
or written. The effective configuration can be serialised back to text
that the parser accepts verbatim, which is what run commands echo into
their output directory.
"""

import math
from dataclasses import dataclass, fields, replace

from moistswe.constants import EARTH_RADIUS, GRAVITY, OMEGA
from moistswe.dynamics import Framework, FrameworkConfig
from moistswe.errors import ConfigError
from moistswe.physics import PhysicsParams, Scheme
from moistswe.testcases import Case, case_spec

__all__ = [
    "RunConfig",
    "parse_config_text",
    "resolve_config",
    "echo_text",
    "defaults_text",
    "DEFAULT_BETA1",
    "DEFAULT_BETA2",
]

DEFAULT_BETA1 = 1600.0
DEFAULT_BETA2 = 10.0 * GRAVITY

DESK_PRESET = {
    Case.MOUNTAIN: dict(level=4, days=15.0),
    Case.UNSTABLE_JET: dict(level=5, days=6.0),
}

_CHOICE_KEYS = {
    "test": tuple(c.value for c in Case),
    "framework": tuple(f.value for f in Framework),
    "scheme": tuple(s.value for s in Scheme),
    "preset": ("paper", "desk"),
    "coriolis": ("sin", "cos"),
}
_INT_KEYS = ("level",)
_FLOAT_KEYS = ("days", "dt", "courant", "beta1", "beta2", "q0", "H", "xi",
               "gamma_r", "q_precip", "tau_v", "tau_r", "snapshot_days",
               "u0", "mountain_h0", "mountain_radius", "mountain_lon",
               "mountain_lat", "jet_h_hat")
_BOOL_KEYS = ("physics", "limiter")
_STR_KEYS = ("out",)
KNOWN_KEYS = (tuple(_CHOICE_KEYS) + _INT_KEYS + _FLOAT_KEYS + _BOOL_KEYS
              + _STR_KEYS)

_CASE_FIELDS = ("level", "days", "q0", "H", "xi", "coriolis", "u0",
                "mountain_h0", "mountain_radius", "mountain_lon",
                "mountain_lat", "jet_h_hat")


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings for one simulation.

    ``dt`` stays None when the timestep is to be derived from the
    Courant target against the mesh actually built; run commands fill
    it in before echoing. ``tau_v``/``tau_r`` None means relaxation
    over exactly one timestep.
    """

    test: str = Case.STEADY_STATE.value
    framework: str = Framework.MOIST_CONVECTIVE.value
    scheme: str = Scheme.THREE_STATE.value
    preset: str = "paper"
    physics: bool = True
    level: int = 3
    days: float = 5.0
    dt: float | None = None
    courant: float = 0.2
    beta1: float = DEFAULT_BETA1
    beta2: float = 0.0
    q0: float = 0.007
    H: float = 3.0e4 / GRAVITY
    xi: float = 0.0
    gamma_r: float = 1e-3
    q_precip: float = 1e-4
    tau_v: float | None = None
    tau_r: float | None = None
    u0: float = 20.0
    mountain_h0: float = 2000.0
    mountain_radius: float = math.pi / 9
    mountain_lon: float = 3 * math.pi / 2
    mountain_lat: float = math.pi / 6
    jet_h_hat: float = 120.0
    coriolis: str = "sin"
    limiter: bool = True
    snapshot_days: float = 5.0
    out: str = "output"

    def case_spec(self):
        return case_spec(
            self.test, level=self.level, days=self.days, q0=self.q0,
            H=self.H, xi=self.xi, coriolis=self.coriolis, dt=self.dt,
            u0=self.u0, mountain_h0=self.mountain_h0,
            mountain_radius=self.mountain_radius,
            mountain_lon=self.mountain_lon, mountain_lat=self.mountain_lat,
            jet_h_hat=self.jet_h_hat,
        )

    def framework_config(self):
        return FrameworkConfig(Framework(self.framework),
                               beta1=self.beta1, beta2=self.beta2)

    def physics_params(self):
        return PhysicsParams(q0=self.q0, H=self.H, xi=self.xi,
                             gamma_r=self.gamma_r, q_precip=self.q_precip,
                             tau_v=self.tau_v, tau_r=self.tau_r,
                             scheme=Scheme(self.scheme))


def _match(name, choices):
    """Canonical choice for a forgiving name, or None."""
    want = str(name).strip().lower().replace("_", "-")
    if want in choices:
        return want
    hits = [c for c in choices if c.startswith(want)] if want else []
    return hits[0] if len(hits) == 1 else None


def parse_config_text(text):
    """Raw key/value strings from flat config text, '#' starts a comment."""
    values, problems = {}, []
    for lineno, raw in enumerate(str(text).splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            problems.append(f"line {lineno}: expected 'key = value', got "
                            f"{raw.strip()!r}")
            continue
        values[key.strip()] = value.strip()
    if problems:
        raise ConfigError("\n".join(problems))
    return values


def _convert(key, text, problems):
    try:
        if key in _BOOL_KEYS:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if key in _INT_KEYS:
            return int(text)
        if key in _FLOAT_KEYS:
            return float(text)
        return text
    except ValueError:
        kind = ("boolean" if key in _BOOL_KEYS
                else "integer" if key in _INT_KEYS else "number")
        problems.append(f"bad value for '{key}': {text!r} is not a {kind}")
        return None


def _default_beta(framework, which, magnitude):
    """The paper magnitude where the framework allows the feedback, else 0."""
    try:
        FrameworkConfig(Framework(framework), **{which: magnitude})
    except ConfigError:
        return 0.0
    return magnitude


def resolve_config(file_text=None, overrides=None, base=None):
    """Merge all sources into a validated RunConfig.

    ``base`` and ``overrides`` carry already-typed values (the invoking
    command's defaults and its flags); ``file_text`` is raw config text.
    Raises one ConfigError listing every problem found.
    """
    problems = []
    raw = dict(base or {})
    if file_text is not None:
        try:
            file_values = parse_config_text(file_text)
        except ConfigError as exc:
            problems.extend(str(exc).splitlines())
            file_values = {}
        for key, text in file_values.items():
            if key not in KNOWN_KEYS:
                problems.append(f"unknown config key '{key}'")
                continue
            value = _convert(key, text, problems)
            if value is not None:
                raw[key] = value
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in KNOWN_KEYS:
            problems.append(f"unknown config key '{key}'")
            continue
        raw[key] = value

    for key, choices in _CHOICE_KEYS.items():
        if key in raw:
            canon = _match(raw[key], choices)
            if canon is None:
                problems.append(f"bad value for '{key}': {raw[key]!r} is not "
                                f"one of {', '.join(choices)}")
            else:
                raw[key] = canon

    test = raw.get("test", RunConfig.test)
    preset = raw.get("preset", RunConfig.preset)
    spec = None
    if _match(test, _CHOICE_KEYS["test"]):
        case_overrides = {k: raw[k] for k in _CASE_FIELDS if k in raw}
        if preset == "desk":
            for key, value in DESK_PRESET.get(Case(test), {}).items():
                case_overrides.setdefault(key, value)
        try:
            spec = case_spec(test, **case_overrides)
        except ConfigError as exc:
            problems.append(str(exc))
        if spec is not None and spec.level > 8:
            problems.append(f"mesh level {spec.level} exceeds the supported "
                            f"maximum 8")
            spec = None

    framework = raw.get("framework", RunConfig.framework)
    beta1 = raw.get("beta1")
    beta2 = raw.get("beta2")
    if _match(framework, _CHOICE_KEYS["framework"]):
        if beta1 is None:
            beta1 = _default_beta(framework, "beta1", DEFAULT_BETA1)
        if beta2 is None:
            beta2 = _default_beta(framework, "beta2", DEFAULT_BETA2)
        try:
            FrameworkConfig(Framework(framework), beta1=beta1, beta2=beta2)
        except ConfigError as exc:
            problems.append(str(exc))
    else:
        beta1 = beta1 or 0.0
        beta2 = beta2 or 0.0

    for key, lower_ok in (("courant", False), ("dt", False),
                          ("tau_v", False), ("tau_r", False),
                          ("snapshot_days", True), ("gamma_r", True),
                          ("q_precip", True)):
        value = raw.get(key)
        if value is not None and (value < 0.0 or (value == 0.0 and not lower_ok)):
            bound = "nonnegative" if lower_ok else "positive"
            problems.append(f"'{key}' must be {bound}, got {value!r}")

    if problems:
        raise ConfigError("\n".join(problems))

    values = dict(
        test=test, framework=framework,
        scheme=raw.get("scheme", RunConfig.scheme), preset=preset,
        physics=raw.get("physics", RunConfig.physics),
        level=spec.level, days=spec.days, dt=raw.get("dt"),
        courant=raw.get("courant", RunConfig.courant),
        beta1=beta1, beta2=beta2,
        q0=spec.q0, H=spec.H, xi=spec.xi,
        gamma_r=raw.get("gamma_r", RunConfig.gamma_r),
        q_precip=raw.get("q_precip", RunConfig.q_precip),
        tau_v=raw.get("tau_v"), tau_r=raw.get("tau_r"),
        u0=spec.u0, mountain_h0=spec.mountain_h0,
        mountain_radius=spec.mountain_radius,
        mountain_lon=spec.mountain_lon, mountain_lat=spec.mountain_lat,
        jet_h_hat=spec.jet.h_hat,
        coriolis=spec.coriolis, limiter=raw.get("limiter", RunConfig.limiter),
        snapshot_days=raw.get("snapshot_days", RunConfig.snapshot_days),
        out=raw.get("out", RunConfig.out),
    )
    return RunConfig(**values)


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def echo_text(cfg):
    """The resolved configuration as text the parser accepts back.

    Re-running from this text reproduces the run bit for bit: the
    derived timestep is written out explicitly once known.
    """
    lines = ["# effective configuration; pass back via --config to reproduce"]
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if value is None:
            continue
        lines.append(f"{f.name} = {_format(value)}")
    return "\n".join(lines) + "\n"


def defaults_text():
    """Human-readable listing of every constant and default."""
    lines = [
        "# physical constants",
        f"gravity = {GRAVITY!r}",
        f"omega = {OMEGA!r}",
        f"earth_radius = {EARTH_RADIUS!r}",
        "",
        "# shared defaults",
        "test = steady-state",
        "framework = moist-convective",
        "scheme = three-state",
        "preset = paper",
        "physics = true",
        f"courant = {RunConfig.courant!r}",
        f"beta1 = {DEFAULT_BETA1!r}  # zeroed where the framework forbids it",
        f"beta2 = {DEFAULT_BETA2!r}  # zeroed where the framework forbids it",
        f"gamma_r = {RunConfig.gamma_r!r}",
        f"q_precip = {RunConfig.q_precip!r}",
        "tau_v = dt  # relax over one step unless set",
        "tau_r = dt",
        f"u0 = {RunConfig.u0!r}",
        f"coriolis = {RunConfig.coriolis}",
        f"limiter = {_format(RunConfig.limiter)}",
        f"snapshot_days = {RunConfig.snapshot_days!r}",
        f"out = {RunConfig.out}",
    ]
    for case in Case:
        spec = case_spec(case)
        lines += [
            "",
            f"# {case.value}",
            f"level = {spec.level}",
            f"days = {spec.days!r}",
            f"q0 = {spec.q0!r}",
            f"xi = {spec.xi!r}",
            f"H = {spec.H!r}",
        ]
        if case is Case.MOUNTAIN:
            lines += [
                f"mountain_h0 = {spec.mountain_h0!r}",
                f"mountain_radius = {spec.mountain_radius!r}",
                f"mountain_lon = {spec.mountain_lon!r}",
                f"mountain_lat = {spec.mountain_lat!r}",
            ]
        if case is Case.UNSTABLE_JET:
            lines.append(f"jet_h_hat = {spec.jet.h_hat!r}  "
                         "# 0 keeps the jet balanced")
    return "\n".join(lines) + "\n"


def with_resolved_dt(cfg, dt):
    """Copy with the timestep pinned, for echoing."""
    return replace(cfg, dt=float(dt))
