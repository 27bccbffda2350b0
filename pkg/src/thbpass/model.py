"""System model for fully-connected pinching-antenna systems.

Geometry, the in-waveguide propagation response, the line-of-sight
channel, SINR / weighted sum rate evaluation, energy efficiency and the
CSI-error model.  Everything here is a pure function of its inputs.

Conventions
-----------
* A pinching layout ``X`` is an ``(N, M)`` real array; column ``m`` holds
  the (sorted) PA positions along waveguide ``m``.
* Channel matrices are ``(M*N, K)`` complex; rows are waveguide-major, so
  rows ``m*N ... m*N + N - 1`` belong to waveguide ``m`` (0-based).
* Powers are linear milliwatts internally.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

SPEED_OF_LIGHT = 2.998e8


class InfeasibleLayoutError(ValueError):
    """Raised when a PA layout violates the box or spacing constraints."""


class ConfigError(ValueError):
    """Raised when a :class:`SystemConfig` violates one of its invariants."""


def dbm_to_mw(dbm):
    return 10.0 ** (np.asarray(dbm, dtype=float) / 10.0)


def mw_to_dbm(mw):
    return 10.0 * np.log10(np.asarray(mw, dtype=float))


def guided_wavelength(wavelength: float, n_eff: float) -> float:
    """Wavelength inside a dielectric waveguide, ``wavelength / n_eff``."""
    if not wavelength > 0:
        raise ValueError(f"wavelength must be positive, got {wavelength}")
    if not n_eff >= 1:
        raise ValueError(f"effective refractive index must be >= 1, got {n_eff}")
    return wavelength / n_eff


@dataclass(frozen=True)
class SystemConfig:
    """Full parameterization of the tri-hybrid beamforming problem.

    Lengths are in meters, powers in linear milliwatts.  Derived
    quantities (wavelengths, waveguide spacing, default amplitude
    coefficient) are exposed as properties.
    """

    num_waveguides: int = 4
    pas_per_waveguide: int = 4
    num_users: int = 2
    num_rf_chains: int = 2
    waveguide_length: float = 10.0
    region_width: float = 10.0
    region_depth: float = 10.0
    height: float = 3.0
    carrier_frequency: float = 30e9
    n_eff: float = 1.44
    transmit_power: float = 100.0
    noise_powers: tuple = ()
    priorities: tuple = ()
    min_pa_spacing: float | None = None
    waveguide_spacing_override: float | None = None
    amplitude_coefficient: float | None = None

    def __post_init__(self):
        K = self.num_users
        if not self.noise_powers:
            object.__setattr__(self, "noise_powers", tuple([1e-9] * K))
        if not self.priorities:
            object.__setattr__(self, "priorities", tuple([1.0 / K] * K) if K > 0 else ())
        object.__setattr__(self, "noise_powers", tuple(float(v) for v in np.atleast_1d(self.noise_powers)))
        object.__setattr__(self, "priorities", tuple(float(v) for v in np.atleast_1d(self.priorities)))
        if self.min_pa_spacing is None:
            object.__setattr__(self, "min_pa_spacing", self.wavelength / 2)
        self.validate()

    def validate(self) -> None:
        for name in ("num_waveguides", "pas_per_waveguide", "num_users", "num_rf_chains"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        for name in ("waveguide_length", "region_width", "region_depth", "carrier_frequency",
                     "transmit_power"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.height < 0:
            raise ConfigError(f"height must be non-negative, got {self.height!r}")
        if not self.n_eff >= 1:
            raise ConfigError(f"n_eff must be >= 1, got {self.n_eff!r}")
        K = self.num_users
        if len(self.noise_powers) != K:
            raise ConfigError(f"noise_powers needs {K} entries, got {len(self.noise_powers)}")
        if len(self.priorities) != K:
            raise ConfigError(f"priorities needs {K} entries, got {len(self.priorities)}")
        if any(not s > 0 for s in self.noise_powers):
            raise ConfigError("noise_powers must be positive")
        if any(not b > 0 for b in self.priorities):
            raise ConfigError("priorities must be positive")
        if abs(sum(self.priorities) - 1.0) > 1e-9:
            raise ConfigError(f"priorities must sum to 1, got {sum(self.priorities)!r}")
        L, dd = self.waveguide_length, self.min_pa_spacing
        if not 0 < dd <= L:
            raise ConfigError(
                f"min_pa_spacing must lie in (0, waveguide_length]: {dd!r} vs {L!r} "
                "(box / spacing constraints)")
        if self.pas_per_waveguide * dd > L:
            raise ConfigError(
                f"{self.pas_per_waveguide} PAs spaced {dd} m do not fit on a {L} m waveguide "
                "(box / spacing constraints)")
        if self.num_users > self.num_waveguides * self.pas_per_waveguide:
            raise ConfigError("num_users exceeds the number of PAs (rank-deficient service)")
        if self.amplitude_coefficient is not None and self.amplitude_coefficient < 0:
            raise ConfigError("amplitude_coefficient must be non-negative")

    # ---- derived quantities -------------------------------------------------
    @property
    def M(self) -> int:
        return self.num_waveguides

    @property
    def N(self) -> int:
        return self.pas_per_waveguide

    @property
    def K(self) -> int:
        return self.num_users

    @property
    def n_rf(self) -> int:
        return self.num_rf_chains

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_frequency

    @property
    def guided_wavelength(self) -> float:
        return guided_wavelength(self.wavelength, self.n_eff)

    @property
    def waveguide_spacing(self) -> float:
        if self.waveguide_spacing_override is not None:
            return self.waveguide_spacing_override
        if self.num_waveguides == 1:
            return 0.0
        return self.region_depth / (self.num_waveguides - 1)

    @property
    def eta(self) -> float:
        if self.amplitude_coefficient is not None:
            return self.amplitude_coefficient
        return self.wavelength / (4 * math.pi)

    @property
    def sigma2(self) -> np.ndarray:
        return np.asarray(self.noise_powers, dtype=float)

    @property
    def beta(self) -> np.ndarray:
        return np.asarray(self.priorities, dtype=float)

    @property
    def waveguide_y(self) -> np.ndarray:
        return np.arange(self.num_waveguides) * self.waveguide_spacing

    def with_(self, **changes) -> "SystemConfig":
        """Copy with changes; per-user vectors are reset when K changes."""
        if "num_users" in changes and changes["num_users"] != self.num_users:
            changes.setdefault("noise_powers", ())
            changes.setdefault("priorities", ())
            if not changes["noise_powers"] and len(set(self.noise_powers)) == 1:
                changes["noise_powers"] = tuple([self.noise_powers[0]] * changes["num_users"])
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "SystemConfig":
        """Build from plain values; ``*_dbm`` keys are converted to mW."""
        data = dict(data)
        if "transmit_power_dbm" in data:
            data["transmit_power"] = float(dbm_to_mw(data.pop("transmit_power_dbm")))
        if "noise_power_dbm" in data:
            value = data.pop("noise_power_dbm")
            K = data.get("num_users", cls.num_users)
            data["noise_powers"] = tuple(np.broadcast_to(dbm_to_mw(value), (K,)).tolist())
        for key in ("noise_powers", "priorities"):
            if key in data and data[key] is not None:
                data[key] = tuple(np.atleast_1d(data[key]).tolist())
        return cls(**data)


# ---- layouts -------------------------------------------------------------------

def is_feasible(X, cfg: SystemConfig) -> bool:
    """True iff ``X`` satisfies the box and minimum-spacing constraints exactly."""
    X = np.asarray(X, dtype=float)
    if X.shape[-2:] != (cfg.N, cfg.M) or not np.all(np.isfinite(X)):
        return False
    if np.any(X < 0) or np.any(X > cfg.waveguide_length):
        return False
    return bool(np.all(X[..., 1:, :] >= X[..., :-1, :] + cfg.min_pa_spacing))


def check_layout(X, cfg: SystemConfig) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if not is_feasible(X, cfg):
        raise InfeasibleLayoutError(f"layout of shape {X.shape} violates the box/spacing constraints")
    return X


def feasibility_residuals(X, cfg: SystemConfig) -> dict:
    """Worst violation of each constraint (0.0 when satisfied)."""
    X = np.asarray(X, dtype=float)
    gaps = X[1:, :] - X[:-1, :] if X.shape[0] > 1 else np.zeros((0, X.shape[1]))
    return {
        "lower": float(max(0.0, -X.min())),
        "upper": float(max(0.0, X.max() - cfg.waveguide_length)),
        "spacing": float(max(0.0, cfg.min_pa_spacing - gaps.min())) if gaps.size else 0.0,
    }


# ---- pinching beamformer ----------------------------------------------------------

def propagation_response(x_m, lambda_g: float, N: int | None = None) -> np.ndarray:
    """In-waveguide response of the PAs on one waveguide (equal power split)."""
    x_m = np.asarray(x_m, dtype=float)
    if N is None:
        N = x_m.shape[-1]
    return np.exp(-2j * np.pi * x_m / lambda_g) / np.sqrt(N)


def pinching_beamformer(X, cfg: SystemConfig) -> np.ndarray:
    """Block-diagonal ``(M*N, M)`` pinching beamformer for layout ``X``."""
    X = check_layout(X, cfg)
    N, M = X.shape
    W = np.zeros((M * N, M), dtype=complex)
    for m in range(M):
        W[m * N:(m + 1) * N, m] = propagation_response(X[:, m], cfg.guided_wavelength, N)
    return W


# ---- geometry and channel -------------------------------------------------------

def pa_positions(X, cfg: SystemConfig) -> np.ndarray:
    """3-D coordinates of every PA, shape ``(..., N, M, 3)``."""
    X = np.asarray(X, dtype=float)
    y = np.broadcast_to(cfg.waveguide_y, X.shape)
    z = np.full(X.shape, cfg.height)
    return np.stack([X, y, z], axis=-1)


def pa_user_distance(x: float, m: int, user, cfg: SystemConfig) -> float:
    """Distance between a PA at ``x`` on waveguide ``m`` (0-based) and ``user``."""
    user = np.asarray(user, dtype=float)
    pa = np.array([x, m * cfg.waveguide_spacing, cfg.height])
    return float(np.linalg.norm(pa - user))


def distances(X, users, cfg: SystemConfig) -> np.ndarray:
    """PA-user distances, shape ``(..., K, N, M)`` for layouts of shape ``(..., N, M)``."""
    X = np.asarray(X, dtype=float)
    users = np.asarray(users, dtype=float)
    dx = X[..., None, :, :] - users[:, 0, None, None]
    dy = cfg.waveguide_y[None, None, :] - users[:, 1, None, None]
    dz = cfg.height - users[:, 2, None, None]
    return np.sqrt(dx ** 2 + dy ** 2 + dz ** 2)


def los_channel(X, users, cfg: SystemConfig) -> np.ndarray:
    """Line-of-sight channel ``H`` of shape ``(M*N, K)``; column k is h_k(X)."""
    X = check_layout(X, cfg)
    D = distances(X, users, cfg)
    if np.any(D <= 0):
        raise ValueError("degenerate geometry: a user coincides with a PA")
    h = cfg.eta * np.exp(2j * np.pi * D / cfg.wavelength) / D  # (K, N, M)
    K, N, M = h.shape
    # waveguide-major rows: (M, N) flattened
    return h.transpose(2, 1, 0).reshape(M * N, K)


def effective_gains(X, users, cfg: SystemConfig) -> np.ndarray:
    """Per-waveguide effective gains ``h_k^H W_PB``, shape ``(..., K, M)``.

    Works on a stack of layouts, which is how the position optimizers use it.
    """
    X = np.asarray(X, dtype=float)
    D = distances(X, users, cfg)
    phase = (2 * np.pi / cfg.wavelength) * (D + cfg.n_eff * X[..., None, :, :])
    terms = cfg.eta * np.exp(-1j * phase) / (np.sqrt(cfg.N) * D)
    return terms.sum(axis=-2)


def effective_gain(X, users, cfg: SystemConfig, k: int, m: int) -> complex:
    return complex(effective_gains(check_layout(X, cfg), users, cfg)[k, m])


def effective_channel(X, users, cfg: SystemConfig) -> np.ndarray:
    """``W_PB^H H`` as an ``(M, K)`` matrix (conjugate of the effective gains)."""
    return np.conj(effective_gains(check_layout(X, cfg), users, cfg)).T


# ---- performance metrics ---------------------------------------------------------

def sinr(H, W, sigma2) -> np.ndarray:
    """Per-user SINR for channel columns ``H`` and composite beamformer ``W``."""
    H = np.asarray(H)
    W = np.asarray(W)
    gains = np.abs(H.conj().T @ W) ** 2  # (K, K): row k = user k, column i = stream i
    signal = np.diag(gains)
    interference = gains.sum(axis=1) - signal
    return signal / (interference + np.asarray(sigma2, dtype=float))


def wsr(gamma, beta) -> float:
    """Weighted sum rate in bits/s/Hz."""
    gamma = np.asarray(gamma, dtype=float)
    return float(np.sum(np.asarray(beta, dtype=float) * np.log2(1.0 + gamma)))


def interference_free_bound(H, W, sigma2, beta) -> float:
    g = np.abs(np.einsum("ik,ik->k", np.asarray(H).conj(), np.asarray(W))) ** 2
    return float(np.sum(np.asarray(beta) * np.log2(1 + g / np.asarray(sigma2))))


@dataclass(frozen=True)
class PowerModel:
    """Per-component power draw in watts (hardware constants from the evaluation setup)."""

    rf_chain: float = 0.4
    phase_shifter: float = 0.01
    power_amplifier: float = 0.1


def component_counts(architecture: str, cfg: SystemConfig, n_rf: int | None = None) -> dict:
    """Numbers of RF chains, phase shifters and PA amplifiers per architecture."""
    M, N = cfg.M, cfg.N
    n_rf = cfg.n_rf if n_rf is None else n_rf
    if architecture == "fc":
        return {"n_rf": n_rf, "n_ps": n_rf * M, "n_pa": M * N}
    if architecture == "sc":
        return {"n_rf": M, "n_ps": 0, "n_pa": M * N}
    if architecture == "mimo":
        return {"n_rf": M, "n_ps": M * N, "n_pa": M * N}
    raise ValueError(f"unknown architecture {architecture!r}")


def energy_efficiency(rate: float, transmit_power_w: float, n_rf: int, n_ps: int, n_pa: int,
                      power: PowerModel = PowerModel()) -> float:
    """Spectral efficiency per consumed watt (bits/s/Hz/W)."""
    total = (transmit_power_w + n_rf * power.rf_chain + n_ps * power.phase_shifter
             + n_pa * power.power_amplifier)
    return rate / total


def config_energy_efficiency(rate: float, cfg: SystemConfig, architecture: str = "fc",
                             n_rf: int | None = None, power: PowerModel = PowerModel()) -> float:
    counts = component_counts(architecture, cfg, n_rf)
    return energy_efficiency(rate, cfg.transmit_power / 1000.0, power=power, **counts)


# ---- imperfect CSI ---------------------------------------------------------------

def csi_error_variance(H, eps_scale: float) -> float:
    H = np.asarray(H)
    return eps_scale * np.linalg.norm(H) / H.size


def perturb_channel(H, eps_scale: float, rng) -> np.ndarray:
    """Add i.i.d. CSCG estimation error with variance ``eps_scale * ||H||_F / (MNK)``.

    ``rng`` is a seed or a :class:`numpy.random.Generator`.
    """
    if eps_scale < 0:
        raise ValueError("eps_scale must be non-negative")
    H = np.asarray(H, dtype=complex)
    if eps_scale == 0:
        return H.copy()
    rng = np.random.default_rng(rng)
    var = csi_error_variance(H, eps_scale)
    noise = rng.standard_normal(H.shape) + 1j * rng.standard_normal(H.shape)
    return H + np.sqrt(var / 2) * noise


# ---- scenario sampling -----------------------------------------------------------

def sample_users(cfg: SystemConfig, rng) -> np.ndarray:
    """Users uniform over the ground rectangle (z = 0), shape ``(K, 3)``."""
    rng = np.random.default_rng(rng)
    x = rng.uniform(0, cfg.region_width, cfg.K)
    y = rng.uniform(0, cfg.region_depth, cfg.K)
    return np.stack([x, y, np.zeros(cfg.K)], axis=1)


@dataclass
class BeamformerSet:
    """Digital, analog and pinching factors of the tri-hybrid beamformer."""

    W_BB: np.ndarray
    W_RF: np.ndarray
    W_PB: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def transmit(self) -> np.ndarray:
        """``W_RF @ W_BB``: the signal fed into the waveguides."""
        return self.W_RF @ self.W_BB

    @property
    def composite(self) -> np.ndarray:
        if self.W_PB is None:
            return self.transmit
        return self.W_PB @ self.transmit

    def transmit_power(self) -> float:
        return float(np.linalg.norm(self.transmit) ** 2)
