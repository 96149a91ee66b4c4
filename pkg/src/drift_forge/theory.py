"""Numerical checks of the linear-regression analysis behind noise-augmented replay.

Historical inputs have second moment ``Sigma_A = beta I + U diag(nu) U^T``,
fresh inputs ``Sigma_B = alpha I``, and the full stream is the mixture with
weight ``gamma`` on the fresh part. Everything here is dense linear algebra
on small matrices; no structure is exploited so the closed forms can be
checked against it.
"""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np

EXACT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class CovInstance:
    alpha: float
    beta: float
    gamma: float
    U: np.ndarray  # (d, k), orthonormal columns
    nu: np.ndarray  # (k,)
    z_A: np.ndarray  # (d,)

    def __post_init__(self):
        U = np.atleast_2d(np.asarray(self.U, dtype=float))
        nu = np.atleast_1d(np.asarray(self.nu, dtype=float))
        z = np.asarray(self.z_A, dtype=float)
        object.__setattr__(self, "U", U)
        object.__setattr__(self, "nu", nu)
        object.__setattr__(self, "z_A", z)
        d, k = U.shape
        if k != nu.size:
            raise ValueError(f"U has {k} columns but nu has {nu.size} entries")
        if z.shape != (d,):
            raise ValueError(f"z_A must have length {d}")
        if k >= d and k > 0:
            raise ValueError(f"need k < d, got k={k}, d={d}")
        if not np.allclose(U.T @ U, np.eye(k), atol=1e-10, rtol=0):
            raise ValueError("U must have orthonormal columns")
        if np.any(nu <= 0):
            raise ValueError("nu entries must be positive")
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")

    @property
    def d(self) -> int:
        return self.U.shape[0]

    @property
    def k(self) -> int:
        return self.U.shape[1]

    @property
    def tau(self) -> float:
        return (1 - self.gamma) * self.beta + self.gamma * self.alpha

    @property
    def nu_max(self) -> float:
        return float(self.nu.max()) if self.k else 0.0

    def rotated(self, Q: np.ndarray) -> "CovInstance":
        """Same instance expressed in the basis ``Q`` (orthogonal d x d)."""
        return CovInstance(self.alpha, self.beta, self.gamma, Q @ self.U, self.nu, Q @ self.z_A)

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "beta": self.beta,
            "gamma": self.gamma,
            "U": self.U.tolist(),
            "nu": self.nu.tolist(),
            "z_A": self.z_A.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovInstance":
        U = np.asarray(d["U"], dtype=float)
        if U.size == 0:
            U = U.reshape(len(d["z_A"]), 0)
        return cls(d["alpha"], d["beta"], d["gamma"], U, np.asarray(d["nu"], dtype=float).reshape(-1), d["z_A"])


def _sym_eig(S: np.ndarray):
    S = 0.5 * (S + S.T)
    return np.linalg.eigh(S)


def _inv_sqrt(S: np.ndarray) -> np.ndarray:
    w, V = _sym_eig(S)
    if w.min() <= 0:
        raise np.linalg.LinAlgError("matrix is not positive definite")
    return (V / np.sqrt(w)) @ V.T


def spectral_norm(S: np.ndarray) -> float:
    """Largest absolute eigenvalue of a symmetric matrix."""
    return float(np.max(np.abs(np.linalg.eigvalsh(0.5 * (S + S.T)))))


class DerivedMats:
    """Covariances, solutions and gap matrices of one instance.

    ``sigma_convention='mixture'`` uses the mixture second moment
    ``(1-gamma) Sigma_A + gamma Sigma_B``. ``'proof'`` uses
    ``tau I + gamma U diag(nu) U^T``; the two differ only in the coefficient
    on the low-rank part.
    """

    def __init__(self, inst: CovInstance, sigma_convention: str = "mixture"):
        self.inst = inst
        self.sigma_convention = sigma_convention
        d = inst.d
        I = np.eye(d)
        low_rank = (inst.U * inst.nu) @ inst.U.T
        self.Sigma_A = inst.beta * I + low_rank
        self.Sigma_B = inst.alpha * I
        if sigma_convention == "mixture":
            self.Sigma = (1 - inst.gamma) * self.Sigma_A + inst.gamma * self.Sigma_B
        elif sigma_convention == "proof":
            self.Sigma = inst.tau * I + inst.gamma * low_rank
        else:
            raise ValueError(f"unknown sigma convention {sigma_convention!r}")
        w, V = _sym_eig(self.Sigma)
        if w.min() <= 0:
            raise np.linalg.LinAlgError("Sigma is not positive definite")
        self.sigma_eigvals, self.sigma_eigvecs = w, V
        self.Sigma_inv_sqrt = (V / np.sqrt(w)) @ V.T

    def Sigma_Aprime(self, c: float) -> np.ndarray:
        return self.Sigma_A + c * np.eye(self.inst.d)

    @cached_property
    def w_star(self) -> np.ndarray:
        return np.linalg.solve(self.Sigma, self.inst.z_A)

    @cached_property
    def w_A(self) -> np.ndarray:
        return np.linalg.solve(self.Sigma_A, self.inst.z_A)

    def w_Aprime(self, c: float) -> np.ndarray:
        return np.linalg.solve(self.Sigma_Aprime(c), self.inst.z_A)

    @cached_property
    def L0(self) -> float:
        return float(self.inst.z_A @ self.w_star)

    def _congruence(self, M: np.ndarray) -> np.ndarray:
        R = self.Sigma_inv_sqrt
        D = R @ M @ R
        return 0.5 * (D + D.T)

    def Delta(self, c: float = 0.0, form: str = "general") -> np.ndarray:
        """Gap matrix of the (possibly shifted) historical covariance.

        ``form='general'``: ``Sigma^{-1/2} (Sigma - Sigma_A') Sigma^{-1/2}``.
        ``form='gamma_scaled'``: ``gamma Sigma^{-1/2} (Sigma_B - Sigma_A') Sigma^{-1/2}``.
        The two coincide for c = 0 under the mixture convention.
        """
        SAp = self.Sigma_Aprime(c)
        if form == "general":
            return self._congruence(self.Sigma - SAp)
        if form == "gamma_scaled":
            return self.inst.gamma * self._congruence(self.Sigma_B - SAp)
        raise ValueError(f"unknown gap form {form!r}")


def build(inst: CovInstance, sigma_convention: str = "mixture") -> DerivedMats:
    return DerivedMats(inst, sigma_convention)


def solve_weights(mats: DerivedMats, c: float = 0.0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return mats.w_star, mats.w_A, mats.w_Aprime(c)


def gap_matrix(mats: DerivedMats, c: float = 0.0, form: str = "general") -> tuple[np.ndarray, float]:
    D = mats.Delta(c, form)
    return D, spectral_norm(D)


def prediction_gap(w1: np.ndarray, w2: np.ndarray, Sigma: np.ndarray) -> float:
    diff = np.asarray(w1, dtype=float) - np.asarray(w2, dtype=float)
    return float(diff @ Sigma @ diff)


def variance_diag_approx(mats: DerivedMats) -> np.ndarray:
    return np.diag(mats.Sigma).copy()


def sample_mixture(inst: CovInstance, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``n`` zero-mean Gaussian inputs from the gamma-weighted mixture."""
    d = inst.d
    from_b = rng.random(n) < inst.gamma
    x = np.empty((n, d))
    n_b = int(from_b.sum())
    x[from_b] = rng.standard_normal((n_b, d)) * np.sqrt(inst.alpha)
    n_a = n - n_b
    # N(0, beta I + U diag(nu) U^T) = sqrt(beta) g + U (sqrt(nu) * h)
    xa = rng.standard_normal((n_a, d)) * np.sqrt(inst.beta)
    if inst.k:
        xa += (rng.standard_normal((n_a, inst.k)) * np.sqrt(inst.nu)) @ inst.U.T
    x[~from_b] = xa
    return x


def monte_carlo_noisy_ols(
    Sigma_A: np.ndarray, target_direction: np.ndarray, c: float, n: int, seed: int
) -> np.ndarray:
    """Least squares of clean linear targets on noise-perturbed inputs.

    Converges to ``(Sigma_A + c I)^{-1} Sigma_A target_direction``.
    """
    Sigma_A = np.asarray(Sigma_A, dtype=float)
    w_true = np.asarray(target_direction, dtype=float)
    d = Sigma_A.shape[0]
    if n < d + 1:
        raise ValueError(f"need n >= d + 1 samples, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(Sigma_A)
    x = rng.standard_normal((n, d)) @ chol.T
    y = x @ w_true
    x_noisy = x + rng.standard_normal((n, d)) * np.sqrt(c)
    w_hat, _, rank, _ = np.linalg.lstsq(x_noisy, y, rcond=None)
    if rank < d:
        raise np.linalg.LinAlgError("rank-deficient design")
    return w_hat


# ---------------------------------------------------------------------------
# Theorem reports


@dataclass
class TheoremReport:
    theorem: str
    assumptions_hold: bool
    assumptions: dict
    lhs: float
    rhs: float
    satisfied: bool = field(init=False)
    slack: float = field(init=False)
    detail: dict = field(default_factory=dict)

    def __post_init__(self):
        self.satisfied = bool(self.lhs <= self.rhs + EXACT_TOL)
        self.slack = float(self.rhs - self.lhs)

    def to_dict(self) -> dict:
        return asdict(self)


def verify_theorem1(inst: CovInstance, sigma_convention: str = "mixture") -> TheoremReport:
    mats = build(inst, sigma_convention)
    _, dnorm = gap_matrix(mats)
    lhs = prediction_gap(mats.w_star, mats.w_A, mats.Sigma)
    rhs = 4.0 * mats.L0 * dnorm**2
    ok = dnorm <= 0.5
    return TheoremReport("theorem1", ok, {"delta_norm_le_half": ok, "delta_norm": dnorm}, lhs, rhs)


def prop1_closed_form(inst: CovInstance) -> float:
    return inst.gamma * (inst.alpha - inst.beta) / inst.tau


def prop1_assumptions(inst: CovInstance) -> dict:
    ab = inst.alpha - inst.beta
    return {
        "alpha_ge_beta": inst.alpha >= inst.beta,
        "nu_max_in_band": inst.k > 0 and ab <= inst.nu_max <= 2 * ab,
    }


def verify_prop1(inst: CovInstance) -> TheoremReport:
    """Equality check reported as ``|numeric - closed| <= tol`` via lhs/rhs.

    The gap norm under the alternative ``'proof'`` Sigma convention is
    reported alongside for comparison; it does not enter the verdict.
    """
    mats = build(inst)
    _, numeric = gap_matrix(mats)
    _, numeric_proof = gap_matrix(build(inst, "proof"))
    closed = prop1_closed_form(inst)
    gates = prop1_assumptions(inst)
    return TheoremReport(
        "prop1",
        all(gates.values()),
        gates,
        lhs=abs(numeric - closed),
        rhs=0.0,
        detail={"numeric_norm": numeric, "numeric_norm_proof_sigma": numeric_proof, "closed_form": closed},
    )


def theorem2_bands(inst: CovInstance) -> dict[str, float]:
    """Upper bounds on ``|nu|_inf``: as stated, and as used in the proof."""
    a, b, g, tau = inst.alpha, inst.beta, inst.gamma, inst.tau
    ab = a - b
    denom = tau - g * ab
    statement = tau * (3 * g * ab - b) / denom
    proof = tau * (2 * ab - tau) / denom
    return {"statement": min(2 * ab, statement), "proof": min(2 * ab, proof)}


def theorem2_assumptions(inst: CovInstance) -> dict[str, dict]:
    a, b, g = inst.alpha, inst.beta, inst.gamma
    ab = a - b
    alpha_ok = a >= (2 - g) / (3 - g) * b
    out = {}
    for band, hi in theorem2_bands(inst).items():
        nu_ok = inst.k > 0 and ab <= inst.nu_max <= hi
        out[band] = {"alpha_lower_bound": alpha_ok, "nu_band": nu_ok, "upper": hi, "holds": alpha_ok and nu_ok}
    return out


SHIFT_PRESETS = ("gamma", "tau")
SIGMA_CONVENTIONS = ("mixture", "proof")
GAP_FORMS = ("general", "gamma_scaled")


def shift_value(inst: CovInstance, preset: str) -> float:
    if preset == "gamma":
        return inst.gamma
    if preset == "tau":
        return inst.tau
    raise ValueError(f"unknown shift preset {preset!r}")


def verify_theorem2(
    inst: CovInstance,
    c_variants=SHIFT_PRESETS,
    sigma_conventions=SIGMA_CONVENTIONS,
    gap_forms=GAP_FORMS,
) -> list[TheoremReport]:
    """Compare ``||Delta(Sigma_A + cI)||`` against ``||Delta(Sigma_A)||``.

    One report per (shift, Sigma convention, gap form); both assumption
    bands are evaluated and attached to every report.
    """
    gates = theorem2_assumptions(inst)
    reports = []
    for conv in sigma_conventions:
        mats = build(inst, conv)
        for form in gap_forms:
            _, base = gap_matrix(mats, 0.0, form)
            for preset in c_variants:
                c = shift_value(inst, preset) if isinstance(preset, str) else float(preset)
                _, shifted = gap_matrix(mats, c, form)
                reports.append(
                    TheoremReport(
                        "theorem2",
                        gates["statement"]["holds"] and gates["proof"]["holds"],
                        gates,
                        lhs=shifted,
                        rhs=base,
                        detail={"c": preset, "c_value": c, "sigma": conv, "gap_form": form},
                    )
                )
    return reports


# ---------------------------------------------------------------------------
# Random instances


def random_orthonormal(d: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if k == 0:
        return np.zeros((d, 0))
    Q, R = np.linalg.qr(rng.standard_normal((d, k)))
    return Q * np.sign(np.diag(R))


def random_instance(rng: np.random.Generator, d_max: int = 20, d_min: int = 2) -> CovInstance:
    """Unconstrained structured instance (no assumption gates)."""
    d = int(rng.integers(d_min, d_max + 1))
    k = int(rng.integers(1, d))
    beta = rng.uniform(0.2, 3.0)
    alpha = beta * rng.uniform(0.3, 3.0)
    gamma = rng.uniform(0.02, 0.98)
    nu = rng.uniform(0.05, 3.0, k) * beta
    return CovInstance(alpha, beta, gamma, random_orthonormal(d, k, rng), nu, rng.standard_normal(d))


def _band_nu(rng: np.random.Generator, lo: float, hi: float, k: int) -> np.ndarray:
    nu_max = rng.uniform(lo, hi)
    nu = rng.uniform(0.0, 1.0, k) * nu_max
    nu = np.maximum(nu, 1e-3 * nu_max)
    nu[rng.integers(k)] = nu_max
    return nu


def random_prop1_instance(rng: np.random.Generator, d_max: int = 50, d_min: int = 2) -> CovInstance:
    d = int(rng.integers(d_min, d_max + 1))
    k = int(rng.integers(1, d))
    beta = rng.uniform(0.1, 3.0)
    alpha = beta * rng.uniform(1.05, 4.0)
    gamma = rng.uniform(0.02, 0.98)
    ab = alpha - beta
    nu = _band_nu(rng, ab, 2 * ab, k)
    return CovInstance(alpha, beta, gamma, random_orthonormal(d, k, rng), nu, rng.standard_normal(d))


def random_theorem1_instance(rng: np.random.Generator, d_max: int = 20, max_tries: int = 10_000) -> CovInstance:
    """Random structured instance with ``||Delta(Sigma_A)|| <= 1/2``."""
    for _ in range(max_tries):
        inst = random_instance(rng, d_max)
        if gap_matrix(build(inst))[1] <= 0.5:
            return inst
    raise RuntimeError("could not draw an admissible instance")


def random_theorem2_instance(
    rng: np.random.Generator, band: str, d_max: int = 20, max_tries: int = 10_000
) -> CovInstance:
    """Random instance inside the chosen ``|nu|_inf`` band (``statement`` or ``proof``)."""
    for _ in range(max_tries):
        d = int(rng.integers(2, d_max + 1))
        k = int(rng.integers(1, d))
        beta = rng.uniform(0.1, 3.0)
        alpha = beta * rng.uniform(1.01, 4.0)
        gamma = rng.uniform(0.02, 0.98)
        ab = alpha - beta
        tau = (1 - gamma) * beta + gamma * alpha
        probe = CovInstance(alpha, beta, gamma, random_orthonormal(d, k, rng), np.full(k, ab), np.zeros(d))
        hi = theorem2_bands(probe)[band]
        if not hi > ab or not alpha >= (2 - gamma) / (3 - gamma) * beta or tau <= gamma * ab:
            continue
        inst = CovInstance(alpha, beta, gamma, probe.U, _band_nu(rng, ab, hi, k), rng.standard_normal(d))
        if theorem2_assumptions(inst)[band]["holds"]:
            return inst
    raise RuntimeError(f"could not draw an instance inside the {band} band")


# ---------------------------------------------------------------------------
# Sweeps


def prop1_sweep(trials: int, seed: int, d_max: int = 50) -> dict:
    rng = np.random.default_rng(seed)
    max_err, max_err_proof, failures = 0.0, 0.0, []
    for i in range(trials):
        inst = random_prop1_instance(rng, d_max)
        rep = verify_prop1(inst)
        max_err = max(max_err, rep.lhs)
        max_err_proof = max(max_err_proof, abs(rep.detail["numeric_norm_proof_sigma"] - rep.detail["closed_form"]))
        if not rep.satisfied:
            failures.append({"trial": i, "instance": inst.to_dict(), **rep.detail})
    return {
        "trials": trials,
        "satisfied": trials - len(failures),
        "max_abs_error": max_err,
        "proof_sigma_max_abs_error": max_err_proof,
        "counterexamples": failures,
    }


def theorem1_sweep(trials: int, seed: int, d_max: int = 20) -> dict:
    rng = np.random.default_rng(seed)
    min_slack, failures = np.inf, []
    for i in range(trials):
        inst = random_theorem1_instance(rng, d_max)
        rep = verify_theorem1(inst)
        min_slack = min(min_slack, rep.slack)
        if not rep.satisfied:
            failures.append({"trial": i, "instance": inst.to_dict(), "lhs": rep.lhs, "rhs": rep.rhs})
    return {"trials": trials, "satisfied": trials - len(failures), "min_slack": float(min_slack), "counterexamples": failures}


def theorem2_sweep(trials: int, seed: int, d_max: int = 20, max_counterexamples: int = 5) -> dict:
    """Satisfaction table over every (shift, band, Sigma convention, gap form).

    ``trials`` instances are drawn inside each band. The report lists the
    combinations that held on every instance of their band.
    """
    rng = np.random.default_rng(seed)
    table = {}
    for band in ("statement", "proof"):
        for conv, form, preset in itertools.product(SIGMA_CONVENTIONS, GAP_FORMS, SHIFT_PRESETS):
            table[(preset, band, conv, form)] = {"satisfied": 0, "trials": 0, "min_slack": np.inf, "counterexamples": []}
        for i in range(trials):
            inst = random_theorem2_instance(rng, band, d_max)
            for rep in verify_theorem2(inst):
                key = (rep.detail["c"], band, rep.detail["sigma"], rep.detail["gap_form"])
                row = table[key]
                row["trials"] += 1
                row["satisfied"] += rep.satisfied
                row["min_slack"] = min(row["min_slack"], rep.slack)
                if not rep.satisfied and len(row["counterexamples"]) < max_counterexamples:
                    row["counterexamples"].append({"trial": i, "instance": inst.to_dict(), "lhs": rep.lhs, "rhs": rep.rhs})
    rows = []
    for (preset, band, conv, form), row in table.items():
        rows.append(
            {
                "c": preset,
                "band": band,
                "sigma": conv,
                "gap_form": form,
                "satisfied": row["satisfied"],
                "trials": row["trials"],
                "rate": row["satisfied"] / row["trials"] if row["trials"] else float("nan"),
                "min_slack": float(row["min_slack"]),
                "counterexamples": row["counterexamples"],
            }
        )
    full = [{k: r[k] for k in ("c", "band", "sigma", "gap_form")} for r in rows if r["trials"] and r["satisfied"] == r["trials"]]
    return {"trials_per_band": trials, "table": rows, "fully_satisfied": full}


def noisy_ols_check(n: int = 100_000, seed: int = 0) -> dict:
    d = 3
    target = np.eye(d)[0]
    w_hat = monte_carlo_noisy_ols(np.eye(d), target, 1.0, n, seed)
    closed = np.linalg.solve(np.eye(d) + np.eye(d), target)
    return {"n": n, "estimate": w_hat.tolist(), "closed_form": closed.tolist(), "max_abs_error": float(np.max(np.abs(w_hat - closed)))}


def verify_theory(trials: int = 1000, seed: int = 0, dim: int = 20, prop1_trials: int | None = None) -> dict:
    """Full theory report as emitted by the ``verify-theory`` command."""
    prop1_trials = trials * 10 if prop1_trials is None else prop1_trials
    return {
        "schema_version": 1,
        "seed": seed,
        "dim": dim,
        "prop1": prop1_sweep(prop1_trials, seed, d_max=max(dim, 2)),
        "theorem1": theorem1_sweep(trials, seed + 1, d_max=max(dim, 2)),
        "theorem2": theorem2_sweep(trials, seed + 2, d_max=max(dim, 2)),
        "noisy_ols": noisy_ols_check(seed=seed + 3),
    }
