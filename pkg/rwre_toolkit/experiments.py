"""
Experiment registry used by the command line.

Every experiment takes a validated ExperimentConfig and the built model, runs
over each environment seed and returns a JSON-serializable dict:
    - success (bool): False when an operation raised
    - passed (bool): True iff every enabled assertion held
    - report (dict): per-seed results
    - table (str): CSV body for table.csv
    - artifacts (dict): optional extra files, relative name -> text
    - error (str): error message when success is False
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np

from config import ExperimentConfig, get_config
from rwre_toolkit.errors import RWREError
from rwre_toolkit.models import EnvironmentKind, EnvironmentModel, PathEnsemble
from rwre_toolkit.tools import conditioned, harmonic, limits
from rwre_toolkit.tools.environment import (
    letter_frequencies,
    realize,
    transition_frequencies,
    validate_assumptions,
)
from rwre_toolkit.tools.walk import survival_probability_exact
from services.rng import RandomStream
from services.serialization import (
    ensemble_summary,
    ensemble_to_csv,
    model_hash,
    path_to_csv,
    ratio_report_to_csv,
    report_to_json,
    string_to_utable,
    table_to_csv,
    utable_to_string,
)

logger = logging.getLogger(__name__)

FREQUENCY_LETTERS = 100_000
# sample paths written to each ensemble CSV
ARTIFACT_PATHS = 1000


@dataclass(frozen=True)
class ExperimentInfo:
    kind: str
    claim: str
    parameters: Tuple[str, ...]
    run: Callable[[ExperimentConfig, EnvironmentModel], Dict[str, Any]]


def _stream(cfg: ExperimentConfig, kind: str, seed: int) -> RandomStream:
    return RandomStream.named(cfg.master_seed, kind).substream(f"environment-seed={seed}")


def _path_keys(positions: np.ndarray) -> List[tuple]:
    return [tuple(row) for row in np.round(positions[:, 1:], 9)]


def chi_square_against_law(keys: Sequence[tuple], law: Dict[tuple, float], target: str):
    """Chi-square of sampled path keys against an exact path law; sparse cells are pooled."""
    counts = Counter(keys)
    n = len(keys)
    exact = {tuple(np.round(k, 9)): p for k, p in law.items()}
    observed, expected = [], []
    pooled_obs, pooled_exp = 0.0, 0.0
    for key in sorted(exact):
        e = exact[key] * n
        if e >= 5.0:
            observed.append(counts.pop(key, 0))
            expected.append(e)
        else:
            pooled_obs += counts.pop(key, 0)
            pooled_exp += e
    pooled_obs += sum(counts.values())
    if pooled_exp >= 5.0:
        observed.append(pooled_obs)
        expected.append(pooled_exp)
    elif observed:
        observed[-1] += pooled_obs
        expected[-1] += pooled_exp
    return limits.chi_square_test(observed, expected, target=target)


FREQUENCY_BATCHES = 100


def frequency_std_error(env, count: int) -> np.ndarray:
    """Batch-means standard error of each letter frequency (valid for correlated letters)."""
    letters = env.letters(1, count)
    size = len(env.model.alphabet)
    batches = letters[:count - count % FREQUENCY_BATCHES].reshape(FREQUENCY_BATCHES, -1)
    means = np.stack([(batches == a).mean(axis=1) for a in range(size)], axis=1)
    return means.std(axis=0, ddof=1) / math.sqrt(FREQUENCY_BATCHES)


def _ensemble_artifacts(name: str, ensemble: PathEnsemble, cfg: ExperimentConfig, seed: int) -> Dict[str, str]:
    """CSV of the first ARTIFACT_PATHS paths and a JSON summary of the whole ensemble."""
    seeds = {"master_seed": cfg.master_seed, "environment_seed": seed}
    head = replace(ensemble, positions=ensemble.positions[:ARTIFACT_PATHS])
    return {
        f"seed-{seed}/{name}.csv": ensemble_to_csv(head),
        f"seed-{seed}/{name}.json": report_to_json(ensemble_summary(ensemble, seeds)),
    }


def _failure(e: Exception) -> Dict[str, Any]:
    logger.error(f"Experiment failed: {e}")
    return {"success": False, "passed": False, "report": {}, "table": "", "error": str(e)}


# ----- validate-env -----

def run_validate_env(cfg: ExperimentConfig, model: EnvironmentModel) -> Dict[str, Any]:
    """Assumption report plus empirical letter frequencies per environment seed."""
    assumptions = validate_assumptions(model)
    stationary = np.asarray(model.stationary)
    rows = [("assumption", c.name, c.passed, c.detail) for c in assumptions.checks]
    per_seed = {}
    passed = assumptions.passed
    for seed in cfg.environment_seeds:
        env = realize(model, seed)
        freq = letter_frequencies(env, FREQUENCY_LETTERS)
        if model.kind == EnvironmentKind.periodic:
            ok = bool(np.allclose(freq, stationary, atol=len(model.order) / FREQUENCY_LETTERS))
        else:
            se = frequency_std_error(env, FREQUENCY_LETTERS)
            ok = bool(np.all(np.abs(freq - stationary) <= 4.0 * se + 1e-12))
        seed_report: Dict[str, Any] = {"frequencies": freq.tolist(), "passed": ok}
        if model.kind == EnvironmentKind.markov:
            seed_report["transitions"] = transition_frequencies(env, FREQUENCY_LETTERS).tolist()
        per_seed[str(seed)] = seed_report
        rows.append(("frequency", f"seed={seed}", ok, " ".join(f"{f:.6f}" for f in freq)))
        passed = passed and ok
    report = {"assumptions": assumptions, "sigma2": model.sigma2, "lattice_unit": model.lattice_unit,
              "stationary": list(model.stationary), "seeds": per_seed}
    return {"success": True, "passed": passed, "report": report,
            "table": table_to_csv(["section", "name", "passed", "detail"], rows), "error": None}


# ----- harmonic -----

def run_harmonic(cfg: ExperimentConfig, model: EnvironmentModel) -> Dict[str, Any]:
    """Recursion, limit identity, martingale, slope, convergence profile and DP vs MC."""
    params = cfg.parameters.harmonic
    settings = get_config()
    k = settings.statistics.se_multiplier
    rows, per_seed, passed = [], {}, True
    for seed in cfg.environment_seeds:
        env = realize(model, seed)
        stream = _stream(cfg, "harmonic", seed)
        recursion = {
            f"{y!r}": max(harmonic.harmonic_recursion_check(env, y, n)
                          for n in range(1, params.recursion_n_max + 1))
            for y in params.y_values
        }
        recursion_ok = all(r < 1e-10 for r in recursion.values())

        provider = harmonic.dp_provider(params.horizon)
        estimates, comparisons, limit_checks = {}, {}, {}
        for y in params.y_values:
            dp = provider(env, y)
            mc = harmonic.estimate_U_stopping(env, y, params.mc_samples, params.mc_n_max,
                                              stream.substream(f"mc/y={y!r}"))
            agree = abs(mc.value - dp.value) <= k * mc.std_error + dp.truncation + 1e-12
            lower = (dp.value + dp.truncation >= y - 1e-12) and (mc.value + k * mc.std_error >= y)
            estimates[f"{y!r}"] = {"dp": dp, "mc": mc}
            comparisons[f"{y!r}"] = agree and lower
            limit_checks[f"{y!r}"] = harmonic.harmonic_limit_check(env, y, provider)
            rows.append((seed, y, dp.value, dp.truncation, mc.value, mc.std_error, mc.censored))

        martingale_ns = sorted({0, 1, params.martingale_N // 4, params.martingale_N // 2, params.martingale_N})
        martingale = harmonic.martingale_check(env, params.y_values[0], params.martingale_N, martingale_ns)
        slope = harmonic.slope_profile(env, params.slope_y_list, params.horizon)
        profile = harmonic.convergence_profile(env, params.y_values[0], params.profile_n_list)

        seed_passed = (recursion_ok and all(comparisons.values())
                       and all(c.passed for c in limit_checks.values())
                       and martingale.passed and slope.passed and profile.monotone)
        per_seed[str(seed)] = {
            "recursion_max_residual": recursion,
            "estimates": estimates,
            "dp_mc_agree": comparisons,
            "limit_checks": limit_checks,
            "martingale": martingale,
            "slope": slope,
            "profile": profile,
            "passed": seed_passed,
        }
        passed = passed and seed_passed
    table = table_to_csv(["seed", "y", "U_dp", "truncation", "U_mc", "std_error", "censored"], rows)
    return {"success": True, "passed": passed, "report": {"seeds": per_seed}, "table": table, "error": None}


# ----- survival -----

def run_survival(cfg: ExperimentConfig, model: EnvironmentModel) -> Dict[str, Any]:
    """Survival asymptotics, the finite-n lemma bound and the shifted slope."""
    params = cfg.parameters.survival
    rows, per_seed, passed = [], {}, True
    artifacts: Dict[str, str] = {}
    for seed in cfg.environment_seeds:
        env = realize(model, seed)
        ratios = limits.survival_asymptotics_report(env, params.y, params.n_list, params.horizon)
        artifacts[f"seed-{seed}/ratios.csv"] = ratio_report_to_csv(ratios)
        lemma = limits.lemma_bound_check(env, params.y, params.lemma_n_list)
        slope = limits.slope_shift_test(env, params.slope_n_list, horizon=params.horizon)
        seed_passed = ratios.passed and lemma.passed and slope.passed
        per_seed[str(seed)] = {"asymptotics": ratios, "lemma_bound": lemma, "slope_shift": slope,
                               "passed": seed_passed}
        rows.extend((seed, r.n, r.exact, r.predicted, r.ratio) for r in ratios.rows)
        passed = passed and seed_passed
    table = table_to_csv(["seed", "n", "exact", "predicted", "ratio"], rows)
    return {"success": True, "passed": passed, "report": {"seeds": per_seed}, "table": table, "error": None,
            "artifacts": artifacts}


# ----- meander-clt -----

def run_meander_clt(cfg: ExperimentConfig, model: EnvironmentModel) -> Dict[str, Any]:
    """Rayleigh limit, test power, exact path law and rejection vs DP samplers."""
    params = cfg.parameters.meander_clt
    settings = get_config().statistics
    rows, per_seed, passed = [], {}, True
    artifacts: Dict[str, str] = {}
    for seed in cfg.environment_seeds:
        env = realize(model, seed)
        stream = _stream(cfg, "meander-clt", seed)
        clt = limits.rayleigh_clt_test(env, params.N, params.n_samples, stream.substream("clt"))
        power = limits.rayleigh_clt_test(env, params.power_N, params.n_samples, stream.substream("power"))

        exact_paths = conditioned.meander_ensemble_dp(env, params.exact_N, params.exact_samples,
                                                      stream.substream("exact"))
        exact = chi_square_against_law(_path_keys(exact_paths.positions),
                                       conditioned.meander_path_law(env, params.exact_N),
                                       target=f"meander-paths(N={params.exact_N})")

        rejected = conditioned.meander_rejection_ensemble(env, params.rejection_N, params.rejection_samples,
                                                          stream.substream("rejection"))
        dp_paths = conditioned.meander_ensemble_dp(env, params.rejection_N, params.rejection_samples,
                                                   stream.substream("dp"))
        agreement = limits.two_sample_chi_square(rejected.endpoints(), dp_paths.endpoints(),
                                                 target=f"meander-endpoints(N={params.rejection_N})")
        survival = survival_probability_exact(env, 0.0, params.rejection_N)
        rate = rejected.n_samples / rejected.proposals
        rate_se = math.sqrt(survival * (1.0 - survival) / rejected.proposals)
        rate_ok = abs(rate - survival) <= settings.se_multiplier * rate_se + 1e-12
        example = conditioned.meander_sample_rejection(env, params.rejection_N, stream.substream("example"))
        artifacts.update(_ensemble_artifacts("exact_paths", exact_paths, cfg, seed))
        artifacts.update(_ensemble_artifacts("rejection_paths", rejected, cfg, seed))
        artifacts.update(_ensemble_artifacts("dp_paths", dp_paths, cfg, seed))
        artifacts[f"seed-{seed}/example_path.csv"] = path_to_csv(example.path)

        seed_passed = (clt.p_value > settings.p_threshold and power.p_value < settings.p_threshold
                       and exact.p_value > settings.exact_p_threshold
                       and agreement.p_value > settings.exact_p_threshold and rate_ok)
        per_seed[str(seed)] = {
            "rayleigh": clt,
            "power": power,
            "exact_paths": exact,
            "rejection_vs_dp": agreement,
            "acceptance_rate": {"observed": rate, "exact": survival, "std_error": rate_se, "passed": rate_ok},
            "passed": seed_passed,
        }
        for name, r in (("rayleigh", clt), ("power", power), ("exact_paths", exact), ("rejection_vs_dp", agreement)):
            rows.append((seed, name, r.test.value, r.statistic, r.p_value, r.n_samples))
        passed = passed and seed_passed
    table = table_to_csv(["seed", "check", "test", "statistic", "p_value", "n_samples"], rows)
    return {"success": True, "passed": passed, "report": {"seeds": per_seed}, "table": table, "error": None,
            "artifacts": artifacts}


# ----- conditioned-qip -----

def run_conditioned_qip(cfg: ExperimentConfig, model: EnvironmentModel) -> Dict[str, Any]:
    """Bessel-3 marginals, exact h-transform path law, prefix stability and the Brownian oracle."""
    params = cfg.parameters.conditioned_qip
    settings = get_config().statistics
    rows, per_seed, passed = [], {}, True
    artifacts: Dict[str, str] = {}

    oracle = {}
    oracle_stream = RandomStream.named(cfg.master_seed, "brownian-oracle")
    for x in params.x_values:
        oracle[f"{x!r}"] = limits.brownian_rejection_oracle(x, params.t, params.oracle_samples,
                                                            oracle_stream.substream(f"x={x!r}"))
    oracle_ok = all(o.passed for o in oracle.values())
    passed = oracle_ok

    for seed in cfg.environment_seeds:
        env = realize(model, seed)
        stream = _stream(cfg, "conditioned-qip", seed)
        marginals = {}
        for x in params.x_values:
            report = limits.bessel_marginal_test(env, x, params.N, params.n_samples, stream.substream(f"x={x!r}"),
                                                 t=params.t, horizon=params.horizon)
            marginals[f"{x!r}"] = report
            rows.append((seed, x, params.t, report.statistic, report.p_value, report.n_samples))

        unit = model.lattice_unit
        z_max = harmonic.reachable_z_max(env, unit, params.exact_N)
        utable_text = utable_to_string(harmonic.build_utable(env, params.exact_N, z_max, params.horizon))
        # sample from the table as written to disk
        utable = string_to_utable(utable_text)
        artifacts[f"seed-{seed}/utable.txt"] = utable_text
        paths = conditioned.conditioned_ensemble(env, unit, params.exact_N, utable, params.exact_samples,
                                                 stream.substream("exact"))
        exact = chi_square_against_law(_path_keys(paths.positions),
                                       conditioned.conditioned_path_law(env, unit, params.exact_N, utable),
                                       target=f"h-transform-paths(N={params.exact_N})")
        artifacts.update(_ensemble_artifacts("h_transform_paths", paths, cfg, seed))
        prefix = conditioned.prefix_stability_check(env, params.prefix_N, params.prefix_length,
                                                    params.prefix_samples, stream.substream("prefix"),
                                                    horizon=params.horizon, tolerance=params.prefix_tolerance)
        seed_passed = (all(r.p_value > settings.p_threshold for r in marginals.values())
                       and exact.p_value > settings.exact_p_threshold and prefix.passed)
        per_seed[str(seed)] = {"bessel": marginals, "exact_paths": exact, "prefix_stability": prefix,
                               "passed": seed_passed}
        passed = passed and seed_passed
    table = table_to_csv(["seed", "x", "t", "statistic", "p_value", "n_samples"], rows)
    report = {"seeds": per_seed, "brownian_oracle": oracle}
    return {"success": True, "passed": passed, "report": report, "table": table, "error": None,
            "artifacts": artifacts}


# ----- fkg -----

def run_fkg(cfg: ExperimentConfig, model: EnvironmentModel) -> Dict[str, Any]:
    """Exact FKG slack over the full reachable grid for every (y, n)."""
    params = cfg.parameters.fkg
    rows, per_seed, passed = [], {}, True
    for seed in cfg.environment_seeds:
        env = realize(model, seed)
        worst = None
        for y in params.y_values:
            for n in range(1, params.n_max + 1):
                check = limits.fkg_check(env, y, n)
                rows.append((seed, y, n, check.worst_slack, check.worst_x))
                if worst is None or check.worst_slack < worst.worst_slack:
                    worst = check
        seed_passed = worst is None or worst.passed
        per_seed[str(seed)] = {"worst": worst, "passed": seed_passed}
        passed = passed and seed_passed
    table = table_to_csv(["seed", "y", "n", "worst_slack", "worst_x"], rows)
    return {"success": True, "passed": passed, "report": {"seeds": per_seed}, "table": table, "error": None}


EXPERIMENTS: Dict[str, ExperimentInfo] = {
    "validate-env": ExperimentInfo(
        "validate-env",
        "The environment is stationary and ergodic and every step law is centered with a positive atom.",
        ("environment_seeds",),
        run_validate_env,
    ),
    "harmonic": ExperimentInfo(
        "harmonic",
        "U(xi, y) exists as the limit of U_n, is harmonic, gives a martingale and grows like y.",
        ("y_values", "recursion_n_max", "horizon", "mc_samples", "mc_n_max", "martingale_N",
         "slope_y_list", "profile_n_list"),
        run_harmonic,
    ),
    "survival": ExperimentInfo(
        "survival",
        "P(tau_y > n) ~ sqrt(2) U(xi, y) / (sqrt(pi n) sigma), with the finite-n bound and shifted slope.",
        ("y", "n_list", "horizon", "lemma_n_list", "slope_n_list"),
        run_survival,
    ),
    "meander-clt": ExperimentInfo(
        "meander-clt",
        "The walk conditioned on tau_0 > N, rescaled at time N, converges to the Rayleigh law.",
        ("N", "n_samples", "power_N", "exact_N", "exact_samples", "rejection_N", "rejection_samples"),
        run_meander_clt,
    ),
    "conditioned-qip": ExperimentInfo(
        "conditioned-qip",
        "The h-transformed walk from x sqrt(N) sigma converges to the Bessel-3 process from x.",
        ("x_values", "N", "t", "n_samples", "horizon", "exact_N", "exact_samples", "oracle_samples",
         "prefix_N", "prefix_length", "prefix_samples", "prefix_tolerance"),
        run_conditioned_qip,
    ),
    "fkg": ExperimentInfo(
        "fkg",
        "P(S_n > x, tau_y > n) >= P(S_n > x) P(tau_y > n) for every x.",
        ("y_values", "n_max"),
        run_fkg,
    ),
}


def list_experiments() -> List[Dict[str, Any]]:
    """Kind, checked claim and parameter names of every experiment."""
    return [{"kind": e.kind, "claim": e.claim, "parameters": list(e.parameters)} for e in EXPERIMENTS.values()]


def run_experiment(kind: str, cfg: ExperimentConfig, model: EnvironmentModel) -> Dict[str, Any]:
    """
    Run one experiment kind; toolkit errors come back as a failed result dict.

    Returns:
        Dict[str, Any]: success, passed, report, table, error
    """
    if kind not in EXPERIMENTS:
        return {"success": False, "passed": False, "report": {}, "table": "",
                "error": f"unknown experiment kind: {kind}"}
    logger.info(f"Running {kind} on model {model_hash(model)} with seeds {cfg.environment_seeds}")
    try:
        result = EXPERIMENTS[kind].run(cfg, model)
    except (RWREError, ValueError) as e:
        return _failure(e)
    level = logging.INFO if result["passed"] else logging.WARNING
    logger.log(level, f"Experiment {kind} {'passed' if result['passed'] else 'FAILED'}")
    return result
