"""
End-to-end experiment orchestration.

ExperimentRunner loads or generates an MDP, propagates exact moments, runs
the Monte Carlo ensemble, evaluates every bound at the probe steps, solves the
Stein certificate and reproduces the off-policy divergence example. Each stage
records named checks; hard checks are deterministic invariants and decide the
exit status, soft checks are statistical and only reported.
"""

import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from bound_suite import (
    comparison_step_limit,
    evaluate_bounds,
    mse_bound,
    schedule_bound,
    td_noise_variance,
    trace_bound,
    x_norm_bound,
)
from config_manager import STAGES, ConfigManager, DivergenceConfig, ExperimentConfig, RandomMdpSpec
from divergence_demo import OffPolicySpec, forced_sequence, on_policy_contrast, sampled_demo, threshold_table
from linear_model import build_system, fixed_point_residual, infinity_norm_certificate, matrix_power_norms
from lyapunov import certificate_checks, lyapunov_decrement_check, stein_solve
from mdp_core import (
    AssumptionError,
    ChainNotErgodicError,
    Policy,
    TabularMdp,
    induce_chain,
    load_mdp_document,
)
from moment_engine import MomentState, moments_frame, noise_covariance, propagate_correlation, trace
from simulator import EnsembleStats, RunConfig, run_td, sample_td_noise_variance

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SE_WINDOW = 3.0
BOUND_TOL = 1e-12
REPLAY_TOL = 1e-9
DIVERGENCE_THRESHOLD = 0.1
SIGMA_SAMPLES = 100_000


@dataclass
class Check:
    name: str
    hard: bool
    passed: bool
    detail: str = ""


def generate_random_mdp(spec: RandomMdpSpec) -> Tuple[TabularMdp, Policy]:
    """
    Dirichlet transition rows and policy rows, uniform rewards in
    [-reward_scale, reward_scale]. Instances whose chain fails validation
    are redrawn from the same stream up to spec.max_attempts times.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
    n, m = spec.n_states, spec.n_actions
    last_error = None
    for attempt in range(1, spec.max_attempts + 1):
        transition = rng.dirichlet(np.full(n, spec.concentration), size=(n, m))
        reward = rng.uniform(-spec.reward_scale, spec.reward_scale, size=(n, m, n))
        probs = rng.dirichlet(np.ones(m), size=n)
        try:
            mdp = TabularMdp(n_states=n, n_actions=m, transition=transition, reward=reward, gamma=spec.gamma)
            policy = Policy(probs)
            induce_chain(mdp, policy)
        except (ChainNotErgodicError, ValueError) as e:
            last_error = e
            logger.debug(f"Random MDP attempt {attempt} rejected: {str(e)}")
            continue
        logger.info(f"Generated random MDP (seed={spec.seed}, |S|={n}, |A|={m}) after {attempt} attempt(s)")
        return mdp, policy
    raise ChainNotErgodicError(
        f"no valid MDP after {spec.max_attempts} attempts (seed={spec.seed}, |S|={n}, |A|={m}, "
        f"concentration={spec.concentration}); last error: {last_error}")


def _within(empirical: np.ndarray, exact: np.ndarray, se: np.ndarray, window: float = SE_WINDOW) -> bool:
    return bool(np.all(np.abs(np.asarray(empirical) - np.asarray(exact)) <= window * np.asarray(se) + BOUND_TOL))


def _binomial_slack(p: float, n: int) -> float:
    p = min(max(p, 0.0), 1.0)
    return SE_WINDOW * math.sqrt(p * (1.0 - p) / n)


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig):
        self.config = config
        if config.mdp_file is not None:
            self.mdp, self.policy = load_mdp_document(config.mdp_file)
        else:
            self.mdp, self.policy = generate_random_mdp(config.random_mdp)
        self.chain = induce_chain(self.mdp, self.policy)
        self.model = build_system(self.chain, config.alpha)
        self.v0 = config.initial_value(self.chain.n_states)
        if np.max(np.abs(self.v0)) > 1.0:
            raise AssumptionError(f"initial iterate must satisfy |V_0|_inf <= 1, got {np.max(np.abs(self.v0))}")
        self.x0 = self.model.to_error(self.v0)
        self.checks: List[Check] = []
        self.stages_run: List[str] = []
        self._states: Optional[List[MomentState]] = None
        self.ensemble: Optional[EnsembleStats] = None
        self.frames: Dict[str, pd.DataFrame] = {}
        self.documents: Dict[str, Dict] = {}

    def check(self, name: str, hard: bool, passed: bool, detail: str = "") -> bool:
        self.checks.append(Check(name=name, hard=hard, passed=bool(passed), detail=detail))
        if not passed:
            log = logger.error if hard else logger.warning
            log(f"Check {name} failed{': ' + detail if detail else ''}")
        return passed

    @property
    def states(self) -> List[MomentState]:
        if self._states is None:
            self._states = propagate_correlation(self.chain, self.model, MomentState.initial(self.x0),
                                                 self.config.horizon)
        return self._states

    def run_exact(self) -> None:
        model, chain, x0 = self.model, self.chain, self.x0
        logger.info(f"Exact engine: n={chain.n_states}, alpha={model.alpha}, rho={model.rho:.12g}, "
                    f"horizon={self.config.horizon}")

        norm, rho = infinity_norm_certificate(model)
        self.check("a_inf_norm_equals_rho", True, abs(norm - rho) <= BOUND_TOL, f"|A|_inf={norm!r}, rho={rho!r}")
        self.check("a_nonnegative", True, bool(np.all(model.a_matrix >= 0)))
        self.check("fixed_point_residual", True, fixed_point_residual(model) <= 1e-10,
                   f"{fixed_point_residual(model):.3g}")
        power_norms = matrix_power_norms(model, self.config.horizon)
        self.check("power_norms_submultiplicative", True,
                   bool(np.all(power_norms <= rho ** np.arange(power_norms.size) + 1e-12)))

        states = self.states
        x0_inf = float(np.max(np.abs(x0)))
        w_max = model.w_max
        x_bound = x_norm_bound(model, x0)
        mean_violations, trace_violations, mse_violations, w_violations, x_violations = 0, 0, 0, 0, 0
        frame = moments_frame(chain, model, states)
        for state, row in zip(states, frame.itertuples(index=False)):
            k = state.k
            if row.mean_inf > model.rho ** k * x0_inf * (1.0 + 1e-12) + BOUND_TOL:
                mean_violations += 1
            tr = trace(state)
            bound = trace_bound(model, x0, k)
            if tr > bound:
                trace_violations += 1
            l2_bound = mse_bound(model, x0, k)[0]
            if math.sqrt(max(tr, 0.0)) > l2_bound:
                mse_violations += 1
            if row.trace_w > w_max:
                w_violations += 1
            if row.x_norm_2 > x_bound:
                x_violations += 1
        self.check("mean_bound_dominates", True, mean_violations == 0, f"{mean_violations} violations")
        self.check("trace_bound_dominates", True, trace_violations == 0, f"{trace_violations} violations")
        self.check("mse_bound_dominates_exact", True, mse_violations == 0, f"{mse_violations} violations")
        self.check("noise_second_moment_below_w_max", True, w_violations == 0, f"{w_violations} violations")
        self.check("x_norm_bound_dominates", True, x_violations == 0, f"{x_violations} violations")
        self.frames["moments"] = frame
        self.documents["model"] = model.to_dict()

    def run_mc(self) -> None:
        config = self.config
        if config.n_runs == 0:
            logger.info("n_runs = 0; skipping the Monte Carlo ensemble")
            return
        run_config = RunConfig(alpha=config.alpha, horizon=config.horizon, n_runs=config.n_runs, seed=config.seed,
                               v0=self.v0, record_ks=config.record_ks, epsilons=config.epsilons,
                               block_size=config.block_size, n_workers=config.n_workers, progress=config.progress)
        self.ensemble = run_td(self.mdp, self.policy, self.chain, run_config)
        self.check("iterates_bounded", True, self.ensemble.max_sup_norm <= self.ensemble.sup_bound,
                   f"max |V|_inf = {self.ensemble.max_sup_norm!r}, bound = {self.ensemble.sup_bound!r}")

        for k, probe in self.ensemble.probes.items():
            state = self.states[k]
            w_k = noise_covariance(self.chain, self.model, state).w_matrix
            self.check(f"mc_mean_matches_exact@{k}", False, _within(probe.emp_mean, state.mean, probe.emp_mean_se))
            self.check(f"mc_mse_matches_exact@{k}", False, _within(probe.emp_mse, trace(state), probe.emp_mse_se),
                       f"emp={probe.emp_mse:.6g} +- {probe.emp_mse_se:.3g}, exact={trace(state):.6g}")
            self.check(f"mc_noise_cov_matches_exact@{k}", False,
                       _within(probe.emp_noise_cov, w_k, probe.emp_noise_cov_se))
            self.check(f"mc_cross_term_vanishes@{k}", False, _within(probe.emp_cross, 0.0, probe.emp_cross_se))

        sigma2 = td_noise_variance(self.chain)
        est, se = sample_td_noise_variance(self.mdp, self.policy, self.chain, SIGMA_SAMPLES, config.seed)
        self.check("sigma2_matches_sampled", False, abs(est - sigma2) <= SE_WINDOW * se + BOUND_TOL,
                   f"exact={sigma2:.6g}, sampled={est:.6g} +- {se:.3g}")
        self.documents["sigma2"] = {"exact": sigma2, "sampled": est, "sampled_se": se}

        self._run_schedule_checks()

    def _run_schedule_checks(self) -> None:
        config = self.config
        rows = []
        for horizon in config.schedule_horizons:
            alpha, bound = schedule_bound(self.chain, self.x0, horizon)
            run_config = RunConfig(alpha=alpha, horizon=horizon, n_runs=config.schedule_runs, seed=config.seed,
                                   v0=self.v0, record_ks=[horizon], block_size=config.block_size,
                                   n_workers=config.n_workers, progress=config.progress)
            stats = run_td(self.mdp, self.policy, self.chain, run_config)
            probe = stats.probes[horizon]
            self.check(f"schedule_iterates_bounded@{horizon}", True, stats.max_sup_norm <= stats.sup_bound)
            self.check(f"schedule_bound_dominates@{horizon}", False, probe.emp_avg_iterate_err <= bound,
                       f"emp={probe.emp_avg_iterate_err:.6g}, bound={bound:.6g}")
            rows.append({"T": horizon, "alpha": alpha, "emp_avg_err": probe.emp_avg_iterate_err,
                         "emp_avg_err_se": probe.emp_avg_iterate_err_se, "bound": bound})
        if rows:
            self.frames["schedule"] = pd.DataFrame(rows)

    def run_bounds(self) -> None:
        rows = []
        constants = {}
        for k in self.config.record_ks:
            state = self.states[k]
            report = evaluate_bounds(self.chain, self.model, self.x0, k, self.config.epsilons, state=state,
                                     schedule_horizons=self.config.schedule_horizons)
            row = report.as_row()
            bounds = report.bounds
            tr = trace(state)
            row["trace_x"] = tr
            row["viol_trace"] = tr > bounds["trace"]
            row["viol_mse_l2"] = math.sqrt(max(tr, 0.0)) > bounds["mse_l2"]
            self.check(f"exact_within_trace_bound@{k}", True, not row["viol_trace"])
            self.check(f"exact_within_mse_bound@{k}", True, not row["viol_mse_l2"])

            probe = self.ensemble.probes.get(k) if self.ensemble is not None else None
            if probe is not None:
                self._empirical_columns(row, report, probe)
            rows.append(row)
            constants = report.constants
        self.frames["bounds"] = pd.DataFrame(rows)
        self.documents["constants"] = {
            **constants,
            "comparison_step_limit": comparison_step_limit(self.chain),
        }

    def _empirical_columns(self, row: Dict, report, probe) -> None:
        k = report.k
        bounds = report.bounds
        row["emp_mse"] = probe.emp_mse
        row["emp_mse_se"] = probe.emp_mse_se
        row["emp_err"] = probe.emp_err
        row["emp_err_se"] = probe.emp_err_se
        row["viol_emp_mse_l2"] = probe.emp_err > bounds["mse_l2"]
        self.check(f"empirical_within_mse_bound@{k}", False, not row["viol_emp_mse_l2"])
        if k >= 1:
            row["emp_avg_err"] = probe.emp_avg_iterate_err
            row["emp_avg_err_se"] = probe.emp_avg_iterate_err_se
            row["viol_avg_l2"] = probe.emp_avg_iterate_err > bounds["avg_l2"]
            self.check(f"empirical_within_averaged_bound@{k}", False, not row["viol_avg_l2"])
            if "comparison_avg" in bounds:
                row["viol_comparison_avg"] = probe.emp_avg_iterate_err > bounds["comparison_avg"]
                self.check(f"empirical_within_comparison_bound@{k}", False, not row["viol_comparison_avg"])

        n = probe.n_runs
        for eps in self.config.epsilons:
            key = f"{eps:g}"
            floor = bounds[f"chebyshev_floor@{key}"]
            coverage = probe.threshold_coverage[eps]
            row[f"emp_chebyshev_coverage@{key}"] = coverage
            if floor > 0:
                ok = coverage >= floor - _binomial_slack(floor, n)
                row[f"viol_chebyshev@{key}"] = not ok
                self.check(f"chebyshev_coverage@{k},{key}", False, ok, f"coverage={coverage:.6g}, floor={floor:.6g}")
            markov = bounds[f"markov_floor@{key}"]
            plain = probe.plain_coverage[eps]
            row[f"emp_plain_coverage@{key}"] = plain
            if markov > 0:
                ok = plain >= markov - _binomial_slack(markov, n)
                row[f"viol_markov@{key}"] = not ok
                self.check(f"markov_coverage@{k},{key}", False, ok, f"coverage={plain:.6g}, floor={markov:.6g}")
            if k >= 1:
                avg_floor = bounds[f"avg_markov_floor@{key}"]
                avg_plain = probe.avg_plain_coverage[eps]
                row[f"emp_avg_plain_coverage@{key}"] = avg_plain
                if avg_floor > 0:
                    ok = avg_plain >= avg_floor - _binomial_slack(avg_floor, n)
                    row[f"viol_avg_markov@{key}"] = not ok
                    self.check(f"averaged_markov_coverage@{k},{key}", False, ok)

    def run_stein(self) -> None:
        cert = stein_solve(self.model)
        for name, passed in certificate_checks(cert).items():
            self.check(f"stein_{name}", True, passed)
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((self.config.seed, 2 ** 32 + 1))))
        decrement = lyapunov_decrement_check(self.model, cert, self.config.stein_trials, rng)
        self.check("stein_decrement_identity", True, decrement.passed, f"max violation {decrement.max_violation:.3g}")
        document = cert.to_dict()
        document["checks"] = certificate_checks(cert)
        document["decrement"] = asdict(decrement)
        self.documents["stein"] = document

    def run_divergence(self) -> None:
        div = self.config.divergence or DivergenceConfig()
        spec = OffPolicySpec(epsilon=div.epsilon)
        seed = self.config.seed

        forced = {}
        for n in div.streak_lengths:
            values, prob = forced_sequence(spec, n)
            forced[str(n)] = {"values": values, "probability": prob}

        demo = sampled_demo(spec, div.n_runs, div.horizon, seed, streak_lengths=div.streak_lengths)
        self.check("off_policy_replay_matches", True, demo.replay_gap <= REPLAY_TOL, f"gap {demo.replay_gap:.3g}")
        for n in div.streak_lengths:
            ok = abs(demo.streak_freqs[n] - demo.streak_expected[n]) <= SE_WINDOW * demo.streak_se[n] + BOUND_TOL
            self.check(f"off_policy_streak_frequency@{n}", False, ok,
                       f"freq={demo.streak_freqs[n]:.6g}, expected={demo.streak_expected[n]:.6g}")

        table = threshold_table(div.eps_grid)
        expected = table["epsilon"] > DIVERGENCE_THRESHOLD
        self.check("off_policy_divergence_threshold", True, bool((table["diverges"] == expected).all()))

        contrast = on_policy_contrast(div.contrast_horizon, div.contrast_runs, seed)
        self.check("on_policy_contrast_bounded", True, contrast["within"],
                   f"max |V| = {contrast['max_sup_norm']!r}, bound = {contrast['bound']!r}")

        self.frames["divergence"] = demo.runs_frame()
        self.documents["divergence"] = {
            "epsilon": spec.epsilon,
            "coefficient": spec.coefficient,
            "threshold_table": table.to_dict(orient="records"),
            "forced_sequences": forced,
            "streaks": demo.streak_frame().to_dict(orient="records"),
            "histogram": {"counts": demo.hist_counts.tolist(), "edges": demo.hist_edges.tolist()},
            "on_policy_contrast": {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v))
                                   for k, v in contrast.items()},
        }

    def run(self, stages: Optional[List[str]] = None) -> List[Check]:
        """Run the requested stages in their canonical order"""
        stages = stages or self.config.stages
        handlers = {
            "exact": self.run_exact,
            "mc": self.run_mc,
            "bounds": self.run_bounds,
            "stein": self.run_stein,
            "divergence": self.run_divergence,
        }
        for stage in STAGES:
            if stage not in stages:
                continue
            logger.info(f"Running stage '{stage}'")
            try:
                handlers[stage]()
                self.stages_run.append(stage)
            except Exception as e:
                logger.error(f"Error in {stage}: {str(e)}")
                self.check(f"{stage}_stage", True, False, f"{type(e).__name__}: {e}")
        return self.checks

    @property
    def hard_failures(self) -> List[Check]:
        return [c for c in self.checks if c.hard and not c.passed]

    def summary(self) -> Dict:
        soft_failures = [c for c in self.checks if not c.hard and not c.passed]
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.config.name,
            "seed": self.config.seed,
            "n_states": self.chain.n_states,
            "alpha": self.config.alpha,
            "gamma": self.chain.gamma,
            "rho": self.model.rho,
            "n_runs": self.config.n_runs,
            "stages_run": self.stages_run,
            "passed": not self.hard_failures,
            "hard_failures": len(self.hard_failures),
            "soft_failures": len(soft_failures),
            "checks": [asdict(c) for c in self.checks],
            **{key: value for key, value in self.documents.items() if key in ("constants", "sigma2")},
        }

    def save(self, out_dir: str) -> Dict[str, str]:
        os.makedirs(out_dir, exist_ok=True)
        manager = ConfigManager()
        files = {"config": manager.save_experiment_config(self.config, out_dir)}
        csv_names = {"bounds": "bounds.csv", "moments": "moments.csv", "divergence": "divergence.csv",
                     "schedule": "schedule.csv"}
        for key, filename in csv_names.items():
            if key in self.frames:
                files[key] = manager.write_frame(self.frames[key], os.path.join(out_dir, filename))
        json_names = {"stein": "stein.json", "divergence": "divergence.json", "model": "model.json"}
        for key, filename in json_names.items():
            if key in self.documents:
                files[f"{key}_json"] = manager.write_json(self.documents[key], os.path.join(out_dir, filename))
        files["summary"] = manager.write_json(self.summary(), os.path.join(out_dir, "summary.json"))
        return files


def run_experiment(config: ExperimentConfig, out_dir: Optional[str] = None,
                   stages: Optional[List[str]] = None) -> Tuple[ExperimentRunner, Dict[str, str]]:
    out_dir = out_dir or config.output_dir
    runner = ExperimentRunner(config)
    runner.run(stages)
    files = runner.save(out_dir)
    failures = runner.hard_failures
    if failures:
        logger.error(f"{len(failures)} hard check(s) failed: {[c.name for c in failures]}")
    else:
        logger.info(f"Experiment '{config.name}' completed; results in {out_dir}")
    return runner, files
