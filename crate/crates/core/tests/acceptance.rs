//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Criteria can be selected by number: `cargo test --test acceptance -- 3 5`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::Rng;

use macfn_core::autodiff::{Activation, Init, Matrix, Mlp, ParamStore, Tape};
use macfn_core::config::RunConfig;
use macfn_core::envs::{EnvSpec, Scenario};
use macfn_core::flow::{Checkpoint, FlowModel, FlowNetConfig, InverseModel, ObsLayout};
use macfn_core::metrics::{
    avg_test_return, collect, count_distinct, terminal_histogram, total_variation, toy_mode_masses,
    toy_reward_histogram,
};
use macfn_core::oracle::{
    concentration_sweep, quadrature_integral, unbiasedness_check, AnalyticFlow, ConcentrationSetup,
    Integrand,
};
use macfn_core::rng::{seeded, Domain};
use macfn_core::sampler::{rollout, softmax, uniform_actions, Policy, SelectMode, Trajectory};
use macfn_core::trainer::{
    flow_matching_loss_with, log_product_of_sums, outflow_with_candidates, InflowEstimator,
    InitialInflow, LossCandidates, LossConfig, ParentRegion, ReplayBuffer, TerminalOutflowMode,
};
use macfn_core::{train_loop, Trainer};

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome {
            passed,
            detail: detail.into(),
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn norm_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness

fn mlp_gradient_error(seed: u64) -> f64 {
    let mut rng = seeded(seed);
    let n_hidden = rng.gen_range(1..=2);
    let mut dims = vec![rng.gen_range(1..=4)];
    dims.extend((0..n_hidden).map(|_| rng.gen_range(1..=6)));
    dims.push(rng.gen_range(1..=3));
    let acts: Vec<Activation> = (0..n_hidden)
        .map(|_| {
            if rng.gen_bool(0.5) {
                Activation::Tanh
            } else {
                Activation::Relu
            }
        })
        .collect();
    let mut store = ParamStore::new();
    let mlp = Mlp::new(&mut store, "mlp", &dims, &acts, Init::Uniform, &mut rng).unwrap();
    for p in store.values_mut() {
        *p = rng.gen_range(-1.0..1.0);
    }
    let batch = rng.gen_range(1..=4);
    let input = Matrix::from_vec(
        batch,
        dims[0],
        (0..batch * dims[0])
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect(),
    )
    .unwrap();
    let out_dim = dims[dims.len() - 1];
    let weights: Vec<f64> = (0..batch * out_dim)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();

    // L = Σ w · y²
    let loss = |params: &[f64]| -> f64 {
        let y = mlp.eval(params, &input).unwrap();
        y.data().iter().zip(&weights).map(|(y, w)| w * y * y).sum()
    };
    let mut tape = Tape::new(store.values());
    let x = tape.leaf(input.clone());
    let y = mlp.forward_tape(&mut tape, x).unwrap();
    let sq = tape.square(y);
    let w = tape.leaf(Matrix::from_vec(batch, out_dim, weights.clone()).unwrap());
    let wy = tape.mul(sq, w).unwrap();
    let l = tape.sum(wy);
    let analytic = tape.backward(l, 1.0).unwrap().params().to_vec();

    let h = 1e-6;
    let mut params = store.values().to_vec();
    let numeric: Vec<f64> = (0..params.len())
        .map(|i| {
            let p = params[i];
            params[i] = p + h;
            let up = loss(&params);
            params[i] = p - h;
            let down = loss(&params);
            params[i] = p;
            (up - down) / (2.0 * h)
        })
        .collect();
    norm_rel_err(&analytic, &numeric)
}

fn full_loss_gradient_error(horizon: usize, cfg: LossConfig, seed: u64) -> f64 {
    let mut spec = EnvSpec::new(Scenario::FoodCollection, 2);
    spec.horizon = horizon;
    let mut rng = seeded(seed);
    let mut model = FlowModel::new(
        FlowNetConfig {
            n_agents: 2,
            obs_dim: spec.obs_dim(),
            action_dim: 2,
            hidden: vec![8],
            activation: Activation::Tanh,
            shared: false,
        },
        Init::Uniform,
        &mut rng,
    )
    .unwrap();
    let inverse = InverseModel::analytic(ObsLayout::from_spec(&spec), 2, 2);
    let trajs: Vec<Trajectory> = (0..2)
        .map(|_| rollout(&spec, Policy::Random, &mut rng).unwrap())
        .collect();
    let batch: Vec<&Trajectory> = trajs.iter().collect();
    let cands = LossCandidates::sample(&batch, 2, spec.action_bound, cfg.k_hat, &mut rng);
    let (_, analytic) = flow_matching_loss_with(&model, &inverse, &batch, &cfg, &cands).unwrap();

    let h = 1e-6;
    let n = model.params().len();
    let numeric: Vec<f64> = (0..n)
        .map(|i| {
            let p = model.params().values()[i];
            let mut eval = |v: f64| {
                model.params_mut().values_mut()[i] = v;
                flow_matching_loss_with(&model, &inverse, &batch, &cfg, &cands)
                    .unwrap()
                    .0
                    .flow_matching_loss
            };
            let g = (eval(p + h) - eval(p - h)) / (2.0 * h);
            model.params_mut().values_mut()[i] = p;
            g
        })
        .collect();
    norm_rel_err(&analytic, &numeric)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mlp_worst = (0..200).map(mlp_gradient_error).fold(0.0, f64::max);

    let bound = EnvSpec::new(Scenario::FoodCollection, 2).action_bound;
    let mut loss_worst: f64 = 0.0;
    let mut cases = 0;
    for horizon in [1, 3] {
        let arena = ParentRegion {
            half_width: 2.0,
            reach: None,
        };
        for (inflow, initial, parent_region) in [
            (InflowEstimator::Factorized, InitialInflow::Estimated, None),
            (InflowEstimator::Joint, InitialInflow::Exact, Some(arena)),
        ] {
            for terminal_mode in [TerminalOutflowMode::Boundary, TerminalOutflowMode::Literal] {
                let cfg = LossConfig {
                    epsilon: 0.5,
                    k_hat: 2,
                    terminal_mode,
                    inflow,
                    initial_inflow: initial,
                    action_bound: bound,
                    parent_region: parent_region.clone(),
                };
                loss_worst = loss_worst.max(full_loss_gradient_error(horizon, cfg, 17 + cases));
                cases += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        mlp_worst < 1e-4 && loss_worst < 1e-3 && elapsed < Duration::from_secs(60),
        format!(
            "200 MLPs worst rel err {mlp_worst:.2e} (< 1e-4); full loss over {cases} configurations worst {loss_worst:.2e} (< 1e-3)"
        ),
    )
}

// ---------------------------------------------------------------------------
// 2. Policy factorization

fn criterion_2() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for n in 1..=3 {
        let spec = EnvSpec::new(Scenario::FoodCollection, n);
        for k_hat in [2usize, 5] {
            for m in 0..100u64 {
                let mut rng = seeded(1000 * n as u64 + 10 * k_hat as u64 + m);
                let model = FlowModel::new(
                    FlowNetConfig {
                        n_agents: n,
                        obs_dim: spec.obs_dim(),
                        action_dim: 2,
                        hidden: vec![16],
                        activation: Activation::Tanh,
                        shared: false,
                    },
                    Init::Uniform,
                    &mut rng,
                )
                .unwrap();
                let obs = spec.observe_all(&spec.reset(rng.gen()));
                let per_agent: Vec<Vec<f64>> = (0..n)
                    .map(|i| {
                        let c = uniform_actions(&mut rng, k_hat, 2, spec.action_bound);
                        model.log_flows(i, &obs[i], &c).unwrap()
                    })
                    .collect();
                let marginals: Vec<Vec<f64>> = per_agent.iter().map(|l| softmax(l, 1.0)).collect();

                let grid = k_hat.pow(n as u32);
                let mut joint_logits = Vec::with_capacity(grid);
                let mut product = Vec::with_capacity(grid);
                for g in 0..grid {
                    let (mut idx, mut logit, mut prob) = (g, 0.0, 1.0);
                    for i in 0..n {
                        let k = idx % k_hat;
                        idx /= k_hat;
                        logit += per_agent[i][k];
                        prob *= marginals[i][k];
                    }
                    joint_logits.push(logit);
                    product.push(prob);
                }
                let joint = softmax(&joint_logits, 1.0);
                for (j, p) in joint.iter().zip(&product) {
                    worst = worst.max(rel_err(*j, *p));
                }
                checked += 1;
            }
        }
    }
    Outcome::new(
        worst < 1e-12,
        format!("{checked} models, N in 1..=3, K̂ in {{2, 5}}: worst rel err {worst:.2e} (< 1e-12)"),
    )
}

// ---------------------------------------------------------------------------
// 3. Unbiasedness of the Monte-Carlo estimate

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut passed = true;
    let mut parts = Vec::new();
    for (name, flow) in [
        ("gaussian_bump", AnalyticFlow::gaussian_bump(1, 1.0)),
        ("separable_product", AnalyticFlow::separable_product(1, 1.0)),
    ] {
        for n in [1usize, 2] {
            let states = vec![vec![0.0]; n];
            let report = unbiasedness_check(&flow, &states, 10_000, 1000, 0).unwrap();
            let quad_err = rel_err(
                quadrature_integral(&flow, &states, 16).unwrap(),
                flow.exact_integral(&states),
            );
            passed &= report.passed && quad_err < 1e-6;
            parts.push(format!(
                "{name} N={n} z {:.2} quad err {quad_err:.1e}",
                report.z
            ));
        }
    }
    let elapsed = start.elapsed();
    passed &= elapsed < Duration::from_secs(120);
    Outcome::new(passed, format!("{} (z ≤ 3)", parts.join("; ")))
}

// ---------------------------------------------------------------------------
// 4. Concentration

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rows = 0;
    let mut failed = Vec::new();
    let mut worst_margin = f64::INFINITY;
    for (name, flow) in [
        ("gaussian_bump", AnalyticFlow::gaussian_bump(1, 1.0)),
        ("separable_product", AnalyticFlow::separable_product(1, 1.0)),
    ] {
        for n in [1usize, 2] {
            let states = vec![vec![0.0]; n];
            for k in [100usize, 1000] {
                let setup = ConcentrationSetup {
                    integrand: Integrand::Outflow,
                    n_agents: n,
                    k,
                    n_trials: 10_000,
                    lipschitz_scale: 1.0,
                    state_diameter: 0.0,
                    seed: 0,
                };
                for r in concentration_sweep(&flow, &states, &[1.0, 2.0, 3.0], &setup).unwrap() {
                    rows += 1;
                    worst_margin = worst_margin.min(r.bound + 3.0 * r.stderr - r.frequency);
                    if !r.passed {
                        failed.push(format!("{name} N={n} K={k} δ={}", r.delta));
                    }
                }
            }
        }
    }
    let elapsed = start.elapsed();
    Outcome::new(
        failed.is_empty() && elapsed < Duration::from_secs(300),
        format!(
            "{rows} rows over 10,000 trials; smallest margin below the bound {worst_margin:.4}{}",
            if failed.is_empty() {
                String::new()
            } else {
                format!("; exceeded: {}", failed.join(", "))
            }
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. Log-space arithmetic

fn naive_log_flows(
    model: &FlowModel,
    inverse: &InverseModel,
    tr: &Trajectory,
    cfg: &LossConfig,
    cands: &LossCandidates,
) -> Vec<(f64, f64)> {
    (1..tr.records.len())
        .map(|t| {
            let rec = &tr.records[t];
            let inflow: f64 = (0..tr.n_agents())
                .map(|i| {
                    let c = &cands.inflow[0][t - 1][i];
                    let parents = inverse.predict_parents(i, &rec.observations[i], c).unwrap();
                    c.chunks(2)
                        .enumerate()
                        .map(|(k, a)| model.log_edge_flow(i, parents.row(k), a).unwrap().exp())
                        .sum::<f64>()
                })
                .product();
            let flows: f64 = (0..tr.n_agents())
                .map(|i| {
                    let c = &cands.outflow[0][t - 1][i];
                    c.chunks(2)
                        .map(|a| {
                            model
                                .log_edge_flow(i, &rec.observations[i], a)
                                .unwrap()
                                .exp()
                        })
                        .sum::<f64>()
                })
                .product();
            let outflow = if rec.terminal && cfg.terminal_mode == TerminalOutflowMode::Boundary {
                rec.reward
            } else {
                rec.reward + flows
            };
            ((cfg.epsilon + inflow).ln(), (cfg.epsilon + outflow).ln())
        })
        .collect()
}

fn criterion_5() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 256,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let products = runner.run(
        &prop::collection::vec(prop::collection::vec(-30.0f64..30.0, 1..8), 1..5),
        |flows| {
            let naive: f64 = flows
                .iter()
                .map(|f| f.iter().map(|x| x.exp()).sum::<f64>())
                .product();
            prop_assume!(naive.is_finite() && naive > 0.0);
            let logged = log_product_of_sums(&flows);
            prop_assert!(
                rel_err(logged.exp(), naive) < 1e-10,
                "{} vs {naive}",
                logged.exp()
            );
            Ok(())
        },
    );

    let spec = EnvSpec::new(Scenario::FoodCollection, 2);
    let inverse = InverseModel::analytic(ObsLayout::from_spec(&spec), 2, 2);
    let mut runner = TestRunner::new(PropConfig {
        cases: 64,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let states = runner.run(
        &(any::<u64>(), 1e-4f64..2.0, 2usize..6, any::<bool>()),
        |(seed, epsilon, k_hat, literal)| {
            let mut rng = seeded(seed);
            let model = FlowModel::new(
                FlowNetConfig {
                    n_agents: 2,
                    obs_dim: spec.obs_dim(),
                    action_dim: 2,
                    hidden: vec![8],
                    activation: Activation::Tanh,
                    shared: false,
                },
                Init::Uniform,
                &mut rng,
            )
            .unwrap();
            let tr = rollout(&spec, Policy::Random, &mut rng).unwrap();
            let cfg = LossConfig {
                epsilon,
                k_hat,
                terminal_mode: if literal {
                    TerminalOutflowMode::Literal
                } else {
                    TerminalOutflowMode::Boundary
                },
                inflow: InflowEstimator::Factorized,
                initial_inflow: InitialInflow::Estimated,
                action_bound: spec.action_bound,
                parent_region: None,
            };
            let cands = LossCandidates::sample(&[&tr], 2, spec.action_bound, k_hat, &mut rng);
            let (report, _) =
                flow_matching_loss_with(&model, &inverse, &[&tr], &cfg, &cands).unwrap();
            let naive = naive_log_flows(&model, &inverse, &tr, &cfg, &cands);
            let mut direct = 0.0;
            for (s, (lin, lout)) in report.states.iter().zip(&naive) {
                prop_assert!(rel_err(s.log_inflow, *lin) < 1e-10);
                prop_assert!(rel_err(s.log_outflow, *lout) < 1e-10);
                direct += (lin - lout).powi(2);
            }
            prop_assert!(rel_err(report.flow_matching_loss, direct) < 1e-10);
            Ok(())
        },
    );

    let mut runner = TestRunner::new(PropConfig {
        cases: 256,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let terminal = runner.run(&(any::<u64>(), 1e-3f64..10.0), |(seed, reward)| {
        let mut rng = seeded(seed);
        let model = FlowModel::new(
            FlowNetConfig {
                n_agents: 2,
                obs_dim: spec.obs_dim(),
                action_dim: 2,
                hidden: vec![4],
                activation: Activation::Tanh,
                shared: false,
            },
            Init::Uniform,
            &mut rng,
        )
        .unwrap();
        let obs = spec.observe_all(&spec.reset(seed));
        let c: Vec<Vec<f64>> = (0..2)
            .map(|_| uniform_actions(&mut rng, 3, 2, spec.action_bound))
            .collect();
        let out = outflow_with_candidates(
            &model,
            &obs,
            reward,
            true,
            TerminalOutflowMode::Boundary,
            &c,
        )
        .unwrap();
        prop_assert_eq!(out, reward);
        Ok(())
    });

    let results = [
        ("log product of sums", products.err().map(|e| e.to_string())),
        ("loss states", states.err().map(|e| e.to_string())),
        ("terminal boundary", terminal.err().map(|e| e.to_string())),
    ];
    let failed: Vec<String> = results
        .iter()
        .filter_map(|(name, e)| e.as_ref().map(|e| format!("{name}: {e}")))
        .collect();
    Outcome::new(
        failed.is_empty(),
        if failed.is_empty() {
            "log-space products and loss terms within 1e-10 of naive arithmetic; boundary outflow is exactly R".to_string()
        } else {
            failed.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------
// 6. Reward proportionality on the bimodal toy

fn toy_config() -> RunConfig {
    let mut c = RunConfig::for_scenario(Scenario::BimodalToy);
    c.model.hidden = vec![32, 32];
    c.model.inverse_mode = macfn_core::InverseMode::Analytic;
    c.train.total_env_steps = 50_000;
    c.train.epsilon = 1e-3;
    c.train.learning_rate = 3e-3;
    c.train.inflow_estimator = InflowEstimator::Joint;
    c.train.initial_inflow = InitialInflow::Exact;
    c.train.mask_infeasible_parents = true;
    c.train.explore_episode_prob = 0.3;
    c.eval.eval_every = c.train.total_env_steps;
    c
}

const TOY_BINS: usize = 10;
const TOY_SAMPLES: usize = 20_000;

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let config = toy_config();
    let mut trainer = Trainer::new(config.clone()).unwrap();
    while trainer.env_steps() < config.train.total_env_steps {
        trainer.step().unwrap();
    }
    let elapsed = start.elapsed();
    let spec = trainer.spec().clone();
    let target = toy_reward_histogram(&spec, TOY_BINS, 8).unwrap();
    let hist = terminal_histogram(
        &spec,
        trainer.policy(SelectMode::Sample),
        TOY_SAMPLES,
        TOY_BINS,
        12345,
    )
    .unwrap();
    let tv = total_variation(&hist, &target).unwrap();
    let (pos, neg) = toy_mode_masses(&hist);
    Outcome::new(
        tv < 0.2 && pos >= 0.2 && neg >= 0.2 && elapsed < Duration::from_secs(600),
        format!(
            "{} env steps in {:.0}s: TV {tv:.3} (< 0.2), mode masses {pos:.3} / {neg:.3} (≥ 0.2 each)",
            trainer.env_steps(),
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. Food collection trend

const FOOD_SEEDS: u64 = 5;
const FOOD_RETURN_EPISODES: usize = 1000;
const FOOD_DIVERSITY_TRAJECTORIES: usize = 10_000;

fn food_config(seed: u64) -> RunConfig {
    let mut c = RunConfig::for_scenario(Scenario::FoodCollection);
    c.env.n_agents = Some(3);
    c.env.layout_seed = Some(7);
    c.run.seed = seed;
    c.model.activation = Activation::Relu;
    c.model.inverse_mode = macfn_core::InverseMode::Analytic;
    c.train.total_env_steps = 200_000;
    c.train.epsilon = 1e-3;
    c.train.learning_rate = 1e-3;
    c.eval.eval_every = c.train.total_env_steps;
    c
}

struct FoodSeed {
    greedy: f64,
    random: f64,
    sample_distinct: usize,
    greedy_distinct: usize,
    elapsed: Duration,
}

fn food_seed(seed: u64) -> FoodSeed {
    let start = Instant::now();
    let config = food_config(seed);
    let settings = config.settings().unwrap();
    let mut trainer = Trainer::new(config.clone()).unwrap();
    while trainer.env_steps() < config.train.total_env_steps {
        trainer.step().unwrap();
    }
    let spec = trainer.spec();
    let eval_seed = 1_000 + seed;
    let greedy = avg_test_return(
        spec,
        trainer.policy(SelectMode::Greedy),
        FOOD_RETURN_EPISODES,
        eval_seed,
    )
    .unwrap();
    let random = avg_test_return(spec, Policy::Random, FOOD_RETURN_EPISODES, eval_seed).unwrap();
    let distinct = |mode: SelectMode| {
        let trajs = collect(
            spec,
            trainer.policy(mode),
            FOOD_DIVERSITY_TRAJECTORIES,
            eval_seed,
            Domain::Collect,
            0,
        )
        .unwrap();
        count_distinct(
            &trajs,
            settings.diversity_threshold,
            settings.validity_floor,
        )
        .unwrap()
        .n_distinct
    };
    FoodSeed {
        greedy: greedy.mean,
        random: random.mean,
        sample_distinct: distinct(SelectMode::Sample),
        greedy_distinct: distinct(SelectMode::Greedy),
        elapsed: start.elapsed(),
    }
}

fn criterion_7() -> Outcome {
    let runs: Vec<FoodSeed> = (0..FOOD_SEEDS).map(food_seed).collect();
    let n = runs.len() as f64;
    let mean = |f: &dyn Fn(&FoodSeed) -> f64| runs.iter().map(f).sum::<f64>() / n;
    let greedy = mean(&|r| r.greedy);
    let random = mean(&|r| r.random);
    let sample_distinct = mean(&|r| r.sample_distinct as f64);
    let greedy_distinct = mean(&|r| r.greedy_distinct as f64);
    let slowest = runs.iter().map(|r| r.elapsed).max().unwrap_or_default();
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "{:.3}/{:.3} {}/{}",
                r.greedy, r.random, r.sample_distinct, r.greedy_distinct
            )
        })
        .collect();
    Outcome::new(
        greedy >= 1.5 * random && sample_distinct >= 2.0 * greedy_distinct && slowest <= Duration::from_secs(3600),
        format!(
            "greedy return {greedy:.3} vs random {random:.3} (need ≥ 1.5×); distinct sample {sample_distinct:.1} vs greedy {greedy_distinct:.1} (need ≥ 2×); slowest seed {:.0}s; per seed greedy/random sample/greedy [{}]",
            slowest.as_secs_f64(),
            per_seed.join(", ")
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. Determinism and interfaces

fn small_run(dir: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::for_scenario(Scenario::RobotNavigation);
    c.model.hidden = vec![8];
    c.model.inverse_hidden = vec![8];
    c.train.k_hat = 4;
    c.train.batch_size = 2;
    c.train.inverse_batch = 8;
    c.train.total_env_steps = 240;
    c.eval.eval_every = 60;
    c.eval.eval_episodes = 4;
    c.run.output_dir = dir.to_path_buf();
    c
}

fn criterion_8() -> Outcome {
    let mut problems = Vec::new();

    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    train_loop(&small_run(a.path())).unwrap();
    train_loop(&small_run(b.path())).unwrap();
    let csv_a = std::fs::read(a.path().join("metrics.csv")).unwrap();
    let csv_b = std::fs::read(b.path().join("metrics.csv")).unwrap();
    if csv_a != csv_b || csv_a.iter().filter(|&&c| c == b'\n').count() != 5 {
        problems.push("metrics CSV differs between identical runs".to_string());
    }

    let config = small_run(a.path());
    if RunConfig::parse(&config.to_toml()).ok().as_ref() != Some(&config) {
        problems.push("config does not round-trip through TOML".to_string());
    }
    let written = RunConfig::load(&a.path().join("config.toml"), &[]).unwrap();
    if written != config {
        problems.push("written config.toml does not reload exactly".to_string());
    }

    let ck = Checkpoint::load(&a.path().join("checkpoint.json")).unwrap();
    let again = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
    if again != ck {
        problems.push("checkpoint does not round-trip through JSON".to_string());
    }

    let mut runner = TestRunner::new(PropConfig {
        cases: 128,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let spec = EnvSpec::new(Scenario::BimodalToy, 2);
    let fifo = runner.run(
        &(1usize..20, 0usize..30, any::<u64>()),
        |(capacity, extra, seed)| {
            let mut rng = seeded(seed);
            let episodes: Vec<Trajectory> = (0..capacity + extra)
                .map(|_| rollout(&spec, Policy::Random, &mut rng).unwrap())
                .collect();
            let mut buffer = ReplayBuffer::new(capacity);
            for e in &episodes {
                buffer.push(e.clone());
            }
            let kept: Vec<&Trajectory> = buffer.iter().collect();
            let expected: Vec<&Trajectory> = episodes[extra..].iter().collect();
            prop_assert_eq!(kept, expected);
            Ok(())
        },
    );
    if let Err(e) = fifo {
        problems.push(format!("buffer FIFO: {e}"));
    }

    Outcome::new(
        problems.is_empty(),
        if problems.is_empty() {
            "identical CSVs, exact config and checkpoint round-trips, FIFO buffer".to_string()
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------------------

type Criterion = (usize, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        (1, "gradient correctness", criterion_1),
        (2, "policy factorization", criterion_2),
        (3, "Monte-Carlo unbiasedness", criterion_3),
        (4, "concentration bound", criterion_4),
        (5, "log-space flow arithmetic", criterion_5),
        (6, "reward proportionality", criterion_6),
        (7, "food collection trend", criterion_7),
        (8, "determinism and interfaces", criterion_8),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        failed += usize::from(!outcome.passed);
        println!(
            "{} criterion {n} ({name}, {:.1}s): {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            outcome.detail
        );
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}
