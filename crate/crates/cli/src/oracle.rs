use anyhow::Result;
use clap::{Args, ValueEnum};
use serde::Serialize;

use macfn_core::oracle::{
    concentration_sweep, unbiasedness_check, AnalyticFlow, ConcentrationRow, ConcentrationSetup,
    Integrand, UnbiasednessReport,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Suite {
    Constant,
    GaussianBump,
    SeparableProduct,
    All,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long, value_enum, default_value_t = Suite::All)]
    suite: Suite,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0, 3.0])]
    deltas: Vec<f64>,
    /// Sample counts for the concentration sweep.
    #[arg(long = "k", value_delimiter = ',', default_values_t = [100, 1000])]
    ks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 2])]
    agents: Vec<usize>,
    #[arg(long, default_value_t = 10_000)]
    trials: usize,
    /// Repeated estimates for the unbiasedness check.
    #[arg(long, default_value_t = 1000)]
    repeats: usize,
    /// Samples per estimate in the unbiasedness check.
    #[arg(long, default_value_t = 10_000)]
    mc_k: usize,
    /// Per-agent action dimension.
    #[arg(long, default_value_t = 1)]
    action_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    action_bound: f64,
    /// Multiplies the analytic Lipschitz constant used in the radius.
    #[arg(long, default_value_t = 1.0)]
    lipschitz_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Serialize)]
pub struct FlowReport {
    flow: &'static str,
    unbiasedness: Vec<UnbiasednessEntry>,
    concentration: Vec<ConcentrationRow>,
}

#[derive(Serialize)]
pub struct UnbiasednessEntry {
    n_agents: usize,
    k: usize,
    #[serde(flatten)]
    report: UnbiasednessReport,
}

#[derive(Serialize)]
pub struct OracleReport {
    pub passed: bool,
    pub n_failed: usize,
    pub lipschitz_scale: f64,
    pub flows: Vec<FlowReport>,
}

fn flows(suite: Suite, d: usize, b: f64) -> Vec<(&'static str, AnalyticFlow)> {
    let all = [
        ("constant", AnalyticFlow::constant(1.5, d, b)),
        ("gaussian_bump", AnalyticFlow::gaussian_bump(d, b)),
        ("separable_product", AnalyticFlow::separable_product(d, b)),
    ];
    all.into_iter()
        .filter(|(name, _)| {
            matches!(
                (suite, *name),
                (Suite::All, _)
                    | (Suite::Constant, "constant")
                    | (Suite::GaussianBump, "gaussian_bump")
                    | (Suite::SeparableProduct, "separable_product")
            )
        })
        .collect()
}

pub fn run(args: &OracleArgs) -> Result<OracleReport> {
    let mut n_failed = 0;
    let mut out = Vec::new();
    for (name, flow) in flows(args.suite, args.action_dim, args.action_bound) {
        let mut unbiasedness = Vec::new();
        let mut concentration = Vec::new();
        for &n in &args.agents {
            let states = vec![vec![0.0; args.action_dim]; n];
            let report = unbiasedness_check(&flow, &states, args.mc_k, args.repeats, args.seed)?;
            n_failed += usize::from(!report.passed);
            unbiasedness.push(UnbiasednessEntry {
                n_agents: n,
                k: args.mc_k,
                report,
            });
            for &k in &args.ks {
                let setup = ConcentrationSetup {
                    integrand: Integrand::Outflow,
                    n_agents: n,
                    k,
                    n_trials: args.trials,
                    lipschitz_scale: args.lipschitz_scale,
                    state_diameter: 0.0,
                    seed: args.seed,
                };
                let rows = concentration_sweep(&flow, &states, &args.deltas, &setup)?;
                n_failed += rows.iter().filter(|r| !r.passed).count();
                concentration.extend(rows);
            }
        }
        out.push(FlowReport {
            flow: name,
            unbiasedness,
            concentration,
        });
    }
    Ok(OracleReport {
        passed: n_failed == 0,
        n_failed,
        lipschitz_scale: args.lipschitz_scale,
        flows: out,
    })
}
