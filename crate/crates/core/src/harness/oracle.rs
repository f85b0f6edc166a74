//! The unsplit reference run and the step-by-step comparison against it.

use super::data::Dataset;
use super::link::LinkModel;
use super::loopback::Fidelity;
use crate::error::{Error, Result};
use crate::plan::SplitPlan;
use crate::runtime::{run_monolithic, simulate_session, ClientOptions, ParamSnapshot};
use crate::segment::HyperParams;

/// Parameters after every step (index 0 is the initial state) and step losses.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub weights: Vec<ParamSnapshot>,
    pub losses: Vec<Option<f64>>,
}

/// Trains the plan with its cuts removed.
pub fn monolithic_train(
    plan: &SplitPlan,
    dataset: &Dataset,
    hp: &HyperParams,
    seed: u64,
    n_steps: usize,
) -> Result<Trajectory> {
    let (state, _) = run_monolithic(plan, dataset, hp, seed, n_steps, true)?;
    Ok(Trajectory {
        losses: state.losses(),
        weights: state.weights,
    })
}

/// Trains the plan as split by its cuts, over a loopback link.
pub fn split_train(
    plan: &SplitPlan,
    dataset: &Dataset,
    hp: &HyperParams,
    seed: u64,
    n_steps: usize,
    link: LinkModel,
    fidelity: Fidelity,
) -> Result<Trajectory> {
    let vp = plan.validate()?;
    let opts = ClientOptions {
        hp: *hp,
        seed,
        steps: n_steps,
        record_weights: true,
    };
    let (client, server) = simulate_session(&vp, dataset, &opts, link, fidelity)?;
    let weights = client
        .state
        .weights
        .iter()
        .zip(&server.state.weights)
        .map(|(c, s)| {
            let mut w = c.clone();
            w.merge(s);
            w
        })
        .collect();
    let losses = client
        .state
        .steps
        .iter()
        .zip(&server.state.steps)
        .map(|(c, s)| c.loss.or(s.loss))
        .collect();
    Ok(Trajectory { weights, losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    /// Largest `|Δw|` over every parameter and every step.
    pub max_divergence: f64,
    /// Largest `|Δw|` after each step, starting with the initial state.
    pub per_step: Vec<f64>,
}

/// Runs the plan split at `cuts` (zero-latency loopback, exact 64-bit
/// messages) next to the monolithic run from the same seed and compares
/// every parameter after every step.
pub fn equivalence_check(
    plan: &SplitPlan,
    cuts: &[usize],
    dataset: &Dataset,
    hp: &HyperParams,
    seed: u64,
    n_steps: usize,
) -> Result<EquivalenceReport> {
    let split = split_train(
        &plan.with_cuts(cuts),
        dataset,
        hp,
        seed,
        n_steps,
        LinkModel::ideal(),
        Fidelity::Exact64,
    )?;
    let mono = monolithic_train(plan, dataset, hp, seed, n_steps)?;
    let per_step = split
        .weights
        .iter()
        .zip(&mono.weights)
        .map(|(a, b)| {
            a.max_abs_diff(b)
                .ok_or_else(|| Error::Shape("split and monolithic parameter sets differ".into()))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EquivalenceReport {
        max_divergence: per_step.iter().copied().fold(0.0, f64::max),
        per_step,
    })
}
