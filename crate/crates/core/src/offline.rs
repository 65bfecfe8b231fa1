//! Offline solvers over a finite class: Priv-chiPO (private log loss,
//! maximized) and Square-chiPO (debiased square loss, minimized).
//!
//! Both enumerate the class exhaustively. Member objectives are evaluated in
//! parallel; the arg-optimum is reduced sequentially so ties always go to
//! the lowest index.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Policy, PolicyClass};
use crate::error::{Error, Result};
use crate::noise::PreferenceDataset;
use crate::objectives::{log_loss_with, square_loss_with, ImplicitRewards, LossContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OfflineSolver {
    PrivChipo,
    SquareChipo,
}

impl OfflineSolver {
    pub fn name(self) -> &'static str {
        match self {
            OfflineSolver::PrivChipo => "priv_chipo",
            OfflineSolver::SquareChipo => "square_chipo",
        }
    }
}

#[derive(Clone, Debug)]
pub struct OfflineSolveReport {
    pub chosen_index: usize,
    pub objective_values: Vec<f64>,
    pub chosen_policy: Policy,
    pub wall_time: f64,
}

/// Index of the maximum, first occurrence wins.
pub fn argmax_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if !(*v > values[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Index of the minimum, first occurrence wins.
pub fn argmin_first(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if !(*v < values[b]) => {}
            _ => best = Some(i),
        }
    }
    best
}

pub fn solve_offline(
    solver: OfflineSolver,
    dataset: &PreferenceDataset,
    class: &PolicyClass,
    ctx: &LossContext,
    pi_ref: &Policy,
) -> Result<OfflineSolveReport> {
    if class.is_empty() {
        return Err(Error::EmptyClass);
    }
    let start = Instant::now();
    let objective_values = class
        .members()
        .par_iter()
        .enumerate()
        .map(|(m, pi)| {
            let rewards = ImplicitRewards::new(pi, pi_ref, ctx.beta, ctx.flavor).for_member(m);
            match solver {
                OfflineSolver::PrivChipo => log_loss_with(&rewards, dataset, ctx),
                OfflineSolver::SquareChipo => square_loss_with(&rewards, dataset, ctx),
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let chosen_index = match solver {
        OfflineSolver::PrivChipo => argmax_first(&objective_values),
        OfflineSolver::SquareChipo => argmin_first(&objective_values),
    }
    .ok_or(Error::EmptyClass)?;
    Ok(OfflineSolveReport {
        chosen_index,
        chosen_policy: class.get(chosen_index).clone(),
        objective_values,
        wall_time: start.elapsed().as_secs_f64(),
    })
}

/// Argmax of the private log-likelihood over the class.
pub fn priv_chipo(dataset: &PreferenceDataset, class: &PolicyClass, ctx: &LossContext, pi_ref: &Policy) -> Result<OfflineSolveReport> {
    solve_offline(OfflineSolver::PrivChipo, dataset, class, ctx, pi_ref)
}

/// Argmin of the debiased square loss over the class.
pub fn square_chipo(dataset: &PreferenceDataset, class: &PolicyClass, ctx: &LossContext, pi_ref: &Policy) -> Result<OfflineSolveReport> {
    solve_offline(OfflineSolver::SquareChipo, dataset, class, ctx, pi_ref)
}

/// `sqrt(2 / C^{pi*}) * V_max * err_stat / R_max`.
pub fn theoretical_beta_offline(c_pi_star: f64, v_max: f64, r_max: f64, err_stat: f64) -> Result<f64> {
    for (name, x) in [("c_pi_star", c_pi_star), ("v_max", v_max), ("r_max", r_max), ("err_stat", err_stat)] {
        if !(x.is_finite() && x > 0.0) {
            return Err(Error::DomainError(format!("{name} must be positive, got {x}")));
        }
    }
    Ok((2.0 / c_pi_star).sqrt() * v_max * err_stat / r_max)
}
