use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bank::ScenarioBank;
use crate::error::Result;
use crate::harness::{
    evaluate, run_route, scenario_to_route, InfractionKind, PolicyParams, Route, N_FEATURES, SPEED_CAP_MPS,
};
use crate::recommend::RefinedSet;

/// Per-event weights of the failure loss.
pub const W_COLLISION: f64 = 10.0;
pub const W_RED_LIGHT: f64 = 5.0;
pub const W_DEVIATION: f64 = 3.0;
pub const W_SPEEDING: f64 = 1.0;
pub const W_JERK: f64 = 0.1;

/// Severity shaping: a smooth surrogate added per event so that finite
/// differences see a slope inside each infraction region. Zero on clean
/// rollouts.
pub const S_COLLISION: f64 = 10.0;
pub const S_RED_LIGHT: f64 = 5.0;
pub const S_SPEEDING: f64 = 0.05;

/// Training episodes: every member of the refined set under every seed.
pub fn training_routes(refined: &RefinedSet, bank: &ScenarioBank, seeds: &[u64]) -> Result<Vec<Route>> {
    let mut routes = Vec::with_capacity(refined.members.len() * seeds.len());
    for member in &refined.members {
        let record = bank.get(&member.scenario_id)?;
        routes.extend(seeds.iter().map(|&s| scenario_to_route(record, s)));
    }
    Ok(routes)
}

/// Loss of one rollout.
pub fn episode_loss(params: &PolicyParams, route: &Route) -> f64 {
    let log = evaluate(&run_route(params, route), route);
    let mut loss = (1.0 - log.route_completion_fraction) + W_JERK * log.mean_abs_jerk;
    for e in &log.events {
        loss += match e.kind {
            InfractionKind::Collision => W_COLLISION + S_COLLISION * e.magnitude / SPEED_CAP_MPS,
            InfractionKind::RedLight => W_RED_LIGHT + S_RED_LIGHT * e.magnitude / SPEED_CAP_MPS,
            InfractionKind::RouteDeviation => W_DEVIATION,
            InfractionKind::Speeding => W_SPEEDING + S_SPEEDING * e.magnitude,
        };
    }
    loss
}

/// Mean episode loss over a fixed route list. Rollouts run in parallel and are
/// summed in route order.
pub fn routes_loss(params: &PolicyParams, routes: &[Route]) -> f64 {
    if routes.is_empty() {
        return 0.0;
    }
    let losses: Vec<f64> = routes.par_iter().map(|r| episode_loss(params, r)).collect();
    losses.iter().sum::<f64>() / routes.len() as f64
}

/// Failure-specific risk of `params` over the refined set.
pub fn fail_loss(params: &PolicyParams, refined: &RefinedSet, bank: &ScenarioBank, seeds: &[u64]) -> Result<f64> {
    Ok(routes_loss(params, &training_routes(refined, bank, seeds)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub max_grad_steps: usize,
    pub fd_step: f64,
    /// Gradients longer than this are rescaled to this norm.
    pub max_grad_norm: f64,
}

pub const EARLY_STOP_TOLERANCE: f64 = 1e-4;
pub const EARLY_STOP_PATIENCE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub theta: PolicyParams,
    pub initial_loss: f64,
    pub best_loss: f64,
    /// Loss after each gradient step.
    pub loss_curve: Vec<f64>,
    pub early_stopped: bool,
}

fn fd_gradient(params: &PolicyParams, routes: &[Route], h: f64) -> [f64; N_FEATURES] {
    let probes: Vec<f64> = (0..2 * N_FEATURES)
        .into_par_iter()
        .map(|i| {
            let mut theta = params.theta;
            theta[i / 2] += if i % 2 == 0 { h } else { -h };
            routes_loss(&PolicyParams { theta }, routes)
        })
        .collect();
    std::array::from_fn(|j| (probes[2 * j] - probes[2 * j + 1]) / (2.0 * h))
}

/// Gradient descent on the mean loss over `routes` with central
/// finite-difference gradients. Stops early once the best loss has improved by
/// less than the tolerance for `EARLY_STOP_PATIENCE` consecutive steps, and
/// returns the best iterate seen.
pub fn fine_tune_on(params: &PolicyParams, routes: &[Route], settings: &TrainSettings) -> TrainOutcome {
    let initial_loss = routes_loss(params, routes);
    let mut best = (*params, initial_loss);
    let mut current = *params;
    let mut curve = Vec::new();
    let mut stalled = 0;
    let mut early_stopped = false;
    for _ in 0..settings.max_grad_steps {
        let mut grad = fd_gradient(&current, routes, settings.fd_step);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm > settings.max_grad_norm {
            grad.iter_mut().for_each(|g| *g *= settings.max_grad_norm / norm);
        }
        for (w, g) in current.theta.iter_mut().zip(grad) {
            *w -= settings.learning_rate * g;
        }
        let loss = routes_loss(&current, routes);
        curve.push(loss);
        if best.1 - loss >= EARLY_STOP_TOLERANCE {
            stalled = 0;
        } else {
            stalled += 1;
        }
        if loss < best.1 {
            best = (current, loss);
        }
        if stalled >= EARLY_STOP_PATIENCE {
            early_stopped = true;
            break;
        }
    }
    TrainOutcome {
        theta: best.0,
        initial_loss,
        best_loss: best.1,
        loss_curve: curve,
        early_stopped,
    }
}

/// Fine-tunes `params` on rollouts generated from the refined set.
pub fn fine_tune(
    params: &PolicyParams,
    refined: &RefinedSet,
    bank: &ScenarioBank,
    seeds: &[u64],
    settings: &TrainSettings,
) -> Result<TrainOutcome> {
    Ok(fine_tune_on(params, &training_routes(refined, bank, seeds)?, settings))
}
