//! One-step JKO objective on particles and its trajectory-level aggregates.
//!
//! For an ensemble `{x_i, rho_i}` and a displacement field `V`, the step loss is
//!
//! ```text
//! (1/m) sum_i |V(x_i)|^2  +  2 dt * E[(I + V)# rho]
//! ```
//!
//! where the push-forward energy uses moved points `x_i + V(x_i)` and updated
//! densities `rho_i exp(-div V(x_i))`. The divergence comes from central
//! differences, so the loss is a function of the field evaluated on the
//! divergence stencil only; its gradient with respect to those evaluations
//! is formed here and handed to the model's reverse pass.

use ndarray::{s, Array1, Array2, ArrayView2};

use crate::energy::{energy_terms, EnergySpec};
use crate::error::{Error, Result};
use crate::geometry::{default_eps, divergence_stencil, split_stencil_outputs, ParticleEnsemble};
use crate::operator::{Conditioning, JkoModel};
use crate::training::Trajectory;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLossBreakdown {
    /// Monte-Carlo transport cost, the W2^2 surrogate.
    pub transport: f64,
    /// `2 dt` times the push-forward energy.
    pub energy: f64,
    pub total: f64,
}

/// Step loss from field values on the divergence stencil of `ensemble`.
///
/// With `with_grad`, also returns `d(total)/d(outputs)`.
pub fn step_loss_from_outputs(
    ensemble: &ParticleEnsemble,
    spec: &EnergySpec,
    dt: f64,
    eps: f64,
    outputs: ArrayView2<'_, f64>,
    with_grad: bool,
) -> Result<(StepLossBreakdown, Option<Array2<f64>>)> {
    if !(dt > 0.0) {
        return Err(Error::Parameter(format!("dt must be > 0, got {dt}")));
    }
    let m = ensemble.len();
    let d = ensemble.dim();
    if outputs.ncols() != d {
        return Err(Error::structural("field output dimension does not match the ensemble"));
    }
    let (disp, div) = split_stencil_outputs(outputs, m, eps)?;
    let inv_m = 1.0 / m as f64;
    let transport = inv_m * disp.iter().map(|v| v * v).sum::<f64>();
    let moved = &ensemble.points() + &disp;
    let rho: Array1<f64> = ensemble
        .densities()
        .iter()
        .zip(div.iter())
        .map(|(r, dv)| r * (-dv).exp())
        .collect();
    let eg = energy_terms(spec, moved.view(), rho.view(), with_grad)?;
    let energy = 2.0 * dt * eg.value;
    let breakdown = StepLossBreakdown {
        transport,
        energy,
        total: transport + energy,
    };
    if !breakdown.total.is_finite() {
        return Err(Error::numeric(0, "non-finite step loss"));
    }
    if !with_grad {
        return Ok((breakdown, None));
    }
    let mut grad = Array2::zeros(outputs.dim());
    {
        let mut g_disp = grad.slice_mut(s![0..m, ..]);
        g_disp.assign(&(&disp * (2.0 * inv_m) + &(&eg.d_points * (2.0 * dt))));
    }
    for i in 0..m {
        // d(rho_i exp(-div_i))/d(div_i) = -rho'_i
        let g_div = -2.0 * dt * eg.d_densities[i] * rho[i];
        let g_fd = g_div / (2.0 * eps);
        for j in 0..d {
            grad[[(1 + 2 * j) * m + i, j]] += g_fd;
            grad[[(2 + 2 * j) * m + i, j]] -= g_fd;
        }
    }
    Ok((breakdown, Some(grad)))
}

/// The step loss of `model` on one ensemble.
pub fn jko_step_loss<M: JkoModel + ?Sized>(
    model: &M,
    ensemble: &ParticleEnsemble,
    cond: &Conditioning,
    spec: &EnergySpec,
    dt: f64,
) -> Result<StepLossBreakdown> {
    let eps = default_eps(ensemble.points());
    let stencil = divergence_stencil(ensemble.points(), eps);
    let outputs = model.displacements(ensemble, cond, stencil.view())?;
    step_loss_from_outputs(ensemble, spec, dt, eps, outputs.view(), false).map(|(b, _)| b)
}

/// The step loss together with its gradient in the model parameters.
pub fn jko_step_loss_with_grad<M: JkoModel + ?Sized>(
    model: &M,
    ensemble: &ParticleEnsemble,
    cond: &Conditioning,
    spec: &EnergySpec,
    dt: f64,
) -> Result<(StepLossBreakdown, Vec<Array2<f64>>)> {
    let eps = default_eps(ensemble.points());
    let stencil = divergence_stencil(ensemble.points(), eps);
    let mut breakdown = None;
    let grads = model.displacements_backward(ensemble, cond, stencil.view(), &mut |y| {
        let (b, g) = step_loss_from_outputs(ensemble, spec, dt, eps, y.view(), true)?;
        breakdown = Some(b);
        Ok(g.expect("gradient requested"))
    })?;
    Ok((breakdown.expect("seed closure ran"), grads))
}

/// Per-step losses on the states `0..T` of a trajectory (the last state has
/// no successor and contributes no term).
pub fn step_losses<M: JkoModel + ?Sized>(
    model: &M,
    traj: &Trajectory,
    dt: f64,
) -> Result<Vec<StepLossBreakdown>> {
    traj.states[..traj.len()]
        .iter()
        .enumerate()
        .map(|(t, state)| {
            jko_step_loss(model, state, &traj.cond, &traj.energy, dt).map_err(|e| e.at(traj.index, t))
        })
        .collect()
}

/// `sum_t decay^t * loss_t` over the trajectory.
pub fn trajectory_loss<M: JkoModel + ?Sized>(model: &M, traj: &Trajectory, dt: f64, decay: f64) -> Result<f64> {
    check_decay(decay)?;
    let losses: Vec<f64> = step_losses(model, traj, dt)?.iter().map(|b| b.total).collect();
    Ok(discounted_sum(&losses, decay))
}

pub fn discounted_sum(losses: &[f64], decay: f64) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for l in losses {
        total += weight * l;
        weight *= decay;
    }
    total
}

pub(crate) fn check_decay(decay: f64) -> Result<()> {
    if !(decay > 0.0 && decay <= 1.0) {
        return Err(Error::Parameter(format!("decay must lie in (0, 1], got {decay}")));
    }
    Ok(())
}

/// Prefix sums of per-step losses, one row per trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulatedLoss {
    pub matrix: Array2<f64>,
}

impl AccumulatedLoss {
    /// Build from per-step losses; every row must have the same length.
    pub fn from_step_losses(rows: &[Vec<f64>]) -> Result<Self> {
        let b = rows.len();
        let t = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != t) {
            return Err(Error::structural("trajectories in a batch must share their length"));
        }
        let mut matrix = Array2::zeros((b, t));
        for (i, row) in rows.iter().enumerate() {
            let mut acc = 0.0;
            for (j, l) in row.iter().enumerate() {
                acc += l;
                matrix[[i, j]] = acc;
            }
        }
        Ok(Self { matrix })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.matrix.dim()
    }
}

/// Accumulated loss of `model` on a batch of trajectories (no gradients).
pub fn accumulated_loss<M: JkoModel + ?Sized>(
    model: &M,
    batch: &[Trajectory],
    dt: f64,
) -> Result<AccumulatedLoss> {
    if let Some(first) = batch.first() {
        if batch.iter().any(|t| t.len() != first.len()) {
            return Err(Error::structural("ragged trajectory lengths in batch"));
        }
    }
    let rows = batch
        .iter()
        .map(|traj| step_losses(model, traj, dt).map(|v| v.iter().map(|b| b.total).collect()))
        .collect::<Result<Vec<Vec<f64>>>>()?;
    AccumulatedLoss::from_step_losses(&rows)
}

/// True iff every entry of `candidate` is `<=` the matching entry of `reference`.
pub fn better_than_birth(candidate: &AccumulatedLoss, reference: &AccumulatedLoss) -> Result<bool> {
    if candidate.shape() != reference.shape() {
        return Err(Error::structural(format!(
            "accumulated-loss shapes differ: {:?} vs {:?}",
            candidate.shape(),
            reference.shape()
        )));
    }
    Ok(candidate
        .matrix
        .iter()
        .zip(reference.matrix.iter())
        .all(|(c, r)| c <= r))
}
