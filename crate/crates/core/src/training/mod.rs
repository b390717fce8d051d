//! The Learn-to-Evolve controller.
//!
//! Each outer iteration draws initial densities, rolls them out with the
//! current operator (the data generator), and records the generator's
//! accumulated loss on that data as the reference. Inner updates follow until
//! the updated operator is no worse than the generator on every entry, or the
//! per-iteration or global step cap is reached. During the first `warmup`
//! outer iterations each round gets exactly one update.

mod family;
mod log;
mod optim;
mod rng;
mod schedule;
mod trajectory;

pub use family::{
    conditioning_for, sample_initials, uniform_rectangle, uniform_triangle, BarenblattFamily, EnergyFamily,
    GaussianFamily, InitialFamilySpec, InitialSample, UniformBox, UniformRectTri,
};
pub use log::{audit_events, parse_event_log, read_ledger, write_ledger, Audit, Event, LedgerRow, StopReason};
pub use optim::AdamW;
pub use rng::{keyed_rng, KeyedRng};
pub use schedule::{lr_at, LrSchedule};
pub use trajectory::{advance, generate_trajectory, par_map, thread_count, GenerateOptions, Trajectory};

use ndarray::Array2;

use crate::energy::EnergySpec;
use crate::error::{Error, Result};
use crate::geometry::ParticleEnsemble;
use crate::loss::{check_decay, jko_step_loss_with_grad, AccumulatedLoss, StepLossBreakdown};
use crate::operator::{Conditioning, JkoModel};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub dt: f64,
    /// Steps per generated trajectory (`T`).
    pub steps: usize,
    /// Trajectories per outer iteration (`B`).
    pub batch: usize,
    /// Warm-up outer iterations with a single update each (`K0`).
    pub warmup: usize,
    /// Update cap per outer iteration (`S_in`).
    pub inner_max: usize,
    /// Global update budget (`S_max`).
    pub budget: usize,
    pub decay: f64,
    pub seed: u64,
    pub lr: LrSchedule,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub family: InitialFamilySpec,
    pub energy: EnergyFamily,
    /// Recenter generated states (aggregation runs).
    pub recenter: bool,
    /// Checkpoint every this many outer iterations; 0 means only at the end.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!("dt must be > 0, got {}", self.dt)));
        }
        for (name, v) in [
            ("steps", self.steps),
            ("batch", self.batch),
            ("inner_max", self.inner_max),
            ("budget", self.budget),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        check_decay(self.decay).map_err(|e| Error::config(e.to_string()))?;
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("clip_norm must be > 0"));
            }
        }
        self.lr.validate()?;
        self.family.validate()?;
        self.energy.validate()
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(self.weight_decay, self.clip_norm)
    }
}

/// Receives records as training produces them.
pub trait TrainObserver {
    fn event(&mut self, _event: &Event) -> Result<()> {
        Ok(())
    }

    fn ledger(&mut self, _rows: &[LedgerRow]) -> Result<()> {
        Ok(())
    }

    /// Called every `checkpoint_every` outer iterations and once at the end.
    fn checkpoint(&mut self, _model: &dyn JkoModel, _outer: usize, _global: usize) -> Result<()> {
        Ok(())
    }
}

/// Collects events in memory and ignores everything else.
#[derive(Debug, Default)]
pub struct EventRecorder {
    pub events: Vec<Event>,
    pub ledger: Vec<LedgerRow>,
}

impl TrainObserver for EventRecorder {
    fn event(&mut self, event: &Event) -> Result<()> {
        self.events.push(event.clone());
        Ok(())
    }

    fn ledger(&mut self, rows: &[LedgerRow]) -> Result<()> {
        self.ledger.extend_from_slice(rows);
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub global_steps: usize,
    pub outer_iters: usize,
}

struct LossItem<'a> {
    traj: usize,
    t: usize,
    state: &'a ParticleEnsemble,
    cond: &'a Conditioning,
    energy: &'a EnergySpec,
    weight: f64,
}

struct Evaluation {
    breakdowns: Vec<StepLossBreakdown>,
    grads: Vec<Array2<f64>>,
    objective: f64,
}

fn evaluate<M: JkoModel + ?Sized>(model: &M, items: &[LossItem<'_>], dt: f64) -> Result<Evaluation> {
    let results = par_map(items, |_, it| {
        jko_step_loss_with_grad(model, it.state, it.cond, it.energy, dt).map_err(|e| e.at(it.traj, it.t))
    });
    let mut grads: Vec<Array2<f64>> = model.params().iter().map(|p| Array2::zeros(p.dim())).collect();
    let mut breakdowns = Vec::with_capacity(items.len());
    let mut objective = 0.0;
    for (it, r) in items.iter().zip(results) {
        let (b, g) = r?;
        objective += it.weight * b.total;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            acc.scaled_add(it.weight, gi);
        }
        breakdowns.push(b);
    }
    Ok(Evaluation {
        breakdowns,
        grads,
        objective,
    })
}

struct Batch {
    trajectories: Vec<Trajectory>,
    /// Steps shared by every trajectory; the accumulated loss covers these.
    common: usize,
}

impl Batch {
    fn items(&self, decay: f64) -> Vec<LossItem<'_>> {
        let b = self.trajectories.len() as f64;
        let mut items = Vec::new();
        for traj in &self.trajectories {
            let mut w = 1.0 / b;
            for t in 0..traj.len() {
                items.push(LossItem {
                    traj: traj.index,
                    t,
                    state: &traj.states[t],
                    cond: &traj.cond,
                    energy: &traj.energy,
                    weight: w,
                });
                w *= decay;
            }
        }
        items
    }

    fn accumulated(&self, items: &[LossItem<'_>], eval: &Evaluation) -> Result<AccumulatedLoss> {
        let mut rows = vec![Vec::with_capacity(self.common); self.trajectories.len()];
        for (it, b) in items.iter().zip(&eval.breakdowns) {
            if it.t < self.common {
                rows[it.traj].push(b.total);
            }
        }
        AccumulatedLoss::from_step_losses(&rows)
    }
}

fn generate_batch<M: JkoModel + ?Sized>(model: &M, cfg: &TrainConfig, outer: usize) -> Result<Batch> {
    let initials = sample_initials(&cfg.family, &cfg.energy, cfg.batch, cfg.seed, outer as u64)?;
    let opts = GenerateOptions { recenter: cfg.recenter };
    let trajectories = par_map(&initials, |b, s| {
        generate_trajectory(model, s.ensemble.clone(), s.cond.clone(), s.energy.clone(), cfg.steps, opts).map(
            |mut t| {
                t.index = b;
                t
            },
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let common = trajectories.iter().map(Trajectory::len).min().unwrap_or(0);
    Ok(Batch { trajectories, common })
}

fn ledger_rows(items: &[LossItem<'_>], eval: &Evaluation, outer: usize, inner: usize, lr: f64) -> Vec<LedgerRow> {
    items
        .iter()
        .zip(&eval.breakdowns)
        .map(|(it, b)| LedgerRow {
            outer_iter: outer,
            inner_step: inner,
            traj: it.traj,
            t: it.t,
            transport: b.transport,
            energy: b.energy,
            total: b.total,
            lr,
        })
        .collect()
}

/// Apply one optimizer step, undoing it if any parameter goes non-finite.
fn guarded_step<M: JkoModel + ?Sized>(
    model: &mut M,
    opt: &mut AdamW,
    grads: &[Array2<f64>],
    lr: f64,
    global: usize,
) -> Result<f64> {
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::Diverged {
            step: global,
            reason: "non-finite gradient".into(),
        });
    }
    let backup: Vec<Array2<f64>> = model.params().to_vec();
    let norm = opt.step(model.params_mut(), grads, lr);
    if model.params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
        for (p, b) in model.params_mut().iter_mut().zip(backup) {
            *p = b;
        }
        return Err(Error::Diverged {
            step: global,
            reason: "non-finite parameters after update".into(),
        });
    }
    Ok(norm)
}

/// Train `model` in place with data it generates itself.
pub fn learn_to_evolve<M: JkoModel>(
    model: &mut M,
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.family.dim() != model.dim() {
        return Err(Error::config(format!(
            "initial family is {}-dimensional but the operator is {}-dimensional",
            cfg.family.dim(),
            model.dim()
        )));
    }
    let mut opt = cfg.optimizer();
    let mut global = 0;
    let mut outer = 0;
    while global < cfg.budget {
        let batch = generate_batch(&*model, cfg, outer)?;
        let items = batch.items(cfg.decay);
        let mut eval = evaluate(&*model, &items, cfg.dt)?;
        let reference = batch.accumulated(&items, &eval)?;
        observer.event(&Event::Regen {
            outer,
            global,
            reference: reference.matrix.clone(),
        })?;
        let cap = if outer < cfg.warmup { 1 } else { cfg.inner_max };
        let mut inner = 0;
        let (reason, candidate) = loop {
            let lr = lr_at(&cfg.lr, global);
            observer.ledger(&ledger_rows(&items, &eval, outer, inner, lr))?;
            let grad_norm = guarded_step(model, &mut opt, &eval.grads, lr, global)?;
            inner += 1;
            global += 1;
            observer.event(&Event::Inner {
                outer,
                inner,
                global,
                objective: eval.objective,
                lr,
                grad_norm,
            })?;
            if global >= cfg.budget {
                break (StopReason::SmaxCap, None);
            }
            if inner >= cap {
                break (StopReason::SinCap, None);
            }
            eval = evaluate(&*model, &items, cfg.dt)?;
            let candidate = batch.accumulated(&items, &eval)?;
            if crate::loss::better_than_birth(&candidate, &reference)? {
                break (StopReason::Btb, Some(candidate.matrix));
            }
        };
        observer.event(&Event::Stop {
            outer,
            inner,
            global,
            reason,
            reference: reference.matrix,
            candidate,
        })?;
        outer += 1;
        if cfg.checkpoint_every > 0 && outer % cfg.checkpoint_every == 0 && global < cfg.budget {
            observer.checkpoint(&*model, outer, global)?;
        }
    }
    observer.checkpoint(&*model, outer, global)?;
    Ok(TrainOutcome {
        global_steps: global,
        outer_iters: outer,
    })
}

/// Same optimizer and budget as [`learn_to_evolve`] on a frozen set of states.
pub fn train_baseline<M: JkoModel>(
    model: &mut M,
    cfg: &TrainConfig,
    data: &[InitialSample],
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("baseline training needs a non-empty frozen dataset"));
    }
    let w = 1.0 / data.len() as f64;
    let items: Vec<LossItem<'_>> = data
        .iter()
        .enumerate()
        .map(|(i, s)| LossItem {
            traj: i,
            t: 0,
            state: &s.ensemble,
            cond: &s.cond,
            energy: &s.energy,
            weight: w,
        })
        .collect();
    let mut opt = cfg.optimizer();
    for global in 0..cfg.budget {
        let eval = evaluate(&*model, &items, cfg.dt)?;
        let lr = lr_at(&cfg.lr, global);
        observer.ledger(&ledger_rows(&items, &eval, 0, global, lr))?;
        let grad_norm = guarded_step(model, &mut opt, &eval.grads, lr, global)?;
        observer.event(&Event::Inner {
            outer: 0,
            inner: global + 1,
            global: global + 1,
            objective: eval.objective,
            lr,
            grad_norm,
        })?;
        if cfg.checkpoint_every > 0 && (global + 1) % cfg.checkpoint_every == 0 && global + 1 < cfg.budget {
            observer.checkpoint(&*model, 0, global + 1)?;
        }
    }
    observer.checkpoint(&*model, 0, cfg.budget)?;
    Ok(TrainOutcome {
        global_steps: cfg.budget,
        outer_iters: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::{evaluate_energy, ExternalPotential};
    use crate::loss::jko_step_loss;
    use crate::operator::LinearStub;
    use ndarray::array;
    use std::sync::Arc;

    fn quad() -> EnergySpec {
        EnergySpec::External(ExternalPotential::Quadratic)
    }

    fn fixed_start() -> ParticleEnsemble {
        ParticleEnsemble::new(
            array![[0.5, -0.2], [0.1, 0.3], [-0.4, 0.0], [0.8, 0.6]],
            array![0.2, 0.9, 0.5, 0.4],
            0,
        )
        .unwrap()
    }

    fn base_config() -> TrainConfig {
        TrainConfig {
            dt: 0.1,
            steps: 3,
            batch: 2,
            warmup: 1,
            inner_max: 5,
            budget: 1,
            decay: 1.0,
            seed: 0,
            lr: LrSchedule::Constant { lr: 1e-2 },
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            family: InitialFamilySpec::Fixed(Arc::new(fixed_start())),
            energy: EnergyFamily::Fixed(quad()),
            recenter: false,
            checkpoint_every: 0,
        }
    }

    #[test]
    fn budget_of_one_takes_one_step() {
        let mut stub = LinearStub::zeros(2);
        let mut rec = EventRecorder::default();
        let out = learn_to_evolve(&mut stub, &base_config(), &mut rec).unwrap();
        assert_eq!(out.global_steps, 1);
        let inners = rec.events.iter().filter(|e| matches!(e, Event::Inner { .. })).count();
        assert_eq!(inners, 1);
        assert_ne!(stub.params()[0], Array2::<f64>::zeros((2, 2)));
    }

    #[test]
    fn identity_reference_is_energy_prefix() {
        let mut stub = LinearStub::zeros(2);
        let mut rec = EventRecorder::default();
        learn_to_evolve(&mut stub, &base_config(), &mut rec).unwrap();
        let e = 2.0 * 0.1 * evaluate_energy(&quad(), &fixed_start()).unwrap();
        match &rec.events[0] {
            Event::Regen { reference, .. } => {
                assert_eq!(reference.dim(), (2, 3));
                for row in reference.outer_iter() {
                    for (t, v) in row.iter().enumerate() {
                        assert!((v - e * (t + 1) as f64).abs() < 1e-14);
                    }
                }
            }
            other => panic!("first event should be a regeneration, got {other:?}"),
        }
    }

    #[test]
    fn loop_contracts_hold() {
        let mut cfg = base_config();
        cfg.budget = 60;
        cfg.warmup = 4;
        cfg.inner_max = 6;
        let mut stub = LinearStub::zeros(2);
        let mut rec = EventRecorder::default();
        learn_to_evolve(&mut stub, &cfg, &mut rec).unwrap();
        let audit = audit_events(&rec.events, 60, 4, 6);
        assert!(audit.passed(), "{audit:?}");
        assert_eq!(audit.total_inner, 60);
    }

    #[test]
    fn runs_are_deterministic() {
        let mut cfg = base_config();
        cfg.budget = 15;
        let run = || {
            let mut stub = LinearStub::zeros(2);
            let mut rec = EventRecorder::default();
            learn_to_evolve(&mut stub, &cfg, &mut rec).unwrap();
            (stub.params().to_vec(), rec.ledger)
        };
        assert_eq!(run(), run());
    }

    /// On the quadratic well the exact one-step map is `x -> x / (1 + dt)`; a
    /// linear operator trained on its own rollouts must find it.
    #[test]
    fn fixed_point_on_quadratic_well() {
        let mut cfg = base_config();
        cfg.budget = 1500;
        cfg.warmup = 20;
        cfg.inner_max = 20;
        cfg.lr = LrSchedule::Cosine {
            start: 2e-2,
            end: 1e-4,
            steps: 1500,
        };
        let mut stub = LinearStub::zeros(2);
        learn_to_evolve(&mut stub, &cfg, &mut EventRecorder::default()).unwrap();
        let exact = LinearStub::scaling(2, -cfg.dt / (1.0 + cfg.dt));
        let opts = GenerateOptions::default();
        let a = generate_trajectory(&stub, fixed_start(), Conditioning::none(), quad(), 3, opts).unwrap();
        let b = generate_trajectory(&exact, fixed_start(), Conditioning::none(), quad(), 3, opts).unwrap();
        for (sa, sb) in a.states.iter().zip(&b.states) {
            let per_particle = (&sa.points() - &sb.points()).mapv(|v| v * v).sum() / sa.len() as f64;
            assert!(per_particle < 1e-3, "{per_particle}");
        }
    }

    /// Gradients from a generated trajectory equal those from a deep copy,
    /// and do not move when the parameters change after generation.
    #[test]
    fn trajectories_are_detached() {
        let stub = LinearStub::scaling(2, 0.05);
        let traj = generate_trajectory(&stub, fixed_start(), Conditioning::none(), quad(), 2, Default::default()).unwrap();
        let copy = traj.clone();
        let mut moved = stub.clone();
        moved.params_mut()[0][[0, 1]] += 0.3;
        let generated_again = generate_trajectory(&stub, fixed_start(), Conditioning::none(), quad(), 2, Default::default()).unwrap();
        for (a, b) in traj.states.iter().zip(&generated_again.states) {
            assert_eq!(a, b);
        }
        let (_, g1) = jko_step_loss_with_grad(&moved, &traj.states[1], &traj.cond, &traj.energy, 0.1).unwrap();
        let (_, g2) = jko_step_loss_with_grad(&moved, &copy.states[1], &copy.cond, &copy.energy, 0.1).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn baseline_single_state_single_step() {
        let mut cfg = base_config();
        cfg.budget = 1;
        let data = vec![InitialSample {
            ensemble: fixed_start(),
            cond: Conditioning::none(),
            energy: quad(),
        }];
        let mut stub = LinearStub::zeros(2);
        let before = jko_step_loss(&stub, &fixed_start(), &Conditioning::none(), &quad(), 0.1).unwrap();
        let mut rec = EventRecorder::default();
        train_baseline(&mut stub, &cfg, &data, &mut rec).unwrap();
        assert_eq!(rec.events.len(), 1);
        let after = jko_step_loss(&stub, &fixed_start(), &Conditioning::none(), &quad(), 0.1).unwrap();
        assert!(after.total < before.total);
    }

    #[test]
    fn divergence_aborts_and_restores() {
        let mut stub = LinearStub::zeros(2);
        let mut opt = AdamW::new(0.0, None);
        let grads = vec![array![[f64::NAN, 0.0], [0.0, 0.0]], array![[0.0, 0.0]]];
        let before = stub.params().to_vec();
        assert!(matches!(guarded_step(&mut stub, &mut opt, &grads, 1e-3, 7), Err(Error::Diverged { step: 7, .. })));
        assert_eq!(stub.params(), before.as_slice());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = base_config();
        cfg.dt = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = base_config();
        cfg.budget = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        let mut cfg = base_config();
        cfg.decay = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
