use ndarray::Array1;

use crate::energy::EnergySpec;
use crate::error::{Error, Result};
use crate::geometry::{apply_displacement, default_eps, divergence_stencil, recenter, split_stencil_outputs, ParticleEnsemble};
use crate::operator::{Conditioning, JkoModel};

/// States produced by repeatedly applying an operator, with the divergences
/// that link consecutive density values.
///
/// States are plain arrays: nothing here refers back to the parameters that
/// produced them.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// Position of this trajectory in its batch.
    pub index: usize,
    pub states: Vec<ParticleEnsemble>,
    /// `divergences[t]` maps `states[t]` to `states[t + 1]`.
    pub divergences: Vec<Array1<f64>>,
    pub cond: Conditioning,
    pub energy: EnergySpec,
    /// `(step, particle)` of the non-finite state that ended generation early.
    pub truncated: Option<(usize, usize)>,
}

impl Trajectory {
    /// Number of steps, i.e. `states.len() - 1`.
    pub fn len(&self) -> usize {
        self.states.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Check `rho[t+1] = rho[t] exp(-div[t])` and the step counters.
    pub fn check_chain(&self, rtol: f64) -> Result<()> {
        if self.states[0].step() != 0 {
            return Err(Error::structural("trajectory must start at step 0"));
        }
        for (t, w) in self.states.windows(2).enumerate() {
            if w[1].step() != w[0].step() + 1 {
                return Err(Error::structural(format!("step counter breaks at {t}")));
            }
            for (i, ((a, b), d)) in w[0]
                .densities()
                .iter()
                .zip(w[1].densities().iter())
                .zip(self.divergences[t].iter())
                .enumerate()
            {
                let expect = a * (-d).exp();
                if (b - expect).abs() > rtol * expect.abs() {
                    return Err(Error::numeric(i, format!("density chain broken at step {t}")).at(self.index, t));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GenerateOptions {
    /// Translate every new state so its mean is at the origin.
    pub recenter: bool,
}

/// Apply `model` `steps` times starting from `initial`.
///
/// A non-finite state ends the trajectory early; the cause is kept in
/// [`Trajectory::truncated`].
pub fn generate_trajectory<M: JkoModel + ?Sized>(
    model: &M,
    initial: ParticleEnsemble,
    cond: Conditioning,
    energy: EnergySpec,
    steps: usize,
    opts: GenerateOptions,
) -> Result<Trajectory> {
    let mut traj = Trajectory {
        index: 0,
        states: vec![initial.with_step(0)],
        divergences: Vec::with_capacity(steps),
        cond,
        energy,
        truncated: None,
    };
    for t in 0..steps {
        let state = &traj.states[t];
        match advance(model, state, &traj.cond, opts) {
            Ok((next, div)) => {
                traj.states.push(next);
                traj.divergences.push(div);
            }
            Err(Error::Numeric { index, .. }) => {
                traj.truncated = Some((t, index));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(traj)
}

/// One model step from `state`, returning the new state and the divergence used.
pub fn advance<M: JkoModel + ?Sized>(
    model: &M,
    state: &ParticleEnsemble,
    cond: &Conditioning,
    opts: GenerateOptions,
) -> Result<(ParticleEnsemble, Array1<f64>)> {
    let eps = default_eps(state.points());
    let stencil = divergence_stencil(state.points(), eps);
    let out = model.displacements(state, cond, stencil.view())?;
    let (disp, div) = split_stencil_outputs(out.view(), state.len(), eps)?;
    let next = apply_displacement(state, disp.view(), div.view())?;
    let next = if opts.recenter { recenter(&next) } else { next };
    Ok((next, div))
}

/// Worker count from `WGFLOW_THREADS`, defaulting to the available cores.
pub fn thread_count() -> usize {
    std::env::var("WGFLOW_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Map `f` over `items` on up to [`thread_count`] threads. Results come back
/// in input order, so callers reduce deterministically.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(usize, &T) -> U + Sync) -> Vec<U> {
    let workers = thread_count().min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, x)| f(i, x)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                let f = &f;
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(k, x)| f(c * chunk + k, x))
                        .collect::<Vec<U>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::ExternalPotential;
    use crate::operator::LinearStub;
    use ndarray::{array, Array2};

    fn start() -> ParticleEnsemble {
        ParticleEnsemble::new(array![[0.5, -0.2], [0.1, 0.3], [-0.4, 0.0]], array![0.2, 0.9, 0.5], 0).unwrap()
    }

    fn quad() -> EnergySpec {
        EnergySpec::External(ExternalPotential::Quadratic)
    }

    #[test]
    fn zero_steps_and_zero_operator() {
        let stub = LinearStub::zeros(2);
        let t0 = generate_trajectory(&stub, start(), Conditioning::none(), quad(), 0, Default::default()).unwrap();
        assert_eq!(t0.states.len(), 1);
        let t3 = generate_trajectory(&stub, start(), Conditioning::none(), quad(), 3, Default::default()).unwrap();
        assert_eq!(t3.len(), 3);
        for s in &t3.states {
            assert_eq!(s.points(), start().points());
            assert_eq!(s.densities(), start().densities());
        }
    }

    #[test]
    fn linear_field_closed_form() {
        let delta = 0.1;
        let stub = LinearStub::scaling(2, delta);
        let traj = generate_trajectory(&stub, start(), Conditioning::none(), quad(), 4, Default::default()).unwrap();
        traj.check_chain(1e-14).unwrap();
        let x0 = start();
        for (t, s) in traj.states.iter().enumerate() {
            assert_eq!(s.step(), t);
            let scale = (1.0 + delta).powi(t as i32);
            let decay = (-(t as f64) * 2.0 * delta).exp();
            for (a, b) in s.points().iter().zip(x0.points().iter()) {
                assert!((a - scale * b).abs() < 1e-12);
            }
            for (a, b) in s.densities().iter().zip(x0.densities().iter()) {
                assert!((a - decay * b).abs() < 1e-10 * b);
            }
        }
    }

    #[test]
    fn blow_up_truncates() {
        let mut stub = LinearStub::zeros(2);
        stub.params_mut()[0].assign(&(Array2::eye(2) * 1e300));
        let traj = generate_trajectory(&stub, start(), Conditioning::none(), quad(), 5, Default::default()).unwrap();
        assert!(traj.len() < 5);
        assert!(traj.truncated.is_some());
    }

    #[test]
    fn recentering_keeps_chain() {
        let mut stub = LinearStub::scaling(2, 0.05);
        stub.params_mut()[1].assign(&array![[0.3, -0.1]]);
        let opts = GenerateOptions { recenter: true };
        let traj = generate_trajectory(&stub, start(), Conditioning::none(), quad(), 3, opts).unwrap();
        traj.check_chain(1e-14).unwrap();
        for s in &traj.states[1..] {
            assert!(s.mean().iter().all(|m| m.abs() < 1e-15));
        }
    }

    #[test]
    fn par_map_preserves_order() {
        let xs: Vec<usize> = (0..37).collect();
        let ys = par_map(&xs, |i, x| i * 1000 + x);
        assert_eq!(ys, (0..37).map(|i| i * 1001).collect::<Vec<_>>());
    }
}
