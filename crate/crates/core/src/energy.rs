//! Energy functionals evaluated by Monte Carlo over particle ensembles.
//!
//! Every estimator is an average over the ensemble's own sample points, so
//! the density values only enter where the integrand needs them (internal
//! and KL energies). Each kind also exposes the derivative of its estimate
//! with respect to the particle positions and density values; the loss uses
//! these to seed reverse-mode differentiation through the operator.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{DisplacementField, DivergenceEstimate, ParticleEnsemble};

/// Attraction-repulsion kernel `K(r) = r^(q+1)/(q+1) - r^(p+1)/(p+1)`.
pub fn kernel_value(r: f64, p: f64, q: f64) -> Result<f64> {
    check_pq(p, q)?;
    if r < 0.0 || !r.is_finite() {
        return Err(Error::Domain(format!("kernel radius must be finite and >= 0, got {r}")));
    }
    if r == 0.0 && p <= -1.0 {
        return Err(Error::Domain(format!("K(0) diverges for p = {p} <= -1")));
    }
    Ok(kernel(r, p, q))
}

#[inline]
fn kernel(r: f64, p: f64, q: f64) -> f64 {
    r.powf(q + 1.0) / (q + 1.0) - r.powf(p + 1.0) / (p + 1.0)
}

/// Radial force `F(r) = r^p - r^q = -K'(r)`; positive means repulsion.
#[inline]
pub fn kernel_force(r: f64, p: f64, q: f64) -> f64 {
    r.powf(p) - r.powf(q)
}

fn check_pq(p: f64, q: f64) -> Result<()> {
    if !(p.is_finite() && q.is_finite()) || p >= q {
        return Err(Error::Parameter(format!("interaction kernel needs p < q, got p={p}, q={q}")));
    }
    Ok(())
}

/// Isotropic Gaussian mixture with an analytic density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

impl GaussianMixture {
    pub fn standard(dim: usize) -> Self {
        Self {
            weights: vec![1.0],
            means: vec![vec![0.0; dim]],
            stds: vec![1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return Err(Error::Parameter("mixture needs matching, non-empty weights/means/stds".into()));
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return Err(Error::Parameter("mixture means must share one positive dimension".into()));
        }
        if self.weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Parameter("mixture weights must be positive".into()));
        }
        if self.stds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::Parameter("mixture standard deviations must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Log-density and its gradient, via a max-shifted log-sum-exp.
    pub fn log_density_and_grad(&self, x: ArrayView1<'_, f64>) -> (f64, Array1<f64>) {
        let d = x.len() as f64;
        let wsum = self.total_weight();
        let mut logs = Vec::with_capacity(self.weights.len());
        for ((w, mu), s) in self.weights.iter().zip(&self.means).zip(&self.stds) {
            let r2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            let lg = (w / wsum).ln()
                - 0.5 * d * (2.0 * std::f64::consts::PI * s * s).ln()
                - 0.5 * r2 / (s * s);
            logs.push(lg);
        }
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        let mut grad = Array1::zeros(x.len());
        for (k, lg) in logs.iter().enumerate() {
            let resp = (lg - top).exp();
            norm += resp;
            let s2 = self.stds[k] * self.stds[k];
            for j in 0..x.len() {
                grad[j] -= resp * (x[j] - self.means[k][j]) / s2;
            }
        }
        grad /= norm;
        (top + norm.ln(), grad)
    }

    pub fn log_density(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.log_density_and_grad(x).0
    }

    pub fn density(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.log_density(x).exp()
    }

    /// Draw `n` samples with their exact density values.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ParticleEnsemble> {
        self.validate()?;
        let d = self.dim();
        let wsum = self.total_weight();
        let mut points = Array2::zeros((n, d));
        for mut row in points.outer_iter_mut() {
            let u: f64 = rng.gen::<f64>() * wsum;
            let mut acc = 0.0;
            let mut k = self.weights.len() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            for j in 0..d {
                let z: f64 = rng.sample(StandardNormal);
                row[j] = self.means[k][j] + self.stds[k] * z;
            }
        }
        let densities = points.outer_iter().map(|x| self.density(x)).collect();
        ParticleEnsemble::new(points, densities, 0)
    }
}

/// Target of a KL energy: its sample points (fed to the operator) and its
/// analytic density.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetHandle {
    samples: ParticleEnsemble,
    density: GaussianMixture,
}

impl TargetHandle {
    pub fn new(samples: ParticleEnsemble, density: GaussianMixture) -> Result<Self> {
        density.validate()?;
        if samples.dim() != density.dim() {
            return Err(Error::structural("target samples and density disagree on dimension"));
        }
        for (i, x) in samples.points().outer_iter().enumerate() {
            let rho = density.density(x);
            if !(rho > 0.0) {
                return Err(Error::numeric(i, "target density is not positive at its own sample"));
            }
        }
        Ok(Self { samples, density })
    }

    pub fn sampled<R: Rng + ?Sized>(density: GaussianMixture, n: usize, rng: &mut R) -> Result<Self> {
        let samples = density.sample(n, rng)?;
        Self::new(samples, density)
    }

    pub fn samples(&self) -> &ParticleEnsemble {
        &self.samples
    }

    pub fn density(&self) -> &GaussianMixture {
        &self.density
    }
}

/// Registry of external potentials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "potential", rename_all = "snake_case")]
pub enum ExternalPotential {
    /// `|x|^2 / 2`.
    Quadratic,
    /// Radial potential tabulated on increasing radii, linearly interpolated
    /// and held constant beyond the table ends.
    Tabulated { radii: Vec<f64>, values: Vec<f64> },
}

impl ExternalPotential {
    pub fn validate(&self) -> Result<()> {
        if let ExternalPotential::Tabulated { radii, values } = self {
            if radii.len() < 2 || radii.len() != values.len() {
                return Err(Error::Parameter("tabulated potential needs >= 2 matching knots".into()));
            }
            if radii.windows(2).any(|w| !(w[1] > w[0])) || radii[0] < 0.0 {
                return Err(Error::Parameter("tabulated radii must be increasing and >= 0".into()));
            }
        }
        Ok(())
    }

    pub fn value(&self, x: ArrayView1<'_, f64>) -> f64 {
        match self {
            ExternalPotential::Quadratic => 0.5 * x.dot(&x),
            ExternalPotential::Tabulated { radii, values } => {
                let r = x.dot(&x).sqrt();
                let (k, w) = locate(radii, r);
                values[k] * (1.0 - w) + values[k + 1] * w
            }
        }
    }

    pub fn grad(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        match self {
            ExternalPotential::Quadratic => x.to_owned(),
            ExternalPotential::Tabulated { radii, values } => {
                let r = x.dot(&x).sqrt();
                if r == 0.0 || r <= radii[0] || r >= radii[radii.len() - 1] {
                    return Array1::zeros(x.len());
                }
                let (k, _) = locate(radii, r);
                let slope = (values[k + 1] - values[k]) / (radii[k + 1] - radii[k]);
                x.mapv(|v| slope * v / r)
            }
        }
    }
}

fn locate(knots: &[f64], r: f64) -> (usize, f64) {
    let n = knots.len();
    if r <= knots[0] {
        return (0, 0.0);
    }
    if r >= knots[n - 1] {
        return (n - 2, 1.0);
    }
    let k = knots.partition_point(|&k| k <= r) - 1;
    (k, (r - knots[k]) / (knots[k + 1] - knots[k]))
}

/// Which energy functional drives the flow.
#[derive(Debug, Clone, PartialEq)]
pub enum EnergySpec {
    Interaction { p: f64, q: f64 },
    PorousInternal { exponent: f64 },
    External(ExternalPotential),
    Kl(Arc<TargetHandle>),
}

impl EnergySpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            EnergySpec::Interaction { p, q } => check_pq(*p, *q),
            EnergySpec::PorousInternal { exponent } => {
                if !(*exponent > 1.0 && exponent.is_finite()) {
                    return Err(Error::Parameter(format!(
                        "porous exponent must be > 1, got {exponent}"
                    )));
                }
                Ok(())
            }
            EnergySpec::External(pot) => pot.validate(),
            EnergySpec::Kl(_) => Ok(()),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            EnergySpec::Interaction { .. } => "interaction",
            EnergySpec::PorousInternal { .. } => "porous",
            EnergySpec::External(_) => "external",
            EnergySpec::Kl(_) => "kl",
        }
    }
}

/// Energy estimate with its derivatives with respect to every particle position
/// and every particle density value.
#[derive(Debug, Clone)]
pub struct EnergyGrad {
    pub value: f64,
    pub d_points: Array2<f64>,
    pub d_densities: Array1<f64>,
}

/// Monte-Carlo energy estimate over the ensemble.
pub fn evaluate_energy(spec: &EnergySpec, ensemble: &ParticleEnsemble) -> Result<f64> {
    energy_terms(spec, ensemble.points(), ensemble.densities(), false).map(|g| g.value)
}

/// Energy of `(I + V)# rho`, using `|det grad T| ~ exp(div V)`.
pub fn energy_of_pushforward(
    spec: &EnergySpec,
    ensemble: &ParticleEnsemble,
    field: &dyn DisplacementField,
    div: &DivergenceEstimate,
) -> Result<f64> {
    let disp = field.eval(ensemble.points())?;
    if disp.dim() != ensemble.points().dim() || div.values.len() != ensemble.len() {
        return Err(Error::structural("field or divergence does not match the ensemble"));
    }
    let moved = &ensemble.points() + &disp;
    let rho: Array1<f64> = ensemble
        .densities()
        .iter()
        .zip(div.values.iter())
        .map(|(r, dv)| r * (-dv).exp())
        .collect();
    energy_terms(spec, moved.view(), rho.view(), false).map(|g| g.value)
}

/// Energy estimate at explicit points/densities, optionally with derivatives.
///
/// With `with_grad == false` the derivative arrays are empty.
pub fn energy_terms(
    spec: &EnergySpec,
    points: ArrayView2<'_, f64>,
    densities: ArrayView1<'_, f64>,
    with_grad: bool,
) -> Result<EnergyGrad> {
    spec.validate()?;
    let (m, d) = points.dim();
    let inv_m = 1.0 / m as f64;
    let (gm, gd) = if with_grad { (m, d) } else { (0, 0) };
    let mut d_points = Array2::zeros((gm, gd));
    let mut d_densities = Array1::zeros(gm);
    let value = match spec {
        EnergySpec::Interaction { p, q } => {
            let (p, q) = (*p, *q);
            let half_inv_m2 = 0.5 * inv_m * inv_m;
            let mut total = 0.0;
            for i in 0..m {
                let xi = points.row(i);
                let mut row = 0.0;
                for j in 0..m {
                    if i == j {
                        // K(0) = 0
                        continue;
                    }
                    let xj = points.row(j);
                    let r2: f64 = xi.iter().zip(xj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    let r = r2.sqrt();
                    if r == 0.0 {
                        if p <= -1.0 {
                            return Err(Error::numeric(i, "coincident particles with K(0) infinite"));
                        }
                        continue;
                    }
                    row += kernel(r, p, q);
                    if with_grad {
                        // d/dx_i of (1/2m^2) sum_ij K: both (i,j) and (j,i) terms.
                        let coef = -kernel_force(r, p, q) / r * 2.0 * half_inv_m2;
                        for k in 0..d {
                            d_points[[i, k]] += coef * (xi[k] - xj[k]);
                        }
                    }
                }
                total += row;
            }
            if !total.is_finite() {
                return Err(Error::numeric(0, "non-finite interaction energy"));
            }
            half_inv_m2 * total
        }
        EnergySpec::External(pot) => {
            let mut total = 0.0;
            for (i, x) in points.outer_iter().enumerate() {
                let v = pot.value(x);
                if !v.is_finite() {
                    return Err(Error::numeric(i, "non-finite external potential"));
                }
                total += v;
                if with_grad {
                    let g = pot.grad(x);
                    for k in 0..d {
                        d_points[[i, k]] = inv_m * g[k];
                    }
                }
            }
            inv_m * total
        }
        EnergySpec::PorousInternal { exponent } => {
            let e = *exponent;
            let mut total = 0.0;
            for (i, &rho) in densities.iter().enumerate() {
                if !(rho > 0.0) || !rho.is_finite() {
                    return Err(Error::numeric(i, format!("porous energy needs rho > 0, got {rho}")));
                }
                total += rho.powf(e - 1.0) / (e - 1.0);
                if with_grad {
                    d_densities[i] = inv_m * rho.powf(e - 2.0);
                }
            }
            inv_m * total
        }
        EnergySpec::Kl(target) => {
            let mut total = 0.0;
            for (i, (x, &rho)) in points.outer_iter().zip(densities.iter()).enumerate() {
                if !(rho > 0.0) || !rho.is_finite() {
                    return Err(Error::numeric(i, format!("KL energy needs rho > 0, got {rho}")));
                }
                let (log_t, grad_t) = target.density().log_density_and_grad(x);
                if !log_t.is_finite() {
                    return Err(Error::numeric(i, "target density underflows to zero"));
                }
                total += rho.ln() - log_t;
                if with_grad {
                    d_densities[i] = inv_m / rho;
                    for k in 0..d {
                        d_points[[i, k]] = -inv_m * grad_t[k];
                    }
                }
            }
            inv_m * total
        }
    };
    Ok(EnergyGrad {
        value,
        d_points,
        d_densities,
    })
}

/// Exact velocities of the m-body interaction ODE.
pub fn interaction_velocity(points: ArrayView2<'_, f64>, p: f64, q: f64) -> Result<Array2<f64>> {
    check_pq(p, q)?;
    let (m, d) = points.dim();
    if m == 0 {
        return Err(Error::structural("interaction velocity of an empty point set"));
    }
    let inv_m = 1.0 / m as f64;
    let mut vel = Array2::zeros((m, d));
    // Pairwise contributions are antisymmetric; adding each pair to both ends
    // keeps the total momentum at round-off.
    for i in 0..m {
        for k in (i + 1)..m {
            let mut r2 = 0.0;
            for c in 0..d {
                let diff = points[[i, c]] - points[[k, c]];
                r2 += diff * diff;
            }
            let r = r2.sqrt();
            if r == 0.0 {
                if p <= 0.0 {
                    return Err(Error::SingularPair(i, k));
                }
                continue;
            }
            let coef = inv_m * kernel_force(r, p, q) / r;
            for c in 0..d {
                let f = coef * (points[[i, c]] - points[[k, c]]);
                vel[[i, c]] += f;
                vel[[k, c]] -= f;
            }
        }
    }
    Ok(vel)
}
