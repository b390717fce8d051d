//! Analytic references and error metrics.

use std::io::{Read, Write};
use std::num::NonZeroUsize;

use gauss_quad::GaussLegendre;
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Beta, ContinuousCDF};

use crate::energy::{interaction_velocity, kernel_force, GaussianMixture};
use crate::error::{Error, Result};
use crate::geometry::{default_eps, estimate_divergence, AffineField, ParticleEnsemble};

/// Self-similar porous-medium solution `rho(t, x)` from a point source.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarenblattSpec {
    pub m_exponent: f64,
    pub dim: usize,
    pub c: f64,
    pub t0: f64,
}

impl BarenblattSpec {
    pub fn new(m_exponent: f64, dim: usize, c: f64, t0: f64) -> Result<Self> {
        let spec = Self {
            m_exponent,
            dim,
            c,
            t0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.m_exponent > 1.0) || !self.m_exponent.is_finite() {
            return Err(Error::Parameter(format!("exponent must be > 1, got {}", self.m_exponent)));
        }
        if self.dim == 0 {
            return Err(Error::Parameter("dimension must be >= 1".into()));
        }
        if !(self.c > 0.0) || !(self.t0 > 0.0) {
            return Err(Error::Parameter(format!("need C > 0 and t0 > 0, got C={} t0={}", self.c, self.t0)));
        }
        Ok(())
    }

    pub fn alpha(&self) -> f64 {
        let d = self.dim as f64;
        d / (d * (self.m_exponent - 1.0) + 2.0)
    }

    pub fn beta_coef(&self) -> f64 {
        let d = self.dim as f64;
        (self.m_exponent - 1.0) * self.alpha() / (2.0 * d * self.m_exponent)
    }

    fn shifted(&self, t: f64) -> f64 {
        let s = t + self.t0;
        assert!(s > 0.0, "t + t0 must be positive");
        s
    }

    pub fn density(&self, t: f64, x: ArrayView1<'_, f64>) -> f64 {
        let s = self.shifted(t);
        let a = self.alpha();
        let r2 = x.dot(&x);
        let core = self.c - self.beta_coef() * r2 * s.powf(-2.0 * a / self.dim as f64);
        if core <= 0.0 {
            return 0.0;
        }
        s.powf(-a) * core.powf(1.0 / (self.m_exponent - 1.0))
    }

    /// Radius of the compact support at time `t`.
    pub fn support_radius(&self, t: f64) -> f64 {
        let s = self.shifted(t);
        (self.c * s.powf(2.0 * self.alpha() / self.dim as f64) / self.beta_coef()).sqrt()
    }

    /// `div v` of the exact velocity field; constant in space.
    pub fn divergence(&self, t: f64) -> f64 {
        let d = self.dim as f64;
        d / ((d * (self.m_exponent - 1.0) + 2.0) * self.shifted(t))
    }

    /// The exact velocity `(alpha/d) x / (t + t0)`.
    pub fn velocity(&self, t: f64, x: ArrayView1<'_, f64>) -> Array1<f64> {
        &x * (self.alpha() / self.dim as f64 / self.shifted(t))
    }

    /// Fraction of mass inside radius `r` at time `t`.
    pub fn radial_cdf(&self, t: f64, r: f64) -> f64 {
        let w = (r / self.support_radius(t)).powi(2);
        if w <= 0.0 {
            return 0.0;
        }
        if w >= 1.0 {
            return 1.0;
        }
        self.radial_law().cdf(w)
    }

    // (r/R)^2 under the profile is Beta(d/2, 1/(m-1) + 1).
    fn radial_law(&self) -> Beta {
        Beta::new(self.dim as f64 / 2.0, 1.0 / (self.m_exponent - 1.0) + 1.0).expect("valid beta parameters")
    }

    fn radius_at(&self, t: f64, u: f64) -> f64 {
        self.support_radius(t) * self.radial_law().inverse_cdf(u).sqrt()
    }

    /// `n` i.i.d. points from `rho(t, .)` with their exact density values.
    pub fn sample<R: Rng + ?Sized>(&self, t: f64, n: usize, rng: &mut R) -> Result<ParticleEnsemble> {
        if n == 0 {
            return Err(Error::structural("cannot sample zero points"));
        }
        let mut pts = Array2::zeros((n, self.dim));
        for i in 0..n {
            let r = self.radius_at(t, rng.gen::<f64>());
            let dir = random_direction(self.dim, rng);
            pts.row_mut(i).assign(&(dir * r));
        }
        self.attach(t, pts)
    }

    /// Mirror-paired sample with `landmarks` extra points inside a tenth of the
    /// support radius. The cloud mean is zero by construction, so recentering
    /// never moves points off the profile their densities describe.
    pub fn sample_centered<R: Rng + ?Sized>(
        &self,
        t: f64,
        n: usize,
        landmarks: usize,
        rng: &mut R,
    ) -> Result<ParticleEnsemble> {
        if n < 2 {
            return Err(Error::structural("a centered sample needs at least two points"));
        }
        let total = n + (n % 2) + landmarks + (landmarks % 2);
        let mut pts = Array2::zeros((total, self.dim));
        let fill = |i: usize, x: Array1<f64>, pts: &mut Array2<f64>| {
            pts.row_mut(i).assign(&x);
            if i + 1 < total {
                pts.row_mut(i + 1).assign(&(-&x));
            }
        };
        let mut i = 0;
        while i < n {
            let r = self.radius_at(t, rng.gen::<f64>());
            fill(i, random_direction(self.dim, rng) * r, &mut pts);
            i += 2;
        }
        let r_land = 0.1 * self.support_radius(t);
        let mut j = n + (n % 2);
        while j < total {
            let r = r_land * rng.gen::<f64>().powf(1.0 / self.dim as f64);
            fill(j, random_direction(self.dim, rng) * r, &mut pts);
            j += 2;
        }
        self.attach(t, pts)
    }

    fn attach(&self, t: f64, pts: Array2<f64>) -> Result<ParticleEnsemble> {
        let rho = Array1::from_iter(pts.outer_iter().map(|x| self.density(t, x)));
        ParticleEnsemble::new(pts, rho, 0)
    }
}

fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array1<f64> {
    if dim == 1 {
        return Array1::from_elem(1, if rng.gen::<bool>() { 1.0 } else { -1.0 });
    }
    loop {
        let v: Array1<f64> = Array1::from_shape_fn(dim, |_| StandardNormal.sample(rng));
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

pub fn barenblatt_density(spec: &BarenblattSpec, t: f64, x: ArrayView1<'_, f64>) -> f64 {
    spec.density(t, x)
}

pub fn barenblatt_sample<R: Rng + ?Sized>(
    spec: &BarenblattSpec,
    t: f64,
    n: usize,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    spec.sample(t, n, rng)
}

pub fn barenblatt_divergence(spec: &BarenblattSpec, t: f64) -> f64 {
    spec.divergence(t)
}

pub const RING_NODES: usize = 64;
const RING_BRACKET: (f64, f64) = (1e-3, 10.0);

/// Radius of the ring equilibrium of the `(p, q)` attraction-repulsion kernel.
pub fn ring_radius(p: f64, q: f64) -> Result<f64> {
    ring_radius_with_nodes(p, q, RING_NODES)
}

pub fn ring_radius_with_nodes(p: f64, q: f64, nodes: usize) -> Result<f64> {
    if !(p < q) {
        return Err(Error::EquilibriumNotFound(format!("need p < q, got p={p} q={q}")));
    }
    let nodes = NonZeroUsize::new(nodes).ok_or_else(|| Error::Parameter("quadrature needs nodes".into()))?;
    let rule = GaussLegendre::new(nodes);
    let balance = |r: f64| {
        rule.integrate(0.0, std::f64::consts::FRAC_PI_2, |th| {
            kernel_force(2.0 * r * th.sin(), p, q) * th.sin()
        })
    };
    let (mut lo, mut hi) = RING_BRACKET;
    let (mut f_lo, f_hi) = (balance(lo), balance(hi));
    if !(f_lo * f_hi < 0.0) {
        return Err(Error::EquilibriumNotFound(format!(
            "no sign change on [{lo}, {hi}] for p={p} q={q}"
        )));
    }
    while hi - lo > 1e-12 {
        let mid = 0.5 * (lo + hi);
        let f_mid = balance(mid);
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if (f_mid > 0.0) == (f_lo > 0.0) {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `n` evenly spaced points on a circle.
pub fn ring_cloud(center: ArrayView1<'_, f64>, radius: f64, n: usize) -> Array2<f64> {
    assert_eq!(center.len(), 2, "rings live in the plane");
    Array2::from_shape_fn((n, 2), |(i, c)| {
        let th = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        center[c] + radius * if c == 0 { th.cos() } else { th.sin() }
    })
}

/// Classical RK4 on the m-body interaction ODE.
pub fn integrate_particle_ode(points: ArrayView2<'_, f64>, p: f64, q: f64, dt_ode: f64, steps: usize) -> Result<Array2<f64>> {
    if !(dt_ode > 0.0) {
        return Err(Error::Parameter(format!("ODE step must be > 0, got {dt_ode}")));
    }
    let mut x = points.to_owned();
    for _ in 0..steps {
        x = rk4_step(x.view(), p, q, dt_ode)?;
    }
    Ok(x)
}

pub fn rk4_step(x: ArrayView2<'_, f64>, p: f64, q: f64, h: f64) -> Result<Array2<f64>> {
    let k1 = interaction_velocity(x, p, q)?;
    let k2 = interaction_velocity((&x + &(&k1 * (0.5 * h))).view(), p, q)?;
    let k3 = interaction_velocity((&x + &(&k2 * (0.5 * h))).view(), p, q)?;
    let k4 = interaction_velocity((&x + &(&k3 * h)).view(), p, q)?;
    Ok(&x + &((k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)))
}

/// Relative L1 and Linf density errors at the prediction's own points.
pub fn relative_errors(pred: &ParticleEnsemble, spec: &BarenblattSpec, t: f64) -> Result<(f64, f64)> {
    if pred.dim() != spec.dim {
        return Err(Error::structural(format!(
            "prediction is {}-dimensional, reference is {}-dimensional",
            pred.dim(),
            spec.dim
        )));
    }
    let mut abs_sum = 0.0;
    let mut pred_sum = 0.0;
    let mut abs_max: f64 = 0.0;
    let mut exact_max: f64 = 0.0;
    for (x, &rho) in pred.points().outer_iter().zip(pred.densities().iter()) {
        let exact = spec.density(t, x);
        let diff = (rho - exact).abs();
        abs_sum += diff;
        pred_sum += rho;
        abs_max = abs_max.max(diff);
        exact_max = exact_max.max(exact);
    }
    if exact_max == 0.0 {
        return Err(Error::Domain("exact density vanishes at every point; Linf undefined".into()));
    }
    Ok((abs_sum / pred_sum, abs_max / exact_max))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorRow {
    pub t: f64,
    pub l1: f64,
    pub linf: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorSummary {
    pub mean_l1: f64,
    pub std_l1: f64,
    pub mean_linf: f64,
    pub std_linf: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorReport {
    pub rows: Vec<ErrorRow>,
}

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count().max(1) as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl ErrorReport {
    pub fn push(&mut self, t: f64, l1: f64, linf: f64) {
        self.rows.push(ErrorRow { t, l1, linf });
    }

    /// Mean and population standard deviation over the rows.
    pub fn summary(&self) -> ErrorSummary {
        let (mean_l1, std_l1) = mean_std(self.rows.iter().map(|r| r.l1));
        let (mean_linf, std_linf) = mean_std(self.rows.iter().map(|r| r.linf));
        ErrorSummary {
            mean_l1,
            std_l1,
            mean_linf,
            std_linf,
        }
    }

    /// Per-step rows under `t,L1,Linf`, then a summary header and row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(out);
        let io = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["t", "L1", "Linf"]).map_err(io)?;
        for r in &self.rows {
            w.write_record([fmt(r.t), fmt(r.l1), fmt(r.linf)]).map_err(io)?;
        }
        let s = self.summary();
        w.write_record(["mean_L1", "std_L1", "mean_Linf", "std_Linf"]).map_err(io)?;
        w.write_record([fmt(s.mean_l1), fmt(s.std_l1), fmt(s.mean_linf), fmt(s.std_linf)])
            .map_err(io)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().flexible(true).has_headers(true).from_reader(input);
        let mut report = Self::default();
        for (line, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            if rec.get(0) == Some("mean_L1") {
                break;
            }
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse().ok())
                    .ok_or_else(|| Error::Format(format!("line {}: bad field {}", line + 2, i + 1)))
            };
            report.push(num(0)?, num(1)?, num(2)?);
        }
        Ok(report)
    }
}

fn fmt(x: f64) -> String {
    format!("{x:.16e}")
}

fn to_nalgebra(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Closed-form `KL(N(mean0, cov0) || N(mean1, cov1))`.
pub fn gaussian_kl(
    mean0: ArrayView1<'_, f64>,
    cov0: ArrayView2<'_, f64>,
    mean1: ArrayView1<'_, f64>,
    cov1: ArrayView2<'_, f64>,
) -> Result<f64> {
    let d = mean0.len();
    if mean1.len() != d || cov0.dim() != (d, d) || cov1.dim() != (d, d) {
        return Err(Error::structural("gaussian_kl: inconsistent dimensions"));
    }
    let chol = |c: ArrayView2<'_, f64>, which: &str| {
        let m = to_nalgebra(c);
        if (&m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
            return Err(Error::Parameter(format!("{which} covariance is not symmetric")));
        }
        m.cholesky()
            .ok_or_else(|| Error::Parameter(format!("{which} covariance is not positive definite")))
    };
    let l0 = chol(cov0, "first")?;
    let l1 = chol(cov1, "second")?;
    let logdet = |l: &nalgebra::Cholesky<f64, nalgebra::Dyn>| 2.0 * l.l().diagonal().map(f64::ln).sum();
    let s0 = to_nalgebra(cov0);
    let trace = l1.solve(&s0).trace();
    let dm = DVector::from_iterator(d, mean1.iter().zip(mean0.iter()).map(|(a, b)| a - b));
    let maha = dm.dot(&l1.solve(&dm));
    let kl = 0.5 * (trace + maha - d as f64 + logdet(&l1) - logdet(&l0));
    Ok(kl.max(0.0))
}

/// Sample mean and (biased) covariance of a point cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFit {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

pub fn fit_gaussian(points: ArrayView2<'_, f64>) -> GaussianFit {
    let n = points.nrows() as f64;
    let mean = points.sum_axis(ndarray::Axis(0)) / n;
    let centered = &points - &mean;
    let cov = centered.t().dot(&centered) / n;
    GaussianFit { mean, cov }
}

/// Monte-Carlo `KL(rho || target)` from an ensemble carrying density values.
pub fn monte_carlo_kl(ensemble: &ParticleEnsemble, target: &GaussianMixture) -> Result<f64> {
    let mut acc = 0.0;
    for (i, (x, &rho)) in ensemble.points().outer_iter().zip(ensemble.densities().iter()).enumerate() {
        if !(rho > 0.0) {
            return Err(Error::numeric(i, "KL needs positive densities"));
        }
        acc += rho.ln() - target.log_density(x);
    }
    Ok(acc / ensemble.len() as f64)
}

/// `|log det(I + delta A) - div(delta A x)|`, the divergence taken by the
/// same central-difference estimator the operator uses, averaged over `points`.
pub fn log_det_gap(a: ArrayView2<'_, f64>, delta: f64, points: ArrayView2<'_, f64>) -> Result<f64> {
    let d = a.nrows();
    if a.ncols() != d || points.ncols() != d {
        return Err(Error::structural("log_det_gap: inconsistent dimensions"));
    }
    let scaled = a.to_owned() * delta;
    let jac = DMatrix::identity(d, d) + to_nalgebra(scaled.view());
    let det = jac.determinant();
    if !(det > 0.0) {
        return Err(Error::Domain(format!("I + delta A is not orientation preserving (det {det})")));
    }
    let field = AffineField::new(scaled, Array1::zeros(d));
    let div = estimate_divergence(&field, points, default_eps(points))?;
    let ld = det.ln();
    Ok(div.values.iter().map(|v| (ld - v).abs()).sum::<f64>() / points.nrows() as f64)
}
