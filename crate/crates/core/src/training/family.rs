//! Families of initial densities and of energies that training draws from.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::energy::{EnergySpec, GaussianMixture, TargetHandle};
use crate::error::{Error, Result};
use crate::geometry::ParticleEnsemble;
use crate::operator::Conditioning;
use crate::oracles::BarenblattSpec;

use super::rng::keyed_rng;

/// Uniform density on an axis-aligned box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub points: usize,
}

/// Uniform densities on random rectangles or triangles inside `[-1, 1]^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UniformRectTri {
    pub points: usize,
    /// Smallest rectangle side; triangles must have area >= min_extent^2 / 2.
    #[serde(default = "default_min_extent")]
    pub min_extent: f64,
}

fn default_min_extent() -> f64 {
    0.3
}

/// Barenblatt profiles at `t = 0` with `C` drawn uniformly from `c_range`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BarenblattFamily {
    pub dim: usize,
    pub m_exponent: f64,
    pub t0: f64,
    pub c_range: [f64; 2],
    pub points: usize,
    #[serde(default)]
    pub landmarks: usize,
}

/// Random isotropic Gaussian mixtures with equal weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianFamily {
    pub dim: usize,
    /// Inclusive range for the component count.
    pub components: [usize; 2],
    /// Means are uniform in `[-mean_box, mean_box]^dim`.
    pub mean_box: f64,
    pub std_range: [f64; 2],
    /// Sample points drawn from each mixture.
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialFamilySpec {
    /// The same ensemble every time.
    Fixed(Arc<ParticleEnsemble>),
    UniformBox(UniformBox),
    UniformRectTri(UniformRectTri),
    Barenblatt(BarenblattFamily),
    GaussianMix(GaussianFamily),
}

/// Energies attached to each sampled trajectory.
#[derive(Debug, Clone, PartialEq)]
pub enum EnergyFamily {
    Fixed(EnergySpec),
    /// Interaction kernel with `(p, q)` uniform on the given ranges.
    InteractionRange { p: [f64; 2], q: [f64; 2] },
    /// KL towards a freshly drawn mixture target per trajectory.
    KlTargets(GaussianFamily),
}

/// One initial condition with its conditioning and energy.
#[derive(Debug, Clone)]
pub struct InitialSample {
    pub ensemble: ParticleEnsemble,
    pub cond: Conditioning,
    pub energy: EnergySpec,
}

fn ordered(r: [f64; 2], what: &str) -> Result<()> {
    if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
        return Err(Error::config(format!("{what} range must be finite and ordered, got {r:?}")));
    }
    Ok(())
}

fn uniform<R: Rng + ?Sized>(r: [f64; 2], rng: &mut R) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

impl GaussianFamily {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.points == 0 {
            return Err(Error::config("gaussian family needs dim >= 1 and points >= 1"));
        }
        if self.components[0] == 0 || self.components[0] > self.components[1] {
            return Err(Error::config(format!("bad component range {:?}", self.components)));
        }
        ordered(self.std_range, "std")?;
        if !(self.std_range[0] > 0.0) {
            return Err(Error::config("std range must lie in (0, inf)"));
        }
        if !(self.mean_box >= 0.0) {
            return Err(Error::config("mean_box must be >= 0"));
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> GaussianMixture {
        let k = rng.gen_range(self.components[0]..=self.components[1]);
        let mut means = Vec::with_capacity(k);
        let mut stds = Vec::with_capacity(k);
        for _ in 0..k {
            means.push(
                (0..self.dim)
                    .map(|_| uniform([-self.mean_box, self.mean_box], rng))
                    .collect(),
            );
            stds.push(uniform(self.std_range, rng));
        }
        GaussianMixture {
            weights: vec![1.0; k],
            means,
            stds,
        }
    }
}

impl InitialFamilySpec {
    pub fn dim(&self) -> usize {
        match self {
            Self::Fixed(e) => e.dim(),
            Self::UniformBox(b) => b.lo.len(),
            Self::UniformRectTri(_) => 2,
            Self::Barenblatt(b) => b.dim,
            Self::GaussianMix(g) => g.dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Fixed(_) => Ok(()),
            Self::UniformBox(b) => {
                if b.lo.is_empty() || b.lo.len() != b.hi.len() || b.points == 0 {
                    return Err(Error::config("uniform box needs matching lo/hi and points >= 1"));
                }
                if b.lo.iter().zip(&b.hi).any(|(l, h)| !(l < h)) {
                    return Err(Error::config("uniform box needs lo < hi on every axis"));
                }
                Ok(())
            }
            Self::UniformRectTri(r) => {
                if r.points == 0 || !(r.min_extent > 0.0 && r.min_extent < 2.0) {
                    return Err(Error::config("rect/tri family needs points >= 1 and min_extent in (0, 2)"));
                }
                Ok(())
            }
            Self::Barenblatt(b) => {
                ordered(b.c_range, "C")?;
                if !(b.c_range[0] > 0.0) {
                    return Err(Error::config("C range must lie in (0, inf)"));
                }
                if b.points < 2 {
                    return Err(Error::config("barenblatt family needs at least two points"));
                }
                BarenblattSpec::new(b.m_exponent, b.dim, b.c_range[0], b.t0)
                    .map(|_| ())
                    .map_err(|e| Error::config(e.to_string()))
            }
            Self::GaussianMix(g) => g.validate(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParticleEnsemble> {
        match self {
            Self::Fixed(e) => Ok((**e).clone()),
            Self::UniformBox(b) => {
                let vol: f64 = b.lo.iter().zip(&b.hi).map(|(l, h)| h - l).product();
                let pts = Array2::from_shape_fn((b.points, b.lo.len()), |(_, j)| rng.gen_range(b.lo[j]..b.hi[j]));
                ParticleEnsemble::new(pts, Array1::from_elem(b.points, 1.0 / vol), 0)
            }
            Self::UniformRectTri(r) => {
                if rng.gen::<bool>() {
                    let mut side = || loop {
                        let (a, b) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
                        if hi - lo >= r.min_extent {
                            return (lo, hi);
                        }
                    };
                    let (x, y) = (side(), side());
                    uniform_rectangle([x.0, y.0], [x.1, y.1], r.points, rng)
                } else {
                    loop {
                        let mut v = || [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                        let (a, b, c) = (v(), v(), v());
                        if triangle_area(a, b, c) >= 0.5 * r.min_extent * r.min_extent {
                            break uniform_triangle(a, b, c, r.points, rng);
                        }
                    }
                }
            }
            Self::Barenblatt(b) => {
                let c = uniform(b.c_range, rng);
                BarenblattSpec::new(b.m_exponent, b.dim, c, b.t0)?.sample_centered(0.0, b.points, b.landmarks, rng)
            }
            Self::GaussianMix(g) => g.draw(rng).sample(g.points, rng),
        }
    }
}

impl EnergyFamily {
    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Fixed(spec) => spec.validate().map_err(|e| Error::config(e.to_string())),
            Self::InteractionRange { p, q } => {
                ordered(*p, "p")?;
                ordered(*q, "q")?;
                if !(p[1] < q[0]) {
                    return Err(Error::config("the p range must lie strictly below the q range"));
                }
                if p[0] <= -1.0 {
                    return Err(Error::config("p must exceed -1 for a finite kernel at 0"));
                }
                Ok(())
            }
            Self::KlTargets(g) => g.validate(),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<(EnergySpec, Conditioning)> {
        Ok(match self {
            Self::Fixed(spec) => (spec.clone(), conditioning_for(spec)),
            Self::InteractionRange { p, q } => {
                let (p, q) = (uniform(*p, rng), uniform(*q, rng));
                (EnergySpec::Interaction { p, q }, Conditioning::pq(p, q))
            }
            Self::KlTargets(g) => {
                let target = Arc::new(TargetHandle::sampled(g.draw(rng), g.points, rng)?);
                (EnergySpec::Kl(target.clone()), Conditioning::target(target))
            }
        })
    }
}

/// The conditioning record a fixed energy implies.
pub fn conditioning_for(spec: &EnergySpec) -> Conditioning {
    match spec {
        EnergySpec::Interaction { p, q } => Conditioning::pq(*p, *q),
        EnergySpec::Kl(t) => Conditioning::target(t.clone()),
        _ => Conditioning::none(),
    }
}

/// `count` initial conditions for outer iteration `outer`, each from its own
/// keyed stream.
pub fn sample_initials(
    family: &InitialFamilySpec,
    energy: &EnergyFamily,
    count: usize,
    seed: u64,
    outer: u64,
) -> Result<Vec<InitialSample>> {
    if count == 0 {
        return Err(Error::config("batch size must be >= 1"));
    }
    (0..count)
        .map(|b| {
            let ensemble = family.sample(&mut keyed_rng(seed, outer, b as u64, "initial"))?;
            let (energy, cond) = energy.sample(&mut keyed_rng(seed, outer, b as u64, "energy"))?;
            Ok(InitialSample { ensemble, cond, energy })
        })
        .collect()
}

pub fn uniform_rectangle<R: Rng + ?Sized>(lo: [f64; 2], hi: [f64; 2], n: usize, rng: &mut R) -> Result<ParticleEnsemble> {
    let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    if !(area > 0.0) {
        return Err(Error::config("degenerate rectangle"));
    }
    let pts = Array2::from_shape_fn((n, 2), |(_, j)| rng.gen_range(lo[j]..hi[j]));
    ParticleEnsemble::new(pts, Array1::from_elem(n, 1.0 / area), 0)
}

fn triangle_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])).abs()
}

pub fn uniform_triangle<R: Rng + ?Sized>(
    a: [f64; 2],
    b: [f64; 2],
    c: [f64; 2],
    n: usize,
    rng: &mut R,
) -> Result<ParticleEnsemble> {
    let area = triangle_area(a, b, c);
    if !(area > 0.0) {
        return Err(Error::config("degenerate triangle"));
    }
    let mut pts = Array2::zeros((n, 2));
    for mut row in pts.outer_iter_mut() {
        let (mut u, mut v): (f64, f64) = (rng.gen(), rng.gen());
        if u + v > 1.0 {
            u = 1.0 - u;
            v = 1.0 - v;
        }
        for j in 0..2 {
            row[j] = a[j] + u * (b[j] - a[j]) + v * (c[j] - a[j]);
        }
    }
    ParticleEnsemble::new(pts, Array1::from_elem(n, 1.0 / area), 0)
}
