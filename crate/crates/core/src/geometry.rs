//! Particle ensembles and the transport-map machinery acting on them.
//!
//! A density is carried as a cloud of sample points together with the
//! density value at each point. Pushing the cloud through `T = I + V`
//! moves each point by its displacement and rescales its density by
//! `exp(-div V)`, the first-order stand-in for the Jacobian determinant.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Sample points of a density with the density value attached to each point.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    points: Array2<f64>,
    densities: Array1<f64>,
    step: usize,
}

impl ParticleEnsemble {
    pub fn new(points: Array2<f64>, densities: Array1<f64>, step: usize) -> Result<Self> {
        let (m, d) = points.dim();
        if m == 0 || d == 0 {
            return Err(Error::structural("ensemble needs at least one point of dimension >= 1"));
        }
        if densities.len() != m {
            return Err(Error::structural(format!(
                "{} points but {} density values",
                m,
                densities.len()
            )));
        }
        for (i, row) in points.outer_iter().enumerate() {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(i, "non-finite coordinate"));
            }
        }
        let mut any_positive = false;
        for (i, &rho) in densities.iter().enumerate() {
            if !rho.is_finite() || rho < 0.0 {
                return Err(Error::numeric(i, format!("invalid density value {rho}")));
            }
            any_positive |= rho > 0.0;
        }
        if !any_positive {
            return Err(Error::numeric(0, "all density values are zero"));
        }
        Ok(Self {
            points,
            densities,
            step,
        })
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn densities(&self) -> ArrayView1<'_, f64> {
        self.densities.view()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn with_step(mut self, step: usize) -> Self {
        self.step = step;
        self
    }

    pub fn into_parts(self) -> (Array2<f64>, Array1<f64>, usize) {
        (self.points, self.densities, self.step)
    }

    /// Unweighted mean of the sample points.
    pub fn mean(&self) -> Array1<f64> {
        self.points.mean_axis(Axis(0)).expect("non-empty ensemble")
    }

    /// Serialize to the columnar text format.
    ///
    /// The header is `dim=<d> count=<m> step=<t>`, followed by one line per
    /// particle holding the coordinates and the density, each printed with 17
    /// significant digits so that parsing restores the exact bits.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.len() * (self.dim() + 1) * 26 + 32);
        let _ = writeln!(out, "dim={} count={} step={}", self.dim(), self.len(), self.step);
        for (row, rho) in self.points.outer_iter().zip(self.densities.iter()) {
            for x in row.iter() {
                let _ = write!(out, "{x:.16e} ");
            }
            let _ = writeln!(out, "{rho:.16e}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Format("empty ensemble file".into()))?;
        let mut dim = None;
        let mut count = None;
        let mut step = None;
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("line 1: malformed header field `{field}`")))?;
            let value: usize = value
                .parse()
                .map_err(|_| Error::Format(format!("line 1: `{key}` is not an integer")))?;
            match key {
                "dim" => dim = Some(value),
                "count" => count = Some(value),
                "step" => step = Some(value),
                other => return Err(Error::Format(format!("line 1: unknown header key `{other}`"))),
            }
        }
        let (dim, count, step) = match (dim, count, step) {
            (Some(d), Some(c), Some(s)) => (d, c, s),
            _ => return Err(Error::Format("line 1: header needs dim, count and step".into())),
        };
        let mut points = Array2::zeros((count, dim));
        let mut densities = Array1::zeros(count);
        let mut seen = 0;
        for (lineno, line) in lines {
            if seen == count {
                return Err(Error::Format(format!("line {}: more rows than count={count}", lineno + 1)));
            }
            let mut n = 0;
            for (j, tok) in line.split_whitespace().enumerate() {
                let v: f64 = tok
                    .parse()
                    .map_err(|_| Error::Format(format!("line {}: bad number `{tok}`", lineno + 1)))?;
                if j < dim {
                    points[[seen, j]] = v;
                } else if j == dim {
                    densities[seen] = v;
                } else {
                    return Err(Error::Format(format!("line {}: too many columns", lineno + 1)));
                }
                n += 1;
            }
            if n != dim + 1 {
                return Err(Error::Format(format!(
                    "line {}: expected {} columns, found {n}",
                    lineno + 1,
                    dim + 1
                )));
            }
            seen += 1;
        }
        if seen != count {
            return Err(Error::Format(format!("expected {count} rows, found {seen}")));
        }
        Self::new(points, densities, step)
    }

    pub fn write_file(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

/// A map from query points to displacement vectors.
pub trait DisplacementField {
    /// Spatial dimension of inputs and outputs.
    fn dim(&self) -> usize;

    /// Evaluate at every row of `points`, returning one displacement per row.
    fn eval(&self, points: ArrayView2<'_, f64>) -> Result<Array2<f64>>;
}

/// Wraps a pointwise closure as a [`DisplacementField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(ArrayView1<'_, f64>) -> Array1<f64>,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> DisplacementField for FnField<F>
where
    F: Fn(ArrayView1<'_, f64>) -> Array1<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn eval(&self, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim(points.ncols(), self.dim)?;
        let mut out = Array2::zeros(points.dim());
        for (i, x) in points.outer_iter().enumerate() {
            let v = (self.f)(x);
            if v.len() != self.dim {
                return Err(Error::structural(format!(
                    "field returned {} components, expected {}",
                    v.len(),
                    self.dim
                )));
            }
            out.row_mut(i).assign(&v);
        }
        Ok(out)
    }
}

/// The affine field `V(x) = A x + b`.
#[derive(Debug, Clone)]
pub struct AffineField {
    pub matrix: Array2<f64>,
    pub offset: Array1<f64>,
}

impl AffineField {
    pub fn new(matrix: Array2<f64>, offset: Array1<f64>) -> Self {
        assert_eq!(matrix.nrows(), matrix.ncols());
        assert_eq!(matrix.nrows(), offset.len());
        Self { matrix, offset }
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(Array2::zeros((dim, dim)), Array1::zeros(dim))
    }

    pub fn scaling(dim: usize, delta: f64) -> Self {
        Self::new(Array2::eye(dim) * delta, Array1::zeros(dim))
    }

    pub fn translation(offset: Array1<f64>) -> Self {
        let d = offset.len();
        Self::new(Array2::zeros((d, d)), offset)
    }
}

impl DisplacementField for AffineField {
    fn dim(&self) -> usize {
        self.offset.len()
    }

    fn eval(&self, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        check_dim(points.ncols(), self.dim())?;
        Ok(points.dot(&self.matrix.t()) + &self.offset)
    }
}

/// Per-point finite-difference divergence of a displacement field.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceEstimate {
    pub values: Array1<f64>,
    pub eps: f64,
}

/// Default finite-difference step: 1e-3 of the bounding-box diagonal.
pub fn default_eps(points: ArrayView2<'_, f64>) -> f64 {
    let mut diag2 = 0.0;
    for col in points.axis_iter(Axis(1)) {
        let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        diag2 += (hi - lo) * (hi - lo);
    }
    let diag = diag2.sqrt();
    if diag.is_finite() && diag > 0.0 {
        1e-3 * diag
    } else {
        1e-3
    }
}

/// Stack the query points needed to evaluate a field and its central-difference
/// divergence in one batch.
///
/// Block 0 holds the points themselves; block `1 + 2j` holds `x + eps e_j` and
/// block `2 + 2j` holds `x - eps e_j`. Each block has `m` rows.
pub fn divergence_stencil(points: ArrayView2<'_, f64>, eps: f64) -> Array2<f64> {
    let (m, d) = points.dim();
    let mut out = Array2::zeros(((1 + 2 * d) * m, d));
    out.slice_mut(s![0..m, ..]).assign(&points);
    for j in 0..d {
        let mut plus = out.slice_mut(s![(1 + 2 * j) * m..(2 + 2 * j) * m, ..]);
        plus.assign(&points);
        plus.column_mut(j).mapv_inplace(|x| x + eps);
        let mut minus = out.slice_mut(s![(2 + 2 * j) * m..(3 + 2 * j) * m, ..]);
        minus.assign(&points);
        minus.column_mut(j).mapv_inplace(|x| x - eps);
    }
    out
}

/// Split field outputs on a [`divergence_stencil`] batch into the displacement
/// at the base points and the central-difference divergence there.
pub fn split_stencil_outputs(
    outputs: ArrayView2<'_, f64>,
    m: usize,
    eps: f64,
) -> Result<(Array2<f64>, Array1<f64>)> {
    let d = outputs.ncols();
    if outputs.nrows() != (1 + 2 * d) * m {
        return Err(Error::structural(format!(
            "stencil output has {} rows, expected {}",
            outputs.nrows(),
            (1 + 2 * d) * m
        )));
    }
    for (r, row) in outputs.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(r % m, "non-finite field evaluation"));
        }
    }
    let disp = outputs.slice(s![0..m, ..]).to_owned();
    let mut div = Array1::zeros(m);
    for j in 0..d {
        let plus = outputs.slice(s![(1 + 2 * j) * m..(2 + 2 * j) * m, j]);
        let minus = outputs.slice(s![(2 + 2 * j) * m..(3 + 2 * j) * m, j]);
        for i in 0..m {
            div[i] += (plus[i] - minus[i]) / (2.0 * eps);
        }
    }
    Ok((disp, div))
}

/// Central-difference estimate of `div V` at each point.
pub fn estimate_divergence(
    field: &dyn DisplacementField,
    points: ArrayView2<'_, f64>,
    eps: f64,
) -> Result<DivergenceEstimate> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("finite-difference step must be > 0, got {eps}")));
    }
    check_dim(points.ncols(), field.dim())?;
    let stencil = divergence_stencil(points, eps);
    let outputs = field.eval(stencil.view())?;
    check_dim(outputs.ncols(), points.ncols())?;
    let (_, values) = split_stencil_outputs(outputs.view(), points.nrows(), eps)?;
    Ok(DivergenceEstimate { values, eps })
}

/// Push the ensemble through `x -> x + V(x)`, rescaling densities by `exp(-div V)`.
pub fn apply_map(
    ensemble: &ParticleEnsemble,
    field: &dyn DisplacementField,
    div: &DivergenceEstimate,
) -> Result<ParticleEnsemble> {
    check_dim(field.dim(), ensemble.dim())?;
    let disp = field.eval(ensemble.points())?;
    apply_displacement(ensemble, disp.view(), div.values.view())
}

/// [`apply_map`] with the displacements already evaluated.
pub fn apply_displacement(
    ensemble: &ParticleEnsemble,
    disp: ArrayView2<'_, f64>,
    div: ArrayView1<'_, f64>,
) -> Result<ParticleEnsemble> {
    if disp.dim() != ensemble.points.dim() {
        return Err(Error::structural(format!(
            "displacement shape {:?} does not match ensemble shape {:?}",
            disp.dim(),
            ensemble.points.dim()
        )));
    }
    if div.len() != ensemble.len() {
        return Err(Error::structural("divergence estimate has the wrong length"));
    }
    for (i, row) in disp.outer_iter().enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(i, "non-finite displacement"));
        }
        if !div[i].is_finite() {
            return Err(Error::numeric(i, "non-finite divergence"));
        }
    }
    let points = &ensemble.points + &disp;
    let densities = Array1::from_iter(
        ensemble
            .densities
            .iter()
            .zip(div.iter())
            .map(|(rho, dv)| rho * (-dv).exp()),
    );
    ParticleEnsemble::new(points, densities, ensemble.step + 1)
}

/// Translate the cloud so its unweighted mean sits at the origin.
pub fn recenter(ensemble: &ParticleEnsemble) -> ParticleEnsemble {
    let mean = ensemble.mean();
    ParticleEnsemble {
        points: &ensemble.points - &mean,
        densities: ensemble.densities.clone(),
        step: ensemble.step,
    }
}

fn nearest_sq(x: ArrayView1<'_, f64>, cloud: ArrayView2<'_, f64>) -> f64 {
    let mut best = f64::INFINITY;
    for y in cloud.outer_iter() {
        let d2: f64 = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best {
            best = d2;
        }
    }
    best
}

/// Symmetric sum of squared nearest-neighbour distances between two clouds.
pub fn chamfer_distance(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<f64> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::structural("chamfer distance of an empty point set"));
    }
    check_dim(a.ncols(), b.ncols())?;
    let ab: f64 = a.outer_iter().map(|x| nearest_sq(x, b)).sum();
    let ba: f64 = b.outer_iter().map(|y| nearest_sq(y, a)).sum();
    Ok(ab + ba)
}

/// Monte-Carlo transport cost `(1/m) sum |V(x_i)|^2` of the map `I + V`.
pub fn displacement_cost(ensemble: &ParticleEnsemble, field: &dyn DisplacementField) -> Result<f64> {
    let disp = field.eval(ensemble.points())?;
    displacement_cost_of(disp.view())
}

pub fn displacement_cost_of(disp: ArrayView2<'_, f64>) -> Result<f64> {
    let m = disp.nrows();
    let mut total = 0.0;
    for (i, row) in disp.outer_iter().enumerate() {
        let sq: f64 = row.iter().map(|v| v * v).sum();
        if !sq.is_finite() {
            return Err(Error::numeric(i, "non-finite displacement"));
        }
        total += sq;
    }
    Ok(total / m as f64)
}

pub(crate) fn check_dim(found: usize, expected: usize) -> Result<()> {
    if found != expected {
        return Err(Error::structural(format!(
            "dimension mismatch: expected {expected}, found {found}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_ensemble(m: usize, d: usize, seed: u64) -> ParticleEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = Array2::from_shape_fn((m, d), |_| rng.sample::<f64, _>(StandardNormal));
        let norm = (2.0 * std::f64::consts::PI).powf(-(d as f64) / 2.0);
        let densities = points
            .outer_iter()
            .map(|x| norm * (-0.5 * x.dot(&x)).exp())
            .collect();
        ParticleEnsemble::new(points, densities, 0).unwrap()
    }

    #[test]
    fn zero_field_is_identity_with_step_increment() {
        let ens = gaussian_ensemble(20, 2, 1);
        let field = AffineField::zero(2);
        let div = estimate_divergence(&field, ens.points(), 1e-3).unwrap();
        let out = apply_map(&ens, &field, &div).unwrap();
        assert_eq!(out.points(), ens.points());
        assert_eq!(out.densities(), ens.densities());
        assert_eq!(out.step(), 1);
    }

    #[test]
    fn translation_keeps_densities() {
        let ens = gaussian_ensemble(20, 2, 2);
        let field = AffineField::translation(array![0.3, -1.2]);
        let div = estimate_divergence(&field, ens.points(), 1e-3).unwrap();
        let out = apply_map(&ens, &field, &div).unwrap();
        for (a, b) in out.densities().iter().zip(ens.densities().iter()) {
            assert!((a - b).abs() <= 1e-15 * b.abs());
        }
        let shifted = &ens.points() + &array![0.3, -1.2];
        assert_eq!(out.points(), shifted);
    }

    #[test]
    fn isotropic_scaling_matches_change_of_variables() {
        let delta = 0.01;
        let ens = gaussian_ensemble(50, 2, 3);
        let field = AffineField::scaling(2, delta);
        let div = estimate_divergence(&field, ens.points(), default_eps(ens.points())).unwrap();
        let out = apply_map(&ens, &field, &div).unwrap();
        let exact = (1.0 + delta).powi(-2);
        for (a, b) in out.densities().iter().zip(ens.densities().iter()) {
            let factor = a / b;
            assert!((factor - (-2.0 * delta).exp()).abs() < 1e-12);
            assert!((factor - exact).abs() <= 3.0 * delta * delta);
        }
    }

    #[test]
    fn input_ensemble_is_not_modified() {
        let ens = gaussian_ensemble(10, 2, 4);
        let before = ens.clone();
        let field = AffineField::scaling(2, 0.2);
        let div = estimate_divergence(&field, ens.points(), 1e-3).unwrap();
        let _ = apply_map(&ens, &field, &div).unwrap();
        assert_eq!(ens, before);
    }

    #[test]
    fn non_finite_displacement_names_index() {
        let ens = gaussian_ensemble(5, 1, 5);
        let mut disp = Array2::zeros((5, 1));
        disp[[3, 0]] = f64::NAN;
        let err = apply_displacement(&ens, disp.view(), Array1::zeros(5).view()).unwrap_err();
        assert!(matches!(err, Error::Numeric { index: 3, .. }), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_structural() {
        let ens = gaussian_ensemble(5, 2, 6);
        let field = AffineField::zero(3);
        let div = DivergenceEstimate {
            values: Array1::zeros(5),
            eps: 1e-3,
        };
        assert!(matches!(apply_map(&ens, &field, &div), Err(Error::Structural(_))));
    }

    #[test]
    fn divergence_exact_on_linear_fields() {
        let pts = gaussian_ensemble(8, 3, 7).points().to_owned();
        let id = AffineField::new(Array2::eye(3), Array1::zeros(3));
        let div = estimate_divergence(&id, pts.view(), 1e-3).unwrap();
        for v in div.values.iter() {
            assert!((v - 3.0).abs() < 1e-9);
        }
        let a = array![[0.5, 2.0, -1.0], [0.1, -0.7, 3.0], [4.0, 0.0, 0.25]];
        let field = AffineField::new(a, array![1.0, 2.0, 3.0]);
        for eps in [1e-4, 1e-2, 0.5] {
            let div = estimate_divergence(&field, pts.view(), eps).unwrap();
            for v in div.values.iter() {
                assert!((v - 0.05).abs() < 1e-9, "eps {eps}: {v}");
            }
        }
    }

    #[test]
    fn divergence_of_quadratic_field() {
        let field = FnField::new(2, |x: ArrayView1<'_, f64>| array![x[0] * x[0], x[1] * x[1]]);
        let div = estimate_divergence(&field, array![[1.0, 1.0]].view(), 1e-3).unwrap();
        assert!((div.values[0] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn divergence_rejects_bad_eps_and_nan_field() {
        let pts = array![[0.0, 0.0]];
        assert!(estimate_divergence(&AffineField::zero(2), pts.view(), 0.0).is_err());
        let nan = FnField::new(2, |_x: ArrayView1<'_, f64>| array![f64::NAN, 0.0]);
        assert!(matches!(
            estimate_divergence(&nan, pts.view(), 1e-3),
            Err(Error::Numeric { .. })
        ));
    }

    #[test]
    fn recenter_cases() {
        let sym = ParticleEnsemble::new(array![[1.0, 0.0], [-1.0, 0.0]], array![1.0, 1.0], 0).unwrap();
        assert_eq!(recenter(&sym), sym);
        let single =
            ParticleEnsemble::new(array![[3.0, -1.0], [3.0, -1.0]], array![1.0, 2.0], 4).unwrap();
        let out = recenter(&single);
        assert!(out.points().iter().all(|v| *v == 0.0));
        assert_eq!(out.densities(), single.densities());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts = Array2::from_shape_fn((500, 2), |_| rng.gen_range(0.0..2.0));
        let ens = ParticleEnsemble::new(pts, Array1::from_elem(500, 0.25), 0).unwrap();
        let out = recenter(&ens);
        assert!(out.mean().iter().all(|v| v.abs() < 1e-12));
        let twice = recenter(&out);
        for (a, b) in twice.points().iter().zip(out.points().iter()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn chamfer_cases() {
        let a = array![[0.0, 0.0]];
        let b = array![[1.0, 0.0]];
        assert_eq!(chamfer_distance(a.view(), b.view()).unwrap(), 2.0);
        assert_eq!(chamfer_distance(a.view(), a.view()).unwrap(), 0.0);
        let empty = Array2::<f64>::zeros((0, 2));
        assert!(chamfer_distance(empty.view(), a.view()).is_err());
        assert!(chamfer_distance(a.view(), array![[1.0, 0.0, 0.0]].view()).is_err());
    }

    #[test]
    fn chamfer_rings_match_double_loop() {
        let ring = |r: f64| {
            Array2::from_shape_fn((64, 2), |(i, j)| {
                let th = 2.0 * std::f64::consts::PI * i as f64 / 64.0;
                if j == 0 {
                    r * th.cos()
                } else {
                    r * th.sin()
                }
            })
        };
        let (a, b) = (ring(1.0), ring(1.1));
        let (mut forward, mut backward) = (0.0, 0.0);
        for x in a.outer_iter() {
            let mut best = f64::INFINITY;
            for y in b.outer_iter() {
                best = best.min((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2));
            }
            forward += best;
        }
        for y in b.outer_iter() {
            let mut best = f64::INFINITY;
            for x in a.outer_iter() {
                best = best.min((x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2));
            }
            backward += best;
        }
        let oracle = forward + backward;
        assert_eq!(chamfer_distance(a.view(), b.view()).unwrap(), oracle);
        // concentric rings with aligned angles: every nearest distance is 0.1
        assert!((oracle - 128.0 * 0.01).abs() < 1e-12);
    }

    #[test]
    fn displacement_cost_cases() {
        let ens = gaussian_ensemble(10, 2, 11);
        assert_eq!(displacement_cost(&ens, &AffineField::zero(2)).unwrap(), 0.0);
        let c = array![0.3, -0.4];
        let cost = displacement_cost(&ens, &AffineField::translation(c)).unwrap();
        assert!((cost - 0.25).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Array2::from_shape_fn((2, 2), |_| rng.gen_range(-1.0..1.0));
        let b = Array1::from_shape_fn(2, |_| rng.gen_range(-1.0..1.0));
        let field = AffineField::new(a.clone(), b.clone());
        let mut manual = 0.0;
        for x in ens.points().outer_iter() {
            for r in 0..2 {
                let v = a[[r, 0]] * x[0] + a[[r, 1]] * x[1] + b[r];
                manual += v * v;
            }
        }
        manual /= 10.0;
        assert!((displacement_cost(&ens, &field).unwrap() - manual).abs() < 1e-14);
    }

    #[test]
    fn ensemble_validation() {
        assert!(ParticleEnsemble::new(Array2::zeros((0, 2)), Array1::zeros(0), 0).is_err());
        assert!(ParticleEnsemble::new(Array2::zeros((2, 2)), array![1.0], 0).is_err());
        assert!(ParticleEnsemble::new(Array2::zeros((2, 2)), array![0.0, 0.0], 0).is_err());
        assert!(ParticleEnsemble::new(Array2::zeros((2, 2)), array![-1.0, 1.0], 0).is_err());
        assert!(ParticleEnsemble::new(array![[f64::NAN]], array![1.0], 0).is_err());
    }

    #[test]
    fn text_format_header_and_errors() {
        let ens = ParticleEnsemble::new(array![[0.1, 1.0 / 3.0]], array![2.0], 7).unwrap();
        let text = ens.to_text();
        assert!(text.starts_with("dim=2 count=1 step=7\n"));
        assert_eq!(ParticleEnsemble::from_text(&text).unwrap(), ens);
        assert!(ParticleEnsemble::from_text("dim=2 count=2 step=0\n1 2 3\n").is_err());
        assert!(ParticleEnsemble::from_text("dim=2 count=1\n1 2 3\n").is_err());
        assert!(ParticleEnsemble::from_text("dim=2 count=1 step=0\n1 2\n").is_err());
    }
}
