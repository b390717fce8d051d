//! The attention-based JKO operator.
//!
//! The prompt cloud (optionally with per-point density values and energy
//! parameters concatenated) is lifted pointwise to the embedding width and
//! passed through self-attention blocks. Query points are lifted by a
//! separate MLP and read the encoded context through one cross-attention
//! block, then a projection MLP maps back to a displacement in physical
//! space. No positional encoding is used, so the output is invariant to
//! permutations of the prompt, and each query is decoded independently.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::energy::TargetHandle;
use crate::error::{Error, Result};
use crate::geometry::{DisplacementField, ParticleEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Channel {
    /// Interaction parameters `(p, q)` appended to every prompt point.
    ParamsPq,
    /// The density value appended to every prompt point.
    DensityValues,
    /// Target samples lifted by their own MLP and appended to the context set.
    KlTarget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    pub dim: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub lift_hidden: usize,
    pub ffn_hidden: usize,
    pub proj_hidden: usize,
    pub conditioning: Vec<Channel>,
    pub init_seed: u64,
    pub precision: String,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            embed_dim: 64,
            heads: 4,
            encoder_blocks: 2,
            lift_hidden: 64,
            ffn_hidden: 128,
            proj_hidden: 64,
            conditioning: Vec::new(),
            init_seed: 0,
            precision: "f64".into(),
        }
    }
}

impl OperatorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("encoder_blocks", self.encoder_blocks),
            ("lift_hidden", self.lift_hidden),
            ("ffn_hidden", self.ffn_hidden),
            ("proj_hidden", self.proj_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("operator.{name} must be >= 1")));
            }
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "operator.embed_dim = {} is not divisible by operator.heads = {}",
                self.embed_dim, self.heads
            )));
        }
        if self.precision != "f64" {
            return Err(Error::config(format!(
                "operator.precision = \"{}\" is not supported; only \"f64\" is available",
                self.precision
            )));
        }
        Ok(())
    }

    pub fn has(&self, ch: Channel) -> bool {
        self.conditioning.contains(&ch)
    }

    fn prompt_width(&self) -> usize {
        self.dim + if self.has(Channel::ParamsPq) { 2 } else { 0 } + usize::from(self.has(Channel::DensityValues))
    }

    fn target_width(&self) -> usize {
        self.dim + usize::from(self.has(Channel::DensityValues))
    }
}

/// Per-trajectory conditioning: energy parameters and/or a KL target.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Conditioning {
    pub pq: Option<(f64, f64)>,
    pub target: Option<Arc<TargetHandle>>,
}

impl Conditioning {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn pq(p: f64, q: f64) -> Self {
        Self {
            pq: Some((p, q)),
            target: None,
        }
    }

    pub fn target(target: Arc<TargetHandle>) -> Self {
        Self {
            pq: None,
            target: Some(target),
        }
    }
}

/// A trainable one-step operator: maps a prompt density to a displacement field.
pub trait JkoModel: Send + Sync {
    fn dim(&self) -> usize;

    fn params(&self) -> &[Array2<f64>];

    fn params_mut(&mut self) -> &mut [Array2<f64>];

    fn param_names(&self) -> Vec<String>;

    /// Displacements at `queries` for the field induced by `prompt`.
    fn displacements(
        &self,
        prompt: &ParticleEnsemble,
        cond: &Conditioning,
        queries: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>>;

    /// Evaluate the displacements, ask `seed` for `d(loss)/d(outputs)`, and
    /// return the parameter gradients in [`JkoModel::params`] order.
    fn displacements_backward(
        &self,
        prompt: &ParticleEnsemble,
        cond: &Conditioning,
        queries: ArrayView2<'_, f64>,
        seed: &mut dyn FnMut(&Array2<f64>) -> Result<Array2<f64>>,
    ) -> Result<Vec<Array2<f64>>>;
}

/// A model's field over one fixed prompt, usable wherever a [`DisplacementField`] is.
pub struct ModelField<'a, M: JkoModel + ?Sized> {
    pub model: &'a M,
    pub prompt: &'a ParticleEnsemble,
    pub cond: &'a Conditioning,
}

impl<M: JkoModel + ?Sized> DisplacementField for ModelField<'_, M> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn eval(&self, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.model.displacements(self.prompt, self.cond, points)
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct Mlp {
    first: Linear,
    second: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    g: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct AttnWeights {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct EncoderBlock {
    ln_attn: Norm,
    attn: AttnWeights,
    ln_ffn: Norm,
    ffn: Mlp,
}

#[derive(Debug, Clone, Copy)]
struct CrossBlock {
    ln_query: Norm,
    ln_context: Norm,
    attn: AttnWeights,
    ln_ffn: Norm,
    ffn: Mlp,
}

#[derive(Debug, Clone)]
struct Layout {
    lift: Mlp,
    target_lift: Option<Mlp>,
    encoder: Vec<EncoderBlock>,
    ln_context: Norm,
    query_lift: Mlp,
    cross: CrossBlock,
    proj: Mlp,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorParams {
    pub names: Vec<String>,
    pub tensors: Vec<Array2<f64>>,
}

impl OperatorParams {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

struct Builder {
    names: Vec<String>,
    tensors: Vec<Array2<f64>>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn tensor(&mut self, name: String, value: Array2<f64>) -> usize {
        self.names.push(name);
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    fn gaussian(&mut self, rows: usize, cols: usize, std: f64) -> Array2<f64> {
        let rng = &mut self.rng;
        Array2::from_shape_fn((rows, cols), |_| std * rng.sample::<f64, _>(StandardNormal))
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, zero: bool) -> Linear {
        let w = if zero {
            Array2::zeros((fan_in, fan_out))
        } else {
            self.gaussian(fan_in, fan_out, (1.0 / fan_in as f64).sqrt())
        };
        Linear {
            w: self.tensor(format!("{name}.w"), w),
            b: self.tensor(format!("{name}.b"), Array2::zeros((1, fan_out))),
        }
    }

    fn mlp(&mut self, name: &str, input: usize, hidden: usize, output: usize, zero_last: bool) -> Mlp {
        Mlp {
            first: self.linear(&format!("{name}.0"), input, hidden, false),
            second: self.linear(&format!("{name}.1"), hidden, output, zero_last),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> Norm {
        Norm {
            g: self.tensor(format!("{name}.g"), Array2::ones((1, width))),
            b: self.tensor(format!("{name}.b"), Array2::zeros((1, width))),
        }
    }

    fn attn(&mut self, name: &str, h: usize) -> AttnWeights {
        let std = (1.0 / h as f64).sqrt();
        let mk = |b: &mut Self, suffix: &str| {
            let w = b.gaussian(h, h, std);
            b.tensor(format!("{name}.{suffix}"), w)
        };
        AttnWeights {
            wq: mk(self, "wq"),
            wk: mk(self, "wk"),
            wv: mk(self, "wv"),
            wo: mk(self, "wo"),
        }
    }
}

fn build_layout(cfg: &OperatorConfig) -> (Layout, Vec<String>, Vec<Array2<f64>>) {
    let h = cfg.embed_dim;
    let mut b = Builder {
        names: Vec::new(),
        tensors: Vec::new(),
        rng: ChaCha8Rng::seed_from_u64(cfg.init_seed),
    };
    let lift = b.mlp("lift", cfg.prompt_width(), cfg.lift_hidden, h, false);
    let target_lift = cfg
        .has(Channel::KlTarget)
        .then(|| b.mlp("target_lift", cfg.target_width(), cfg.lift_hidden, h, false));
    let encoder = (0..cfg.encoder_blocks)
        .map(|i| EncoderBlock {
            ln_attn: b.norm(&format!("enc{i}.ln_attn"), h),
            attn: b.attn(&format!("enc{i}.attn"), h),
            ln_ffn: b.norm(&format!("enc{i}.ln_ffn"), h),
            ffn: b.mlp(&format!("enc{i}.ffn"), h, cfg.ffn_hidden, h, false),
        })
        .collect();
    let ln_context = b.norm("ln_context", h);
    let query_lift = b.mlp("query_lift", cfg.dim, cfg.lift_hidden, h, false);
    let cross = CrossBlock {
        ln_query: b.norm("cross.ln_query", h),
        ln_context: b.norm("cross.ln_context", h),
        attn: b.attn("cross.attn", h),
        ln_ffn: b.norm("cross.ln_ffn", h),
        ffn: b.mlp("cross.ffn", h, cfg.ffn_hidden, h, false),
    };
    // Zero final layer: the untrained operator is the identity map.
    let proj = b.mlp("proj", h, cfg.proj_hidden, cfg.dim, true);
    let layout = Layout {
        lift,
        target_lift,
        encoder,
        ln_context,
        query_lift,
        cross,
        proj,
    };
    (layout, b.names, b.tensors)
}

/// Per-point context produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedContext {
    pub rows: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct NeuralOperator {
    config: OperatorConfig,
    layout: Layout,
    params: OperatorParams,
}

impl NeuralOperator {
    pub fn new(config: OperatorConfig) -> Result<Self> {
        config.validate()?;
        let (layout, names, tensors) = build_layout(&config);
        Ok(Self {
            config,
            layout,
            params: OperatorParams { names, tensors },
        })
    }

    /// Rebuild from a config and stored tensors; names and shapes must match.
    pub fn from_params(config: OperatorConfig, params: OperatorParams) -> Result<Self> {
        let mut op = Self::new(config)?;
        if params.names != op.params.names {
            return Err(Error::structural("parameter names do not match the operator layout"));
        }
        for ((name, a), b) in params.names.iter().zip(&params.tensors).zip(&op.params.tensors) {
            if a.dim() != b.dim() {
                return Err(Error::structural(format!(
                    "tensor `{name}` has shape {:?}, layout expects {:?}",
                    a.dim(),
                    b.dim()
                )));
            }
        }
        if !params.all_finite() {
            return Err(Error::numeric(0, "non-finite parameter value"));
        }
        op.params = params;
        Ok(op)
    }

    pub fn config(&self) -> &OperatorConfig {
        &self.config
    }

    pub fn operator_params(&self) -> &OperatorParams {
        &self.params
    }

    fn prompt_features(&self, prompt: &ParticleEnsemble, cond: &Conditioning) -> Result<Array2<f64>> {
        let cfg = &self.config;
        if prompt.dim() != cfg.dim {
            return Err(Error::structural(format!(
                "prompt dimension {} does not match operator dimension {}",
                prompt.dim(),
                cfg.dim
            )));
        }
        let m = prompt.len();
        let mut feats = Array2::zeros((m, cfg.prompt_width()));
        feats.slice_mut(ndarray::s![.., ..cfg.dim]).assign(&prompt.points());
        let mut col = cfg.dim;
        if cfg.has(Channel::ParamsPq) {
            let (p, q) = cond
                .pq
                .ok_or_else(|| Error::structural("operator expects (p, q) conditioning but none was given"))?;
            feats.column_mut(col).fill(p);
            feats.column_mut(col + 1).fill(q);
            col += 2;
        }
        if cfg.has(Channel::DensityValues) {
            feats.column_mut(col).assign(&prompt.densities());
        }
        Ok(feats)
    }

    fn target_features(&self, cond: &Conditioning) -> Result<Option<Array2<f64>>> {
        let cfg = &self.config;
        if !cfg.has(Channel::KlTarget) {
            return Ok(None);
        }
        let target = cond
            .target
            .as_ref()
            .ok_or_else(|| Error::structural("operator expects KL target samples but none were given"))?;
        let samples = target.samples();
        if samples.dim() != cfg.dim {
            return Err(Error::structural("target dimension does not match operator dimension"));
        }
        let mut feats = Array2::zeros((samples.len(), cfg.target_width()));
        feats.slice_mut(ndarray::s![.., ..cfg.dim]).assign(&samples.points());
        if cfg.has(Channel::DensityValues) {
            feats.column_mut(cfg.dim).assign(&samples.densities());
        }
        Ok(Some(feats))
    }

    fn leaves(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    fn linear(tape: &mut Tape, pv: &[Var], x: Var, l: Linear) -> Var {
        let y = tape.matmul(x, pv[l.w]);
        tape.add_bias(y, pv[l.b])
    }

    fn mlp(tape: &mut Tape, pv: &[Var], x: Var, m: Mlp) -> Var {
        let hdn = Self::linear(tape, pv, x, m.first);
        let act = tape.silu(hdn);
        Self::linear(tape, pv, act, m.second)
    }

    fn norm(tape: &mut Tape, pv: &[Var], x: Var, n: Norm) -> Var {
        tape.layer_norm(x, pv[n.g], pv[n.b])
    }

    fn mha(&self, tape: &mut Tape, pv: &[Var], queries: Var, context: Var, w: AttnWeights) -> Var {
        let q = tape.matmul(queries, pv[w.wq]);
        let k = tape.matmul(context, pv[w.wk]);
        let v = tape.matmul(context, pv[w.wv]);
        let o = tape.attention(q, k, v, self.config.heads);
        tape.matmul(o, pv[w.wo])
    }

    fn encode_on(
        &self,
        tape: &mut Tape,
        pv: &[Var],
        prompt: &ParticleEnsemble,
        cond: &Conditioning,
    ) -> Result<Var> {
        let feats = self.prompt_features(prompt, cond)?;
        let target = self.target_features(cond)?;
        let x = tape.leaf(feats);
        let mut ctx = Self::mlp(tape, pv, x, self.layout.lift);
        if let (Some(tf), Some(tl)) = (target, self.layout.target_lift) {
            let y = tape.leaf(tf);
            let lifted = Self::mlp(tape, pv, y, tl);
            ctx = tape.concat_rows(ctx, lifted);
        }
        for block in &self.layout.encoder {
            let n = Self::norm(tape, pv, ctx, block.ln_attn);
            let a = self.mha(tape, pv, n, n, block.attn);
            ctx = tape.add(ctx, a);
            let n = Self::norm(tape, pv, ctx, block.ln_ffn);
            let f = Self::mlp(tape, pv, n, block.ffn);
            ctx = tape.add(ctx, f);
        }
        Ok(Self::norm(tape, pv, ctx, self.layout.ln_context))
    }

    fn query_on(&self, tape: &mut Tape, pv: &[Var], ctx: Var, queries: ArrayView2<'_, f64>) -> Result<Var> {
        if queries.ncols() != self.config.dim {
            return Err(Error::structural(format!(
                "query dimension {} does not match operator dimension {}",
                queries.ncols(),
                self.config.dim
            )));
        }
        let cross = self.layout.cross;
        let x = tape.leaf(queries.to_owned());
        let mut q = Self::mlp(tape, pv, x, self.layout.query_lift);
        let nq = Self::norm(tape, pv, q, cross.ln_query);
        let nc = Self::norm(tape, pv, ctx, cross.ln_context);
        let a = self.mha(tape, pv, nq, nc, cross.attn);
        q = tape.add(q, a);
        let n = Self::norm(tape, pv, q, cross.ln_ffn);
        let f = Self::mlp(tape, pv, n, cross.ffn);
        q = tape.add(q, f);
        Ok(Self::mlp(tape, pv, q, self.layout.proj))
    }

    pub fn encode(&self, prompt: &ParticleEnsemble, cond: &Conditioning) -> Result<EncodedContext> {
        let mut tape = Tape::new();
        let pv = self.leaves(&mut tape);
        let ctx = self.encode_on(&mut tape, &pv, prompt, cond)?;
        Ok(EncodedContext {
            rows: tape.value(ctx).clone(),
        })
    }

    pub fn query(&self, ctx: &EncodedContext, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if ctx.rows.ncols() != self.config.embed_dim {
            return Err(Error::structural("context width does not match the operator"));
        }
        let mut tape = Tape::new();
        let pv = self.leaves(&mut tape);
        let c = tape.leaf(ctx.rows.clone());
        let out = self.query_on(&mut tape, &pv, c, points)?;
        Ok(tape.value(out).clone())
    }

    pub fn forward(
        &self,
        prompt: &ParticleEnsemble,
        cond: &Conditioning,
        queries: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let ctx = self.encode(prompt, cond)?;
        self.query(&ctx, queries)
    }

    /// The field over a fixed prompt; the prompt is encoded once.
    pub fn field(&self, prompt: &ParticleEnsemble, cond: &Conditioning) -> Result<OperatorField<'_>> {
        Ok(OperatorField {
            op: self,
            ctx: self.encode(prompt, cond)?,
        })
    }
}

impl JkoModel for NeuralOperator {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn params(&self) -> &[Array2<f64>] {
        &self.params.tensors
    }

    fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params.tensors
    }

    fn param_names(&self) -> Vec<String> {
        self.params.names.clone()
    }

    fn displacements(
        &self,
        prompt: &ParticleEnsemble,
        cond: &Conditioning,
        queries: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        self.forward(prompt, cond, queries)
    }

    fn displacements_backward(
        &self,
        prompt: &ParticleEnsemble,
        cond: &Conditioning,
        queries: ArrayView2<'_, f64>,
        seed: &mut dyn FnMut(&Array2<f64>) -> Result<Array2<f64>>,
    ) -> Result<Vec<Array2<f64>>> {
        let mut tape = Tape::new();
        let pv = self.leaves(&mut tape);
        let ctx = self.encode_on(&mut tape, &pv, prompt, cond)?;
        let out = self.query_on(&mut tape, &pv, ctx, queries)?;
        let g = seed(tape.value(out))?;
        let mut grads = tape.backward(out, g);
        Ok(pv
            .iter()
            .zip(&self.params.tensors)
            .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Array2::zeros(t.dim())))
            .collect())
    }
}

/// [`NeuralOperator`] field over an already-encoded prompt.
pub struct OperatorField<'a> {
    op: &'a NeuralOperator,
    ctx: EncodedContext,
}

impl DisplacementField for OperatorField<'_> {
    fn dim(&self) -> usize {
        self.op.config.dim
    }

    fn eval(&self, points: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.op.query(&self.ctx, points)
    }
}

/// Prompt-independent affine model `V(x) = x A + b`, used as a linear-closure
/// stand-in for the network in tests and toy problems.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStub {
    params: Vec<Array2<f64>>,
}

impl LinearStub {
    pub fn zeros(dim: usize) -> Self {
        Self {
            params: vec![Array2::zeros((dim, dim)), Array2::zeros((1, dim))],
        }
    }

    /// `V(x) = delta * x`.
    pub fn scaling(dim: usize, delta: f64) -> Self {
        Self {
            params: vec![Array2::eye(dim) * delta, Array2::zeros((1, dim))],
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.params[0]
    }

    pub fn offset(&self) -> Array1<f64> {
        self.params[1].row(0).to_owned()
    }
}

impl JkoModel for LinearStub {
    fn dim(&self) -> usize {
        self.params[0].nrows()
    }

    fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    fn param_names(&self) -> Vec<String> {
        vec!["linear.a".into(), "linear.b".into()]
    }

    fn displacements(
        &self,
        _prompt: &ParticleEnsemble,
        _cond: &Conditioning,
        queries: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        if queries.ncols() != self.dim() {
            return Err(Error::structural("query dimension mismatch"));
        }
        Ok(queries.dot(&self.params[0]) + &self.params[1].row(0))
    }

    fn displacements_backward(
        &self,
        prompt: &ParticleEnsemble,
        cond: &Conditioning,
        queries: ArrayView2<'_, f64>,
        seed: &mut dyn FnMut(&Array2<f64>) -> Result<Array2<f64>>,
    ) -> Result<Vec<Array2<f64>>> {
        let out = self.displacements(prompt, cond, queries)?;
        let g = seed(&out)?;
        Ok(vec![queries.t().dot(&g), g.sum_axis(Axis(0)).insert_axis(Axis(0))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::reference_attention;
    use crate::energy::GaussianMixture;

    fn tiny(channels: Vec<Channel>) -> OperatorConfig {
        OperatorConfig {
            dim: 2,
            embed_dim: 16,
            heads: 2,
            encoder_blocks: 2,
            lift_hidden: 8,
            ffn_hidden: 16,
            proj_hidden: 8,
            conditioning: channels,
            init_seed: 7,
            precision: "f64".into(),
        }
    }

    fn randomize_proj(op: &mut NeuralOperator) {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (name, t) in op.params.names.iter().zip(op.params.tensors.iter_mut()) {
            if name.starts_with("proj.1") || name.ends_with(".b") {
                t.mapv_inplace(|_| 0.3 * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }

    fn prompt(m: usize, seed: u64) -> ParticleEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GaussianMixture::standard(2).sample(m, &mut rng).unwrap()
    }

    #[test]
    fn zero_projection_gives_zero_field() {
        let op = NeuralOperator::new(tiny(vec![])).unwrap();
        let p = prompt(10, 1);
        let out = op.forward(&p, &Conditioning::none(), p.points()).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn prompt_permutation_invariance() {
        let mut op = NeuralOperator::new(tiny(vec![Channel::DensityValues])).unwrap();
        randomize_proj(&mut op);
        let p = prompt(12, 2);
        let perm: Vec<usize> = (0..12).rev().collect();
        let pts = p.points().select(Axis(0), &perm);
        let rho = p.densities().select(Axis(0), &perm);
        let permuted = ParticleEnsemble::new(pts, rho, 0).unwrap();
        let q = prompt(5, 3);
        let a = op.forward(&p, &Conditioning::none(), q.points()).unwrap();
        let b = op.forward(&permuted, &Conditioning::none(), q.points()).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        // context rows permute with the prompt
        let ca = op.encode(&p, &Conditioning::none()).unwrap();
        let cb = op.encode(&permuted, &Conditioning::none()).unwrap();
        let ca_perm = ca.rows.select(Axis(0), &perm);
        for (x, y) in ca_perm.iter().zip(cb.rows.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn single_point_prompt() {
        let op = NeuralOperator::new(tiny(vec![])).unwrap();
        let p = prompt(1, 4);
        let ctx = op.encode(&p, &Conditioning::none()).unwrap();
        assert_eq!(ctx.rows.nrows(), 1);
    }

    #[test]
    fn query_independence() {
        let mut op = NeuralOperator::new(tiny(vec![])).unwrap();
        randomize_proj(&mut op);
        let p = prompt(9, 5);
        let q1 = prompt(4, 6).points().to_owned();
        let q2 = prompt(7, 7).points().to_owned();
        let both = ndarray::concatenate(Axis(0), &[q1.view(), q2.view()]).unwrap();
        let ctx = op.encode(&p, &Conditioning::none()).unwrap();
        let alone = op.query(&ctx, q1.view()).unwrap();
        let joint = op.query(&ctx, both.view()).unwrap();
        assert_eq!(alone, joint.slice(ndarray::s![..4, ..]).to_owned());
        let twice = ndarray::concatenate(Axis(0), &[q1.view(), q1.view()]).unwrap();
        let out = op.query(&ctx, twice.view()).unwrap();
        assert_eq!(out.slice(ndarray::s![..4, ..]), out.slice(ndarray::s![4.., ..]));
    }

    #[test]
    fn missing_conditioning_is_structural() {
        let op = NeuralOperator::new(tiny(vec![Channel::ParamsPq])).unwrap();
        let p = prompt(3, 8);
        assert!(matches!(op.encode(&p, &Conditioning::none()), Err(Error::Structural(_))));
        assert!(op.encode(&p, &Conditioning::pq(0.5, 3.0)).is_ok());
        let kl = NeuralOperator::new(tiny(vec![Channel::KlTarget])).unwrap();
        assert!(matches!(kl.encode(&p, &Conditioning::none()), Err(Error::Structural(_))));
    }

    #[test]
    fn kl_target_extends_context() {
        let op = NeuralOperator::new(tiny(vec![Channel::KlTarget, Channel::DensityValues])).unwrap();
        let p = prompt(6, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let target = TargetHandle::sampled(GaussianMixture::standard(2), 4, &mut rng).unwrap();
        let ctx = op.encode(&p, &Conditioning::target(Arc::new(target))).unwrap();
        assert_eq!(ctx.rows.nrows(), 10);
    }

    #[test]
    fn variable_prompt_sizes() {
        let op = NeuralOperator::new(tiny(vec![])).unwrap();
        for m in [100, 1024] {
            let p = prompt(m, 11);
            let out = op.forward(&p, &Conditioning::none(), p.points()).unwrap();
            assert_eq!(out.dim(), (m, 2));
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny(vec![]);
        cfg.heads = 3;
        assert!(NeuralOperator::new(cfg).is_err());
        let mut cfg = tiny(vec![]);
        cfg.precision = "f32".into();
        assert!(matches!(NeuralOperator::new(cfg), Err(Error::Config(_))));
    }

    /// Encoder with one block, replayed with plain matrix algebra.
    #[test]
    fn encoder_matches_dense_reference() {
        let mut cfg = tiny(vec![]);
        cfg.encoder_blocks = 1;
        let op = NeuralOperator::new(cfg).unwrap();
        let p = prompt(6, 12);
        let t = |name: &str| {
            let i = op.params.names.iter().position(|n| n == name).unwrap();
            op.params.tensors[i].clone()
        };
        let silu = |a: Array2<f64>| a.mapv(|x| x / (1.0 + (-x).exp()));
        let lin = |x: &Array2<f64>, n: &str| x.dot(&t(&format!("{n}.w"))) + &t(&format!("{n}.b")).row(0);
        let ln = |x: &Array2<f64>, n: &str| {
            let g = t(&format!("{n}.g"));
            let b = t(&format!("{n}.b"));
            let mut out = x.clone();
            for mut row in out.outer_iter_mut() {
                let mean = row.mean().unwrap();
                let var = row.mapv(|v| (v - mean).powi(2)).mean().unwrap();
                row.mapv_inplace(|v| (v - mean) / (var + 1e-5).sqrt());
            }
            out * &g.row(0) + &b.row(0)
        };
        let x = p.points().to_owned();
        let mut ctx = lin(&silu(lin(&x, "lift.0")), "lift.1");
        let n = ln(&ctx, "enc0.ln_attn");
        let att = reference_attention(
            n.dot(&t("enc0.attn.wq")).view(),
            n.dot(&t("enc0.attn.wk")).view(),
            n.dot(&t("enc0.attn.wv")).view(),
            2,
        )
        .dot(&t("enc0.attn.wo"));
        ctx = ctx + att;
        let n = ln(&ctx, "enc0.ln_ffn");
        ctx = &ctx + &lin(&silu(lin(&n, "enc0.ffn.0")), "enc0.ffn.1");
        let expect = ln(&ctx, "ln_context");
        let got = op.encode(&p, &Conditioning::none()).unwrap();
        for (a, b) in got.rows.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut op = NeuralOperator::new(tiny(vec![Channel::DensityValues])).unwrap();
        randomize_proj(&mut op);
        let p = prompt(5, 13);
        let q = prompt(3, 14).points().to_owned();
        let cond = Conditioning::none();
        let loss = |o: &NeuralOperator| o.forward(&p, &cond, q.view()).unwrap().mapv(|v| v * v).sum();
        let grads = op
            .displacements_backward(&p, &cond, q.view(), &mut |y| Ok(y * 2.0))
            .unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (ti, g) in grads.iter().enumerate() {
            for idx in 0..g.len() {
                let (r, c) = (idx / g.ncols(), idx % g.ncols());
                let mut plus = op.clone();
                plus.params.tensors[ti][[r, c]] += h;
                let mut minus = op.clone();
                minus.params.tensors[ti][[r, c]] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let err = (fd - g[[r, c]]).abs() / fd.abs().max(g[[r, c]].abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn linear_stub_backward() {
        let stub = LinearStub::scaling(2, 0.1);
        let p = prompt(4, 15);
        let grads = stub
            .displacements_backward(&p, &Conditioning::none(), p.points(), &mut |y| Ok(y.clone()))
            .unwrap();
        let expect = p.points().t().dot(&(p.points().to_owned() * 0.1));
        assert_eq!(grads[0], expect);
    }
}
