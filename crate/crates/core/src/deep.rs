//! Stacked Q-EP layers: the composite bound, ancestral prediction, training
//! and checkpoints.
//!
//! Layer `ℓ` maps `X^{ℓ+1}` (width `D_{ℓ+1}`) to `X^ℓ` (width `D_ℓ`), with
//! `X⁰ = Y`. `states[ℓ].x_mean` holds `q(X^{ℓ+1})`; for a supervised model the
//! top layer's inputs are observed and that state has zero latent rows.

use log::{info, warn};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, QepError, Result};
use crate::kernels::{gram, mc_noise, KernelFamily, KernelSpec, KernelVars, DEFAULT_MC_DRAWS};
use crate::linalg;
use crate::optim::tape::{hstack, Tape, Var};
use crate::optim::{self, Bound, OptimConfig, ParamVector, Trace, Transform};
use crate::qed::unit_covariance_draw;
use crate::shallow::{
    h_star, mle_pca_init, neg_kl_u, neg_kl_x, predict_q_f_diag, psi_on_tape, LayerInput, LayerSpec, LayerVars, PsiRoute,
    VariationalState,
};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Unsupervised,
}

/// Output likelihood of layer 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Head {
    Regression,
    /// Softmax over `classes` outputs; `h₀` becomes a Monte-Carlo
    /// categorical log-likelihood.
    Classification { classes: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeepModel {
    pub mode: Mode,
    pub head: Head,
    pub q: f64,
    pub layers: Vec<LayerSpec>,
    pub states: Vec<VariationalState>,
    /// Monte-Carlo draws per point for kernels without closed psi statistics.
    pub mc_draws: usize,
    /// Samples per point for the classification likelihood.
    pub class_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerBreakdown {
    pub h_star: f64,
    pub kl_u_star: f64,
    /// `½ Σ log|Sₙ^ℓ|` for middle layers `ℓ ≥ 1`.
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeepElboBreakdown {
    pub per_layer: Vec<LayerBreakdown>,
    /// Zero in supervised mode.
    pub kl_z_star: f64,
    pub total: f64,
    pub clamped: usize,
}

impl DeepModel {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// `D₀, …, D_L`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.out_dim).collect();
        w.push(self.layers.last().map_or(0, |l| l.in_dim));
        w
    }

    /// Rows of the latent variational state (training-set size).
    pub fn num_points(&self) -> usize {
        self.states.iter().map(|s| s.x_mean.nrows()).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() || self.layers.len() != self.states.len() {
            return Err(invalid("need one state per layer and at least one layer"));
        }
        for (l, (spec, st)) in self.layers.iter().zip(&self.states).enumerate() {
            spec.validate()?;
            if spec.q != self.q {
                return Err(invalid(format!("layer {l} has q = {} but the model uses {}", spec.q, self.q)));
            }
            if l + 1 < self.layers.len() && self.layers[l + 1].out_dim != spec.in_dim {
                return Err(invalid(format!("layer {} output width differs from layer {l} input width", l + 1)));
            }
            let top_observed = self.mode == Mode::Supervised && l + 1 == self.layers.len();
            if top_observed {
                if st.x_mean.nrows() != 0 {
                    return Err(invalid("observed top-layer inputs must have an empty latent state"));
                }
            } else if st.x_mean.nrows() == 0 {
                return Err(invalid(format!("layer {l} needs a latent state")));
            }
            if top_observed {
                check_layer_params(spec, st)?;
            } else {
                st.validate(spec)?;
            }
        }
        let n = self.num_points();
        if self.states.iter().any(|s| s.x_mean.nrows() != 0 && s.x_mean.nrows() != n) {
            return Err(invalid("latent states disagree on the number of points"));
        }
        if let Head::Classification { classes } = self.head {
            if classes < 2 || self.layers[0].out_dim != classes {
                return Err(invalid("classification needs D₀ = number of classes ≥ 2"));
            }
        }
        if self.mc_draws == 0 || self.class_samples == 0 {
            return Err(invalid("Monte-Carlo sample counts must be positive"));
        }
        Ok(())
    }
}

fn check_layer_params(spec: &LayerSpec, st: &VariationalState) -> Result<()> {
    let probe = VariationalState {
        x_mean: DMatrix::zeros(1, spec.in_dim),
        x_cov_diag: DMatrix::from_element(1, spec.in_dim, 1.0),
        ..st.clone()
    };
    probe.validate(spec)
}

/// Integer labels from an N × 1 matrix.
pub fn labels_of(y: &DMatrix<f64>, classes: usize) -> Result<Vec<usize>> {
    if y.ncols() != 1 {
        return Err(invalid("class labels must be a single column"));
    }
    y.iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                Ok(v as usize)
            } else {
                Err(QepError::Evaluation(format!("label {v} outside 0..{classes}")))
            }
        })
        .collect()
}

/// Pre-drawn Monte-Carlo noise for one bound evaluation.
struct Noise {
    /// Per layer, for Monte-Carlo psi statistics.
    psi: Vec<Option<DMatrix<f64>>>,
    class_x: Option<DMatrix<f64>>,
    class_f: Option<DMatrix<f64>>,
}

impl Noise {
    fn draw<R: Rng + ?Sized>(model: &DeepModel, n: usize, rng: &mut R) -> Noise {
        let mut psi = Vec::with_capacity(model.num_layers());
        for (l, spec) in model.layers.iter().enumerate() {
            let classified = l == 0 && matches!(model.head, Head::Classification { .. });
            let latent_input = model.states[l].x_mean.nrows() > 0;
            if !classified && latent_input && !spec.kernel.family.has_closed_psi() {
                psi.push(Some(mc_noise(n * model.mc_draws, spec.in_dim, model.q, rng)));
            } else {
                psi.push(None);
            }
        }
        let (mut class_x, mut class_f) = (None, None);
        if let Head::Classification { classes } = model.head {
            let s = model.class_samples;
            if model.states[0].x_mean.nrows() > 0 {
                class_x = Some(mc_noise(n * s, model.layers[0].in_dim, model.q, rng));
            }
            class_f = Some(mc_noise(n * s, classes, model.q, rng));
        }
        Noise { psi, class_x, class_f }
    }
}

struct ModelVars<'t> {
    layers: Vec<LayerVars<'t>>,
    /// `q(X^{ℓ+1})` per layer; `None` when observed.
    latents: Vec<Option<(Var<'t>, Var<'t>)>>,
}

fn constant_vars<'t>(tape: &'t Tape, model: &DeepModel) -> ModelVars<'t> {
    let layers = model.layers.iter().zip(&model.states).map(|(s, st)| LayerVars::constant(tape, s, st)).collect();
    let latents = model
        .states
        .iter()
        .map(|st| (st.x_mean.nrows() > 0).then(|| (tape.var(st.x_mean.clone()), tape.var(st.x_cov_diag.clone()))))
        .collect();
    ModelVars { layers, latents }
}

fn bound_vars<'t>(b: &Bound<'t>, model: &DeepModel) -> ModelVars<'t> {
    let mut layers = Vec::new();
    let mut latents = Vec::new();
    for (l, spec) in model.layers.iter().enumerate() {
        let p = |f: &str| format!("l{l}.{f}");
        layers.push(LayerVars {
            kernel: KernelVars::from_logs(spec.kernel.family, b.raw(&p("log_alpha")), b.raw(&p("log_gamma")), spec.kernel.jitter),
            beta: b.get(&p("beta")),
            inducing: b.get(&p("inducing")),
            u_mean: b.get(&p("u_mean")),
            u_chols: (0..spec.out_dim).map(|d| b.get(&p(&format!("u_chol{d}")))).collect(),
        });
        latents.push(b.has(&p("x_mean")).then(|| (b.get(&p("x_mean")), b.get(&p("x_cov_diag")))));
    }
    ModelVars { layers, latents }
}

struct BoundTerms<'t> {
    h: Vec<Var<'t>>,
    neg_kl_u: Vec<Var<'t>>,
    entropy: Vec<Option<Var<'t>>>,
    neg_kl_z: Option<Var<'t>>,
    total: Var<'t>,
    clamped: usize,
}

fn build_bound<'t>(
    tape: &'t Tape,
    model: &DeepModel,
    mv: &ModelVars<'t>,
    y: &DMatrix<f64>,
    labels: Option<&[usize]>,
    inputs: Option<&DMatrix<f64>>,
    noise: &Noise,
) -> Result<BoundTerms<'t>> {
    let big_l = model.num_layers();
    let q = model.q;
    let n = y.nrows();
    let widths = model.widths();
    let inputs_v = inputs.map(|x| tape.var(x.clone()));
    let mut terms = BoundTerms {
        h: Vec::new(),
        neg_kl_u: Vec::new(),
        entropy: Vec::new(),
        neg_kl_z: None,
        total: tape.scalar(0.0),
        clamped: 0,
    };
    for l in 0..big_l {
        let lv = &mv.layers[l];
        let input = match mv.latents[l] {
            Some((mu, s)) => {
                assert_eq!(mu.shape(), (n, widths[l + 1]), "latent mean shape");
                LayerInput::Dist { mu, s }
            }
            None => LayerInput::Exact(inputs_v.ok_or_else(|| invalid("supervised model needs inputs"))?),
        };
        let lk = lv.kmm_chol()?;
        let h = match (l, model.head) {
            (0, Head::Classification { .. }) => {
                class_loglik(model, lv, lk, input, labels.expect("labels for classification"), noise)?
            }
            _ => {
                let route = match &noise.psi[l] {
                    Some(e) => PsiRoute::Mc { noise: e, draws: model.mc_draws },
                    None => PsiRoute::Closed,
                };
                let psi = psi_on_tape(&lv.kernel, input, lv.inducing, route)?;
                let (target, target_s) = if l == 0 {
                    (tape.var(y.clone()), None)
                } else {
                    let (mu, s) = mv.latents[l - 1].expect("hidden layers are latent");
                    (mu, Some(s))
                };
                assert_eq!(target.shape(), (n, widths[l]), "layer target shape");
                let (h, c) = h_star(lv, lk, target, target_s, psi, q);
                terms.clamped += c as usize;
                h
            }
        };
        let (ku, c) = neg_kl_u(lv, lk, q);
        terms.clamped += c as usize;
        let ent = (l >= 1).then(|| mv.latents[l - 1].expect("hidden layers are latent").1.ln().sum().scale(0.5));
        let mut layer_total = h + ku;
        if let Some(e) = ent {
            layer_total = layer_total + e;
        }
        terms.total = terms.total + layer_total;
        terms.h.push(h);
        terms.neg_kl_u.push(ku);
        terms.entropy.push(ent);
    }
    if let Some((mu, s)) = mv.latents[big_l - 1] {
        let (kz, c) = neg_kl_x(mu, s, q);
        terms.clamped += c as usize;
        terms.total = terms.total + kz;
        terms.neg_kl_z = Some(kz);
    }
    Ok(terms)
}

/// Monte-Carlo estimate of `⟨log softmax(F⁰)[label]⟩` under `q(X¹) q(F⁰)`.
fn class_loglik<'t>(
    model: &DeepModel,
    lv: &LayerVars<'t>,
    lk: Var<'t>,
    input: LayerInput<'t>,
    labels: &[usize],
    noise: &Noise,
) -> Result<Var<'t>> {
    let s = model.class_samples;
    let tape = lk.tape();
    let x = match input {
        LayerInput::Exact(x) => x.repeat_rows(s),
        LayerInput::Dist { mu, s: cov } => {
            let e = tape.var(noise.class_x.clone().expect("class noise"));
            mu.repeat_rows(s) + cov.sqrt().repeat_rows(s).hadamard(e)
        }
    };
    let (mean, var) = q_f_on_tape(lv, lk, x);
    let f = mean + var.clamp_min(1e-12).sqrt().hadamard(tape.var(noise.class_f.clone().expect("class noise")));
    let rep: Vec<usize> = labels.iter().flat_map(|&c| std::iter::repeat_n(c, s)).collect();
    Ok(f.log_softmax_rows().pick_sum(&rep).scale(1.0 / s as f64))
}

/// Mean and marginal variances of `q(F)` at rows of `x`, on the tape.
fn q_f_on_tape<'t>(lv: &LayerVars<'t>, lk: Var<'t>, x: Var<'t>) -> (Var<'t>, Var<'t>) {
    let kzx = lv.kernel.gram(lv.inducing, x, false);
    let a = lk.solve_lower(kzx);
    let w = lk.solve_lower_t(a);
    let mean = w.t().matmul(lv.u_mean);
    let kdiag = match lv.kernel.family {
        KernelFamily::LinearArd => x.hadamard(x).scale_cols(lv.kernel.sqrt_gamma.hadamard(lv.kernel.sqrt_gamma)).row_sum(),
        _ => x.tape().var(DMatrix::from_element(x.nrows(), 1, 1.0)).mul_scalar(lv.kernel.alpha_inv),
    };
    let base = kdiag - a.hadamard(a).t().row_sum();
    let cols: Vec<Var<'t>> = lv
        .u_chols
        .iter()
        .map(|l| {
            let b = l.t().matmul(w);
            base + b.hadamard(b).t().row_sum()
        })
        .collect();
    (mean, hstack(&cols))
}

fn breakdown(terms: &BoundTerms<'_>) -> DeepElboBreakdown {
    DeepElboBreakdown {
        per_layer: (0..terms.h.len())
            .map(|l| LayerBreakdown {
                h_star: terms.h[l].scalar_value(),
                kl_u_star: -terms.neg_kl_u[l].scalar_value(),
                entropy: terms.entropy[l].map(|e| e.scalar_value()),
            })
            .collect(),
        kl_z_star: terms.neg_kl_z.map_or(0.0, |v| -v.scalar_value()),
        total: terms.total.scalar_value(),
        clamped: terms.clamped,
    }
}

fn check_data(model: &DeepModel, y: &DMatrix<f64>, inputs: Option<&DMatrix<f64>>) -> Result<Option<Vec<usize>>> {
    model.validate()?;
    let n = model.num_points().max(inputs.map_or(0, |x| x.nrows()));
    if y.nrows() != n {
        return Err(invalid(format!("targets have {} rows, model expects {n}", y.nrows())));
    }
    match model.mode {
        Mode::Supervised => {
            let x = inputs.ok_or_else(|| invalid("supervised mode requires inputs"))?;
            if x.shape() != (n, model.layers.last().unwrap().in_dim) {
                return Err(invalid("inputs must be N × D_L"));
            }
        }
        Mode::Unsupervised => {
            if inputs.is_some() {
                return Err(invalid("unsupervised mode takes no inputs"));
            }
        }
    }
    match model.head {
        Head::Regression => {
            if y.ncols() != model.layers[0].out_dim {
                return Err(invalid("targets must be N × D₀"));
            }
            Ok(None)
        }
        Head::Classification { classes } => labels_of(y, classes).map(Some),
    }
}

/// Evaluates the composite bound at the model's current parameters.
pub fn deep_elbo<R: Rng + ?Sized>(
    y: &DMatrix<f64>,
    model: &DeepModel,
    inputs: Option<&DMatrix<f64>>,
    rng: &mut R,
) -> Result<DeepElboBreakdown> {
    let labels = check_data(model, y, inputs)?;
    let noise = Noise::draw(model, y.nrows(), rng);
    let tape = Tape::new();
    let mv = constant_vars(&tape, model);
    let terms = build_bound(&tape, model, &mv, y, labels.as_deref(), inputs, &noise)?;
    Ok(breakdown(&terms))
}

/// `−ELBO` of a model as an [`optim::Objective`] over [`DeepModel::to_params`].
pub struct DeepObjective<'a> {
    model: &'a DeepModel,
    y: &'a DMatrix<f64>,
    labels: Option<Vec<usize>>,
    inputs: Option<&'a DMatrix<f64>>,
}

impl<'a> DeepObjective<'a> {
    pub fn new(model: &'a DeepModel, y: &'a DMatrix<f64>, inputs: Option<&'a DMatrix<f64>>) -> Result<Self> {
        let labels = check_data(model, y, inputs)?;
        Ok(Self { model, y, labels, inputs })
    }
}

impl optim::Objective for DeepObjective<'_> {
    fn loss<'t>(&self, tape: &'t Tape, params: &Bound<'t>, rng: &mut ChaCha8Rng) -> Result<Var<'t>> {
        let noise = Noise::draw(self.model, self.y.nrows(), rng);
        let mv = bound_vars(params, self.model);
        let terms = build_bound(tape, self.model, &mv, self.y, self.labels.as_deref(), self.inputs, &noise)?;
        Ok(-terms.total)
    }
}

impl DeepModel {
    /// All trainable fields, unconstrained.
    pub fn to_params(&self) -> Result<ParamVector> {
        let mut pv = ParamVector::new();
        for (l, (spec, st)) in self.layers.iter().zip(&self.states).enumerate() {
            let p = |f: &str| format!("l{l}.{f}");
            let k = &spec.kernel;
            pv.push(p("log_alpha"), &DMatrix::from_element(1, 1, k.alpha), Transform::Log)?;
            pv.push(p("log_gamma"), &DMatrix::from_row_slice(1, k.gamma.len(), &k.gamma), Transform::Log)?;
            pv.push(p("beta"), &DMatrix::from_element(1, 1, spec.beta), Transform::Log)?;
            pv.push(p("inducing"), &st.inducing, Transform::Identity)?;
            pv.push(p("u_mean"), &st.u_mean, Transform::Identity)?;
            for (d, c) in st.u_cov_chol.iter().enumerate() {
                pv.push(p(&format!("u_chol{d}")), c, Transform::TrilLogDiag)?;
            }
            if st.x_mean.nrows() > 0 {
                pv.push(p("x_mean"), &st.x_mean, Transform::Identity)?;
                pv.push(p("x_cov_diag"), &st.x_cov_diag, Transform::Log)?;
            }
        }
        Ok(pv)
    }

    /// Copies trained values back into the model.
    pub fn set_params(&mut self, pv: &ParamVector) -> Result<()> {
        for (l, (spec, st)) in self.layers.iter_mut().zip(self.states.iter_mut()).enumerate() {
            let p = |f: &str| format!("l{l}.{f}");
            spec.kernel.alpha = pv.get(&p("log_alpha"))?[(0, 0)];
            spec.kernel.gamma = pv.get(&p("log_gamma"))?.iter().copied().collect();
            spec.beta = pv.get(&p("beta"))?[(0, 0)];
            st.inducing = pv.get(&p("inducing"))?;
            st.u_mean = pv.get(&p("u_mean"))?;
            for d in 0..st.u_cov_chol.len() {
                st.u_cov_chol[d] = pv.get(&p(&format!("u_chol{d}")))?;
            }
            if st.x_mean.nrows() > 0 {
                st.x_mean = pv.get(&p("x_mean"))?;
                st.x_cov_diag = pv.get(&p("x_cov_diag"))?;
            }
        }
        Ok(())
    }
}

/// Structure and starting values for [`DeepModel::initialize`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSetup {
    pub mode: Mode,
    pub head: Head,
    pub q: f64,
    /// Widths `D₁, …, D_{L−1}` of the hidden layers (empty for one layer).
    pub hidden: Vec<usize>,
    /// `D_L` for an unsupervised model; ignored when inputs are observed.
    pub latent_dim: usize,
    pub family: KernelFamily,
    pub num_inducing: usize,
    pub beta: f64,
    pub latent_var: f64,
    pub mc_draws: usize,
    pub class_samples: usize,
    pub seed: u64,
}

impl Default for ModelSetup {
    fn default() -> Self {
        Self {
            mode: Mode::Supervised,
            head: Head::Regression,
            q: 1.0,
            hidden: vec![],
            latent_dim: 2,
            family: KernelFamily::Matern32Ard,
            num_inducing: 32,
            beta: 100.0,
            latent_var: 0.1,
            mc_draws: DEFAULT_MC_DRAWS,
            class_samples: 16,
            seed: 0,
        }
    }
}

impl DeepModel {
    /// Builds a model around data. Latent means are chained PCA
    /// initializations (`X¹` from `Y`, `X²` from `X¹`, ...); inducing inputs
    /// come from k-means on each layer's input means; `q(U)` starts at the
    /// Gaussian-optimal mean and covariance given those means.
    pub fn initialize(setup: &ModelSetup, y: &DMatrix<f64>, inputs: Option<&DMatrix<f64>>) -> Result<DeepModel> {
        let n = y.nrows();
        let out = match setup.head {
            Head::Regression => y.ncols(),
            Head::Classification { classes } => classes,
        };
        let target0 = match setup.head {
            Head::Regression => y.clone(),
            Head::Classification { classes } => one_hot(&labels_of(y, classes)?, classes),
        };
        let top_dim = match (setup.mode, inputs) {
            (Mode::Supervised, Some(x)) => {
                if x.nrows() != n {
                    return Err(invalid("inputs and targets differ in row count"));
                }
                x.ncols()
            }
            (Mode::Supervised, None) => return Err(invalid("supervised mode requires inputs")),
            (Mode::Unsupervised, Some(_)) => return Err(invalid("unsupervised mode takes no inputs")),
            (Mode::Unsupervised, None) => setup.latent_dim,
        };
        let mut widths = vec![out];
        widths.extend(&setup.hidden);
        widths.push(top_dim);
        let big_l = widths.len() - 1;
        let m = setup.num_inducing.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);

        // latent means for X¹..X^L (X^L observed when supervised)
        let mut means: Vec<DMatrix<f64>> = Vec::with_capacity(big_l);
        let mut prev = target0.clone();
        for l in 1..=big_l {
            if l == big_l && setup.mode == Mode::Supervised {
                means.push(inputs.unwrap().clone());
                break;
            }
            let init = mle_pca_init(&center(&prev), widths[l].min(n), 1.0, setup.beta, setup.q)?;
            let mut x = init.x;
            standardize_columns(&mut x);
            if x.ncols() < widths[l] {
                x = DMatrix::from_fn(n, widths[l], |i, j| if j < x.ncols() { x[(i, j)] } else { 0.0 });
            }
            prev = x.clone();
            means.push(x);
        }

        let mut layers = Vec::with_capacity(big_l);
        let mut states = Vec::with_capacity(big_l);
        for l in 0..big_l {
            let xin = &means[l];
            let target = if l == 0 { &target0 } else { &means[l - 1] };
            let gamma: Vec<f64> = (0..widths[l + 1])
                .map(|j| {
                    let v = column_var(xin, j);
                    if v > 1e-12 { 1.0 / v } else { 1.0 }
                })
                .collect();
            let kernel = KernelSpec::new(setup.family, 1.0, gamma)?;
            let spec = LayerSpec {
                in_dim: widths[l + 1],
                out_dim: widths[l],
                kernel,
                beta: setup.beta,
                q: setup.q,
                num_inducing: m,
            };
            let inducing = kmeans(xin, m, &mut rng);
            let (u_mean, u_cov_chol) = optimal_q_u(&spec, &inducing, xin, target)?;
            let observed = l + 1 == big_l && setup.mode == Mode::Supervised;
            let (x_mean, x_cov_diag) = if observed {
                (DMatrix::zeros(0, widths[l + 1]), DMatrix::zeros(0, widths[l + 1]))
            } else {
                (xin.clone(), DMatrix::from_element(n, widths[l + 1], setup.latent_var))
            };
            layers.push(spec);
            states.push(VariationalState { inducing, u_mean, u_cov_chol, x_mean, x_cov_diag });
        }
        let model = DeepModel {
            mode: setup.mode,
            head: setup.head,
            q: setup.q,
            layers,
            states,
            mc_draws: setup.mc_draws,
            class_samples: setup.class_samples,
        };
        model.validate()?;
        Ok(model)
    }
}

fn one_hot(labels: &[usize], classes: usize) -> DMatrix<f64> {
    DMatrix::from_fn(labels.len(), classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 })
}

fn center(y: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = y.clone();
    for j in 0..y.ncols() {
        let m = y.column(j).mean();
        out.column_mut(j).add_scalar_mut(-m);
    }
    out
}

fn column_var(x: &DMatrix<f64>, j: usize) -> f64 {
    let c = x.column(j);
    let m = c.mean();
    c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.nrows().max(1) as f64
}

fn standardize_columns(x: &mut DMatrix<f64>) {
    for j in 0..x.ncols() {
        let sd = column_var(x, j).sqrt();
        if sd > 1e-12 {
            x.column_mut(j).scale_mut(1.0 / sd);
        }
    }
}

/// k-means++ seeding followed by Lloyd iterations.
pub(crate) fn kmeans<R: Rng + ?Sized>(x: &DMatrix<f64>, k: usize, rng: &mut R) -> DMatrix<f64> {
    let n = x.nrows();
    let dist2 = |i: usize, c: &DMatrix<f64>, j: usize| -> f64 { (x.row(i) - c.row(j)).norm_squared() };
    let mut centers = DMatrix::zeros(k, x.ncols());
    centers.row_mut(0).copy_from(&x.row(rng.random_range(0..n)));
    let mut best = vec![f64::INFINITY; n];
    for c in 1..k {
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(dist2(i, &centers, c - 1));
        }
        let total: f64 = best.iter().sum();
        let pick = if total > 0.0 {
            let mut t = rng.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, b) in best.iter().enumerate() {
                if t < *b {
                    idx = i;
                    break;
                }
                t -= b;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from(&x.row(pick));
    }
    for _ in 0..50 {
        let mut sums = DMatrix::zeros(k, x.ncols());
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = (0..k).min_by(|&a, &b| dist2(i, &centers, a).total_cmp(&dist2(i, &centers, b))).unwrap();
            let mut r = sums.row_mut(j);
            r += x.row(i);
            counts[j] += 1;
        }
        let mut moved = 0.0;
        for j in 0..k {
            if counts[j] > 0 {
                let c = sums.row(j) / counts[j] as f64;
                moved += (&c - centers.row(j)).norm_squared();
                centers.row_mut(j).copy_from(&c);
            }
        }
        if moved < 1e-20 {
            break;
        }
    }
    centers
}

/// Gaussian-optimal `q(U)` given exact inputs:
/// `Σ = (K_MM + βK_MN K_NM)⁻¹`, mean `βK_MM Σ K_MN T`, covariance `K_MM Σ K_MM`.
fn optimal_q_u(spec: &LayerSpec, z: &DMatrix<f64>, x: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    let kmm = gram(&spec.kernel, z, z)?;
    let kmn = gram(&spec.kernel, z, x)?;
    let a = &kmm + &kmn * kmn.transpose() * spec.beta;
    let la = linalg::cholesky(&linalg::symmetrize(&a))?;
    let mean = &kmm * linalg::chol_solve(&la, &(&kmn * t)) * spec.beta;
    let cov = linalg::symmetrize(&(&kmm * linalg::chol_solve(&la, &kmm)));
    let lc = linalg::cholesky(&cov)?;
    Ok((mean, vec![lc; spec.out_dim]))
}

/// Maximizes the bound with Adam. Returns the trained model and the trace of
/// `−ELBO`.
pub fn fit(y: &DMatrix<f64>, model: &DeepModel, inputs: Option<&DMatrix<f64>>, config: &OptimConfig) -> Result<(DeepModel, Trace)> {
    let obj = DeepObjective::new(model, y, inputs)?;
    let init = model.to_params()?;
    let (best, trace) = optim::minimize(&obj, init, config)?;
    let mut out = model.clone();
    out.set_params(&best)?;
    if let (Some(first), Some(last)) = (trace.losses.first(), trace.losses.last()) {
        info!("fit: −ELBO {first:.4} → {last:.4} over {} iterations", trace.losses.len());
    }
    if trace.skipped > 0 {
        warn!("fit: skipped {} non-finite steps", trace.skipped);
    }
    Ok((out, trace))
}

/// Ancestral samples of layer-0 outputs at `x_new`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepPrediction {
    /// `n_samples` matrices of shape T × D₀.
    pub samples: Vec<DMatrix<f64>>,
    pub mean: DMatrix<f64>,
    pub stddev: DMatrix<f64>,
}

/// Propagates `x_new` through the layers by sampling `q(F^ℓ)` plus the
/// layer noise at every step. For a classification head the layer-0 noise is
/// omitted and the samples are logits.
pub fn deep_predict<R: Rng + ?Sized>(model: &DeepModel, x_new: &DMatrix<f64>, n_samples: usize, rng: &mut R) -> Result<DeepPrediction> {
    model.validate()?;
    if model.mode != Mode::Supervised {
        return Err(invalid("prediction needs a supervised model"));
    }
    if n_samples == 0 {
        return Err(invalid("n_samples must be at least 1"));
    }
    let top = model.layers.last().unwrap().in_dim;
    if x_new.ncols() != top {
        return Err(invalid(format!("inputs must have {top} columns")));
    }
    let t = x_new.nrows();
    let d0 = model.layers[0].out_dim;
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let mut h = x_new.clone();
        for l in (0..model.num_layers()).rev() {
            let spec = &model.layers[l];
            let (mean, var) = predict_q_f_diag(&model.states[l], spec, &h)?;
            let noisy = !(l == 0 && matches!(model.head, Head::Classification { .. }));
            let mut next = mean;
            for i in 0..t {
                let e = unit_covariance_draw(spec.out_dim, model.q, rng);
                let eps = if noisy { unit_covariance_draw(spec.out_dim, model.q, rng) } else { e.clone() * 0.0 };
                for d in 0..spec.out_dim {
                    next[(i, d)] += var[(i, d)].sqrt() * e[d] + eps[d] / spec.beta.sqrt();
                }
            }
            h = next;
        }
        samples.push(h);
    }
    let mut mean = DMatrix::zeros(t, d0);
    for s in &samples {
        mean += s;
    }
    mean /= n_samples as f64;
    let mut var = DMatrix::zeros(t, d0);
    for s in &samples {
        var += (s - &mean).map(|v| v * v);
    }
    let stddev = (var / n_samples as f64).map(f64::sqrt);
    Ok(DeepPrediction { samples, mean, stddev })
}

/// Class probabilities at `x_new`: softmax of sampled logits, averaged.
pub fn predict_proba<R: Rng + ?Sized>(model: &DeepModel, x_new: &DMatrix<f64>, n_samples: usize, rng: &mut R) -> Result<DMatrix<f64>> {
    if !matches!(model.head, Head::Classification { .. }) {
        return Err(invalid("class probabilities need a classification head"));
    }
    let pred = deep_predict(model, x_new, n_samples, rng)?;
    let (t, c) = pred.mean.shape();
    let mut p = DMatrix::zeros(t, c);
    for s in &pred.samples {
        for i in 0..t {
            let m = s.row(i).max();
            let z: f64 = s.row(i).iter().map(|v| (v - m).exp()).sum();
            for j in 0..c {
                p[(i, j)] += (s[(i, j)] - m).exp() / z;
            }
        }
    }
    Ok(p / n_samples as f64)
}

// ---- checkpoints ----

#[derive(Debug, Clone, Serialize, Deserialize)]
struct KernelDoc {
    family: KernelFamily,
    alpha: f64,
    gamma: Vec<f64>,
    jitter: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerDoc {
    /// `[D_ℓ, D_{ℓ+1}]`.
    widths: [usize; 2],
    kernel: KernelDoc,
    beta_or_gamma_l: f64,
    inducing: Vec<Vec<f64>>,
    u_mean: Vec<Vec<f64>>,
    u_cov_chol: Vec<Vec<Vec<f64>>>,
    x_mean: Vec<Vec<f64>>,
    x_cov_diag: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointDoc {
    format_version: u32,
    mode: Mode,
    head: Head,
    q: f64,
    mc_draws: usize,
    class_samples: usize,
    layers: Vec<LayerDoc>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], cols: usize, what: &str) -> Result<DMatrix<f64>> {
    if r.iter().any(|row| row.len() != cols) {
        return Err(invalid(format!("checkpoint field `{what}` is ragged or has the wrong width")));
    }
    Ok(DMatrix::from_fn(r.len(), cols, |i, j| r[i][j]))
}

impl DeepModel {
    pub fn to_json(&self) -> Result<String> {
        let layers = self
            .layers
            .iter()
            .zip(&self.states)
            .map(|(s, st)| LayerDoc {
                widths: [s.out_dim, s.in_dim],
                kernel: KernelDoc {
                    family: s.kernel.family,
                    alpha: s.kernel.alpha,
                    gamma: s.kernel.gamma.clone(),
                    jitter: s.kernel.jitter,
                },
                beta_or_gamma_l: s.beta,
                inducing: rows(&st.inducing),
                u_mean: rows(&st.u_mean),
                u_cov_chol: st.u_cov_chol.iter().map(rows).collect(),
                x_mean: rows(&st.x_mean),
                x_cov_diag: rows(&st.x_cov_diag),
            })
            .collect();
        let doc = CheckpointDoc {
            format_version: FORMAT_VERSION,
            mode: self.mode,
            head: self.head,
            q: self.q,
            mc_draws: self.mc_draws,
            class_samples: self.class_samples,
            layers,
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<DeepModel> {
        let doc: CheckpointDoc = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(invalid(format!("unsupported checkpoint version {}", doc.format_version)));
        }
        let mut layers = Vec::new();
        let mut states = Vec::new();
        for (l, ld) in doc.layers.iter().enumerate() {
            let [d, q_in] = ld.widths;
            let m = ld.inducing.len();
            let kernel = KernelSpec { family: ld.kernel.family, alpha: ld.kernel.alpha, gamma: ld.kernel.gamma.clone(), jitter: ld.kernel.jitter };
            layers.push(LayerSpec { in_dim: q_in, out_dim: d, kernel, beta: ld.beta_or_gamma_l, q: doc.q, num_inducing: m });
            let name = |f: &str| format!("layers[{l}].{f}");
            states.push(VariationalState {
                inducing: from_rows(&ld.inducing, q_in, &name("inducing"))?,
                u_mean: from_rows(&ld.u_mean, d, &name("u_mean"))?,
                u_cov_chol: ld
                    .u_cov_chol
                    .iter()
                    .map(|c| from_rows(c, m, &name("u_cov_chol")))
                    .collect::<Result<_>>()?,
                x_mean: from_rows(&ld.x_mean, q_in, &name("x_mean"))?,
                x_cov_diag: from_rows(&ld.x_cov_diag, q_in, &name("x_cov_diag"))?,
            });
        }
        let model = DeepModel {
            mode: doc.mode,
            head: doc.head,
            q: doc.q,
            layers,
            states,
            mc_draws: doc.mc_draws,
            class_samples: doc.class_samples,
        };
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::psi_stats_closed;
    use crate::shallow::shallow_elbo;

    fn rand_mat(r: usize, c: usize, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
    }

    fn rand_state(n: usize, m: usize, q_in: usize, d: usize, latent: bool, rng: &mut ChaCha8Rng) -> VariationalState {
        VariationalState {
            inducing: rand_mat(m, q_in, -1.0, 1.0, rng),
            u_mean: rand_mat(m, d, -1.0, 1.0, rng),
            u_cov_chol: (0..d)
                .map(|_| {
                    let mut l = linalg::tril(&rand_mat(m, m, -0.2, 0.2, rng));
                    for i in 0..m {
                        l[(i, i)] = rng.random_range(0.2..0.6);
                    }
                    l
                })
                .collect(),
            x_mean: if latent { rand_mat(n, q_in, -1.0, 1.0, rng) } else { DMatrix::zeros(0, q_in) },
            x_cov_diag: if latent { rand_mat(n, q_in, 0.05, 0.3, rng) } else { DMatrix::zeros(0, q_in) },
        }
    }

    fn layer(q_in: usize, d: usize, m: usize, q: f64, fam: KernelFamily) -> LayerSpec {
        LayerSpec {
            in_dim: q_in,
            out_dim: d,
            kernel: KernelSpec::new(fam, 1.2, vec![0.9; q_in]).unwrap(),
            beta: 4.0,
            q,
            num_inducing: m,
        }
    }

    fn two_layer(mode: Mode, q: f64, rng: &mut ChaCha8Rng) -> DeepModel {
        let n = 8;
        DeepModel {
            mode,
            head: Head::Regression,
            q,
            layers: vec![layer(2, 2, 3, q, KernelFamily::SeArd), layer(1, 2, 3, q, KernelFamily::SeArd)],
            states: vec![rand_state(n, 3, 2, 2, true, rng), rand_state(n, 3, 1, 2, mode == Mode::Unsupervised, rng)],
            mc_draws: 4,
            class_samples: 3,
        }
    }

    #[test]
    fn single_layer_equals_shallow_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for q in [1.0, 1.5, 2.0] {
            let spec = layer(2, 3, 4, q, KernelFamily::SeArd);
            let st = rand_state(7, 4, 2, 3, true, &mut rng);
            let y = rand_mat(7, 3, -1.0, 1.0, &mut rng);
            let psi = psi_stats_closed(&spec.kernel, &st.x_mean, &st.x_cov_diag, &st.inducing).unwrap();
            let s = shallow_elbo(&y, &st, &spec, &psi).unwrap();
            let model = DeepModel {
                mode: Mode::Unsupervised,
                head: Head::Regression,
                q,
                layers: vec![spec],
                states: vec![st],
                mc_draws: 4,
                class_samples: 2,
            };
            let d = deep_elbo(&y, &model, None, &mut rng).unwrap();
            assert!((d.total - s.total).abs() < 1e-10, "q={q}: {} vs {}", d.total, s.total);
            assert!((d.kl_z_star - s.kl_x_star).abs() < 1e-10);
        }
    }

    #[test]
    fn total_is_sum_of_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = two_layer(Mode::Unsupervised, 1.0, &mut rng);
        let y = rand_mat(8, 2, -1.0, 1.0, &mut rng);
        let e = deep_elbo(&y, &model, None, &mut rng).unwrap();
        let sum: f64 = e.per_layer.iter().map(|l| l.h_star - l.kl_u_star + l.entropy.unwrap_or(0.0)).sum::<f64>() - e.kl_z_star;
        assert!((e.total - sum).abs() < 1e-10);
        assert!(e.per_layer[0].entropy.is_none());
        let half_log_s = 0.5 * model.states[0].x_cov_diag.iter().map(|v| v.ln()).sum::<f64>();
        assert!((e.per_layer[1].entropy.unwrap() - half_log_s).abs() < 1e-12);
    }

    #[test]
    fn middle_layer_extra_term_vanishes_with_latent_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut model = two_layer(Mode::Unsupervised, 1.0, &mut rng);
        let y = rand_mat(8, 2, -1.0, 1.0, &mut rng);
        model.states[0].x_cov_diag.fill(1e-200);
        let e = deep_elbo(&y, &model, None, &mut rng).unwrap();
        // layer 1 h* must equal a shallow bound with Y = µ¹
        let spec = model.layers[1].clone();
        let st = model.states[1].clone();
        let psi = psi_stats_closed(&spec.kernel, &st.x_mean, &st.x_cov_diag, &st.inducing).unwrap();
        let s = shallow_elbo(&model.states[0].x_mean, &st, &spec, &psi).unwrap();
        assert!((e.per_layer[1].h_star - s.h_star).abs() < 1e-9);
    }

    #[test]
    fn supervised_requires_inputs_and_checks_widths() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = two_layer(Mode::Supervised, 1.0, &mut rng);
        let y = rand_mat(8, 2, -1.0, 1.0, &mut rng);
        assert!(deep_elbo(&y, &model, None, &mut rng).is_err());
        assert!(deep_elbo(&y, &model, Some(&rand_mat(8, 3, -1.0, 1.0, &mut rng)), &mut rng).is_err());
        let x = rand_mat(8, 1, -1.0, 1.0, &mut rng);
        let e = deep_elbo(&y, &model, Some(&x), &mut rng).unwrap();
        assert_eq!(e.kl_z_star, 0.0);
        let mut bad = model.clone();
        bad.layers[1].out_dim = 3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (mode, fam) in [(Mode::Unsupervised, KernelFamily::SeArd), (Mode::Supervised, KernelFamily::Matern32Ard)] {
            let mut model = two_layer(mode, 1.0, &mut rng);
            for l in model.layers.iter_mut() {
                l.kernel.family = fam;
            }
            let y = rand_mat(8, 2, -1.0, 1.0, &mut rng);
            let x = rand_mat(8, 1, -1.0, 1.0, &mut rng);
            let inputs = (mode == Mode::Supervised).then_some(&x);
            let obj = DeepObjective::new(&model, &y, inputs).unwrap();
            let rep = optim::check_gradient(&obj, &model.to_params().unwrap(), 1e-5, 11).unwrap();
            let w = rep.worst().unwrap();
            assert!(rep.max_rel_error < 1e-4, "{mode:?}: {} a={} f={}", w.name, w.analytic, w.numeric);
        }
    }

    #[test]
    fn classification_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = two_layer(Mode::Supervised, 1.0, &mut rng);
        model.head = Head::Classification { classes: 2 };
        let y = DMatrix::from_fn(8, 1, |i, _| (i % 2) as f64);
        let x = rand_mat(8, 1, -1.0, 1.0, &mut rng);
        let obj = DeepObjective::new(&model, &y, Some(&x)).unwrap();
        let rep = optim::check_gradient(&obj, &model.to_params().unwrap(), 1e-5, 3).unwrap();
        assert!(rep.max_rel_error < 1e-4, "{:?}", rep.worst());
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = two_layer(Mode::Unsupervised, 1.0, &mut rng);
        let pv = model.to_params().unwrap();
        let mut back = model.clone();
        back.set_params(&pv).unwrap();
        for (a, b) in model.states.iter().zip(&back.states) {
            assert!((&a.x_cov_diag - &b.x_cov_diag).amax() < 1e-12);
            assert!((&a.u_cov_chol[0] - &b.u_cov_chol[0]).amax() < 1e-12);
        }
        assert!((model.layers[0].beta - back.layers[0].beta).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = two_layer(Mode::Supervised, 1.0, &mut rng);
        let text = model.to_json().unwrap();
        let back = DeepModel::from_json(&text).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.to_json().unwrap(), text);
        assert!(text.contains("\"format_version\": 1"));
    }

    #[test]
    fn zero_variance_prediction_collapses() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = two_layer(Mode::Supervised, 1.0, &mut rng);
        for (spec, st) in model.layers.iter_mut().zip(model.states.iter_mut()) {
            spec.beta = 1e30;
            spec.kernel.jitter = 0.0;
            for c in st.u_cov_chol.iter_mut() {
                *c = DMatrix::identity(3, 3) * 1e-30;
            }
            // inducing values equal the prior at the inducing points, so
            // evaluating there gives zero conditional variance
        }
        let x = model.states[1].inducing.rows(0, 1).into_owned();
        let mut m1 = model.clone();
        // make the top layer noise-free at its inducing input and feed its
        // mean into layer 0 at an inducing point
        let top = m1.states[1].u_mean.row(0).into_owned();
        m1.states[0].inducing.row_mut(0).copy_from(&top);
        let p = deep_predict(&m1, &x, 50, &mut rng).unwrap();
        assert!(p.stddev.amax() < 1e-6, "{}", p.stddev);
    }

    #[test]
    fn prediction_is_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let model = two_layer(Mode::Supervised, 1.0, &mut rng);
        let x = rand_mat(4, 1, -1.0, 1.0, &mut rng);
        let a = deep_predict(&model, &x, 20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = deep_predict(&model, &x, 20, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(deep_predict(&model, &x, 0, &mut rng).is_err());
    }

    #[test]
    fn kmeans_finds_separated_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = DMatrix::from_fn(60, 1, |i, _| if i < 30 { -5.0 } else { 5.0 } + 0.01 * (i as f64 % 3.0));
        let c = kmeans(&x, 2, &mut rng);
        let mut v: Vec<f64> = c.iter().copied().collect();
        v.sort_by(f64::total_cmp);
        assert!((v[0] + 4.99).abs() < 0.02 && (v[1] - 5.01).abs() < 0.02, "{v:?}");
    }

    #[test]
    fn initialize_builds_valid_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let y = rand_mat(30, 3, -1.0, 1.0, &mut rng);
        let x = rand_mat(30, 1, -1.0, 1.0, &mut rng);
        let setup = ModelSetup { hidden: vec![2], num_inducing: 5, family: KernelFamily::SeArd, ..Default::default() };
        let m = DeepModel::initialize(&setup, &y, Some(&x)).unwrap();
        assert_eq!(m.widths(), vec![3, 2, 1]);
        let e = deep_elbo(&y, &m, Some(&x), &mut rng).unwrap();
        assert!(e.total.is_finite());
        let setup = ModelSetup { mode: Mode::Unsupervised, latent_dim: 2, ..setup };
        let m = DeepModel::initialize(&setup, &y, None).unwrap();
        assert_eq!(m.widths(), vec![3, 2, 2]);
    }

    #[test]
    fn fit_with_zero_iterations_is_a_no_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let model = two_layer(Mode::Unsupervised, 1.0, &mut rng);
        let y = rand_mat(8, 2, -1.0, 1.0, &mut rng);
        let cfg = OptimConfig { iterations: 0, ..Default::default() };
        let (out, trace) = fit(&y, &model, None, &cfg).unwrap();
        assert!(trace.losses.is_empty());
        assert_eq!(out.to_params().unwrap(), model.to_params().unwrap());
    }
}
