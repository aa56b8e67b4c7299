//! Adversarial training loop: per mini-batch, one or more discriminator
//! logistic-regression steps on fresh prior samples, then one joint update of
//! the generator, encoder and prior from the explicit gradient estimators.
//! Four optimizer groups carry the four learning rates. Checkpoints capture
//! every parameter, optimizer moment and the RNG state, so a resumed run
//! continues the uninterrupted trajectory bit-exactly.

use crate::eval::{self, EvalError};
use crate::graph::{apply_mask, GraphError, GraphMask};
use crate::nn::{Activation, AdamState, Net, NetSpec, NnError, ParamGrads, Role};
use crate::objectives::{
    disc_loss, estimate_grads, sup_loss_ce, sup_loss_l2, EstimatorBatch, ObjectiveError,
    SupLossKind,
};
use crate::prior::{ElementwiseTransform, PriorError, ScmPrior};
use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use thiserror::Error;

/// Smallest cumulative slope the prior transform may keep after an update.
pub const INVERTIBILITY_FLOOR: f64 = 1e-3;

const CKPT_MAGIC: &[u8; 4] = b"DEAR";
const CKPT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite {term} at epoch {epoch}, step {step}")]
    NonFinite { term: &'static str, epoch: u64, step: u64 },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint header: {0}")]
    CkptHeader(#[from] serde_json::Error),
    #[error("not a checkpoint file (bad magic)")]
    CkptMagic,
    #[error("checkpoint format version {got}, want {want}")]
    CkptVersion { got: u32, want: u32 },
    #[error("checkpoint truncated: {0}")]
    CkptTruncated(String),
    #[error("checkpoint checksum mismatch")]
    CkptChecksum,
}

/// Structure placed on the latent prior: the masked structural model, or the
/// fully factorized ablation with no edges at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PriorMode {
    Scm,
    Independent,
}

/// Family of the elementwise transform f.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FMode {
    Linear,
    Pwl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_d: f64,
    pub lr_eg: f64,
    pub lr_prior_f: f64,
    pub lr_a: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub d_steps: usize,
    pub epochs: usize,
    pub label_fraction: f64,
    pub clamp_c: f64,
    pub seed: u64,
    pub prior_mode: PriorMode,
    pub f_mode: FMode,
    pub sup_kind: SupLossKind,
    pub k: usize,
    pub m: usize,
    /// Pixels per image; the nets are sized from this.
    pub img_size: usize,
    /// Hidden width shared by all three nets.
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_d: 1e-4,
            lr_eg: 5e-5,
            lr_prior_f: 5e-5,
            lr_a: 1e-3,
            batch_size: 128,
            lambda: 5.0,
            d_steps: 1,
            epochs: 200,
            label_fraction: 1.0,
            clamp_c: 4.0,
            seed: 0,
            prior_mode: PriorMode::Scm,
            f_mode: FMode::Pwl,
            sup_kind: SupLossKind::SquaredError,
            k: 8,
            m: 4,
            img_size: 1024,
            hidden: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            (self.lr_d, "lr_d"),
            (self.lr_eg, "lr_eg"),
            (self.lr_prior_f, "lr_prior_f"),
            (self.lr_a, "lr_a"),
        ];
        for (v, name) in positive {
            if !(v > 0.0) {
                return Err(TrainError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.lambda < 0.0 {
            return Err(TrainError::InvalidConfig("lambda must be nonnegative".into()));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(TrainError::InvalidConfig("label_fraction must be in (0,1]".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.d_steps == 0 {
            return Err(TrainError::InvalidConfig("d_steps must be at least 1".into()));
        }
        if self.clamp_c <= 0.0 {
            return Err(TrainError::InvalidConfig("clamp_c must be positive".into()));
        }
        if self.m == 0 || self.k < self.m {
            return Err(TrainError::InvalidConfig("need 1 <= m <= k".into()));
        }
        if self.img_size == 0 || self.hidden == 0 {
            return Err(TrainError::InvalidConfig("net sizes must be positive".into()));
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> NetSpec {
        NetSpec {
            layer_sizes: vec![self.img_size, self.hidden, self.hidden, self.k],
            activations: vec![Activation::LeakyRelu, Activation::LeakyRelu, Activation::Identity],
            input_role: Role::Encoder,
        }
    }

    pub fn generator_spec(&self) -> NetSpec {
        NetSpec {
            layer_sizes: vec![self.k, self.hidden, self.hidden, self.img_size],
            activations: vec![Activation::LeakyRelu, Activation::LeakyRelu, Activation::Sigmoid],
            input_role: Role::Generator,
        }
    }

    pub fn discriminator_spec(&self) -> NetSpec {
        NetSpec {
            layer_sizes: vec![self.img_size + self.k, self.hidden, self.hidden, 1],
            activations: vec![Activation::LeakyRelu, Activation::LeakyRelu, Activation::Identity],
            input_role: Role::Discriminator,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub e_net: Net,
    pub g_net: Net,
    pub d_net: Net,
    pub prior: ScmPrior,
    pub opt_d: AdamState,
    pub opt_eg: AdamState,
    pub opt_f: AdamState,
    pub opt_a: AdamState,
    pub epoch: u64,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

/// Scalars produced by one training step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub disc_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    pub sup_loss: Option<f64>,
}

/// One metrics-CSV row; validation fields are filled on each epoch's final
/// step only.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: u64,
    pub step: u64,
    pub disc_loss: f64,
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    pub sup_loss: Option<f64>,
    pub val_sup_loss: Option<f64>,
    pub val_mean_abs_spearman: Option<f64>,
}

pub const METRICS_HEADER: &str =
    "epoch,step,disc_loss,d_real_mean,d_fake_mean,sup_loss,val_sup_loss,val_mean_abs_spearman";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.disc_loss,
            self.d_real_mean,
            self.d_fake_mean,
            opt_cell(self.sup_loss),
            opt_cell(self.val_sup_loss),
            opt_cell(self.val_mean_abs_spearman),
        )
    }
}

pub fn write_metrics_csv(rows: &[MetricsRow], path: &Path) -> Result<(), TrainError> {
    let mut out = String::with_capacity(rows.len() * 64 + 64);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Fresh state at epoch 0: nets at their seeded initialization, permitted
/// adjacency entries uniform on ±0.1, transform at the identity.
pub fn init_state(config: &TrainConfig, mask: &GraphMask) -> Result<TrainState, TrainError> {
    config.validate()?;
    if mask.k() != config.m {
        return Err(TrainError::Shape(format!(
            "mask covers {} nodes, config.m is {}",
            mask.k(),
            config.m
        )));
    }
    let effective = match config.prior_mode {
        PriorMode::Scm => mask.clone(),
        PriorMode::Independent => GraphMask::empty(config.m),
    };
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(2);
    let mut weights = Array2::zeros((config.m, config.m));
    for i in 0..config.m {
        for j in 0..config.m {
            if effective.permits(i, j) {
                weights[(i, j)] = rand::Rng::gen_range(&mut init_rng, -0.1..0.1);
            }
        }
    }
    let adjacency = apply_mask(weights, effective)?;
    let f = match config.f_mode {
        FMode::Linear => {
            ElementwiseTransform::linear(vec![1.0; config.m], vec![0.0; config.m])?
        }
        FMode::Pwl => ElementwiseTransform::pwl_identity(config.m, 8, -3.0, 3.0),
    };
    let prior = ScmPrior::new(config.k, config.m, adjacency, f)?;
    let e_net = Net::init(config.encoder_spec(), config.seed.wrapping_mul(4).wrapping_add(1))?;
    let g_net = Net::init(config.generator_spec(), config.seed.wrapping_mul(4).wrapping_add(2))?;
    let d_net =
        Net::init(config.discriminator_spec(), config.seed.wrapping_mul(4).wrapping_add(3))?;
    let opt_d = AdamState::new(d_net.n_params(), config.lr_d);
    let opt_eg = AdamState::new(e_net.n_params() + g_net.n_params(), config.lr_eg);
    let opt_f = AdamState::new(prior.f().n_params(), config.lr_prior_f);
    let opt_a = AdamState::new(config.m * config.m, config.lr_a);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    Ok(TrainState {
        config: config.clone(),
        e_net,
        g_net,
        d_net,
        prior,
        opt_d,
        opt_eg,
        opt_f,
        opt_a,
        epoch: 0,
        step: 0,
        rng,
    })
}

fn draw_eps(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, k), |_| StandardNormal.sample(rng))
}

fn ensure_finite(
    ok: bool,
    term: &'static str,
    state: &TrainState,
) -> Result<(), TrainError> {
    if ok {
        Ok(())
    } else {
        Err(TrainError::NonFinite { term, epoch: state.epoch, step: state.step })
    }
}

/// One joint E+G+prior optimizer update from the gradient estimators; the
/// adjacency is re-masked and the transform re-projected afterwards.
pub fn joint_update(
    state: &mut TrainState,
    x_batch: &Array2<f64>,
    labels: Option<&Array2<f64>>,
) -> Result<StepMetrics, TrainError> {
    let cfg = &state.config;
    let eps = draw_eps(&mut state.rng, x_batch.nrows(), cfg.k);
    let batch = EstimatorBatch { x_batch, eps_batch: &eps, labels };
    let (bundle, diag) = estimate_grads(
        &batch,
        &state.e_net,
        &state.g_net,
        &state.d_net,
        &state.prior,
        cfg.lambda,
        cfg.sup_kind,
        cfg.clamp_c,
    )?;
    ensure_finite(bundle.theta.max_abs().is_finite(), "generator gradient", state)?;
    ensure_finite(bundle.phi.max_abs().is_finite(), "encoder gradient", state)?;
    ensure_finite(
        bundle.f_params.iter().all(|v| v.is_finite()),
        "prior transform gradient",
        state,
    )?;
    ensure_finite(bundle.a.iter().all(|v| v.is_finite()), "adjacency gradient", state)?;
    if let Some(s) = diag.sup_loss {
        ensure_finite(s.is_finite(), "supervised loss", state)?;
    }

    eg_adam_step(state, &bundle.phi, &bundle.theta);
    let mut f_flat = state.prior.f().params_flat();
    state.opt_f.step(&mut f_flat, &bundle.f_params);
    state.prior.f_mut().set_params_flat(&f_flat)?;
    state.prior.project_invertibility(INVERTIBILITY_FLOOR);
    let mut a = state.prior.adjacency().weights().clone();
    state
        .opt_a
        .step(a.as_slice_mut().expect("standard layout"), bundle.a.as_slice().expect("standard layout"));
    state.prior.adjacency_mut().set_weights(a)?;
    state.step += 1;
    Ok(StepMetrics {
        disc_loss: f64::NAN,
        d_real_mean: diag.d_real_mean,
        d_fake_mean: diag.d_fake_mean,
        sup_loss: diag.sup_loss,
    })
}

/// Encoder and generator share one optimizer instance; tensor order is
/// encoder weights, encoder biases, generator weights, generator biases.
fn eg_adam_step(state: &mut TrainState, phi: &ParamGrads, theta: &ParamGrads) {
    let mut params: Vec<&mut [f64]> = Vec::new();
    let mut grads: Vec<&[f64]> = Vec::new();
    for (w, g) in state.e_net.weights.iter_mut().zip(&phi.weights) {
        params.push(w.as_slice_mut().expect("standard layout"));
        grads.push(g.as_slice().expect("standard layout"));
    }
    for (b, g) in state.e_net.biases.iter_mut().zip(&phi.biases) {
        params.push(b.as_slice_mut().expect("contiguous"));
        grads.push(g.as_slice().expect("contiguous"));
    }
    for (w, g) in state.g_net.weights.iter_mut().zip(&theta.weights) {
        params.push(w.as_slice_mut().expect("standard layout"));
        grads.push(g.as_slice().expect("standard layout"));
    }
    for (b, g) in state.g_net.biases.iter_mut().zip(&theta.biases) {
        params.push(b.as_slice_mut().expect("contiguous"));
        grads.push(g.as_slice().expect("contiguous"));
    }
    state.opt_eg.step_group(&mut params, &grads);
}

/// One discriminator logistic-regression update on the given batch against
/// fresh prior samples. Returns (loss, mean score on encoder pairs, mean
/// score on generator pairs).
fn discriminator_step(
    state: &mut TrainState,
    x_batch: &Array2<f64>,
) -> Result<(f64, f64, f64), TrainError> {
    let cfg = &state.config;
    let n = x_batch.nrows();
    let (z_enc, _) = state.e_net.forward_batch(x_batch)?;
    let joint_real = concatenate(Axis(1), &[x_batch.view(), z_enc.view()])
        .map_err(|e| TrainError::Shape(e.to_string()))?;
    let (d_real, tape_r) = state.d_net.forward_batch(&joint_real)?;

    let eps = draw_eps(&mut state.rng, n, cfg.k);
    let mut z_fake = Array2::zeros((n, cfg.k));
    for (i, row) in eps.outer_iter().enumerate() {
        let z = state.prior.sample(row.as_slice().expect("row-major"))?;
        z_fake.row_mut(i).assign(&ndarray::Array1::from_vec(z));
    }
    let (x_fake, _) = state.g_net.forward_batch(&z_fake)?;
    let joint_fake = concatenate(Axis(1), &[x_fake.view(), z_fake.view()])
        .map_err(|e| TrainError::Shape(e.to_string()))?;
    let (d_fake, tape_f) = state.d_net.forward_batch(&joint_fake)?;

    let real_scores: Vec<f64> = d_real.column(0).to_vec();
    let fake_scores: Vec<f64> = d_fake.column(0).to_vec();
    let (loss, dr, df) = disc_loss(&real_scores, &fake_scores)?;
    ensure_finite(loss.is_finite(), "discriminator loss", state)?;

    let up_r = Array2::from_shape_vec((n, 1), dr).expect("length n");
    let up_f = Array2::from_shape_vec((n, 1), df).expect("length n");
    let (mut grads, _) = state.d_net.backward_batch(&tape_r, &up_r)?;
    let (grads_f, _) = state.d_net.backward_batch(&tape_f, &up_f)?;
    grads.add(&grads_f);
    ensure_finite(grads.max_abs().is_finite(), "discriminator gradient", state)?;
    state.d_net.adam_update(&grads, &mut state.opt_d);

    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((loss, mean(&real_scores), mean(&fake_scores)))
}

/// One full training step: `d_steps` discriminator updates, then the joint
/// update. Labeled samples must occupy the first `labels.nrows()` rows.
pub fn train_step(
    state: &mut TrainState,
    x_batch: &Array2<f64>,
    labels: Option<&Array2<f64>>,
) -> Result<StepMetrics, TrainError> {
    if x_batch.nrows() == 0 {
        return Err(TrainError::Shape("empty batch".into()));
    }
    let mut disc_loss_last = 0.0;
    for _ in 0..state.config.d_steps {
        let (loss, _, _) = discriminator_step(state, x_batch)?;
        disc_loss_last = loss;
    }
    let mut metrics = joint_update(state, x_batch, labels)?;
    metrics.disc_loss = disc_loss_last;
    Ok(metrics)
}

/// The seed-fixed labeled subset: exactly ⌊fraction·n⌋ indices, chosen once
/// per run independent of the shuffling stream.
pub fn labeled_mask(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let count = (fraction * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut out = vec![false; n];
    for &i in idx.iter().take(count) {
        out[i] = true;
    }
    out
}

/// Shuffled epoch batches with the labeled members of each batch moved to the
/// front (stably, so the order stays a pure function of the RNG state).
fn epoch_batches(
    rng: &mut ChaCha8Rng,
    n: usize,
    batch_size: usize,
    labeled: &[bool],
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut batch: Vec<usize> = chunk.iter().copied().filter(|&i| labeled[i]).collect();
            batch.extend(chunk.iter().copied().filter(|&i| !labeled[i]));
            batch
        })
        .collect()
}

fn gather_rows(source: &Array2<f64>, idxs: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idxs.len(), source.ncols()));
    for (r, &i) in idxs.iter().enumerate() {
        out.row_mut(r).assign(&source.row(i));
    }
    out
}

fn supervised_metric(
    kind: SupLossKind,
    enc: &Array2<f64>,
    factors: &Array2<f64>,
) -> Result<f64, TrainError> {
    let m = factors.ncols();
    let mut total = 0.0;
    for j in 0..enc.nrows() {
        for i in 0..m {
            total += match kind {
                SupLossKind::CrossEntropy => sup_loss_ce(enc[(j, i)], factors[(j, i)])?.0,
                SupLossKind::SquaredError => sup_loss_l2(enc[(j, i)], factors[(j, i)]).0,
            };
        }
    }
    Ok(total / enc.nrows() as f64)
}

/// Per-epoch validation: supervised loss of the encoder on the labeled dims,
/// and the mean |Spearman| between encoder coordinates and true factors.
/// A constant encoder coordinate scores zero rather than erroring, so early
/// epochs always log.
fn validate_epoch(
    state: &TrainState,
    val_images: &Array2<f64>,
    val_factors: &Array2<f64>,
) -> Result<(f64, f64), TrainError> {
    let enc = eval::encode_dataset(&state.e_net, val_images)?;
    let sup = supervised_metric(state.config.sup_kind, &enc, val_factors)?;
    let m = val_factors.ncols();
    let mut total = 0.0;
    for i in 0..m {
        let e: Vec<f64> = enc.column(i).to_vec();
        let f: Vec<f64> = val_factors.column(i).to_vec();
        match eval::spearman(&e, &f) {
            Ok(rho) => total += rho.abs(),
            Err(EvalError::ConstantInput) => {}
            Err(other) => return Err(other.into()),
        }
    }
    Ok((sup, total / m as f64))
}

fn check_split(
    name: &str,
    images: &Array2<f64>,
    factors: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if images.nrows() == 0 {
        return Err(TrainError::Shape(format!("{name} split is empty")));
    }
    if images.nrows() != factors.nrows() {
        return Err(TrainError::Shape(format!(
            "{name}: {} images vs {} factor rows",
            images.nrows(),
            factors.nrows()
        )));
    }
    if images.ncols() != cfg.img_size {
        return Err(TrainError::Shape(format!(
            "{name}: image width {} vs configured {}",
            images.ncols(),
            cfg.img_size
        )));
    }
    if factors.ncols() != cfg.m {
        return Err(TrainError::Shape(format!(
            "{name}: {} factors vs configured m={}",
            factors.ncols(),
            cfg.m
        )));
    }
    Ok(())
}

/// Run `epochs_to_run` further epochs on an existing state. Checkpoints are
/// refreshed at every epoch boundary when an output directory is given.
pub fn run_epochs(
    state: &mut TrainState,
    train_images: &Array2<f64>,
    train_factors: &Array2<f64>,
    val_images: &Array2<f64>,
    val_factors: &Array2<f64>,
    epochs_to_run: usize,
    out_dir: Option<&Path>,
) -> Result<Vec<MetricsRow>, TrainError> {
    check_split("train", train_images, train_factors, &state.config)?;
    check_split("val", val_images, val_factors, &state.config)?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
    }
    let n = train_images.nrows();
    let labeled = labeled_mask(n, state.config.label_fraction, state.config.seed);
    let mut rows = Vec::new();
    for _ in 0..epochs_to_run {
        let batches = epoch_batches(&mut state.rng, n, state.config.batch_size, &labeled);
        for idxs in &batches {
            let x = gather_rows(train_images, idxs);
            let n_s = idxs.iter().take_while(|&&i| labeled[i]).count();
            let label_rows;
            let labels = if n_s > 0 {
                label_rows = gather_rows(train_factors, &idxs[..n_s]);
                Some(&label_rows)
            } else {
                None
            };
            let metrics = train_step(state, &x, labels)?;
            rows.push(MetricsRow {
                epoch: state.epoch,
                step: state.step,
                disc_loss: metrics.disc_loss,
                d_real_mean: metrics.d_real_mean,
                d_fake_mean: metrics.d_fake_mean,
                sup_loss: metrics.sup_loss,
                val_sup_loss: None,
                val_mean_abs_spearman: None,
            });
        }
        state.epoch += 1;
        let (val_sup, val_spear) = validate_epoch(state, val_images, val_factors)?;
        if let Some(last) = rows.last_mut() {
            last.val_sup_loss = Some(val_sup);
            last.val_mean_abs_spearman = Some(val_spear);
        }
        if let Some(dir) = out_dir {
            save_checkpoint(state, &dir.join("ckpt_latest.bin"))?;
        }
    }
    Ok(rows)
}

/// Full run from initialization. With an output directory this writes
/// `ckpt_latest.bin` each epoch, then `ckpt_final.bin` and `metrics.csv`.
pub fn train(
    config: &TrainConfig,
    mask: &GraphMask,
    train_images: &Array2<f64>,
    train_factors: &Array2<f64>,
    val_images: &Array2<f64>,
    val_factors: &Array2<f64>,
    out_dir: Option<&Path>,
) -> Result<(TrainState, Vec<MetricsRow>), TrainError> {
    let mut state = init_state(config, mask)?;
    let rows = run_epochs(
        &mut state,
        train_images,
        train_factors,
        val_images,
        val_factors,
        config.epochs,
        out_dir,
    )?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        save_checkpoint(&state, &dir.join("ckpt_final.bin"))?;
        write_metrics_csv(&rows, &dir.join("metrics.csv"))?;
    }
    Ok((state, rows))
}

// ── checkpoint format ──
//
// magic "DEAR" | version u32 LE | header length u32 LE | header JSON |
// tensors as f64 LE in header order | CRC32 of the tensor payload, u32 LE.

#[derive(Serialize, Deserialize)]
struct OptMeta {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: u32,
    config: TrainConfig,
    epoch: u64,
    step: u64,
    rng: ChaCha8Rng,
    e_spec: NetSpec,
    g_spec: NetSpec,
    d_spec: NetSpec,
    mask: GraphMask,
    /// Fixed knot grid of the piecewise-linear transform; absent for linear.
    f_knots: Option<Vec<Vec<f64>>>,
    opt: Vec<OptMeta>,
    tensors: Vec<TensorMeta>,
}

fn net_tensors<'a>(prefix: &str, net: &'a Net) -> Vec<(String, &'a [f64])> {
    let mut out = Vec::new();
    for l in 0..net.spec.n_layers() {
        out.push((format!("{prefix}.w{l}"), net.weights[l].as_slice().expect("standard layout")));
        out.push((format!("{prefix}.b{l}"), net.biases[l].as_slice().expect("contiguous")));
    }
    out
}

fn opt_meta(o: &AdamState) -> OptMeta {
    OptMeta { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, t: o.t }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<(), TrainError> {
    let f_flat = state.prior.f().params_flat();
    let a_weights = state.prior.adjacency().weights();
    let mut tensors: Vec<(String, Vec<f64>)> = Vec::new();
    for (prefix, net) in [("e", &state.e_net), ("g", &state.g_net), ("d", &state.d_net)] {
        for (name, slice) in net_tensors(prefix, net) {
            tensors.push((name, slice.to_vec()));
        }
    }
    tensors.push(("prior.f".into(), f_flat));
    tensors.push(("prior.a".into(), a_weights.iter().copied().collect()));
    for (name, opt) in [
        ("opt_d", &state.opt_d),
        ("opt_eg", &state.opt_eg),
        ("opt_f", &state.opt_f),
        ("opt_a", &state.opt_a),
    ] {
        tensors.push((format!("{name}.m"), opt.m.clone()));
        tensors.push((format!("{name}.v"), opt.v.clone()));
    }

    let f_knots = match state.prior.f() {
        ElementwiseTransform::PiecewiseLinear { knots, .. } => Some(knots.clone()),
        ElementwiseTransform::Linear { .. } => None,
    };
    let header = CkptHeader {
        version: CKPT_VERSION,
        config: state.config.clone(),
        epoch: state.epoch,
        step: state.step,
        rng: state.rng.clone(),
        e_spec: state.e_net.spec.clone(),
        g_spec: state.g_net.spec.clone(),
        d_spec: state.d_net.spec.clone(),
        mask: state.prior.adjacency().mask().clone(),
        f_knots,
        opt: [&state.opt_d, &state.opt_eg, &state.opt_f, &state.opt_a]
            .map(opt_meta)
            .into_iter()
            .collect(),
        tensors: tensors
            .iter()
            .map(|(name, data)| TensorMeta { name: name.clone(), len: data.len() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut payload = Vec::with_capacity(tensors.iter().map(|(_, d)| d.len() * 8).sum());
    for (_, data) in &tensors {
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);

    let mut out = Vec::with_capacity(12 + header_bytes.len() + payload.len() + 4);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

fn take(data: &mut Vec<Vec<f64>>) -> Result<Vec<f64>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::CkptTruncated("fewer tensors than the state needs".into()));
    }
    Ok(data.remove(0))
}

fn rebuild_net(spec: NetSpec, tensors: &mut Vec<Vec<f64>>) -> Result<Net, TrainError> {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..spec.n_layers() {
        let (fan_in, fan_out) = (spec.layer_sizes[l], spec.layer_sizes[l + 1]);
        let w = take(tensors)?;
        let b = take(tensors)?;
        if b.len() != fan_out {
            return Err(TrainError::CkptTruncated("bias length mismatch".into()));
        }
        weights.push(
            Array2::from_shape_vec((fan_out, fan_in), w)
                .map_err(|e| TrainError::CkptTruncated(e.to_string()))?,
        );
        biases.push(ndarray::Array1::from_vec(b));
    }
    Ok(Net { spec, weights, biases })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 {
        return Err(TrainError::CkptTruncated("shorter than the fixed prelude".into()));
    }
    if &bytes[..4] != CKPT_MAGIC {
        return Err(TrainError::CkptMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(TrainError::CkptVersion { got: version, want: CKPT_VERSION });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let header_end = 12usize
        .checked_add(hlen)
        .filter(|&e| e + 4 <= bytes.len())
        .ok_or_else(|| TrainError::CkptTruncated("header length exceeds file".into()))?;
    let header: CkptHeader = serde_json::from_slice(&bytes[12..header_end])?;
    let payload_len: usize = header.tensors.iter().map(|t| t.len * 8).sum();
    if header_end + payload_len + 4 != bytes.len() {
        return Err(TrainError::CkptTruncated(format!(
            "file holds {} payload bytes, header promises {payload_len}",
            bytes.len() - header_end - 4
        )));
    }
    let payload = &bytes[header_end..header_end + payload_len];
    let crc_stored =
        u32::from_le_bytes(bytes[header_end + payload_len..].try_into().expect("4 bytes"));
    if crc32fast::hash(payload) != crc_stored {
        return Err(TrainError::CkptChecksum);
    }

    let mut cursor = payload;
    let mut data: Vec<Vec<f64>> = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let (raw, rest) = cursor.split_at(meta.len * 8);
        data.push(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect());
        cursor = rest;
    }

    let e_net = rebuild_net(header.e_spec, &mut data)?;
    let g_net = rebuild_net(header.g_spec, &mut data)?;
    let d_net = rebuild_net(header.d_spec, &mut data)?;

    let f_flat = take(&mut data)?;
    let m = header.config.m;
    let f = match (&header.f_knots, header.config.f_mode) {
        (Some(knots), _) => {
            let stride = knots
                .first()
                .map(|k| k.len() + 2)
                .ok_or_else(|| TrainError::CkptTruncated("empty knot list".into()))?;
            if f_flat.len() != stride * m {
                return Err(TrainError::CkptTruncated("prior.f length mismatch".into()));
            }
            let mut w = Vec::with_capacity(m);
            let mut b = Vec::with_capacity(m);
            for i in 0..m {
                let seg = &f_flat[i * stride..(i + 1) * stride];
                w.push(seg[..stride - 1].to_vec());
                b.push(seg[stride - 1]);
            }
            ElementwiseTransform::pwl_unchecked(knots.clone(), w, b)?
        }
        (None, _) => {
            if f_flat.len() != 2 * m {
                return Err(TrainError::CkptTruncated("prior.f length mismatch".into()));
            }
            let w: Vec<f64> = (0..m).map(|i| f_flat[2 * i]).collect();
            let b: Vec<f64> = (0..m).map(|i| f_flat[2 * i + 1]).collect();
            ElementwiseTransform::linear(w, b)?
        }
    };
    let a_flat = take(&mut data)?;
    let a = Array2::from_shape_vec((m, m), a_flat)
        .map_err(|e| TrainError::CkptTruncated(e.to_string()))?;
    let adjacency = apply_mask(a, header.mask)?;
    let prior = ScmPrior::new(header.config.k, m, adjacency, f)?;

    let mut opts = Vec::with_capacity(4);
    for meta in &header.opt {
        let m_buf = take(&mut data)?;
        let v_buf = take(&mut data)?;
        if m_buf.len() != v_buf.len() {
            return Err(TrainError::CkptTruncated("optimizer moment length mismatch".into()));
        }
        opts.push(AdamState {
            lr: meta.lr,
            beta1: meta.beta1,
            beta2: meta.beta2,
            eps: meta.eps,
            t: meta.t,
            m: m_buf,
            v: v_buf,
        });
    }
    let [opt_d, opt_eg, opt_f, opt_a]: [AdamState; 4] = opts
        .try_into()
        .map_err(|_| TrainError::CkptTruncated("expected four optimizer states".into()))?;

    Ok(TrainState {
        config: header.config,
        e_net,
        g_net,
        d_net,
        prior,
        opt_d,
        opt_eg,
        opt_f,
        opt_a,
        epoch: header.epoch,
        step: header.step,
        rng: header.rng,
    })
}
