//! Training objectives: the supervised regularizer, the discriminator's
//! logistic loss, and the explicit gradient estimators for the generator,
//! encoder and prior.
//!
//! The adversarial loss gradients are not obtained by differentiating a
//! scalar; each parameter group has its own estimator built from the
//! discriminator's input gradients:
//!
//! ```text
//! ∇_θ = −E[ s(x,z) · (∇_x D)ᵀ ∇_θ G(z) ]           z ~ prior
//! ∇_φ = +E[ (∇_z D)ᵀ ∇_φ E(x) ] + λ ∇_φ L_sup      x ~ data
//! ∇_β = −E[ s(x,z) · ((∇_x D)ᵀ ∇_β G(F(ε)) + (∇_z D)ᵀ ∇_β F(ε)) ]
//! ```
//!
//! with s(x,z) = exp(D(x,z)) clamped at |D| ≤ clamp_c.

use crate::nn::{Net, NnError, ParamGrads};
use crate::prior::{PriorError, ScmPrior};
use ndarray::{concatenate, Array1, Array2, Axis};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("label {0} outside [0,1]")]
    LabelDomain(f64),
    #[error("score list must be nonempty")]
    EmptyScores,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Prior(#[from] PriorError),
}

/// Form of the supervised regularizer tying labeled factors to the first m
/// encoder outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum SupLossKind {
    #[serde(rename = "ce")]
    CrossEntropy,
    #[serde(rename = "l2")]
    SquaredError,
}

fn softplus(t: f64) -> f64 {
    if t > 0.0 {
        t + (-t).exp().ln_1p()
    } else {
        t.exp().ln_1p()
    }
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Bernoulli negative log-likelihood of a soft label under a logit, with its
/// logit gradient: loss = −[y log σ(l) + (1−y) log(1−σ(l))], dl = σ(l) − y.
pub fn sup_loss_ce(logit: f64, y: f64) -> Result<(f64, f64), ObjectiveError> {
    if !(0.0..=1.0).contains(&y) {
        return Err(ObjectiveError::LabelDomain(y));
    }
    Ok((softplus(logit) - y * logit, sigmoid(logit) - y))
}

/// Squared error with its gradient: loss = (e−y)², de = 2(e−y).
pub fn sup_loss_l2(e: f64, y: f64) -> (f64, f64) {
    ((e - y) * (e - y), 2.0 * (e - y))
}

fn sup_loss(kind: SupLossKind, e: f64, y: f64) -> Result<(f64, f64), ObjectiveError> {
    match kind {
        SupLossKind::CrossEntropy => sup_loss_ce(e, y),
        SupLossKind::SquaredError => Ok(sup_loss_l2(e, y)),
    }
}

/// Empirical logistic-regression loss for the discriminator:
/// mean softplus(−D) over encoder pairs plus mean softplus(D) over generator
/// pairs, with per-score gradients.
pub fn disc_loss(
    real_scores: &[f64],
    fake_scores: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>), ObjectiveError> {
    if real_scores.is_empty() || fake_scores.is_empty() {
        return Err(ObjectiveError::EmptyScores);
    }
    let nr = real_scores.len() as f64;
    let nf = fake_scores.len() as f64;
    let mut loss = 0.0;
    let dreal: Vec<f64> = real_scores
        .iter()
        .map(|&d| {
            loss += softplus(-d) / nr;
            -sigmoid(-d) / nr
        })
        .collect();
    let dfake: Vec<f64> = fake_scores
        .iter()
        .map(|&d| {
            loss += softplus(d) / nf;
            sigmoid(d) / nf
        })
        .collect();
    Ok((loss, dreal, dfake))
}

/// s(x,z) = exp(D) with the score clamped to [−clamp_c, clamp_c].
pub fn scale_factor(d_score: f64, clamp_c: f64) -> f64 {
    d_score.clamp(-clamp_c, clamp_c).exp()
}

/// Gradients for one joint update, already averaged over the batch.
#[derive(Debug, Clone)]
pub struct GradBundle {
    pub theta: ParamGrads,
    pub phi: ParamGrads,
    /// Prior transform parameters, flat layout of `ElementwiseTransform::params_flat`.
    pub f_params: Vec<f64>,
    /// Adjacency gradient, zero on masked-out entries.
    pub a: Array2<f64>,
}

/// Per-batch scalars the trainer logs.
#[derive(Debug, Clone, PartialEq)]
pub struct GradDiagnostics {
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
    /// Supervised loss averaged over the labeled subset; absent when the
    /// batch carries no labels.
    pub sup_loss: Option<f64>,
    pub scale_mean: f64,
}

/// One mini-batch for the estimators. Labeled samples, if any, are the first
/// `labels.nrows()` rows of `x_batch`, one label per causal dimension.
pub struct EstimatorBatch<'a> {
    pub x_batch: &'a Array2<f64>,
    pub eps_batch: &'a Array2<f64>,
    pub labels: Option<&'a Array2<f64>>,
}

/// Evaluate all three gradient estimators on one batch.
///
/// The discriminator's gradient w.r.t. its own input, taken with upstream 1,
/// supplies ∇_x D and ∇_z D; per-sample scaling folds into the upstream rows
/// of the generator/encoder backward passes, so parameter gradients come out
/// of single batched GEMMs.
pub fn estimate_grads(
    batch: &EstimatorBatch,
    e_net: &Net,
    g_net: &Net,
    d_net: &Net,
    prior: &ScmPrior,
    lambda: f64,
    sup_kind: SupLossKind,
    clamp_c: f64,
) -> Result<(GradBundle, GradDiagnostics), ObjectiveError> {
    let x = batch.x_batch;
    let eps = batch.eps_batch;
    let n = x.nrows();
    let n_p = eps.nrows();
    if n == 0 || n_p == 0 {
        return Err(ObjectiveError::Shape("empty batch".into()));
    }
    let img = e_net.spec.input_size();
    let k = prior.k();
    if x.ncols() != img {
        return Err(ObjectiveError::Shape(format!("x has width {}, want {img}", x.ncols())));
    }
    if eps.ncols() != k {
        return Err(ObjectiveError::Shape(format!("eps has width {}, want {k}", eps.ncols())));
    }
    if d_net.spec.input_size() != img + k {
        return Err(ObjectiveError::Shape(format!(
            "discriminator takes {}, want {}",
            d_net.spec.input_size(),
            img + k
        )));
    }

    // Encoder pairs (x, E(x)).
    let (z_enc, tape_e) = e_net.forward_batch(x)?;
    let joint_real = concatenate(Axis(1), &[x.view(), z_enc.view()])
        .map_err(|e| ObjectiveError::Shape(e.to_string()))?;
    let (d_real, tape_dr) = d_net.forward_batch(&joint_real)?;

    // Generator pairs (G(F(ε)), F(ε)), keeping the pre-transform solves.
    let mut z_fake = Array2::zeros((n_p, k));
    let mut u_rows = Array2::zeros((n_p, prior.m()));
    for (i, row) in eps.outer_iter().enumerate() {
        let (z, u) = prior.sample_with_u(row.as_slice().expect("row-major batch"))?;
        z_fake.row_mut(i).assign(&Array1::from_vec(z));
        u_rows.row_mut(i).assign(&Array1::from_vec(u));
    }
    let (x_fake, tape_g) = g_net.forward_batch(&z_fake)?;
    let joint_fake = concatenate(Axis(1), &[x_fake.view(), z_fake.view()])
        .map_err(|e| ObjectiveError::Shape(e.to_string()))?;
    let (d_fake, tape_df) = d_net.forward_batch(&joint_fake)?;

    // Input gradients of D with upstream 1.
    let ones_r = Array2::ones((n, 1));
    let gin_real = d_net.backward_batch_input_only(&tape_dr, &ones_r)?;
    let gz_real = gin_real.slice(ndarray::s![.., img..]);
    let ones_f = Array2::ones((n_p, 1));
    let gin_fake = d_net.backward_batch_input_only(&tape_df, &ones_f)?;
    let gx_fake = gin_fake.slice(ndarray::s![.., ..img]);
    let gz_fake = gin_fake.slice(ndarray::s![.., img..]);

    let s: Vec<f64> = d_fake.column(0).iter().map(|&d| scale_factor(d, clamp_c)).collect();

    // θ: generator backward with rows −(s_i/n_p)·∇_x D_i. The resulting input
    // gradients are exactly the first β term, already scaled.
    let mut up_g = gx_fake.to_owned();
    for (i, mut row) in up_g.outer_iter_mut().enumerate() {
        row *= -s[i] / n_p as f64;
    }
    let (theta, g_input_grads) = g_net.backward_batch(&tape_g, &up_g)?;

    // φ: encoder backward with rows (1/n)·∇_z D_i plus the supervised term on
    // the first m outputs of the labeled rows.
    let mut up_e = gz_real.to_owned();
    up_e *= 1.0 / n as f64;
    let mut sup_total = None;
    if let Some(labels) = batch.labels {
        let n_s = labels.nrows();
        if n_s > 0 {
            if labels.ncols() != prior.m() || n_s > n {
                return Err(ObjectiveError::Shape(format!(
                    "labels are {}x{}, want at most {n} rows of width {}",
                    n_s,
                    labels.ncols(),
                    prior.m()
                )));
            }
            let mut total = 0.0;
            for j in 0..n_s {
                for i in 0..prior.m() {
                    let (loss, de) = sup_loss(sup_kind, z_enc[(j, i)], labels[(j, i)])?;
                    total += loss;
                    up_e[(j, i)] += lambda * de / n_s as f64;
                }
            }
            sup_total = Some(total / n_s as f64);
        }
    }
    let (phi, _) = e_net.backward_batch(&tape_e, &up_e)?;

    // β: both terms contract with ∇_β F; combine the per-row upstreams on z.
    let mut f_params = vec![0.0; prior.f().n_params()];
    let mut a = Array2::zeros((prior.m(), prior.m()));
    let mut up_z = gz_fake.to_owned();
    for (i, mut row) in up_z.outer_iter_mut().enumerate() {
        row *= -s[i] / n_p as f64;
        row += &g_input_grads.row(i);
    }
    for i in 0..n_p {
        prior.accumulate_beta_grads(
            u_rows.row(i).as_slice().expect("row-major"),
            up_z.row(i).as_slice().expect("row-major"),
            &mut f_params,
            &mut a,
        );
    }

    let diag = GradDiagnostics {
        d_real_mean: d_real.column(0).mean().unwrap_or(0.0),
        d_fake_mean: d_fake.column(0).mean().unwrap_or(0.0),
        sup_loss: sup_total,
        scale_mean: s.iter().sum::<f64>() / n_p as f64,
    };
    Ok((GradBundle { theta, phi, f_params, a }, diag))
}
