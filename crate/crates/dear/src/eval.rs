//! Evaluation: rank-correlation disentanglement scores, downstream
//! classifiers with sample-efficiency and worst-group metrics, and latent
//! traversal/intervention image grids.
//!
//! A representation counts as disentangled when each coordinate is a 1-1
//! function of its factor; for scalar factors a monotone 1-1 map gives
//! |Spearman| = 1, so the absolute Spearman rank correlation per coordinate
//! operationalizes that definition without binding to any parameterization.

use crate::nn::{Activation, AdamState, Net, NetSpec, NnError, Role};
use crate::objectives::sup_loss_ce;
use crate::prior::{traverse, PriorError, ScmPrior};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("length mismatch: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("need at least 3 points, got {0}")]
    TooShort(usize),
    #[error("rank correlation undefined on constant input")]
    ConstantInput,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("accuracy ratio undefined: denominator {0}")]
    ZeroDenominator(f64),
    #[error("empty group cell (tau={tau}, spurious={spurious})")]
    EmptyCell { tau: u8, spurious: u8 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Ranks with ties replaced by the average rank of the tied run (1-based).
fn ranks(xs: &[f64]) -> Result<Vec<f64>, EvalError> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(EvalError::NonFinite);
    }
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            out[p] = avg;
        }
        i = j + 1;
    }
    Ok(out)
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(EvalError::ConstantInput);
    }
    Ok(cov / (va * vb).sqrt())
}

/// Spearman rank correlation: Pearson correlation of the rank vectors,
/// averaging ranks on ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch { a: a.len(), b: b.len() });
    }
    if a.len() < 3 {
        return Err(EvalError::TooShort(a.len()));
    }
    pearson(&ranks(a)?, &ranks(b)?)
}

/// Per-factor |Spearman| between encoder coordinate i and ground-truth factor
/// i. Supervision fixes the alignment, so no permutation search happens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentReport {
    pub per_factor: Vec<f64>,
    pub mean_abs: f64,
}

pub fn disent_report(
    encodings: &Array2<f64>,
    factors: &Array2<f64>,
) -> Result<DisentReport, EvalError> {
    let m = factors.ncols();
    if encodings.nrows() != factors.nrows() {
        return Err(EvalError::LengthMismatch { a: encodings.nrows(), b: factors.nrows() });
    }
    if encodings.ncols() < m {
        return Err(EvalError::Shape(format!(
            "encodings have {} coordinates for {m} factors",
            encodings.ncols()
        )));
    }
    let mut per_factor = Vec::with_capacity(m);
    for i in 0..m {
        let e: Vec<f64> = encodings.column(i).to_vec();
        let f: Vec<f64> = factors.column(i).to_vec();
        per_factor.push(spearman(&e, &f)?.abs());
    }
    let mean_abs = per_factor.iter().sum::<f64>() / m as f64;
    Ok(DisentReport { per_factor, mean_abs })
}

/// Mean absolute error per factor between aligned coordinates.
pub fn mae_per_dim(
    encodings: &Array2<f64>,
    factors: &Array2<f64>,
) -> Result<Vec<f64>, EvalError> {
    let m = factors.ncols();
    if encodings.nrows() != factors.nrows() || encodings.nrows() == 0 {
        return Err(EvalError::LengthMismatch { a: encodings.nrows(), b: factors.nrows() });
    }
    if encodings.ncols() < m {
        return Err(EvalError::Shape(format!(
            "encodings have {} coordinates for {m} factors",
            encodings.ncols()
        )));
    }
    Ok((0..m)
        .map(|i| {
            (&encodings.column(i) - &factors.column(i)).mapv(f64::abs).mean().unwrap_or(0.0)
        })
        .collect())
}

/// Run the encoder over a dataset in fixed-size chunks, dropping the tapes.
pub fn encode_dataset(encoder: &Net, images: &Array2<f64>) -> Result<Array2<f64>, EvalError> {
    let n = images.nrows();
    let k = encoder.spec.output_size();
    let mut out = Array2::zeros((n, k));
    let chunk = 1024;
    let mut row = 0;
    while row < n {
        let end = (row + chunk).min(n);
        let (z, _) = encoder.forward_batch(&images.slice(ndarray::s![row..end, ..]).to_owned())?;
        out.slice_mut(ndarray::s![row..end, ..]).assign(&z);
        row = end;
    }
    Ok(out)
}

/// Statistical efficiency: 100 · accuracy(small subset) / accuracy(full set),
/// both in percent.
pub fn efficiency_score(acc_small: f64, acc_large: f64) -> Result<f64, EvalError> {
    if acc_large <= 0.0 {
        return Err(EvalError::ZeroDenominator(acc_large));
    }
    Ok(100.0 * acc_small / acc_large)
}

/// Accuracy per (target, spurious-attribute) cell, with the minimum as the
/// worst case and the pooled accuracy as the average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    /// Indexed `cells[tau][spurious]`.
    pub cells: [[f64; 2]; 2],
    pub counts: [[usize; 2]; 2],
    pub worst: f64,
    pub average: f64,
}

pub fn group_worst_acc(
    predictions: &[u8],
    tau: &[u8],
    spurious: &[u8],
) -> Result<GroupAccuracy, EvalError> {
    if predictions.len() != tau.len() {
        return Err(EvalError::LengthMismatch { a: predictions.len(), b: tau.len() });
    }
    if predictions.len() != spurious.len() {
        return Err(EvalError::LengthMismatch { a: predictions.len(), b: spurious.len() });
    }
    let mut correct = [[0usize; 2]; 2];
    let mut counts = [[0usize; 2]; 2];
    for ((&p, &t), &s) in predictions.iter().zip(tau).zip(spurious) {
        let (ti, si) = (usize::from(t != 0), usize::from(s != 0));
        counts[ti][si] += 1;
        correct[ti][si] += usize::from(p == t);
    }
    let mut cells = [[0.0; 2]; 2];
    for t in 0..2 {
        for s in 0..2 {
            if counts[t][s] == 0 {
                return Err(EvalError::EmptyCell { tau: t as u8, spurious: s as u8 });
            }
            cells[t][s] = correct[t][s] as f64 / counts[t][s] as f64;
        }
    }
    let worst = cells.iter().flatten().fold(f64::INFINITY, |a, &b| a.min(b));
    let total: usize = counts.iter().flatten().sum();
    let hits: usize = correct.iter().flatten().sum();
    Ok(GroupAccuracy { cells, counts, worst, average: hits as f64 / total as f64 })
}

/// Downstream probe: a two-layer MLP with 100 hidden units trained on binary
/// cross-entropy at learning rate 1e-2, batch 128.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownstreamConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self { hidden: 100, lr: 1e-2, batch_size: 128, epochs: 100, seed: 0 }
    }
}

/// Train the probe on (representation, binary label) pairs. When the set is
/// smaller than one batch every step is full-batch. Deterministic per seed.
pub fn train_downstream(
    reps: &Array2<f64>,
    labels: &[u8],
    cfg: &DownstreamConfig,
) -> Result<Net, EvalError> {
    let n = reps.nrows();
    if n != labels.len() {
        return Err(EvalError::LengthMismatch { a: n, b: labels.len() });
    }
    if n == 0 {
        return Err(EvalError::TooShort(0));
    }
    let spec = NetSpec {
        layer_sizes: vec![reps.ncols(), cfg.hidden, 1],
        activations: vec![Activation::LeakyRelu, Activation::Identity],
        input_role: Role::Encoder,
    };
    let mut net = Net::init(spec, cfg.seed)?;
    let mut opt = AdamState::new(net.n_params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut x = Array2::zeros((chunk.len(), reps.ncols()));
            let mut y = Array1::zeros(chunk.len());
            for (r, &i) in chunk.iter().enumerate() {
                x.row_mut(r).assign(&reps.row(i));
                y[r] = f64::from(labels[i]);
            }
            let (logits, tape) = net.forward_batch(&x)?;
            let mut upstream = Array2::zeros((chunk.len(), 1));
            for r in 0..chunk.len() {
                let (_, dl) = sup_loss_ce(logits[(r, 0)], y[r])
                    .expect("binary tag is a valid label");
                upstream[(r, 0)] = dl / chunk.len() as f64;
            }
            let (grads, _) = net.backward_batch(&tape, &upstream)?;
            net.adam_update(&grads, &mut opt);
        }
    }
    Ok(net)
}

/// Hard predictions of the probe: positive logit means class 1.
pub fn predict(net: &Net, reps: &Array2<f64>) -> Result<Vec<u8>, EvalError> {
    let (logits, _) = net.forward_batch(reps)?;
    Ok(logits.column(0).iter().map(|&l| u8::from(l > 0.0)).collect())
}

pub fn accuracy(net: &Net, reps: &Array2<f64>, labels: &[u8]) -> Result<f64, EvalError> {
    if reps.nrows() != labels.len() || labels.is_empty() {
        return Err(EvalError::LengthMismatch { a: reps.nrows(), b: labels.len() });
    }
    let preds = predict(net, reps)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// How a latent coordinate is swept in an image grid: overwrite it and leave
/// the rest alone, or propagate the assignment through the structural model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridMode {
    Traverse,
    Intervene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub dim: usize,
    pub files: Vec<String>,
    /// Full latent vector behind each tile, for exact post-hoc checks.
    pub latents: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridIndex {
    pub mode: GridMode,
    pub grid: Vec<f64>,
    pub base_latent: Vec<f64>,
    pub image_side: usize,
    pub rows: Vec<GridRow>,
}

/// Binary 8-bit PGM (P5).
pub fn write_pgm(path: &Path, side: usize, pixels: &[f64]) -> Result<(), EvalError> {
    if pixels.len() != side * side {
        return Err(EvalError::Shape(format!(
            "{} pixels for a {side}x{side} tile",
            pixels.len()
        )));
    }
    let mut buf = Vec::with_capacity(side * side + 20);
    write!(&mut buf, "P5\n{side} {side}\n255\n")?;
    buf.extend(pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, buf)?;
    Ok(())
}

/// Render one grid per latent dimension: each row sweeps `grid` over that
/// dimension starting from `z0`, decodes with the generator, and saves PGM
/// tiles plus a json index with the exact latents.
pub fn dump_grids(
    g_net: &Net,
    prior: &ScmPrior,
    z0: &[f64],
    dims: &[usize],
    grid: &[f64],
    mode: GridMode,
    out_dir: &Path,
) -> Result<GridIndex, EvalError> {
    let side = (g_net.spec.output_size() as f64).sqrt() as usize;
    if side * side != g_net.spec.output_size() {
        return Err(EvalError::Shape(format!(
            "generator output {} is not a square image",
            g_net.spec.output_size()
        )));
    }
    fs::create_dir_all(out_dir)?;
    let mut rows = Vec::with_capacity(dims.len());
    for &dim in dims {
        let latents: Vec<Vec<f64>> = match mode {
            GridMode::Traverse => traverse(z0, dim, grid)?,
            GridMode::Intervene => grid
                .iter()
                .map(|&v| prior.intervene(z0, &[(dim, v)]))
                .collect::<Result<_, _>>()?,
        };
        let mut files = Vec::with_capacity(grid.len());
        for (col, z) in latents.iter().enumerate() {
            let (x, _) = g_net.forward(&Array1::from_vec(z.clone()))?;
            let name = format!("dim{dim}_col{col:02}.pgm");
            write_pgm(&out_dir.join(&name), side, x.as_slice().expect("contiguous"))?;
            files.push(name);
        }
        rows.push(GridRow { dim, files, latents });
    }
    let index = GridIndex {
        mode,
        grid: grid.to_vec(),
        base_latent: z0.to_vec(),
        image_side: side,
        rows,
    };
    let json = serde_json::to_vec_pretty(&index)?;
    fs::write(out_dir.join("grid.json"), json)?;
    Ok(index)
}
