//! Procedural Pendulum benchmark: four causally linked continuous factors,
//! measurement noise, a configurable corruption rate, deterministic raster
//! rendering, and a spurious-background shift variant.
//!
//! A rod hangs from a fixed pivot at angle θ_p while a distant light at angle
//! θ_l casts its shadow on the ground. The shadow's extent and center are
//! exact trigonometric functions of the two angles, so the factor set obeys
//! the two-cause/two-effect structure in `graph::pendulum_true_graph`.

use crate::graph::pendulum_true_graph;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const IMG_SIDE: usize = 32;
pub const IMG_PIXELS: usize = IMG_SIDE * IMG_SIDE;

/// Declared factor ranges (world units): pendulum angle and light angle in
/// degrees, shadow extent and center in ground coordinates. The shadow
/// extent is signed: the projection of the bob relative to the pivot, which
/// is strictly increasing in θ_p and strictly decreasing in θ_l everywhere in
/// range. (The unsigned width is symmetric under (θ_p, θ_l) ↦ (−θ_p, 180°−θ_l)
/// and therefore carries no monotone relation to either cause.)
pub const THETA_P_RANGE: (f64, f64) = (-40.0, 40.0);
pub const THETA_L_RANGE: (f64, f64) = (60.0, 120.0);
pub const SHADOW_LEN_RANGE: (f64, f64) = (-6.6, 6.6);
pub const SHADOW_POS_RANGE: (f64, f64) = (-6.5, 6.5);

pub const RANGES: [(f64, f64); 4] =
    [THETA_P_RANGE, THETA_L_RANGE, SHADOW_LEN_RANGE, SHADOW_POS_RANGE];

/// Measurement noise on the shadow pair, in normalized units.
pub const NOISE_SIGMA: f64 = 0.05;

pub const BG_DARK: f32 = 0.1;
pub const BG_LIGHT: f32 = 0.9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad meta.json: {0}")]
    Meta(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("{file}: expected {want} values, found {got}")]
    CountMismatch { file: String, want: usize, got: usize },
    #[error("{file}: {msg}")]
    Malformed { file: String, msg: String },
}

pub fn normalize(v: f64, range: (f64, f64)) -> f64 {
    (v - range.0) / (range.1 - range.0)
}

pub fn denormalize(u: f64, range: (f64, f64)) -> f64 {
    range.0 + u * (range.1 - range.0)
}

/// Noiseless shadow geometry. Pivot at (0, 10), rod length 6, bob at
/// (6 sin θ_p, 10 − 6 cos θ_p); a ground point's lit position along light
/// direction θ_l is px − py/tan θ_l. Returns (signed extent s2 − s1,
/// center (s1 + s2)/2) where s1, s2 are the pivot and bob projections.
pub fn shadow_physics(theta_p_deg: f64, theta_l_deg: f64) -> (f64, f64) {
    let tp = theta_p_deg.to_radians();
    let tl = theta_l_deg.to_radians();
    let bob = (6.0 * tp.sin(), 10.0 - 6.0 * tp.cos());
    let project = |p: (f64, f64)| p.0 - p.1 / tl.tan();
    let s1 = project((0.0, 10.0));
    let s2 = project(bob);
    (s2 - s1, 0.5 * (s1 + s2))
}

/// Factor vector stored in normalized coordinates ξ ∈ [0,1]⁴ (order: θ_p,
/// θ_l, shadow extent, shadow center). Normalized form is canonical so the
/// on-disk CSV roundtrips without float drift; world units are derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FactorVector {
    pub xi: [f64; 4],
}

impl FactorVector {
    pub fn from_normalized(xi: [f64; 4]) -> Self {
        Self { xi }
    }

    pub fn from_world(theta_p: f64, theta_l: f64, shadow_len: f64, shadow_pos: f64) -> Self {
        let w = [theta_p, theta_l, shadow_len, shadow_pos];
        let mut xi = [0.0; 4];
        for i in 0..4 {
            xi[i] = normalize(w[i], RANGES[i]);
        }
        Self { xi }
    }

    pub fn world(&self) -> [f64; 4] {
        let mut w = [0.0; 4];
        for i in 0..4 {
            w[i] = denormalize(self.xi[i], RANGES[i]);
        }
        w
    }
}

/// Background tag. Dark is the "positive" attribute value paired with
/// corrupted samples when a spurious correlation is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Spurious {
    Dark,
    Light,
}

impl Spurious {
    pub fn background(self) -> f32 {
        match self {
            Spurious::Dark => BG_DARK,
            Spurious::Light => BG_LIGHT,
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Spurious::Dark => 1,
            Spurious::Light => 0,
        }
    }

    pub fn from_tag(t: u8) -> Self {
        if t == 1 {
            Spurious::Dark
        } else {
            Spurious::Light
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendulumSample {
    /// Row-major 32×32 grayscale, values in [0,1].
    pub image: Vec<f32>,
    pub factors: FactorVector,
    /// True iff the shadow pair was replaced by range-uniform noise.
    pub tau: bool,
    pub spurious: Spurious,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub corruption_rate: f64,
    /// Train-split background/τ match probability once `inject_spurious` has
    /// run; absent for the base dataset.
    pub spurious_train_correlation: Option<f64>,
    pub image_side: usize,
    /// Per-factor normalization ranges, [lo, hi] each.
    pub ranges: [[f64; 2]; 4],
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Split {
    pub samples: Vec<PendulumSample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Pixel matrix (n, 1024), widened to f64 for the nets.
    pub fn images_f64(&self) -> ndarray::Array2<f64> {
        let mut out = ndarray::Array2::zeros((self.samples.len(), IMG_PIXELS));
        for (i, s) in self.samples.iter().enumerate() {
            for (j, &p) in s.image.iter().enumerate() {
                out[(i, j)] = p as f64;
            }
        }
        out
    }

    /// Normalized factor matrix (n, 4).
    pub fn factors_matrix(&self) -> ndarray::Array2<f64> {
        let mut out = ndarray::Array2::zeros((self.samples.len(), 4));
        for (i, s) in self.samples.iter().enumerate() {
            for j in 0..4 {
                out[(i, j)] = s.factors.xi[j];
            }
        }
        out
    }

    pub fn tau_tags(&self) -> Vec<u8> {
        self.samples.iter().map(|s| u8::from(s.tau)).collect()
    }

    pub fn spurious_tags(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.spurious.tag()).collect()
    }

    /// Subset with the corruption flag clear.
    pub fn uncorrupted(&self) -> Split {
        Split { samples: self.samples.iter().filter(|s| !s.tau).cloned().collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub meta: DatasetMeta,
}

/// Draw one factor vector: angles uniform over their ranges; the shadow pair
/// follows the physics plus Gaussian measurement noise, except that with
/// probability `corruption_rate` it is redrawn uniform over its normalized
/// range (τ = 1). Normalized coordinates are clamped to [0,1].
pub fn sample_factors(rng: &mut ChaCha8Rng, corruption_rate: f64) -> (FactorVector, bool) {
    let tp_n: f64 = rng.gen_range(0.0..1.0);
    let tl_n: f64 = rng.gen_range(0.0..1.0);
    let (len, pos) =
        shadow_physics(denormalize(tp_n, THETA_P_RANGE), denormalize(tl_n, THETA_L_RANGE));
    let corrupted = rng.gen_bool(corruption_rate);
    let (len_n, pos_n) = if corrupted {
        (rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0))
    } else {
        let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");
        (
            (normalize(len, SHADOW_LEN_RANGE) + noise.sample(rng)).clamp(0.0, 1.0),
            (normalize(pos, SHADOW_POS_RANGE) + noise.sample(rng)).clamp(0.0, 1.0),
        )
    };
    (FactorVector::from_normalized([tp_n, tl_n, len_n, pos_n]), corrupted)
}

fn x_to_col(x: f64) -> i64 {
    (((x + 12.0) / 24.0) * IMG_SIDE as f64).floor() as i64
}

fn y_to_row(y: f64) -> i64 {
    (((17.0 - y) / 18.0) * IMG_SIDE as f64).floor() as i64
}

fn put(img: &mut [f32], row: i64, col: i64, v: f32) {
    if (0..IMG_SIDE as i64).contains(&row) && (0..IMG_SIDE as i64).contains(&col) {
        img[row as usize * IMG_SIDE + col as usize] = v;
    }
}

/// Deterministic raster: world window [−12,12]×[−1,17] onto 32×32 pixels.
/// Background fill, then the shadow as a 3-row bar at intensity 0.5 on the
/// bottom rows, the rod as a 1-px line at 1.0, and the light as a 2-px-radius
/// disc at 1.0 on the arc of radius 14 about the origin.
pub fn render(factors: &FactorVector, background: f32) -> Vec<f32> {
    let [theta_p, theta_l, len, pos] = factors.world();
    let len = len.clamp(SHADOW_LEN_RANGE.0, SHADOW_LEN_RANGE.1);
    let pos = pos.clamp(SHADOW_POS_RANGE.0, SHADOW_POS_RANGE.1);
    let mut img = vec![background; IMG_PIXELS];

    let (mut lo, mut hi) = (pos - len / 2.0, pos + len / 2.0);
    if lo > hi {
        std::mem::swap(&mut lo, &mut hi);
    }
    let (c0, c1) = (x_to_col(lo).max(0), x_to_col(hi).min(IMG_SIDE as i64 - 1));
    for row in (IMG_SIDE as i64 - 3)..IMG_SIDE as i64 {
        for col in c0..=c1 {
            put(&mut img, row, col, 0.5);
        }
    }

    let tp = theta_p.to_radians();
    let (bx, by) = (6.0 * tp.sin(), 10.0 - 6.0 * tp.cos());
    let steps = 2 * IMG_SIDE;
    for t in 0..=steps {
        let f = t as f64 / steps as f64;
        let x = f * bx;
        let y = 10.0 + f * (by - 10.0);
        put(&mut img, y_to_row(y), x_to_col(x), 1.0);
    }

    let tl = theta_l.to_radians();
    let (lc, lr) = (x_to_col(14.0 * tl.cos()), y_to_row(14.0 * tl.sin()));
    for dr in -2i64..=2 {
        for dc in -2i64..=2 {
            if dr * dr + dc * dc <= 4 {
                put(&mut img, lr + dr, lc + dc, 1.0);
            }
        }
    }
    img
}

fn gen_split(n: usize, seed: u64, stream: u64, corruption_rate: f64) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let samples = (0..n)
        .map(|_| {
            let (factors, tau) = sample_factors(&mut rng, corruption_rate);
            let spurious = Spurious::Dark;
            PendulumSample { image: render(&factors, spurious.background()), factors, tau, spurious }
        })
        .collect();
    Split { samples }
}

/// Generate the three splits from independent RNG streams of one seed. The
/// base dataset renders every sample on the dark background.
pub fn make_dataset(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    corruption_rate: f64,
) -> Dataset {
    let meta = DatasetMeta {
        n_train,
        n_val,
        n_test,
        seed,
        corruption_rate,
        spurious_train_correlation: None,
        image_side: IMG_SIDE,
        ranges: RANGES.map(|(lo, hi)| [lo, hi]),
    };
    Dataset {
        train: gen_split(n_train, seed, 0, corruption_rate),
        val: gen_split(n_val, seed, 1, corruption_rate),
        test: gen_split(n_test, seed, 2, corruption_rate),
        meta,
    }
}

/// `make_dataset` with the background shift baked in: train backgrounds match
/// τ (dark ↔ τ=1) with probability `correlation`, val and test backgrounds
/// are independent fair coins. Streams 3..=5 of the same seed drive the
/// assignments, so the artifact stays a pure function of (counts, seed,
/// rates). Representation learners trained on such a dataset face the shift
/// themselves instead of meeting re-rendered backgrounds cold at probe time.
pub fn make_spurious_dataset(
    n_train: usize,
    n_val: usize,
    n_test: usize,
    seed: u64,
    corruption_rate: f64,
    correlation: f64,
) -> Dataset {
    let mut ds = make_dataset(n_train, n_val, n_test, seed, corruption_rate);
    for (split, stream, mode) in [
        (&mut ds.train, 3, SpuriousMode::Train),
        (&mut ds.val, 4, SpuriousMode::Test),
        (&mut ds.test, 5, SpuriousMode::Test),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        inject_spurious(split, correlation, mode, &mut rng);
    }
    ds.meta.spurious_train_correlation = Some(correlation);
    ds
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpuriousMode {
    /// Background matches τ (dark ↔ τ=1) with the given probability.
    Train,
    /// Background is an independent fair coin.
    Test,
}

/// Assign backgrounds and re-render the split in place.
pub fn inject_spurious(
    split: &mut Split,
    correlation: f64,
    mode: SpuriousMode,
    rng: &mut ChaCha8Rng,
) {
    for s in &mut split.samples {
        let dark = match mode {
            SpuriousMode::Train => rng.gen_bool(correlation) == s.tau,
            SpuriousMode::Test => rng.gen_bool(0.5),
        };
        s.spurious = if dark { Spurious::Dark } else { Spurious::Light };
        s.image = render(&s.factors, s.spurious.background());
    }
}

const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Directory layout: `meta.json` at the root; per split a subdirectory with
/// `images.f32` (raw little-endian f32, sample-major), `factors.csv`
/// (normalized, header `theta_p,theta_l,shadow_len,shadow_pos`) and
/// `labels.csv` (header `y1,y2,y3,y4,tau,spurious`).
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&ds.meta)?)?;
    for (name, split) in SPLIT_NAMES.iter().zip([&ds.train, &ds.val, &ds.test]) {
        let sub = dir.join(name);
        fs::create_dir_all(&sub)?;
        let mut img = BufWriter::new(fs::File::create(sub.join("images.f32"))?);
        for s in &split.samples {
            for &px in &s.image {
                img.write_all(&px.to_le_bytes())?;
            }
        }
        img.flush()?;
        let mut factors = csv::Writer::from_path(sub.join("factors.csv"))?;
        factors.write_record(["theta_p", "theta_l", "shadow_len", "shadow_pos"])?;
        for s in &split.samples {
            factors.write_record(s.factors.xi.iter().map(|v| v.to_string()))?;
        }
        factors.flush()?;
        let mut labels = csv::Writer::from_path(sub.join("labels.csv"))?;
        labels.write_record(["y1", "y2", "y3", "y4", "tau", "spurious"])?;
        for s in &split.samples {
            let mut rec: Vec<String> = s.factors.xi.iter().map(|v| v.to_string()).collect();
            rec.push(u8::from(s.tau).to_string());
            rec.push(s.spurious.tag().to_string());
            labels.write_record(&rec)?;
        }
        labels.flush()?;
    }
    Ok(())
}

fn parse_field(file: &str, field: &str) -> Result<f64, DataError> {
    field
        .parse::<f64>()
        .map_err(|e| DataError::Malformed { file: file.into(), msg: format!("{field:?}: {e}") })
}

fn load_split(dir: &Path, name: &str, n: usize, side: usize) -> Result<Split, DataError> {
    let sub = dir.join(name);
    let px = side * side;
    let img_path = sub.join("images.f32");
    let mut raw = Vec::new();
    fs::File::open(&img_path)?.read_to_end(&mut raw)?;
    if raw.len() != n * px * 4 {
        return Err(DataError::CountMismatch {
            file: img_path.display().to_string(),
            want: n * px * 4,
            got: raw.len(),
        });
    }
    let factors_path = sub.join("factors.csv");
    let mut rdr = csv::Reader::from_path(&factors_path)?;
    let mut factor_rows = Vec::with_capacity(n);
    for rec in rdr.records() {
        let rec = rec?;
        let fname = factors_path.display().to_string();
        if rec.len() != 4 {
            return Err(DataError::Malformed { file: fname, msg: format!("{} columns", rec.len()) });
        }
        let mut xi = [0.0; 4];
        for i in 0..4 {
            xi[i] = parse_field(&fname, &rec[i])?;
        }
        factor_rows.push(FactorVector::from_normalized(xi));
    }
    if factor_rows.len() != n {
        return Err(DataError::CountMismatch {
            file: factors_path.display().to_string(),
            want: n,
            got: factor_rows.len(),
        });
    }
    let labels_path = sub.join("labels.csv");
    let mut rdr = csv::Reader::from_path(&labels_path)?;
    let mut label_rows = Vec::with_capacity(n);
    for rec in rdr.records() {
        let rec = rec?;
        let fname = labels_path.display().to_string();
        if rec.len() != 6 {
            return Err(DataError::Malformed { file: fname, msg: format!("{} columns", rec.len()) });
        }
        let tau = &rec[4] == "1";
        let spurious = Spurious::from_tag(if &rec[5] == "1" { 1 } else { 0 });
        label_rows.push((tau, spurious));
    }
    if label_rows.len() != n {
        return Err(DataError::CountMismatch {
            file: labels_path.display().to_string(),
            want: n,
            got: label_rows.len(),
        });
    }
    let samples = (0..n)
        .map(|i| {
            let image = raw[i * px * 4..(i + 1) * px * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            PendulumSample {
                image,
                factors: factor_rows[i],
                tau: label_rows[i].0,
                spurious: label_rows[i].1,
            }
        })
        .collect();
    Ok(Split { samples })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
    let counts = [meta.n_train, meta.n_val, meta.n_test];
    let mut splits = Vec::new();
    for (name, n) in SPLIT_NAMES.iter().zip(counts) {
        splits.push(load_split(dir, name, n, meta.image_side)?);
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(Dataset { train, val, test, meta })
}

/// The benchmark's ground-truth mask, re-exported where data consumers look
/// for it.
pub fn true_graph() -> crate::graph::GraphMask {
    pendulum_true_graph()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use tempfile::tempdir;

    #[test]
    fn physics_vertical_rod_vertical_light() {
        let (len, pos) = shadow_physics(0.0, 90.0);
        assert!(len.abs() < 1e-12);
        assert!(pos.abs() < 1e-12);
    }

    #[test]
    fn physics_diagonal_light_hand_values() {
        let (len, pos) = shadow_physics(0.0, 45.0);
        assert_abs_diff_eq!(len, 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(pos, -7.0, epsilon = 1e-12);
    }

    #[test]
    fn physics_partials_have_fixed_signs_over_range_grid() {
        let h = 0.25;
        for ip in 0..=20 {
            for il in 0..=20 {
                let tp = -40.0 + 80.0 * ip as f64 / 20.0;
                let tl = 60.0 + 60.0 * il as f64 / 20.0;
                let (l0, p0) = shadow_physics(tp - h, tl);
                let (l1, p1) = shadow_physics(tp + h, tl);
                assert!(l1 - l0 > 1e-6, "extent not increasing in θ_p at ({tp},{tl})");
                assert!(p1 - p0 > 1e-6, "center not increasing in θ_p at ({tp},{tl})");
                let (l2, p2) = shadow_physics(tp, tl - h);
                let (l3, p3) = shadow_physics(tp, tl + h);
                assert!(l3 - l2 < -1e-6, "extent not decreasing in θ_l at ({tp},{tl})");
                assert!(p3 - p2 > 1e-6, "center not increasing in θ_l at ({tp},{tl})");
            }
        }
    }

    #[test]
    fn physics_stays_inside_declared_ranges() {
        for ip in 0..=40 {
            for il in 0..=40 {
                let tp = -40.0 + 80.0 * ip as f64 / 40.0;
                let tl = 60.0 + 60.0 * il as f64 / 40.0;
                let (len, pos) = shadow_physics(tp, tl);
                assert!(len > SHADOW_LEN_RANGE.0 && len < SHADOW_LEN_RANGE.1);
                assert!(pos > SHADOW_POS_RANGE.0 && pos < SHADOW_POS_RANGE.1);
            }
        }
    }

    #[test]
    fn factors_normalized_roundtrip() {
        let f = FactorVector::from_world(12.5, 75.0, -3.3, 4.8);
        let w = f.world();
        assert_abs_diff_eq!(w[0], 12.5, epsilon = 1e-12);
        assert_abs_diff_eq!(w[1], 75.0, epsilon = 1e-12);
        assert_abs_diff_eq!(w[2], -3.3, epsilon = 1e-12);
        assert_abs_diff_eq!(w[3], 4.8, epsilon = 1e-12);
    }

    #[test]
    fn zero_corruption_rate_never_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (f, tau) = sample_factors(&mut rng, 0.0);
            assert!(!tau);
            assert!(f.xi.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn full_corruption_rate_always_flags() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut lens = Vec::new();
        for _ in 0..2000 {
            let (f, tau) = sample_factors(&mut rng, 1.0);
            assert!(tau);
            lens.push(f.xi[2]);
        }
        // Uniform redraw: mean near 0.5, mass in both halves.
        let mean: f64 = lens.iter().sum::<f64>() / lens.len() as f64;
        assert!((mean - 0.5).abs() < 0.03);
        assert!(lens.iter().filter(|&&x| x < 0.25).count() > 300);
        assert!(lens.iter().filter(|&&x| x > 0.75).count() > 300);
    }

    #[test]
    fn corruption_frequency_matches_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let hits = (0..n).filter(|_| sample_factors(&mut rng, 0.2).1).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.2).abs() < 0.01, "corruption frequency {freq}");
    }

    #[test]
    fn render_is_deterministic() {
        let f = FactorVector::from_world(15.0, 100.0, 2.0, 1.0);
        assert_eq!(render(&f, BG_DARK), render(&f, BG_DARK));
    }

    #[test]
    fn render_degenerate_shadow_is_single_column() {
        let (len, pos) = shadow_physics(0.0, 90.0);
        let f = FactorVector::from_world(0.0, 90.0, len, pos);
        let img = render(&f, BG_DARK);
        let shadow_cols: Vec<usize> = (0..IMG_SIDE)
            .filter(|&c| (29..32).any(|r| img[r * IMG_SIDE + c] == 0.5))
            .collect();
        assert!(shadow_cols.len() <= 1, "shadow spans {shadow_cols:?}");
    }

    #[test]
    fn light_angle_change_only_touches_light_and_shadow() {
        let (l0, p0) = shadow_physics(10.0, 70.0);
        let a = FactorVector::from_world(10.0, 70.0, l0, p0);
        let b = FactorVector::from_world(10.0, 110.0, l0, p0);
        let ia = render(&a, BG_DARK);
        let ib = render(&b, BG_DARK);
        for (idx, (pa, pb)) in ia.iter().zip(&ib).enumerate() {
            if pa != pb {
                let row = idx / IMG_SIDE;
                let in_shadow_rows = row >= IMG_SIDE - 3;
                let is_light = *pa == 1.0 || *pb == 1.0;
                assert!(
                    in_shadow_rows || is_light,
                    "pixel ({row},{}) changed outside light/shadow",
                    idx % IMG_SIDE
                );
            }
        }
        // Same light angle, same shadow: identical images.
        assert_eq!(ia, render(&a, BG_DARK));
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let a = make_dataset(50, 20, 30, 9, 0.2);
        assert_eq!(a.train.samples.len(), 50);
        assert_eq!(a.val.samples.len(), 20);
        assert_eq!(a.test.samples.len(), 30);
        let b = make_dataset(50, 20, 30, 9, 0.2);
        assert_eq!(a, b);
        let c = make_dataset(50, 20, 30, 10, 0.2);
        assert_ne!(a, c);
    }

    fn ks_statistic(xs: &mut [f64], ys: &mut [f64]) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (n, m) = (xs.len(), ys.len());
        let (mut i, mut j) = (0usize, 0usize);
        let mut d = 0.0f64;
        while i < n && j < m {
            if xs[i] <= ys[j] {
                i += 1;
            } else {
                j += 1;
            }
            d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
        }
        d
    }

    #[test]
    fn train_and_test_marginals_agree() {
        let ds = make_dataset(6724, 10, 6724, 4, 0.2);
        for dim in 0..4 {
            let mut xs: Vec<f64> = ds.train.samples.iter().map(|s| s.factors.xi[dim]).collect();
            let mut ys: Vec<f64> = ds.test.samples.iter().map(|s| s.factors.xi[dim]).collect();
            let d = ks_statistic(&mut xs, &mut ys);
            assert!(d < 0.05, "factor {dim} KS statistic {d}");
        }
    }

    fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let (mut c, mut vx, mut vy) = (0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(ys) {
            c += (x - mx) * (y - my);
            vx += (x - mx) * (x - mx);
            vy += (y - my) * (y - my);
        }
        c / (vx.sqrt() * vy.sqrt())
    }

    #[test]
    fn corrupted_shadows_independent_of_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tp = Vec::new();
        let mut tl = Vec::new();
        let mut len = Vec::new();
        let mut pos = Vec::new();
        while tp.len() < 10_000 {
            let (f, tau) = sample_factors(&mut rng, 0.5);
            if tau {
                tp.push(f.xi[0]);
                tl.push(f.xi[1]);
                len.push(f.xi[2]);
                pos.push(f.xi[3]);
            }
        }
        for (a, b) in [(&tp, &len), (&tp, &pos), (&tl, &len), (&tl, &pos), (&tp, &tl)] {
            assert!(pearson(a, b).abs() < 0.05);
        }
    }

    #[test]
    fn uncorrupted_shadows_track_angles() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tp = Vec::new();
        let mut len = Vec::new();
        for _ in 0..5000 {
            let (f, tau) = sample_factors(&mut rng, 0.0);
            assert!(!tau);
            tp.push(f.xi[0]);
            len.push(f.xi[2]);
        }
        assert!(pearson(&tp, &len) > 0.5);
    }

    #[test]
    fn spurious_dataset_bakes_shift_into_splits() {
        let ds = make_spurious_dataset(6724, 600, 6724, 3, 0.2, 0.8);
        assert_eq!(ds.meta.spurious_train_correlation, Some(0.8));
        let match_rate = ds
            .train
            .samples
            .iter()
            .filter(|s| (s.spurious == Spurious::Dark) == s.tau)
            .count() as f64
            / ds.train.samples.len() as f64;
        assert!((match_rate - 0.8).abs() < 0.02, "train match rate {match_rate}");
        for split in [&ds.val, &ds.test] {
            let dark =
                split.samples.iter().filter(|s| s.spurious == Spurious::Dark).count() as f64;
            let frac = dark / split.samples.len() as f64;
            assert!((frac - 0.5).abs() < 0.05, "fair-coin split dark fraction {frac}");
        }
        for s in ds.train.samples.iter().chain(&ds.test.samples) {
            assert_eq!(s.image[0], s.spurious.background());
        }
        assert_eq!(
            make_spurious_dataset(6724, 600, 6724, 3, 0.2, 0.8),
            ds,
            "same inputs must reproduce the dataset"
        );
        let factors_match = ds
            .train
            .samples
            .iter()
            .zip(&make_dataset(6724, 600, 6724, 3, 0.2).train.samples)
            .all(|(a, b)| a.factors == b.factors && a.tau == b.tau);
        assert!(factors_match, "shift must not disturb factor draws");
    }

    #[test]
    fn spurious_full_correlation_is_deterministic() {
        let mut ds = make_dataset(300, 1, 1, 7, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        inject_spurious(&mut ds.train, 1.0, SpuriousMode::Train, &mut rng);
        for s in &ds.train.samples {
            assert_eq!(s.spurious == Spurious::Dark, s.tau);
            assert_eq!(s.image[0], s.spurious.background());
        }
    }

    #[test]
    fn spurious_match_rate_tracks_correlation() {
        let mut ds = make_dataset(6724, 1, 1, 8, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        inject_spurious(&mut ds.train, 0.8, SpuriousMode::Train, &mut rng);
        let matches = ds
            .train
            .samples
            .iter()
            .filter(|s| (s.spurious == Spurious::Dark) == s.tau)
            .count();
        let rate = matches as f64 / ds.train.samples.len() as f64;
        assert!((rate - 0.8).abs() < 0.01, "match rate {rate}");
    }

    #[test]
    fn spurious_half_correlation_matches_test_mode() {
        let mut ds = make_dataset(6724, 1, 6724, 13, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        inject_spurious(&mut ds.train, 0.5, SpuriousMode::Train, &mut rng);
        inject_spurious(&mut ds.test, 0.5, SpuriousMode::Test, &mut rng);
        for split in [&ds.train, &ds.test] {
            let dark_given_tau: Vec<f64> = [false, true]
                .iter()
                .map(|&t| {
                    let group: Vec<_> =
                        split.samples.iter().filter(|s| s.tau == t).collect();
                    group.iter().filter(|s| s.spurious == Spurious::Dark).count() as f64
                        / group.len() as f64
                })
                .collect();
            assert!((dark_given_tau[0] - dark_given_tau[1]).abs() < 0.05);
        }
    }

    #[test]
    fn save_load_roundtrip_byte_identical() {
        let mut ds = make_dataset(40, 15, 25, 21, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        inject_spurious(&mut ds.train, 0.8, SpuriousMode::Train, &mut rng);
        ds.meta.spurious_train_correlation = Some(0.8);
        let dir = tempdir().unwrap();
        let d1 = dir.path().join("a");
        let d2 = dir.path().join("b");
        save_dataset(&ds, &d1).unwrap();
        let loaded = load_dataset(&d1).unwrap();
        save_dataset(&loaded, &d2).unwrap();
        for name in ["meta.json"] {
            assert_eq!(fs::read(d1.join(name)).unwrap(), fs::read(d2.join(name)).unwrap());
        }
        for split in SPLIT_NAMES {
            for file in ["images.f32", "factors.csv", "labels.csv"] {
                assert_eq!(
                    fs::read(d1.join(split).join(file)).unwrap(),
                    fs::read(d2.join(split).join(file)).unwrap(),
                    "{split}/{file} differs"
                );
            }
        }
        // Factor values survive the CSV exactly.
        for (a, b) in ds.train.samples.iter().zip(&loaded.train.samples) {
            for i in 0..4 {
                assert_eq!(a.factors.xi[i].to_bits(), b.factors.xi[i].to_bits());
            }
            assert_eq!(a.tau, b.tau);
            assert_eq!(a.spurious, b.spurious);
        }
    }

    #[test]
    fn tampered_meta_count_fails_load() {
        let ds = make_dataset(10, 5, 5, 1, 0.2);
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let meta_path = dir.path().join("meta.json");
        let mut meta: DatasetMeta =
            serde_json::from_slice(&fs::read(&meta_path).unwrap()).unwrap();
        meta.n_train = 11;
        fs::write(&meta_path, serde_json::to_vec_pretty(&meta).unwrap()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(DataError::CountMismatch { .. })));
    }

    #[test]
    fn missing_file_fails_load() {
        let ds = make_dataset(10, 5, 5, 1, 0.2);
        let dir = tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::remove_file(dir.path().join("val").join("labels.csv")).unwrap();
        assert!(load_dataset(dir.path()).is_err());
    }
}
