//! Invertible structural-causal-model prior over the latent space.
//!
//! The first `m` latent coordinates follow a linear SCM after an invertible
//! elementwise transform: z_{1:m} = f(u) with (I − Aᵀ)u = ε_{1:m}. The
//! remaining k−m coordinates pass standard Gaussian noise through unchanged.
//! All solves run by ancestral substitution along a cached topological order;
//! the matrix (I − Aᵀ)⁻¹ is never materialized.

use crate::graph::{self, GraphError, WeightedAdjacency};
use ndarray::Array2;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PriorError {
    #[error("vector has length {got}, expected {want}")]
    DimMismatch { got: usize, want: usize },
    #[error("transform not invertible: {0}")]
    NonInvertible(String),
    #[error("knot positions must be strictly ascending (dimension {0})")]
    BadKnots(usize),
    #[error("parameter vectors disagree in dimension count")]
    BadShape,
    #[error("intervention on dimension {0} outside the causal range 0..{1}")]
    AssignOutOfRange(usize, usize),
    #[error("causal dimension count {m} exceeds latent dimension {k}")]
    CausalDimTooLarge { m: usize, k: usize },
    #[error("least-squares system is rank deficient")]
    RankDeficient,
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Invertible transform applied independently per coordinate.
///
/// The piecewise-linear variant evaluates
/// `f(u) = w_0 u + Σ_t w_t (u − a_t) [u ≥ a_t] + b` with fixed knots `a` and
/// learnable slope increments `w` and bias `b`; every cumulative slope sum
/// must stay strictly positive, which makes f strictly increasing and hence
/// invertible.
#[derive(Debug, Clone, PartialEq)]
pub enum ElementwiseTransform {
    Linear { w: Vec<f64>, b: Vec<f64> },
    PiecewiseLinear { knots: Vec<Vec<f64>>, w: Vec<Vec<f64>>, b: Vec<f64> },
}

impl ElementwiseTransform {
    pub fn linear(w: Vec<f64>, b: Vec<f64>) -> Result<Self, PriorError> {
        if w.len() != b.len() {
            return Err(PriorError::BadShape);
        }
        if let Some(i) = w.iter().position(|&x| x == 0.0) {
            return Err(PriorError::NonInvertible(format!("zero slope at dimension {i}")));
        }
        Ok(Self::Linear { w, b })
    }

    pub fn piecewise_linear(
        knots: Vec<Vec<f64>>,
        w: Vec<Vec<f64>>,
        b: Vec<f64>,
    ) -> Result<Self, PriorError> {
        for (i, wi) in w.iter().enumerate() {
            let mut cum = 0.0;
            for &inc in wi {
                cum += inc;
                if cum <= 0.0 {
                    return Err(PriorError::NonInvertible(format!(
                        "non-positive cumulative slope {cum} at dimension {i}"
                    )));
                }
            }
        }
        Self::pwl_unchecked(knots, w, b)
    }

    /// Piecewise-linear transform without the positive-slope check, for
    /// fitting utilities that do not need invertibility.
    pub fn pwl_unchecked(
        knots: Vec<Vec<f64>>,
        w: Vec<Vec<f64>>,
        b: Vec<f64>,
    ) -> Result<Self, PriorError> {
        if knots.len() != w.len() || knots.len() != b.len() {
            return Err(PriorError::BadShape);
        }
        for (i, (a, wi)) in knots.iter().zip(&w).enumerate() {
            if wi.len() != a.len() + 1 {
                return Err(PriorError::BadShape);
            }
            if a.windows(2).any(|p| p[1] <= p[0]) {
                return Err(PriorError::BadKnots(i));
            }
        }
        Ok(Self::PiecewiseLinear { knots, w, b })
    }

    /// Identity-like piecewise-linear transform: `t` knots equally spaced in
    /// the interior of `[lo, hi]`, unit base slope, zero increments and bias.
    pub fn pwl_identity(dims: usize, t: usize, lo: f64, hi: f64) -> Self {
        let knots: Vec<f64> =
            (1..=t).map(|i| lo + i as f64 * (hi - lo) / (t as f64 + 1.0)).collect();
        let mut w = vec![0.0; t + 1];
        w[0] = 1.0;
        Self::PiecewiseLinear {
            knots: vec![knots; dims],
            w: vec![w; dims],
            b: vec![0.0; dims],
        }
    }

    pub fn dims(&self) -> usize {
        match self {
            Self::Linear { w, .. } => w.len(),
            Self::PiecewiseLinear { b, .. } => b.len(),
        }
    }

    pub fn forward_dim(&self, i: usize, u: f64) -> f64 {
        match self {
            Self::Linear { w, b } => w[i] * u + b[i],
            Self::PiecewiseLinear { knots, w, b } => {
                let mut v = w[i][0] * u + b[i];
                for (t, &a) in knots[i].iter().enumerate() {
                    if u >= a {
                        v += w[i][t + 1] * (u - a);
                    }
                }
                v
            }
        }
    }

    /// Slope of the transform at `u` (right-continuous at knots).
    pub fn deriv_dim(&self, i: usize, u: f64) -> f64 {
        match self {
            Self::Linear { w, .. } => w[i],
            Self::PiecewiseLinear { knots, w, .. } => {
                let mut c = w[i][0];
                for (t, &a) in knots[i].iter().enumerate() {
                    if u >= a {
                        c += w[i][t + 1];
                    }
                }
                c
            }
        }
    }

    pub fn inverse_dim(&self, i: usize, v: f64) -> f64 {
        match self {
            Self::Linear { w, b } => (v - b[i]) / w[i],
            Self::PiecewiseLinear { knots, w, b } => {
                // Knot images ascend with the knots, so the containing
                // segment is found by counting images at or below v.
                let seg = knots[i].iter().take_while(|&&a| self.forward_dim(i, a) <= v).count();
                let mut slope = w[i][0];
                let mut intercept = b[i];
                for t in 0..seg {
                    slope += w[i][t + 1];
                    intercept -= w[i][t + 1] * knots[i][t];
                }
                (v - intercept) / slope
            }
        }
    }

    pub fn forward(&self, u: &[f64]) -> Result<Vec<f64>, PriorError> {
        if u.len() != self.dims() {
            return Err(PriorError::DimMismatch { got: u.len(), want: self.dims() });
        }
        Ok(u.iter().enumerate().map(|(i, &x)| self.forward_dim(i, x)).collect())
    }

    pub fn inverse(&self, v: &[f64]) -> Result<Vec<f64>, PriorError> {
        if v.len() != self.dims() {
            return Err(PriorError::DimMismatch { got: v.len(), want: self.dims() });
        }
        Ok(v.iter().enumerate().map(|(i, &x)| self.inverse_dim(i, x)).collect())
    }

    /// Number of learnable parameters (knots are fixed).
    pub fn n_params(&self) -> usize {
        match self {
            Self::Linear { w, .. } => 2 * w.len(),
            Self::PiecewiseLinear { w, b, .. } => {
                w.iter().map(|wi| wi.len()).sum::<usize>() + b.len()
            }
        }
    }

    /// Learnable parameters flattened per dimension: slopes then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        match self {
            Self::Linear { w, b } => {
                for i in 0..w.len() {
                    out.push(w[i]);
                    out.push(b[i]);
                }
            }
            Self::PiecewiseLinear { w, b, .. } => {
                for i in 0..b.len() {
                    out.extend_from_slice(&w[i]);
                    out.push(b[i]);
                }
            }
        }
        out
    }

    /// Overwrite learnable parameters from the flat layout of `params_flat`.
    /// Invertibility is not re-checked here; call `project_invertibility`
    /// after optimizer steps.
    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<(), PriorError> {
        if flat.len() != self.n_params() {
            return Err(PriorError::DimMismatch { got: flat.len(), want: self.n_params() });
        }
        match self {
            Self::Linear { w, b } => {
                for i in 0..w.len() {
                    w[i] = flat[2 * i];
                    b[i] = flat[2 * i + 1];
                }
            }
            Self::PiecewiseLinear { w, b, .. } => {
                let mut off = 0;
                for i in 0..b.len() {
                    let n = w[i].len();
                    w[i].copy_from_slice(&flat[off..off + n]);
                    b[i] = flat[off + n];
                    off += n + 1;
                }
            }
        }
        Ok(())
    }

    /// Accumulate `g · ∂f_i(u)/∂params` into the flat gradient buffer.
    pub fn accumulate_param_grads(&self, i: usize, u: f64, g: f64, grad: &mut [f64]) {
        match self {
            Self::Linear { .. } => {
                grad[2 * i] += g * u;
                grad[2 * i + 1] += g;
            }
            Self::PiecewiseLinear { knots, w, .. } => {
                let stride = w[i].len() + 1;
                let off = i * stride;
                grad[off] += g * u;
                for (t, &a) in knots[i].iter().enumerate() {
                    if u >= a {
                        grad[off + 1 + t] += g * (u - a);
                    }
                }
                grad[off + stride - 1] += g;
            }
        }
    }

    /// Restore invertibility after an unconstrained update: piecewise-linear
    /// cumulative slopes are clamped to at least `floor`; linear slopes keep
    /// their sign but gain at least `floor` magnitude.
    pub fn project_invertibility(&mut self, floor: f64) {
        match self {
            Self::Linear { w, .. } => {
                for wi in w.iter_mut() {
                    if wi.abs() < floor {
                        *wi = if *wi < 0.0 { -floor } else { floor };
                    }
                }
            }
            Self::PiecewiseLinear { w, .. } => {
                for wi in w.iter_mut() {
                    let mut cum = 0.0;
                    let mut prev_clamped = 0.0;
                    for inc in wi.iter_mut() {
                        cum += *inc;
                        let clamped = cum.max(floor);
                        *inc = clamped - prev_clamped;
                        prev_clamped = clamped;
                    }
                }
            }
        }
    }
}

/// Composite latent prior: SCM over the first `m` coordinates, standard
/// Gaussian passthrough on the remaining `k − m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScmPrior {
    k: usize,
    m: usize,
    adjacency: WeightedAdjacency,
    f: ElementwiseTransform,
    topo: Vec<usize>,
}

impl ScmPrior {
    pub fn new(
        k: usize,
        m: usize,
        adjacency: WeightedAdjacency,
        f: ElementwiseTransform,
    ) -> Result<Self, PriorError> {
        if m > k {
            return Err(PriorError::CausalDimTooLarge { m, k });
        }
        if adjacency.k() != m {
            return Err(PriorError::DimMismatch { got: adjacency.k(), want: m });
        }
        if f.dims() != m {
            return Err(PriorError::DimMismatch { got: f.dims(), want: m });
        }
        let topo = graph::topological_order(adjacency.mask())?;
        Ok(Self { k, m, adjacency, f, topo })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn adjacency(&self) -> &WeightedAdjacency {
        &self.adjacency
    }

    pub fn adjacency_mut(&mut self) -> &mut WeightedAdjacency {
        &mut self.adjacency
    }

    pub fn f(&self) -> &ElementwiseTransform {
        &self.f
    }

    pub fn f_mut(&mut self) -> &mut ElementwiseTransform {
        &mut self.f
    }

    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// z = F(ε): ancestral substitution for u = (I − Aᵀ)⁻¹ ε_{1:m}, then the
    /// elementwise transform; tail coordinates copied from ε.
    pub fn sample(&self, eps: &[f64]) -> Result<Vec<f64>, PriorError> {
        Ok(self.sample_with_u(eps)?.0)
    }

    /// Like `sample` but also returns the pre-transform solution u, which the
    /// gradient estimators reuse.
    pub fn sample_with_u(&self, eps: &[f64]) -> Result<(Vec<f64>, Vec<f64>), PriorError> {
        if eps.len() != self.k {
            return Err(PriorError::DimMismatch { got: eps.len(), want: self.k });
        }
        let u = self.solve_u(&eps[..self.m]);
        let mut z = eps.to_vec();
        for j in 0..self.m {
            z[j] = self.f.forward_dim(j, u[j]);
        }
        Ok((z, u))
    }

    /// Solve (I − Aᵀ)u = eps_causal along the topological order:
    /// u_j = ε_j + Σ_parents A[i][j] u_i.
    fn solve_u(&self, eps_causal: &[f64]) -> Vec<f64> {
        let mut u = vec![0.0; self.m];
        for &j in &self.topo {
            let mut acc = eps_causal[j];
            for i in self.adjacency.mask().parents(j) {
                acc += self.adjacency.weight(i, j) * u[i];
            }
            u[j] = acc;
        }
        u
    }

    /// ε = F⁻¹(z): u = f⁻¹(z_{1:m}), then ε_{1:m} = (I − Aᵀ)u directly; tail
    /// copied.
    pub fn invert(&self, z: &[f64]) -> Result<Vec<f64>, PriorError> {
        if z.len() != self.k {
            return Err(PriorError::DimMismatch { got: z.len(), want: self.k });
        }
        let mut eps = z.to_vec();
        let u: Vec<f64> = (0..self.m).map(|j| self.f.inverse_dim(j, z[j])).collect();
        for j in 0..self.m {
            let mut acc = u[j];
            for i in self.adjacency.mask().parents(j) {
                acc -= self.adjacency.weight(i, j) * u[i];
            }
            eps[j] = acc;
        }
        Ok(eps)
    }

    /// Hard intervention do(z_d = c) for each assignment: noise is recovered
    /// once, assigned coordinates are overwritten, and only their descendants
    /// are recomputed by ancestral substitution. Every other coordinate is
    /// copied bit-identical from the input.
    pub fn intervene(
        &self,
        z: &[f64],
        assignments: &[(usize, f64)],
    ) -> Result<Vec<f64>, PriorError> {
        if z.len() != self.k {
            return Err(PriorError::DimMismatch { got: z.len(), want: self.k });
        }
        for &(d, _) in assignments {
            if d >= self.m {
                return Err(PriorError::AssignOutOfRange(d, self.m));
            }
        }
        let eps = self.invert(z)?;
        let mut assigned = vec![None; self.m];
        for &(d, c) in assignments {
            assigned[d] = Some(c);
        }
        let roots: Vec<usize> = assignments.iter().map(|&(d, _)| d).collect();
        let mut recompute = vec![false; self.m];
        for d in self.adjacency.mask().descendants(&roots) {
            recompute[d] = true;
        }
        let mut out = z.to_vec();
        let mut u = vec![0.0; self.m];
        for &j in &self.topo {
            if let Some(c) = assigned[j] {
                out[j] = c;
                u[j] = self.f.inverse_dim(j, c);
            } else if recompute[j] {
                let mut acc = eps[j];
                for i in self.adjacency.mask().parents(j) {
                    acc += self.adjacency.weight(i, j) * u[i];
                }
                u[j] = acc;
                out[j] = self.f.forward_dim(j, acc);
            } else {
                u[j] = self.f.inverse_dim(j, z[j]);
            }
        }
        Ok(out)
    }

    /// Accumulate gradients of a scalar loss w.r.t. the prior parameters,
    /// given u from `sample_with_u` and the loss gradient w.r.t. z.
    ///
    /// For the elementwise transform, ∂z_j/∂(f_j params) is direct. For the
    /// adjacency, du = (I − Aᵀ)⁻¹ dAᵀ u gives
    /// ∂L/∂A[i][j] = u_i · [(I − A)⁻¹ (g ⊙ f'(u))]_j, solved by substitution
    /// in reverse topological order. Masked entries receive no gradient.
    pub fn accumulate_beta_grads(
        &self,
        u: &[f64],
        grad_z: &[f64],
        f_grad: &mut [f64],
        a_grad: &mut Array2<f64>,
    ) {
        debug_assert_eq!(u.len(), self.m);
        debug_assert!(grad_z.len() >= self.m);
        for j in 0..self.m {
            self.f.accumulate_param_grads(j, u[j], grad_z[j], f_grad);
        }
        if self.adjacency.mask().edge_count() == 0 {
            return;
        }
        // w solves (I − A) w = g ⊙ f'(u): w_i = rhs_i + Σ_children A[i][j] w_j.
        let mut w = vec![0.0; self.m];
        for &i in self.topo.iter().rev() {
            let mut acc = grad_z[i] * self.f.deriv_dim(i, u[i]);
            for j in self.adjacency.mask().children(i) {
                acc += self.adjacency.weight(i, j) * w[j];
            }
            w[i] = acc;
        }
        for i in 0..self.m {
            for j in self.adjacency.mask().children(i) {
                a_grad[(i, j)] += u[i] * w[j];
            }
        }
    }

    /// Restore f's invertibility margin after an optimizer step.
    pub fn project_invertibility(&mut self, floor: f64) {
        self.f.project_invertibility(floor);
    }
}

/// Latent traversal: one copy of `z` per grid value, with coordinate `dim`
/// replaced.
pub fn traverse(z: &[f64], dim: usize, grid: &[f64]) -> Result<Vec<Vec<f64>>, PriorError> {
    if dim >= z.len() {
        return Err(PriorError::DimMismatch { got: dim, want: z.len() });
    }
    Ok(grid
        .iter()
        .map(|&v| {
            let mut out = z.to_vec();
            out[dim] = v;
            out
        })
        .collect())
}

/// Least-squares piecewise-linear fit on `[lo, hi]` with `t` equally spaced
/// interior knots, over the basis {u, (u−a_1)₊, …, (u−a_t)₊, 1}. Returns the
/// fitted one-dimensional transform (monotonicity not enforced) and the
/// sup-error over the sample points. Test utility for the denseness property.
pub fn pwl_fit(
    xs: &[f64],
    ys: &[f64],
    t: usize,
    lo: f64,
    hi: f64,
) -> Result<(ElementwiseTransform, f64), PriorError> {
    if xs.len() != ys.len() || xs.is_empty() || t == 0 {
        return Err(PriorError::BadShape);
    }
    let knots: Vec<f64> = (1..=t).map(|i| lo + i as f64 * (hi - lo) / (t as f64 + 1.0)).collect();
    let cols = t + 2;
    let mut design = nalgebra::DMatrix::zeros(xs.len(), cols);
    for (r, &x) in xs.iter().enumerate() {
        design[(r, 0)] = x;
        for (c, &a) in knots.iter().enumerate() {
            design[(r, c + 1)] = if x >= a { x - a } else { 0.0 };
        }
        design[(r, cols - 1)] = 1.0;
    }
    let rhs = nalgebra::DVector::from_column_slice(ys);
    let svd = nalgebra::SVD::new(design, true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
    let tol = max_sv * 1e-10;
    if svd.singular_values.iter().filter(|&&s| s > tol).count() < cols {
        return Err(PriorError::RankDeficient);
    }
    let sol = svd.solve(&rhs, tol).map_err(|_| PriorError::RankDeficient)?;
    let w: Vec<f64> = sol.iter().take(t + 1).cloned().collect();
    let b = sol[cols - 1];
    let fit = ElementwiseTransform::pwl_unchecked(vec![knots], vec![w], vec![b])?;
    let sup_err = xs
        .iter()
        .zip(ys)
        .map(|(&x, &y)| (fit.forward_dim(0, x) - y).abs())
        .fold(0.0f64, f64::max);
    Ok((fit, sup_err))
}
