//! Depth-field-statistics refinement: anisotropic total-variation energy
//!
//! ```text
//! E(D) = ½ ‖D − D̄‖²_F + λ ‖P vec(D)‖₁
//! ```
//!
//! minimized by iteratively reweighted least squares. Each outer iteration freezes row weights
//! `w_i = 1 / max(|P_i vec(D)|, ε)` at the current iterate and solves the quadratic surrogate
//!
//! ```text
//! ½ ‖D − D̄‖² + (λ/2) Σ_i w_i (P_i vec(D))²   ⇔   (I + λ Eᵀ E) vec(D) = vec(D̄),   E_i = √w_i · P_i
//! ```
//!
//! with matrix-free conjugate gradients. The surrogate upper-bounds `E` and touches it at the
//! current iterate (wherever `|P_i vec(D)| ≥ ε`), so the energy never increases.

use serde::{Deserialize, Serialize};

use crate::depth::DepthMap;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stacked forward differences of an `height x width` image: horizontal rows first, then
/// vertical; rows for the last column (horizontal) and last row (vertical) are zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientOperator {
    pub height: usize,
    pub width: usize,
}

impl GradientOperator {
    pub fn new(height: usize, width: usize) -> Self {
        GradientOperator { height, width }
    }

    pub fn cols(&self) -> usize {
        self.height * self.width
    }

    pub fn rows(&self) -> usize {
        2 * self.cols()
    }

    pub fn apply<T: Scalar>(&self, v: &[T], out: &mut [T]) {
        let (h, w, n) = (self.height, self.width, self.cols());
        debug_assert_eq!(v.len(), n);
        debug_assert_eq!(out.len(), 2 * n);
        let (gx, gy) = out.split_at_mut(n);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                gx[i] = if x + 1 < w { v[i + 1] - v[i] } else { T::zero() };
                gy[i] = if y + 1 < h { v[i + w] - v[i] } else { T::zero() };
            }
        }
    }

    pub fn apply_transpose<T: Scalar>(&self, g: &[T], out: &mut [T]) {
        let (h, w, n) = (self.height, self.width, self.cols());
        debug_assert_eq!(g.len(), 2 * n);
        out.fill(T::zero());
        let (gx, gy) = g.split_at(n);
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    out[i + 1] += gx[i];
                    out[i] -= gx[i];
                }
                if y + 1 < h {
                    out[i + w] += gy[i];
                    out[i] -= gy[i];
                }
            }
        }
    }

    /// Anisotropic total variation `‖P v‖₁`.
    pub fn total_variation<T: Scalar>(&self, v: &[T]) -> T {
        let mut g = vec![T::zero(); self.rows()];
        self.apply(v, &mut g);
        g.iter().map(|d| d.abs()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IrlsConfig {
    pub lambda: f64,
    /// Floor on `|P_i vec(D)|` when forming weights, in depth units.
    pub epsilon_guard: f64,
    pub max_outer_iters: usize,
    /// Stop once the relative energy change of an outer iteration falls below this.
    pub outer_tol: f64,
    /// Relative residual target of the inner conjugate-gradient solve.
    pub cg_tol: f64,
    /// Inner iteration cap; `None` means ten times the pixel count.
    pub cg_max_iters: Option<usize>,
    #[serde(default)]
    pub preconditioner: Preconditioner,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        IrlsConfig {
            lambda: 0.7,
            epsilon_guard: 1e-6,
            max_outer_iters: 30,
            outer_tol: 1e-6,
            cg_tol: 1e-10,
            cg_max_iters: None,
            preconditioner: Preconditioner::Auto,
        }
    }
}

impl IrlsConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        IrlsConfig {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon_guard > 0.0) {
            return Err(Error::InvalidArgument("epsilon guard must be positive".into()));
        }
        if !(self.cg_tol > 0.0) || self.outer_tol < 0.0 {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct IrlsState<T> {
    pub current: DepthMap<T>,
    /// Energy of the starting point followed by the energy after each outer iteration.
    pub energy_trace: Vec<T>,
    pub iterations: usize,
    /// Conjugate-gradient iterations spent in each outer iteration.
    pub cg_iterations: Vec<usize>,
}

/// `½‖D − D̄‖²_F + λ‖P vec(D)‖₁`.
pub fn tv_energy<T: Scalar>(d: &DepthMap<T>, dbar: &DepthMap<T>, lambda: T) -> Result<T> {
    d.ensure_same_dims(dbar, "tv_energy")?;
    let op = GradientOperator::new(d.height(), d.width());
    Ok(energy(&op, d.values(), dbar.values(), lambda))
}

fn energy<T: Scalar>(op: &GradientOperator, d: &[T], dbar: &[T], lambda: T) -> T {
    let data: T = d.iter().zip(dbar).map(|(&a, &b)| (a - b) * (a - b)).sum();
    T::of(0.5) * data + lambda * op.total_variation(d)
}

/// Stepwise IRLS driver; [`irls_refine`] runs it to convergence.
#[derive(Debug, Clone)]
pub struct IrlsSolver<T> {
    op: GradientOperator,
    dbar: DepthMap<T>,
    config: IrlsConfig,
    state: IrlsState<T>,
}

impl<T: Scalar> IrlsSolver<T> {
    pub fn new(dbar: &DepthMap<T>, config: IrlsConfig) -> Result<Self> {
        config.validate()?;
        dbar.ensure_finite("refinement input")?;
        let op = GradientOperator::new(dbar.height(), dbar.width());
        let e0 = energy(&op, dbar.values(), dbar.values(), T::of(config.lambda));
        Ok(IrlsSolver {
            op,
            dbar: dbar.clone(),
            config,
            state: IrlsState {
                current: dbar.clone(),
                energy_trace: vec![e0],
                iterations: 0,
                cg_iterations: Vec::new(),
            },
        })
    }

    pub fn state(&self) -> &IrlsState<T> {
        &self.state
    }

    pub fn into_state(self) -> IrlsState<T> {
        self.state
    }

    /// Row weights `1 / max(|P_i vec(D)|, ε)` at the current iterate (squares of `E`'s scaling).
    pub fn weights(&self) -> Vec<T> {
        let mut g = vec![T::zero(); self.op.rows()];
        self.op.apply(self.state.current.values(), &mut g);
        let eps = T::of(self.config.epsilon_guard);
        g.iter().map(|d| T::one() / d.abs().max(eps)).collect()
    }

    /// One outer iteration: reweight, then solve the normal equations. Returns the new energy.
    pub fn step(&mut self) -> Result<T> {
        let lambda = T::of(self.config.lambda);
        let weights = self.weights();
        let n = self.op.cols();
        let op = self.op;
        let mut tmp = vec![T::zero(); op.rows()];
        let apply = |v: &[T], out: &mut [T]| {
            op.apply(v, &mut tmp);
            for (t, &w) in tmp.iter_mut().zip(&weights) {
                *t *= w;
            }
            op.apply_transpose(&tmp, out);
            for (o, &vi) in out.iter_mut().zip(v) {
                *o = vi + lambda * *o;
            }
        };
        let pre = StencilPreconditioner::new(&op, &weights, lambda, self.config.preconditioner);
        let mut x = self.state.current.values().to_vec();
        let max_iters = self.config.cg_max_iters.unwrap_or(10 * n);
        let iters = conjugate_gradient(
            apply,
            |r: &[T], z: &mut [T]| pre.apply(r, z),
            self.dbar.values(),
            &mut x,
            T::of(self.config.cg_tol),
            max_iters,
        )?;
        let e = energy(&op, &x, self.dbar.values(), lambda);
        self.state.current = DepthMap::new(self.dbar.height(), self.dbar.width(), x)?;
        self.state.energy_trace.push(e);
        self.state.cg_iterations.push(iters);
        self.state.iterations += 1;
        Ok(e)
    }

    /// Iterates until the relative energy change drops below `outer_tol` or the cap is hit.
    pub fn run(&mut self) -> Result<()> {
        while self.state.iterations < self.config.max_outer_iters {
            let prev = *self.state.energy_trace.last().expect("seeded with E0");
            let e = self.step()?;
            if (prev - e).abs() <= T::of(self.config.outer_tol) * prev.abs() {
                break;
            }
        }
        Ok(())
    }
}

/// Minimizes the TV energy starting from `D⁽⁰⁾ = D̄`.
pub fn irls_refine<T: Scalar>(dbar: &DepthMap<T>, config: &IrlsConfig) -> Result<(DepthMap<T>, IrlsState<T>)> {
    let mut solver = IrlsSolver::new(dbar, *config)?;
    solver.run()?;
    let state = solver.into_state();
    Ok((state.current.clone(), state))
}

/// [`irls_refine`] without the diagnostic state.
pub fn refine_output<T: Scalar>(dbar: &DepthMap<T>, config: &IrlsConfig) -> Result<DepthMap<T>> {
    Ok(irls_refine(dbar, config)?.0)
}

/// Preconditioners for `A = I + λ Pᵀ W P`, a five-point stencil matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preconditioner {
    Jacobi,
    /// Modified incomplete Cholesky, MIC(0); no fill-in.
    Mic,
    /// Exact banded Cholesky factor, ordered along the shorter image axis.
    Cholesky,
    /// Banded Cholesky while its band fits in [`CHOLESKY_BAND_LIMIT`] entries, MIC(0) beyond.
    #[default]
    Auto,
}

/// Band entries (`n * (bandwidth + 1)`) above which `Auto` stops factoring exactly.
pub const CHOLESKY_BAND_LIMIT: usize = 1 << 22;

/// Factored preconditioner for one reweighted system.
#[derive(Debug, Clone)]
pub struct StencilPreconditioner<T> {
    width: usize,
    kind: Preconditioner,
    /// Jacobi: `1 / A_ii`. MIC: the inverse diagonal of the incomplete factor.
    inv_diag: Vec<T>,
    /// Off-diagonal couplings `A_{i,i+1}` and `A_{i,i+w}` (zero across borders).
    right: Vec<T>,
    down: Vec<T>,
    band: Option<BandedCholesky<T>>,
}

/// Lower factor `L` of a banded SPD matrix, `L[k][k - j]` stored at `k * (b + 1) + j`.
#[derive(Debug, Clone)]
struct BandedCholesky<T> {
    bandwidth: usize,
    factor: Vec<T>,
    /// Pixel index of each factor row.
    order: Vec<usize>,
}

impl<T: Scalar> BandedCholesky<T> {
    fn new(height: usize, width: usize, diag: &[T], right: &[T], down: &[T]) -> Self {
        let n = diag.len();
        let transposed = width > height;
        let b = if transposed { height } else { width };
        let order: Vec<usize> = if transposed {
            (0..n).map(|k| (k % height) * width + k / height).collect()
        } else {
            (0..n).collect()
        };
        let s = b + 1;
        let mut f = vec![T::zero(); n * s];
        for (k, &i) in order.iter().enumerate() {
            f[k * s] = diag[i];
            // Row-major neighbours at k-1 / k-b swap roles under the transposed order.
            let (near, far) = if transposed { (down, right) } else { (right, down) };
            let (near_step, far_step) = if transposed { (width, 1) } else { (1, width) };
            if k % b > 0 {
                f[k * s + 1] = near[i - near_step];
            }
            if k >= b {
                f[k * s + b] = far[i - far_step];
            }
        }
        for k in 0..n {
            let lo = k.saturating_sub(b);
            for j in lo..=k {
                let mut acc = f[k * s + (k - j)];
                for i in lo.max(j.saturating_sub(b))..j {
                    acc -= f[k * s + (k - i)] * f[j * s + (j - i)];
                }
                f[k * s + (k - j)] = if j == k {
                    acc.max(T::min_positive_value()).sqrt()
                } else {
                    acc / f[j * s]
                };
            }
        }
        BandedCholesky {
            bandwidth: b,
            factor: f,
            order,
        }
    }

    fn solve(&self, r: &[T], z: &mut [T]) {
        let (n, b, f) = (r.len(), self.bandwidth, &self.factor);
        let s = b + 1;
        let mut y: Vec<T> = self.order.iter().map(|&i| r[i]).collect();
        for k in 0..n {
            let mut acc = y[k];
            for i in k.saturating_sub(b)..k {
                acc -= f[k * s + (k - i)] * y[i];
            }
            y[k] = acc / f[k * s];
        }
        for k in (0..n).rev() {
            let mut acc = y[k];
            for i in k + 1..n.min(k + b + 1) {
                acc -= f[i * s + (i - k)] * y[i];
            }
            y[k] = acc / f[k * s];
        }
        for (&i, v) in self.order.iter().zip(y) {
            z[i] = v;
        }
    }
}

impl<T: Scalar> StencilPreconditioner<T> {
    pub fn new(op: &GradientOperator, weights: &[T], lambda: T, kind: Preconditioner) -> Self {
        let (h, w, n) = (op.height, op.width, op.cols());
        let mut diag = vec![T::one(); n];
        let mut right = vec![T::zero(); n];
        let mut down = vec![T::zero(); n];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w {
                    let c = lambda * weights[i];
                    diag[i] += c;
                    diag[i + 1] += c;
                    right[i] = -c;
                }
                if y + 1 < h {
                    let c = lambda * weights[n + i];
                    diag[i] += c;
                    diag[i + w] += c;
                    down[i] = -c;
                }
            }
        }
        let kind = match kind {
            Preconditioner::Auto if n * (h.min(w) + 1) <= CHOLESKY_BAND_LIMIT => Preconditioner::Cholesky,
            Preconditioner::Auto => Preconditioner::Mic,
            k => k,
        };
        let band = (kind == Preconditioner::Cholesky).then(|| BandedCholesky::new(h, w, &diag, &right, &down));
        let inv_diag = match kind {
            Preconditioner::Cholesky | Preconditioner::Auto => Vec::new(),
            Preconditioner::Jacobi => diag.iter().map(|&d| T::one() / d).collect(),
            Preconditioner::Mic => {
                let (tau, sigma) = (T::of(0.97), T::of(0.25));
                let mut p = vec![T::zero(); n];
                for i in 0..n {
                    let mut e = diag[i];
                    if i % w > 0 {
                        let (a, q) = (right[i - 1], p[i - 1]);
                        e -= (a * q) * (a * q) + tau * a * down[i - 1] * q * q;
                    }
                    if i >= w {
                        let (a, q) = (down[i - w], p[i - w]);
                        e -= (a * q) * (a * q) + tau * a * right[i - w] * q * q;
                    }
                    if e < sigma * diag[i] {
                        e = diag[i];
                    }
                    p[i] = T::one() / e.sqrt();
                }
                p
            }
        };
        StencilPreconditioner {
            width: w,
            kind,
            inv_diag,
            right,
            down,
            band,
        }
    }

    /// `z = M⁻¹ r`.
    pub fn apply(&self, r: &[T], z: &mut [T]) {
        let (w, n, p) = (self.width, r.len(), &self.inv_diag);
        match self.kind {
            Preconditioner::Cholesky | Preconditioner::Auto => {
                self.band.as_ref().expect("factored at construction").solve(r, z);
            }
            Preconditioner::Jacobi => {
                for ((zi, &ri), &d) in z.iter_mut().zip(r).zip(p) {
                    *zi = ri * d;
                }
            }
            Preconditioner::Mic => {
                // L q = r, then Lᵀ z = q, with L = (diag(p)⁻¹ + strictly lower part of A) diag(p).
                for i in 0..n {
                    let mut t = r[i];
                    if i % w > 0 {
                        t -= self.right[i - 1] * p[i - 1] * z[i - 1];
                    }
                    if i >= w {
                        t -= self.down[i - w] * p[i - w] * z[i - w];
                    }
                    z[i] = t * p[i];
                }
                for i in (0..n).rev() {
                    let mut t = z[i];
                    if (i + 1) % w != 0 {
                        t -= self.right[i] * p[i] * z[i + 1];
                    }
                    if i + w < n {
                        t -= self.down[i] * p[i] * z[i + w];
                    }
                    z[i] = t * p[i];
                }
            }
        }
    }
}

/// Preconditioned conjugate gradients for a symmetric positive definite operator.
///
/// `x` holds the starting guess and receives the solution; stops when `‖b − A x‖ ≤ tol ‖b‖`.
/// Returns the iteration count.
pub fn conjugate_gradient<T: Scalar>(
    mut apply: impl FnMut(&[T], &mut [T]),
    mut precondition: impl FnMut(&[T], &mut [T]),
    b: &[T],
    x: &mut [T],
    tol: T,
    max_iters: usize,
) -> Result<usize> {
    let n = b.len();
    let norm = |v: &[T]| v.iter().map(|&a| a * a).sum::<T>().sqrt();
    let dot = |a: &[T], c: &[T]| a.iter().zip(c).map(|(&p, &q)| p * q).sum::<T>();

    let target = tol * norm(b);
    let mut ax = vec![T::zero(); n];
    apply(x, &mut ax);
    let mut r: Vec<T> = b.iter().zip(&ax).map(|(&bi, &ai)| bi - ai).collect();
    let mut rnorm = norm(&r);
    if rnorm <= target {
        return Ok(0);
    }
    let mut z = vec![T::zero(); n];
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![T::zero(); n];
    for it in 1..=max_iters {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            return Err(Error::SolverDiverged {
                iterations: it,
                residual: rnorm.as_f64(),
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rnorm = norm(&r);
        if rnorm <= target {
            return Ok(it);
        }
        precondition(&r, &mut z);
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::SolverDiverged {
        iterations: max_iters,
        residual: rnorm.as_f64(),
    })
}
