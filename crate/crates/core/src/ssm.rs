//! Discrete linear state-space systems: recurrent scan, kernel
//! materialization, and causal-convolution evaluation.
//!
//! A system maps a scalar input sequence `u` to a scalar output sequence `y`
//! through a hidden state `x`:
//!
//! ```text
//! x[k+1] = A x[k] + B u[k]
//! y[k]   = C x[k] + D u[k]
//! ```
//!
//! With `x[0] = 0` the same map is a causal convolution with the filter
//! `F = (CB, CAB, CA²B, ...)` delayed by one step, plus the `D` feedthrough.
//! Both evaluation paths are implemented and must agree; the convolution has
//! a direct O(L²) form and an FFT form.
//!
//! The default parameterization keeps `A` diagonal with complex entries and
//! projects outputs onto the real axis. Stability is unconditional after
//! [`stabilize`]: magnitudes are stored through a sigmoid with a fixed margin
//! so `|A_i| < 1` for every raw parameter value. A dense real `A` mode exists
//! for oracle tests.

use num_complex::Complex;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::scalar::{Cx, Scalar};

/// Default stability margin: `|A_i| <= (1 - margin)` after [`stabilize`].
pub const STABILITY_MARGIN: f64 = 0.01;

#[derive(Debug, Error, PartialEq)]
pub enum SsmError {
    #[error("state dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("kernel length {kernel} does not match input length {input}")]
    LengthMismatch { kernel: usize, input: usize },
    #[error("unstable system: {0}")]
    Unstable(String),
    #[error("diagonal raw parameterization needs an even state dimension, got {0}")]
    OddStateDim(usize),
}

/// State transition structure of one system.
#[derive(Debug, Clone)]
pub enum StateSpace<T: Scalar> {
    /// Diagonal `A` with complex entries; `B` and `C` complex of the same
    /// length. Outputs are the real part of `C x + D u`, which is exact when
    /// the entries form conjugate-symmetric pairs.
    Diagonal {
        lambda: Vec<Cx<T>>,
        b: Vec<Cx<T>>,
        c: Vec<Cx<T>>,
    },
    /// Dense real `A` (row-major `n x n`), used by oracle tests.
    Full {
        a: Vec<T>,
        b: Vec<T>,
        c: Vec<T>,
        n: usize,
    },
}

/// One state-space filter: transition structure plus scalar feedthrough.
#[derive(Debug, Clone)]
pub struct SsmParams<T: Scalar> {
    pub space: StateSpace<T>,
    pub d: T,
}

/// Hidden state matching the system's structure.
#[derive(Debug, Clone)]
pub enum SsmState<T: Scalar> {
    Diagonal(Vec<Cx<T>>),
    Full(Vec<T>),
}

/// Materialized convolution filter `F[j] = C A^j B`.
#[derive(Debug, Clone)]
pub struct Kernel<T: Scalar> {
    pub taps: Vec<T>,
}

impl<T: Scalar> Kernel<T> {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }
}

/// Raw (unconstrained) diagonal parameterization. [`stabilize`] maps it to a
/// strictly stable [`SsmParams`]: each of the `dim/2` stored modes becomes a
/// conjugate pair `m e^{±iθ}` with `m = sigmoid(a_raw) (1 - margin)`.
#[derive(Debug, Clone)]
pub struct RawDiagSsm<T: Scalar> {
    pub a_raw: Vec<T>,
    pub theta: Vec<T>,
    pub b_re: Vec<T>,
    pub b_im: Vec<T>,
    pub c_re: Vec<T>,
    pub c_im: Vec<T>,
    pub d: T,
    pub margin: T,
}

impl<T: Scalar> RawDiagSsm<T> {
    /// Randomly initialize one filter with `dim` total states (`dim/2`
    /// conjugate pairs). Magnitudes target U[0.90, 0.999] (clamped so the
    /// sigmoid reparameterization can represent them under the margin),
    /// phases spread as `θ_i = π i / dim`, and `B`, `C` drawn from a
    /// zero-mean Gaussian scaled by `1/√dim`.
    pub fn init<R: Rng>(dim: usize, rng: &mut R) -> Result<Self, SsmError> {
        if dim == 0 || dim % 2 != 0 {
            return Err(SsmError::OddStateDim(dim));
        }
        let margin = STABILITY_MARGIN;
        let half = dim / 2;
        let scale = 1.0 / (dim as f64).sqrt();
        let mut a_raw = Vec::with_capacity(half);
        let mut theta = Vec::with_capacity(half);
        for i in 0..half {
            let target: f64 = 0.90 + 0.099 * rng.random::<f64>();
            // The sigmoid cap is 1 - margin = 0.99; clamp below it so the
            // logit stays finite.
            let m = target.min(0.989);
            let logit = (m / (1.0 - margin)).ln() - (1.0 - m / (1.0 - margin)).ln();
            a_raw.push(T::of_f64(logit));
            theta.push(T::of_f64(std::f64::consts::PI * i as f64 / dim as f64));
        }
        // Draws stay in f64 so the sequence is identical across precisions.
        let gauss = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
        let draw = |n: usize, rng: &mut R| -> Vec<T> {
            (0..n).map(|_| T::of_f64(gauss(rng) * scale)).collect()
        };
        let b_re = draw(half, rng);
        let b_im = draw(half, rng);
        let c_re = draw(half, rng);
        let c_im = draw(half, rng);
        let d = T::of_f64(gauss(rng));
        Ok(Self {
            a_raw,
            theta,
            b_re,
            b_im,
            c_re,
            c_im,
            d,
            margin: T::of_f64(margin),
        })
    }
}

/// Map raw diagonal parameters to a strictly stable system. Each stored mode
/// `i` yields the conjugate pair `λ = m e^{iθ}`, `conj(λ)` with paired `B`,
/// `C`, so real outputs are exact. `|λ| = sigmoid(a_raw) (1 - margin) < 1`
/// for every finite or infinite raw value.
pub fn stabilize<T: Scalar>(raw: &RawDiagSsm<T>) -> SsmParams<T> {
    let half = raw.a_raw.len();
    let mut lambda = Vec::with_capacity(2 * half);
    let mut b = Vec::with_capacity(2 * half);
    let mut c = Vec::with_capacity(2 * half);
    let one = T::one();
    for i in 0..half {
        let m = raw.a_raw[i].sigmoid() * (one - raw.margin);
        let lam = Complex::new(m * raw.theta[i].cos(), m * raw.theta[i].sin());
        let bi = Complex::new(raw.b_re[i], raw.b_im[i]);
        let ci = Complex::new(raw.c_re[i], raw.c_im[i]);
        lambda.push(lam);
        b.push(bi);
        c.push(ci);
        lambda.push(lam.conj());
        b.push(bi.conj());
        c.push(ci.conj());
    }
    SsmParams {
        space: StateSpace::Diagonal { lambda, b, c },
        d: raw.d,
    }
}

impl<T: Scalar> SsmParams<T> {
    /// Number of real degrees of freedom in the hidden state.
    pub fn state_dim(&self) -> usize {
        match &self.space {
            StateSpace::Diagonal { lambda, .. } => lambda.len(),
            StateSpace::Full { n, .. } => *n,
        }
    }

    pub fn zero_state(&self) -> SsmState<T> {
        match &self.space {
            StateSpace::Diagonal { lambda, .. } => {
                SsmState::Diagonal(vec![Complex::new(T::zero(), T::zero()); lambda.len()])
            }
            StateSpace::Full { n, .. } => SsmState::Full(vec![T::zero(); *n]),
        }
    }

    fn check_state(&self, x: &SsmState<T>) -> Result<(), SsmError> {
        let (expected, got) = match (&self.space, x) {
            (StateSpace::Diagonal { lambda, .. }, SsmState::Diagonal(v)) => {
                (lambda.len(), v.len())
            }
            (StateSpace::Full { n, .. }, SsmState::Full(v)) => (*n, v.len()),
            (StateSpace::Diagonal { lambda, .. }, SsmState::Full(v)) => (lambda.len(), v.len()),
            (StateSpace::Full { n, .. }, SsmState::Diagonal(v)) => (*n, v.len()),
        };
        if expected != got || !matches_structure(&self.space, x) {
            return Err(SsmError::DimensionMismatch { expected, got });
        }
        Ok(())
    }

    /// One recurrence step: `x' = A x + B u`, `y = C x + D u`.
    pub fn step(&self, x: &SsmState<T>, u: T) -> Result<(SsmState<T>, T), SsmError> {
        self.check_state(x)?;
        match (&self.space, x) {
            (StateSpace::Diagonal { lambda, b, c }, SsmState::Diagonal(xv)) => {
                let mut y = T::zero();
                let mut next = Vec::with_capacity(xv.len());
                for i in 0..xv.len() {
                    y += (c[i] * xv[i]).re;
                    next.push(lambda[i] * xv[i] + b[i] * u);
                }
                Ok((SsmState::Diagonal(next), y + self.d * u))
            }
            (StateSpace::Full { a, b, c, n }, SsmState::Full(xv)) => {
                let n = *n;
                let mut y = T::zero();
                for i in 0..n {
                    y += c[i] * xv[i];
                }
                let mut next = vec![T::zero(); n];
                for i in 0..n {
                    let mut acc = T::zero();
                    for j in 0..n {
                        acc += a[i * n + j] * xv[j];
                    }
                    next[i] = acc + b[i] * u;
                }
                Ok((SsmState::Full(next), y + self.d * u))
            }
            _ => unreachable!("check_state verified the structure"),
        }
    }

    /// Unroll the recurrence over a whole input sequence.
    pub fn scan(&self, u: &[T], x0: &SsmState<T>) -> Result<Vec<T>, SsmError> {
        if u.is_empty() {
            return Err(SsmError::EmptyInput);
        }
        self.check_state(x0)?;
        let mut x = x0.clone();
        let mut y = Vec::with_capacity(u.len());
        for &uk in u {
            let (next, yk) = self.step(&x, uk)?;
            y.push(yk);
            x = next;
        }
        Ok(y)
    }

    /// Materialize the convolution filter `F[j] = C A^j B` for `j < len`.
    ///
    /// Diagonal systems use the per-mode geometric progression; dense systems
    /// iterate `v <- A v` from `B`. Errors if the system is unstable (any
    /// `|λ| >= 1`, or unbounded growth in dense mode).
    pub fn kernel(&self, len: usize) -> Result<Kernel<T>, SsmError> {
        if len == 0 {
            return Err(SsmError::EmptyInput);
        }
        match &self.space {
            StateSpace::Diagonal { lambda, b, c } => {
                for (i, lam) in lambda.iter().enumerate() {
                    if lam.norm().into_f64() >= 1.0 {
                        return Err(SsmError::Unstable(format!(
                            "|lambda[{i}]| = {} >= 1",
                            lam.norm()
                        )));
                    }
                }
                let mut taps = vec![T::zero(); len];
                for i in 0..lambda.len() {
                    let mut p = c[i] * b[i];
                    for tap in taps.iter_mut() {
                        *tap += p.re;
                        p = p * lambda[i];
                    }
                }
                Ok(Kernel { taps })
            }
            StateSpace::Full { a, b, c, n } => {
                let n = *n;
                let b_norm: f64 = b.iter().map(|v| (v.into_f64()).abs()).sum::<f64>().max(1e-30);
                let mut v = b.clone();
                let mut taps = Vec::with_capacity(len);
                for _ in 0..len {
                    let mut y = T::zero();
                    for i in 0..n {
                        y += c[i] * v[i];
                    }
                    taps.push(y);
                    let growth: f64 = v.iter().map(|x| x.into_f64().abs()).sum();
                    if !growth.is_finite() || growth > 1e9 * b_norm {
                        return Err(SsmError::Unstable(format!(
                            "state norm grew to {growth:.3e} during kernel materialization"
                        )));
                    }
                    let mut next = vec![T::zero(); n];
                    for i in 0..n {
                        let mut acc = T::zero();
                        for j in 0..n {
                            acc += a[i * n + j] * v[j];
                        }
                        next[i] = acc;
                    }
                    v = next;
                }
                Ok(Kernel { taps })
            }
        }
    }
}

fn matches_structure<T: Scalar>(space: &StateSpace<T>, state: &SsmState<T>) -> bool {
    matches!(
        (space, state),
        (StateSpace::Diagonal { .. }, SsmState::Diagonal(_))
            | (StateSpace::Full { .. }, SsmState::Full(_))
    )
}

/// Causal convolution with one-step delay plus feedthrough:
/// `y[k] = Σ_{j<k} F[k-1-j] u[j] + D u[k]`. Direct O(L²) evaluation.
pub fn convolve_direct<T: Scalar>(kernel: &Kernel<T>, u: &[T], d: T) -> Result<Vec<T>, SsmError> {
    if kernel.len() != u.len() {
        return Err(SsmError::LengthMismatch {
            kernel: kernel.len(),
            input: u.len(),
        });
    }
    let len = u.len();
    let mut y = vec![T::zero(); len];
    for k in 0..len {
        let mut acc = T::zero();
        for j in 0..k {
            acc += kernel.taps[k - 1 - j] * u[j];
        }
        y[k] = acc + d * u[k];
    }
    Ok(y)
}

/// FFT evaluation of [`convolve_direct`]; identical semantics within
/// floating-point tolerance, O(L log L).
pub fn convolve_fft<T: Scalar>(kernel: &Kernel<T>, u: &[T], d: T) -> Result<Vec<T>, SsmError> {
    if kernel.len() != u.len() {
        return Err(SsmError::LengthMismatch {
            kernel: kernel.len(),
            input: u.len(),
        });
    }
    let len = u.len();
    // Shift the kernel by one to realize the delay, then linear-convolve.
    let mut shifted = vec![T::zero(); len];
    shifted[1..len].copy_from_slice(&kernel.taps[..len - 1]);
    let mut y = linear_convolve_fft(&shifted, u, len);
    for k in 0..len {
        y[k] += d * u[k];
    }
    Ok(y)
}

/// Linear convolution of `a` and `b` via FFT, truncated to `out_len`.
pub(crate) fn linear_convolve_fft<T: Scalar>(a: &[T], b: &[T], out_len: usize) -> Vec<T> {
    let full = a.len() + b.len() - 1;
    let nfft = full.next_power_of_two();
    let mut planner = rustfft::FftPlanner::<T>::new();
    let fwd = planner.plan_fft_forward(nfft);
    let inv = planner.plan_fft_inverse(nfft);

    let mut fa: Vec<Cx<T>> = a
        .iter()
        .map(|&x| Complex::new(x, T::zero()))
        .chain(std::iter::repeat(Complex::new(T::zero(), T::zero())))
        .take(nfft)
        .collect();
    let mut fb: Vec<Cx<T>> = b
        .iter()
        .map(|&x| Complex::new(x, T::zero()))
        .chain(std::iter::repeat(Complex::new(T::zero(), T::zero())))
        .take(nfft)
        .collect();
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    let scale = T::of_f64(1.0 / nfft as f64);
    for i in 0..nfft {
        fa[i] = fa[i] * fb[i] * scale;
    }
    inv.process(&mut fa);
    fa.iter().take(out_len).map(|c| c.re).collect()
}

/// Batched kernel materialization in raw-parameter space, with the gradient
/// of a loss with respect to every raw parameter. This is the training path;
/// unit tests pin it to `stabilize` + [`SsmParams::kernel`].
pub mod batched {
    use super::*;

    /// Parameter views for `filters` independent systems with `modes` stored
    /// conjugate-pair representatives each. All slices have length
    /// `filters * modes`, laid out filter-major.
    pub struct RawModes<'a, T: Scalar> {
        pub a_raw: &'a [T],
        pub theta: &'a [T],
        pub b_re: &'a [T],
        pub b_im: &'a [T],
        pub c_re: &'a [T],
        pub c_im: &'a [T],
        pub filters: usize,
        pub modes: usize,
    }

    /// Kernels for all filters: `out[f * len + j] = F_f[j]`, where
    /// `F_f[j] = 2 Σ_i Re(C_i B_i λ_i^j)` over the filter's stored modes.
    pub fn kernel_forward<T: Scalar>(p: &RawModes<'_, T>, len: usize, margin: T) -> Vec<T> {
        let mut out = vec![T::zero(); p.filters * len];
        let two = T::of_f64(2.0);
        for f in 0..p.filters {
            let taps = &mut out[f * len..(f + 1) * len];
            for i in 0..p.modes {
                let idx = f * p.modes + i;
                let m = p.a_raw[idx].sigmoid() * (T::one() - margin);
                let lam = Complex::new(m * p.theta[idx].cos(), m * p.theta[idx].sin());
                let g = Complex::new(p.c_re[idx], p.c_im[idx])
                    * Complex::new(p.b_re[idx], p.b_im[idx]);
                let mut pow = g;
                for tap in taps.iter_mut() {
                    *tap += two * pow.re;
                    pow = pow * lam;
                }
            }
        }
        out
    }

    /// Gradients of the raw parameters given `d(loss)/d(kernel)`.
    /// Returns `(a_raw, theta, b_re, b_im, c_re, c_im)` gradients.
    #[allow(clippy::type_complexity)]
    pub fn kernel_backward<T: Scalar>(
        p: &RawModes<'_, T>,
        len: usize,
        margin: T,
        grad_out: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>, Vec<T>) {
        let n = p.filters * p.modes;
        let mut da = vec![T::zero(); n];
        let mut dtheta = vec![T::zero(); n];
        let mut dbre = vec![T::zero(); n];
        let mut dbim = vec![T::zero(); n];
        let mut dcre = vec![T::zero(); n];
        let mut dcim = vec![T::zero(); n];
        let two = T::of_f64(2.0);
        for f in 0..p.filters {
            let g_taps = &grad_out[f * len..(f + 1) * len];
            for i in 0..p.modes {
                let idx = f * p.modes + i;
                let s = p.a_raw[idx].sigmoid();
                let m = s * (T::one() - margin);
                let lam = Complex::new(m * p.theta[idx].cos(), m * p.theta[idx].sin());
                let b = Complex::new(p.b_re[idx], p.b_im[idx]);
                let c = Complex::new(p.c_re[idx], p.c_im[idx]);
                let g = c * b;
                // s1 = Σ_j gK_j λ^j, s2 = Σ_j gK_j j λ^j
                let mut s1 = Complex::new(T::zero(), T::zero());
                let mut s2 = Complex::new(T::zero(), T::zero());
                let mut pow = Complex::new(T::one(), T::zero());
                for (j, &gk) in g_taps.iter().enumerate() {
                    s1 = s1 + pow * gk;
                    s2 = s2 + pow * (gk * T::of_usize(j));
                    pow = pow * lam;
                }
                // F_j = 2 Re(G λ^j) with G = c·b.
                let dg_re = two * s1.re;
                let dg_im = -(two * s1.im);
                dcre[idx] += dg_re * b.re + dg_im * b.im;
                dcim[idx] += -(dg_re * b.im) + dg_im * b.re;
                dbre[idx] += dg_re * c.re + dg_im * c.im;
                dbim[idx] += -(dg_re * c.im) + dg_im * c.re;
                let gs2 = g * s2;
                if m > T::zero() {
                    let dm = two * gs2.re / m;
                    let ds = dm * (T::one() - margin);
                    da[idx] += ds * s * (T::one() - s);
                }
                dtheta[idx] += -(two * gs2.im);
            }
        }
        (da, dtheta, dbre, dbim, dcre, dcim)
    }

    /// Causal convolution over a batch: `u` is `[batch, len, filters]`
    /// (time-major per item), `kernels` is `[filters, len]`, `d` has one
    /// feedthrough per filter. `y[b,t,f] = Σ_{j<t} K_f[t-1-j] u[b,j,f]
    /// + d_f u[b,t,f]`.
    pub fn causal_conv_forward<T: Scalar>(
        u: &[T],
        kernels: &[T],
        d: &[T],
        batch: usize,
        len: usize,
        filters: usize,
        use_fft: bool,
    ) -> Vec<T> {
        let mut y = vec![T::zero(); batch * len * filters];
        if use_fft {
            let full = 2 * len - 1;
            let nfft = full.next_power_of_two();
            let mut planner = rustfft::FftPlanner::<T>::new();
            let fwd = planner.plan_fft_forward(nfft);
            let inv = planner.plan_fft_inverse(nfft);
            let zero = Complex::new(T::zero(), T::zero());
            // Spectrum of each shifted kernel, computed once.
            let mut kspec = vec![zero; filters * nfft];
            let mut scratch = vec![zero; nfft];
            for f in 0..filters {
                scratch.fill(zero);
                for j in 0..len - 1 {
                    scratch[j + 1] = Complex::new(kernels[f * len + j], T::zero());
                }
                fwd.process(&mut scratch);
                kspec[f * nfft..(f + 1) * nfft].copy_from_slice(&scratch);
            }
            let scale = T::of_f64(1.0 / nfft as f64);
            for bi in 0..batch {
                for f in 0..filters {
                    scratch.fill(zero);
                    for t in 0..len {
                        scratch[t] = Complex::new(u[(bi * len + t) * filters + f], T::zero());
                    }
                    fwd.process(&mut scratch);
                    let ks = &kspec[f * nfft..(f + 1) * nfft];
                    for i in 0..nfft {
                        scratch[i] = scratch[i] * ks[i] * scale;
                    }
                    inv.process(&mut scratch);
                    for t in 0..len {
                        y[(bi * len + t) * filters + f] =
                            scratch[t].re + d[f] * u[(bi * len + t) * filters + f];
                    }
                }
            }
        } else {
            for bi in 0..batch {
                for f in 0..filters {
                    for t in 0..len {
                        let mut acc = T::zero();
                        for j in 0..t {
                            acc += kernels[f * len + (t - 1 - j)] * u[(bi * len + j) * filters + f];
                        }
                        y[(bi * len + t) * filters + f] =
                            acc + d[f] * u[(bi * len + t) * filters + f];
                    }
                }
            }
        }
        y
    }

    /// Gradients of [`causal_conv_forward`]: returns `(du, dkernels, dd)`.
    pub fn causal_conv_backward<T: Scalar>(
        u: &[T],
        kernels: &[T],
        d: &[T],
        grad_y: &[T],
        batch: usize,
        len: usize,
        filters: usize,
        use_fft: bool,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let mut du = vec![T::zero(); batch * len * filters];
        let mut dk = vec![T::zero(); filters * len];
        let mut dd = vec![T::zero(); filters];
        if use_fft {
            // With g the shifted kernel (g[0]=0, g[m]=K[m-1]):
            //   du[j] = Σ_t g[t-j] dy[t]   (correlation: convolve rev(g))
            //   dg[m] = Σ_j u[j] dy[j+m]   (correlation of u with dy)
            let full = 2 * len - 1;
            let nfft = full.next_power_of_two();
            let mut planner = rustfft::FftPlanner::<T>::new();
            let fwd = planner.plan_fft_forward(nfft);
            let inv = planner.plan_fft_inverse(nfft);
            let zero = Complex::new(T::zero(), T::zero());
            let scale = T::of_f64(1.0 / nfft as f64);
            // Spectrum of each reversed shifted kernel.
            let mut krev_spec = vec![zero; filters * nfft];
            let mut scratch = vec![zero; nfft];
            for f in 0..filters {
                scratch.fill(zero);
                // rev(g) over window of length len: rev_g[i] = g[len-1-i]
                for i in 0..len {
                    let gi = len - 1 - i;
                    let g = if gi == 0 {
                        T::zero()
                    } else {
                        kernels[f * len + gi - 1]
                    };
                    scratch[i] = Complex::new(g, T::zero());
                }
                fwd.process(&mut scratch);
                krev_spec[f * nfft..(f + 1) * nfft].copy_from_slice(&scratch);
            }
            let mut uspec = vec![zero; nfft];
            let mut dyrev = vec![zero; nfft];
            for bi in 0..batch {
                for f in 0..filters {
                    // du = conv(rev_g, dy)[len-1 ..]
                    scratch.fill(zero);
                    for t in 0..len {
                        scratch[t] = Complex::new(grad_y[(bi * len + t) * filters + f], T::zero());
                    }
                    fwd.process(&mut scratch);
                    let ks = &krev_spec[f * nfft..(f + 1) * nfft];
                    let mut prod: Vec<Cx<T>> =
                        (0..nfft).map(|i| scratch[i] * ks[i] * scale).collect();
                    inv.process(&mut prod);
                    for j in 0..len {
                        du[(bi * len + j) * filters + f] = prod[len - 1 + j].re
                            + d[f] * grad_y[(bi * len + j) * filters + f];
                    }
                    // dg[m] = conv(u, rev(dy))[len-1+m] read backwards:
                    // conv(u, rev_dy)[len-1-m] = Σ_j u[j] dy[j+m]
                    uspec.fill(zero);
                    for t in 0..len {
                        uspec[t] = Complex::new(u[(bi * len + t) * filters + f], T::zero());
                    }
                    fwd.process(&mut uspec);
                    dyrev.fill(zero);
                    for t in 0..len {
                        dyrev[t] =
                            Complex::new(grad_y[(bi * len + (len - 1 - t)) * filters + f], T::zero());
                    }
                    fwd.process(&mut dyrev);
                    let mut prod2: Vec<Cx<T>> =
                        (0..nfft).map(|i| uspec[i] * dyrev[i] * scale).collect();
                    inv.process(&mut prod2);
                    for m in 1..len {
                        dk[f * len + (m - 1)] += prod2[len - 1 - m].re;
                    }
                    for t in 0..len {
                        dd[f] += u[(bi * len + t) * filters + f]
                            * grad_y[(bi * len + t) * filters + f];
                    }
                }
            }
        } else {
            for bi in 0..batch {
                for f in 0..filters {
                    for t in 0..len {
                        let gy = grad_y[(bi * len + t) * filters + f];
                        if gy == T::zero() {
                            continue;
                        }
                        for j in 0..t {
                            let tap = kernels[f * len + (t - 1 - j)];
                            du[(bi * len + j) * filters + f] += tap * gy;
                            dk[f * len + (t - 1 - j)] += u[(bi * len + j) * filters + f] * gy;
                        }
                        du[(bi * len + t) * filters + f] += d[f] * gy;
                        dd[f] += u[(bi * len + t) * filters + f] * gy;
                    }
                }
            }
        }
        (du, dk, dd)
    }
}

/// Random strictly stable diagonal system for tests and experiments.
/// Odd `dim` gets one purely real mode plus conjugate pairs.
pub fn random_stable_diag<T: Scalar, R: Rng>(dim: usize, rng: &mut R) -> SsmParams<T> {
    let mut lambda = Vec::with_capacity(dim);
    let mut b = Vec::with_capacity(dim);
    let mut c = Vec::with_capacity(dim);
    let gauss = |rng: &mut R| -> f64 { StandardNormal.sample(rng) };
    if dim % 2 == 1 {
        let m = -0.98 + 1.96 * rng.random::<f64>();
        lambda.push(Complex::new(T::of_f64(m), T::zero()));
        b.push(Complex::new(T::of_f64(gauss(rng)), T::zero()));
        c.push(Complex::new(T::of_f64(gauss(rng)), T::zero()));
    }
    while lambda.len() < dim {
        let m = 0.3 + 0.68 * rng.random::<f64>();
        let th = std::f64::consts::PI * rng.random::<f64>();
        let lam = Complex::new(T::of_f64(m * th.cos()), T::of_f64(m * th.sin()));
        let bi = Complex::new(T::of_f64(gauss(rng)), T::of_f64(gauss(rng)));
        let ci = Complex::new(T::of_f64(gauss(rng)), T::of_f64(gauss(rng)));
        lambda.push(lam);
        b.push(bi);
        c.push(ci);
        lambda.push(lam.conj());
        b.push(bi.conj());
        c.push(ci.conj());
    }
    SsmParams {
        space: StateSpace::Diagonal { lambda, b, c },
        d: T::of_f64(gauss(rng)),
    }
}
