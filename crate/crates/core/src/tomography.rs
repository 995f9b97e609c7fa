//! Two-qubit frequency-bin state tomography by maximum likelihood.
//!
//! Each photon is projected on `|0⟩`, `|1⟩`, `|+⟩ = (|0⟩+|1⟩)/√2` or
//! `|L⟩ = (|0⟩+i|1⟩)/√2`. The modulator phase setting of a photon is 0 or
//! π/2; `|+⟩` is only reachable at 0 and `|L⟩` only at π/2, while `|0⟩` and
//! `|1⟩` are measured at both. That gives 36 settings whose counts are
//! summed into 16 projections before fitting.

use std::f64::consts::FRAC_PI_2;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{Cholesky, Matrix4, SMatrix, SVector, Vector4};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{domain, Error, Result};
use crate::rng::{substream, Domain};

pub type C4 = Vector4<Complex64>;
pub type M4 = Matrix4<Complex64>;

const HERMITIAN_TOL: f64 = 1e-12;
const TRACE_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;
const PHASE_TOL: f64 = 1e-6;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Basis {
    Zero,
    One,
    Plus,
    L,
}

impl Basis {
    pub const ALL: [Basis; 4] = [Basis::Zero, Basis::One, Basis::Plus, Basis::L];

    pub fn token(self) -> &'static str {
        match self {
            Basis::Zero => "0",
            Basis::One => "1",
            Basis::Plus => "+",
            Basis::L => "L",
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    /// Single-photon state `(|0⟩ + e^{iθ}|1⟩)/√2` or a basis state.
    pub fn state(self) -> [Complex64; 2] {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        match self {
            Basis::Zero => [c(1.0, 0.0), c(0.0, 0.0)],
            Basis::One => [c(0.0, 0.0), c(1.0, 0.0)],
            Basis::Plus => [c(h, 0.0), c(h, 0.0)],
            Basis::L => [c(h, 0.0), c(0.0, h)],
        }
    }

    /// Phase settings under which this projection is measured.
    pub fn phases(self) -> &'static [f64] {
        match self {
            Basis::Zero | Basis::One => &[0.0, FRAC_PI_2],
            Basis::Plus => &[0.0],
            Basis::L => &[FRAC_PI_2],
        }
    }

    pub fn allows_phase(self, theta: f64) -> bool {
        self.phases().iter().any(|p| (p - theta).abs() < PHASE_TOL)
    }
}

impl FromStr for Basis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "0" => Ok(Basis::Zero),
            "1" => Ok(Basis::One),
            "+" | "plus" => Ok(Basis::Plus),
            "L" | "l" => Ok(Basis::L),
            other => Err(Error::Format(format!("unknown basis token `{other}` (expected 0, 1, + or L)"))),
        }
    }
}

/// One measured setting. Counts are stored as `f64` so that background
/// corrected values keep their fractional part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProjectionSetting {
    pub basis_s: Basis,
    pub basis_i: Basis,
    pub theta_s: f64,
    pub theta_i: f64,
    pub counts: f64,
    pub duration_s: f64,
}

impl ProjectionSetting {
    pub fn validate(&self) -> Result<()> {
        for (b, t, who) in [(self.basis_s, self.theta_s, "signal"), (self.basis_i, self.theta_i, "idler")] {
            if !b.allows_phase(t) {
                return domain(format!("{who} basis {} cannot be measured at phase {t}", b.token()));
            }
        }
        if !(self.counts >= 0.0) {
            return domain(format!("counts must be >= 0, got {}", self.counts));
        }
        Ok(())
    }

    /// Index of the projection in `0..16` (signal basis major).
    pub fn projection_index(&self) -> usize {
        4 * self.basis_s.index() + self.basis_i.index()
    }
}

/// All 36 legal `(basis, phase)` combinations with zero counts.
pub fn all_settings() -> Vec<ProjectionSetting> {
    let mut out = Vec::with_capacity(36);
    for bs in Basis::ALL {
        for bi in Basis::ALL {
            for &ts in bs.phases() {
                for &ti in bi.phases() {
                    out.push(ProjectionSetting { basis_s: bs, basis_i: bi, theta_s: ts, theta_i: ti, counts: 0.0, duration_s: 1.0 });
                }
            }
        }
    }
    out
}

/// Number of phase settings that realise projection `v`.
pub fn multiplicity(v: usize) -> usize {
    Basis::ALL[v / 4].phases().len() * Basis::ALL[v % 4].phases().len()
}

/// `ψ_s ⊗ ψ_i`.
pub fn projection_vector(basis_s: Basis, basis_i: Basis) -> C4 {
    let a = basis_s.state();
    let b = basis_i.state();
    C4::new(a[0] * b[0], a[0] * b[1], a[1] * b[0], a[1] * b[1])
}

fn projections() -> [C4; 16] {
    std::array::from_fn(|v| projection_vector(Basis::ALL[v / 4], Basis::ALL[v % 4]))
}

/// Sums the 36 settings into the 16 projection counts `N_v`.
pub fn aggregate(settings: &[ProjectionSetting]) -> Result<[f64; 16]> {
    let mut seen = [[[false; 2]; 2]; 16];
    let mut n = [0.0; 16];
    for s in settings {
        s.validate()?;
        let v = s.projection_index();
        let slot = &mut seen[v][usize::from(s.theta_s > 0.5)][usize::from(s.theta_i > 0.5)];
        if *slot {
            return domain(format!(
                "duplicate setting ({}, {}) at phases ({}, {})",
                s.basis_s.token(),
                s.basis_i.token(),
                s.theta_s,
                s.theta_i
            ));
        }
        *slot = true;
        n[v] += s.counts;
    }
    let present = seen.iter().flatten().flatten().filter(|b| **b).count();
    if present != 36 {
        return domain(format!("all 36 settings are required, got {present}"));
    }
    Ok(n)
}

/// Two-qubit density matrix satisfying the physicality invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    m: M4,
}

impl Serialize for DensityMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Parts {
            re: [[f64; 4]; 4],
            im: [[f64; 4]; 4],
        }
        let re = std::array::from_fn(|i| std::array::from_fn(|j| self.m[(i, j)].re));
        let im = std::array::from_fn(|i| std::array::from_fn(|j| self.m[(i, j)].im));
        Parts { re, im }.serialize(s)
    }
}

fn hermitian_part(m: &M4) -> M4 {
    (m + m.adjoint()) * c(0.5, 0.0)
}

fn eigen(m: &M4) -> (Vector4<f64>, M4) {
    let e = m.symmetric_eigen();
    (e.eigenvalues, e.eigenvectors)
}

impl DensityMatrix {
    /// Checks Hermiticity, unit trace and positivity.
    pub fn new(m: M4) -> Result<Self> {
        let asym = (m - m.adjoint()).iter().fold(0.0f64, |a, z| a.max(z.norm()));
        if asym > HERMITIAN_TOL {
            return domain(format!("matrix is not Hermitian (max |ρ − ρ†| = {asym:.3e})"));
        }
        let tr = m.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return domain(format!("trace {tr} differs from 1"));
        }
        let min = eigen(&hermitian_part(&m)).0.min();
        if min < -PSD_TOL {
            return domain(format!("negative eigenvalue {min:.3e}"));
        }
        Ok(Self { m })
    }

    pub fn pure(psi: &C4) -> Result<Self> {
        let n = psi.norm();
        if !(n > 0.0) {
            return domain("zero state vector");
        }
        let v = psi.unscale(n);
        Self::new(hermitian_part(&(v * v.adjoint())))
    }

    pub fn maximally_mixed() -> Self {
        Self { m: M4::identity() * c(0.25, 0.0) }
    }

    /// `p|ψ⟩⟨ψ| + (1 − p)I/4`.
    pub fn werner(psi: &C4, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return domain("mixing weight must lie in [0, 1]");
        }
        let pure = Self::pure(psi)?;
        Self::new(pure.m * c(p, 0.0) + M4::identity() * c(0.25 * (1.0 - p), 0.0))
    }

    pub fn matrix(&self) -> &M4 {
        &self.m
    }

    pub fn eigenvalues(&self) -> Vector4<f64> {
        eigen(&self.m).0
    }

    pub fn purity(&self) -> f64 {
        (self.m * self.m).trace().re
    }

    /// `⟨ψ|ρ|ψ⟩`.
    pub fn expectation(&self, psi: &C4) -> f64 {
        (psi.adjoint() * self.m * psi)[(0, 0)].re
    }
}

pub fn bell_phi_plus() -> C4 {
    let h = std::f64::consts::FRAC_1_SQRT_2;
    C4::new(c(h, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(h, 0.0))
}

/// `⟨ψ|ρ|ψ⟩` for a unit-norm target, clipped into `[0, 1]` when within
/// rounding of the boundary.
pub fn fidelity(rho: &DensityMatrix, target: &C4) -> Result<f64> {
    DensityMatrix::new(rho.m)?;
    let n = target.norm();
    if (n - 1.0).abs() > 1e-9 {
        return domain(format!("target state has norm {n}, expected 1"));
    }
    let z = (target.adjoint() * rho.m * target)[(0, 0)];
    if z.im.abs() > 1e-12 {
        return domain(format!("fidelity has imaginary part {:.3e}", z.im));
    }
    let f = z.re;
    if f < -1e-9 || f > 1.0 + 1e-9 {
        return domain(format!("fidelity {f} outside [0, 1]"));
    }
    Ok(f.clamp(0.0, 1.0))
}

/// `½ Σ|λ(ρ − σ)|`.
pub fn trace_distance(a: &DensityMatrix, b: &DensityMatrix) -> f64 {
    0.5 * eigen(&hermitian_part(&(a.m - b.m))).0.iter().map(|l| l.abs()).sum::<f64>()
}

/// Expected `N_v = 𝒩⟨Ψ_v|ρ|Ψ_v⟩` for the 16 projections.
pub fn expected_counts(rho: &DensityMatrix, scale: f64) -> Result<[f64; 16]> {
    if !(scale > 0.0) {
        return domain("count scale must be > 0");
    }
    let p = projections();
    Ok(std::array::from_fn(|v| scale * rho.expectation(&p[v]).max(0.0)))
}

/// The 36 settings with counts drawn from Poisson distributions whose means
/// split each `N_v` evenly over its phase settings. `seed = None` returns
/// the means themselves.
pub fn synthesize_settings(rho: &DensityMatrix, scale: f64, seed: Option<u64>, duration_s: f64) -> Result<Vec<ProjectionSetting>> {
    let n = expected_counts(rho, scale)?;
    all_settings()
        .into_iter()
        .enumerate()
        .map(|(k, mut s)| {
            let v = s.projection_index();
            let mean = n[v] / multiplicity(v) as f64;
            s.duration_s = duration_s;
            s.counts = match seed {
                None => mean,
                Some(seed) if mean > 0.0 => {
                    let mut rng = substream(seed, Domain::Tomography, k as u64, 0);
                    Poisson::new(mean).map_err(|e| Error::Domain(e.to_string()))?.sample(&mut rng).round()
                }
                Some(_) => 0.0,
            };
            Ok(s)
        })
        .collect()
}

/// Subtracts per-setting accidental estimates, clamping at zero. Returns
/// the corrected settings and a flag per clamped setting.
pub fn background_correct(settings: &[ProjectionSetting], accidentals: &[f64]) -> Result<(Vec<ProjectionSetting>, Vec<bool>)> {
    if settings.len() != accidentals.len() {
        return domain("one accidental estimate per setting is required");
    }
    if let Some(a) = accidentals.iter().find(|a| !(**a >= 0.0)) {
        return domain(format!("accidental estimate must be >= 0, got {a}"));
    }
    let mut flags = Vec::with_capacity(settings.len());
    let out = settings
        .iter()
        .zip(accidentals)
        .map(|(s, a)| {
            flags.push(s.counts < *a);
            ProjectionSetting { counts: (s.counts - a).max(0.0), ..*s }
        })
        .collect();
    Ok((out, flags))
}

fn pauli(k: usize) -> nalgebra::Matrix2<Complex64> {
    let (o, z, i) = (c(1.0, 0.0), c(0.0, 0.0), c(0.0, 1.0));
    match k {
        0 => nalgebra::Matrix2::new(o, z, z, o),
        1 => nalgebra::Matrix2::new(z, o, o, z),
        2 => nalgebra::Matrix2::new(z, -i, i, z),
        _ => nalgebra::Matrix2::new(o, z, z, -o),
    }
}

fn pauli_pair(a: usize, b: usize) -> M4 {
    pauli(a).kronecker(&pauli(b))
}

/// Linear inversion of the 16 projection counts. Returns the (possibly
/// unphysical) trace-one matrix and the count scale.
pub fn linear_inversion(n: &[f64; 16]) -> Result<(M4, f64)> {
    let proj = projections();
    let basis: Vec<M4> = (0..16).map(|k| pauli_pair(k / 4, k % 4)).collect();
    let a = SMatrix::<f64, 16, 16>::from_fn(|v, k| 0.25 * (proj[v].adjoint() * basis[k] * proj[v])[(0, 0)].re);
    let b = SVector::<f64, 16>::from_column_slice(n);
    let x = a.lu().solve(&b).ok_or_else(|| Error::Singular("projection set is not informationally complete".into()))?;
    let scale = x[0];
    if !(scale > 0.0) {
        return domain("projection counts imply a non-positive count scale");
    }
    let mut m = M4::zeros();
    for (k, bk) in basis.iter().enumerate() {
        m += bk * c(0.25 * x[k] / scale, 0.0);
    }
    Ok((hermitian_part(&m), scale))
}

/// Closest physical state in the eigenvalue sense: negative eigenvalues
/// are zeroed and their weight spread over the rest.
pub fn project_physical(m: &M4) -> Result<DensityMatrix> {
    let h = hermitian_part(m);
    let tr = h.trace().re;
    if !(tr > 0.0) {
        return domain("matrix has non-positive trace");
    }
    let (vals, vecs) = eigen(&(h * c(1.0 / tr, 0.0)));
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let mut lam: Vec<f64> = order.iter().map(|&k| vals[k]).collect();
    let mut acc = 0.0;
    let mut i = 4;
    while i > 0 && lam[i - 1] + acc / i as f64 <= 0.0 {
        acc += lam[i - 1];
        lam[i - 1] = 0.0;
        i -= 1;
    }
    for l in lam.iter_mut().take(i) {
        *l += acc / i as f64;
    }
    let mut out = M4::zeros();
    for (slot, &k) in order.iter().enumerate() {
        let v = vecs.column(k);
        out += v * v.adjoint() * c(lam[slot], 0.0);
    }
    let out = hermitian_part(&out);
    let tr = out.trace().re;
    DensityMatrix::new(out * c(1.0 / tr, 0.0))
}

/// Number of real parameters: 16 for `T`, one for `ln 𝒩`.
const NP: usize = 17;
type Params = SVector<f64, NP>;

/// Off-diagonal positions of the lower-triangular `T`.
const LOWER: [(usize, usize); 6] = [(1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2)];

fn t_from_params(x: &Params) -> M4 {
    let mut t = M4::zeros();
    for i in 0..4 {
        t[(i, i)] = c(x[i], 0.0);
    }
    for (k, &(i, j)) in LOWER.iter().enumerate() {
        t[(i, j)] = c(x[4 + 2 * k], x[5 + 2 * k]);
    }
    t
}

fn params_from_t(t: &M4, ln_scale: f64) -> Params {
    let mut x = Params::zeros();
    for i in 0..4 {
        x[i] = t[(i, i)].re;
    }
    for (k, &(i, j)) in LOWER.iter().enumerate() {
        x[4 + 2 * k] = t[(i, j)].re;
        x[5 + 2 * k] = t[(i, j)].im;
    }
    x[16] = ln_scale;
    x
}

/// `ρ = T†T / tr(T†T)`.
fn rho_from_t(t: &M4) -> M4 {
    let m = t.adjoint() * t;
    let tr = m.trace().re;
    hermitian_part(&(m * c(1.0 / tr, 0.0)))
}

/// Lower-triangular `T` with `T†T = ρ`, via Cholesky of the
/// index-reversed matrix. `ρ` is mixed slightly with `I/4` first so the
/// factorisation exists.
fn t_from_rho(rho: &M4) -> Result<M4> {
    let eps = 1e-8;
    let reg = rho * c(1.0 - eps, 0.0) + M4::identity() * c(0.25 * eps, 0.0);
    let rev = M4::from_fn(|i, j| reg[(3 - i, 3 - j)]);
    let l = Cholesky::new(rev).ok_or_else(|| Error::Singular("seed state is not positive definite".into()))?.unpack();
    let u = M4::from_fn(|i, j| l[(3 - i, 3 - j)]);
    Ok(u.adjoint())
}

/// Smallest model count used in the likelihood.
const M_FLOOR: f64 = 1e-9;

struct Problem {
    proj: [C4; 16],
    n: [f64; 16],
}

impl Problem {
    /// `Σ (m_v − N_v)² / 2m_v` with `m_v = 𝒩⟨Ψ_v|ρ|Ψ_v⟩`, and its gradient.
    fn eval(&self, x: &Params, grad: Option<&mut Params>) -> f64 {
        let t = t_from_params(x);
        let s: f64 = t.iter().map(|z| z.norm_sqr()).sum();
        let scale = x[16].exp();
        let mut f = 0.0;
        let mut g = Params::zeros();
        let want_grad = grad.is_some();
        for (psi, &nv) in self.proj.iter().zip(&self.n) {
            let a = t * psi;
            let p = a.norm_squared() / s;
            let raw = scale * p;
            let m = raw.max(M_FLOOR);
            f += (m - nv).powi(2) / (2.0 * m);
            if !want_grad || raw < M_FLOOR {
                continue;
            }
            let dl_dm = 0.5 * (1.0 - (nv / m).powi(2));
            g[16] += dl_dm * m;
            let dl_dp = dl_dm * scale;
            for i in 0..4 {
                let z = a[i].conj() * psi[i];
                g[i] += dl_dp * (2.0 * z.re - 2.0 * p * t[(i, i)].re) / s;
            }
            for (k, &(i, j)) in LOWER.iter().enumerate() {
                let z = a[i].conj() * psi[j];
                g[4 + 2 * k] += dl_dp * (2.0 * z.re - 2.0 * p * t[(i, j)].re) / s;
                g[5 + 2 * k] += dl_dp * (-2.0 * z.im - 2.0 * p * t[(i, j)].im) / s;
            }
        }
        if let Some(out) = grad {
            *out = g;
        }
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MleOptions {
    /// Total optimiser runs; the first starts at the unperturbed seed.
    pub restarts: usize,
    /// Standard deviation of the restart perturbation, relative to the
    /// largest `T` entry.
    pub perturbation: f64,
    pub max_iterations: usize,
    /// Relative likelihood change that ends a run.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self { restarts: 6, perturbation: 0.1, max_iterations: 5000, tolerance: 1e-10, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunDiagnostics {
    pub likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconstruction {
    pub rho: DensityMatrix,
    /// Fitted count scale 𝒩.
    pub scale: f64,
    pub likelihood: f64,
    /// Likelihood at the physical projection of the linear inversion.
    pub seed_likelihood: f64,
    /// Index of the winning restart.
    pub best_restart: usize,
    pub runs: Vec<RunDiagnostics>,
    /// `m_v − N_v` at the optimum.
    pub residuals: [f64; 16],
}

struct RunResult {
    x: Params,
    f: f64,
    iterations: usize,
    converged: bool,
}

/// BFGS with backtracking line search.
fn bfgs(problem: &Problem, x0: Params, opts: &MleOptions) -> RunResult {
    let mut x = x0;
    let mut g = Params::zeros();
    let mut f = problem.eval(&x, Some(&mut g));
    let mut h = SMatrix::<f64, NP, NP>::identity();
    let mut first = true;
    let mut g_new = Params::zeros();
    for it in 1..=opts.max_iterations {
        let mut d = -(h * g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            h = SMatrix::identity();
            d = -g;
            slope = -g.norm_squared();
        }
        if slope == 0.0 {
            return RunResult { x, f, iterations: it, converged: true };
        }
        let mut alpha = 1.0;
        let (x_new, f_new) = loop {
            let trial = x + d * alpha;
            let ft = problem.eval(&trial, None);
            if ft.is_finite() && ft <= f + 1e-4 * alpha * slope {
                break (trial, ft);
            }
            alpha *= 0.5;
            if alpha < 1e-20 {
                // no descent left at working precision
                let small = g.amax() <= 1e-6 * (1.0 + f.abs());
                return RunResult { x, f, iterations: it, converged: small };
            }
        };
        problem.eval(&x_new, Some(&mut g_new));
        let s = x_new - x;
        let y = g_new - g;
        let sy = s.dot(&y);
        if sy > 1e-14 * s.norm() * y.norm() {
            if first {
                h = SMatrix::identity() * (sy / y.norm_squared());
                first = false;
            }
            let rho = 1.0 / sy;
            let hy = h * y;
            h += (s * s.transpose()) * (rho * (1.0 + rho * y.dot(&hy))) - (hy * s.transpose() + s * hy.transpose()) * rho;
        }
        let df = f - f_new;
        x = x_new;
        f = f_new;
        g = g_new;
        if df <= opts.tolerance * f.abs().max(1e-6) {
            return RunResult { x, f, iterations: it, converged: true };
        }
    }
    RunResult { x, f, iterations: opts.max_iterations, converged: false }
}

/// Maximum-likelihood reconstruction from the 36 settings.
pub fn mle_reconstruct(settings: &[ProjectionSetting], opts: &MleOptions) -> Result<Reconstruction> {
    let n = aggregate(settings)?;
    mle_from_projections(&n, opts)
}

/// Maximum-likelihood reconstruction from aggregated projection counts.
pub fn mle_from_projections(n: &[f64; 16], opts: &MleOptions) -> Result<Reconstruction> {
    if n.iter().any(|v| !(*v >= 0.0)) {
        return domain("projection counts must be >= 0");
    }
    if !(n.iter().sum::<f64>() > 0.0) {
        return domain("total counts must be > 0");
    }
    if opts.restarts == 0 {
        return domain("at least one optimiser run is required");
    }
    let problem = Problem { proj: projections(), n: *n };
    let (lin, _) = linear_inversion(n)?;
    let seed_rho = project_physical(&lin)?;
    // 𝒩 starts at the sum over the complete {0,1}⊗{0,1} quadruple
    let scale0 = (n[0] + n[1] + n[4] + n[5]).max(1.0);
    let t0 = t_from_rho(seed_rho.matrix())?;
    let x0 = params_from_t(&t0, scale0.ln());
    let seed_likelihood = problem.eval(&params_from_t(&t_from_rho(seed_rho.matrix())?, scale0.ln()), None);
    let t_scale = t0.iter().fold(0.0f64, |a, z| a.max(z.norm()));

    let starts: Vec<Params> = (0..opts.restarts)
        .map(|k| {
            if k == 0 {
                return x0;
            }
            let mut rng = substream(opts.seed, Domain::Restart, k as u64, 0);
            let mut x = x0;
            for v in x.iter_mut().take(16) {
                let z: f64 = rng.sample(StandardNormal);
                *v += opts.perturbation * t_scale * z;
            }
            x
        })
        .collect();
    let runs: Vec<RunResult> = starts.par_iter().map(|x| bfgs(&problem, *x, opts)).collect();

    let best = runs
        .iter()
        .enumerate()
        .filter(|(_, r)| r.converged)
        .min_by(|a, b| a.1.f.total_cmp(&b.1.f).then(a.0.cmp(&b.0)))
        .map(|(k, _)| k);
    let pick = best.unwrap_or_else(|| {
        runs.iter().enumerate().min_by(|a, b| a.1.f.total_cmp(&b.1.f).then(a.0.cmp(&b.0))).map(|(k, _)| k).unwrap()
    });
    let r = &runs[pick];
    let t = t_from_params(&r.x);
    let rho = DensityMatrix::new(rho_from_t(&t))?;
    let scale = r.x[16].exp();
    let m = expected_counts(&rho, scale)?;
    let out = Reconstruction {
        rho,
        scale,
        likelihood: r.f,
        seed_likelihood,
        best_restart: pick,
        runs: runs.iter().map(|r| RunDiagnostics { likelihood: r.f, iterations: r.iterations, converged: r.converged }).collect(),
        residuals: std::array::from_fn(|v| m[v] - n[v]),
    };
    if best.is_none() {
        return Err(Error::NotConverged { restarts: opts.restarts, best_likelihood: out.likelihood, best: Box::new(out) });
    }
    Ok(out)
}

/// Bures-distributed random two-qubit state.
pub fn random_bures<R: Rng + ?Sized>(rng: &mut R) -> DensityMatrix {
    let mut ginibre = || M4::from_fn(|_, _| c(rng.sample(StandardNormal), rng.sample(StandardNormal)));
    let g = ginibre();
    let (q, r) = ginibre().qr().unpack();
    // fix the phases so the unitary is Haar distributed
    let d = M4::from_fn(|i, j| if i == j { r[(i, i)] / r[(i, i)].norm() } else { c(0.0, 0.0) });
    let u = q * d;
    let a = (M4::identity() + u) * g;
    let m = a * a.adjoint();
    let tr = m.trace().re;
    DensityMatrix::new(hermitian_part(&(m * c(1.0 / tr, 0.0)))).expect("Bures construction is physical")
}

/// Reads `basis_s,basis_i,theta_s,theta_i,counts,duration_s`.
pub fn read_settings_csv<R: BufRead>(r: R) -> Result<Vec<ProjectionSetting>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') || t.starts_with("basis_s") {
            continue;
        }
        let f: Vec<&str> = t.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("line {}: expected 6 fields, got {}", n + 1, f.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format(format!("line {}: bad {what} `{s}`", n + 1)))
        };
        let s = ProjectionSetting {
            basis_s: f[0].parse()?,
            basis_i: f[1].parse()?,
            theta_s: num(f[2], "theta_s")?,
            theta_i: num(f[3], "theta_i")?,
            counts: num(f[4], "counts")?,
            duration_s: num(f[5], "duration_s")?,
        };
        s.validate().map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        out.push(s);
    }
    Ok(out)
}

pub fn write_settings_csv<W: Write>(settings: &[ProjectionSetting], mut w: W) -> std::io::Result<()> {
    writeln!(w, "basis_s,basis_i,theta_s,theta_i,counts,duration_s")?;
    for s in settings {
        writeln!(w, "{},{},{},{},{},{}", s.basis_s.token(), s.basis_i.token(), s.theta_s, s.theta_i, s.counts, s.duration_s)?;
    }
    Ok(())
}

/// JSON summary of a reconstruction.
#[derive(Debug, Clone, Serialize)]
pub struct TomographyReport {
    pub rho: DensityMatrix,
    pub eigenvalues: [f64; 4],
    pub fidelity: f64,
    pub corrected_fidelity: Option<f64>,
    pub likelihood: f64,
    pub seed_likelihood: f64,
    pub scale: f64,
    pub best_restart: usize,
    pub runs: Vec<RunDiagnostics>,
    pub clamped_settings: usize,
}

impl TomographyReport {
    pub fn new(rec: &Reconstruction, target: &C4, corrected: Option<(&Reconstruction, usize)>) -> Result<Self> {
        let mut ev = [0.0; 4];
        let vals = rec.rho.eigenvalues();
        ev.copy_from_slice(vals.as_slice());
        ev.sort_by(|a, b| b.total_cmp(a));
        Ok(Self {
            rho: rec.rho.clone(),
            eigenvalues: ev,
            fidelity: fidelity(&rec.rho, target)?,
            corrected_fidelity: corrected.map(|(r, _)| fidelity(&r.rho, target)).transpose()?,
            likelihood: rec.likelihood,
            seed_likelihood: rec.seed_likelihood,
            scale: rec.scale,
            best_restart: rec.best_restart,
            runs: rec.runs.clone(),
            clamped_settings: corrected.map_or(0, |c| c.1),
        })
    }
}
