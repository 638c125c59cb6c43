//! Reference solver for linear mean-field FBSDEs of the form
//!
//! ```text
//! dX = [aX + āEX + cY + eL + f] ds + [σX + σ̄EX + γY + ηL + g] dW,   X(t) = X0
//! dY = −[βY + β̄EY + ρL + ρ̄EL + αX + ᾱEX + r] ds + L dW,             Y(T) = G X(T) + Ḡ EX(T)
//! ```
//!
//! Only the mean `(EX, EY)` is produced. The fluctuation decoupling `Y = 𝔓X + …`
//! is integrated with classical RK4 to express `EL` through `(EX, EY)`; the
//! resulting deterministic two-point problem is then solved by single
//! shooting. Coefficients are given on grid nodes and interpolated linearly.

use crate::error::{Error, Result};
use crate::linalg::{Lu, Mat};

/// Coefficients at one time. `X` has dimension `dx`, `Y` and `L` dimension `dy`.
#[derive(Clone, Debug)]
pub struct FbsdeCoeffs {
    pub a: Mat,
    pub abar: Mat,
    pub c: Mat,
    pub e: Mat,
    pub sigma: Mat,
    pub sigmabar: Mat,
    pub gamma: Mat,
    pub eta: Mat,
    pub alpha: Mat,
    pub alphabar: Mat,
    pub beta: Mat,
    pub betabar: Mat,
    pub rho: Mat,
    pub rhobar: Mat,
}

impl FbsdeCoeffs {
    /// All-zero coefficients of the given dimensions.
    pub fn zeros(dx: usize, dy: usize) -> Self {
        FbsdeCoeffs {
            a: Mat::zeros(dx, dx),
            abar: Mat::zeros(dx, dx),
            c: Mat::zeros(dx, dy),
            e: Mat::zeros(dx, dy),
            sigma: Mat::zeros(dx, dx),
            sigmabar: Mat::zeros(dx, dx),
            gamma: Mat::zeros(dx, dy),
            eta: Mat::zeros(dx, dy),
            alpha: Mat::zeros(dy, dx),
            alphabar: Mat::zeros(dy, dx),
            beta: Mat::zeros(dy, dy),
            betabar: Mat::zeros(dy, dy),
            rho: Mat::zeros(dy, dy),
            rhobar: Mat::zeros(dy, dy),
        }
    }

    fn fields(&self) -> [&Mat; 14] {
        [
            &self.a,
            &self.abar,
            &self.c,
            &self.e,
            &self.sigma,
            &self.sigmabar,
            &self.gamma,
            &self.eta,
            &self.alpha,
            &self.alphabar,
            &self.beta,
            &self.betabar,
            &self.rho,
            &self.rhobar,
        ]
    }

    fn lerp(&self, other: &Self, th: f64) -> Self {
        let l = |x: &Mat, y: &Mat| {
            let mut m = x.scale(1.0 - th);
            m.axpy(th, y);
            m
        };
        FbsdeCoeffs {
            a: l(&self.a, &other.a),
            abar: l(&self.abar, &other.abar),
            c: l(&self.c, &other.c),
            e: l(&self.e, &other.e),
            sigma: l(&self.sigma, &other.sigma),
            sigmabar: l(&self.sigmabar, &other.sigmabar),
            gamma: l(&self.gamma, &other.gamma),
            eta: l(&self.eta, &other.eta),
            alpha: l(&self.alpha, &other.alpha),
            alphabar: l(&self.alphabar, &other.alphabar),
            beta: l(&self.beta, &other.beta),
            betabar: l(&self.betabar, &other.betabar),
            rho: l(&self.rho, &other.rho),
            rhobar: l(&self.rhobar, &other.rhobar),
        }
    }
}

/// Deterministic forcing `(f, g, r)` at one time.
#[derive(Clone, Debug)]
pub struct Forcing {
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub r: Vec<f64>,
}

/// A linear mean-field FBSDE on `[t, T]` with coefficients at equally spaced nodes.
#[derive(Clone, Debug)]
pub struct LinearFbsde {
    pub t: f64,
    pub dt: f64,
    pub coeffs: Vec<FbsdeCoeffs>,
    /// Empty, or one entry per node.
    pub forcing: Vec<Forcing>,
    pub g: Mat,
    pub gbar: Mat,
    pub x0: Vec<f64>,
}

/// Mean trajectories at the coefficient nodes.
#[derive(Clone, Debug)]
pub struct MeanSolution {
    pub xbar: Vec<Vec<f64>>,
    pub ybar: Vec<Vec<f64>>,
    /// Smallest pivot of the shooting system.
    pub pivot: f64,
}

impl LinearFbsde {
    pub fn dims(&self) -> (usize, usize) {
        (self.coeffs[0].a.rows(), self.coeffs[0].beta.rows())
    }

    fn intervals(&self) -> usize {
        self.coeffs.len() - 1
    }

    fn check(&self) -> Result<()> {
        if self.coeffs.len() < 2 {
            return Err(Error::Shape("FBSDE needs at least two nodes".into()));
        }
        let (dx, dy) = self.dims();
        let want = FbsdeCoeffs::zeros(dx, dy);
        for (k, c) in self.coeffs.iter().enumerate() {
            for (got, w) in c.fields().iter().zip(want.fields()) {
                if got.shape() != w.shape() {
                    return Err(Error::Shape(format!(
                        "FBSDE coefficient at node {k} has shape {:?}, expected {:?}",
                        got.shape(),
                        w.shape()
                    )));
                }
            }
        }
        if self.g.shape() != (dy, dx) || self.gbar.shape() != (dy, dx) || self.x0.len() != dx {
            return Err(Error::Shape("FBSDE terminal or initial data has the wrong shape".into()));
        }
        let forcing_ok = self.forcing.is_empty()
            || (self.forcing.len() == self.coeffs.len()
                && self.forcing.iter().all(|f| f.f.len() == dx && f.g.len() == dx && f.r.len() == dy));
        if !forcing_ok {
            return Err(Error::Shape("FBSDE forcing has the wrong shape".into()));
        }
        Ok(())
    }

    /// Forcing at fine point `i` as `(f, g, r)`, zero when absent.
    fn forcing_at(&self, i: usize, sub: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let (dx, dy) = self.dims();
        if self.forcing.is_empty() {
            return (vec![0.0; dx], vec![0.0; dx], vec![0.0; dy]);
        }
        let k = (i / sub).min(self.intervals());
        let r = i % sub;
        let a = &self.forcing[k];
        if r == 0 || k >= self.intervals() {
            return (a.f.clone(), a.g.clone(), a.r.clone());
        }
        let b = &self.forcing[k + 1];
        let th = r as f64 / sub as f64;
        let l = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (1.0 - th) * p + th * q).collect();
        (l(&a.f, &b.f), l(&a.g, &b.g), l(&a.r, &b.r))
    }

    /// Coefficients at fine point `i` of a grid with `sub` points per interval.
    fn at_fine(&self, i: usize, sub: usize) -> FbsdeCoeffs {
        let k = i / sub;
        let r = i % sub;
        if r == 0 || k >= self.intervals() {
            return self.coeffs[k.min(self.intervals())].clone();
        }
        self.coeffs[k].lerp(&self.coeffs[k + 1], r as f64 / sub as f64)
    }

    /// `𝔓` at every fine point `t + i·dt/sub`, `i = 0..=N·sub`, integrated
    /// backward from `G` by RK4 with step `dt/sub` (midpoints fall on fine
    /// points of a grid twice as fine, so `sub` must be even; the stored
    /// values are at every second point of that grid).
    pub fn decoupling(&self, sub: usize) -> Result<Vec<Mat>> {
        self.check()?;
        assert!(sub >= 2 && sub.is_multiple_of(2), "substeps must be even");
        let fine = self.intervals() * sub;
        let h = self.dt / sub as f64;
        let mut out = vec![Mat::zeros(0, 0); fine + 1];
        let mut p = self.g.clone();
        out[fine] = p.clone();
        // Coefficients on the doubled grid so RK4 midpoints are exact nodes.
        let c2 = |i: usize| self.at_fine(i, 2 * sub);
        let mut next = c2(2 * fine);
        for i in (0..fine).rev() {
            let mid = c2(2 * i + 1);
            let cur = c2(2 * i);
            let f = |c: &FbsdeCoeffs, p: &Mat| riccati_rhs(c, p);
            let k1 = f(&next, &p)?;
            let k2 = f(&mid, &axpy(&p, 0.5 * h, &k1))?;
            let k3 = f(&mid, &axpy(&p, 0.5 * h, &k2))?;
            let k4 = f(&cur, &axpy(&p, h, &k3))?;
            let mut inc = k1;
            inc.axpy(2.0, &k2);
            inc.axpy(2.0, &k3);
            inc += &k4;
            p.axpy(h / 6.0, &inc);
            if !p.is_finite() {
                return Err(Error::ShootingFailure { pivot: f64::NAN });
            }
            out[i] = p.clone();
            next = cur;
        }
        Ok(out)
    }

    /// Solves the mean two-point boundary value problem with RK4 at step
    /// `dt/sub`. Fails with [`Error::ShootingFailure`] when the shooting
    /// matrix is numerically singular.
    pub fn solve_mean(&self, sub: usize) -> Result<MeanSolution> {
        let half = sub / 2;
        assert!(half >= 1);
        // 𝔓 on a grid of step dt/(2·half); the mean integrator uses step dt/half
        // so its midpoints land on stored points.
        let pp = self.decoupling(2 * half)?;
        let (dx, dy) = self.dims();
        let d = dx + dy + 1;
        let fine = self.intervals() * 2 * half;
        let hm = 2.0 * self.dt / (2 * half) as f64;
        let system = |i: usize| {
            let (f, g, r) = self.forcing_at(i, 2 * half);
            mean_matrix(&self.at_fine(i, 2 * half), &pp[i], dx, dy, &f, &g, &r)
        };
        let mut phi = Mat::identity(d);
        let mut phis = Vec::with_capacity(self.intervals() + 1);
        phis.push(phi.clone());
        let mut cur = system(0)?;
        let mut i = 0;
        while i < fine {
            let mid = system(i + 1)?;
            let nxt = system(i + 2)?;
            let k1 = &cur * &phi;
            let k2 = &mid * &axpy(&phi, 0.5 * hm, &k1);
            let k3 = &mid * &axpy(&phi, 0.5 * hm, &k2);
            let k4 = &nxt * &axpy(&phi, hm, &k3);
            let mut inc = k1;
            inc.axpy(2.0, &k2);
            inc.axpy(2.0, &k3);
            inc += &k4;
            phi.axpy(hm / 6.0, &inc);
            i += 2;
            if i % (2 * half) == 0 {
                phis.push(phi.clone());
            }
            cur = nxt;
        }
        let last = phis.last().expect("at least one node");
        let ghat = &self.g + &self.gbar;
        let (pxx, pxy) = (last.block(0, 0, dx, dx), last.block(0, dx, dx, dy));
        let (pyx, pyy) = (last.block(dx, 0, dy, dx), last.block(dx, dx, dy, dy));
        let lhs = &pyy - &(&ghat * &pxy);
        let (px1, py1) = (last.block(0, dx + dy, dx, 1), last.block(dx, dx + dy, dy, 1));
        let rhs = -&(&(&(&pyx - &(&ghat * &pxx)) * &Mat::column_vector(&self.x0)) + &(&py1 - &(&ghat * &px1)));
        let lu = Lu::factor(&lhs);
        let pivot = lu.min_pivot();
        let scale = lhs.max_abs().max(1.0);
        if !(pivot > 1e-12 * scale) {
            return Err(Error::ShootingFailure { pivot });
        }
        let y0 = lu.solve(&rhs);
        let mut z0 = self.x0.clone();
        z0.extend_from_slice(y0.as_slice());
        z0.push(1.0);
        let (xbar, ybar) = phis
            .iter()
            .map(|ph| {
                let z = ph.mul_vec(&z0);
                (z[..dx].to_vec(), z[dx..dx + dy].to_vec())
            })
            .unzip();
        Ok(MeanSolution { xbar, ybar, pivot })
    }
}

fn axpy(x: &Mat, a: f64, y: &Mat) -> Mat {
    let mut m = x.clone();
    m.axpy(a, y);
    m
}

/// `W𝔓` with `W = (I − 𝔓η)⁻¹`.
fn w_p(c: &FbsdeCoeffs, p: &Mat) -> Result<Mat> {
    if c.eta.is_zero() {
        return Ok(p.clone());
    }
    let dy = p.rows();
    let lu = Lu::factor(&(&Mat::identity(dy) - &(p * &c.eta)));
    if !(lu.det().abs() > 1e-12) {
        return Err(Error::ShootingFailure { pivot: lu.det() });
    }
    Ok(lu.solve(p))
}

/// `−d𝔓/ds`
fn riccati_rhs(c: &FbsdeCoeffs, p: &Mat) -> Result<Mat> {
    let wp = w_p(c, p)?;
    let mut r = &(p * &c.a) + &(&c.beta * p);
    r += &c.alpha;
    r += &(&(p * &c.c) * p);
    let l = &wp * &(&c.sigma + &(&c.gamma * p));
    r += &(&(&c.rho + &(p * &c.e)) * &l);
    Ok(r)
}

/// Generator of `d(EX, EY, 1)/ds` after eliminating `EL = W𝔓[(σ+σ̄)EX + γEY + g]`.
fn mean_matrix(c: &FbsdeCoeffs, p: &Mat, dx: usize, dy: usize, f: &[f64], g: &[f64], r: &[f64]) -> Result<Mat> {
    let wp = w_p(c, p)?;
    let lx = &wp * &(&c.sigma + &c.sigmabar);
    let ly = &wp * &c.gamma;
    let xx = &(&c.a + &c.abar) + &(&c.e * &lx);
    let xy = &c.c + &(&c.e * &ly);
    let rho = &c.rho + &c.rhobar;
    let yx = -&(&(&c.alpha + &c.alphabar) + &(&rho * &lx));
    let yy = -&(&(&c.beta + &c.betabar) + &(&rho * &ly));
    let lg = wp.mul_vec(g);
    let fx: Vec<f64> = f.iter().zip(c.e.mul_vec(&lg)).map(|(a, b)| a + b).collect();
    let fy: Vec<f64> = r.iter().zip(rho.mul_vec(&lg)).map(|(a, b)| -(a + b)).collect();
    let mut m = Mat::zeros(dx + dy + 1, dx + dy + 1);
    m.set_block(0, 0, &xx);
    m.set_block(0, dx, &xy);
    m.set_block(dx, 0, &yx);
    m.set_block(dx, dx, &yy);
    m.set_block(0, dx + dy, &Mat::column_vector(&fx));
    m.set_block(dx, dx + dy, &Mat::column_vector(&fy));
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant(c: FbsdeCoeffs, t: f64, t_end: f64, steps: usize, g: f64, x0: f64) -> LinearFbsde {
        LinearFbsde {
            t,
            dt: (t_end - t) / steps as f64,
            coeffs: vec![c; steps + 1],
            forcing: Vec::new(),
            g: Mat::scalar(g),
            gbar: Mat::scalar(0.0),
            x0: vec![x0],
        }
    }

    #[test]
    fn scalar_lq_riccati_closed_form() {
        // dx = −y ds, dy = 0 ds, y(1) = x(1): 𝔓(s) = 1/(2−s), x̄(s) = (2−s)/2.
        let mut c = FbsdeCoeffs::zeros(1, 1);
        c.c = Mat::scalar(-1.0);
        let f = constant(c, 0.0, 1.0, 20, 1.0, 1.0);
        let pp = f.decoupling(10).unwrap();
        for (i, p) in pp.iter().enumerate() {
            let s = i as f64 / 200.0;
            assert!((p[(0, 0)] - 1.0 / (2.0 - s)).abs() < 1e-10);
        }
        let m = f.solve_mean(10).unwrap();
        for (k, (x, y)) in m.xbar.iter().zip(&m.ybar).enumerate() {
            let s = k as f64 / 20.0;
            assert!((x[0] - (2.0 - s) / 2.0).abs() < 1e-10);
            assert!((y[0] - 0.5).abs() < 1e-10);
        }
    }

    #[test]
    fn diffusion_enters_through_rho() {
        // dx = σx dW, dY = −[ρL] ds + L dW, Y(T) = x(T): 𝔓' = −ρ𝔓σ, so
        // 𝔓(s) = exp(ρσ(T−s)) and EY(s) = 𝔓(s) Ex(s) with Ex ≡ x0.
        let mut c = FbsdeCoeffs::zeros(1, 1);
        c.sigma = Mat::scalar(0.5);
        c.rho = Mat::scalar(0.8);
        let f = constant(c, 0.0, 1.0, 10, 1.0, 2.0);
        let m = f.solve_mean(10).unwrap();
        for (k, y) in m.ybar.iter().enumerate() {
            let s = k as f64 / 10.0;
            assert!((y[0] - 2.0 * (0.4 * (1.0 - s)).exp()).abs() < 1e-10);
        }
    }

    #[test]
    fn affine_forcing() {
        // dx = 1 ds, dy = −x ds, y(1) = 0: x̄ = 1 + s, ȳ(s) = ∫_s^1 (1 + r) dr.
        let c = FbsdeCoeffs { alpha: Mat::scalar(1.0), ..FbsdeCoeffs::zeros(1, 1) };
        let mut f = constant(c, 0.0, 1.0, 10, 0.0, 1.0);
        f.forcing = vec![Forcing { f: vec![1.0], g: vec![0.0], r: vec![0.0] }; 11];
        let m = f.solve_mean(4).unwrap();
        for (k, (x, y)) in m.xbar.iter().zip(&m.ybar).enumerate() {
            let s = k as f64 / 10.0;
            assert!((x[0] - (1.0 + s)).abs() < 1e-12);
            assert!((y[0] - (1.5 - s - 0.5 * s * s)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_system() {
        let f = constant(FbsdeCoeffs::zeros(1, 1), 0.0, 1.0, 5, 0.0, 1.0);
        let m = f.solve_mean(4).unwrap();
        assert!(m.ybar.iter().all(|y| y[0] == 0.0));
        assert!(m.xbar.iter().all(|x| x[0] == 1.0));
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut f = constant(FbsdeCoeffs::zeros(1, 1), 0.0, 1.0, 5, 0.0, 1.0);
        f.coeffs[2].c = Mat::zeros(2, 2);
        assert!(matches!(f.solve_mean(4), Err(Error::Shape(_))));
    }

    #[test]
    fn singular_shooting_reported() {
        // Y(T) = x(T) with x' = −Y and Y' = 0 over a horizon where 1 − (T−t)·1 = 0:
        // shooting matrix 1 + (T−t)·(−1)·… vanishes at T − t = 1 when g = −1.
        let mut c = FbsdeCoeffs::zeros(1, 1);
        c.c = Mat::scalar(-1.0);
        let mut f = constant(c, 0.0, 1.0, 10, -1.0, 1.0);
        f.gbar = Mat::scalar(0.0);
        assert!(matches!(f.solve_mean(4), Err(Error::ShootingFailure { .. })));
    }
}
