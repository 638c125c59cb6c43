//! The follower's coupled two-time Riccati equations, the coefficient set
//! derived from them, and the follower's feedback law.
//!
//! The sweep is explicit backward Euler on the shared grid: row `k` of every
//! field is produced from row `k + 1` and the diagonal quantities at
//! `s_{k+1}`. Rows are advanced by [`FollowerSweep`] so that the leader can run
//! in lock step without the follower's triangle being kept in memory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{Lu, Mat};
use crate::problem::{Discretized, GridSpec, ProblemSpec};
use crate::twotime::{Storage, TriField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Any field entry above this magnitude counts as finite escape.
    pub escape_bound: f64,
    /// Smallest admissible eigenvalue of `S(s,s)`.
    pub eps_inv: f64,
    /// Smallest admissible `|det(I − 𝒫𝒟̄)|` and leader gain pivot.
    pub eps_det: f64,
    /// Integrate the `P̂` (and `𝒫̂`) flows directly as a cross-check.
    pub cross_check: bool,
    /// Which two-time blocks to keep.
    #[serde(skip, default = "full_storage")]
    pub storage: Storage,
}

fn full_storage() -> Storage {
    Storage::Full
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { escape_bound: 1e8, eps_inv: 1e-8, eps_det: 1e-10, cross_check: true, storage: Storage::Full }
    }
}

impl SolverOptions {
    /// Keeps only the diagonal and the listed columns.
    pub fn reduced(columns: &[usize]) -> Self {
        SolverOptions { storage: Storage::reduced(columns), ..Default::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Status {
    Solved,
    Escaped {
        s: f64,
        t: f64,
    },
    Singular {
        s: f64,
    },
    SingularIpd {
        s: f64,
        t: f64,
    },
    SingularRhat {
        t: f64,
    },
    /// An upstream stage failed first.
    NotReached,
}

impl Status {
    pub fn is_solved(&self) -> bool {
        matches!(self, Status::Solved)
    }

    pub fn describe(&self) -> String {
        match self {
            Status::Solved => "solved".into(),
            Status::Escaped { s, t } => format!("escaped at (s={s}, t={t})"),
            Status::Singular { s } => format!("singular S(s,s) at s={s}"),
            Status::SingularIpd { s, t } => format!("singular I - P Dbar at (s={s}, t={t})"),
            Status::SingularRhat { t } => format!("singular leader gain matrix at t={t}"),
            Status::NotReached => "not reached".into(),
        }
    }

    pub(crate) fn ensure(&self, stage: &str) -> Result<()> {
        if self.is_solved() {
            Ok(())
        } else {
            Err(Error::NotSolved { stage: stage.into(), status: self.describe() })
        }
    }
}

/// Diagonal quantities of the follower at one node.
#[derive(Clone, Debug)]
pub struct FollowerNode {
    pub p: Mat,
    pub phat: Mat,
    /// `S = R̂2(s,s) + D2ᵀP(s,s)D2`
    pub s: Mat,
    pub s_inv: Mat,
    /// `S⁻¹[B2ᵀP̂(s,s) + D2ᵀP(s,s)C]`
    pub kf: Mat,
    /// `S⁻¹D2ᵀP(s,s)D1`
    pub ku: Mat,
    pub h: Mat,
    pub hbar: Mat,
    pub f: Mat,
    pub fbar: Mat,
    pub g1: Mat,
    pub g2: Mat,
    pub gbar1: Mat,
    pub gbar2: Mat,
    pub rhat2: Mat,
    // Shared factors for the two-time symbols.
    b2_s_inv_t: Mat,
    d2_s_inv_t: Mat,
    e1: Mat,
}

/// Two-time follower symbols at one pair `(s_k, t_j)`.
#[derive(Clone, Debug)]
pub struct TwoTime {
    pub htilde: Mat,
    pub ftilde: Mat,
    pub k1: Mat,
    pub k2: Mat,
    pub kbar1: Mat,
    pub kbar2: Mat,
}

impl FollowerNode {
    /// Builds node `k` from `P(s_k,s_k)` and `Z(s_k,s_k)`. Returns `None` when
    /// `S(s,s)` fails the invertibility threshold.
    pub fn build(disc: &Discretized, k: usize, p: &Mat, z: &Mat, eps_inv: f64) -> Option<Self> {
        let (a, b1, b2, c, d1, d2) = (&disc.a[k], &disc.b1[k], &disc.b2[k], &disc.c[k], &disc.d1[k], &disc.d2[k]);
        let phat = p + z;
        let rhat2 = disc.rhat2(k, k);
        let d2t = d2.transpose();
        let b2t = b2.transpose();
        let s = &rhat2 + &(&(&d2t * p) * d2);
        let eig = s.sym_min_eigenvalue();
        if !(eig >= eps_inv) {
            return None;
        }
        let lu = Lu::factor(&s);
        if lu.min_pivot() == 0.0 {
            return None;
        }
        let s_inv = lu.inverse();
        let gamma = &(&b2t * &phat) + &(&(&d2t * p) * c);
        let kf = &s_inv * &gamma;
        let ku = &(&(&s_inv * &d2t) * p) * d1;
        let h = a - &(b2 * &kf);
        let hbar = c - &(d2 * &kf);
        let f = b1 - &(b2 * &ku);
        let fbar = d1 - &(d2 * &ku);
        let b2si = b2 * &s_inv;
        let d2si = d2 * &s_inv;
        let g1 = &b2si * &b2t;
        let g2 = &b2si * &d2t;
        let gbar1 = &d2si * &b2t;
        let gbar2 = &d2si * &d2t;
        let s_inv_t = s_inv.transpose();
        let b2_s_inv_t = b2 * &s_inv_t;
        let d2_s_inv_t = d2 * &s_inv_t;
        let e1 = &(&(&d1.transpose() * &p.transpose()) * d2) * &s_inv_t;
        Some(FollowerNode {
            p: p.clone(),
            phat,
            s,
            s_inv,
            kf,
            ku,
            h,
            hbar,
            f,
            fbar,
            g1,
            g2,
            gbar1,
            gbar2,
            rhat2,
            b2_s_inv_t,
            d2_s_inv_t,
            e1,
        })
    }

    /// `H̃, F̃, K1, K2, K̄1, K̄2` at `(s_k, t_j)` from `P(s_k,t_j)`, `Z(s_k,t_j)`.
    pub fn two_time(&self, disc: &Discretized, k: usize, p_kj: &Mat, z_kj: &Mat) -> TwoTime {
        let (a, b1, b2, c, d1, d2) = (&disc.a[k], &disc.b1[k], &disc.b2[k], &disc.c[k], &disc.d1[k], &disc.d2[k]);
        let pt = p_kj.transpose();
        let zt = z_kj.transpose();
        let b2t = b2.transpose();
        let w = &(&b2t * &pt) + &(&(&d2.transpose() * &pt) * c);
        let htilde = a - &(&self.b2_s_inv_t * &w);
        let ftilde = c - &(&self.d2_s_inv_t * &w);
        let k1 = &(&(&(&d1.transpose() * &pt) * c) + &(&b1.transpose() * &pt)) - &(&self.e1 * &w);
        let v = &b2t * &zt;
        let k2 = &(&b1.transpose() * &zt) - &(&self.e1 * &v);
        let kbar1 = &self.b2_s_inv_t * &v;
        let kbar2 = &self.d2_s_inv_t * &v;
        TwoTime { htilde, ftilde, k1, k2, kbar1, kbar2 }
    }

    /// The four multipliers of the follower's optimal response at this node.
    pub fn feedback(&self, disc: &Discretized, k: usize) -> FollowerFeedback {
        FollowerFeedback {
            gain_x: -&self.kf,
            gain_u: -&self.ku,
            gain_h: -(&self.s_inv * &disc.b2[k].transpose()),
            gain_l: -(&self.s_inv * &disc.d2[k].transpose()),
        }
    }
}

/// `v = gain_x·x + gain_u·u + gain_h·h + gain_l·l`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FollowerFeedback {
    pub gain_x: Mat,
    pub gain_u: Mat,
    pub gain_h: Mat,
    pub gain_l: Mat,
}

#[derive(Clone, Debug)]
pub struct FollowerSolution {
    pub grid: GridSpec,
    pub p: TriField,
    pub z: TriField,
    /// Stored as `P + Z`.
    pub phat: TriField,
    /// `S(s_k,s_k)` for every node reached by the sweep, indexed by `k`.
    pub s_diag: Vec<Option<Mat>>,
    pub status: Status,
    /// Largest `|P̂_direct − (P + Z)|` over all pairs.
    pub phat_residual: f64,
    /// Largest `‖RHS_P̂‖` seen, for scaling the residual.
    pub max_rhs: f64,
    pub max_abs_p: f64,
    pub max_abs_z: f64,
}

impl FollowerSolution {
    pub fn ensure_solved(&self) -> Result<()> {
        self.status.ensure("follower")
    }

    /// `P + Z` agrees with the direct `P̂` integration within `5Δ·max‖RHS‖`.
    pub fn phat_consistent(&self) -> bool {
        self.phat_residual <= 5.0 * self.grid.dt * self.max_rhs.max(f64::MIN_POSITIVE)
    }
}

/// Per-node follower coefficients; two-time symbols are produced on demand.
#[derive(Clone, Debug)]
pub struct FollowerCoefficients {
    pub nodes: Vec<FollowerNode>,
}

impl FollowerCoefficients {
    pub fn two_time(&self, disc: &Discretized, sol: &FollowerSolution, k: usize, j: usize) -> Result<TwoTime> {
        Ok(self.nodes[k].two_time(disc, k, &sol.p.get(k, j)?, &sol.z.get(k, j)?))
    }

    /// `Q̂2(s_k, t_j)`
    pub fn qhat2(&self, disc: &Discretized, k: usize, j: usize) -> Mat {
        disc.q2.at(k, j) + disc.qbar2.at(k, j)
    }

    /// `M̂2(t_j)`
    pub fn mhat2(&self, disc: &Discretized, j: usize) -> Mat {
        &disc.m2[j] + &disc.mbar2[j]
    }
}

/// Rolling-row backward sweep for the follower.
pub struct FollowerSweep<'a> {
    disc: &'a Discretized,
    opts: SolverOptions,
    /// Row currently held: `P, Z, P̂_direct` at `(s_k, t_j)`, `j = 0..=k`.
    pub row_k: usize,
    pub p_row: Vec<Mat>,
    pub z_row: Vec<Mat>,
    pdir_row: Vec<Mat>,
    pub nodes: Vec<Option<FollowerNode>>,
    pub sol: FollowerSolution,
}

impl<'a> FollowerSweep<'a> {
    pub fn new(disc: &'a Discretized, opts: &SolverOptions) -> Result<Self> {
        let grid = disc.grid;
        let n = disc.dims.n;
        let nn = grid.steps;
        let mk = |name| TriField::new(name, grid, n, n, opts.storage.clone());
        let mut sol = FollowerSolution {
            grid,
            p: mk("P"),
            z: mk("Z"),
            phat: mk("Phat"),
            s_diag: vec![None; grid.nodes()],
            status: Status::Solved,
            phat_residual: 0.0,
            max_rhs: 0.0,
            max_abs_p: 0.0,
            max_abs_z: 0.0,
        };
        let p_row: Vec<Mat> = disc.m2.clone();
        let z_row: Vec<Mat> = disc.mbar2.clone();
        let pdir_row: Vec<Mat> = p_row.iter().zip(&z_row).map(|(p, z)| p + z).collect();
        let mut sweep = FollowerSweep {
            disc,
            opts: opts.clone(),
            row_k: nn,
            p_row,
            z_row,
            pdir_row,
            nodes: vec![None; grid.nodes()],
            sol: {
                sol.status = Status::Solved;
                sol
            },
        };
        if let Err(st) = sweep.commit_row() {
            sweep.sol.status = st;
        }
        Ok(sweep)
    }

    pub fn failed(&self) -> bool {
        !self.sol.status.is_solved()
    }

    /// Stores the current row and builds the diagonal node.
    fn commit_row(&mut self) -> std::result::Result<(), Status> {
        let k = self.row_k;
        let grid = self.disc.grid;
        let bound = self.opts.escape_bound;
        for j in 0..=k {
            let (p, z) = (&self.p_row[j], &self.z_row[j]);
            let (mp, mz) = (p.max_abs(), z.max_abs());
            if !(mp <= bound && mz <= bound) {
                return Err(Status::Escaped { s: grid.time(k), t: grid.time(j) });
            }
            self.sol.max_abs_p = self.sol.max_abs_p.max(mp);
            self.sol.max_abs_z = self.sol.max_abs_z.max(mz);
            let phat = p + z;
            if self.opts.cross_check {
                let r = (&self.pdir_row[j] - &phat).max_abs();
                self.sol.phat_residual = self.sol.phat_residual.max(r);
            }
            let esc = |_| Status::Escaped { s: grid.time(k), t: grid.time(j) };
            self.sol.p.set(k, j, p).map_err(esc)?;
            self.sol.z.set(k, j, z).map_err(esc)?;
            self.sol.phat.set(k, j, &phat).map_err(esc)?;
        }
        let node = FollowerNode::build(self.disc, k, &self.p_row[k], &self.z_row[k], self.opts.eps_inv)
            .ok_or(Status::Singular { s: grid.time(k) })?;
        self.sol.s_diag[k] = Some(node.s.clone());
        self.nodes[k] = Some(node);
        Ok(())
    }

    /// Advances from row `k + 1` to row `k`. Returns `false` once finished or failed.
    pub fn step(&mut self) -> bool {
        if self.row_k == 0 || self.failed() {
            return false;
        }
        let k1 = self.row_k;
        let k = k1 - 1;
        let d = self.disc;
        let dt = d.grid.dt;
        let node = self.nodes[k1].as_ref().expect("node built at commit");
        let a = &d.a[k1];
        let at = a.transpose();
        let c = &d.c[k1];
        let ct = c.transpose();
        let b2 = &d.b2[k1];
        let d2 = &d.d2[k1];
        let b2kf = b2 * &node.kf;
        let d2kf = d2 * &node.kf;
        let mut new_p = Vec::with_capacity(k + 1);
        let mut new_z = Vec::with_capacity(k + 1);
        let mut new_pdir = Vec::with_capacity(if self.opts.cross_check { k + 1 } else { 0 });
        for j in 0..=k {
            let p = &self.p_row[j];
            let z = &self.z_row[j];
            let ctp = &ct * p;
            let ctpc = &ctp * c;
            let ctpd2kf = &ctp * &d2kf;
            let mut rp = &(&at * p) + &(p * a);
            rp += d.q2.at(k1, j);
            rp += &ctpc;
            rp -= &(p * &b2kf);
            rp -= &ctpd2kf;
            let mut rz = &(&at * z) + &(z * a);
            rz += d.qbar2.at(k1, j);
            rz -= &(z * &b2kf);
            if self.opts.cross_check {
                let ph = &self.pdir_row[j];
                let mut rh = &(&at * ph) + &(ph * a);
                rh += d.q2.at(k1, j);
                rh += d.qbar2.at(k1, j);
                rh += &ctpc;
                rh -= &(ph * &b2kf);
                rh -= &ctpd2kf;
                self.sol.max_rhs = self.sol.max_rhs.max(rh.max_abs());
                let mut next = ph.clone();
                next.axpy(dt, &rh);
                new_pdir.push(next);
            }
            let mut np = p.clone();
            np.axpy(dt, &rp);
            let mut nz = z.clone();
            nz.axpy(dt, &rz);
            new_p.push(np);
            new_z.push(nz);
        }
        self.p_row = new_p;
        self.z_row = new_z;
        if self.opts.cross_check {
            self.pdir_row = new_pdir;
        } else {
            self.pdir_row = self.p_row.iter().zip(&self.z_row).map(|(p, z)| p + z).collect();
        }
        self.row_k = k;
        if let Err(st) = self.commit_row() {
            self.sol.status = st;
            return false;
        }
        true
    }

    pub fn run(mut self) -> (FollowerSolution, Vec<Option<FollowerNode>>) {
        while self.step() {}
        (self.sol, self.nodes)
    }
}

/// Solves the follower's equations on the discretized problem.
pub fn solve_follower(disc: &Discretized, opts: &SolverOptions) -> Result<FollowerSolution> {
    Ok(FollowerSweep::new(disc, opts)?.run().0)
}

/// Discretizes `spec` on `grid` and solves with default options.
pub fn solve_follower_rdes(spec: &ProblemSpec, grid: &GridSpec) -> Result<FollowerSolution> {
    solve_follower(&Discretized::new(spec, grid)?, &SolverOptions::default())
}

/// Per-node coefficients from a solved follower (diagonal data suffices).
pub fn assemble_follower_coefficients(disc: &Discretized, sol: &FollowerSolution) -> Result<FollowerCoefficients> {
    sol.ensure_solved()?;
    let eps = SolverOptions::default().eps_inv;
    let nodes = (0..disc.grid.nodes())
        .map(|k| {
            let p = sol.p.get(k, k)?;
            let z = sol.z.get(k, k)?;
            FollowerNode::build(disc, k, &p, &z, eps).ok_or(Error::SingularS { s: disc.grid.time(k) })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FollowerCoefficients { nodes })
}

/// The follower's feedback multipliers at node `k`.
pub fn follower_feedback(disc: &Discretized, coeffs: &FollowerCoefficients, k: usize) -> FollowerFeedback {
    coeffs.nodes[k].feedback(disc, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{presets, Kernel, TimeFn};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn solve(spec: &ProblemSpec, dt: f64) -> (Discretized, FollowerSolution) {
        let grid = GridSpec::for_spec(spec, dt).unwrap();
        let disc = Discretized::new(spec, &grid).unwrap();
        let sol = solve_follower(&disc, &SolverOptions::default()).unwrap();
        (disc, sol)
    }

    #[test]
    fn scalar_analytic_diagonal_and_z() {
        let (disc, sol) = solve(&presets::scalar_analytic(), 1e-3);
        sol.ensure_solved().unwrap();
        let diag = sol.p.diagonal().unwrap();
        for (k, p) in diag.iter().enumerate() {
            let s = disc.grid.time(k);
            assert!((p[(0, 0)] - 1.0 / (2.0 - s)).abs() < 2e-4);
        }
        assert_eq!(sol.z.max_abs(), 0.0);
        // P does not depend on t here, so the column equals the diagonal.
        assert_eq!(sol.p.column(0).unwrap()[300], diag[300]);
    }

    #[test]
    fn scalar_analytic_coefficients_and_gains() {
        let (disc, sol) = solve(&presets::scalar_analytic(), 1e-3);
        let coeffs = assemble_follower_coefficients(&disc, &sol).unwrap();
        for k in [0, 250, 999] {
            let phat = sol.phat.get(k, k).unwrap();
            assert_relative_eq!(coeffs.nodes[k].h[(0, 0)], -phat[(0, 0)], epsilon = 1e-15);
            let fb = follower_feedback(&disc, &coeffs, k);
            assert_relative_eq!(fb.gain_x[(0, 0)], -phat[(0, 0)], epsilon = 1e-15);
            assert_eq!(fb.gain_h, Mat::scalar(-1.0));
            assert!(fb.gain_u.is_zero() && fb.gain_l.is_zero());
        }
    }

    #[test]
    fn zero_data_gives_zero_fields() {
        let mut spec = presets::case1();
        for k in [&mut spec.costs.q2, &mut spec.costs.qbar2] {
            *k = Kernel::scalar(0.0);
        }
        spec.terminal.m2 = TimeFn::constant(Mat::scalar(0.0));
        spec.terminal.mbar2 = TimeFn::constant(Mat::scalar(0.0));
        let (_, sol) = solve(&spec, 1e-2);
        sol.ensure_solved().unwrap();
        assert_eq!(sol.p.max_abs(), 0.0);
        assert_eq!(sol.z.max_abs(), 0.0);
    }

    #[test]
    fn terminal_conditions_exact() {
        let spec = presets::case2();
        let (disc, sol) = solve(&spec, 1e-2);
        let nn = disc.grid.steps;
        for j in 0..=nn {
            assert_eq!(sol.p.get(nn, j).unwrap(), disc.m2[j]);
            assert_eq!(sol.z.get(nn, j).unwrap(), disc.mbar2[j]);
        }
        assert_eq!(sol.p.diagonal().unwrap()[nn], disc.m2[nn]);
    }

    #[test]
    fn case1_solves_and_phat_consistent() {
        let (disc, sol) = solve(&presets::case1(), 1e-2);
        sol.ensure_solved().unwrap();
        assert!(sol.p.is_complete() && sol.z.is_complete());
        assert!(sol.phat_consistent());
        for k in 0..disc.grid.nodes() {
            for j in 0..=k {
                let sum = &sol.p.get(k, j).unwrap() + &sol.z.get(k, j).unwrap();
                assert!((&sum - &sol.phat.get(k, j).unwrap()).max_abs() <= 1e-12);
            }
        }
        let coeffs = assemble_follower_coefficients(&disc, &sol).unwrap();
        let fb = follower_feedback(&disc, &coeffs, 0);
        assert!(fb.gain_u.is_zero() && fb.gain_l.is_zero());
        assert!(coeffs.nodes.iter().all(|n| n.gbar2.is_zero() && n.g2.is_zero()));
    }

    #[test]
    fn absent_follower_channel() {
        let mut spec = presets::case2();
        spec.dynamics.b2 = TimeFn::constant(Mat::scalar(0.0));
        let (disc, sol) = solve(&spec, 1e-2);
        let coeffs = assemble_follower_coefficients(&disc, &sol).unwrap();
        for (k, node) in coeffs.nodes.iter().enumerate() {
            assert_eq!(node.h, disc.a[k]);
            assert!(node.g1.is_zero() && node.g2.is_zero());
            let tt = coeffs.two_time(&disc, &sol, k, k / 2).unwrap();
            assert!(tt.kbar1.is_zero() && tt.kbar2.is_zero());
        }
    }

    #[test]
    fn d2_zero_gives_fbar_d1() {
        let mut spec = presets::case2();
        spec.dynamics.d2 = TimeFn::constant(Mat::scalar(0.0));
        let (disc, sol) = solve(&spec, 1e-2);
        let coeffs = assemble_follower_coefficients(&disc, &sol).unwrap();
        for (k, node) in coeffs.nodes.iter().enumerate() {
            assert_eq!(node.fbar, disc.d1[k]);
            assert!(node.gbar2.is_zero() && node.g2.is_zero());
        }
    }

    #[test]
    fn singular_s_reported() {
        let mut spec = presets::scalar_analytic();
        spec.costs.r2 = Kernel::scalar(0.0);
        let (_, sol) = solve(&spec, 1e-2);
        assert_eq!(sol.status, Status::Singular { s: 1.0 });
        assert!(sol.ensure_solved().is_err());
    }

    #[test]
    fn tiny_control_weight_escapes() {
        let mut spec = presets::case1();
        spec.costs.r2 = Kernel::scalar(1e-6);
        spec.costs.q2 = Kernel::scalar(1e3);
        let (_, sol) = solve(&spec, 1e-2);
        assert!(matches!(sol.status, Status::Escaped { .. }), "{:?}", sol.status);
    }

    #[test]
    fn reduced_storage_matches_full() {
        let spec = presets::case2();
        let grid = GridSpec::for_spec(&spec, 1e-2).unwrap();
        let disc = Discretized::new(&spec, &grid).unwrap();
        let full = solve_follower(&disc, &SolverOptions::default()).unwrap();
        let red = solve_follower(&disc, &SolverOptions::reduced(&[0])).unwrap();
        assert_eq!(full.p.diagonal().unwrap(), red.p.diagonal().unwrap());
        assert_eq!(full.z.column(0).unwrap(), red.z.column(0).unwrap());
        assert!(red.p.get(10, 5).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn g2_equals_gbar1_transpose_for_scalar_control(
            d2 in -1.0f64..1.0, c in -1.0f64..1.0, q in 0.0f64..3.0,
        ) {
            let mut spec = presets::case2();
            spec.dynamics.d2 = TimeFn::constant(Mat::scalar(d2));
            spec.dynamics.c = TimeFn::constant(Mat::scalar(c));
            spec.costs.q2 = Kernel::scalar(q);
            let (disc, sol) = solve(&spec, 2e-2);
            let coeffs = assemble_follower_coefficients(&disc, &sol).unwrap();
            for node in &coeffs.nodes {
                prop_assert!((&node.g2 - &node.gbar1.transpose()).max_abs() < 1e-12);
            }
        }
    }
}
