//! The leader's augmented 2n-dimensional system, its coupled two-time Riccati
//! equations, the gain `Π`, and the closed-loop schedules obtained by
//! eliminating the follower's adjoint pair `(h, l)` on the diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::follower::{
    FollowerCoefficients, FollowerNode, FollowerSolution, FollowerSweep, SolverOptions, Status, TwoTime,
};
use crate::linalg::{Lu, Mat};
use crate::problem::{Discretized, GridSpec, ProblemSpec};
use crate::twotime::{write_schedule_csv, TriField};

/// Augmented blocks that depend on `s` only.
#[derive(Clone, Debug)]
pub struct LeaderNode {
    pub b: Mat,
    pub bbar: Mat,
    pub c: Mat,
    pub cbar: Mat,
    pub d: Mat,
    pub dbar: Mat,
}

impl LeaderNode {
    pub fn build(f: &FollowerNode, m1: usize) -> Self {
        let n = f.h.rows();
        let zn = Mat::zeros(n, n);
        let zb = Mat::zeros(n, m1);
        LeaderNode {
            b: Mat::vstack(&f.f, &zb),
            bbar: Mat::vstack(&f.fbar, &zb),
            c: Mat::blocks2(&zn, &-&f.g1, &f.g1.transpose(), &zn),
            cbar: Mat::blocks2(&zn, &-&f.gbar1, &f.g2.transpose(), &zn),
            d: Mat::blocks2(&zn, &-&f.g2, &f.gbar1.transpose(), &zn),
            dbar: Mat::blocks2(&zn, &-&f.gbar2, &f.gbar2.transpose(), &zn),
        }
    }
}

/// Augmented blocks at one pair `(s_k, t_j)`.
#[derive(Clone, Debug)]
pub struct PairBlocks {
    pub a1: Mat,
    pub a1bar: Mat,
    pub a2: Mat,
    pub a2bar: Mat,
    pub q: Mat,
    pub qbar: Mat,
    pub g: Mat,
    pub gbar: Mat,
    pub rhat: Mat,
}

impl PairBlocks {
    pub fn build(disc: &Discretized, k: usize, j: usize, f: &FollowerNode, tt: &TwoTime) -> Self {
        let n = disc.dims.n;
        let m1 = disc.dims.m1;
        let zn = Mat::zeros(n, n);
        let zg = Mat::zeros(m1, n);
        PairBlocks {
            a1: Mat::block_diag(&f.h, &tt.htilde),
            a1bar: Mat::block_diag(&f.hbar, &tt.ftilde),
            a2: Mat::block_diag(&zn, &-&tt.kbar1),
            a2bar: Mat::block_diag(&zn, &-&tt.kbar2),
            q: Mat::block_diag(disc.q1.at(k, j), &zn),
            qbar: Mat::block_diag(disc.qbar1.at(k, j), &zn),
            g: Mat::hstack(&zg, &tt.k1),
            gbar: Mat::hstack(&zg, &tt.k2),
            rhat: disc.rhat1(k, j),
        }
    }

    /// `𝒜̂1 = 𝒜1 + 𝒜2`
    pub fn a1hat(&self) -> Mat {
        &self.a1 + &self.a2
    }

    /// `𝒜̂2 = 𝒜̄1 + 𝒜̄2`
    pub fn a2hat(&self) -> Mat {
        &self.a1bar + &self.a2bar
    }
}

/// `ℳ(t_j)`, `ℳ̄(t_j)`
pub fn terminal_blocks(disc: &Discretized, j: usize) -> (Mat, Mat) {
    let zn = Mat::zeros(disc.dims.n, disc.dims.n);
    (Mat::block_diag(&disc.m1[j], &zn), Mat::block_diag(&disc.mbar1[j], &zn))
}

/// Augmented coefficients over the triangle. Pair blocks are produced on
/// demand from the follower fields; node blocks are stored.
pub struct LeaderCoefficients<'a> {
    pub disc: &'a Discretized,
    pub follower: &'a FollowerSolution,
    pub fcoeffs: &'a FollowerCoefficients,
    pub nodes: Vec<LeaderNode>,
}

impl LeaderCoefficients<'_> {
    pub fn pair(&self, k: usize, j: usize) -> Result<PairBlocks> {
        let tt = self.fcoeffs.two_time(self.disc, self.follower, k, j)?;
        Ok(PairBlocks::build(self.disc, k, j, &self.fcoeffs.nodes[k], &tt))
    }
}

pub fn assemble_leader<'a>(
    disc: &'a Discretized,
    follower: &'a FollowerSolution,
    fcoeffs: &'a FollowerCoefficients,
) -> Result<LeaderCoefficients<'a>> {
    follower.ensure_solved()?;
    let (n, m1) = (disc.dims.n, disc.dims.m1);
    if fcoeffs.nodes.len() != disc.grid.nodes() {
        return Err(Error::Shape("follower coefficients do not cover the grid".into()));
    }
    let nodes: Vec<LeaderNode> = fcoeffs.nodes.iter().map(|f| LeaderNode::build(f, m1)).collect();
    for (k, nb) in nodes.iter().enumerate() {
        let shapes = [
            ("B", nb.b.shape(), (2 * n, m1)),
            ("Bbar", nb.bbar.shape(), (2 * n, m1)),
            ("C", nb.c.shape(), (2 * n, 2 * n)),
            ("Cbar", nb.cbar.shape(), (2 * n, 2 * n)),
            ("D", nb.d.shape(), (2 * n, 2 * n)),
            ("Dbar", nb.dbar.shape(), (2 * n, 2 * n)),
        ];
        for (name, got, want) in shapes {
            if got != want {
                return Err(Error::Shape(format!("{name} at node {k} is {got:?}, expected {want:?}")));
            }
        }
    }
    Ok(LeaderCoefficients { disc, follower, fcoeffs, nodes })
}

#[derive(Clone, Debug)]
pub struct LeaderSolution {
    pub grid: GridSpec,
    pub p: TriField,
    pub z: TriField,
    /// Stored as `𝒫 + 𝒵`.
    pub phat: TriField,
    /// `Π(t_k,t_k)` (m1×2n) at every node reached.
    pub pi: Vec<Option<Mat>>,
    pub status: Status,
    pub min_det_ipd: f64,
    pub min_gain_pivot: f64,
    /// Largest `|𝒫̂_direct − (𝒫 + 𝒵)|` over the triangle.
    pub phat_residual: f64,
    /// Largest `‖Λ1‖ + ‖Λ2‖` seen.
    pub max_lambda: f64,
    pub max_abs_p: f64,
    pub max_abs_z: f64,
}

impl LeaderSolution {
    pub fn ensure_solved(&self) -> Result<()> {
        self.status.ensure("leader")
    }

    pub fn phat_consistent(&self) -> bool {
        self.phat_residual <= 5.0 * self.grid.dt * self.max_lambda.max(f64::MIN_POSITIVE)
    }

    /// `Π̄ = Π[:, 0..n]` at every node.
    pub fn pibar(&self) -> Result<Vec<Mat>> {
        (0..self.grid.nodes()).map(|k| leader_gain(self, k).map(|(_, pb)| pb)).collect()
    }
}

/// `(Π(t_k,t_k), Π̄(t_k,t_k))`
pub fn leader_gain(sol: &LeaderSolution, k: usize) -> Result<(Mat, Mat)> {
    let pi = sol.pi.get(k).and_then(Option::as_ref).ok_or(Error::SingularRhat { t: sol.grid.time(k) })?;
    let n = pi.cols() / 2;
    Ok((pi.clone(), pi.block(0, 0, pi.rows(), n)))
}

/// Diagonal solve at one node: `W𝒫` and `Π`.
struct NodeGain {
    wp: Mat,
    pi: Mat,
    det: f64,
    pivot: f64,
}

fn node_gain(
    nb: &LeaderNode,
    pb: &PairBlocks,
    p: &Mat,
    phat: &Mat,
    eps: f64,
) -> std::result::Result<NodeGain, (bool, f64)> {
    let dim = p.rows();
    let ipd = &Mat::identity(dim) - &(p * &nb.dbar);
    let lu = Lu::factor(&ipd);
    let det = lu.det();
    if !(det.abs() >= eps) {
        return Err((true, det));
    }
    let wp = lu.solve(p);
    let bbt = nb.bbar.transpose();
    let gm = &pb.rhat + &(&(&bbt * &wp) * &nb.bbar);
    let glu = Lu::factor(&gm);
    let pivot = glu.min_pivot();
    if !(pivot >= eps) {
        return Err((false, pivot));
    }
    let rhs = &(&nb.b.transpose() * phat) + &(&(&bbt * &wp) * &(&pb.a2hat() + &(&nb.cbar * phat)));
    Ok(NodeGain { wp, pi: glu.solve(&rhs), det, pivot })
}

/// `(Λ1, Λ2)` at one pair, given `W𝒫` there and `Π` on the diagonal.
fn lambdas(nb: &LeaderNode, pb: &PairBlocks, pi: &Mat, bbar_pi: &Mat, p: &Mat, z: &Mat, wp: &Mat) -> (Mat, Mat) {
    let ph = p + z;
    let a1t = pb.a1.transpose();
    let left1 = &pb.a1bar.transpose() + &(p * &nb.d);
    let left1wp = &left1 * wp;
    let mid1 = &(&pb.a1bar - bbar_pi) + &(&nb.cbar * p);
    let mut l1 = &(&a1t * p) + &(p * &pb.a1);
    l1 += &pb.q;
    l1 += &(&(p * &nb.c) * p);
    l1 += &(&left1wp * &mid1);
    l1 -= &(&(&pb.g.transpose() + &(p * &nb.b)) * pi);

    let mut l2 = &(&a1t * z) + &(&pb.a2.transpose() * &ph);
    l2 += &(p * &pb.a2);
    l2 += &(z * &pb.a1hat());
    l2 += &pb.qbar;
    l2 += &(&(p * &nb.c) * z);
    l2 += &(&(z * &nb.c) * &ph);
    l2 += &(&left1wp * &(&pb.a2bar + &(&nb.cbar * z)));
    let left2 = &pb.a2bar.transpose() + &(z * &nb.d);
    let mid2 = &(&pb.a2hat() + &(&nb.cbar * &ph)) - bbar_pi;
    l2 += &(&(&left2 * wp) * &mid2);
    l2 -= &(&(&pb.gbar.transpose() + &(z * &nb.b)) * pi);
    (l1, l2)
}

/// Rolling-row backward sweep for the leader.
pub struct LeaderSweep<'a> {
    disc: &'a Discretized,
    opts: SolverOptions,
    pub row_k: usize,
    p_row: Vec<Mat>,
    z_row: Vec<Mat>,
    pdir_row: Vec<Mat>,
    nodes: Vec<Option<LeaderNode>>,
    pub sol: LeaderSolution,
}

impl<'a> LeaderSweep<'a> {
    /// Terminal row. `fnode` and `(fp, fz)` are the follower's node and
    /// diagonal values at `s_N`.
    pub fn new(disc: &'a Discretized, opts: &SolverOptions, fnode: &FollowerNode, fp: &Mat, fz: &Mat) -> Self {
        let grid = disc.grid;
        let dim = 2 * disc.dims.n;
        let mk = |name| TriField::new(name, grid, dim, dim, opts.storage.clone());
        let (p_row, z_row): (Vec<Mat>, Vec<Mat>) = (0..grid.nodes()).map(|j| terminal_blocks(disc, j)).unzip();
        let pdir_row = p_row.iter().zip(&z_row).map(|(p, z)| p + z).collect();
        let mut sweep = LeaderSweep {
            disc,
            opts: opts.clone(),
            row_k: grid.steps,
            p_row,
            z_row,
            pdir_row,
            nodes: vec![None; grid.nodes()],
            sol: LeaderSolution {
                grid,
                p: mk("leader P"),
                z: mk("leader Z"),
                phat: mk("leader Phat"),
                pi: vec![None; grid.nodes()],
                status: Status::Solved,
                min_det_ipd: f64::INFINITY,
                min_gain_pivot: f64::INFINITY,
                phat_residual: 0.0,
                max_lambda: 0.0,
                max_abs_p: 0.0,
                max_abs_z: 0.0,
            },
        };
        sweep.commit(fnode, fp, fz);
        sweep
    }

    pub fn failed(&self) -> bool {
        !self.sol.status.is_solved()
    }

    /// Stores the current row and computes `Π` at its diagonal node.
    /// `fnode`, `fp`, `fz` are the follower's data at `(s_k, s_k)`.
    pub fn commit(&mut self, fnode: &FollowerNode, fp: &Mat, fz: &Mat) {
        if let Err(st) = self.try_commit(fnode, fp, fz) {
            self.sol.status = st;
        }
    }

    fn try_commit(&mut self, fnode: &FollowerNode, fp: &Mat, fz: &Mat) -> std::result::Result<(), Status> {
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
        let nb = LeaderNode::build(fnode, self.disc.dims.m1);
        let tt = fnode.two_time(self.disc, k, fp, fz);
        let pb = PairBlocks::build(self.disc, k, k, fnode, &tt);
        let p = &self.p_row[k];
        let phat = p + &self.z_row[k];
        let g = node_gain(&nb, &pb, p, &phat, self.opts.eps_det).map_err(|(ipd, v)| {
            if ipd {
                self.sol.min_det_ipd = self.sol.min_det_ipd.min(v.abs());
                Status::SingularIpd { s: grid.time(k), t: grid.time(k) }
            } else {
                self.sol.min_gain_pivot = self.sol.min_gain_pivot.min(v);
                Status::SingularRhat { t: grid.time(k) }
            }
        })?;
        self.sol.min_det_ipd = self.sol.min_det_ipd.min(g.det.abs());
        self.sol.min_gain_pivot = self.sol.min_gain_pivot.min(g.pivot);
        let _ = g.wp;
        self.sol.pi[k] = Some(g.pi);
        self.nodes[k] = Some(nb);
        Ok(())
    }

    /// Computes row `k = row_k − 1` from row `k + 1`. `fnode`, `fp`, `fz` are
    /// the follower's node at `s_{k+1}` and its row `P(s_{k+1}, t_j)`,
    /// `Z(s_{k+1}, t_j)` for `j = 0..=k+1`. Call [`commit`](Self::commit) next.
    pub fn advance(&mut self, fnode: &FollowerNode, fp: &[Mat], fz: &[Mat]) -> bool {
        if self.row_k == 0 || self.failed() {
            return false;
        }
        let k1 = self.row_k;
        let k = k1 - 1;
        let disc = self.disc;
        let grid = disc.grid;
        let dt = grid.dt;
        let nb = self.nodes[k1].as_ref().expect("node committed");
        let pi = self.sol.pi[k1].as_ref().expect("gain committed");
        let bbar_pi = &nb.bbar * pi;
        let dim = 2 * disc.dims.n;
        let eye = Mat::identity(dim);
        let dbar_zero = nb.dbar.is_zero();
        let mut new_p = Vec::with_capacity(k + 1);
        let mut new_z = Vec::with_capacity(k + 1);
        let mut new_pdir = Vec::with_capacity(k + 1);
        for j in 0..=k {
            let tt = fnode.two_time(disc, k1, &fp[j], &fz[j]);
            let pb = PairBlocks::build(disc, k1, j, fnode, &tt);
            let p = &self.p_row[j];
            let z = &self.z_row[j];
            let wp = if dbar_zero {
                self.sol.min_det_ipd = self.sol.min_det_ipd.min(1.0);
                p.clone()
            } else {
                let lu = Lu::factor(&(&eye - &(p * &nb.dbar)));
                let det = lu.det().abs();
                self.sol.min_det_ipd = self.sol.min_det_ipd.min(det);
                if !(det >= self.opts.eps_det) {
                    self.sol.status = Status::SingularIpd { s: grid.time(k1), t: grid.time(j) };
                    return false;
                }
                lu.solve(p)
            };
            let (l1, l2) = lambdas(nb, &pb, pi, &bbar_pi, p, z, &wp);
            self.sol.max_lambda = self.sol.max_lambda.max(l1.max_abs() + l2.max_abs());
            if self.opts.cross_check {
                let pd = &self.pdir_row[j];
                let zd = pd - p;
                let (_, l2d) = lambdas(nb, &pb, pi, &bbar_pi, p, &zd, &wp);
                let mut next = pd.clone();
                next.axpy(dt, &(&l1 + &l2d));
                new_pdir.push(next);
            }
            let mut np = p.clone();
            np.axpy(dt, &l1);
            let mut nz = z.clone();
            nz.axpy(dt, &l2);
            new_p.push(np);
            new_z.push(nz);
        }
        self.p_row = new_p;
        self.z_row = new_z;
        self.pdir_row = if self.opts.cross_check {
            new_pdir
        } else {
            self.p_row.iter().zip(&self.z_row).map(|(p, z)| p + z).collect()
        };
        self.row_k = k;
        true
    }
}

/// Solves the leader's equations against a fully stored follower solution.
pub fn solve_leader_rdes(lc: &LeaderCoefficients<'_>, opts: &SolverOptions) -> Result<LeaderSolution> {
    let disc = lc.disc;
    let fs = lc.follower;
    let nn = disc.grid.steps;
    let row = |k: usize| -> Result<(Vec<Mat>, Vec<Mat>)> {
        let p = (0..=k).map(|j| fs.p.get(k, j)).collect::<Result<Vec<_>>>()?;
        let z = (0..=k).map(|j| fs.z.get(k, j)).collect::<Result<Vec<_>>>()?;
        Ok((p, z))
    };
    let (p, z) = row(nn)?;
    let mut sweep = LeaderSweep::new(disc, opts, &lc.fcoeffs.nodes[nn], &p[nn], &z[nn]);
    let (mut fp, mut fz) = (p, z);
    while sweep.row_k > 0 && !sweep.failed() {
        let k1 = sweep.row_k;
        if !sweep.advance(&lc.fcoeffs.nodes[k1], &fp, &fz) {
            break;
        }
        let k = k1 - 1;
        (fp, fz) = row(k)?;
        sweep.commit(&lc.fcoeffs.nodes[k], &fp[k], &fz[k]);
    }
    Ok(sweep.sol)
}

/// Follower and leader solved in lock step, one row at a time.
pub fn solve_joint(
    disc: &Discretized,
    opts: &SolverOptions,
) -> Result<(FollowerSolution, Option<FollowerCoefficients>, LeaderSolution)> {
    let mut fsweep = FollowerSweep::new(disc, opts)?;
    let nn = disc.grid.steps;
    let dummy_leader = |st| LeaderSolution {
        grid: disc.grid,
        p: TriField::new("leader P", disc.grid, 0, 0, crate::twotime::Storage::reduced(&[])),
        z: TriField::new("leader Z", disc.grid, 0, 0, crate::twotime::Storage::reduced(&[])),
        phat: TriField::new("leader Phat", disc.grid, 0, 0, crate::twotime::Storage::reduced(&[])),
        pi: vec![None; disc.grid.nodes()],
        status: st,
        min_det_ipd: f64::NAN,
        min_gain_pivot: f64::NAN,
        phat_residual: f64::NAN,
        max_lambda: f64::NAN,
        max_abs_p: f64::NAN,
        max_abs_z: f64::NAN,
    };
    if fsweep.failed() {
        return Ok((fsweep.sol, None, dummy_leader(Status::NotReached)));
    }
    let mut lsweep = {
        let node = fsweep.nodes[nn].as_ref().expect("terminal node");
        LeaderSweep::new(disc, opts, node, &fsweep.p_row[nn], &fsweep.z_row[nn])
    };
    while fsweep.row_k > 0 && !lsweep.failed() {
        let k1 = fsweep.row_k;
        {
            let node = fsweep.nodes[k1].as_ref().expect("node");
            if !lsweep.advance(node, &fsweep.p_row, &fsweep.z_row) {
                break;
            }
        }
        if !fsweep.step() {
            break;
        }
        let k = fsweep.row_k;
        let node = fsweep.nodes[k].as_ref().expect("node");
        lsweep.commit(node, &fsweep.p_row[k], &fsweep.z_row[k]);
    }
    let unfinished = fsweep.row_k > 0;
    let (mut fsol, nodes) = (fsweep.sol, fsweep.nodes);
    if unfinished && fsol.status.is_solved() {
        // The leader stopped the joint sweep before the follower reached t0.
        fsol.status = Status::NotReached;
    }
    if !fsol.status.is_solved() {
        let mut l = lsweep.sol;
        if l.status.is_solved() {
            l.status = Status::NotReached;
        }
        return Ok((fsol, None, l));
    }
    let fco = FollowerCoefficients { nodes: nodes.into_iter().map(|n| n.expect("all nodes")).collect() };
    Ok((fsol, Some(fco), lsweep.sol))
}

/// Diagonal closed-loop schedules, indexed by node.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClosedLoopGains {
    pub grid: GridSpec,
    /// `u* = Γu x` with `Γu = −Π̄`.
    pub gamma_u: Vec<Mat>,
    /// `v* = Γv x`.
    pub gamma_v: Vec<Mat>,
    /// `h = Θh x`
    pub theta_h: Vec<Mat>,
    /// `l = Θl x`
    pub theta_l: Vec<Mat>,
    /// `z = Θz x`, the leader's own adjoint diffusion on the diagonal.
    pub theta_z: Vec<Mat>,
    pub psi: Vec<Mat>,
    pub psibar: Vec<Mat>,
    /// `Ψ − G1Θh − G2Θl`
    pub psi_tilde: Vec<Mat>,
    /// `Ψ̄ − Ḡ1Θh − Ḡ2Θl`
    pub psibar_tilde: Vec<Mat>,
}

pub fn closed_loop_gains(
    disc: &Discretized,
    fcoeffs: &FollowerCoefficients,
    lsol: &LeaderSolution,
) -> Result<ClosedLoopGains> {
    lsol.ensure_solved()?;
    let n = disc.dims.n;
    let nodes = disc.grid.nodes();
    let mut g = ClosedLoopGains {
        grid: disc.grid,
        gamma_u: Vec::with_capacity(nodes),
        gamma_v: Vec::with_capacity(nodes),
        theta_h: Vec::with_capacity(nodes),
        theta_l: Vec::with_capacity(nodes),
        theta_z: Vec::with_capacity(nodes),
        psi: Vec::with_capacity(nodes),
        psibar: Vec::with_capacity(nodes),
        psi_tilde: Vec::with_capacity(nodes),
        psibar_tilde: Vec::with_capacity(nodes),
    };
    for k in 0..nodes {
        let d = diagonal_data(disc, fcoeffs, lsol, k)?;
        let f = &fcoeffs.nodes[k];
        let fb = f.feedback(disc, k);
        let pibar = d.pi.block(0, 0, d.pi.rows(), n);
        let gu = -&pibar;
        let th = d.phat.block(n, 0, n, n);
        let tl = d.ld.block(n, 0, n, n);
        let tz = d.ld.block(0, 0, n, n);
        let gv = &(&(&fb.gain_x + &(&fb.gain_u * &gu)) + &(&fb.gain_h * &th)) + &(&fb.gain_l * &tl);
        let psi = &f.h - &(&f.f * &pibar);
        let psibar = &f.hbar - &(&f.fbar * &pibar);
        let psi_tilde = &(&psi - &(&f.g1 * &th)) - &(&f.g2 * &tl);
        let psibar_tilde = &(&psibar - &(&f.gbar1 * &th)) - &(&f.gbar2 * &tl);
        g.gamma_u.push(gu);
        g.gamma_v.push(gv);
        g.theta_h.push(th);
        g.theta_l.push(tl);
        g.theta_z.push(tz);
        g.psi.push(psi);
        g.psibar.push(psibar);
        g.psi_tilde.push(psi_tilde);
        g.psibar_tilde.push(psibar_tilde);
    }
    Ok(g)
}

/// Leader quantities on the diagonal at node `k`.
pub struct DiagonalData {
    pub nb: LeaderNode,
    pub pb: PairBlocks,
    pub p: Mat,
    pub phat: Mat,
    pub pi: Mat,
    /// `L(t,t) = Ld·X(t)`
    pub ld: Mat,
}

pub fn diagonal_data(
    disc: &Discretized,
    fcoeffs: &FollowerCoefficients,
    lsol: &LeaderSolution,
    k: usize,
) -> Result<DiagonalData> {
    let f = &fcoeffs.nodes[k];
    let nb = LeaderNode::build(f, disc.dims.m1);
    let tt = f.two_time(disc, k, &f.p, &(&f.phat - &f.p));
    let pb = PairBlocks::build(disc, k, k, f, &tt);
    let p = lsol.p.get(k, k)?;
    let phat = lsol.phat.get(k, k)?;
    let (pi, _) = leader_gain(lsol, k)?;
    let dim = p.rows();
    let wp = Lu::factor(&(&Mat::identity(dim) - &(&p * &nb.dbar))).solve(&p);
    let mid = &(&pb.a2hat() - &(&nb.bbar * &pi)) + &(&nb.cbar * &phat);
    let ld = &wp * &mid;
    Ok(DiagonalData { nb, pb, p, phat, pi, ld })
}

/// `‖ℬᵀ𝒫̂ + ℬ̄ᵀLd − ℛ̂Π‖` restricted to `X = (x, 0)`: the leader's first-order
/// condition evaluated on the diagonal.
pub fn optimality_residual(d: &DiagonalData, n: usize) -> f64 {
    let r = &(&(&d.nb.b.transpose() * &d.phat) + &(&d.nb.bbar.transpose() * &d.ld)) - &(&d.pb.rhat * &d.pi);
    r.block(0, 0, r.rows(), n).max_abs()
}

impl ClosedLoopGains {
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        let nodes = self.grid.nodes();
        let cols: [(&str, &Vec<Mat>); 9] = [
            ("gamma_u", &self.gamma_u),
            ("gamma_v", &self.gamma_v),
            ("theta_h", &self.theta_h),
            ("theta_l", &self.theta_l),
            ("theta_z", &self.theta_z),
            ("psi", &self.psi),
            ("psibar", &self.psibar),
            ("psi_tilde", &self.psi_tilde),
            ("psibar_tilde", &self.psibar_tilde),
        ];
        write!(w, "t")?;
        for (name, v) in &cols {
            let (r, c) = v[0].shape();
            for i in 0..r {
                for j in 0..c {
                    write!(w, ",{name}{}_{}", i + 1, j + 1)?;
                }
            }
        }
        writeln!(w)?;
        for k in 0..nodes {
            write!(w, "{}", self.grid.time(k))?;
            for (_, v) in &cols {
                for x in v[k].as_slice() {
                    write!(w, ",{x}")?;
                }
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// Writes the `Π̄` schedule.
pub fn write_pibar_csv(w: &mut impl std::io::Write, sol: &LeaderSolution) -> Result<()> {
    write_schedule_csv(w, &sol.grid, 0, "pibar", &sol.pibar()?)
}

/// Everything needed downstream of the Riccati solves.
pub struct Equilibrium {
    pub spec: ProblemSpec,
    pub disc: Discretized,
    pub follower: FollowerSolution,
    pub fcoeffs: FollowerCoefficients,
    pub leader: LeaderSolution,
    pub gains: ClosedLoopGains,
}

/// Solves both players and extracts the closed-loop gains. Fails with
/// [`Error::NotSolved`] when either sweep does not complete.
pub fn solve_equilibrium(spec: &ProblemSpec, grid: &GridSpec, opts: &SolverOptions) -> Result<Equilibrium> {
    let disc = Discretized::new(spec, grid)?;
    let (follower, fco, leader) = solve_joint(&disc, opts)?;
    // Report whichever stage actually failed.
    if follower.status == Status::NotReached {
        leader.ensure_solved()?;
    }
    follower.ensure_solved()?;
    leader.ensure_solved()?;
    let fcoeffs = fco.expect("solved follower has coefficients");
    let gains = closed_loop_gains(&disc, &fcoeffs, &leader)?;
    Ok(Equilibrium { spec: spec.clone(), disc, follower, fcoeffs, leader, gains })
}

impl Equilibrium {
    pub fn grid(&self) -> &GridSpec {
        &self.disc.grid
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::follower::{assemble_follower_coefficients, solve_follower};
    use crate::problem::{presets, Kernel, TimeFn};
    use crate::twotime::Storage;
    use proptest::prelude::*;

    fn full(spec: &ProblemSpec, dt: f64) -> Equilibrium {
        solve_equilibrium(spec, &GridSpec::for_spec(spec, dt).unwrap(), &SolverOptions::default()).unwrap()
    }

    fn no_leader_channel(mut spec: ProblemSpec) -> ProblemSpec {
        spec.dynamics.b1 = TimeFn::constant(Mat::scalar(0.0));
        spec.dynamics.d1 = TimeFn::constant(Mat::scalar(0.0));
        spec
    }

    #[test]
    fn case1_blocks_and_terminal_readback() {
        let eq = full(&presets::case1(), 1e-2);
        let nn = eq.disc.grid.steps;
        let p = eq.leader.p.get(nn, 0).unwrap();
        assert!((p[(0, 0)] - 0.013).abs() < 1e-15);
        assert_eq!((p[(0, 1)], p[(1, 0)], p[(1, 1)]), (0.0, 0.0, 0.0));
        let lc = assemble_leader(&eq.disc, &eq.follower, &eq.fcoeffs).unwrap();
        for k in [0, 50, nn] {
            assert!(lc.nodes[k].dbar.is_zero());
            let pb = lc.pair(k, k / 2).unwrap();
            assert_eq!(pb.a1.shape(), (2, 2));
            assert_eq!(pb.q.block(0, 0, 1, 1), eq.disc.q1.at(k, k / 2).clone());
            assert_eq!(pb.q[(1, 1)], 0.0);
        }
        assert_eq!(eq.leader.min_det_ipd, 1.0);
    }

    #[test]
    fn case1_gain_simplifies_without_diffusion_controls() {
        let eq = full(&presets::case1(), 1e-2);
        let lc = assemble_leader(&eq.disc, &eq.follower, &eq.fcoeffs).unwrap();
        for k in 0..eq.disc.grid.nodes() {
            let (pi, pibar) = leader_gain(&eq.leader, k).unwrap();
            let phat = eq.leader.phat.get(k, k).unwrap();
            let simple = &lc.nodes[k].b.transpose() * &phat;
            assert!((&pi - &simple).max_abs() < 1e-13);
            assert_eq!(pibar, pi.block(0, 0, 1, 1));
        }
    }

    #[test]
    fn joint_matches_separate_solves() {
        let spec = presets::case2();
        let grid = GridSpec::for_spec(&spec, 2e-2).unwrap();
        let disc = Discretized::new(&spec, &grid).unwrap();
        let opts = SolverOptions::default();
        let fsol = solve_follower(&disc, &opts).unwrap();
        let fco = assemble_follower_coefficients(&disc, &fsol).unwrap();
        let lc = assemble_leader(&disc, &fsol, &fco).unwrap();
        let lsol = solve_leader_rdes(&lc, &opts).unwrap();
        lsol.ensure_solved().unwrap();
        let (_, _, joint) = solve_joint(&disc, &opts).unwrap();
        for k in 0..grid.nodes() {
            for j in 0..=k {
                assert_eq!(lsol.p.get(k, j).unwrap(), joint.p.get(k, j).unwrap());
                assert_eq!(lsol.z.get(k, j).unwrap(), joint.z.get(k, j).unwrap());
            }
            assert_eq!(lsol.pi[k], joint.pi[k]);
        }
        assert!(lsol.phat_consistent());
    }

    #[test]
    fn absent_leader_channel() {
        let eq = full(&no_leader_channel(presets::case2()), 1e-2);
        for k in 0..eq.disc.grid.nodes() {
            let (pi, pibar) = leader_gain(&eq.leader, k).unwrap();
            assert!(pi.is_zero() && pibar.is_zero());
            assert!(eq.gains.gamma_u[k].is_zero());
        }
    }

    #[test]
    fn absent_follower_channel_closed_loop() {
        let mut spec = presets::case1();
        spec.dynamics.b2 = TimeFn::constant(Mat::scalar(0.0));
        let eq = full(&spec, 1e-2);
        for k in 0..eq.disc.grid.nodes() {
            let f = &eq.fcoeffs.nodes[k];
            assert!(f.g1.is_zero() && f.g2.is_zero());
            let expect = &eq.disc.a[k] + &(&eq.disc.b1[k] * &eq.gains.gamma_u[k]);
            assert!((&eq.gains.psi[k] - &expect).max_abs() < 1e-15);
            assert_eq!(eq.gains.psi_tilde[k], eq.gains.psi[k]);
        }
    }

    #[test]
    fn gamma_v_case1_structure() {
        let eq = full(&presets::case1(), 1e-2);
        let fb = eq.fcoeffs.nodes[0].feedback(&eq.disc, 0);
        let expect = &fb.gain_x + &(&fb.gain_h * &eq.gains.theta_h[0]);
        assert!((&eq.gains.gamma_v[0] - &expect).max_abs() < 1e-15);
    }

    #[test]
    fn optimality_condition_holds_on_diagonal() {
        for spec in [presets::case1(), presets::case2()] {
            let eq = full(&spec, 1e-2);
            for k in 0..eq.disc.grid.nodes() {
                let d = diagonal_data(&eq.disc, &eq.fcoeffs, &eq.leader, k).unwrap();
                assert!(optimality_residual(&d, 1) < 1e-9);
            }
        }
    }

    #[test]
    fn leader_phat_cross_check() {
        let eq = full(&presets::case2(), 1e-2);
        assert!(eq.leader.phat_consistent(), "{} vs {}", eq.leader.phat_residual, eq.leader.max_lambda);
    }

    #[test]
    fn no_leader_no_mean_field_terminal_keeps_block_structure() {
        let mut spec = no_leader_channel(presets::case1());
        spec.terminal.mbar1 = TimeFn::constant(Mat::scalar(0.0));
        let eq = full(&spec, 1e-2);
        for k in 0..eq.disc.grid.nodes() {
            let phat = eq.leader.phat.get(k, k).unwrap();
            assert_eq!(eq.gains.theta_h[k], phat.block(1, 0, 1, 1));
            assert!(eq.gains.theta_h[k].is_finite());
        }
    }

    #[test]
    fn reduced_memory_keeps_gains() {
        let spec = presets::case2();
        let grid = GridSpec::for_spec(&spec, 1e-2).unwrap();
        let a = solve_equilibrium(&spec, &grid, &SolverOptions::default()).unwrap();
        let b = solve_equilibrium(&spec, &grid, &SolverOptions::reduced(&[0])).unwrap();
        assert_eq!(a.gains.gamma_v, b.gains.gamma_v);
        assert_eq!(a.leader.p.column(0).unwrap(), b.leader.p.column(0).unwrap());
        assert_eq!(*b.leader.p.storage(), Storage::reduced(&[0]));
    }

    #[test]
    fn leader_escape_stops_joint_sweep_cleanly() {
        let spec = presets::case1();
        let grid = GridSpec::for_spec(&spec, 0.175).unwrap();
        let disc = Discretized::new(&spec, &grid).unwrap();
        let (f, fco, l) = solve_joint(&disc, &SolverOptions::default()).unwrap();
        assert!(matches!(l.status, Status::Escaped { .. }));
        assert_eq!(f.status, Status::NotReached);
        assert!(fco.is_none());
        match solve_equilibrium(&spec, &grid, &SolverOptions::default()) {
            Err(Error::NotSolved { stage, .. }) => assert_eq!(stage, "leader"),
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("expected a leader escape"),
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]
        #[test]
        fn reduced_closed_loop_identity(b1 in -1.0f64..1.0, d1 in -1.0f64..1.0, d2 in -0.5f64..0.5) {
            let mut spec = presets::case2();
            spec.dynamics.b1 = TimeFn::constant(Mat::scalar(b1));
            spec.dynamics.d1 = TimeFn::constant(Mat::scalar(d1));
            spec.dynamics.d2 = TimeFn::constant(Mat::scalar(d2));
            spec.costs.rbar1 = Kernel::scalar(0.5);
            let eq = full(&spec, 5e-2);
            for k in 0..eq.disc.grid.nodes() {
                let g = &eq.gains;
                let drift = &(&eq.disc.a[k] + &(&eq.disc.b1[k] * &g.gamma_u[k])) + &(&eq.disc.b2[k] * &g.gamma_v[k]);
                let diff = &(&eq.disc.c[k] + &(&eq.disc.d1[k] * &g.gamma_u[k])) + &(&eq.disc.d2[k] * &g.gamma_v[k]);
                prop_assert!((&drift - &g.psi_tilde[k]).max_abs() < 1e-10);
                prop_assert!((&diff - &g.psibar_tilde[k]).max_abs() < 1e-10);
            }
        }
    }
}
