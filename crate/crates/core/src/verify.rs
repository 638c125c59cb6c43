//! Independent checks of a computed equilibrium.
//!
//! Each check returns a report with its residuals, the tolerance applied and
//! a verdict. The checks deliberately avoid the solver's own integration
//! paths: the mean-system oracle uses the RK4 shooting solver in
//! [`crate::fbsde`], the classical reduction uses a separate RK4 Riccati
//! integrator, and the spike tests compare Monte Carlo costs of perturbed
//! and unperturbed controls.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fbsde::{FbsdeCoeffs, LinearFbsde};
use crate::follower::{FollowerSolution, SolverOptions};
use crate::leader::{
    assemble_leader, closed_loop_gains, leader_gain, solve_joint, terminal_blocks, ClosedLoopGains, Equilibrium,
    LeaderCoefficients, LeaderSolution,
};
use crate::linalg::{Lu, Mat};
use crate::problem::{eval_kernel, Discretized, GridSpec, ProblemSpec};
use crate::simulate::{
    batch_se, simulate_with_control, ControlLaw, FixedStartFlow, FixedStartNode, Player, SimConfig, SimResult, Spike,
};

/// RK4 substeps per grid interval in the reference integrators.
const SUB: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Residual {
    pub label: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OracleReport {
    pub name: String,
    pub residuals: Vec<Residual>,
    pub tolerance: f64,
    pub passed: bool,
    pub notes: Vec<String>,
}

impl OracleReport {
    fn new(name: &str, tolerance: f64) -> Self {
        OracleReport { name: name.into(), residuals: Vec::new(), tolerance, passed: true, notes: Vec::new() }
    }

    fn push(&mut self, label: impl Into<String>, value: f64) {
        self.residuals.push(Residual { label: label.into(), value });
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    pub fn get(&self, label: &str) -> Option<f64> {
        self.residuals.iter().find(|r| r.label == label).map(|r| r.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpikeReport {
    pub player: Player,
    pub start: usize,
    pub t: f64,
    pub delta: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub steps: Vec<usize>,
    /// Unperturbed cost of the spiked player.
    pub base_cost: f64,
    /// `(J^ε − J*)/ε`
    pub differences: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub kappa: f64,
    /// `−(3·SE + κ·ε)`
    pub thresholds: Vec<f64>,
    pub passes: Vec<bool>,
    pub passed: bool,
}

/// Number of grid steps in `eps`; errors unless `eps` is a positive multiple
/// of `dt`.
pub fn epsilon_steps(eps: f64, dt: f64) -> Result<usize> {
    let steps = (eps / dt).round();
    if !(steps >= 1.0) || (steps * dt - eps).abs() > 1e-9 * eps.max(1.0) {
        return Err(Error::Config(format!("spike length {eps} is not a positive multiple of {dt}")));
    }
    Ok(steps as usize)
}

/// Finite differences of one player's cost under constant control offsets
/// `delta` applied on `[t, t+ε)`, with common random numbers.
pub fn spike_check(
    eq: &Equilibrium,
    player: Player,
    start: usize,
    delta: &[f64],
    epsilons: &[f64],
    cfg: &SimConfig,
) -> Result<SpikeReport> {
    let dt = eq.disc.grid.dt;
    let steps = epsilons.iter().map(|&e| epsilon_steps(e, dt)).collect::<Result<Vec<_>>>()?;
    let cfg = SimConfig { start, store_paths: false, ..cfg.clone() };
    let pick = |r: &SimResult| match player {
        Player::Leader => r.j1.clone(),
        Player::Follower => r.j2.clone(),
    };
    let base = pick(&simulate_with_control(eq, &ControlLaw::FixedStart { spike: None }, &cfg)?);
    let mut differences = Vec::with_capacity(steps.len());
    let mut standard_errors = Vec::with_capacity(steps.len());
    for &st in &steps {
        let spike = Spike { player, delta: delta.to_vec(), steps: st };
        let r = pick(&simulate_with_control(eq, &ControlLaw::FixedStart { spike: Some(spike) }, &cfg)?);
        let eps = st as f64 * dt;
        let per_batch: Vec<f64> = r.batches.iter().zip(&base.batches).map(|(a, b)| (a - b) / eps).collect();
        differences.push((r.mean - base.mean) / eps);
        standard_errors.push(if per_batch.len() >= 2 { batch_se(&per_batch) } else { 0.0 });
    }
    let eps: Vec<f64> = steps.iter().map(|&s| s as f64 * dt).collect();
    let kappa = curvature_allowance(&eps, &differences);
    let thresholds: Vec<f64> = standard_errors.iter().zip(&eps).map(|(se, e)| -(3.0 * se + kappa * e)).collect();
    let passes: Vec<bool> = differences.iter().zip(&thresholds).map(|(d, th)| d >= th).collect();
    Ok(SpikeReport {
        player,
        start,
        t: eq.disc.grid.time(start),
        delta: delta.to_vec(),
        epsilons: eps,
        steps,
        base_cost: base.mean,
        differences,
        standard_errors,
        kappa,
        thresholds,
        passed: passes.iter().all(|&p| p),
        passes,
    })
}

/// `κ = max(0, −slope)` of the differences between the two largest ε.
fn curvature_allowance(eps: &[f64], diffs: &[f64]) -> f64 {
    let mut idx: Vec<usize> = (0..eps.len()).collect();
    idx.sort_by(|&a, &b| eps[b].total_cmp(&eps[a]));
    match idx.as_slice() {
        [a, b, ..] if eps[*a] > eps[*b] => (-(diffs[*a] - diffs[*b]) / (eps[*a] - eps[*b])).max(0.0),
        _ => 0.0,
    }
}

/// Perturbs the follower's control; compares `J2`.
pub fn spike_check_follower(
    eq: &Equilibrium,
    start: usize,
    delta: &[f64],
    epsilons: &[f64],
    cfg: &SimConfig,
) -> Result<SpikeReport> {
    spike_check(eq, Player::Follower, start, delta, epsilons, cfg)
}

/// Perturbs the leader's control with the follower responding; compares `J1`.
pub fn spike_check_leader(
    eq: &Equilibrium,
    start: usize,
    delta: &[f64],
    epsilons: &[f64],
    cfg: &SimConfig,
) -> Result<SpikeReport> {
    spike_check(eq, Player::Leader, start, delta, epsilons, cfg)
}

/// `λ(s_k,t_j) = Λx·X + Λb·EX` along the augmented closed loop started at `t_j`.
pub fn lambda_maps(eq: &Equilibrium, lc: &LeaderCoefficients<'_>, k: usize, j: usize) -> Result<(Mat, Mat)> {
    let disc = &eq.disc;
    let n = disc.dims.n;
    let nd = FixedStartNode::build(eq, lc, k, j)?;
    let tt = eq.fcoeffs.two_time(disc, &eq.follower, k, j)?;
    let f = &eq.fcoeffs.nodes[k];
    let upper = |m: &Mat| m.block(0, 0, n, 2 * n);
    let sel_phi = Mat::hstack(&Mat::zeros(n, n), &Mat::identity(n));
    let (ft, fbt) = (f.f.transpose(), f.fbar.transpose());
    let lx = &(&(&(disc.r1.at(k, j) * &nd.u_x) + &(&ft * &upper(&nd.y_x))) + &(&fbt * &upper(&nd.l_x)))
        - &(&tt.k1 * &sel_phi);
    let lb = &(&(&(disc.rbar1.at(k, j) * &nd.u_x) + &(&ft * &upper(&nd.y_xbar))) + &(&fbt * &upper(&nd.l_xbar)))
        - &(&tt.k2 * &sel_phi);
    Ok((lx, lb))
}

/// `E|λ(t_k,t_k)|²` at every node along the equilibrium state from `x0`,
/// using the exact second moment of the Euler scheme.
pub fn lambda_diagonal(eq: &Equilibrium, x0: &[f64]) -> Result<Vec<f64>> {
    let disc = &eq.disc;
    let n = disc.dims.n;
    let dt = disc.grid.dt;
    let lc = assemble_leader(disc, &eq.follower, &eq.fcoeffs)?;
    let x = Mat::column_vector(x0);
    let mut sigma = &x * &x.transpose();
    let eye = Mat::identity(n);
    let mut out = Vec::with_capacity(disc.grid.nodes());
    for k in 0..disc.grid.nodes() {
        let (lx, lb) = lambda_maps(eq, &lc, k, k)?;
        let l = (&lx + &lb).block(0, 0, lx.rows(), n);
        out.push(trace(&(&(&l * &sigma) * &l.transpose())));
        let m = &eye + &eq.gains.psi_tilde[k].scale(dt);
        let b = &eq.gains.psibar_tilde[k];
        sigma = &(&(&m * &sigma) * &m.transpose()) + &(&(b * &sigma) * &b.transpose()).scale(dt);
    }
    Ok(out)
}

fn trace(m: &Mat) -> f64 {
    (0..m.rows()).map(|i| m[(i, i)]).sum()
}

/// `E|λ(t_{j+1},t_j)|²` for the problem started at `t_j` from `x0`, exact for
/// one Euler step: `|Λ·m|² + Δ|Λx·d|²` with `m` the mean and `d` the
/// diffusion of the first step.
pub fn lambda_first_step(eq: &Equilibrium, j: usize, x0: &[f64]) -> Result<f64> {
    let disc = &eq.disc;
    let n = disc.dims.n;
    let dt = disc.grid.dt;
    let lc = assemble_leader(disc, &eq.follower, &eq.fcoeffs)?;
    let nd = FixedStartNode::build(eq, &lc, j, j)?;
    let mut x = x0.to_vec();
    x.resize(2 * n, 0.0);
    let drift = (&nd.drift_x + &nd.drift_xbar).mul_vec(&x);
    let d = (&nd.diff_x + &nd.diff_xbar).mul_vec(&x);
    let m: Vec<f64> = x.iter().zip(&drift).map(|(a, b)| a + dt * b).collect();
    let (lx, lb) = lambda_maps(eq, &lc, j + 1, j)?;
    let sq = |v: Vec<f64>| v.iter().map(|z| z * z).sum::<f64>();
    Ok(sq((&lx + &lb).mul_vec(&m)) + dt * sq(lx.mul_vec(&d)))
}

/// Diagonal λ at every node of `fine`, and the first-step value at `t0` on
/// both grids (`coarse.dt = 2·fine.dt`).
pub fn lambda_residual(coarse: &Equilibrium, fine: &Equilibrium) -> Result<OracleReport> {
    let x0 = &fine.spec.x0;
    let mut rep = OracleReport::new("lambda_residual", 1e-12);
    let diag = lambda_diagonal(fine, x0)?;
    let max_diag = diag.iter().cloned().fold(0.0, f64::max);
    let off_c = lambda_first_step(coarse, 0, x0)?;
    let off_f = lambda_first_step(fine, 0, x0)?;
    let ratio = off_c / off_f;
    rep.push("max_diagonal", max_diag);
    rep.push("first_step_coarse", off_c);
    rep.push("first_step_fine", off_f);
    rep.push("ratio", ratio);
    rep.note(format!("diagonal: every node, dt = {}", fine.disc.grid.dt));
    rep.note("first step E|lambda(t0+dt, t0)|^2 must halve with dt: ratio in [1.6, 2.4]");
    rep.passed = max_diag <= rep.tolerance && (1.6..=2.4).contains(&ratio);
    Ok(rep)
}

/// `sup_s ‖Ȳ − 𝒫̂X̄‖` for the leader's system started at node `j`.
pub fn leader_mean_oracle(eq: &Equilibrium, j: usize, x0: &[f64]) -> Result<f64> {
    let disc = &eq.disc;
    let n = disc.dims.n;
    let lc = assemble_leader(disc, &eq.follower, &eq.fcoeffs)?;
    let mut coeffs = Vec::with_capacity(disc.grid.nodes() - j);
    for k in j..disc.grid.nodes() {
        let nb = &lc.nodes[k];
        let pb = lc.pair(k, j)?;
        let (pi, _) = leader_gain(&eq.leader, k)?;
        coeffs.push(FbsdeCoeffs {
            a: &pb.a1 - &(&nb.b * &pi),
            abar: pb.a2.clone(),
            c: nb.c.clone(),
            e: nb.d.clone(),
            sigma: &pb.a1bar - &(&nb.bbar * &pi),
            sigmabar: pb.a2bar.clone(),
            gamma: nb.cbar.clone(),
            eta: nb.dbar.clone(),
            alpha: &pb.q - &(&pb.g.transpose() * &pi),
            alphabar: &pb.qbar - &(&pb.gbar.transpose() * &pi),
            beta: pb.a1.transpose(),
            betabar: pb.a2.transpose(),
            rho: pb.a1bar.transpose(),
            rhobar: pb.a2bar.transpose(),
        });
    }
    let (g, gbar) = terminal_blocks(disc, j);
    let mut x = x0.to_vec();
    x.resize(2 * n, 0.0);
    let sys = LinearFbsde { t: disc.grid.time(j), dt: disc.grid.dt, coeffs, forcing: vec![], g, gbar, x0: x };
    let mean = sys.solve_mean(2 * SUB)?;
    let mut worst = 0.0_f64;
    for (i, k) in (j..disc.grid.nodes()).enumerate() {
        let phat = eq.leader.phat.get(k, j)?;
        let pred = phat.mul_vec(&mean.xbar[i]);
        worst = worst.max(max_diff(&pred, &mean.ybar[i]));
    }
    Ok(worst)
}

/// `sup_s ‖p̄ − P̂x̄ − h̄‖` for the follower's adjoint along the augmented
/// closed loop started at node `j`.
pub fn follower_mean_oracle(eq: &Equilibrium, j: usize, x0: &[f64]) -> Result<f64> {
    let disc = &eq.disc;
    let n = disc.dims.n;
    let flow = FixedStartFlow::new(eq, j, x0)?;
    let zn = Mat::zeros(n, n);
    let coeffs: Vec<FbsdeCoeffs> = flow
        .nodes
        .iter()
        .enumerate()
        .map(|(i, nd)| {
            let k = j + i;
            let mut c = FbsdeCoeffs::zeros(2 * n, n);
            c.a = nd.drift_x.clone();
            c.abar = nd.drift_xbar.clone();
            c.sigma = nd.diff_x.clone();
            c.sigmabar = nd.diff_xbar.clone();
            c.alpha = Mat::hstack(disc.q2.at(k, j), &zn);
            c.alphabar = Mat::hstack(disc.qbar2.at(k, j), &zn);
            c.beta = disc.a[k].transpose();
            c.rho = disc.c[k].transpose();
            c
        })
        .collect();
    let mut x = x0.to_vec();
    x.resize(2 * n, 0.0);
    let sys = LinearFbsde {
        t: disc.grid.time(j),
        dt: disc.grid.dt,
        coeffs,
        forcing: vec![],
        g: Mat::hstack(&disc.m2[j], &zn),
        gbar: Mat::hstack(&disc.mbar2[j], &zn),
        x0: x,
    };
    let mean = sys.solve_mean(2 * SUB)?;
    let mut worst = 0.0_f64;
    for (i, k) in (j..disc.grid.nodes()).enumerate() {
        let xb = &mean.xbar[i];
        let mut pred = eq.follower.phat.get(k, j)?.mul_vec(&xb[..n]);
        let h = eq.leader.phat.get(k, j)?.mul_vec(xb);
        pred.iter_mut().zip(&h[n..]).for_each(|(a, b)| *a += b);
        worst = worst.max(max_diff(&pred, &mean.ybar[i]));
    }
    Ok(worst)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Both decoupling identities on the expectation system started at `t_j`.
pub fn mean_system_oracle(eq: &Equilibrium, j: usize) -> Result<OracleReport> {
    let x0 = &eq.spec.x0;
    let mut rep = OracleReport::new("mean_system_oracle", 1e-3);
    let f = follower_mean_oracle(eq, j, x0)?;
    let l = leader_mean_oracle(eq, j, x0)?;
    rep.push("follower", f);
    rep.push("leader", l);
    rep.note(format!("start t = {}, dt = {}, RK4 shooting at dt/{SUB}", eq.disc.grid.time(j), eq.disc.grid.dt));
    rep.passed = f <= rep.tolerance && l <= rep.tolerance;
    Ok(rep)
}

/// Mean-system residuals on two grids; passes when the fine residuals are
/// within tolerance and shrink by a factor consistent with first order.
pub fn mean_system_convergence(coarse: &Equilibrium, fine: &Equilibrium) -> Result<OracleReport> {
    let c = mean_system_oracle(coarse, 0)?;
    let f = mean_system_oracle(fine, 0)?;
    let mut rep = OracleReport::new("mean_system_oracle", f.tolerance);
    let mut ok = f.passed;
    for who in ["follower", "leader"] {
        let (rc, rf) = (c.get(who).unwrap_or(f64::NAN), f.get(who).unwrap_or(f64::NAN));
        rep.push(format!("{who}_coarse"), rc);
        rep.push(format!("{who}_fine"), rf);
        let ratio = rc / rf;
        rep.push(format!("{who}_ratio"), ratio);
        // Residuals already at round-off carry no rate information.
        ok &= rf <= 1e-12 || (1.5..=2.5).contains(&ratio);
    }
    rep.note(format!(
        "dt = {} and {}; linear decrease means ratio in [1.5, 2.5]",
        coarse.disc.grid.dt, fine.disc.grid.dt
    ));
    rep.passed = ok;
    Ok(rep)
}

/// Largest differences of `Γu`, `Γv` on the common nodes of two schedules
/// whose grids share a step and end time.
pub fn compare_gains(a: &ClosedLoopGains, b: &ClosedLoopGains) -> Result<(f64, f64)> {
    let (ga, gb) = (&a.grid, &b.grid);
    if (ga.dt - gb.dt).abs() > 1e-15 || (ga.t_end() - gb.t_end()).abs() > 1e-9 || gb.t0 < ga.t0 - 1e-12 {
        return Err(Error::Config("gain schedules do not share a grid tail".into()));
    }
    let off = ga.nodes() - gb.nodes();
    let diff =
        |x: &[Mat], y: &[Mat]| y.iter().enumerate().map(|(k, m)| (&x[k + off] - m).max_abs()).fold(0.0, f64::max);
    Ok((diff(&a.gamma_u, &b.gamma_u), diff(&a.gamma_v, &b.gamma_v)))
}

/// Runs the full pipeline from `t_a` and from `t_b` and compares the diagonal
/// gain schedules on `[t_b, T]`.
pub fn time_consistency_check(spec: &ProblemSpec, dt: f64, t_a: f64, t_b: f64) -> Result<OracleReport> {
    if !(t_a <= t_b && t_b < spec.horizon.t_end) {
        return Err(Error::Config(format!("need t_a <= t_b < T, got {t_a}, {t_b}")));
    }
    let solve = |t: f64| -> Result<Equilibrium> {
        let s = spec.with_start(t);
        crate::leader::solve_equilibrium(&s, &GridSpec::for_spec(&s, dt)?, &SolverOptions::reduced(&[0]))
    };
    let a = solve(t_a)?;
    let b = solve(t_b)?;
    consistency_report(&a.gains, &b.gains)
}

fn consistency_report(a: &ClosedLoopGains, b: &ClosedLoopGains) -> Result<OracleReport> {
    let (du, dv) = compare_gains(a, b)?;
    let mut rep = OracleReport::new("time_consistency", 1e-10);
    rep.push("gamma_u", du);
    rep.push("gamma_v", dv);
    rep.note(format!("starts {} and {}, compared on [{}, {}]", a.grid.t0, b.grid.t0, b.grid.t0, b.grid.t_end()));
    rep.passed = du <= rep.tolerance && dv <= rep.tolerance;
    Ok(rep)
}

fn riccati_rhs(a: &Mat, b: &Mat, c: &Mat, d: &Mat, q: &Mat, r: &Mat, p: &Mat) -> Mat {
    let bt = &(&b.transpose() * p) + &(&(&d.transpose() * p) * c);
    let s = r + &(&(&d.transpose() * p) * d);
    let gain = Lu::factor(&s).solve(&bt);
    let lin = &(&(p * a) + &(&a.transpose() * p)) + &(&(&c.transpose() * p) * c);
    // dP/ds = −(…)
    -&(&(&lin + q) - &(&bt.transpose() * &gain))
}

/// Standard stochastic LQ Riccati solution at the grid nodes, RK4 backward
/// at step `dt/SUB` from `P(T) = M2`, for time-independent weights.
pub fn standard_riccati(spec: &ProblemSpec, grid: &GridSpec) -> Result<Vec<Mat>> {
    let t0 = grid.t0;
    let d = &spec.dynamics;
    let coef = |s: f64| -> Result<[Mat; 6]> {
        let r = &eval_kernel(&spec.costs.r2, s, t0)? + &eval_kernel(&spec.costs.rbar2, s, t0)?;
        Ok([d.a.eval(s)?, d.b2.eval(s)?, d.c.eval(s)?, d.d2.eval(s)?, eval_kernel(&spec.costs.q2, s, t0)?, r])
    };
    let rhs = |s: f64, p: &Mat| -> Result<Mat> {
        let [a, b, c, dd, q, r] = coef(s)?;
        Ok(riccati_rhs(&a, &b, &c, &dd, &q, &r, p))
    };
    let h = grid.dt / SUB as f64;
    let mut p = spec.terminal.m2.eval(t0)?;
    let mut out = vec![Mat::zeros(0, 0); grid.nodes()];
    out[grid.steps] = p.clone();
    for k in (0..grid.steps).rev() {
        for i in (0..SUB).rev() {
            let s = grid.time(k) + (i + 1) as f64 * h;
            let k1 = rhs(s, &p)?;
            let k2 = rhs(s - 0.5 * h, &(&p - &k1.scale(0.5 * h)))?;
            let k3 = rhs(s - 0.5 * h, &(&p - &k2.scale(0.5 * h)))?;
            let k4 = rhs(s - h, &(&p - &k3.scale(h)))?;
            let mut inc = k1;
            inc.axpy(2.0, &k2);
            inc.axpy(2.0, &k3);
            inc += &k4;
            p.axpy(-h / 6.0, &inc);
        }
        out[k] = p.clone();
    }
    Ok(out)
}

/// For time-independent problems without mean-field weights: the follower's
/// two-time field must not depend on `t`, and must match the standard
/// Riccati solution (and its feedback gain) within `10·Δ`.
pub fn classical_lq_check(spec: &ProblemSpec, dt: f64) -> Result<OracleReport> {
    let zero_mf = [&spec.costs.qbar2, &spec.costs.rbar2].iter().all(|k| is_zero_kernel(k))
        && spec.terminal.mbar2.eval(spec.horizon.t0).map(|m| m.is_zero()).unwrap_or(false);
    if !spec.is_time_independent() || !zero_mf {
        return Err(Error::Config("classical reduction needs time-independent weights and no mean-field terms".into()));
    }
    let grid = GridSpec::for_spec(spec, dt)?;
    let disc = Discretized::new(spec, &grid)?;
    let fsol = crate::follower::solve_follower(&disc, &SolverOptions::default())?;
    fsol.ensure_solved()?;
    classical_report(spec, &disc, &fsol)
}

fn is_zero_kernel(k: &crate::problem::Kernel) -> bool {
    eval_kernel(k, 0.0, 0.0).map(|m| m.is_zero()).unwrap_or(false)
}

fn classical_report(spec: &ProblemSpec, disc: &Discretized, fsol: &FollowerSolution) -> Result<OracleReport> {
    let grid = disc.grid;
    let mut t_dep = 0.0_f64;
    for k in 0..grid.nodes() {
        let p0 = fsol.p.get(k, 0)?;
        for j in 1..=k {
            t_dep = t_dep.max((&fsol.p.get(k, j)? - &p0).max_abs());
        }
    }
    let reference = standard_riccati(spec, &grid)?;
    let fco = crate::follower::assemble_follower_coefficients(disc, fsol)?;
    let (mut p_err, mut g_err) = (0.0_f64, 0.0_f64);
    for (k, pr) in reference.iter().enumerate() {
        p_err = p_err.max((&fsol.p.get(k, k)? - pr).max_abs());
        let (b, c, d) = (&disc.b2[k], &disc.c[k], &disc.d2[k]);
        let s = &disc.rhat2(k, k) + &(&(&d.transpose() * pr) * d);
        let g_ref = -&Lu::factor(&s).solve(&(&(&b.transpose() * pr) + &(&(&d.transpose() * pr) * c)));
        g_err = g_err.max((&fco.nodes[k].feedback(disc, k).gain_x - &g_ref).max_abs());
    }
    let tol = 10.0 * grid.dt;
    let mut rep = OracleReport::new("classical_lq", tol);
    rep.push("t_dependence", t_dep);
    rep.push("riccati_sup", p_err);
    rep.push("gain_sup", g_err);
    rep.note("t_dependence must be <= 1e-10");
    rep.passed = t_dep <= 1e-10 && p_err <= tol && g_err <= tol;
    Ok(rep)
}

/// Outcome of both sweeps at one step size.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SolveSummary {
    pub dt: f64,
    pub follower_status: String,
    pub leader_status: String,
    pub solved: bool,
    pub follower_max_p: f64,
    pub follower_max_z: f64,
    pub leader_max_p: f64,
    pub leader_max_z: f64,
    /// Smallest eigenvalue of the symmetric part of `S(s,s)`.
    pub min_s_eigenvalue: f64,
    pub min_det_ipd: f64,
    pub min_gain_pivot: f64,
}

impl SolveSummary {
    pub fn new(fsol: &FollowerSolution, lsol: &LeaderSolution) -> Self {
        let min_s = fsol.s_diag.iter().flatten().map(|s| s.sym_min_eigenvalue()).fold(f64::INFINITY, f64::min);
        SolveSummary {
            dt: fsol.grid.dt,
            follower_status: fsol.status.describe(),
            leader_status: lsol.status.describe(),
            solved: fsol.status.is_solved() && lsol.status.is_solved(),
            follower_max_p: fsol.max_abs_p,
            follower_max_z: fsol.max_abs_z,
            leader_max_p: lsol.max_abs_p,
            leader_max_z: lsol.max_abs_z,
            min_s_eigenvalue: min_s,
            min_det_ipd: lsol.min_det_ipd,
            min_gain_pivot: lsol.min_gain_pivot,
        }
    }

    fn norms(&self) -> [(&'static str, f64); 4] {
        [
            ("follower_max_p", self.follower_max_p),
            ("follower_max_z", self.follower_max_z),
            ("leader_max_p", self.leader_max_p),
            ("leader_max_z", self.leader_max_z),
        ]
    }
}

/// Solves at `dt` keeping the first column; returns the equilibrium when
/// both sweeps complete.
pub fn solve_summary(spec: &ProblemSpec, dt: f64) -> Result<(SolveSummary, Option<Equilibrium>)> {
    let grid = GridSpec::for_spec(spec, dt)?;
    let disc = Discretized::new(spec, &grid)?;
    let (follower, fco, leader) = solve_joint(&disc, &SolverOptions::reduced(&[0]))?;
    let summary = SolveSummary::new(&follower, &leader);
    let eq = match fco {
        Some(fcoeffs) if summary.solved => {
            let gains = closed_loop_gains(&disc, &fcoeffs, &leader)?;
            Some(Equilibrium { spec: spec.clone(), disc, follower, fcoeffs, leader, gains })
        }
        _ => None,
    };
    Ok((summary, eq))
}

/// Solvability at every step size and stability of the field norms between
/// the two finest (listed last).
pub fn scan_report(runs: &[SolveSummary], eps_det: f64) -> OracleReport {
    let mut rep = OracleReport::new("escape_scan", 0.1);
    let mut ok = !runs.is_empty();
    for r in runs {
        rep.note(format!(
            "dt = {}: follower {}, leader {}, min eig S = {:.3e}, min |det(I - P Dbar)| = {:.3e}, min gain pivot = {:.3e}",
            r.dt, r.follower_status, r.leader_status, r.min_s_eigenvalue, r.min_det_ipd, r.min_gain_pivot
        ));
        for (name, v) in r.norms() {
            rep.push(format!("{name}@{}", r.dt), v);
        }
        ok &= r.solved && r.min_det_ipd > eps_det && r.min_gain_pivot > eps_det && r.min_s_eigenvalue > 0.0;
    }
    if let [.., a, b] = runs {
        for ((name, x), (_, y)) in a.norms().into_iter().zip(b.norms()) {
            let rel = if x.max(y) > 0.0 { (x - y).abs() / x.abs().max(y.abs()) } else { 0.0 };
            rep.push(format!("{name}_relative_change"), rel);
            ok &= rel <= rep.tolerance;
        }
    }
    rep.passed = ok;
    rep
}

/// Solves at each step size of the ladder (coarsest first).
pub fn escape_scan(spec: &ProblemSpec, ladder: &[f64]) -> Result<OracleReport> {
    let runs = ladder.iter().map(|&dt| solve_summary(spec, dt).map(|r| r.0)).collect::<Result<Vec<_>>>()?;
    Ok(scan_report(&runs, SolverOptions::default().eps_det))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyConfig {
    pub dt: f64,
    pub sim: SimConfig,
    pub epsilons: Vec<f64>,
    /// Spike offset applied to every control component.
    pub delta: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            dt: 1e-3,
            sim: SimConfig { crn_tag: "spike".into(), ..SimConfig::default() },
            epsilons: vec![0.1, 0.05, 0.025],
            delta: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub dt: f64,
    pub paths: usize,
    pub seed: u64,
    pub checks: Vec<OracleReport>,
    pub spikes: Vec<SpikeReport>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn write_json(&self, w: &mut impl std::io::Write) -> Result<()> {
        serde_json::to_writer_pretty(&mut *w, self).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    }

    /// One line per check.
    pub fn summary(&self) -> String {
        let verdict = |p: bool| if p { "PASS" } else { "FAIL" };
        let mut s = String::new();
        for c in &self.checks {
            let vals: Vec<String> = c.residuals.iter().map(|r| format!("{}={:.3e}", r.label, r.value)).collect();
            s += &format!("{:<20} {}  tol={:.1e}  {}\n", c.name, verdict(c.passed), c.tolerance, vals.join(" "));
        }
        for sp in &self.spikes {
            let vals: Vec<String> = sp
                .epsilons
                .iter()
                .zip(&sp.differences)
                .zip(&sp.thresholds)
                .map(|((e, d), th)| format!("eps={e}: {d:.4e} >= {th:.4e}"))
                .collect();
            let name = format!("spike_{}", if sp.player == Player::Leader { "leader" } else { "follower" });
            s += &format!("{:<20} {}  {}\n", name, verdict(sp.passed), vals.join("; "));
        }
        s += &format!("overall              {}\n", verdict(self.passed));
        s
    }
}

/// Every check on one problem at `cfg.dt`, reusing solves where possible.
pub fn run_all(spec: &ProblemSpec, cfg: &VerifyConfig) -> Result<VerifyReport> {
    let dt = cfg.dt;
    let mut runs = Vec::new();
    let mut eqs = Vec::new();
    for d in [4.0 * dt, 2.0 * dt, dt] {
        let (summary, eq) = solve_summary(spec, d)?;
        runs.push(summary);
        eqs.push(eq);
    }
    let mut checks = vec![scan_report(&runs, SolverOptions::default().eps_det)];
    let fine = eqs.pop().flatten();
    let coarse = eqs.pop().flatten();
    let (Some(fine), Some(coarse)) = (fine, coarse) else {
        let stage = if runs[2].solved { &runs[1] } else { &runs[2] };
        return Err(Error::NotSolved {
            stage: format!("equilibrium at dt = {}", stage.dt),
            status: format!("follower {}, leader {}", stage.follower_status, stage.leader_status),
        });
    };
    checks.push(mean_system_convergence(&coarse, &fine)?);
    checks.push(lambda_residual(&coarse, &fine)?);

    let grid = fine.disc.grid;
    let t_b = grid.time(grid.steps / 4);
    let later = spec.with_start(t_b);
    let eq_b =
        crate::leader::solve_equilibrium(&later, &GridSpec::for_spec(&later, dt)?, &SolverOptions::reduced(&[0]))?;
    checks.push(consistency_report(&fine.gains, &eq_b.gains)?);

    if spec.is_time_independent() {
        match classical_lq_check(spec, dt) {
            Ok(r) => checks.push(r),
            Err(Error::Config(_)) => {}
            Err(e) => return Err(e),
        }
    }

    let (m1, m2) = (spec.dims.m1, spec.dims.m2);
    let spikes = vec![
        spike_check_follower(&fine, 0, &vec![cfg.delta; m2], &cfg.epsilons, &cfg.sim)?,
        spike_check_leader(&fine, 0, &vec![cfg.delta; m1], &cfg.epsilons, &cfg.sim)?,
    ];
    let passed = checks.iter().all(|c| c.passed) && spikes.iter().all(|s| s.passed);
    Ok(VerifyReport { dt, paths: cfg.sim.paths, seed: cfg.sim.seed, checks, spikes, passed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leader::solve_equilibrium;
    use crate::problem::{presets, Kernel, TimeFn};

    fn eq_for(spec: &ProblemSpec, dt: f64) -> Equilibrium {
        solve_equilibrium(spec, &GridSpec::for_spec(spec, dt).unwrap(), &SolverOptions::default()).unwrap()
    }

    #[test]
    fn epsilon_must_be_grid_multiple() {
        assert_eq!(epsilon_steps(0.05, 1e-3).unwrap(), 50);
        assert!(epsilon_steps(0.0505, 1e-2).is_err());
        assert!(epsilon_steps(0.0, 1e-2).is_err());
    }

    #[test]
    fn curvature_fit() {
        assert_eq!(curvature_allowance(&[0.1, 0.05], &[1.0, 2.0]), 20.0);
        assert_eq!(curvature_allowance(&[0.05, 0.1, 0.025], &[2.0, 3.0, 1.0]), 0.0);
        assert_eq!(curvature_allowance(&[0.1], &[1.0]), 0.0);
    }

    #[test]
    fn zero_spike_difference_is_exactly_zero() {
        let eq = eq_for(&presets::case1(), 1e-2);
        let cfg = SimConfig { paths: 64, ..SimConfig::default() };
        for player in [Player::Leader, Player::Follower] {
            let r = spike_check(&eq, player, 0, &[0.0], &[0.1, 0.05], &cfg).unwrap();
            assert!(r.differences.iter().all(|&d| d == 0.0));
            assert!(r.passed);
        }
    }

    #[test]
    fn scalar_follower_spike_is_convex() {
        // Deterministic: zero noise, so the cost difference is a quadratic in δ
        // with positive leading coefficient and a stationary point at δ = 0.
        let eq = eq_for(&presets::scalar_analytic(), 1e-2);
        let cfg = SimConfig { paths: 1, zero_noise: true, ..SimConfig::default() };
        for i in -4..=4 {
            let d = i as f64 / 4.0;
            let r = spike_check_follower(&eq, 0, &[d], &[0.05], &cfg).unwrap();
            assert!(r.differences[0] >= -1e-12, "delta {d}: {}", r.differences[0]);
            if d != 0.0 {
                assert!(r.differences[0] > 0.0);
            }
        }
    }

    #[test]
    fn scalar_mean_residual_tracks_euler_error() {
        // P(s) = 1/(2 − s) and x̄ is known, so the residual is the Euler error
        // of P carried along x̄: first order, about Δ/4 here.
        let spec = presets::scalar_analytic();
        let grid = |dt| GridSpec::for_spec(&spec, dt).unwrap();
        let res = |dt| {
            let eq = solve_equilibrium(&spec, &grid(dt), &SolverOptions::reduced(&[0])).unwrap();
            let r = mean_system_oracle(&eq, 0).unwrap();
            assert_eq!(r.get("leader"), Some(0.0));
            r.get("follower").unwrap()
        };
        let (c, f) = (res(1e-2), res(5e-3));
        assert!((1.9..2.1).contains(&(c / f)), "{c} {f}");
        assert!((f / 5e-3 - 0.25).abs() < 0.01, "{f}");
    }

    #[test]
    fn absent_leader_channel() {
        let mut spec = presets::case2();
        spec.dynamics.b1 = TimeFn::constant(Mat::scalar(0.0));
        spec.dynamics.d1 = TimeFn::constant(Mat::scalar(0.0));
        let eq = eq_for(&spec, 1e-2);
        // λ vanishes identically: no channel and u* = 0.
        let lc = assemble_leader(&eq.disc, &eq.follower, &eq.fcoeffs).unwrap();
        for (k, j) in [(0, 0), (10, 0), (40, 7), (150, 150)] {
            let (lx, lb) = lambda_maps(&eq, &lc, k, j).unwrap();
            assert!(lx.is_zero() && lb.is_zero(), "({k},{j})");
        }
        // A leader spike moves neither the state nor the follower; J1 changes
        // only by the leader's own control cost.
        let cfg = SimConfig { paths: 16, store_paths: true, ..SimConfig::default() };
        let base = simulate_with_control(&eq, &ControlLaw::FixedStart { spike: None }, &cfg).unwrap();
        let sp = Spike { player: Player::Leader, delta: vec![0.5], steps: 5 };
        let pert = simulate_with_control(&eq, &ControlLaw::FixedStart { spike: Some(sp) }, &cfg).unwrap();
        assert_eq!(base.x, pert.x);
        assert_eq!(base.v, pert.v);
        assert!(base.u.as_ref().unwrap().iter().all(|&u| u == 0.0));
        let dt = eq.disc.grid.dt;
        let (r1, rb1) = (|k| eq.disc.r1.at(k, 0)[(0, 0)], |k| eq.disc.rbar1.at(k, 0)[(0, 0)]);
        let expected: f64 = (0..5).map(|k| (if k == 0 { 0.5 } else { 1.0 }) * dt * 0.25 * (r1(k) + rb1(k))).sum();
        assert!((pert.j1.mean - base.j1.mean - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_cost_oracle() {
        let mut spec = presets::case1();
        for k in [&mut spec.costs.q1, &mut spec.costs.qbar1, &mut spec.costs.q2, &mut spec.costs.qbar2] {
            *k = Kernel::scalar(0.0);
        }
        for m in [&mut spec.terminal.m1, &mut spec.terminal.mbar1, &mut spec.terminal.m2, &mut spec.terminal.mbar2] {
            *m = TimeFn::constant(Mat::scalar(0.0));
        }
        let eq = eq_for(&spec, 1e-2);
        assert_eq!(eq.follower.p.max_abs(), 0.0);
        assert_eq!(eq.follower.z.max_abs(), 0.0);
        let rep = mean_system_oracle(&eq, 0).unwrap();
        assert_eq!(rep.get("follower"), Some(0.0));
        assert_eq!(rep.get("leader"), Some(0.0));
    }

    #[test]
    fn oracles_converge_at_first_order() {
        for spec in [presets::case1(), presets::case2()] {
            let c = eq_for(&spec, 2e-2);
            let f = eq_for(&spec, 1e-2);
            let rep = mean_system_convergence(&c, &f).unwrap();
            for who in ["follower", "leader"] {
                let ratio = rep.get(&format!("{who}_ratio")).unwrap();
                assert!((1.5..=2.5).contains(&ratio), "{who}: {rep:?}");
            }
        }
    }

    #[test]
    fn oracle_at_later_start() {
        let eq = eq_for(&presets::case2(), 1e-2);
        let r0 = mean_system_oracle(&eq, 0).unwrap();
        let r = mean_system_oracle(&eq, 60).unwrap();
        for who in ["follower", "leader"] {
            assert!(r.get(who).unwrap() < 0.05, "{r:?}");
            assert!(r0.get(who).unwrap() < 0.05, "{r0:?}");
        }
    }

    #[test]
    fn lambda_diagonal_vanishes_and_first_step_halves() {
        let spec = presets::case2();
        let c = eq_for(&spec, 2e-2);
        let f = eq_for(&spec, 1e-2);
        let rep = lambda_residual(&c, &f).unwrap();
        assert!(rep.get("max_diagonal").unwrap() <= 1e-12, "{rep:?}");
        assert!(rep.get("first_step_fine").unwrap() > 0.0);
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn equal_starts_are_identical() {
        let rep = time_consistency_check(&presets::case1(), 1e-2, 0.6, 0.6).unwrap();
        assert_eq!(rep.get("gamma_u"), Some(0.0));
        assert_eq!(rep.get("gamma_v"), Some(0.0));
        assert!(time_consistency_check(&presets::case1(), 1e-2, 0.6, 0.3).is_err());
    }

    #[test]
    fn classical_reduction() {
        let rep = classical_lq_check(&presets::classical_lq(), 1e-2).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(classical_lq_check(&presets::case1(), 1e-2).is_err());
    }

    #[test]
    fn standard_riccati_scalar_closed_form() {
        let spec = presets::scalar_analytic();
        let grid = GridSpec::for_spec(&spec, 0.1).unwrap();
        let p = standard_riccati(&spec, &grid).unwrap();
        for (k, m) in p.iter().enumerate() {
            assert!((m[(0, 0)] - 1.0 / (2.0 - grid.time(k))).abs() < 1e-9);
        }
    }

    #[test]
    fn escape_scan_flags_blow_up() {
        let ok = escape_scan(&presets::case2(), &[6e-2, 3e-2, 1.5e-2]).unwrap();
        assert!(ok.passed, "{ok:?}");
        let mut spec = presets::case1();
        spec.costs.r2 = Kernel::scalar(1e-6);
        spec.costs.q2 = Kernel::scalar(1e3);
        let bad = escape_scan(&spec, &[2e-2, 1e-2]).unwrap();
        assert!(!bad.passed);
        assert!(bad.notes.iter().any(|n| n.contains("escaped") || n.contains("singular")));
    }
}
