//! Euler–Maruyama simulation of the closed-loop game and Monte Carlo
//! evaluation of both players' objectives.
//!
//! Three forward models share one path engine:
//!
//! * the equilibrium state driven by the diagonal gain schedules,
//! * the fixed-start augmented system `X = (x, φ)` with `u = −Π(s,s)X`, which
//!   carries the decoupled adjoints of the problem started at `t`, optionally
//!   with a spike on either player's control,
//! * the follower's equilibrium response to an arbitrary affine leader law.
//!
//! Paths are split into batches that run in parallel; every reduction happens
//! in batch order so results do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbsde::{FbsdeCoeffs, Forcing, LinearFbsde};
use crate::follower::FollowerFeedback;
use crate::leader::{assemble_leader, leader_gain, ClosedLoopGains, Equilibrium, LeaderCoefficients, LeaderNode};
use crate::linalg::{Lu, Mat};
use crate::problem::{Discretized, GridSpec};

/// Number of batches used for standard errors.
pub const BATCHES: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub paths: usize,
    pub seed: u64,
    /// Pair path `2i+1` with the negated increments of path `2i`.
    pub antithetic: bool,
    /// Streams are keyed by this label, so runs sharing it share noise.
    pub crn_tag: String,
    /// Initial node.
    pub start: usize,
    /// Replace every increment by zero.
    pub zero_noise: bool,
    /// Keep per-path trajectories in the result.
    pub store_paths: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            paths: 10_000,
            seed: 42,
            antithetic: false,
            crn_tag: String::new(),
            start: 0,
            zero_noise: false,
            store_paths: false,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of the stream for one path.
pub fn stream_seed(seed: u64, tag: &str, path: u64) -> u64 {
    splitmix(splitmix(seed) ^ splitmix(fnv1a(tag)).rotate_left(17) ^ splitmix(path.wrapping_add(1)).rotate_left(41))
}

/// Standard normal increments `ξ_0..ξ_{len-1}` of one path.
pub fn fill_noise(cfg: &SimConfig, path: usize, out: &mut [f64]) {
    if cfg.zero_noise {
        out.fill(0.0);
        return;
    }
    let (base, sign) = if cfg.antithetic { (path / 2, if path % 2 == 1 { -1.0 } else { 1.0 }) } else { (path, 1.0) };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, &cfg.crn_tag, base as u64));
    for x in out.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *x = sign * z;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Player {
    Leader,
    Follower,
}

/// Constant offset `delta` added to one player's control on the first
/// `steps` intervals after the start node.
#[derive(Clone, Debug, PartialEq)]
pub struct Spike {
    pub player: Player,
    pub delta: Vec<f64>,
    pub steps: usize,
}

/// Leader control for [`simulate_with_control`].
#[derive(Clone, Debug)]
pub enum ControlLaw {
    /// `u = Γu x`, with the follower's response recovered nodewise from its
    /// feedback formula and the original dynamics.
    Equilibrium,
    /// `u = K(s)x + o(s)` (both indexed by absolute node; `offset` may be
    /// empty) with the follower's equilibrium response for the problem
    /// started at the initial node.
    Feedback { gain: Vec<Mat>, offset: Vec<Vec<f64>> },
    /// The augmented system of the problem started at the initial node,
    /// `u = −Π(s,s)X(s)`, optionally spiked.
    FixedStart { spike: Option<Spike> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub mean: f64,
    /// Batch-means standard error.
    pub se: f64,
    /// Standard deviation of per-path realized costs.
    pub sd: f64,
    pub batches: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub grid: GridSpec,
    pub start: usize,
    pub paths: usize,
    /// `(n, m1, m2)`
    pub dims: (usize, usize, usize),
    /// `[path][node][component]`, present when requested.
    pub x: Option<Vec<f64>>,
    pub u: Option<Vec<f64>>,
    pub v: Option<Vec<f64>>,
    /// Ensemble means per node from the start.
    pub mean_x: Vec<Vec<f64>>,
    pub mean_u: Vec<Vec<f64>>,
    pub mean_v: Vec<Vec<f64>>,
    /// Realized per-path objective values.
    pub cost1: Vec<f64>,
    pub cost2: Vec<f64>,
    pub j1: CostEstimate,
    pub j2: CostEstimate,
    pub max_path_norm: f64,
}

impl SimResult {
    pub fn nodes(&self) -> usize {
        self.grid.nodes() - self.start
    }

    /// State of one path at node offset `i` from the start.
    pub fn state(&self, path: usize, i: usize) -> Option<&[f64]> {
        let n = self.dims.0;
        let off = (path * self.nodes() + i) * n;
        self.x.as_ref().map(|x| &x[off..off + n])
    }

    /// `path,t,x…,u…,v…` rows.
    pub fn write_paths_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        let (n, m1, m2) = self.dims;
        let (Some(x), Some(u), Some(v)) = (&self.x, &self.u, &self.v) else {
            return Err(Error::Config("paths were not stored".into()));
        };
        write!(w, "path,t")?;
        for (l, d) in [("x", n), ("u", m1), ("v", m2)] {
            for i in 0..d {
                write!(w, ",{l}{}", i + 1)?;
            }
        }
        writeln!(w)?;
        let nodes = self.nodes();
        for p in 0..self.paths {
            for i in 0..nodes {
                write!(w, "{p},{}", self.grid.time(self.start + i))?;
                for (arr, d) in [(x, n), (u, m1), (v, m2)] {
                    let off = (p * nodes + i) * d;
                    for val in &arr[off..off + d] {
                        write!(w, ",{val}")?;
                    }
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }

    /// `quantity,mean,sd,se` rows for both objectives and the path bound.
    pub fn write_summary_csv(&self, w: &mut impl std::io::Write) -> Result<()> {
        writeln!(w, "quantity,mean,sd,se")?;
        writeln!(w, "J1,{},{},{}", self.j1.mean, self.j1.sd, self.j1.se)?;
        writeln!(w, "J2,{},{},{}", self.j2.mean, self.j2.sd, self.j2.se)?;
        writeln!(w, "max_abs_x,{},,", self.max_path_norm)?;
        writeln!(w, "paths,{},,", self.paths)?;
        Ok(())
    }
}

/// Quadrature weights and cost kernels frozen at an initial node.
#[derive(Clone, Debug)]
pub struct CostWeights {
    w: Vec<f64>,
    q1: Vec<Mat>,
    qbar1: Vec<Mat>,
    r1: Vec<Mat>,
    rbar1: Vec<Mat>,
    q2: Vec<Mat>,
    qbar2: Vec<Mat>,
    r2: Vec<Mat>,
    rbar2: Vec<Mat>,
    m1: Mat,
    mbar1: Mat,
    m2: Mat,
    mbar2: Mat,
}

impl CostWeights {
    pub fn new(disc: &Discretized, start: usize) -> Self {
        let grid = disc.grid;
        let len = grid.nodes() - start;
        let w = (0..len)
            .map(|i| {
                if len == 1 {
                    0.0
                } else if i == 0 || i + 1 == len {
                    0.5 * grid.dt
                } else {
                    grid.dt
                }
            })
            .collect();
        let col = |t: &crate::problem::KernelTable| (start..grid.nodes()).map(|k| t.at(k, start).clone()).collect();
        CostWeights {
            w,
            q1: col(&disc.q1),
            qbar1: col(&disc.qbar1),
            r1: col(&disc.r1),
            rbar1: col(&disc.rbar1),
            q2: col(&disc.q2),
            qbar2: col(&disc.qbar2),
            r2: col(&disc.r2),
            rbar2: col(&disc.rbar2),
            m1: disc.m1[start].clone(),
            mbar1: disc.mbar1[start].clone(),
            m2: disc.m2[start].clone(),
            mbar2: disc.mbar2[start].clone(),
        }
    }

    pub fn has_mean_field(&self) -> bool {
        let any = |v: &[Mat]| v.iter().any(|m| !m.is_zero());
        any(&self.qbar1)
            || any(&self.rbar1)
            || any(&self.qbar2)
            || any(&self.rbar2)
            || !self.mbar1.is_zero()
            || !self.mbar2.is_zero()
    }

    /// Per-path part of `(J1, J2)` from one path's `x, u, v` arrays.
    fn path_part(&self, x: &[f64], u: &[f64], v: &[f64]) -> (f64, f64) {
        let len = self.w.len();
        let (n, m1, m2) = (x.len() / len, u.len() / len, v.len() / len);
        let mut j = (0.0, 0.0);
        for i in 0..len {
            let (xi, ui, vi) = (&x[i * n..(i + 1) * n], &u[i * m1..(i + 1) * m1], &v[i * m2..(i + 1) * m2]);
            let w = self.w[i];
            j.0 += w * (self.q1[i].quad(xi) + self.r1[i].quad(ui));
            j.1 += w * (self.q2[i].quad(xi) + self.r2[i].quad(vi));
        }
        let xt = &x[(len - 1) * n..];
        (j.0 + self.m1.quad(xt), j.1 + self.m2.quad(xt))
    }

    /// Mean-field part of `(J1, J2)` from ensemble means.
    fn mean_part(&self, xb: &[f64], ub: &[f64], vb: &[f64]) -> (f64, f64) {
        self.path_like(xb, ub, vb, true)
    }

    fn path_like(&self, x: &[f64], u: &[f64], v: &[f64], barred: bool) -> (f64, f64) {
        if !barred {
            return self.path_part(x, u, v);
        }
        let len = self.w.len();
        let (n, m1, m2) = (x.len() / len, u.len() / len, v.len() / len);
        let mut j = (0.0, 0.0);
        for i in 0..len {
            let (xi, ui, vi) = (&x[i * n..(i + 1) * n], &u[i * m1..(i + 1) * m1], &v[i * m2..(i + 1) * m2]);
            let w = self.w[i];
            j.0 += w * (self.qbar1[i].quad(xi) + self.rbar1[i].quad(ui));
            j.1 += w * (self.qbar2[i].quad(xi) + self.rbar2[i].quad(vi));
        }
        let xt = &x[(len - 1) * n..];
        (j.0 + self.mbar1.quad(xt), j.1 + self.mbar2.quad(xt))
    }
}

/// Stored trajectories of an ensemble, laid out `[path][node][component]`.
#[derive(Clone, Debug)]
pub struct PathSet {
    pub paths: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

/// `(J1, J2)` estimated from stored paths started at node `start`: trapezoidal
/// running costs, terminal costs at `T`, and mean-field terms evaluated on the
/// cross-path means.
pub fn evaluate_costs(disc: &Discretized, start: usize, set: &PathSet) -> Result<(f64, f64)> {
    let cw = CostWeights::new(disc, start);
    if set.paths == 0 || (set.paths < 2 && cw.has_mean_field()) {
        return Err(Error::InsufficientPaths { paths: set.paths });
    }
    let per = |a: &[f64]| a.len() / set.paths;
    let (sx, su, sv) = (per(&set.x), per(&set.u), per(&set.v));
    let mut acc = (0.0, 0.0);
    let mut mx = vec![0.0; sx];
    let mut mu = vec![0.0; su];
    let mut mv = vec![0.0; sv];
    for p in 0..set.paths {
        let (x, u, v) = (&set.x[p * sx..(p + 1) * sx], &set.u[p * su..(p + 1) * su], &set.v[p * sv..(p + 1) * sv]);
        let j = cw.path_part(x, u, v);
        acc.0 += j.0;
        acc.1 += j.1;
        add(&mut mx, x);
        add(&mut mu, u);
        add(&mut mv, v);
    }
    let inv = 1.0 / set.paths as f64;
    for m in [&mut mx, &mut mu, &mut mv] {
        m.iter_mut().for_each(|z| *z *= inv);
    }
    let mp = cw.mean_part(&mx, &mu, &mv);
    Ok((acc.0 * inv + mp.0, acc.1 * inv + mp.1))
}

fn add(acc: &mut [f64], x: &[f64]) {
    acc.iter_mut().zip(x).for_each(|(a, b)| *a += b);
}

/// Buffers for one path.
struct PathOut {
    x: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
}

trait PathModel: Sync {
    fn dims(&self) -> (usize, usize, usize);
    /// Fills `out` for nodes `start..=N`; returns the failing step on a
    /// non-finite state.
    fn run(&self, noise: &[f64], out: &mut PathOut) -> std::result::Result<(), usize>;
}

struct Batch {
    path_j: (f64, f64),
    per_path: Vec<(f64, f64)>,
    sums: (Vec<f64>, Vec<f64>, Vec<f64>),
    max_norm: f64,
    stored: Option<(Vec<f64>, Vec<f64>, Vec<f64>)>,
}

fn run_ensemble(model: &impl PathModel, disc: &Discretized, cfg: &SimConfig) -> Result<SimResult> {
    let grid = disc.grid;
    if cfg.start >= grid.steps {
        return Err(Error::IndexOut { j: cfg.start, nodes: grid.nodes() });
    }
    let cw = CostWeights::new(disc, cfg.start);
    if cfg.paths == 0 || (cfg.paths < 2 && cw.has_mean_field()) {
        return Err(Error::InsufficientPaths { paths: cfg.paths });
    }
    let (n, m1, m2) = model.dims();
    let len = grid.nodes() - cfg.start;
    let nb = BATCHES.min(cfg.paths);
    let bounds: Vec<(usize, usize)> = (0..nb).map(|b| (b * cfg.paths / nb, (b + 1) * cfg.paths / nb)).collect();
    let batches: Vec<Result<Batch>> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let mut out = PathOut { x: vec![0.0; len * n], u: vec![0.0; len * m1], v: vec![0.0; len * m2] };
            let mut noise = vec![0.0; len - 1];
            let mut b = Batch {
                path_j: (0.0, 0.0),
                per_path: Vec::with_capacity(hi - lo),
                sums: (vec![0.0; len * n], vec![0.0; len * m1], vec![0.0; len * m2]),
                max_norm: 0.0,
                stored: cfg.store_paths.then(|| {
                    let c = hi - lo;
                    (
                        Vec::with_capacity(c * len * n),
                        Vec::with_capacity(c * len * m1),
                        Vec::with_capacity(c * len * m2),
                    )
                }),
            };
            for p in lo..hi {
                fill_noise(cfg, p, &mut noise);
                model.run(&noise, &mut out).map_err(|step| Error::NonFinitePath { path: p, step })?;
                let j = cw.path_part(&out.x, &out.u, &out.v);
                b.path_j.0 += j.0;
                b.path_j.1 += j.1;
                b.per_path.push(j);
                add(&mut b.sums.0, &out.x);
                add(&mut b.sums.1, &out.u);
                add(&mut b.sums.2, &out.v);
                b.max_norm =
                    out.x.chunks(n.max(1)).fold(b.max_norm, |m, c| m.max(c.iter().map(|z| z * z).sum::<f64>().sqrt()));
                if let Some(s) = b.stored.as_mut() {
                    s.0.extend_from_slice(&out.x);
                    s.1.extend_from_slice(&out.u);
                    s.2.extend_from_slice(&out.v);
                }
            }
            Ok(b)
        })
        .collect();
    let batches: Vec<Batch> = batches.into_iter().collect::<Result<_>>()?;

    let mut total = (0.0, 0.0);
    let mut sums = (vec![0.0; len * n], vec![0.0; len * m1], vec![0.0; len * m2]);
    let mut max_norm = 0.0_f64;
    let mut batch_j = (Vec::with_capacity(nb), Vec::with_capacity(nb));
    for (b, &(lo, hi)) in batches.iter().zip(&bounds) {
        total.0 += b.path_j.0;
        total.1 += b.path_j.1;
        add(&mut sums.0, &b.sums.0);
        add(&mut sums.1, &b.sums.1);
        add(&mut sums.2, &b.sums.2);
        max_norm = max_norm.max(b.max_norm);
        let c = (hi - lo) as f64;
        let scaled = |v: &[f64]| v.iter().map(|z| z / c).collect::<Vec<_>>();
        let mp = cw.mean_part(&scaled(&b.sums.0), &scaled(&b.sums.1), &scaled(&b.sums.2));
        batch_j.0.push(b.path_j.0 / c + mp.0);
        batch_j.1.push(b.path_j.1 / c + mp.1);
    }
    let inv = 1.0 / cfg.paths as f64;
    for s in [&mut sums.0, &mut sums.1, &mut sums.2] {
        s.iter_mut().for_each(|z| *z *= inv);
    }
    let mp = cw.mean_part(&sums.0, &sums.1, &sums.2);
    let cost1: Vec<f64> = batches.iter().flat_map(|b| b.per_path.iter().map(|j| j.0 + mp.0)).collect();
    let cost2: Vec<f64> = batches.iter().flat_map(|b| b.per_path.iter().map(|j| j.1 + mp.1)).collect();
    let estimate = |mean: f64, per: &[f64], bj: Vec<f64>| CostEstimate {
        mean,
        se: batch_se(&bj),
        sd: sample_sd(per),
        batches: bj,
    };
    let j1 = estimate(total.0 * inv + mp.0, &cost1, batch_j.0);
    let j2 = estimate(total.1 * inv + mp.1, &cost2, batch_j.1);
    let split = |v: &[f64], d: usize| v.chunks(d.max(1)).map(<[f64]>::to_vec).collect::<Vec<_>>();
    let (x, u, v) = if cfg.store_paths {
        let mut x = Vec::new();
        let mut u = Vec::new();
        let mut v = Vec::new();
        for b in &batches {
            let s = b.stored.as_ref().expect("stored");
            x.extend_from_slice(&s.0);
            u.extend_from_slice(&s.1);
            v.extend_from_slice(&s.2);
        }
        (Some(x), Some(u), Some(v))
    } else {
        (None, None, None)
    };
    Ok(SimResult {
        grid,
        start: cfg.start,
        paths: cfg.paths,
        dims: (n, m1, m2),
        x,
        u,
        v,
        mean_x: split(&sums.0, n),
        mean_u: split(&sums.1, m1),
        mean_v: split(&sums.2, m2),
        cost1,
        cost2,
        j1,
        j2,
        max_path_norm: max_norm,
    })
}

/// `sd(batches)/√B`
pub fn batch_se(b: &[f64]) -> f64 {
    if b.len() < 2 {
        return f64::NAN;
    }
    sample_sd(b) / (b.len() as f64).sqrt()
}

pub fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// `out = m·x`
fn mv(m: &Mat, x: &[f64], out: &mut [f64]) {
    m.mul_vec_into(x, out);
}

fn finite(x: &[f64]) -> bool {
    x.iter().all(|z| z.is_finite())
}

struct DiagonalModel<'a> {
    disc: &'a Discretized,
    gains: &'a ClosedLoopGains,
    start: usize,
    x0: Vec<f64>,
    /// Follower feedback per node, when the response is recovered nodewise.
    feedback: Option<Vec<crate::follower::FollowerFeedback>>,
}

impl PathModel for DiagonalModel<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        (self.disc.dims.n, self.disc.dims.m1, self.disc.dims.m2)
    }

    fn run(&self, noise: &[f64], out: &mut PathOut) -> std::result::Result<(), usize> {
        let (n, m1, m2) = self.dims();
        let dt = self.disc.grid.dt;
        let sq = dt.sqrt();
        let g = self.gains;
        let mut x = self.x0.clone();
        let mut dr = vec![0.0; n];
        let mut df = vec![0.0; n];
        let mut h = vec![0.0; n];
        let mut l = vec![0.0; n];
        let len = noise.len() + 1;
        for i in 0..len {
            let k = self.start + i;
            out.x[i * n..(i + 1) * n].copy_from_slice(&x);
            let (u, v) = (i * m1..(i + 1) * m1, i * m2..(i + 1) * m2);
            mv(&g.gamma_u[k], &x, &mut out.u[u.clone()]);
            match &self.feedback {
                None => mv(&g.gamma_v[k], &x, &mut out.v[v.clone()]),
                Some(fb) => {
                    let fb = &fb[k];
                    mv(&g.theta_h[k], &x, &mut h);
                    mv(&g.theta_l[k], &x, &mut l);
                    let vv = &mut out.v[v.clone()];
                    mv(&fb.gain_x, &x, vv);
                    fb.gain_u.mul_vec_add(&out.u[u.clone()], vv);
                    fb.gain_h.mul_vec_add(&h, vv);
                    fb.gain_l.mul_vec_add(&l, vv);
                }
            }
            if i + 1 == len {
                break;
            }
            match &self.feedback {
                None => {
                    mv(&g.psi_tilde[k], &x, &mut dr);
                    mv(&g.psibar_tilde[k], &x, &mut df);
                }
                Some(_) => {
                    let d = self.disc;
                    let (uu, vv) = (&out.u[u], &out.v[v]);
                    mv(&d.a[k], &x, &mut dr);
                    d.b1[k].mul_vec_add(uu, &mut dr);
                    d.b2[k].mul_vec_add(vv, &mut dr);
                    mv(&d.c[k], &x, &mut df);
                    d.d1[k].mul_vec_add(uu, &mut df);
                    d.d2[k].mul_vec_add(vv, &mut df);
                }
            }
            let xi = noise[i];
            for c in 0..n {
                x[c] += dt * dr[c] + sq * xi * df[c];
            }
            if !finite(&x) {
                return Err(i + 1);
            }
        }
        Ok(())
    }
}

/// Simulates `dx = Ψ̃x ds + Ψ̄̃x dW` from `x0` at `cfg.start` and records
/// `u* = Γu x`, `v* = Γv x`.
pub fn simulate_equilibrium(
    disc: &Discretized,
    gains: &ClosedLoopGains,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<SimResult> {
    if gains.psi_tilde.len() != disc.grid.nodes() {
        return Err(Error::Shape("gain schedules do not cover the grid".into()));
    }
    if x0.len() != disc.dims.n {
        return Err(Error::Shape(format!("x0 has {} components, expected {}", x0.len(), disc.dims.n)));
    }
    let model = DiagonalModel { disc, gains, start: cfg.start, x0: x0.to_vec(), feedback: None };
    run_ensemble(&model, disc, cfg)
}

/// Per-node linear maps of the fixed-start augmented closed loop.
#[derive(Clone, Debug)]
pub struct FixedStartNode {
    pub drift_x: Mat,
    pub drift_xbar: Mat,
    pub diff_x: Mat,
    pub diff_xbar: Mat,
    /// `u = −Π(s,s)X`
    pub u_x: Mat,
    /// `v = v_x·X + v_xbar·EX`
    pub v_x: Mat,
    pub v_xbar: Mat,
    /// `Y = 𝒫X + 𝒵EX`
    pub y_x: Mat,
    pub y_xbar: Mat,
    /// `L = ℓX + ℓ̄EX`
    pub l_x: Mat,
    pub l_xbar: Mat,
}

/// The augmented closed loop of the problem started at node `start`, with
/// the exact mean of its Euler scheme.
#[derive(Clone, Debug)]
pub struct FixedStartFlow {
    pub start: usize,
    pub nodes: Vec<FixedStartNode>,
    pub xbar: Vec<Vec<f64>>,
}

impl FixedStartNode {
    /// Maps at `(s_k, t_start)`.
    pub fn build(eq: &Equilibrium, lc: &LeaderCoefficients<'_>, k: usize, start: usize) -> Result<Self> {
        let disc = &eq.disc;
        let n = disc.dims.n;
        let dim = 2 * n;
        let nb: &LeaderNode = &lc.nodes[k];
        let pb = lc.pair(k, start)?;
        let p = eq.leader.p.get(k, start)?;
        let z = eq.leader.z.get(k, start)?;
        let (pi, _) = leader_gain(&eq.leader, k)?;
        let lu = Lu::factor(&(&Mat::identity(dim) - &(&p * &nb.dbar)));
        if !(lu.det().abs() > 0.0) {
            return Err(Error::NotSolved {
                stage: "leader".into(),
                status: format!("I − 𝒫𝒟̄ singular at (s={}, t={})", disc.grid.time(k), disc.grid.time(start)),
            });
        }
        let wp = lu.solve(&p);
        let l_x = &wp * &(&(&pb.a1bar - &(&nb.bbar * &pi)) + &(&nb.cbar * &p));
        let l_xbar = &wp * &(&pb.a2bar + &(&nb.cbar * &z));
        let drift_x = &(&(&pb.a1 - &(&nb.b * &pi)) + &(&nb.c * &p)) + &(&nb.d * &l_x);
        let drift_xbar = &(&pb.a2 + &(&nb.c * &z)) + &(&nb.d * &l_xbar);
        let diff_x = &(&(&pb.a1bar - &(&nb.bbar * &pi)) + &(&nb.cbar * &p)) + &(&nb.dbar * &l_x);
        let diff_xbar = &(&pb.a2bar + &(&nb.cbar * &z)) + &(&nb.dbar * &l_xbar);
        let fb = eq.fcoeffs.nodes[k].feedback(disc, k);
        let lower = |m: &Mat| m.block(n, 0, n, dim);
        let sel_x = Mat::hstack(&Mat::identity(n), &Mat::zeros(n, n));
        let u_x = -&pi;
        let v_x = &(&(&(&fb.gain_x * &sel_x) + &(&fb.gain_u * &u_x)) + &(&fb.gain_h * &lower(&p)))
            + &(&fb.gain_l * &lower(&l_x));
        let v_xbar = &(&fb.gain_h * &lower(&z)) + &(&fb.gain_l * &lower(&l_xbar));
        Ok(FixedStartNode { drift_x, drift_xbar, diff_x, diff_xbar, u_x, v_x, v_xbar, y_x: p, y_xbar: z, l_x, l_xbar })
    }
}

impl FixedStartFlow {
    pub fn new(eq: &Equilibrium, start: usize, x0: &[f64]) -> Result<Self> {
        let disc = &eq.disc;
        let n = disc.dims.n;
        if x0.len() != n {
            return Err(Error::Shape(format!("x0 has {} components, expected {}", x0.len(), n)));
        }
        let lc = assemble_leader(disc, &eq.follower, &eq.fcoeffs)?;
        let nodes =
            (start..disc.grid.nodes()).map(|k| FixedStartNode::build(eq, &lc, k, start)).collect::<Result<Vec<_>>>()?;
        let dt = disc.grid.dt;
        let mut xb = x0.to_vec();
        xb.resize(2 * n, 0.0);
        let mut xbar = Vec::with_capacity(nodes.len());
        for nd in &nodes {
            xbar.push(xb.clone());
            let m = &nd.drift_x + &nd.drift_xbar;
            let d = m.mul_vec(&xb);
            xb.iter_mut().zip(d).for_each(|(a, b)| *a += dt * b);
        }
        Ok(FixedStartFlow { start, nodes, xbar })
    }
}

/// Linear maps of the perturbation `δx` on a spike.
enum SpikeDyn {
    Follower { delta: Vec<f64>, steps: usize },
    Leader { delta: Vec<f64>, steps: usize, dh: Vec<Vec<f64>>, neg_dh: Vec<Vec<f64>>, fb: Vec<FollowerFeedback> },
}

struct FixedStartModel<'a> {
    eq: &'a Equilibrium,
    flow: &'a FixedStartFlow,
    spike: Option<SpikeDyn>,
}

impl FixedStartModel<'_> {
    fn build_spike(eq: &Equilibrium, start: usize, s: &Spike) -> Result<SpikeDyn> {
        let disc = &eq.disc;
        let (m1, m2) = (disc.dims.m1, disc.dims.m2);
        if s.steps == 0 || start + s.steps > disc.grid.steps {
            return Err(Error::Config(format!("spike of {} steps does not fit after node {start}", s.steps)));
        }
        match s.player {
            Player::Follower => {
                if s.delta.len() != m2 {
                    return Err(Error::Shape(format!("follower spike needs {m2} components")));
                }
                Ok(SpikeDyn::Follower { delta: s.delta.clone(), steps: s.steps })
            }
            Player::Leader => {
                if s.delta.len() != m1 {
                    return Err(Error::Shape(format!("leader spike needs {m1} components")));
                }
                let nn = disc.grid.steps;
                let n = disc.dims.n;
                let dt = disc.grid.dt;
                // The adjoint response to a deterministic control offset is
                // deterministic with zero diffusion.
                let mut dh = vec![vec![0.0; n]; nn + 1 - start];
                for k in (start..nn).rev() {
                    let i = k - start;
                    let du: &[f64] = if i < s.steps { &s.delta } else { &[] };
                    let tt = eq.fcoeffs.two_time(disc, &eq.follower, k + 1, start)?;
                    let next = dh[i + 1].clone();
                    let mut cur = next.clone();
                    let m = (&tt.htilde - &tt.kbar1).transpose();
                    let a = m.mul_vec(&next);
                    for c in 0..n {
                        cur[c] += dt * a[c];
                    }
                    if !du.is_empty() {
                        let b = (&tt.k1 + &tt.k2).transpose().mul_vec(du);
                        for c in 0..n {
                            cur[c] += dt * b[c];
                        }
                    }
                    dh[i] = cur;
                }
                let neg_dh = dh.iter().map(|v| v.iter().map(|z| -z).collect()).collect();
                let fb = (start..=nn).map(|k| eq.fcoeffs.nodes[k].feedback(disc, k)).collect();
                Ok(SpikeDyn::Leader { delta: s.delta.clone(), steps: s.steps, dh, neg_dh, fb })
            }
        }
    }
}

impl PathModel for FixedStartModel<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        let d = &self.eq.disc.dims;
        (d.n, d.m1, d.m2)
    }

    fn run(&self, noise: &[f64], out: &mut PathOut) -> std::result::Result<(), usize> {
        let (n, m1, m2) = self.dims();
        let disc = &self.eq.disc;
        let dt = disc.grid.dt;
        let sq = dt.sqrt();
        let start = self.flow.start;
        let dim = 2 * n;
        let mut xx = self.flow.xbar[0].clone();
        let mut dx = vec![0.0; n];
        let mut a = vec![0.0; dim];
        let mut b = vec![0.0; dim];
        let mut u = vec![0.0; m1];
        let mut v = vec![0.0; m2];
        let mut du = vec![0.0; m1];
        let mut dv = vec![0.0; m2];
        let mut t1 = vec![0.0; n];
        let mut t2 = vec![0.0; n];
        let len = noise.len() + 1;
        for i in 0..len {
            let k = start + i;
            let nd = &self.flow.nodes[i];
            let xb = &self.flow.xbar[i];
            mv(&nd.u_x, &xx, &mut u);
            mv(&nd.v_x, &xx, &mut v);
            nd.v_xbar.mul_vec_add(xb, &mut v);
            let (xo, uo, vo) =
                (&mut out.x[i * n..(i + 1) * n], &mut out.u[i * m1..(i + 1) * m1], &mut out.v[i * m2..(i + 1) * m2]);
            match &self.spike {
                None => {
                    xo.copy_from_slice(&xx[..n]);
                    uo.copy_from_slice(&u);
                    vo.copy_from_slice(&v);
                }
                Some(sp) => {
                    let on = |steps: usize| i < steps;
                    match sp {
                        SpikeDyn::Follower { delta, steps } => {
                            du.fill(0.0);
                            if on(*steps) {
                                dv.copy_from_slice(delta)
                            } else {
                                dv.fill(0.0)
                            }
                        }
                        SpikeDyn::Leader { delta, steps, dh, fb, .. } => {
                            if on(*steps) {
                                du.copy_from_slice(delta)
                            } else {
                                du.fill(0.0)
                            }
                            let fb = &fb[i];
                            mv(&fb.gain_x, &dx, &mut dv);
                            fb.gain_u.mul_vec_add(&du, &mut dv);
                            fb.gain_h.mul_vec_add(&dh[i], &mut dv);
                        }
                    }
                    for c in 0..n {
                        xo[c] = xx[c] + dx[c];
                    }
                    for c in 0..m1 {
                        uo[c] = u[c] + du[c];
                    }
                    for c in 0..m2 {
                        vo[c] = v[c] + dv[c];
                    }
                }
            }
            if i + 1 == len {
                break;
            }
            let xi = noise[i];
            mv(&nd.drift_x, &xx, &mut a);
            nd.drift_xbar.mul_vec_add(xb, &mut a);
            mv(&nd.diff_x, &xx, &mut b);
            nd.diff_xbar.mul_vec_add(xb, &mut b);
            for c in 0..dim {
                xx[c] += dt * a[c] + sq * xi * b[c];
            }
            if let Some(sp) = &self.spike {
                match sp {
                    SpikeDyn::Follower { .. } => {
                        mv(&disc.a[k], &dx, &mut t1);
                        disc.b2[k].mul_vec_add(&dv, &mut t1);
                        mv(&disc.c[k], &dx, &mut t2);
                        disc.d2[k].mul_vec_add(&dv, &mut t2);
                    }
                    SpikeDyn::Leader { neg_dh, .. } => {
                        let f = &self.eq.fcoeffs.nodes[k];
                        let mh = &neg_dh[i];
                        mv(&f.h, &dx, &mut t1);
                        f.f.mul_vec_add(&du, &mut t1);
                        f.g1.mul_vec_add(mh, &mut t1);
                        mv(&f.hbar, &dx, &mut t2);
                        f.fbar.mul_vec_add(&du, &mut t2);
                        f.gbar1.mul_vec_add(mh, &mut t2);
                    }
                }
                for c in 0..n {
                    dx[c] += dt * t1[c] + sq * xi * t2[c];
                }
            }
            if !finite(&xx) || !finite(&dx) {
                return Err(i + 1);
            }
        }
        Ok(())
    }
}

struct FeedbackNode {
    fb: FollowerFeedback,
    k: Mat,
    o: Vec<f64>,
    pp: Mat,
    wp: Mat,
    xbar: Vec<f64>,
    hbar: Vec<f64>,
}

struct FeedbackModel<'a> {
    eq: &'a Equilibrium,
    start: usize,
    x0: Vec<f64>,
    nodes: Vec<FeedbackNode>,
}

impl<'a> FeedbackModel<'a> {
    fn new(eq: &'a Equilibrium, start: usize, gain: &[Mat], offset: &[Vec<f64>], x0: &[f64]) -> Result<Self> {
        let disc = &eq.disc;
        let (n, m1) = (disc.dims.n, disc.dims.m1);
        let nodes_n = disc.grid.nodes();
        if gain.len() != nodes_n || gain.iter().any(|g| g.shape() != (m1, n)) {
            return Err(Error::Shape(format!("leader gain must be {m1}x{n} at each of {nodes_n} nodes")));
        }
        if !(offset.is_empty() || (offset.len() == nodes_n && offset.iter().all(|o| o.len() == m1))) {
            return Err(Error::Shape(format!("leader offset must have {m1} components at each node")));
        }
        let mut coeffs = Vec::with_capacity(nodes_n - start);
        let mut forcing = Vec::new();
        for k in start..nodes_n {
            let f = &eq.fcoeffs.nodes[k];
            let tt = eq.fcoeffs.two_time(disc, &eq.follower, k, start)?;
            let kk = &gain[k];
            coeffs.push(FbsdeCoeffs {
                a: &f.h + &(&f.f * kk),
                abar: Mat::zeros(n, n),
                c: -&f.g1,
                e: -&f.g2,
                sigma: &f.hbar + &(&f.fbar * kk),
                sigmabar: Mat::zeros(n, n),
                gamma: -&f.gbar1,
                eta: -&f.gbar2,
                alpha: &tt.k1.transpose() * kk,
                alphabar: &tt.k2.transpose() * kk,
                beta: tt.htilde.transpose(),
                betabar: -&tt.kbar1.transpose(),
                rho: tt.ftilde.transpose(),
                rhobar: -&tt.kbar2.transpose(),
            });
            if !offset.is_empty() {
                let o = &offset[k];
                forcing.push(Forcing {
                    f: f.f.mul_vec(o),
                    g: f.fbar.mul_vec(o),
                    r: (&tt.k1 + &tt.k2).transpose().mul_vec(o),
                });
            }
        }
        let fb = LinearFbsde {
            t: disc.grid.time(start),
            dt: disc.grid.dt,
            coeffs,
            forcing,
            g: Mat::zeros(n, n),
            gbar: Mat::zeros(n, n),
            x0: x0.to_vec(),
        };
        const SUB: usize = 10;
        let mean = fb.solve_mean(SUB)?;
        let pp = fb.decoupling(SUB)?;
        let eye = Mat::identity(n);
        let nodes = (start..nodes_n)
            .enumerate()
            .map(|(i, k)| {
                let p = pp[i * SUB].clone();
                let eta = &fb.coeffs[i].eta;
                let wp = Lu::factor(&(&eye - &(&p * eta))).solve(&p);
                FeedbackNode {
                    fb: eq.fcoeffs.nodes[k].feedback(disc, k),
                    k: gain[k].clone(),
                    o: if offset.is_empty() { vec![0.0; m1] } else { offset[k].clone() },
                    pp: p,
                    wp,
                    xbar: mean.xbar[i].clone(),
                    hbar: mean.ybar[i].clone(),
                }
            })
            .collect();
        Ok(FeedbackModel { eq, start, x0: x0.to_vec(), nodes })
    }
}

impl PathModel for FeedbackModel<'_> {
    fn dims(&self) -> (usize, usize, usize) {
        let d = &self.eq.disc.dims;
        (d.n, d.m1, d.m2)
    }

    fn run(&self, noise: &[f64], out: &mut PathOut) -> std::result::Result<(), usize> {
        let (n, m1, m2) = self.dims();
        let disc = &self.eq.disc;
        let dt = disc.grid.dt;
        let sq = dt.sqrt();
        let mut x = self.x0.clone();
        let mut h = vec![0.0; n];
        let mut l = vec![0.0; n];
        let mut dev = vec![0.0; n];
        let mut sig = vec![0.0; n];
        let mut mh = vec![0.0; n];
        let mut dr = vec![0.0; n];
        let mut df = vec![0.0; n];
        let len = noise.len() + 1;
        for i in 0..len {
            let k = self.start + i;
            let nd = &self.nodes[i];
            let f = &self.eq.fcoeffs.nodes[k];
            let fb = &nd.fb;
            out.x[i * n..(i + 1) * n].copy_from_slice(&x);
            let u = &mut out.u[i * m1..(i + 1) * m1];
            mv(&nd.k, &x, u);
            u.iter_mut().zip(&nd.o).for_each(|(a, b)| *a += b);
            for c in 0..n {
                dev[c] = x[c] - nd.xbar[c];
            }
            mv(&nd.pp, &dev, &mut h);
            h.iter_mut().zip(&nd.hbar).for_each(|(a, b)| *a += b);
            // l = W𝔓[(H̄ + F̄K)x − Ḡ1h + F̄o] = W𝔓[H̄x + F̄u − Ḡ1h]
            mv(&f.hbar, &x, &mut sig);
            f.fbar.mul_vec_add(u, &mut sig);
            for (m, z) in mh.iter_mut().zip(&h) {
                *m = -z;
            }
            f.gbar1.mul_vec_add(&mh, &mut sig);
            mv(&nd.wp, &sig, &mut l);
            let v = &mut out.v[i * m2..(i + 1) * m2];
            mv(&fb.gain_x, &x, v);
            fb.gain_u.mul_vec_add(u, v);
            fb.gain_h.mul_vec_add(&h, v);
            fb.gain_l.mul_vec_add(&l, v);
            if i + 1 == len {
                break;
            }
            let (u, v) = (&out.u[i * m1..(i + 1) * m1], &out.v[i * m2..(i + 1) * m2]);
            mv(&disc.a[k], &x, &mut dr);
            disc.b1[k].mul_vec_add(u, &mut dr);
            disc.b2[k].mul_vec_add(v, &mut dr);
            mv(&disc.c[k], &x, &mut df);
            disc.d1[k].mul_vec_add(u, &mut df);
            disc.d2[k].mul_vec_add(v, &mut df);
            let xi = noise[i];
            for c in 0..n {
                x[c] += dt * dr[c] + sq * xi * df[c];
            }
            if !finite(&x) {
                return Err(i + 1);
            }
        }
        Ok(())
    }
}

/// Simulates the game under the given leader law with the follower playing
/// its equilibrium response. The initial state is the problem's `x0`.
pub fn simulate_with_control(eq: &Equilibrium, law: &ControlLaw, cfg: &SimConfig) -> Result<SimResult> {
    let x0 = &eq.spec.x0;
    simulate_with_control_from(eq, law, x0, cfg)
}

/// As [`simulate_with_control`] from an explicit initial state.
pub fn simulate_with_control_from(
    eq: &Equilibrium,
    law: &ControlLaw,
    x0: &[f64],
    cfg: &SimConfig,
) -> Result<SimResult> {
    let disc = &eq.disc;
    if x0.len() != disc.dims.n {
        return Err(Error::Shape(format!("x0 has {} components, expected {}", x0.len(), disc.dims.n)));
    }
    match law {
        ControlLaw::Equilibrium => {
            let fb = (0..disc.grid.nodes()).map(|k| eq.fcoeffs.nodes[k].feedback(disc, k)).collect();
            let model = DiagonalModel { disc, gains: &eq.gains, start: cfg.start, x0: x0.to_vec(), feedback: Some(fb) };
            run_ensemble(&model, disc, cfg)
        }
        ControlLaw::Feedback { gain, offset } => {
            let model = FeedbackModel::new(eq, cfg.start, gain, offset, x0)?;
            run_ensemble(&model, disc, cfg)
        }
        ControlLaw::FixedStart { spike } => {
            let flow = FixedStartFlow::new(eq, cfg.start, x0)?;
            let spike = spike.as_ref().map(|s| FixedStartModel::build_spike(eq, cfg.start, s)).transpose()?;
            let model = FixedStartModel { eq, flow: &flow, spike };
            run_ensemble(&model, disc, cfg)
        }
    }
}
