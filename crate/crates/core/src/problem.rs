//! Game data: dynamics, two-time cost kernels, terminal weights, the shared
//! time grid, and the positivity checks every solver relies on.

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Name, actual shape and expected shape of one coefficient.
type ShapeCheck<'a> = (&'a str, (usize, usize), (usize, usize));

/// Tolerance for snapping times to grid nodes.
const NODE_TOL: f64 = 1e-9;

/// Uniform grid shared by both time arguments: `t_k = t0 + k·dt`, `k = 0..=steps`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t0: f64,
    pub dt: f64,
    pub steps: usize,
}

impl GridSpec {
    pub fn new(t0: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !(t_end > t0) {
            return Err(Error::GridMismatch { t0, t_end, dt });
        }
        let ratio = (t_end - t0) / dt;
        let steps = ratio.round();
        if (ratio - steps).abs() > NODE_TOL * ratio.max(1.0) {
            return Err(Error::GridMismatch { t0, t_end, dt });
        }
        let steps = steps as usize;
        if steps < 2 {
            return Err(Error::GridTooCoarse { steps });
        }
        Ok(GridSpec { t0, dt, steps })
    }

    pub fn for_spec(spec: &ProblemSpec, dt: f64) -> Result<Self> {
        GridSpec::new(spec.horizon.t0, spec.horizon.t_end, dt)
    }

    /// Number of nodes, `N + 1`.
    #[inline]
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    #[inline]
    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    #[inline]
    pub fn t_end(&self) -> f64 {
        self.time(self.steps)
    }

    /// `s_k − t_j` computed from the index gap so that equal gaps give equal lags.
    #[inline]
    pub fn lag(&self, k: usize, j: usize) -> f64 {
        (k - j) as f64 * self.dt
    }

    /// Index of the node at time `t`, if `t` is a node.
    pub fn node_of(&self, t: f64) -> Option<usize> {
        let x = (t - self.t0) / self.dt;
        let k = x.round();
        if k < 0.0 || (x - k).abs() > 1e-6 || k as usize > self.steps {
            None
        } else {
            Some(k as usize)
        }
    }

    /// Grid with the same step on `[t_k, T]`.
    pub fn suffix(&self, k: usize) -> GridSpec {
        GridSpec { t0: self.time(k), dt: self.dt, steps: self.steps - k }
    }
}

/// Time-indexed matrix function `f(t)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TimeFn {
    Constant {
        value: Mat,
    },
    /// `coeff · t²`
    QuadraticT {
        coeff: Mat,
    },
    /// Values at `t0 + i·dt`.
    Table {
        t0: f64,
        dt: f64,
        values: Vec<Mat>,
    },
}

impl<'de> Deserialize<'de> for TimeFn {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(tag = "kind", rename_all = "snake_case")]
        enum Tagged {
            Constant { value: Mat },
            QuadraticT { coeff: Mat },
            Table { t0: f64, dt: f64, values: Vec<Mat> },
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Plain(Mat),
            Tagged(Tagged),
        }
        Ok(match Repr::deserialize(d)? {
            Repr::Plain(value) | Repr::Tagged(Tagged::Constant { value }) => TimeFn::Constant { value },
            Repr::Tagged(Tagged::QuadraticT { coeff }) => TimeFn::QuadraticT { coeff },
            Repr::Tagged(Tagged::Table { t0, dt, values }) => TimeFn::Table { t0, dt, values },
        })
    }
}

impl TimeFn {
    pub fn constant(value: Mat) -> Self {
        TimeFn::Constant { value }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            TimeFn::Constant { value } => value.shape(),
            TimeFn::QuadraticT { coeff } => coeff.shape(),
            TimeFn::Table { values, .. } => values.first().map_or((0, 0), Mat::shape),
        }
    }

    pub fn eval(&self, t: f64) -> Result<Mat> {
        match self {
            TimeFn::Constant { value } => Ok(value.clone()),
            TimeFn::QuadraticT { coeff } => Ok(coeff.scale(t * t)),
            TimeFn::Table { t0, dt, values } => {
                let x = (t - t0) / dt;
                let i = x.round();
                if i < 0.0 || (x - i).abs() > 1e-6 || i as usize >= values.len() {
                    return Err(Error::OffGrid { name: "table".into(), time: t });
                }
                Ok(values[i as usize].clone())
            }
        }
    }

    fn is_constant(&self) -> bool {
        matches!(self, TimeFn::Constant { .. })
    }
}

/// Two-time kernel `K(s, t)`, defined for `t ≤ s`.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    Constant {
        value: Mat,
    },
    /// `(a + b(s − t))^(−c) · base`
    #[serde(rename = "powerlaw")]
    PowerLaw {
        a: f64,
        b: f64,
        c: f64,
        base: Mat,
    },
    /// `values[k][j]` at `(t0 + k·dt, t0 + j·dt)`, `j ≤ k`.
    Table {
        t0: f64,
        dt: f64,
        values: Vec<Vec<Mat>>,
    },
}

impl<'de> Deserialize<'de> for Kernel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(tag = "kind", rename_all = "snake_case")]
        enum Tagged {
            Constant {
                value: Mat,
            },
            #[serde(rename = "powerlaw")]
            PowerLaw {
                a: f64,
                b: f64,
                c: f64,
                base: Mat,
            },
            Table {
                t0: f64,
                dt: f64,
                values: Vec<Vec<Mat>>,
            },
        }
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Plain(Mat),
            Tagged(Tagged),
        }
        Ok(match Repr::deserialize(d)? {
            Repr::Plain(value) | Repr::Tagged(Tagged::Constant { value }) => Kernel::Constant { value },
            Repr::Tagged(Tagged::PowerLaw { a, b, c, base }) => Kernel::PowerLaw { a, b, c, base },
            Repr::Tagged(Tagged::Table { t0, dt, values }) => Kernel::Table { t0, dt, values },
        })
    }
}

impl Kernel {
    pub fn constant(value: Mat) -> Self {
        Kernel::Constant { value }
    }

    pub fn scalar(x: f64) -> Self {
        Kernel::Constant { value: Mat::scalar(x) }
    }

    pub fn power_law(a: f64, b: f64, c: f64, base: Mat) -> Self {
        Kernel::PowerLaw { a, b, c, base }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            Kernel::Constant { value } => value.shape(),
            Kernel::PowerLaw { base, .. } => base.shape(),
            Kernel::Table { values, .. } => values.first().and_then(|r| r.first()).map_or((0, 0), Mat::shape),
        }
    }

    /// Value depends on `s − t` only.
    pub fn is_lag_only(&self) -> bool {
        !matches!(self, Kernel::Table { .. })
    }

    /// Evaluates at lag `s − t ≥ 0`; tables are excluded.
    fn at_lag(&self, lag: f64) -> Mat {
        match self {
            Kernel::Constant { value } => value.clone(),
            Kernel::PowerLaw { a, b, c, base } => base.scale((a + b * lag).powf(-c)),
            Kernel::Table { .. } => unreachable!("tables are not lag-only"),
        }
    }

    /// Lipschitz bound in `s` over lags in `[0, max_lag]` (entrywise max-norm).
    pub fn lipschitz_bound(&self, max_lag: f64) -> Option<f64> {
        match self {
            Kernel::Constant { .. } => Some(0.0),
            Kernel::PowerLaw { a, b, c, base } => {
                let lo = a.min(a + b * max_lag);
                (lo > 0.0).then(|| c.abs() * b.abs() * lo.powf(-c - 1.0) * base.max_abs())
            }
            Kernel::Table { .. } => None,
        }
    }
}

/// `K(s, t)` for `t ≤ s`.
pub fn eval_kernel(k: &Kernel, s: f64, t: f64) -> Result<Mat> {
    if s < t - 1e-12 {
        return Err(Error::Domain { s, t });
    }
    match k {
        Kernel::Table { t0, dt, values } => {
            let node = |x: f64| {
                let y = (x - t0) / dt;
                let i = y.round();
                (i >= 0.0 && (y - i).abs() <= 1e-6).then_some(i as usize)
            };
            let off = || Error::OffGrid { name: "kernel table".into(), time: s };
            let (kk, jj) = (node(s).ok_or_else(off)?, node(t).ok_or_else(off)?);
            values.get(kk).and_then(|row| row.get(jj)).cloned().ok_or_else(off)
        }
        _ => Ok(k.at_lag((s - t).max(0.0))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub t0: f64,
    #[serde(rename = "T")]
    pub t_end: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dynamics {
    #[serde(rename = "A")]
    pub a: TimeFn,
    #[serde(rename = "B1")]
    pub b1: TimeFn,
    #[serde(rename = "B2")]
    pub b2: TimeFn,
    #[serde(rename = "C")]
    pub c: TimeFn,
    #[serde(rename = "D1")]
    pub d1: TimeFn,
    #[serde(rename = "D2")]
    pub d2: TimeFn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Costs {
    #[serde(rename = "Q1")]
    pub q1: Kernel,
    #[serde(rename = "Qbar1")]
    pub qbar1: Kernel,
    #[serde(rename = "R1")]
    pub r1: Kernel,
    #[serde(rename = "Rbar1")]
    pub rbar1: Kernel,
    #[serde(rename = "Q2")]
    pub q2: Kernel,
    #[serde(rename = "Qbar2")]
    pub qbar2: Kernel,
    #[serde(rename = "R2")]
    pub r2: Kernel,
    #[serde(rename = "Rbar2")]
    pub rbar2: Kernel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Terminal {
    #[serde(rename = "M1")]
    pub m1: TimeFn,
    #[serde(rename = "Mbar1")]
    pub mbar1: TimeFn,
    #[serde(rename = "M2")]
    pub m2: TimeFn,
    #[serde(rename = "Mbar2")]
    pub mbar2: TimeFn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub dims: Dims,
    pub horizon: Horizon,
    pub dynamics: Dynamics,
    pub costs: Costs,
    pub terminal: Terminal,
    pub x0: Vec<f64>,
}

impl ProblemSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ProblemSpec = serde_json::from_str(text)?;
        spec.check_shapes()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    /// All coefficients zero except identity control weights `R1 = R2 = I`.
    pub fn zeros(dims: Dims, t0: f64, t_end: f64) -> Self {
        let Dims { n, m1, m2 } = dims;
        let c = |r, k| TimeFn::constant(Mat::zeros(r, k));
        let z = |r| Kernel::constant(Mat::zeros(r, r));
        ProblemSpec {
            dims,
            horizon: Horizon { t0, t_end },
            dynamics: Dynamics { a: c(n, n), b1: c(n, m1), b2: c(n, m2), c: c(n, n), d1: c(n, m1), d2: c(n, m2) },
            costs: Costs {
                q1: z(n),
                qbar1: z(n),
                r1: Kernel::constant(Mat::identity(m1)),
                rbar1: z(m1),
                q2: z(n),
                qbar2: z(n),
                r2: Kernel::constant(Mat::identity(m2)),
                rbar2: z(m2),
            },
            terminal: Terminal { m1: c(n, n), mbar1: c(n, n), m2: c(n, n), mbar2: c(n, n) },
            x0: vec![0.0; n],
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "case1" => Ok(presets::case1()),
            "case2" => Ok(presets::case2()),
            other => Err(Error::UnknownPreset(other.to_string())),
        }
    }

    /// Copy of the problem restarted at `t0` (same data, shorter horizon).
    pub fn with_start(&self, t0: f64) -> Self {
        let mut s = self.clone();
        s.horizon.t0 = t0;
        s
    }

    pub fn check_shapes(&self) -> Result<()> {
        let Dims { n, m1, m2 } = self.dims;
        if n == 0 || m1 == 0 || m2 == 0 {
            return Err(Error::Shape("dimensions must be positive".into()));
        }
        let d = &self.dynamics;
        let c = &self.costs;
        let tm = &self.terminal;
        let fns: [ShapeCheck; 10] = [
            ("A", d.a.shape(), (n, n)),
            ("B1", d.b1.shape(), (n, m1)),
            ("B2", d.b2.shape(), (n, m2)),
            ("C", d.c.shape(), (n, n)),
            ("D1", d.d1.shape(), (n, m1)),
            ("D2", d.d2.shape(), (n, m2)),
            ("M1", tm.m1.shape(), (n, n)),
            ("Mbar1", tm.mbar1.shape(), (n, n)),
            ("M2", tm.m2.shape(), (n, n)),
            ("Mbar2", tm.mbar2.shape(), (n, n)),
        ];
        let kernels: [ShapeCheck; 8] = [
            ("Q1", c.q1.shape(), (n, n)),
            ("Qbar1", c.qbar1.shape(), (n, n)),
            ("R1", c.r1.shape(), (m1, m1)),
            ("Rbar1", c.rbar1.shape(), (m1, m1)),
            ("Q2", c.q2.shape(), (n, n)),
            ("Qbar2", c.qbar2.shape(), (n, n)),
            ("R2", c.r2.shape(), (m2, m2)),
            ("Rbar2", c.rbar2.shape(), (m2, m2)),
        ];
        for (name, got, want) in fns.iter().chain(kernels.iter()) {
            if got != want {
                return Err(Error::Shape(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        if self.x0.len() != n {
            return Err(Error::Shape(format!("x0 has length {}, expected {n}", self.x0.len())));
        }
        if !(self.horizon.t_end > self.horizon.t0) {
            return Err(Error::Config("horizon needs T > t0".into()));
        }
        for (name, k) in self.kernels() {
            if let Kernel::PowerLaw { a, .. } = k {
                if !(*a > 0.0) {
                    return Err(Error::Config(format!("{name}: power-law kernel needs a > 0")));
                }
            }
        }
        Ok(())
    }

    pub fn kernels(&self) -> [(&'static str, &Kernel); 8] {
        let c = &self.costs;
        [
            ("Q1", &c.q1),
            ("Qbar1", &c.qbar1),
            ("R1", &c.r1),
            ("Rbar1", &c.rbar1),
            ("Q2", &c.q2),
            ("Qbar2", &c.qbar2),
            ("R2", &c.r2),
            ("Rbar2", &c.rbar2),
        ]
    }

    /// Coefficients and weights independent of the initial time (the
    /// classical setting): constant dynamics and lag-free kernels.
    pub fn is_time_independent(&self) -> bool {
        let d = &self.dynamics;
        [&d.a, &d.b1, &d.b2, &d.c, &d.d1, &d.d2].iter().all(|f| f.is_constant())
            && self.kernels().iter().all(|(_, k)| matches!(k, Kernel::Constant { .. }))
            && [&self.terminal.m1, &self.terminal.mbar1, &self.terminal.m2, &self.terminal.mbar2]
                .iter()
                .all(|f| f.is_constant())
    }
}

/// Kernel values on the grid, either indexed by lag or stored per pair.
#[derive(Clone, Debug)]
pub enum KernelTable {
    Lag(Vec<Mat>),
    Pairs(Vec<Mat>),
}

impl KernelTable {
    fn build(name: &str, k: &Kernel, grid: &GridSpec) -> Result<Self> {
        if k.is_lag_only() {
            Ok(KernelTable::Lag((0..grid.nodes()).map(|l| k.at_lag(grid.lag(l, 0))).collect()))
        } else {
            let mut v = Vec::with_capacity(grid.nodes() * (grid.nodes() + 1) / 2);
            for kk in 0..grid.nodes() {
                for j in 0..=kk {
                    v.push(eval_kernel(k, grid.time(kk), grid.time(j)).map_err(|e| match e {
                        Error::OffGrid { time, .. } => Error::OffGrid { name: name.into(), time },
                        e => e,
                    })?);
                }
            }
            Ok(KernelTable::Pairs(v))
        }
    }

    #[inline]
    pub fn at(&self, k: usize, j: usize) -> &Mat {
        match self {
            KernelTable::Lag(v) => &v[k - j],
            KernelTable::Pairs(v) => &v[k * (k + 1) / 2 + j],
        }
    }
}

/// Every coefficient of a problem sampled on a grid.
#[derive(Clone, Debug)]
pub struct Discretized {
    pub grid: GridSpec,
    pub dims: Dims,
    pub a: Vec<Mat>,
    pub b1: Vec<Mat>,
    pub b2: Vec<Mat>,
    pub c: Vec<Mat>,
    pub d1: Vec<Mat>,
    pub d2: Vec<Mat>,
    pub q1: KernelTable,
    pub qbar1: KernelTable,
    pub r1: KernelTable,
    pub rbar1: KernelTable,
    pub q2: KernelTable,
    pub qbar2: KernelTable,
    pub r2: KernelTable,
    pub rbar2: KernelTable,
    pub m1: Vec<Mat>,
    pub mbar1: Vec<Mat>,
    pub m2: Vec<Mat>,
    pub mbar2: Vec<Mat>,
}

impl Discretized {
    pub fn new(spec: &ProblemSpec, grid: &GridSpec) -> Result<Self> {
        spec.check_shapes()?;
        let nodes = |name: &str, f: &TimeFn| -> Result<Vec<Mat>> {
            (0..grid.nodes())
                .map(|k| {
                    f.eval(grid.time(k)).map_err(|e| match e {
                        Error::OffGrid { time, .. } => Error::OffGrid { name: name.into(), time },
                        e => e,
                    })
                })
                .collect()
        };
        let d = &spec.dynamics;
        let c = &spec.costs;
        let tm = &spec.terminal;
        Ok(Discretized {
            grid: *grid,
            dims: spec.dims,
            a: nodes("A", &d.a)?,
            b1: nodes("B1", &d.b1)?,
            b2: nodes("B2", &d.b2)?,
            c: nodes("C", &d.c)?,
            d1: nodes("D1", &d.d1)?,
            d2: nodes("D2", &d.d2)?,
            q1: KernelTable::build("Q1", &c.q1, grid)?,
            qbar1: KernelTable::build("Qbar1", &c.qbar1, grid)?,
            r1: KernelTable::build("R1", &c.r1, grid)?,
            rbar1: KernelTable::build("Rbar1", &c.rbar1, grid)?,
            q2: KernelTable::build("Q2", &c.q2, grid)?,
            qbar2: KernelTable::build("Qbar2", &c.qbar2, grid)?,
            r2: KernelTable::build("R2", &c.r2, grid)?,
            rbar2: KernelTable::build("Rbar2", &c.rbar2, grid)?,
            m1: nodes("M1", &tm.m1)?,
            mbar1: nodes("Mbar1", &tm.mbar1)?,
            m2: nodes("M2", &tm.m2)?,
            mbar2: nodes("Mbar2", &tm.mbar2)?,
        })
    }

    /// `R̂2(s_k, t_j) = R2 + R̄2`
    pub fn rhat2(&self, k: usize, j: usize) -> Mat {
        self.r2.at(k, j) + self.rbar2.at(k, j)
    }

    /// `R̂1(s_k, t_j) = R1 + R̄1`
    pub fn rhat1(&self, k: usize, j: usize) -> Mat {
        self.r1.at(k, j) + self.rbar1.at(k, j)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationOptions {
    /// Strict positivity threshold on the smallest eigenvalue.
    pub eps_pd: f64,
    /// Largest tolerated `|K − Kᵀ|` entry.
    pub eps_sym: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions { eps_pd: 1e-10, eps_sym: 1e-12 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub passed: bool,
    /// Smallest eigenvalue found and where.
    pub min_eigenvalue: f64,
    pub at_s: f64,
    pub at_t: f64,
    pub message: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub eps_pd: f64,
    pub conditions: Vec<ConditionResult>,
}

impl ValidationReport {
    pub fn failures(&self) -> impl Iterator<Item = &ConditionResult> {
        self.conditions.iter().filter(|c| !c.passed)
    }
}

/// Checks the positivity conditions on every grid pair `t_j ≤ s_k`.
pub fn validate(spec: &ProblemSpec, grid: &GridSpec, opts: &ValidationOptions) -> Result<ValidationReport> {
    let expected = GridSpec::for_spec(spec, grid.dt)?;
    if expected.steps != grid.steps || (expected.t0 - grid.t0).abs() > NODE_TOL {
        return Err(Error::GridMismatch { t0: spec.horizon.t0, t_end: spec.horizon.t_end, dt: grid.dt });
    }
    let disc = Discretized::new(spec, grid)?;
    let pairs = pair_list(&disc);

    for (name, table) in [
        ("Q1", &disc.q1),
        ("Qbar1", &disc.qbar1),
        ("R1", &disc.r1),
        ("Rbar1", &disc.rbar1),
        ("Q2", &disc.q2),
        ("Qbar2", &disc.qbar2),
        ("R2", &disc.r2),
        ("Rbar2", &disc.rbar2),
    ] {
        for &(k, j) in &pairs {
            let asym = table.at(k, j).asymmetry();
            if asym > opts.eps_sym {
                return Err(Error::NonSymmetricKernel {
                    name: name.into(),
                    s: grid.time(k),
                    t: grid.time(j),
                    asymmetry: asym,
                });
            }
        }
    }
    for (name, f) in [("M1", &disc.m1), ("Mbar1", &disc.mbar1), ("M2", &disc.m2), ("Mbar2", &disc.mbar2)] {
        for (j, m) in f.iter().enumerate() {
            let asym = m.asymmetry();
            if asym > opts.eps_sym {
                return Err(Error::NonSymmetricKernel {
                    name: name.into(),
                    s: grid.time(j),
                    t: grid.time(j),
                    asymmetry: asym,
                });
            }
        }
    }

    let mut conditions = Vec::new();
    for (i, q, qbar, r, rbar, m, mbar) in [
        (1, &disc.q1, &disc.qbar1, &disc.r1, &disc.rbar1, &disc.m1, &disc.mbar1),
        (2, &disc.q2, &disc.qbar2, &disc.r2, &disc.rbar2, &disc.m2, &disc.mbar2),
    ] {
        let kernel_check = |label: String, strict: bool, f: &dyn Fn(usize, usize) -> Mat| {
            let mut worst = (f64::INFINITY, 0, 0);
            for &(k, j) in &pairs {
                let e = f(k, j).sym_min_eigenvalue();
                if e < worst.0 || e.is_nan() {
                    worst = (e, k, j);
                }
            }
            condition(label, strict, opts.eps_pd, worst.0, grid.time(worst.1), grid.time(worst.2))
        };
        conditions.push(kernel_check(format!("Q_{i} ⪰ 0"), false, &|k, j| q.at(k, j).clone()));
        conditions.push(kernel_check(format!("Q_{i} + Q̄_{i} ⪰ 0"), false, &|k, j| q.at(k, j) + qbar.at(k, j)));
        let terminal_check = |label: String, f: &dyn Fn(usize) -> Mat| {
            let mut worst = (f64::INFINITY, 0);
            for j in 0..grid.nodes() {
                let e = f(j).sym_min_eigenvalue();
                if e < worst.0 || e.is_nan() {
                    worst = (e, j);
                }
            }
            condition(label, false, opts.eps_pd, worst.0, grid.t_end(), grid.time(worst.1))
        };
        conditions.push(terminal_check(format!("M_{i} ⪰ 0"), &|j| m[j].clone()));
        conditions.push(terminal_check(format!("M_{i} + M̄_{i} ⪰ 0"), &|j| &m[j] + &mbar[j]));
        conditions.push(kernel_check(format!("R_{i} ≻ 0"), true, &|k, j| r.at(k, j).clone()));
        conditions.push(kernel_check(format!("R_{i} + R̄_{i} ≻ 0"), true, &|k, j| r.at(k, j) + rbar.at(k, j)));
    }
    let passed = conditions.iter().all(|c| c.passed);
    Ok(ValidationReport { passed, eps_pd: opts.eps_pd, conditions })
}

/// Pairs that need checking: one per lag when every kernel is lag-only.
fn pair_list(disc: &Discretized) -> Vec<(usize, usize)> {
    let all_lag = [&disc.q1, &disc.qbar1, &disc.r1, &disc.rbar1, &disc.q2, &disc.qbar2, &disc.r2, &disc.rbar2]
        .iter()
        .all(|t| matches!(t, KernelTable::Lag(_)));
    let n = disc.grid.nodes();
    if all_lag {
        (0..n).map(|l| (l, 0)).collect()
    } else {
        (0..n).flat_map(|k| (0..=k).map(move |j| (k, j))).collect()
    }
}

fn condition(label: String, strict: bool, eps: f64, e: f64, s: f64, t: f64) -> ConditionResult {
    let passed = if strict { e > eps } else { e >= -eps };
    let message = (!passed).then(|| {
        let base = label.trim_end_matches(" ≻ 0").trim_end_matches(" ⪰ 0");
        let what = if strict { "positive definite" } else { "positive semidefinite" };
        format!("{base} not {what} (min eigenvalue {e:e} at s={s}, t={t})")
    });
    ConditionResult { condition: label, passed, min_eigenvalue: e, at_s: s, at_t: t, message }
}

pub mod presets {
    //! The two scalar examples with hyperbolic discounting, plus two
    //! reference problems with known solutions.

    use super::*;

    fn s(x: f64) -> Mat {
        Mat::scalar(x)
    }

    fn quad(c: f64) -> TimeFn {
        TimeFn::QuadraticT { coeff: s(c) }
    }

    fn pl(a: f64, b: f64, c: f64) -> Kernel {
        Kernel::power_law(a, b, c, s(1.0))
    }

    fn base(t_end: f64, d1: f64, d2: f64, rbar1: Kernel, qbar2: Kernel, rbar2: Kernel) -> ProblemSpec {
        ProblemSpec {
            dims: Dims { n: 1, m1: 1, m2: 1 },
            horizon: Horizon { t0: 0.1, t_end },
            dynamics: Dynamics {
                a: TimeFn::constant(s(-1.6)),
                b1: TimeFn::constant(s(-0.3)),
                b2: TimeFn::constant(s(1.0)),
                c: TimeFn::constant(s(0.5)),
                d1: TimeFn::constant(s(d1)),
                d2: TimeFn::constant(s(d2)),
            },
            costs: Costs {
                q1: pl(5.0, 1.2, 1.2),
                qbar1: Kernel::scalar(2.0),
                r1: pl(1.0, 0.7, 1.8),
                rbar1,
                q2: pl(10.0, 0.8, 0.5),
                qbar2,
                r2: pl(1.0, 0.2, 0.3),
                rbar2,
            },
            terminal: Terminal { m1: quad(1.3), mbar1: quad(1.3), m2: quad(2.1), mbar2: quad(2.1) },
            x0: vec![1.0],
        }
    }

    pub fn case1() -> ProblemSpec {
        base(2.2, 0.0, 0.0, Kernel::scalar(0.0), Kernel::scalar(2.0), Kernel::scalar(0.0))
    }

    pub fn case2() -> ProblemSpec {
        base(1.6, 0.7, 0.2, pl(20.0, 3.7, 0.1), pl(0.7, 3.1, 1.3), Kernel::scalar(25.0))
    }

    /// Only the follower acts and `dP/ds = P²`, `P(1) = 1`, so the follower's
    /// Riccati solution is `1/(2 − s)` and `Z ≡ 0`.
    pub fn scalar_analytic() -> ProblemSpec {
        let mut spec = ProblemSpec::zeros(Dims { n: 1, m1: 1, m2: 1 }, 0.0, 1.0);
        spec.dynamics.b2 = TimeFn::constant(s(1.0));
        spec.terminal.m2 = TimeFn::constant(s(1.0));
        spec.x0 = vec![1.0];
        spec
    }

    /// Case II dynamics with undiscounted weights and no mean-field terms, so
    /// the follower's equation reduces to the standard stochastic Riccati
    /// equation.
    pub fn classical_lq() -> ProblemSpec {
        let mut spec = case2();
        spec.costs = Costs {
            q1: Kernel::scalar(5.0),
            qbar1: Kernel::scalar(0.0),
            r1: Kernel::scalar(1.0),
            rbar1: Kernel::scalar(0.0),
            q2: Kernel::scalar(10.0),
            qbar2: Kernel::scalar(0.0),
            r2: Kernel::scalar(1.0),
            rbar2: Kernel::scalar(0.0),
        };
        spec.terminal = Terminal {
            m1: TimeFn::constant(s(1.3)),
            mbar1: TimeFn::constant(s(0.0)),
            m2: TimeFn::constant(s(2.1)),
            mbar2: TimeFn::constant(s(0.0)),
        };
        spec
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn kernel_examples() {
        let c1 = presets::case1();
        assert_eq!(eval_kernel(&c1.costs.r1, 0.7, 0.7).unwrap(), Mat::scalar(1.0));
        assert_relative_eq!(c1.terminal.m2.eval(0.1).unwrap()[(0, 0)], 0.021, epsilon = 1e-15);
        assert_eq!(eval_kernel(&c1.costs.qbar1, 1.9, 0.3).unwrap(), Mat::scalar(2.0));
        assert_relative_eq!(eval_kernel(&c1.costs.q1, 1.1, 0.1).unwrap()[(0, 0)], 6.2_f64.powf(-1.2), epsilon = 1e-15);
    }

    #[test]
    fn kernel_domain_error() {
        let k = Kernel::scalar(1.0);
        assert!(matches!(eval_kernel(&k, 0.2, 0.5), Err(Error::Domain { .. })));
    }

    #[test]
    fn grid_construction() {
        let g = GridSpec::new(0.1, 2.2, 1e-3).unwrap();
        assert_eq!(g.steps, 2100);
        assert_relative_eq!(g.t_end(), 2.2, epsilon = 1e-12);
        assert!(matches!(GridSpec::new(0.0, 1.0, 0.3), Err(Error::GridMismatch { .. })));
        assert!(matches!(GridSpec::new(0.0, 1.0, 1.0), Err(Error::GridTooCoarse { .. })));
        assert_eq!(g.node_of(0.6), Some(500));
        assert_eq!(g.node_of(0.6005), None);
    }

    #[test]
    fn presets_validate() {
        for spec in [presets::case1(), presets::case2()] {
            let grid = GridSpec::for_spec(&spec, 1e-2).unwrap();
            let rep = validate(&spec, &grid, &ValidationOptions::default()).unwrap();
            assert!(rep.passed, "{rep:?}");
            assert_eq!(rep.conditions.len(), 12);
        }
    }

    #[test]
    fn zero_r2_fails() {
        let mut spec = presets::case1();
        spec.costs.r2 = Kernel::scalar(0.0);
        let grid = GridSpec::for_spec(&spec, 1e-2).unwrap();
        let rep = validate(&spec, &grid, &ValidationOptions::default()).unwrap();
        assert!(!rep.passed);
        let msgs: Vec<_> = rep.failures().filter_map(|c| c.message.clone()).collect();
        assert!(msgs.iter().any(|m| m.starts_with("R_2 not positive definite")), "{msgs:?}");
    }

    #[test]
    fn nonsymmetric_kernel_rejected() {
        let mut spec = presets::case1();
        spec.dims.n = 2;
        let e2 = Mat::identity(2);
        let z2 = Mat::zeros(2, 2);
        let z21 = Mat::zeros(2, 1);
        spec.dynamics = Dynamics {
            a: TimeFn::constant(e2.clone()),
            b1: TimeFn::constant(z21.clone()),
            b2: TimeFn::constant(z21.clone()),
            c: TimeFn::constant(z2.clone()),
            d1: TimeFn::constant(z21.clone()),
            d2: TimeFn::constant(z21),
        };
        let mut bad = e2.clone();
        bad[(0, 1)] = 1e-6;
        spec.costs.q1 = Kernel::constant(bad);
        for k in [&mut spec.costs.qbar1, &mut spec.costs.q2, &mut spec.costs.qbar2] {
            *k = Kernel::constant(e2.clone());
        }
        for m in [&mut spec.terminal.m1, &mut spec.terminal.mbar1, &mut spec.terminal.m2, &mut spec.terminal.mbar2] {
            *m = TimeFn::constant(z2.clone());
        }
        spec.x0 = vec![1.0, 0.0];
        let grid = GridSpec::for_spec(&spec, 0.1).unwrap();
        let err = validate(&spec, &grid, &ValidationOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonSymmetricKernel { ref name, .. } if name == "Q1"));
    }

    #[test]
    fn case2_rhat2_positive() {
        let spec = presets::case2();
        let grid = GridSpec::for_spec(&spec, 1e-2).unwrap();
        let rep = validate(&spec, &grid, &ValidationOptions::default()).unwrap();
        let c = rep.conditions.iter().find(|c| c.condition == "R_2 + R̄_2 ≻ 0").unwrap();
        assert!(c.passed && c.min_eigenvalue > 25.0);
    }

    #[test]
    fn json_round_trip_and_plain_forms() {
        let spec = presets::case2();
        let back = ProblemSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(back, spec);

        let mut v: serde_json::Value = serde_json::from_str(&spec.to_json()).unwrap();
        v["dynamics"]["A"] = serde_json::json!([[-1.6]]);
        v["costs"]["Rbar2"] = serde_json::json!({"kind": "constant", "value": [[25.0]]});
        let again = ProblemSpec::from_json(&v.to_string()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn json_shape_mismatch() {
        let mut v: serde_json::Value = serde_json::from_str(&presets::case1().to_json()).unwrap();
        v["x0"] = serde_json::json!([1.0, 2.0]);
        assert!(matches!(ProblemSpec::from_json(&v.to_string()), Err(Error::Shape(_))));
    }

    #[test]
    fn tabulated_kernel_matches_source() {
        let spec = presets::case1();
        let grid = GridSpec::for_spec(&spec, 0.1).unwrap();
        let values: Vec<Vec<Mat>> = (0..grid.nodes())
            .map(|k| (0..=k).map(|j| eval_kernel(&spec.costs.q2, grid.time(k), grid.time(j)).unwrap()).collect())
            .collect();
        let table = Kernel::Table { t0: grid.t0, dt: grid.dt, values };
        let v = eval_kernel(&table, grid.time(7), grid.time(3)).unwrap();
        let w = eval_kernel(&spec.costs.q2, grid.time(7), grid.time(3)).unwrap();
        assert_eq!(v, w);
        assert!(matches!(eval_kernel(&table, 0.1234, 0.1), Err(Error::OffGrid { .. })));
    }

    #[test]
    fn validate_is_deterministic() {
        let spec = presets::case2();
        let grid = GridSpec::for_spec(&spec, 5e-2).unwrap();
        let a = validate(&spec, &grid, &ValidationOptions::default()).unwrap();
        let b = validate(&spec, &grid, &ValidationOptions::default()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    proptest! {
        #[test]
        fn power_law_is_lipschitz(
            a in 0.1f64..20.0, b in 0.0f64..5.0, c in 0.01f64..2.0,
            t in 0.0f64..1.0, x in 0.0f64..1.0, y in 0.0f64..1.0,
        ) {
            let k = Kernel::power_law(a, b, c, Mat::scalar(1.0));
            let l = k.lipschitz_bound(1.0).unwrap();
            let fx = eval_kernel(&k, t + x, t).unwrap()[(0, 0)];
            let fy = eval_kernel(&k, t + y, t).unwrap()[(0, 0)];
            prop_assert!((fx - fy).abs() <= l * (x - y).abs() * (1.0 + 1e-9) + 1e-14);
        }

        #[test]
        fn time_independent_kernels_ignore_t(s in 0.5f64..2.0, t1 in 0.0f64..0.5, t2 in 0.0f64..0.5) {
            let mut spec = presets::case1();
            spec.costs.q1 = Kernel::scalar(3.0);
            spec.costs.r1 = Kernel::scalar(1.5);
            spec.costs.q2 = Kernel::scalar(0.5);
            spec.costs.r2 = Kernel::scalar(2.0);
            spec.terminal.m1 = TimeFn::constant(Mat::scalar(1.0));
            spec.terminal.mbar1 = TimeFn::constant(Mat::scalar(0.0));
            spec.terminal.m2 = TimeFn::constant(Mat::scalar(1.0));
            spec.terminal.mbar2 = TimeFn::constant(Mat::scalar(0.0));
            prop_assert!(spec.is_time_independent());
            for (_, k) in spec.kernels() {
                prop_assert_eq!(eval_kernel(k, s, t1).unwrap(), eval_kernel(k, s, t2).unwrap());
            }
        }
    }
}
