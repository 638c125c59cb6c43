//! Triangular two-time matrix fields `F(s_k, t_j)`, `j ≤ k`.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::problem::GridSpec;

/// Which blocks a field keeps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Storage {
    /// Every pair of the triangle.
    Full,
    /// Only the diagonal and the listed columns `t_j`.
    Reduced { columns: Vec<usize> },
}

impl Storage {
    pub fn reduced(columns: &[usize]) -> Self {
        let mut columns = columns.to_vec();
        columns.sort_unstable();
        columns.dedup();
        Storage::Reduced { columns }
    }
}

#[derive(Clone, Debug)]
pub struct TriField {
    name: String,
    grid: GridSpec,
    rows: usize,
    cols: usize,
    storage: Storage,
    /// Column `j` of a reduced field starts at block `col_base[i]`.
    col_base: Vec<usize>,
    data: Vec<f64>,
    set: Vec<bool>,
}

/// Number of blocks in a full triangle on `nodes` grid points.
pub fn triangle_blocks(nodes: usize) -> usize {
    nodes * (nodes + 1) / 2
}

impl TriField {
    pub fn new(name: &str, grid: GridSpec, rows: usize, cols: usize, storage: Storage) -> Self {
        let nodes = grid.nodes();
        let (blocks, col_base) = match &storage {
            Storage::Full => (triangle_blocks(nodes), Vec::new()),
            Storage::Reduced { columns } => {
                let mut base = Vec::with_capacity(columns.len());
                let mut next = nodes;
                for &j in columns {
                    base.push(next);
                    next += nodes.saturating_sub(j + 1);
                }
                (next, base)
            }
        };
        TriField {
            name: name.to_string(),
            grid,
            rows,
            cols,
            storage,
            col_base,
            data: vec![0.0; blocks * rows * cols],
            set: vec![false; blocks],
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn block_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn storage(&self) -> &Storage {
        &self.storage
    }

    pub fn is_full(&self) -> bool {
        self.storage == Storage::Full
    }

    pub fn block_count(&self) -> usize {
        self.set.len()
    }

    fn slot(&self, k: usize, j: usize) -> Option<usize> {
        if j > k || k > self.grid.steps {
            return None;
        }
        match &self.storage {
            Storage::Full => Some(k * (k + 1) / 2 + j),
            Storage::Reduced { columns } => {
                if j == k {
                    return Some(k);
                }
                columns.binary_search(&j).ok().map(|i| self.col_base[i] + (k - j - 1))
            }
        }
    }

    pub fn is_stored(&self, k: usize, j: usize) -> bool {
        self.slot(k, j).is_some()
    }

    pub fn is_set(&self, k: usize, j: usize) -> bool {
        self.slot(k, j).is_some_and(|i| self.set[i])
    }

    /// Stores a block; returns `false` when this storage mode drops the pair.
    pub fn set(&mut self, k: usize, j: usize, m: &Mat) -> Result<bool> {
        if m.shape() != (self.rows, self.cols) {
            return Err(Error::Shape(format!(
                "{}: block {:?} does not match {:?}",
                self.name,
                m.shape(),
                (self.rows, self.cols)
            )));
        }
        if !m.is_finite() {
            return Err(Error::NotSolved {
                stage: self.name.clone(),
                status: format!("non-finite block at (s={}, t={})", self.grid.time(k), self.grid.time(j)),
            });
        }
        let Some(i) = self.slot(k, j) else { return Ok(false) };
        let sz = self.rows * self.cols;
        self.data[i * sz..(i + 1) * sz].copy_from_slice(m.as_slice());
        self.set[i] = true;
        Ok(true)
    }

    pub fn get(&self, k: usize, j: usize) -> Result<Mat> {
        let missing = || Error::Incomplete { field: self.name.clone(), k, j };
        let i = self.slot(k, j).ok_or_else(missing)?;
        if !self.set[i] {
            return Err(missing());
        }
        let sz = self.rows * self.cols;
        Ok(Mat::from_slice(self.rows, self.cols, &self.data[i * sz..(i + 1) * sz]))
    }

    /// `k ↦ F(s_k, s_k)` for `k = 0..=N`.
    pub fn diagonal(&self) -> Result<Vec<Mat>> {
        (0..self.grid.nodes()).map(|k| self.get(k, k)).collect()
    }

    /// `s_k ↦ F(s_k, t_j)` for `k = j..=N`.
    pub fn column(&self, j: usize) -> Result<Vec<Mat>> {
        if j > self.grid.steps {
            return Err(Error::IndexOut { j, nodes: self.grid.nodes() });
        }
        (j..self.grid.nodes()).map(|k| self.get(k, j)).collect()
    }

    /// Every pair of the triangle holds a value.
    pub fn is_complete(&self) -> bool {
        self.is_full() && self.set.iter().all(|&b| b)
    }

    /// Largest entry magnitude over stored blocks.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    fn header(&self, w: &mut impl Write, with_t: bool) -> io::Result<()> {
        write!(w, "s")?;
        if with_t {
            write!(w, ",t")?;
        }
        for r in 0..self.rows {
            for c in 0..self.cols {
                write!(w, ",e{}_{}", r + 1, c + 1)?;
            }
        }
        writeln!(w)
    }

    /// One row per stored pair: `s, t, entries…` in row-major order.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        self.header(w, true)?;
        for k in 0..self.grid.nodes() {
            for j in 0..=k {
                if !self.is_set(k, j) {
                    continue;
                }
                let m = self.get(k, j)?;
                write!(w, "{},{}", self.grid.time(k), self.grid.time(j))?;
                write_entries(w, &m)?;
            }
        }
        Ok(())
    }

    /// One row per node: `s, entries of F(s,s)…`.
    pub fn write_diagonal_csv(&self, w: &mut impl Write) -> Result<()> {
        self.header(w, false)?;
        for (k, m) in self.diagonal()?.iter().enumerate() {
            write!(w, "{}", self.grid.time(k))?;
            write_entries(w, m)?;
        }
        Ok(())
    }
}

pub(crate) fn write_entries(w: &mut impl Write, m: &Mat) -> io::Result<()> {
    for x in m.as_slice() {
        write!(w, ",{x}")?;
    }
    writeln!(w)
}

/// Writes `t, entries…` rows for a node-indexed schedule.
pub fn write_schedule_csv(
    w: &mut impl Write,
    grid: &GridSpec,
    first_node: usize,
    label: &str,
    sched: &[Mat],
) -> Result<()> {
    let (r, c) = sched.first().map_or((0, 0), Mat::shape);
    write!(w, "t")?;
    for i in 0..r {
        for j in 0..c {
            write!(w, ",{label}{}_{}", i + 1, j + 1)?;
        }
    }
    writeln!(w)?;
    for (i, m) in sched.iter().enumerate() {
        write!(w, "{}", grid.time(first_node + i))?;
        write_entries(w, m)?;
    }
    Ok(())
}
