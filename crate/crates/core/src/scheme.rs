//! The recursive solver `u_h` on a 3-D lattice.
//!
//! Layer `k` holds `u_h` on `[kh, (k+1)h)`. Each step applies the one-step
//! sublinear expectation to the trilinear interpolant of the previous layer.
//! Because the interpolant is piecewise linear in `y + hq` and in
//! `x + √h·s·ξ_i` (`s = σ`), the supremum over `(q, σ)` of a step is attained
//! on the finite set of kinks and endpoints, so the lattice solver enumerates
//! those instead of searching.

pub use crate::catalog::TestFunction;

use std::io::{self, BufRead, Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::step::{search_2d, Argmax, StepContext, StepResult};
use crate::sum;
use crate::uncertainty::UncertaintyBox;

#[derive(Debug, thiserror::Error)]
pub enum SchemeError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("grid too narrow: boundary-influence bound {bound:.3e} exceeds tolerance {tolerance:.3e}")]
    GridTooNarrow { bound: f64, tolerance: f64 },
    #[error("step count {steps} with h = {h} overshoots t = 1")]
    StepMismatch { steps: usize, h: f64 },
    #[error("point {0:?} lies outside the grid")]
    OutsideGrid([f64; 3]),
    #[error("bad grid dump: {0}")]
    BadDump(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Equispaced axis with `n ≥ 2` points from `lo` to `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Axis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl Axis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        Self { lo, hi, n }
    }

    pub fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.n - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.n {
            self.hi
        } else {
            self.lo + self.step() * i as f64
        }
    }

    /// Cell index and offset for linear interpolation, clamped to the axis.
    #[inline]
    pub fn locate(&self, c: f64) -> (usize, f64) {
        let t = (c - self.lo) / self.step();
        let last = (self.n - 2) as f64;
        if !(t > 0.0) {
            (0, 0.0)
        } else if t >= last + 1.0 {
            (self.n - 2, 1.0)
        } else {
            let i = t.floor().min(last);
            (i as usize, t - i)
        }
    }

    pub fn contains(&self, c: f64) -> bool {
        c >= self.lo && c <= self.hi
    }

    fn validate(&self, name: &str) -> Result<(), SchemeError> {
        if self.n < 2 {
            return Err(SchemeError::InvalidGrid(format!("{name} axis needs ≥ 2 points, got {}", self.n)));
        }
        if self.n > u16::MAX as usize {
            return Err(SchemeError::InvalidGrid(format!("{name} axis has more than {} points", u16::MAX)));
        }
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(SchemeError::InvalidGrid(format!("{name} bounds [{}, {}] not ordered", self.lo, self.hi)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    pub x: Axis,
    pub y: Axis,
    pub z: Axis,
}

impl Grid {
    pub fn new(x: Axis, y: Axis, z: Axis) -> Result<Self, SchemeError> {
        x.validate("x")?;
        y.validate("y")?;
        z.validate("z")?;
        Ok(Self { x, y, z })
    }

    /// `|x| ≤ 6σ̄`, `|y| ≤ 2·max|γ|` (at least 1), `|z| ≤ 12`, `points` per axis.
    pub fn default_for(b: &UncertaintyBox, points: usize) -> Result<Self, SchemeError> {
        let xr = 6.0 * b.sigma_hi();
        let yr = (2.0 * b.gamma_abs_max()).max(1.0);
        Self::new(Axis::new(-xr, xr, points), Axis::new(-yr, yr, points), Axis::new(-12.0, 12.0, points))
    }

    pub fn len(&self) -> usize {
        self.x.n * self.y.n * self.z.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (ix * self.y.n + iy) * self.z.n + iz
    }

    pub fn coords(&self, ix: usize, iy: usize, iz: usize) -> [f64; 3] {
        [self.x.coord(ix), self.y.coord(iy), self.z.coord(iz)]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        self.x.contains(p[0]) && self.y.contains(p[1]) && self.z.contains(p[2])
    }

    pub fn axis(&self, i: usize) -> &Axis {
        [&self.x, &self.y, &self.z][i]
    }
}

/// Lattice values of `u_h` on one time interval, row-major with `z` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: Grid,
    pub time_index: usize,
    pub values: Vec<f64>,
    /// `‖φ‖∞` of the initial datum.
    pub sup_norm_phi: f64,
}

impl GridFunction {
    /// `φ` sampled on the lattice (layer 0).
    pub fn sample(phi: &TestFunction, grid: &Grid) -> Self {
        let mut values = vec![0.0; grid.len()];
        values.par_chunks_mut(grid.y.n * grid.z.n).enumerate().for_each(|(ix, row)| {
            let x = grid.x.coord(ix);
            for iy in 0..grid.y.n {
                let y = grid.y.coord(iy);
                for iz in 0..grid.z.n {
                    row[iy * grid.z.n + iz] = phi.eval(x, y, grid.z.coord(iz));
                }
            }
        });
        Self { grid: *grid, time_index: 0, values, sup_norm_phi: phi.sup_norm }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let mut values = Vec::with_capacity(grid.len());
        for ix in 0..grid.x.n {
            for iy in 0..grid.y.n {
                for iz in 0..grid.z.n {
                    let [x, y, z] = grid.coords(ix, iy, iz);
                    values.push(f(x, y, z));
                }
            }
        }
        let sup = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self { grid: *grid, time_index: 0, values, sup_norm_phi: sup }
    }

    #[inline]
    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.values[self.grid.index(ix, iy, iz)]
    }

    /// Trilinear interpolation, clamped to the nearest boundary point outside
    /// the box.
    pub fn interpolate(&self, x: f64, y: f64, z: f64) -> f64 {
        let g = &self.grid;
        let (a, tx) = g.x.locate(x);
        let (b, ty) = g.y.locate(y);
        let (c, tz) = g.z.locate(z);
        let v = |i, j, k| self.at(i, j, k);
        let lerp = |p: f64, q: f64, t: f64| (1.0 - t) * p + t * q;
        let z00 = lerp(v(a, b, c), v(a, b, c + 1), tz);
        let z01 = lerp(v(a, b + 1, c), v(a, b + 1, c + 1), tz);
        let z10 = lerp(v(a + 1, b, c), v(a + 1, b, c + 1), tz);
        let z11 = lerp(v(a + 1, b + 1, c), v(a + 1, b + 1, c + 1), tz);
        lerp(lerp(z00, z01, ty), lerp(z10, z11, ty), tx)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Largest `|Δu| / Δ` between lattice neighbours along `axis`.
    pub fn lipschitz_along(&self, axis: usize) -> f64 {
        let g = &self.grid;
        let (nx, ny, nz) = (g.x.n, g.y.n, g.z.n);
        let d = g.axis(axis).step();
        let mut worst = 0.0f64;
        for ix in 0..nx {
            for iy in 0..ny {
                for iz in 0..nz {
                    let (jx, jy, jz) = match axis {
                        0 => (ix + 1, iy, iz),
                        1 => (ix, iy + 1, iz),
                        _ => (ix, iy, iz + 1),
                    };
                    if jx >= nx || jy >= ny || jz >= nz {
                        continue;
                    }
                    worst = worst.max((self.at(jx, jy, jz) - self.at(ix, iy, iz)).abs() / d);
                }
            }
        }
        worst
    }

    /// CSV rows `k,x,y,z,value` (header included when `header` is set).
    pub fn write_csv(&self, w: &mut impl Write, header: bool) -> io::Result<()> {
        if header {
            writeln!(w, "k,x,y,z,value")?;
        }
        let g = &self.grid;
        for ix in 0..g.x.n {
            for iy in 0..g.y.n {
                for iz in 0..g.z.n {
                    let [x, y, z] = g.coords(ix, iy, iz);
                    writeln!(w, "{},{x},{y},{z},{}", self.time_index, self.at(ix, iy, iz))?;
                }
            }
        }
        Ok(())
    }

    /// Binary dump: 64-byte header then little-endian `f64` values.
    ///
    /// Header layout: magic `GPIDE\0` (6 bytes), version `u16`, point counts
    /// `nx, ny, nz` as `u16`, time index `u16`, then the six axis bounds as `f64`.
    pub fn write_binary(&self, w: &mut impl Write) -> io::Result<()> {
        let g = &self.grid;
        let mut head = Vec::with_capacity(HEADER_LEN);
        head.extend_from_slice(MAGIC);
        head.extend_from_slice(&DUMP_VERSION.to_le_bytes());
        for n in [g.x.n, g.y.n, g.z.n, self.time_index] {
            let n = u16::try_from(n).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "count exceeds u16"))?;
            head.extend_from_slice(&n.to_le_bytes());
        }
        for v in [g.x.lo, g.x.hi, g.y.lo, g.y.hi, g.z.lo, g.z.hi] {
            head.extend_from_slice(&v.to_le_bytes());
        }
        debug_assert_eq!(head.len(), HEADER_LEN);
        w.write_all(&head)?;
        let mut buf = Vec::with_capacity(8 * self.values.len());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    /// Inverse of [`write_binary`](Self::write_binary). `sup_norm_phi` is not
    /// stored and is set to the sup of the values read.
    pub fn read_binary(r: &mut impl Read) -> Result<Self, SchemeError> {
        let mut head = [0u8; HEADER_LEN];
        r.read_exact(&mut head)?;
        if &head[..6] != MAGIC {
            return Err(SchemeError::BadDump("bad magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes([head[o], head[o + 1]]);
        let f64_at = |o: usize| f64::from_le_bytes(head[o..o + 8].try_into().unwrap());
        if u16_at(6) != DUMP_VERSION {
            return Err(SchemeError::BadDump(format!("unsupported version {}", u16_at(6))));
        }
        let (nx, ny, nz, k) = (u16_at(8) as usize, u16_at(10) as usize, u16_at(12) as usize, u16_at(14) as usize);
        let b: Vec<f64> = (0..6).map(|i| f64_at(16 + 8 * i)).collect();
        let grid = Grid::new(Axis::new(b[0], b[1], nx), Axis::new(b[2], b[3], ny), Axis::new(b[4], b[5], nz))?;
        let mut raw = vec![0u8; 8 * grid.len()];
        r.read_exact(&mut raw)?;
        let values: Vec<f64> =
            raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let sup = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Ok(Self { grid, time_index: k, values, sup_norm_phi: sup })
    }
}

pub const MAGIC: &[u8; 6] = b"GPIDE\0";
pub const DUMP_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 64;

/// Parse the CSV written by [`GridFunction::write_csv`] (one layer, header
/// required) back into `(k, x, y, z, value)` rows.
pub fn read_csv_rows(r: impl BufRead) -> Result<Vec<(usize, [f64; 3], f64)>, SchemeError> {
    let mut lines = r.lines();
    let head = lines.next().transpose()?.unwrap_or_default();
    if head.trim() != "k,x,y,z,value" {
        return Err(SchemeError::BadDump(format!("unexpected header `{head}`")));
    }
    let mut out = Vec::new();
    for line in lines {
        let line = line?;
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(SchemeError::BadDump(format!("bad row `{line}`")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| SchemeError::BadDump(format!("{s}: {e}")));
        let k = f[0].parse::<usize>().map_err(|e| SchemeError::BadDump(e.to_string()))?;
        out.push((k, [num(f[1])?, num(f[2])?, num(f[3])?], num(f[4])?));
    }
    Ok(out)
}

/// Sparse interpolation stencil `Σ_j w_j·L(z + s ζ_j)` along `z`, as
/// `(lattice index, weight)` pairs in increasing index order.
fn z_stencil(axis: &Axis, rule_nodes: &[f64], rule_weights: &[f64], z: f64, scale: f64) -> Vec<(usize, f64)> {
    // nodes are increasing, so cells are nondecreasing and entries only grow at the tail
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(2 * rule_nodes.len());
    for (zeta, w) in rule_nodes.iter().zip(rule_weights) {
        let (i, t) = axis.locate(z + scale * zeta);
        match out.last() {
            Some(&(last, _)) if last == i + 1 => {}
            Some(&(last, _)) if last == i => out.push((i + 1, 0.0)),
            _ => {
                out.push((i, 0.0));
                out.push((i + 1, 0.0));
            }
        }
        let k = out.len();
        out[k - 2].1 += w * (1.0 - t);
        out[k - 1].1 += w * t;
    }
    out
}

/// How the lattice changes with the number of steps in a rate study.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum MeshScaling {
    /// The same grid for every `n`.
    #[default]
    Fixed,
    /// Spacing `∝ n^{-1/2}` on every axis with more than two points, equal to
    /// the configured grid at `reference_n`. The interpolation bias, about
    /// `n·Δ²`, is then the same for all `n` to leading order.
    Parabolic { reference_n: usize },
    /// Spacing `∝ 1/n`, equal to the configured grid at `reference_n`. The
    /// interpolation bias then decays like `1/n`.
    Linear { reference_n: usize },
}

impl MeshScaling {
    pub fn grid_for(&self, base: &Grid, n: usize) -> Result<Grid, SchemeError> {
        let (reference_n, power) = match *self {
            MeshScaling::Fixed => return Ok(*base),
            MeshScaling::Parabolic { reference_n } => (reference_n, 0.5),
            MeshScaling::Linear { reference_n } => (reference_n, 1.0),
        };
        if reference_n == 0 || n == 0 {
            return Err(SchemeError::InvalidGrid("mesh scaling needs n ≥ 1".into()));
        }
        let f = (reference_n as f64 / n as f64).powf(power);
        let scale = |a: &Axis| -> Result<Axis, SchemeError> {
            if a.n <= 2 {
                return Ok(*a);
            }
            let d = a.step() * f;
            let lo = (a.lo / d).floor();
            let hi = (a.hi / d).ceil();
            let pts = (hi - lo) as usize + 1;
            if pts > u16::MAX as usize {
                return Err(SchemeError::InvalidGrid(format!("{pts} points on one axis")));
            }
            Ok(Axis::new(lo * d, hi * d, pts))
        };
        Grid::new(scale(&base.x)?, scale(&base.y)?, scale(&base.z)?)
    }
}

/// Values of one `(x, y)` plane after the `z`-expectation of one corner.
struct Plane<'a> {
    data: &'a [f64],
    stride_x: usize,
    stride_y: usize,
    offset: usize,
}

impl Plane<'_> {
    #[inline]
    fn at(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.stride_x + b * self.stride_y + self.offset]
    }
}

/// Supremum over `(q, σ)` of the `(x, y)` part of a step for one plane.
///
/// The interpolant is piecewise linear in `y + hq` and in each
/// `x + √h σ ξ_i`, so the supremum sits on the grid of lattice crossings and
/// endpoints. That grid is enumerated exactly unless it has more than
/// `search.exact_limit` points, in which case the coarse-grid and
/// golden-section search runs instead.
fn plane_sup(ctx: &StepContext, grid: &Grid, plane: &Plane<'_>, x: f64, y: f64) -> (f64, f64, f64) {
    let b = &ctx.uncertainty;
    let h = ctx.h;
    let sqh = h.sqrt();
    let gauss = &ctx.gaussian;

    // q candidates: endpoints and y-lattice crossings of y + hq
    let mut qs = vec![(b.gamma_lo, b.gamma_lo)];
    if b.gamma_hi > b.gamma_lo {
        let (m0, _) = grid.y.locate(y + h * b.gamma_lo);
        let (m1, _) = grid.y.locate(y + h * b.gamma_hi);
        for m in m0..=(m1 + 1).min(grid.y.n - 1) {
            let q = (grid.y.coord(m) - y) / h;
            if q > b.gamma_lo && q < b.gamma_hi {
                qs.push((q, q));
            }
        }
        qs.push((b.gamma_hi, b.gamma_hi));
    }
    qs.sort_by(|a, c| a.0.total_cmp(&c.0));
    qs.dedup_by(|a, c| a.0 == c.0);

    // σ candidates: endpoints and x-lattice crossings of x + √h σ ξ_i
    let (s_lo, s_hi) = (b.sigma2_lo.sqrt(), b.sigma2_hi.sqrt());
    let mut ss = vec![(s_lo, b.sigma2_lo)];
    if b.sigma2_hi > b.sigma2_lo {
        for &xi in &gauss.nodes {
            if xi == 0.0 {
                continue;
            }
            let (e0, e1) = {
                let a = x + sqh * s_lo * xi;
                let c = x + sqh * s_hi * xi;
                (a.min(c), a.max(c))
            };
            let (m0, _) = grid.x.locate(e0);
            let (m1, _) = grid.x.locate(e1);
            for m in m0..=(m1 + 1).min(grid.x.n - 1) {
                let s = (grid.x.coord(m) - x) / (sqh * xi);
                if s > s_lo && s < s_hi {
                    ss.push((s, s * s));
                }
            }
        }
        ss.push((s_hi, b.sigma2_hi));
    }
    ss.sort_by(|a, c| a.0.total_cmp(&c.0));
    ss.dedup_by(|a, c| a.0 == c.0);

    if qs.len() * ss.len() > ctx.search.exact_limit {
        let eval = |q: f64, s2: f64| {
            let (bj, ty) = grid.y.locate(y + h * q);
            let s = s2.sqrt();
            sum::pairwise_map(gauss.len(), |i| {
                let (a, tx) = grid.x.locate(x + sqh * s * gauss.nodes[i]);
                let lo = (1.0 - ty) * plane.at(a, bj) + ty * plane.at(a, bj + 1);
                let hi = (1.0 - ty) * plane.at(a + 1, bj) + ty * plane.at(a + 1, bj + 1);
                gauss.weights[i] * ((1.0 - tx) * lo + tx * hi)
            })
        };
        return search_2d(eval, (b.gamma_lo, b.gamma_hi), (b.sigma2_lo, b.sigma2_hi), &ctx.search);
    }

    let ys: Vec<(usize, f64)> = qs.iter().map(|&(q, _)| grid.y.locate(y + h * q)).collect();
    let mut xs = vec![(0usize, 0.0f64); gauss.len()];
    let mut best = (f64::NEG_INFINITY, qs[0].1, ss[0].1);
    // q outer, σ inner: ties resolve on q first, then σ²
    let mut table = vec![f64::NEG_INFINITY; qs.len() * ss.len()];
    for (si, &(s, _)) in ss.iter().enumerate() {
        for (i, xi) in gauss.nodes.iter().enumerate() {
            xs[i] = grid.x.locate(x + sqh * s * xi);
        }
        for (qi, &(bj, ty)) in ys.iter().enumerate() {
            let v = sum::pairwise_map(gauss.len(), |i| {
                let (a, tx) = xs[i];
                let lo = (1.0 - ty) * plane.at(a, bj) + ty * plane.at(a, bj + 1);
                let hi = (1.0 - ty) * plane.at(a + 1, bj) + ty * plane.at(a + 1, bj + 1);
                gauss.weights[i] * ((1.0 - tx) * lo + tx * hi)
            });
            table[qi * ss.len() + si] = v;
        }
    }
    for (qi, &(_, q)) in qs.iter().enumerate() {
        for (si, &(_, s2)) in ss.iter().enumerate() {
            let v = table[qi * ss.len() + si];
            if best.0 == f64::NEG_INFINITY || ctx.search.tie_break.replaces(v, best.0) {
                best = (v, q, s2);
            }
        }
    }
    best
}

/// One step of the scheme applied to a lattice function at an arbitrary point:
/// the exact supremum of the step over the box.
pub fn grid_step(ctx: &StepContext, layer: &GridFunction, point: [f64; 3]) -> StepResult {
    let g = &layer.grid;
    let (nx, ny) = (g.x.n, g.y.n);
    let corners = ctx.uncertainty.corners();
    let mut best: Option<StepResult> = None;
    let mut planes: Vec<Vec<f64>> = Vec::new();
    for c in 0..4 {
        let rule = &ctx.wk_rules[c];
        let st = z_stencil(&g.z, &rule.nodes, &rule.weights, point[2], ctx.jump_scale());
        let mut plane = vec![0.0; nx * ny];
        for a in 0..nx {
            for bb in 0..ny {
                let base = g.index(a, bb, 0);
                plane[a * ny + bb] = sum::pairwise_map(st.len(), |m| st[m].1 * layer.values[base + st[m].0]);
            }
        }
        if planes.iter().any(|p| p == &plane) {
            continue;
        }
        let view = Plane { data: &plane, stride_x: ny, stride_y: 1, offset: 0 };
        let (v, q, s2) = plane_sup(ctx, g, &view, point[0], point[1]);
        if best.map_or(true, |b| ctx.search.tie_break.replaces(v, b.value)) {
            let (k1, k2) = corners[c];
            best = Some(StepResult { value: v, argmax: Argmax { k1, k2, q, sigma2: s2, corner: c } });
        }
        planes.push(plane);
    }
    best.expect("at least one corner")
}

/// Whether a layer is exactly constant along `y` and along `z`.
fn invariance(layer: &GridFunction) -> (bool, bool) {
    let g = &layer.grid;
    let (ny, nz) = (g.y.n, g.z.n);
    let v = &layer.values;
    let z_inv = v.chunks(nz).all(|row| row.iter().all(|&a| a == row[0]));
    let y_inv = v.chunks(ny * nz).all(|slab| (1..ny).all(|iy| slab[iy * nz..(iy + 1) * nz] == slab[..nz]));
    (y_inv, z_inv)
}

/// Apply one step at every lattice point.
///
/// A layer that is constant along `y` or `z` stays so, and is advanced on
/// one line of that axis and broadcast.
pub fn advance(ctx: &StepContext, layer: &GridFunction) -> GridFunction {
    let g = &layer.grid;
    let (ny, nz) = (g.y.n, g.z.n);
    let scale = ctx.jump_scale();
    let (y_inv, z_inv) = invariance(layer);

    // z-pass per corner: Z_c[ix, iy, iz] = Σ_m R_c[iz][m] L[ix, iy, m]
    let mut zs: Vec<Vec<f64>> = Vec::new();
    if z_inv {
        zs.push(layer.values.clone());
    } else {
        for c in 0..4 {
            let rule = &ctx.wk_rules[c];
            let stencils: Vec<Vec<(usize, f64)>> =
                (0..nz).map(|iz| z_stencil(&g.z, &rule.nodes, &rule.weights, g.z.coord(iz), scale)).collect();
            let mut out = vec![0.0; g.len()];
            out.par_chunks_mut(nz).enumerate().for_each(|(row, dst)| {
                let src = &layer.values[row * nz..(row + 1) * nz];
                for (iz, st) in stencils.iter().enumerate() {
                    dst[iz] = sum::pairwise_map(st.len(), |m| st[m].1 * src[st[m].0]);
                }
            });
            if !zs.iter().any(|p| p == &out) {
                zs.push(out);
            }
        }
    }

    let (ys, zn) = (if y_inv { 1 } else { ny }, if z_inv { 1 } else { nz });
    let mut values = vec![0.0; g.len()];
    values.par_chunks_mut(ny * nz).enumerate().for_each(|(ix, dst)| {
        let x = g.x.coord(ix);
        for iy in 0..ys {
            let y = g.y.coord(iy);
            for iz in 0..zn {
                let mut best = f64::NEG_INFINITY;
                for plane in &zs {
                    let view = Plane { data: plane, stride_x: ny * nz, stride_y: nz, offset: iz };
                    let (v, _, _) = plane_sup(ctx, g, &view, x, y);
                    if v > best {
                        best = v;
                    }
                }
                dst[iy * nz + iz] = best;
            }
            if z_inv {
                let v = dst[iy * nz];
                dst[iy * nz..(iy + 1) * nz].fill(v);
            }
        }
        if y_inv {
            let (first, rest) = dst.split_at_mut(nz);
            for chunk in rest.chunks_mut(nz) {
                chunk.copy_from_slice(first);
            }
        }
    });
    GridFunction { grid: *g, time_index: layer.time_index + 1, values, sup_norm_phi: layer.sup_norm_phi }
}

/// `S(h, point, p, v) = (p − Ê[v(point + increment)]) / h`.
pub fn apply_s(ctx: &StepContext, point: [f64; 3], p_value: f64, v: &GridFunction) -> f64 {
    (p_value - grid_step(ctx, v, point).value) / ctx.h
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolveOptions {
    /// Largest accepted boundary-influence bound.
    pub boundary_tolerance: f64,
    /// Constant of the time-regularity check; estimated from the box when absent.
    pub time_constant: Option<f64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { boundary_tolerance: 0.5, time_constant: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum CheckStatus {
    Pass,
    /// Within twice the reference constant.
    Warn,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveSummary {
    pub h: f64,
    pub steps: usize,
    pub phi: String,
    pub sup_norm_phi: f64,
    pub lipschitz_phi: f64,
    /// `max_k ‖u_k‖∞`
    pub max_sup_norm: f64,
    pub bounded_ok: bool,
    /// `max_k max_axis (Lipschitz along axis) / C_φ`
    pub lipschitz_ratio: f64,
    pub lipschitz_ok: bool,
    pub time_constant: f64,
    /// `max |u_k − u_l| / (C₀ (|k − l| h)^{1/2})` over the checked pairs.
    pub time_ratio: f64,
    pub time_status: CheckStatus,
    /// Accumulated bound on the effect of clamping and of the discarded jump mass.
    pub boundary_bound: f64,
    pub boundary_tolerance: f64,
    pub tail_remainder: f64,
}

impl SolveSummary {
    pub fn invariants_ok(&self) -> bool {
        self.bounded_ok && self.lipschitz_ok && self.time_status != CheckStatus::Fail
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub layers: Vec<GridFunction>,
    pub summary: SolveSummary,
}

impl Solution {
    pub fn last(&self) -> &GridFunction {
        self.layers.last().expect("layer 0 always present")
    }
}

/// Bound on `|u_h − u_h^{grid}|` at the probe point (the origin clamped into
/// the grid) from clamping outside the box and from the discarded jump mass.
///
/// Trilinear interpolation is an average over neighbouring nodes, so the
/// lattice scheme is a controlled chain on the nodes; with and without
/// clamping the chains agree until the first exit from the box. The bound is
/// `2‖φ‖∞·Ê[exit before step n]` plus `2‖φ‖∞·n·tail` for the dropped mass.
/// Axes along which `φ` is constant cannot feel clamping and are skipped.
///
/// Exit probabilities per axis: a sub-Gaussian maximal inequality for `x`
/// (normal increments plus rounding noise of range one spacing), the drift
/// envelope plus rounding noise for `y`, and for `z` the chance of any jump
/// above `c` plus Kolmogorov's inequality for the truncated sum.
pub fn boundary_bound(phi: &TestFunction, grid: &Grid, ctx: &StepContext, steps: usize) -> f64 {
    let b = &ctx.uncertainty;
    let h = ctx.h;
    let nf = steps as f64;
    let p = [
        0f64.clamp(grid.x.lo, grid.x.hi),
        0f64.clamp(grid.y.lo, grid.y.hi),
        0f64.clamp(grid.z.lo, grid.z.hi),
    ];
    let moves = |a: usize| phi.axis_bounds[a][0].min(phi.lipschitz) > 0.0;
    // P(max_k M_k ≥ d) for a martingale with variance proxy v
    let gauss_exit = |d: f64, v: f64| {
        if d <= 0.0 {
            1.0
        } else if v == 0.0 {
            0.0
        } else {
            (-d * d / (2.0 * v)).exp()
        }
    };

    let mut exit = 0.0;
    if moves(0) {
        let v = nf * (h * b.sigma2_hi + 0.25 * grid.x.step().powi(2));
        exit += gauss_exit(grid.x.hi - p[0], v) + gauss_exit(p[0] - grid.x.lo, v);
    }
    if moves(1) {
        let v = nf * 0.25 * grid.y.step().powi(2);
        let up = (nf * h * b.gamma_hi).max(0.0);
        let down = (-nf * h * b.gamma_lo).max(0.0);
        exit += gauss_exit(grid.y.hi - p[1] - up, v) + gauss_exit(p[1] - grid.y.lo - down, v);
    }
    if moves(2) && steps > 0 {
        let scale = ctx.jump_scale();
        let d = (grid.z.hi - p[2]).min(p[2] - grid.z.lo);
        let rounding = 0.25 * grid.z.step().powi(2);
        let mut best = 1.0f64;
        for frac in [0.125, 0.25, 0.375, 0.5, 0.75, 1.0] {
            let c = frac * d;
            let t = c / scale;
            if t < 1.0 {
                continue;
            }
            let mut big = 0.0f64;
            let mut mean = 0.0f64;
            let mut second = 0.0f64;
            for law in &ctx.laws {
                big = big.max(law.two_sided_tail(t));
                let (m1, m2) = law.truncated_moments(t);
                mean = mean.max(m1.abs());
                second = second.max(m2);
            }
            let drift = nf * scale * mean;
            let var = nf * (scale * scale * second + rounding);
            let trunc = if d > drift { var / (d - drift).powi(2) } else { 1.0 };
            best = best.min(nf * big + trunc);
        }
        exit += best;
    }
    let clamp = 2.0 * phi.sup_norm * exit.min(1.0);
    let tail = 2.0 * phi.sup_norm * nf * ctx.max_tail_remainder();
    (clamp + tail).min(2.0 * phi.sup_norm)
}

/// Estimated `C₀` for the time-regularity check: `max(C_φ(σ̄ + max|γ| + E|W|), C_φ)`,
/// with the single-step `E|W|` standing in for the supremum over `n`.
pub fn estimated_time_constant(phi: &TestFunction, ctx: &StepContext) -> f64 {
    let m_z = ctx.wk_rules.iter().map(|r| r.expect(f64::abs)).fold(0.0, f64::max);
    let b = &ctx.uncertainty;
    (phi.lipschitz * (b.sigma_hi() + b.gamma_abs_max() + m_z)).max(phi.lipschitz)
}

/// Run the scheme for `steps` steps of size `ctx.h`, returning every layer.
pub fn solve(
    phi: &TestFunction,
    grid: &Grid,
    ctx: &StepContext,
    steps: usize,
    opts: &SolveOptions,
) -> Result<Solution, SchemeError> {
    if steps as f64 * ctx.h > 1.0 + 1e-12 {
        return Err(SchemeError::StepMismatch { steps, h: ctx.h });
    }
    let bound = boundary_bound(phi, grid, ctx, steps);
    if bound > opts.boundary_tolerance {
        return Err(SchemeError::GridTooNarrow { bound, tolerance: opts.boundary_tolerance });
    }
    let mut layers = Vec::with_capacity(steps + 1);
    layers.push(GridFunction::sample(phi, grid));
    for _ in 0..steps {
        let next = advance(ctx, layers.last().unwrap());
        layers.push(next);
    }

    let c0 = opts.time_constant.unwrap_or_else(|| estimated_time_constant(phi, ctx));
    let max_sup = layers.iter().map(GridFunction::sup_norm).fold(0.0, f64::max);
    let lip = layers
        .iter()
        .map(|l| (0..3).map(|a| l.lipschitz_along(a)).fold(0.0, f64::max))
        .fold(0.0, f64::max);
    let lipschitz_ratio = if phi.lipschitz > 0.0 {
        lip / phi.lipschitz
    } else if lip == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let time_ratio = time_regularity_ratio(&layers, ctx.h, c0);
    let time_status = if time_ratio <= 1.0 {
        CheckStatus::Pass
    } else if time_ratio <= 2.0 {
        CheckStatus::Warn
    } else {
        CheckStatus::Fail
    };
    let summary = SolveSummary {
        h: ctx.h,
        steps,
        phi: phi.name.clone(),
        sup_norm_phi: phi.sup_norm,
        lipschitz_phi: phi.lipschitz,
        max_sup_norm: max_sup,
        bounded_ok: max_sup <= phi.sup_norm * (1.0 + 1e-12) + 1e-300,
        lipschitz_ratio,
        lipschitz_ok: lipschitz_ratio <= 1.0 + 1e-6,
        time_constant: c0,
        time_ratio,
        time_status,
        boundary_bound: bound,
        boundary_tolerance: opts.boundary_tolerance,
        tail_remainder: ctx.max_tail_remainder(),
    };
    Ok(Solution { layers, summary })
}

/// `max |u_k − u_l| / (C₀ (|k − l| h)^{1/2})` over the pairs `(k, k−1)` and `(k, 0)`.
pub fn time_regularity_ratio(layers: &[GridFunction], h: f64, c0: f64) -> f64 {
    let diff = |a: &GridFunction, b: &GridFunction| {
        a.values.iter().zip(&b.values).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
    };
    let mut worst = 0.0f64;
    for k in 1..layers.len() {
        let d1 = diff(&layers[k], &layers[k - 1]) / (c0 * h.sqrt());
        let d0 = diff(&layers[k], &layers[0]) / (c0 * (k as f64 * h).sqrt());
        worst = worst.max(d1).max(d0);
    }
    worst
}

/// `u_{1/n}(1, 0, 0, 0)`: `n` steps of size `1/n`, read at the origin.
pub fn limit_functional(
    phi: &TestFunction,
    n: usize,
    grid: &Grid,
    ctx: &StepContext,
    opts: &SolveOptions,
) -> Result<f64, SchemeError> {
    limit_run(phi, n, grid, ctx, opts).map(|(v, _)| v)
}

/// [`limit_functional`] together with the summary of the solve.
pub fn limit_run(
    phi: &TestFunction,
    n: usize,
    grid: &Grid,
    ctx: &StepContext,
    opts: &SolveOptions,
) -> Result<(f64, SolveSummary), SchemeError> {
    if n == 0 {
        return Err(SchemeError::StepMismatch { steps: 0, h: f64::INFINITY });
    }
    if !grid.contains([0.0; 3]) {
        return Err(SchemeError::OutsideGrid([0.0; 3]));
    }
    let ctx = ctx.with_h(1.0 / n as f64);
    let sol = solve(phi, grid, &ctx, n, opts)?;
    Ok((sol.last().interpolate(0.0, 0.0, 0.0), sol.summary))
}

/// One solve of a rate study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatePoint {
    pub n: usize,
    pub value: f64,
    pub grid: Grid,
    pub summary: SolveSummary,
}

/// [`limit_run`] for every `n`, solves running concurrently. Results come back
/// in the order of `ns` and do not depend on the thread count.
pub fn rate_study(
    phi: &TestFunction,
    base: &Grid,
    scaling: &MeshScaling,
    ctx: &StepContext,
    ns: &[usize],
    opts: &SolveOptions,
) -> Result<Vec<RatePoint>, SchemeError> {
    ns.par_iter()
        .map(|&n| {
            let grid = scaling.grid_for(base, n)?;
            let (value, summary) = limit_run(phi, n, &grid, ctx, opts)?;
            Ok(RatePoint { n, value, grid, summary })
        })
        .collect()
}

/// `u_h(t, point)` from a complete history with `h = 1/(len − 1)`.
pub fn evaluate(history: &[GridFunction], t: f64, point: [f64; 3]) -> f64 {
    let n = history.len() - 1;
    let k = if n == 0 { 0 } else { ((t * n as f64) * (1.0 + 1e-12)).floor().max(0.0) as usize };
    let layer = &history[k.min(n)];
    layer.interpolate(point[0], point[1], point[2])
}
