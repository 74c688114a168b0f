//! Generator parameterizations θ and the chain-rule pullback ∂x0/∂θ.
//!
//! Two stand-ins for "what the distilled gradient updates": free particles
//! (each row of θ is a point in x0-space) and a warped-latent map whose
//! render depends on a view index, exercising a nontrivial Jacobian the way
//! a differentiable renderer would.

use std::io::{BufRead, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::oracle::{Condition, Oracle};

/// θ = the points themselves; render selects rows, pullback scatters the
/// directions back onto exactly those rows.
#[derive(Debug, Clone)]
pub struct ParticleGenerator {
    points: Array2<f64>,
}

impl ParticleGenerator {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::InvalidConfig(
                "particle generator needs at least one point and one dimension".into(),
            ));
        }
        for (i, v) in points.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "particle init",
                    index: i,
                    value: *v,
                });
            }
        }
        Ok(Self { points })
    }

    pub fn n(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    fn check_rows(&self, rows: &[usize]) -> Result<()> {
        if rows.is_empty() {
            return Err(Error::Contract("empty row selection".into()));
        }
        for &r in rows {
            if r >= self.n() {
                return Err(Error::Contract(format!(
                    "row index {r} out of range for {} particles",
                    self.n()
                )));
            }
        }
        Ok(())
    }

    pub fn render(&self, rows: &[usize]) -> Result<Array2<f64>> {
        self.check_rows(rows)?;
        let mut out = Array2::zeros((rows.len(), self.dim()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&self.points.row(r));
        }
        Ok(out)
    }

    /// Scatter adjoint: the gradient lands on the selected rows only.
    pub fn pullback(&self, rows: &[usize], dirs: &Array2<f64>) -> Result<Vec<f64>> {
        self.check_rows(rows)?;
        if dirs.nrows() != rows.len() || dirs.ncols() != self.dim() {
            return Err(Error::DimMismatch {
                context: "particle pullback dirs",
                expected: rows.len() * self.dim(),
                got: dirs.nrows() * dirs.ncols(),
            });
        }
        let d = self.dim();
        let mut grad = vec![0.0; self.n() * d];
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..d {
                grad[r * d + j] += dirs[(i, j)];
            }
        }
        Ok(grad)
    }
}

/// θ is a latent vector; render(θ, c) = W_c · tanh(Uθ + b) with fixed,
/// seeded view maps W_c and mixing matrix U. Every requested row renders the
/// same point for the chosen view, mirroring one rendered image per step.
#[derive(Debug, Clone)]
pub struct WarpedLatentGenerator {
    latent: Array1<f64>,
    views: Vec<Array2<f64>>, // each d×m
    u: Array2<f64>,          // m×k
    b: Array1<f64>,          // m
}

impl WarpedLatentGenerator {
    /// Fixed maps have i.i.d. N(0, 1/√fan_in) entries; the latent starts at
    /// N(0, 1). All draws come from the one seed, so construction is
    /// deterministic.
    pub fn new(
        dim: usize,
        latent_dim: usize,
        hidden_dim: usize,
        num_views: usize,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || latent_dim == 0 || hidden_dim == 0 || num_views == 0 {
            return Err(Error::InvalidConfig(
                "warped generator sizes must all be >= 1".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gauss = |std: f64, rng: &mut ChaCha8Rng| -> f64 {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        };
        let u_std = 1.0 / (latent_dim as f64).sqrt();
        let u = Array2::from_shape_fn((hidden_dim, latent_dim), |_| gauss(u_std, &mut rng));
        let w_std = 1.0 / (hidden_dim as f64).sqrt();
        let views = (0..num_views)
            .map(|_| Array2::from_shape_fn((dim, hidden_dim), |_| gauss(w_std, &mut rng)))
            .collect();
        let latent = Array1::from_shape_fn(latent_dim, |_| gauss(1.0, &mut rng));
        let b = Array1::zeros(hidden_dim);
        Ok(Self {
            latent,
            views,
            u,
            b,
        })
    }

    pub fn dim(&self) -> usize {
        self.views[0].nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.len()
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    fn hidden(&self) -> Array1<f64> {
        let mut h = self.u.dot(&self.latent) + &self.b;
        h.mapv_inplace(f64::tanh);
        h
    }

    fn check_view(&self, view: usize) -> Result<()> {
        if view >= self.views.len() {
            return Err(Error::Contract(format!(
                "view index {view} out of range for {} views",
                self.views.len()
            )));
        }
        Ok(())
    }

    pub fn render_one(&self, view: usize) -> Result<Array1<f64>> {
        self.check_view(view)?;
        Ok(self.views[view].dot(&self.hidden()))
    }

    pub fn render(&self, view: usize, count: usize) -> Result<Array2<f64>> {
        if count == 0 {
            return Err(Error::Contract("empty row selection".into()));
        }
        let x = self.render_one(view)?;
        let mut out = Array2::zeros((count, self.dim()));
        for mut row in out.rows_mut() {
            row.assign(&x);
        }
        Ok(out)
    }

    /// Exact adjoint Uᵀ·diag(1−tanh²(Uθ+b))·W_cᵀ·(Σ rows of dirs).
    pub fn pullback(&self, view: usize, dirs: &Array2<f64>) -> Result<Vec<f64>> {
        self.check_view(view)?;
        if dirs.ncols() != self.dim() || dirs.nrows() == 0 {
            return Err(Error::DimMismatch {
                context: "warped pullback dirs",
                expected: self.dim(),
                got: dirs.ncols(),
            });
        }
        let h = self.hidden();
        let acc = dirs.sum_axis(ndarray::Axis(0)); // d
        let mut tmp = self.views[view].t().dot(&acc); // m
        for (t, hv) in tmp.iter_mut().zip(h.iter()) {
            *t *= 1.0 - hv * hv;
        }
        let g = self.u.t().dot(&tmp); // k
        Ok(g.to_vec())
    }
}

/// The two generator modes behind one interface; `rows` indexes particles in
/// particle mode and only sets the replication count in warped mode.
#[derive(Debug, Clone)]
pub enum Generator {
    Particles(ParticleGenerator),
    Warped(WarpedLatentGenerator),
}

impl Generator {
    pub fn dim(&self) -> usize {
        match self {
            Generator::Particles(p) => p.dim(),
            Generator::Warped(w) => w.dim(),
        }
    }

    /// Number of distinct renderable rows (particles, or 1 for warped mode).
    pub fn num_rows(&self) -> usize {
        match self {
            Generator::Particles(p) => p.n(),
            Generator::Warped(_) => 1,
        }
    }

    pub fn num_views(&self) -> usize {
        match self {
            Generator::Particles(_) => 1,
            Generator::Warped(w) => w.num_views(),
        }
    }

    pub fn render(&self, view: usize, rows: &[usize]) -> Result<Array2<f64>> {
        match self {
            Generator::Particles(p) => p.render(rows),
            Generator::Warped(w) => w.render(view, rows.len()),
        }
    }

    pub fn pullback(&self, view: usize, rows: &[usize], dirs: &Array2<f64>) -> Result<Vec<f64>> {
        match self {
            Generator::Particles(p) => p.pullback(rows, dirs),
            Generator::Warped(w) => w.pullback(view, dirs),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Generator::Particles(p) => p.n() * p.dim(),
            Generator::Warped(w) => w.latent_dim(),
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Generator::Particles(p) => p.points.as_slice().expect("standard layout"),
            Generator::Warped(w) => w.latent.as_slice().expect("standard layout"),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Generator::Particles(p) => p.points.as_slice_mut().expect("standard layout"),
            Generator::Warped(w) => w.latent.as_slice_mut().expect("standard layout"),
        }
    }

    /// Current outputs for metrics/snapshots: all particles, or one render
    /// per view.
    pub fn snapshot_points(&self) -> Result<Array2<f64>> {
        match self {
            Generator::Particles(p) => Ok(p.points.clone()),
            Generator::Warped(w) => {
                let mut out = Array2::zeros((w.num_views(), w.dim()));
                for v in 0..w.num_views() {
                    out.row_mut(v).assign(&w.render_one(v)?);
                }
                Ok(out)
            }
        }
    }
}

/// How the initial particle cloud is produced.
pub enum InitSpec<'a> {
    /// i.i.d. N(mean·1, std²·I).
    Gauss {
        n: usize,
        dim: usize,
        mean: f64,
        std: f64,
    },
    /// Component means of the conditional mixture (drawn by conditional
    /// weight) plus N(0, 0.01·I) jitter.
    AtConditionMode {
        n: usize,
        oracle: &'a Oracle,
        cond: &'a Condition,
    },
    /// Snapshot CSV written by [`write_points_csv`].
    FromFile { path: &'a Path },
}

pub fn init_particles(spec: &InitSpec, seed: u64) -> Result<ParticleGenerator> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = match spec {
        InitSpec::Gauss { n, dim, mean, std } => {
            if *n == 0 {
                return Err(Error::InvalidConfig("need n >= 1 particles".into()));
            }
            if !mean.is_finite() || !std.is_finite() || *std < 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "bad gauss init (mean {mean}, std {std})"
                )));
            }
            Array2::from_shape_fn((*n, *dim), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                mean + std * z
            })
        }
        InitSpec::AtConditionMode { n, oracle, cond } => {
            if *n == 0 {
                return Err(Error::InvalidConfig("need n >= 1 particles".into()));
            }
            let weights = cond.conditional_weights(oracle.gmm())?;
            let d = oracle.dim();
            let mut points = Array2::zeros((*n, d));
            for mut row in points.rows_mut() {
                let draw: f64 = rng.random();
                let mut acc = 0.0;
                let mut comp = weights.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if draw < acc {
                        comp = i;
                        break;
                    }
                }
                for (j, v) in row.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = oracle.gmm().means()[(comp, j)] + 0.1 * z;
                }
            }
            points
        }
        InitSpec::FromFile { path } => read_points_csv(path)?,
    };
    ParticleGenerator::new(points)
}

/// One row per particle, header `x0,x1,…`, full-precision scientific
/// notation so snapshots round-trip bit-exactly.
pub fn write_points_csv(points: &Array2<f64>, path: &Path) -> Result<()> {
    let mut out = String::new();
    let header: Vec<String> = (0..points.ncols()).map(|j| format!("x{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in points.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_points_csv(path: &Path) -> Result<Array2<f64>> {
    let corrupt = |detail: String| Error::Corrupt {
        path: path.display().to_string(),
        detail,
    };
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = lines.next().ok_or_else(|| corrupt("empty file".into()))??;
    let cols: Vec<&str> = header.trim_end().split(',').collect();
    for (j, c) in cols.iter().enumerate() {
        if *c != format!("x{j}") {
            return Err(corrupt(format!("bad header column {j}: {c:?}")));
        }
    }
    let d = cols.len();
    let mut values = Vec::new();
    let mut rows = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.trim_end().split(',').collect();
        if cells.len() != d {
            return Err(corrupt(format!(
                "row {} has {} cells, expected {d}",
                lineno + 2,
                cells.len()
            )));
        }
        for c in cells {
            let v: f64 = c
                .parse()
                .map_err(|e| corrupt(format!("row {}: {e}", lineno + 2)))?;
            if !v.is_finite() {
                return Err(corrupt(format!(
                    "row {} holds non-finite value",
                    lineno + 2
                )));
            }
            values.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(corrupt("no particle rows".into()));
    }
    Array2::from_shape_vec((rows, d), values).map_err(|e| corrupt(format!("shape error: {e}")))
}
