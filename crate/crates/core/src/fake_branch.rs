//! The trainable fake-branch ε-predictor ε_φ.
//!
//! A frozen unconditional oracle plus a small residual network
//! (input d+3 → 64 → 64 → d, tanh) whose output layer starts at zero, so the
//! model initially coincides with the pretrained predictor exactly — the
//! analogue of initializing a LoRA branch from the base model. Gradients are
//! exact reverse-mode through the residual only; oracle ε terms and stored
//! noise are constants.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::oracle::{Condition, NoisyBatch, Oracle};

pub const HIDDEN: usize = 64;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"ASDPHI01";

/// Flat-parameter layout: [w1, b1, w2, b2, w3, b3], matrices row-major.
#[derive(Clone, Debug)]
pub struct ParamLayout {
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
    pub w3: Range<usize>,
    pub b3: Range<usize>,
}

impl ParamLayout {
    fn for_dim(dim: usize) -> Self {
        let input = dim + 3;
        let mut at = 0;
        let mut next = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        Self {
            w1: next(HIDDEN * input),
            b1: next(HIDDEN),
            w2: next(HIDDEN * HIDDEN),
            b2: next(HIDDEN),
            w3: next(dim * HIDDEN),
            b3: next(dim),
        }
    }

    pub fn total(&self) -> usize {
        self.b3.end
    }
}

#[derive(Clone, Debug)]
pub struct ResidualEpsModel {
    oracle: Oracle,
    dim: usize,
    layout: ParamLayout,
    params: Vec<f64>,
}

struct Trace {
    features: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
}

impl ResidualEpsModel {
    /// Hidden layers uniform ±1/√fan_in (seeded); output layer zeroed, so
    /// the initial prediction is exactly the unconditional oracle.
    pub fn zero_init(oracle: Oracle, seed: u64) -> Self {
        let dim = oracle.dim();
        let input = dim + 3;
        let layout = ParamLayout::for_dim(dim);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: Range<usize>, fan_in: usize, params: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for i in range {
                params[i] = (rng.random::<f64>() * 2.0 - 1.0) * bound;
            }
        };
        fill(layout.w1.clone(), input, &mut params);
        fill(layout.b1.clone(), input, &mut params);
        fill(layout.w2.clone(), HIDDEN, &mut params);
        fill(layout.b2.clone(), HIDDEN, &mut params);
        // w3, b3 stay zero
        Self {
            oracle,
            dim,
            layout,
            params,
        }
    }

    pub fn oracle(&self) -> &Oracle {
        &self.oracle
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn w(&self, range: &Range<usize>, rows: usize, cols: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((rows, cols), &self.params[range.clone()])
            .expect("parameter layout is consistent by construction")
    }

    fn forward(&self, xt: &Array2<f64>, t: &Array1<f64>) -> Result<(Trace, Array2<f64>)> {
        let n = xt.nrows();
        if xt.ncols() != self.dim {
            return Err(Error::DimMismatch {
                context: "eps_phi input",
                expected: self.dim,
                got: xt.ncols(),
            });
        }
        if t.len() != n {
            return Err(Error::DimMismatch {
                context: "eps_phi t length",
                expected: n,
                got: t.len(),
            });
        }
        let input = self.dim + 3;
        let mut features = Array2::zeros((n, input));
        for i in 0..n {
            let (alpha, sigma) = self.oracle.schedule().eval(t[i])?;
            for j in 0..self.dim {
                features[(i, j)] = xt[(i, j)];
            }
            features[(i, self.dim)] = t[i];
            features[(i, self.dim + 1)] = alpha;
            features[(i, self.dim + 2)] = sigma;
        }
        let w1 = self.w(&self.layout.w1, HIDDEN, input);
        let w2 = self.w(&self.layout.w2, HIDDEN, HIDDEN);
        let w3 = self.w(&self.layout.w3, self.dim, HIDDEN);
        let b1 = &self.params[self.layout.b1.clone()];
        let b2 = &self.params[self.layout.b2.clone()];
        let b3 = &self.params[self.layout.b3.clone()];

        let mut z1 = features.dot(&w1.t());
        for mut row in z1.rows_mut() {
            for (v, b) in row.iter_mut().zip(b1) {
                *v = (*v + b).tanh();
            }
        }
        let h1 = z1;
        let mut z2 = h1.dot(&w2.t());
        for mut row in z2.rows_mut() {
            for (v, b) in row.iter_mut().zip(b2) {
                *v = (*v + b).tanh();
            }
        }
        let h2 = z2;
        let mut residual = h2.dot(&w3.t());
        for mut row in residual.rows_mut() {
            for (v, b) in row.iter_mut().zip(b3) {
                *v += b;
            }
        }
        Ok((Trace { features, h1, h2 }, residual))
    }

    /// ε_φ(x, t) = ε_oracle(unconditional)(x, t) + residual(x, t, α, σ).
    pub fn predict(&self, x: ndarray::ArrayView1<f64>, t: f64) -> Result<Array1<f64>> {
        let xt = x.insert_axis(Axis(0)).to_owned();
        let ts = Array1::from(vec![t]);
        let rows = self.predict_rows(&xt, &ts)?;
        Ok(rows.row(0).to_owned())
    }

    /// Rowwise ε_φ over (xt, t) pairs.
    pub fn predict_rows(&self, xt: &Array2<f64>, t: &Array1<f64>) -> Result<Array2<f64>> {
        let (_, residual) = self.forward(xt, t)?;
        let mut out = residual;
        for i in 0..xt.nrows() {
            let base = self
                .oracle
                .eps(&Condition::Unconditional, t[i], xt.row(i))?;
            for j in 0..self.dim {
                out[(i, j)] += base[j];
            }
        }
        Ok(out)
    }

    /// Reverse-mode gradient given ∂L/∂(residual output) per row.
    fn backward(&self, trace: &Trace, g_out: &Array2<f64>) -> Vec<f64> {
        let w2 = self.w(&self.layout.w2, HIDDEN, HIDDEN);
        let w3 = self.w(&self.layout.w3, self.dim, HIDDEN);
        let mut grad = vec![0.0; self.params.len()];

        let gw3 = g_out.t().dot(&trace.h2); // d × H
        let gb3 = g_out.sum_axis(Axis(0));
        let gh2 = g_out.dot(&w3); // n × H
        let mut gz2 = gh2;
        gz2.zip_mut_with(&trace.h2, |g, h| *g *= 1.0 - h * h);
        let gw2 = gz2.t().dot(&trace.h1);
        let gb2 = gz2.sum_axis(Axis(0));
        let gh1 = gz2.dot(&w2);
        let mut gz1 = gh1;
        gz1.zip_mut_with(&trace.h1, |g, h| *g *= 1.0 - h * h);
        let gw1 = gz1.t().dot(&trace.features);
        let gb1 = gz1.sum_axis(Axis(0));

        let write = |range: &Range<usize>, values: &[f64], grad: &mut Vec<f64>| {
            grad[range.clone()].copy_from_slice(values);
        };
        write(&self.layout.w1, gw1.as_slice().unwrap(), &mut grad);
        write(&self.layout.b1, gb1.as_slice().unwrap(), &mut grad);
        write(&self.layout.w2, gw2.as_slice().unwrap(), &mut grad);
        write(&self.layout.b2, gb2.as_slice().unwrap(), &mut grad);
        write(&self.layout.w3, gw3.as_slice().unwrap(), &mut grad);
        write(&self.layout.b3, gb3.as_slice().unwrap(), &mut grad);
        grad
    }

    // ----- checkpoint I/O: 16-byte header + flat little-endian f64 -----

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.params.len() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            self.dim as u16,
            HIDDEN as u16,
            HIDDEN as u16,
            self.dim as u16,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    /// Replaces this model's parameters from a checkpoint with matching
    /// layer sizes.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let corrupt = |detail: &str| Error::Corrupt {
            path: path.display().to_string(),
            detail: detail.into(),
        };
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 16 || &bytes[0..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic or truncated header"));
        }
        let field = |i: usize| u16::from_le_bytes([bytes[8 + 2 * i], bytes[9 + 2 * i]]) as usize;
        let (dim, h1, h2, out) = (field(0), field(1), field(2), field(3));
        if dim != self.dim || h1 != HIDDEN || h2 != HIDDEN || out != self.dim {
            return Err(corrupt(&format!(
                "layer sizes {dim}/{h1}/{h2}/{out} do not match model {}/{HIDDEN}/{HIDDEN}/{}",
                self.dim, self.dim
            )));
        }
        let payload = &bytes[16..];
        if payload.len() != self.params.len() * 8 {
            return Err(corrupt(&format!(
                "expected {} parameter bytes, got {}",
                self.params.len() * 8,
                payload.len()
            )));
        }
        for (i, chunk) in payload.chunks_exact(8).enumerate() {
            self.params[i] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }
}

/// One probe batch with squared-residual terms: contributes
/// Σ_k coeff_k · mean over rows of ‖ε_φ(x_t, t) − target_k‖².
pub struct ObjectiveGroup<'a> {
    pub batch: &'a NoisyBatch,
    pub terms: Vec<(f64, Array2<f64>)>,
}

/// A discriminator-style objective: a sum of [`ObjectiveGroup`]s. All targets
/// (oracle ε values, stored noise) are constants; gradients flow through
/// ε_φ only.
pub struct EpsObjective<'a> {
    pub groups: Vec<ObjectiveGroup<'a>>,
}

impl EpsObjective<'_> {
    fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::Contract("objective has no groups".into()));
        }
        for g in &self.groups {
            if g.batch.is_empty() {
                return Err(Error::Contract("objective group on empty batch".into()));
            }
            for (c, target) in &g.terms {
                if !c.is_finite() {
                    return Err(Error::Contract("non-finite loss coefficient".into()));
                }
                if target.dim() != g.batch.xt.dim() {
                    return Err(Error::Contract(
                        "loss target shape does not match its batch".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Scalar loss value at the model's current parameters.
    pub fn value(&self, model: &ResidualEpsModel) -> Result<f64> {
        self.validate()?;
        let mut fakes = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            fakes.push(model.predict_rows(&g.batch.xt, &g.batch.t)?);
        }
        self.value_with_fake(&fakes)
    }

    /// Evaluation kernel with the fake predictions supplied directly
    /// (analysis/tests: e.g. forcing ε_φ ≡ ε).
    pub fn value_with_fake(&self, fakes: &[Array2<f64>]) -> Result<f64> {
        self.validate()?;
        if fakes.len() != self.groups.len() {
            return Err(Error::Contract("one fake matrix per group required".into()));
        }
        let mut total = 0.0;
        for (g, fake) in self.groups.iter().zip(fakes) {
            let n = g.batch.len() as f64;
            for (c, target) in &g.terms {
                let mut sq = 0.0;
                for (f, t) in fake.iter().zip(target.iter()) {
                    let d = f - t;
                    sq += d * d;
                }
                total += c * sq / n;
            }
        }
        Ok(total)
    }

    /// Exact reverse-mode gradient of the loss w.r.t. model parameters.
    pub fn grad(&self, model: &ResidualEpsModel) -> Result<Vec<f64>> {
        self.validate()?;
        let mut grad = vec![0.0; model.param_count()];
        for g in &self.groups {
            let (trace, residual) = model.forward(&g.batch.xt, &g.batch.t)?;
            let n = g.batch.len();
            let mut pred = residual;
            for i in 0..n {
                let base =
                    model
                        .oracle
                        .eps(&Condition::Unconditional, g.batch.t[i], g.batch.xt.row(i))?;
                for j in 0..model.dim {
                    pred[(i, j)] += base[j];
                }
            }
            let mut g_out = Array2::zeros(pred.raw_dim());
            for (c, target) in &g.terms {
                let scale = 2.0 * c / n as f64;
                for ((go, p), t) in g_out.iter_mut().zip(pred.iter()).zip(target.iter()) {
                    *go += scale * (p - t);
                }
            }
            let part = model.backward(&trace, &g_out);
            for (a, b) in grad.iter_mut().zip(part) {
                *a += b;
            }
        }
        Ok(grad)
    }
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub passed: bool,
}

/// Central-difference audit of an analytic parameter gradient. Checks every
/// parameter, or a seeded 256-parameter subsample when there are more.
/// Relative error uses denominator max(1, |fd|, |analytic|).
pub fn finite_diff_verify<F>(
    model: &ResidualEpsModel,
    mut loss: F,
    analytic: &[f64],
    h: f64,
    tol: f64,
    subsample_seed: u64,
) -> Result<GradReport>
where
    F: FnMut(&ResidualEpsModel) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::Contract("finite_diff_verify requires h > 0".into()));
    }
    if analytic.len() != model.param_count() {
        return Err(Error::DimMismatch {
            context: "finite_diff_verify analytic gradient",
            expected: model.param_count(),
            got: analytic.len(),
        });
    }
    let n = model.param_count();
    let indices: Vec<usize> = if n > 256 {
        let mut rng = ChaCha8Rng::seed_from_u64(subsample_seed);
        rand::seq::index::sample(&mut rng, n, 256).into_vec()
    } else {
        (0..n).collect()
    };
    let mut probe = model.clone();
    let mut max_rel_err = 0.0_f64;
    let mut worst_index = 0;
    for &i in &indices {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let up = loss(&probe)?;
        probe.params_mut()[i] = orig - h;
        let down = loss(&probe)?;
        probe.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = analytic[i];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradReport {
        max_rel_err,
        worst_index,
        checked: indices.len(),
        passed: max_rel_err <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{GaussianMixture, NoiseSchedule, ScheduleKind};
    use ndarray::array;

    fn oracle() -> Oracle {
        let g = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![3.0, 0.0], vec![-3.0, 0.0]],
            vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        )
        .unwrap();
        Oracle::new(
            g,
            NoiseSchedule::new(ScheduleKind::VpCosine, 0.02, 0.98).unwrap(),
        )
    }

    #[test]
    fn zero_init_matches_oracle_exactly() {
        let o = oracle();
        let m = ResidualEpsModel::zero_init(o.clone(), 3);
        for k in 0..100 {
            let x = array![0.1 * k as f64 - 5.0, 0.03 * k as f64];
            let t = 0.02 + 0.96 * (k as f64 / 99.0);
            let a = m.predict(x.view(), t).unwrap();
            let b = o.eps(&Condition::Unconditional, t, x.view()).unwrap();
            for j in 0..2 {
                assert_eq!((a[j] - b[j]).abs(), 0.0);
            }
        }
    }

    #[test]
    fn seeded_init_deterministic() {
        let a = ResidualEpsModel::zero_init(oracle(), 9);
        let b = ResidualEpsModel::zero_init(oracle(), 9);
        let c = ResidualEpsModel::zero_init(oracle(), 10);
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
        // output layer zeroed regardless of seed
        assert!(a.params()[a.layout().w3.clone()].iter().all(|v| *v == 0.0));
        assert!(a.params()[a.layout().b3.clone()].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn output_weight_perturbation_is_linear_in_hidden_activation() {
        let mut m = ResidualEpsModel::zero_init(oracle(), 4);
        let x = array![0.7, -0.4];
        let t = 0.41;
        let before = m.predict(x.view(), t).unwrap();
        // recover h2 from the forward pass
        let xt = x.clone().insert_axis(Axis(0)).to_owned();
        let ts = Array1::from(vec![t]);
        let (trace, _) = m.forward(&xt, &ts).unwrap();
        let j = 11;
        let coord = 1;
        let delta = 0.37;
        let idx = m.layout().w3.start + coord * HIDDEN + j;
        m.params_mut()[idx] += delta;
        let after = m.predict(x.view(), t).unwrap();
        assert!((after[coord] - before[coord] - delta * trace.h2[(0, j)]).abs() < 1e-12);
        assert!((after[0] - before[0]).abs() == 0.0);
    }

    #[test]
    fn objective_zero_and_minimum_gradients() {
        let m = ResidualEpsModel::zero_init(oracle(), 5);
        let x0 = array![[0.5, 0.5], [-1.0, 2.0]];
        let t = array![0.3, 0.6];
        let eps = array![[0.2, -0.3], [1.0, 0.1]];
        let batch = m.oracle().noisify(&x0, &t, &eps).unwrap();

        // coefficient 0 ⇒ loss ≡ 0 ⇒ zero gradient
        let obj = EpsObjective {
            groups: vec![ObjectiveGroup {
                batch: &batch,
                terms: vec![(0.0, Array2::zeros((2, 2)))],
            }],
        };
        assert!(obj.grad(&m).unwrap().iter().all(|g| *g == 0.0));

        // target equal to the current prediction ⇒ at the minimum ⇒ zero grad
        let pred = m.predict_rows(&batch.xt, &batch.t).unwrap();
        let obj = EpsObjective {
            groups: vec![ObjectiveGroup {
                batch: &batch,
                terms: vec![(1.0, pred)],
            }],
        };
        assert_eq!(obj.value(&m).unwrap(), 0.0);
        assert!(obj.grad(&m).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn objective_validates_shapes() {
        let m = ResidualEpsModel::zero_init(oracle(), 5);
        let x0 = array![[0.5, 0.5]];
        let t = array![0.3];
        let eps = array![[0.2, -0.3]];
        let batch = m.oracle().noisify(&x0, &t, &eps).unwrap();
        let obj = EpsObjective {
            groups: vec![ObjectiveGroup {
                batch: &batch,
                terms: vec![(1.0, Array2::zeros((3, 2)))],
            }],
        };
        assert!(matches!(obj.value(&m), Err(Error::Contract(_))));
    }

    #[test]
    fn quadratic_loss_passes_fd_audit_tightly() {
        let m = ResidualEpsModel::zero_init(oracle(), 6);
        let loss =
            |mm: &ResidualEpsModel| -> Result<f64> { Ok(mm.params().iter().map(|p| p * p).sum()) };
        let analytic: Vec<f64> = m.params().iter().map(|p| 2.0 * p).collect();
        let rep = finite_diff_verify(&m, loss, &analytic, 1e-5, 1e-6, 17).unwrap();
        assert!(rep.passed, "max_rel_err = {}", rep.max_rel_err);
        assert!(rep.max_rel_err < 1e-6);
        assert_eq!(rep.checked, 256);
    }

    #[test]
    fn zero_tolerance_fails_on_nonlinear_model() {
        let mut m = ResidualEpsModel::zero_init(oracle(), 6);
        // randomize the output layer so hidden-layer gradients are non-zero
        let w3 = m.layout().w3.clone();
        for (k, i) in w3.enumerate() {
            m.params_mut()[i] = ((k % 13) as f64 - 6.0) * 0.05;
        }
        let x0 = array![[0.5, -0.5], [1.0, 2.0], [0.0, 0.3]];
        let t = array![0.3, 0.6, 0.8];
        let eps = array![[0.2, -0.3], [1.0, 0.1], [-0.4, 0.9]];
        let batch = m.oracle().noisify(&x0, &t, &eps).unwrap();
        let obj = EpsObjective {
            groups: vec![ObjectiveGroup {
                batch: &batch,
                terms: vec![(1.0, eps.clone())],
            }],
        };
        let analytic = obj.grad(&m).unwrap();
        let rep = finite_diff_verify(&m, |mm| obj.value(mm), &analytic, 1e-4, 0.0, 18).unwrap();
        assert!(!rep.passed);
        assert!(rep.max_rel_err > 0.0);
    }

    #[test]
    fn checkpoint_round_trip_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.bin");
        let mut a = ResidualEpsModel::zero_init(oracle(), 21);
        a.params_mut()[0] = 0.12345678901234568;
        a.save_checkpoint(&path).unwrap();
        let mut b = ResidualEpsModel::zero_init(oracle(), 99);
        b.load_checkpoint(&path).unwrap();
        assert_eq!(a.params(), b.params());

        // corrupt magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            b.load_checkpoint(&path),
            Err(Error::Corrupt { .. })
        ));
    }
}
