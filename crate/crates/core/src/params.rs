//! Named parameter storage, binding onto a tape, and the Adam optimizer.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Grads, Mat, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian init scaled by `std`.
    pub fn add_normal<R: Rng>(&mut self, name: &str, shape: (usize, usize), std: f64, rng: &mut R) -> ParamId {
        let m = Array2::from_shape_simple_fn(shape, || rng.sample::<f64, _>(StandardNormal) * std);
        self.add(name, m)
    }

    pub fn add_zeros(&mut self, name: &str, shape: (usize, usize)) -> ParamId {
        self.add(name, Mat::zeros(shape))
    }

    pub fn add_ones(&mut self, name: &str, shape: (usize, usize)) -> ParamId {
        self.add(name, Mat::ones(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Put every parameter on the tape. Trainable bindings receive gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .values
            .iter()
            .map(|v| if trainable { tape.leaf(v.clone()) } else { tape.constant(v.clone()) })
            .collect();
        Bound { vars }
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, v) in self.names.iter().zip(&self.values) {
            h.update(name.as_bytes());
            h.update((v.nrows() as u64).to_le_bytes());
            h.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_records(&self) -> Vec<ParamRecord> {
        self.names.iter().zip(&self.values).map(|(name, v)| ParamRecord::from_mat(name, v)).collect()
    }

    /// Overwrite values from records; names and shapes must match exactly.
    pub fn load_records(&mut self, records: &[ParamRecord]) -> Result<()> {
        if records.len() != self.values.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter arrays, found {}",
                self.values.len(),
                records.len()
            )));
        }
        for (i, rec) in records.iter().enumerate() {
            if rec.name != self.names[i] {
                return Err(Error::Checkpoint(format!(
                    "parameter {i}: expected `{}`, found `{}`",
                    self.names[i], rec.name
                )));
            }
            let m = rec.to_mat()?;
            if m.dim() != self.values[i].dim() {
                return Err(Error::Checkpoint(format!("parameter `{}` has wrong shape", rec.name)));
            }
            self.values[i] = m;
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamStore`].
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

impl ParamRecord {
    pub fn from_mat(name: &str, m: &Mat) -> Self {
        Self { name: name.to_string(), shape: [m.nrows(), m.ncols()], data: m.iter().cloned().collect() }
    }

    pub fn to_mat(&self) -> Result<Mat> {
        Array2::from_shape_vec((self.shape[0], self.shape[1]), self.data.clone())
            .map_err(|e| Error::Checkpoint(format!("parameter `{}`: {e}", self.name)))
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<ParamRecord>,
    pub v: Vec<ParamRecord>,
}

pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| s.values.iter().map(|v| Mat::zeros(v.dim())).collect();
        Self { cfg, step: 0, m: zeros(store), v: zeros(store) }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// Apply one update from accumulated gradients (one per parameter).
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        self.step += 1;
        let mut scale = 1.0;
        if let Some(max) = self.cfg.clip_norm {
            let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
            if norm > max {
                scale = max / norm;
            }
        }
        let AdamConfig { lr, beta1, beta2, eps, .. } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v, p) = (&mut self.m[i], &mut self.v[i], &mut store.values[i]);
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                let g = g * scale;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }

    pub fn state(&self, store: &ParamStore) -> AdamState {
        let rec = |ms: &[Mat]| ms.iter().zip(&store.names).map(|(m, n)| ParamRecord::from_mat(n, m)).collect();
        AdamState { step: self.step, m: rec(&self.m), v: rec(&self.v) }
    }

    pub fn restore(&mut self, state: &AdamState) -> Result<()> {
        if state.m.len() != self.m.len() || state.v.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        self.step = state.step;
        for (i, (m, v)) in state.m.iter().zip(&state.v).enumerate() {
            self.m[i] = m.to_mat()?;
            self.v[i] = v.to_mat()?;
        }
        Ok(())
    }
}

/// Collect gradients for every parameter from a bound store, zeros where
/// nothing flowed.
pub fn collect_grads(store: &ParamStore, bound: &Bound, grads: &Grads) -> Vec<Mat> {
    store.ids().map(|id| grads.get_or_zeros(bound.var(id), store.get(id).dim())).collect()
}

/// Elementwise `acc += g`.
pub fn accumulate(acc: &mut [Mat], g: &[Mat]) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hash_changes_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s.add_normal("w", (3, 2), 1.0, &mut rng);
        let h = s.hash();
        assert_eq!(h, s.clone().hash());
        s.get_mut(id)[[0, 0]] += 1e-12;
        assert_ne!(h, s.hash());
    }

    #[test]
    fn records_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        s.add_normal("a", (2, 2), 1.0, &mut rng);
        s.add_zeros("b", (1, 3));
        let recs = s.to_records();
        let json = serde_json::to_string(&recs).unwrap();
        let back: Vec<ParamRecord> = serde_json::from_str(&json).unwrap();
        let mut t = s.clone();
        t.get_mut(ParamId(0)).fill(0.0);
        t.load_records(&back).unwrap();
        assert_eq!(t.hash(), s.hash());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut s = ParamStore::new();
        let id = s.add("x", Mat::from_elem((1, 1), 3.0));
        let mut opt = Adam::new(AdamConfig { lr: 0.1, clip_norm: None, ..Default::default() }, &s);
        for _ in 0..500 {
            let g = s.get(id) * 2.0;
            opt.update(&mut s, &[g]);
        }
        assert!(s.get(id)[[0, 0]].abs() < 1e-2);
    }
}
