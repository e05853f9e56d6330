use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{FeatureVector, HISTORY_DIM, PATH_DIM};
use super::{NeuralError, Result};
use crate::geometry::Vec2;

pub const OUTPUT_WAYPOINTS: usize = 80;
pub const OUTPUT_DIM: usize = OUTPUT_WAYPOINTS * 2;

// Fixed rescaling so inputs and outputs in meters land near unit range.
const INPUT_SCALE: f64 = 0.1;
const OUTPUT_SCALE: f64 = 10.0;

const MAGIC: &[u8; 8] = b"HPMLP\0\0\0";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub history_in: usize,
    pub path_in: usize,
    pub embed: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Default for MlpDims {
    fn default() -> Self {
        Self {
            history_in: HISTORY_DIM,
            path_in: PATH_DIM,
            embed: 512,
            hidden: 512,
            output: OUTPUT_DIM,
        }
    }
}

impl MlpDims {
    /// (inputs, outputs) of each layer in storage order.
    pub fn layer_shapes(&self) -> [(usize, usize); 5] {
        [
            (self.history_in, self.embed),
            (self.path_in, self.embed),
            (2 * self.embed, self.hidden),
            (self.hidden, self.hidden),
            (self.hidden, self.output),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out x in`
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Linear {
    fn zeros(n_in: usize, n_out: usize) -> Self {
        Self { w: DMatrix::zeros(n_out, n_in), b: DVector::zeros(n_out) }
    }

    fn uniform(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = 1.0 / (n_in as f64).sqrt();
        let w = DMatrix::from_fn(n_out, n_in, |_, _| rng.gen_range(-k..k));
        let b = DVector::from_fn(n_out, |_, _| rng.gen_range(-k..k));
        Self { w, b }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = &self.w * x;
        for mut col in y.column_iter_mut() {
            col += &self.b;
        }
        y
    }

    fn len(&self) -> usize {
        self.w.len() + self.b.len()
    }

    // flat order: weights row-major, then biases
    fn get(&self, i: usize) -> f64 {
        let n = self.w.len();
        if i < n {
            let c = self.w.ncols();
            self.w[(i / c, i % c)]
        } else {
            self.b[i - n]
        }
    }

    fn get_mut(&mut self, i: usize) -> &mut f64 {
        let n = self.w.len();
        if i < n {
            let c = self.w.ncols();
            &mut self.w[(i / c, i % c)]
        } else {
            &mut self.b[i - n]
        }
    }
}

/// Waypoint regressor: separate linear embeddings of the history and path
/// blocks, concatenated, two ReLU + dropout hidden layers, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub dims: MlpDims,
    pub dropout: f64,
    pub rng_seed: u64,
    /// embed_history, embed_path, hidden1, hidden2, output
    pub layers: Vec<Linear>,
}

/// Same layout as the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<Linear>,
}

impl MlpGrads {
    pub fn len(&self) -> usize {
        self.layers.iter().map(Linear::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> f64 {
        let (l, j) = locate(&self.layers, i);
        self.layers[l].get(j)
    }
}

fn locate(layers: &[Linear], mut i: usize) -> (usize, usize) {
    for (l, layer) in layers.iter().enumerate() {
        if i < layer.len() {
            return (l, i);
        }
        i -= layer.len();
    }
    panic!("parameter index out of range");
}

/// Intermediate activations of one batch, columns are samples.
pub struct ForwardCache {
    xh: DMatrix<f64>,
    xp: DMatrix<f64>,
    e: DMatrix<f64>,
    a1: DMatrix<f64>,
    m1: DMatrix<f64>,
    h1: DMatrix<f64>,
    a2: DMatrix<f64>,
    m2: DMatrix<f64>,
    h2: DMatrix<f64>,
    /// Network output in meters.
    pub out: DMatrix<f64>,
}

impl ForwardCache {
    /// Sign pattern of both hidden pre-activations.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.a1.iter().chain(self.a2.iter()).map(|&v| v > 0.0).collect()
    }
}

/// Inverted dropout mask: each entry is 0 with probability `p`, else 1/(1-p).
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: Option<&mut ChaCha8Rng>) -> DMatrix<f64> {
    match rng {
        Some(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            DMatrix::from_fn(rows, cols, |_, _| if rng.gen::<f64>() < p { 0.0 } else { keep })
        }
        _ => DMatrix::from_element(rows, cols, 1.0),
    }
}

thread_local! {
    static FORWARD_CALLS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of forward passes run on the current thread.
pub fn forward_calls() -> u64 {
    FORWARD_CALLS.with(|c| c.get())
}

fn relu(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.map(|v| v.max(0.0))
}

impl MlpModel {
    pub fn new(dims: MlpDims, dropout: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout) {
            return Err(NeuralError::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims.layer_shapes().iter().map(|&(i, o)| Linear::uniform(i, o, &mut rng)).collect();
        Ok(Self { dims, dropout, rng_seed: seed, layers })
    }

    pub fn zeros(dims: MlpDims, dropout: f64) -> Self {
        let layers = dims.layer_shapes().iter().map(|&(i, o)| Linear::zeros(i, o)).collect();
        Self { dims, dropout, rng_seed: 0, layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::len).sum()
    }

    pub fn param(&self, i: usize) -> f64 {
        let (l, j) = locate(&self.layers, i);
        self.layers[l].get(j)
    }

    pub fn set_param(&mut self, i: usize, v: f64) {
        let (l, j) = locate(&self.layers, i);
        *self.layers[l].get_mut(j) = v;
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// Stacks features into `(history, path)` input matrices.
    pub fn batch_inputs(&self, feats: &[&FeatureVector]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        for f in feats {
            if f.history.len() != self.dims.history_in || f.path.len() != self.dims.path_in {
                return Err(NeuralError::Shape(format!(
                    "features {}+{}, model expects {}+{}",
                    f.history.len(),
                    f.path.len(),
                    self.dims.history_in,
                    self.dims.path_in
                )));
            }
        }
        let xh = DMatrix::from_fn(self.dims.history_in, feats.len(), |r, c| feats[c].history[r] * INPUT_SCALE);
        let xp = DMatrix::from_fn(self.dims.path_in, feats.len(), |r, c| feats[c].path[r] * INPUT_SCALE);
        Ok((xh, xp))
    }

    /// Batched forward pass. Dropout is active iff `rng` is given.
    pub fn forward_batch(&self, xh: DMatrix<f64>, xp: DMatrix<f64>, mut rng: Option<&mut ChaCha8Rng>) -> ForwardCache {
        FORWARD_CALLS.with(|c| c.set(c.get() + 1));
        let n = xh.ncols();
        let eh = self.layers[0].apply(&xh);
        let ep = self.layers[1].apply(&xp);
        let mut e = DMatrix::zeros(eh.nrows() + ep.nrows(), n);
        e.rows_mut(0, eh.nrows()).copy_from(&eh);
        e.rows_mut(eh.nrows(), ep.nrows()).copy_from(&ep);
        let a1 = self.layers[2].apply(&e);
        let m1 = dropout_mask(a1.nrows(), n, self.dropout, rng.as_deref_mut());
        let h1 = relu(&a1).component_mul(&m1);
        let a2 = self.layers[3].apply(&h1);
        let m2 = dropout_mask(a2.nrows(), n, self.dropout, rng.as_deref_mut());
        let h2 = relu(&a2).component_mul(&m2);
        let out = self.layers[4].apply(&h2) * OUTPUT_SCALE;
        ForwardCache { xh, xp, e, a1, m1, h1, a2, m2, h2, out }
    }

    /// Predicts waypoints for one feature vector.
    pub fn forward(&self, f: &FeatureVector, rng: Option<&mut ChaCha8Rng>) -> Result<Vec<Vec2>> {
        let (xh, xp) = self.batch_inputs(&[f])?;
        let c = self.forward_batch(xh, xp, rng);
        Ok(c.out.column(0).as_slice().chunks(2).map(|p| Vec2::new(p[0], p[1])).collect())
    }

    /// Batch-mean L2 loss of a forward pass.
    pub fn loss(&self, c: &ForwardCache, targets: &DMatrix<f64>) -> f64 {
        let wp = (self.dims.output / 2) as f64;
        (&c.out - targets).norm_squared() / (wp * c.out.ncols() as f64)
    }

    /// Batch-mean L2 loss and its parameter gradient. `targets` is
    /// `output x batch` in the same interleaved layout as the output.
    pub fn loss_and_grad(&self, c: &ForwardCache, targets: &DMatrix<f64>) -> (f64, MlpGrads) {
        let n = c.out.ncols();
        let wp = (self.dims.output / 2) as f64;
        let diff = &c.out - targets;
        let loss = diff.norm_squared() / (wp * n as f64);
        let g3 = diff * (2.0 * OUTPUT_SCALE / (wp * n as f64));

        let lin = |g: &DMatrix<f64>, x: &DMatrix<f64>| Linear { w: g * x.transpose(), b: g.column_sum() };
        let l4 = lin(&g3, &c.h2);
        let gh2 = self.layers[4].w.tr_mul(&g3);
        let ga2 = gh2.component_mul(&c.m2).zip_map(&c.a2, |g, a| if a > 0.0 { g } else { 0.0 });
        let l3 = lin(&ga2, &c.h1);
        let gh1 = self.layers[3].w.tr_mul(&ga2);
        let ga1 = gh1.component_mul(&c.m1).zip_map(&c.a1, |g, a| if a > 0.0 { g } else { 0.0 });
        let l2 = lin(&ga1, &c.e);
        let ge = self.layers[2].w.tr_mul(&ga1);
        let k = self.dims.embed;
        let l0 = lin(&ge.rows(0, k).into_owned(), &c.xh);
        let l1 = lin(&ge.rows(k, k).into_owned(), &c.xp);
        (loss, MlpGrads { layers: vec![l0, l1, l2, l3, l4] })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let d = &self.dims;
        for v in [d.history_in, d.path_in, d.embed, d.hidden, d.output] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.dropout.to_le_bytes());
        out.extend_from_slice(&self.rng_seed.to_le_bytes());
        for i in 0..self.param_count() {
            out.extend_from_slice(&self.param(i).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(NeuralError::Format("truncated model file".into()));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        if take(8)? != MAGIC {
            return Err(NeuralError::Format("bad magic".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        let version = u32_at(take(4)?);
        if version != FORMAT_VERSION {
            return Err(NeuralError::Format(format!("unsupported model version {version}")));
        }
        let mut dims = [0usize; 5];
        for d in dims.iter_mut() {
            *d = u32_at(take(4)?) as usize;
        }
        let dims = MlpDims { history_in: dims[0], path_in: dims[1], embed: dims[2], hidden: dims[3], output: dims[4] };
        let dropout = f64::from_le_bytes(take(8)?.try_into().unwrap());
        let seed = u64::from_le_bytes(take(8)?.try_into().unwrap());
        let mut m = MlpModel::zeros(dims, dropout);
        m.rng_seed = seed;
        if !(0.0..1.0).contains(&dropout) {
            return Err(NeuralError::Format(format!("dropout {dropout} outside [0, 1)")));
        }
        for i in 0..m.param_count() {
            m.set_param(i, f64::from_le_bytes(take(8)?.try_into().unwrap()));
        }
        if take(1).is_ok() {
            return Err(NeuralError::Format("trailing bytes after parameters".into()));
        }
        if !m.is_finite() {
            return Err(NeuralError::Format("non-finite parameter".into()));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| NeuralError::Io(format!("{}: {e}", path.display())))?;
        f.write_all(&self.to_bytes()).map_err(|e| NeuralError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| NeuralError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&buf)
    }
}

/// Mean over waypoints of the squared Euclidean distance.
pub fn l2_loss(pred: &[Vec2], target: &[Vec2]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(NeuralError::Shape(format!("waypoint counts {} vs {}", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).norm_squared()).sum::<f64>() / pred.len() as f64)
}
