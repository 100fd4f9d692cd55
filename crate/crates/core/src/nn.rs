//! Small dense-math kit for the hand-differentiated models: row-major matrices, the
//! standardization layer, sigmoid helpers, sparse row gradients and AdamW with linear warm-up.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

/// Variance at or below which a vector is treated as constant by [`standardize`].
pub const STD_EPS: f64 = 1e-6;

/// Clipping bound applied to probabilities before taking logs in losses.
pub const PROB_CLIP: f64 = 1e-12;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(z))`, accurate for large `|z|`.
pub fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = M x` for a row-major `rows x cols` matrix.
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    m.chunks_exact(cols).map(|row| dot(row, x)).collect()
}

/// `out += M^T g`.
pub fn matvec_t_acc(m: &[f64], cols: usize, g: &[f64], out: &mut [f64]) {
    for (row, &gi) in m.chunks_exact(cols).zip(g) {
        if gi != 0.0 {
            axpy(gi, row, out);
        }
    }
}

/// `M += g x^T`.
pub fn add_outer(m: &mut [f64], cols: usize, g: &[f64], x: &[f64]) {
    for (row, &gi) in m.chunks_exact_mut(cols).zip(g) {
        if gi != 0.0 {
            axpy(gi, x, row);
        }
    }
}

/// Cached forward state of [`standardize`].
#[derive(Debug, Clone)]
pub struct StdCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
    pub degenerate: bool,
}

/// Standardizes `x` across its dimensions (zero mean, unit variance), then applies
/// `gain * xhat + shift`. A vector whose variance is at most [`STD_EPS`] maps to `xhat = 0` and
/// passes no gradient back to `x`.
pub fn standardize(x: &[f64], gain: &[f64], shift: &[f64]) -> (Vec<f64>, StdCache) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let (xhat, inv_std, degenerate) = if var <= STD_EPS {
        (vec![0.0; x.len()], 0.0, true)
    } else {
        let inv = 1.0 / var.sqrt();
        (x.iter().map(|v| (v - mean) * inv).collect(), inv, false)
    };
    let y = xhat
        .iter()
        .zip(gain)
        .zip(shift)
        .map(|((h, g), s)| g * h + s)
        .collect();
    (
        y,
        StdCache {
            xhat,
            inv_std,
            degenerate,
        },
    )
}

/// Backward pass of [`standardize`]: accumulates gain/shift gradients, returns `dL/dx`.
pub fn standardize_backward(
    cache: &StdCache,
    gain: &[f64],
    gy: &[f64],
    g_gain: &mut [f64],
    g_shift: &mut [f64],
) -> Vec<f64> {
    for i in 0..gy.len() {
        g_gain[i] += gy[i] * cache.xhat[i];
        g_shift[i] += gy[i];
    }
    if cache.degenerate {
        return vec![0.0; gy.len()];
    }
    let d = gy.len() as f64;
    let gxh: Vec<f64> = gy.iter().zip(gain).map(|(a, b)| a * b).collect();
    let mean_g = gxh.iter().sum::<f64>() / d;
    let mean_gx = dot(&gxh, &cache.xhat) / d;
    gxh.iter()
        .zip(&cache.xhat)
        .map(|(g, h)| cache.inv_std * (g - mean_g - h * mean_gx))
        .collect()
}

pub fn uniform_vec<R: Rng>(rng: &mut R, len: usize, bound: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-bound..bound)).collect()
}

/// Gradient rows of an embedding table, keyed by row. Ordered for deterministic iteration.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseRows {
    pub width: usize,
    pub rows: BTreeMap<u32, Vec<f64>>,
}

impl SparseRows {
    pub fn new(width: usize) -> Self {
        SparseRows {
            width,
            rows: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, row: u32, scale: f64, v: &[f64]) {
        let w = self.width;
        let r = self.rows.entry(row).or_insert_with(|| vec![0.0; w]);
        axpy(scale, v, r);
    }

    pub fn merge(&mut self, other: &SparseRows) {
        for (&row, v) in &other.rows {
            self.add(row, 1.0, v);
        }
    }

    pub fn get(&self, row: u32) -> Option<&[f64]> {
        self.rows.get(&row).map(Vec::as_slice)
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.rows.values_mut() {
            v.iter_mut().for_each(|x| *x *= s);
        }
    }
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

/// Borrowed gradient for one parameter tensor.
pub enum GradView<'a> {
    Dense(&'a [f64]),
    Rows(&'a SparseRows),
}

/// Optimizer hyperparameters shared by retriever and reader training.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-2,
            weight_decay: 0.01,
            warmup: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear warm-up over the first `warmup` fraction of steps, then linear decay to zero.
pub fn scheduled_lr(cfg: &OptimConfig, step: usize, total_steps: usize) -> f64 {
    let total = total_steps.max(1) as f64;
    let warm = (cfg.warmup * total).max(1.0);
    let s = step as f64;
    let factor = if s < warm {
        (s + 1.0) / warm
    } else {
        ((total - s) / (total - warm).max(1.0)).max(0.0)
    };
    cfg.lr * factor
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with decoupled weight decay. Call [`AdamW::begin_step`] once per optimizer step, then
/// [`AdamW::update`] for every parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimConfig,
    t: u64,
    state: HashMap<String, Moments>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Self {
        AdamW {
            cfg,
            t: 0,
            state: HashMap::new(),
        }
    }

    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    pub fn update(&mut self, name: &str, param: &mut [f64], grad: GradView<'_>, decay: bool, lr: f64) {
        let cfg = self.cfg;
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; param.len()],
            v: vec![0.0; param.len()],
        });
        let bc1 = 1.0 - cfg.beta1.powf(self.t as f64);
        let bc2 = 1.0 - cfg.beta2.powf(self.t as f64);
        let step_size = lr * bc2.sqrt() / bc1;
        let wd = if decay { lr * cfg.weight_decay } else { 0.0 };
        let n_params = param.len();
        let mut apply = |i: usize, g: f64| {
            let m = &mut st.m[i];
            let v = &mut st.v[i];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let p = &mut param[i];
            *p -= step_size * *m / (v.sqrt() + cfg.eps);
            *p -= wd * *p;
        };
        match grad {
            GradView::Dense(g) => {
                for (i, &gi) in g.iter().enumerate() {
                    apply(i, gi);
                }
            }
            GradView::Rows(rows) => {
                let w = rows.width;
                let n_rows = n_params / w;
                for r in 0..n_rows {
                    match rows.get(r as u32) {
                        Some(g) => {
                            for (k, &gk) in g.iter().enumerate() {
                                apply(r * w + k, gk);
                            }
                        }
                        None => {
                            for k in 0..w {
                                apply(r * w + k, 0.0);
                            }
                        }
                    }
                }
            }
        }
    }
}
