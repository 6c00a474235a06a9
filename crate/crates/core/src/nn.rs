//! Two-hidden-layer tanh MLPs with analytic gradients, an Adam optimizer,
//! categorical-head helpers and a text checkpoint format.
//!
//! Parameters live in one flat vector laid out as
//! `[W1 (h×in, row-major), b1 (h), W2 (h×h), b2 (h), W3 (out×h), b3 (out)]`.

use std::io::{BufRead, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamRng;

pub const HIDDEN: usize = 128;
pub const CHECKPOINT_VERSION: &str = "codail-mlp/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    input: usize,
    hidden: usize,
    output: usize,
    params: Vec<f64>,
}

/// Offsets of each block in the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
    pub w3: usize,
    pub b3: usize,
    pub len: usize,
}

impl Layout {
    pub fn new(input: usize, hidden: usize, output: usize) -> Self {
        let w1 = 0;
        let b1 = w1 + hidden * input;
        let w2 = b1 + hidden;
        let b2 = w2 + hidden * hidden;
        let w3 = b2 + hidden;
        let b3 = w3 + output * hidden;
        Layout {
            w1,
            b1,
            w2,
            b2,
            w3,
            b3,
            len: b3 + output,
        }
    }
}

/// Intermediate activations of a batched forward pass, kept for backprop.
#[derive(Clone, Debug)]
pub struct Forward {
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn param_count(input: usize, hidden: usize, output: usize) -> usize {
        Layout::new(input, hidden, output).len
    }

    /// Glorot-uniform weights and zero biases with the default hidden width.
    pub fn new(input: usize, output: usize, rng: &mut StreamRng) -> Self {
        Self::with_hidden(input, HIDDEN, output, rng)
    }

    pub fn with_hidden(input: usize, hidden: usize, output: usize, rng: &mut StreamRng) -> Self {
        let mut m = Self::zeros(input, hidden, output);
        let l = m.layout();
        let mut fill = |start: usize, fan_out: usize, fan_in: usize| {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut m.params[start..start + fan_out * fan_in] {
                *p = rng.random_range(-bound..bound);
            }
        };
        fill(l.w1, hidden, input);
        fill(l.w2, hidden, hidden);
        fill(l.w3, output, hidden);
        m
    }

    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Mlp {
            input,
            hidden,
            output,
            params: vec![0.0; Self::param_count(input, hidden, output)],
        }
    }

    pub fn from_params(input: usize, hidden: usize, output: usize, params: Vec<f64>) -> Result<Self> {
        let expected = Self::param_count(input, hidden, output);
        if params.len() != expected {
            return Err(Error::Shape {
                context: "mlp parameter vector",
                expected,
                got: params.len(),
            });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("mlp parameters".into()));
        }
        Ok(Mlp {
            input,
            hidden,
            output,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    pub fn output_dim(&self) -> usize {
        self.output
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self.input, self.hidden, self.output)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn views(&self) -> [(ArrayView2<'_, f64>, ArrayView1<'_, f64>); 3] {
        let l = self.layout();
        let (i, h, o) = (self.input, self.hidden, self.output);
        let p = &self.params;
        let mat = |start: usize, r: usize, c: usize| ArrayView2::from_shape((r, c), &p[start..start + r * c]).unwrap();
        let vec = |start: usize, n: usize| ArrayView1::from(&p[start..start + n]);
        [
            (mat(l.w1, h, i), vec(l.b1, h)),
            (mat(l.w2, h, h), vec(l.b2, h)),
            (mat(l.w3, o, h), vec(l.b3, o)),
        ]
    }

    fn check_input(&self, width: usize) -> Result<()> {
        if width != self.input {
            return Err(Error::Shape {
                context: "mlp input width",
                expected: self.input,
                got: width,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        let batch = Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap();
        Ok(self.forward_batch(&batch)?.output.row(0).to_vec())
    }

    /// Forward pass over a batch with one input per row.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Forward> {
        self.check_input(x.ncols())?;
        let [(w1, b1), (w2, b2), (w3, b3)] = self.views();
        let h1 = (x.dot(&w1.t()) + &b1).mapv(f64::tanh);
        let h2 = (h1.dot(&w2.t()) + &b2).mapv(f64::tanh);
        let output = h2.dot(&w3.t()) + &b3;
        Ok(Forward {
            input: x.clone(),
            h1,
            h2,
            output,
        })
    }

    /// Gradient of Σ_rows ⟨upstream, output⟩ with respect to the parameters.
    pub fn backward_batch(&self, fwd: &Forward, upstream: &Array2<f64>) -> Result<Vec<f64>> {
        if upstream.dim() != fwd.output.dim() {
            return Err(Error::Shape {
                context: "mlp upstream gradient",
                expected: fwd.output.len(),
                got: upstream.len(),
            });
        }
        let [(_, _), (w2, _), (w3, _)] = self.views();
        let l = self.layout();
        let mut grad = vec![0.0; l.len];
        let mut put = |start: usize, a: Array2<f64>| {
            for (g, v) in grad[start..].iter_mut().zip(a.iter()) {
                *g = *v;
            }
        };
        put(l.w3, upstream.t().dot(&fwd.h2));
        put(l.b3, upstream.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let dz2 = upstream.dot(&w3) * fwd.h2.mapv(|h| 1.0 - h * h);
        put(l.w2, dz2.t().dot(&fwd.h1));
        put(l.b2, dz2.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let dz1 = dz2.dot(&w2) * fwd.h1.mapv(|h| 1.0 - h * h);
        put(l.w1, dz1.t().dot(&fwd.input));
        put(l.b1, dz1.sum_axis(Axis(0)).insert_axis(Axis(0)));
        Ok(grad)
    }

    /// Gradient of ⟨upstream, f(x)⟩ for a single input.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        if upstream.len() != self.output {
            return Err(Error::Shape {
                context: "mlp upstream gradient",
                expected: self.output,
                got: upstream.len(),
            });
        }
        let fwd = self.forward_batch(&Array2::from_shape_vec((1, x.len()), x.to_vec()).unwrap())?;
        let up = Array2::from_shape_vec((1, upstream.len()), upstream.to_vec()).unwrap();
        self.backward_batch(&fwd, &up)
    }
}

/// Stacks equal-length rows into a batch matrix.
pub fn batch_of(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let width = rows.first().map(Vec::len).ok_or(Error::Empty("batch has no rows"))?;
    let mut flat = Vec::with_capacity(rows.len() * width);
    for r in rows {
        if r.len() != width {
            return Err(Error::Shape {
                context: "batch row width",
                expected: width,
                got: r.len(),
            });
        }
        flat.extend_from_slice(r);
    }
    Ok(Array2::from_shape_vec((rows.len(), width), flat).unwrap())
}

/// Adam with optional global-norm gradient clipping. Minimizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn for_model(model: &Mlp, lr: f64) -> Self {
        Self::new(model.params().len(), lr)
    }

    pub fn with_clip(mut self, norm: f64) -> Self {
        self.clip_norm = Some(norm);
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn apply_update(&mut self, model: &mut Mlp, grad: &[f64]) -> Result<()> {
        self.update(model.params_mut(), grad)
    }

    pub fn update(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape {
                context: "optimizer gradient",
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }
        let scale = match self.clip_norm {
            Some(c) => {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > c {
                    c / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grad).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = g * scale;
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
        Ok(())
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Entropy of softmax(logits) and its gradient with respect to the logits.
pub fn entropy_with_grad(logits: &[f64]) -> (f64, Vec<f64>) {
    let lp = log_softmax(logits);
    let p: Vec<f64> = lp.iter().map(|x| x.exp()).collect();
    let h = -p.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
    let grad = p.iter().zip(&lp).map(|(p, l)| -p * (l + h)).collect();
    (h, grad)
}

/// Draws an index from a probability vector.
pub fn sample_index(probs: &[f64], rng: &mut StreamRng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

pub fn one_hot(index: usize, width: usize) -> Vec<f64> {
    let mut v = vec![0.0; width];
    v[index] = 1.0;
    v
}

/// Central finite differences of `f` at the chosen coordinates.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], coords: &[usize], h: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    coords
        .iter()
        .map(|&c| {
            let orig = y[c];
            y[c] = orig + h;
            let plus = f(&y);
            y[c] = orig - h;
            let minus = f(&y);
            y[c] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// |a − n| / max(|a| + |n|, 1e-6): relative where gradients are large, absolute
/// near zero where the ratio is dominated by rounding.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

/// Writes named models as a text checkpoint. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_checkpoint<W: Write>(mut w: W, models: &[(&str, &Mlp)]) -> std::io::Result<()> {
    writeln!(w, "{CHECKPOINT_VERSION} {}", models.len())?;
    for (role, m) in models {
        writeln!(w, "model {role} {} {} {}", m.input, m.hidden, m.output)?;
        for p in &m.params {
            writeln!(w, "{p:?}")?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Vec<(String, Mlp)>> {
    let mut lines = r.lines().enumerate();
    let mut next = |what: &str| -> Result<(usize, String)> {
        match lines.next() {
            Some((n, Ok(l))) => Ok((n + 1, l)),
            Some((n, Err(e))) => Err(Error::Parse {
                line: n + 1,
                message: e.to_string(),
            }),
            None => Err(Error::Parse {
                line: 0,
                message: format!("unexpected end of checkpoint, expected {what}"),
            }),
        }
    };
    let (n, header) = next("header")?;
    let count = header
        .strip_prefix(CHECKPOINT_VERSION)
        .and_then(|rest| rest.trim().parse::<usize>().ok())
        .ok_or_else(|| Error::Parse {
            line: n,
            message: format!("expected '{CHECKPOINT_VERSION} <count>', got '{header}'"),
        })?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let (n, line) = next("model header")?;
        let parts: Vec<&str> = line.split_whitespace().collect();
        let dims: Option<Vec<usize>> = parts.get(2..5).map(|d| d.iter().filter_map(|x| x.parse().ok()).collect());
        let (role, dims) = match (parts.first(), parts.get(1), dims) {
            (Some(&"model"), Some(role), Some(d)) if d.len() == 3 && parts.len() == 5 => (role.to_string(), d),
            _ => {
                return Err(Error::Parse {
                    line: n,
                    message: format!("bad model header '{line}'"),
                })
            }
        };
        let len = Mlp::param_count(dims[0], dims[1], dims[2]);
        let mut params = Vec::with_capacity(len);
        for _ in 0..len {
            let (n, l) = next("parameter")?;
            params.push(l.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: n,
                message: e.to_string(),
            })?);
        }
        out.push((role, Mlp::from_params(dims[0], dims[1], dims[2], params)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn parameter_count_matches_layout_formula() {
        assert_eq!(Mlp::param_count(14, 128, 5), 15 * 128 + 129 * 128 + 129 * 5);
        let m = Mlp::new(14, 5, &mut rng::seeded(0));
        assert_eq!(m.params().len(), 15 * 128 + 129 * 128 + 129 * 5);
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let m = Mlp::zeros(3, 8, 2);
        assert_eq!(m.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn constructed_linear_path_reproduces_input() {
        // tanh(c x) ≈ c x for small c; rescale on the way out.
        let (n, c) = (3, 1e-4);
        let mut m = Mlp::zeros(n, n, n);
        let l = m.layout();
        let p = m.params_mut();
        for k in 0..n {
            p[l.w1 + k * n + k] = c;
            p[l.w2 + k * n + k] = 1.0;
            p[l.w3 + k * n + k] = 1.0 / c;
        }
        let x = [0.3, -0.7, 1.1];
        let y = m.forward(&x).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let m = Mlp::zeros(3, 4, 2);
        assert!(matches!(m.forward(&[1.0]), Err(Error::Shape { .. })));
        assert!(matches!(m.backward(&[1.0, 2.0, 3.0], &[1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let m = Mlp::with_hidden(4, 6, 3, &mut rng::seeded(1));
        let g = m.backward(&[0.1, 0.2, 0.3, 0.4], &[0.0; 3]).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let m = Mlp::with_hidden(4, 6, 3, &mut rng::seeded(2));
        let x = [0.5, -0.2, 0.1, 0.9];
        let (g1, g2) = ([1.0, -0.5, 2.0], [0.3, 0.7, -1.0]);
        let sum: Vec<f64> = g1.iter().zip(&g2).map(|(a, b)| a + b).collect();
        let a = m.backward(&x, &g1).unwrap();
        let b = m.backward(&x, &g2).unwrap();
        let c = m.backward(&x, &sum).unwrap();
        for ((a, b), c) in a.iter().zip(&b).zip(&c) {
            assert!((a + b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut r = rng::seeded(3);
        let m = Mlp::with_hidden(5, 16, 3, &mut r);
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let up = [0.4, -1.2, 0.8];
        let g = m.backward(&x, &up).unwrap();
        let f = |p: &[f64]| {
            let mm = Mlp::from_params(5, 16, 3, p.to_vec()).unwrap();
            mm.forward(&x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum()
        };
        let coords: Vec<usize> = (0..m.params().len()).step_by(7).collect();
        let fd = finite_difference(f, m.params(), &coords, 1e-5);
        for (&c, n) in coords.iter().zip(&fd) {
            assert!(relative_error(g[c], *n) < 1e-4, "coord {c}: {} vs {n}", g[c]);
        }
    }

    #[test]
    fn batch_forward_matches_rows() {
        let m = Mlp::with_hidden(3, 5, 2, &mut rng::seeded(4));
        let rows = vec![vec![0.1, 0.2, 0.3], vec![-1.0, 0.0, 2.0]];
        let out = m.forward_batch(&batch_of(&rows).unwrap()).unwrap().output;
        for (k, row) in rows.iter().enumerate() {
            let single = m.forward(row).unwrap();
            for j in 0..2 {
                assert!((out[[k, j]] - single[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut m = Mlp::with_hidden(2, 3, 1, &mut rng::seeded(5));
        let before = m.clone();
        let mut opt = Adam::for_model(&m, 3e-4);
        opt.apply_update(&mut m, &vec![0.0; before.params().len()]).unwrap();
        assert_eq!(m, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut w = vec![1.0; 4];
        let mut opt = Adam::new(4, 0.01);
        let loss = |w: &[f64]| w.iter().map(|x| x * x).sum::<f64>();
        let mut prev = loss(&w);
        for _ in 0..100 {
            let g: Vec<f64> = w.iter().map(|x| 2.0 * x).collect();
            opt.update(&mut w, &g).unwrap();
            let l = loss(&w);
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn adam_rejects_nan_and_is_deterministic() {
        let mut w = vec![1.0, 2.0];
        let mut opt = Adam::new(2, 0.1);
        assert!(matches!(opt.update(&mut w, &[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        let run = || {
            let mut m = Mlp::with_hidden(2, 4, 2, &mut rng::seeded(6));
            let mut opt = Adam::for_model(&m, 1e-2);
            for _ in 0..5 {
                let g = m.backward(&[0.3, 0.4], &[1.0, -1.0]).unwrap();
                opt.apply_update(&mut m, &g).unwrap();
            }
            m
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        let z = [0.3, -1.1, 2.0, 0.0];
        let (_, g) = entropy_with_grad(&z);
        let fd = finite_difference(|z| entropy_with_grad(z).0, &z, &[0, 1, 2, 3], 1e-5);
        for (a, n) in g.iter().zip(&fd) {
            assert!(relative_error(*a, *n) < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let a = Mlp::with_hidden(3, 4, 2, &mut rng::seeded(7));
        let b = Mlp::with_hidden(2, 5, 1, &mut rng::seeded(8));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("policy", &a), ("value", &b)]).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back[0], ("policy".to_string(), a.clone()));
        assert_eq!(back[1], ("value".to_string(), b.clone()));
        let mut again = Vec::new();
        write_checkpoint(&mut again, &[("policy", &a), ("value", &b)]).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let a = Mlp::with_hidden(3, 4, 2, &mut rng::seeded(7));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("policy", &a)]).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(matches!(read_checkpoint(buf.as_slice()), Err(Error::Parse { .. })));
    }
}
