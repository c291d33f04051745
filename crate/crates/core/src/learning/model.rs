use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::data::Dataset;

/// Flattened model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelVector {
    pub values: Vec<f64>,
}

impl ModelVector {
    pub fn zeros(n: usize) -> Self {
        ModelVector { values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rounds every value to the nearest `f32`. Nodes do this before
    /// fragmenting so that what they send and what they keep are identical.
    pub fn quantize_f32(&mut self) {
        for v in &mut self.values {
            *v = f64::from(*v as f32);
        }
    }
}

/// One hidden `tanh` layer followed by softmax; `hidden = 0` is plain
/// softmax (multinomial logistic) regression.
///
/// Layout of the flat vector: `W1 (hidden x dim)`, `b1`, `W2 (classes x
/// hidden)`, `b2`; without a hidden layer `W (classes x dim)`, `b`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl Mlp {
    pub fn param_count(&self) -> usize {
        if self.hidden == 0 {
            self.classes * self.dim + self.classes
        } else {
            self.hidden * self.dim + self.hidden + self.classes * self.hidden + self.classes
        }
    }

    /// Layer shapes as (rows, cols) for reshaping the flat vector.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        if self.hidden == 0 {
            vec![(self.classes, self.dim), (self.classes, 1)]
        } else {
            vec![
                (self.hidden, self.dim),
                (self.hidden, 1),
                (self.classes, self.hidden),
                (self.classes, 1),
            ]
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelVector {
        let mut values = Vec::with_capacity(self.param_count());
        for (rows, cols) in self.shapes() {
            if cols == 1 {
                values.extend(core::iter::repeat(0.0).take(rows));
            } else {
                let limit = libm::sqrt(6.0 / (rows + cols) as f64);
                values.extend((0..rows * cols).map(|_| rng.gen_range(-limit..limit)));
            }
        }
        ModelVector { values }
    }

    fn logits(&self, w: &[f64], x: &[f64], hidden_out: &mut [f64], logits: &mut [f64]) {
        let (d, h, c) = (self.dim, self.hidden, self.classes);
        if h == 0 {
            let (wm, b) = w.split_at(c * d);
            for k in 0..c {
                logits[k] = b[k] + dot(&wm[k * d..(k + 1) * d], x);
            }
            return;
        }
        let (w1, rest) = w.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        for j in 0..h {
            hidden_out[j] = libm::tanh(b1[j] + dot(&w1[j * d..(j + 1) * d], x));
        }
        for k in 0..c {
            logits[k] = b2[k] + dot(&w2[k * h..(k + 1) * h], hidden_out);
        }
    }

    /// Mean cross-entropy over `idx` and its gradient (accumulated into
    /// `grad`, which is overwritten).
    pub fn loss_grad(&self, w: &[f64], data: &Dataset, idx: &[usize], grad: &mut [f64]) -> f64 {
        let (d, h, c) = (self.dim, self.hidden, self.classes);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut hid = vec![0.0; h];
        let mut z = vec![0.0; c];
        let mut dz = vec![0.0; c];
        let mut dh = vec![0.0; h];
        let scale = 1.0 / idx.len().max(1) as f64;
        let mut loss = 0.0;
        for &i in idx {
            let x = data.row(i);
            let y = data.y[i] as usize;
            self.logits(w, x, &mut hid, &mut z);
            let lse = log_sum_exp(&z);
            loss += lse - z[y];
            for k in 0..c {
                dz[k] = (libm::exp(z[k] - lse) - if k == y { 1.0 } else { 0.0 }) * scale;
            }
            if h == 0 {
                let (gw, gb) = grad.split_at_mut(c * d);
                for k in 0..c {
                    axpy(dz[k], x, &mut gw[k * d..(k + 1) * d]);
                    gb[k] += dz[k];
                }
                continue;
            }
            let w2 = &w[h * d + h..h * d + h + c * h];
            let (gw1, rest) = grad.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            dh.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..c {
                axpy(dz[k], &hid, &mut gw2[k * h..(k + 1) * h]);
                gb2[k] += dz[k];
                axpy(dz[k], &w2[k * h..(k + 1) * h], &mut dh);
            }
            for j in 0..h {
                let da = dh[j] * (1.0 - hid[j] * hid[j]);
                axpy(da, x, &mut gw1[j * d..(j + 1) * d]);
                gb1[j] += da;
            }
        }
        loss * scale
    }

    pub fn predict(&self, w: &[f64], x: &[f64]) -> usize {
        let mut hid = vec![0.0; self.hidden];
        let mut z = vec![0.0; self.classes];
        self.logits(w, x, &mut hid, &mut z);
        argmax(&z)
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and mean cross-entropy on `test`.
pub fn evaluate(model: &Mlp, w: &ModelVector, test: &Dataset) -> Evaluation {
    let mut hid = vec![0.0; model.hidden];
    let mut z = vec![0.0; model.classes];
    let mut correct = 0usize;
    let mut loss = 0.0;
    for i in 0..test.len() {
        model.logits(&w.values, test.row(i), &mut hid, &mut z);
        let y = test.y[i] as usize;
        if argmax(&z) == y {
            correct += 1;
        }
        loss += log_sum_exp(&z) - z[y];
    }
    let n = test.len().max(1) as f64;
    Evaluation {
        accuracy: correct as f64 / n,
        loss: loss / n,
    }
}

/// `steps` minibatch SGD steps with step size `eta`, batches drawn with
/// replacement from `data`.
///
/// # Panics
/// If `steps == 0` or `data` is empty.
pub fn local_train<R: Rng + ?Sized>(
    model: &Mlp,
    w: &ModelVector,
    data: &Dataset,
    steps: usize,
    eta: f64,
    batch: usize,
    rng: &mut R,
) -> ModelVector {
    assert!(steps >= 1, "local training needs at least one step");
    assert!(!data.is_empty(), "local training needs data");
    let mut out = w.clone();
    let mut grad = vec![0.0; out.len()];
    let mut idx = vec![0usize; batch.clamp(1, data.len())];
    for _ in 0..steps {
        for i in idx.iter_mut() {
            *i = rng.gen_range(0..data.len());
        }
        model.loss_grad(&out.values, data, &idx, &mut grad);
        axpy(-eta, &grad, &mut out.values);
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + libm::log(z.iter().map(|v| libm::exp(v - m)).sum::<f64>())
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learning::data::TaskSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn param_counts() {
        assert_eq!(Mlp { dim: 32, hidden: 32, classes: 10 }.param_count(), 1386);
        assert_eq!(Mlp { dim: 4, hidden: 0, classes: 3 }.param_count(), 15);
        let m = Mlp { dim: 5, hidden: 3, classes: 2 };
        assert_eq!(m.shapes().iter().map(|(r, c)| r * c).sum::<usize>(), m.param_count());
    }

    #[test]
    fn perfect_weights_score_one() {
        // Two classes on the first axis; the weight vector separates them.
        let mut d = Dataset::empty(2, 2);
        for i in 0..50 {
            let s = 1.0 + i as f64 / 10.0;
            d.push(&[-s, 0.3], 0);
            d.push(&[s, -0.3], 1);
        }
        let m = Mlp { dim: 2, hidden: 0, classes: 2 };
        let w = ModelVector {
            values: vec![-1.0, 0.0, 1.0, 0.0, 0.0, 0.0],
        };
        assert_eq!(evaluate(&m, &w, &d).accuracy, 1.0);
    }

    #[test]
    fn training_reduces_loss() {
        let spec = TaskSpec {
            classes: 3,
            dim: 4,
            separation: 2.0,
        };
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let c = spec.centres(&mut rng);
        let d = spec.sample(&c, 300, &mut rng);
        let m = Mlp { dim: 4, hidden: 8, classes: 3 };
        let w0 = m.init(&mut rng);
        let w1 = local_train(&m, &w0, &d, 200, 0.1, 16, &mut rng);
        assert!(evaluate(&m, &w1, &d).loss < evaluate(&m, &w0, &d).loss);
    }

    #[test]
    #[should_panic(expected = "at least one step")]
    fn zero_steps_rejected() {
        let m = Mlp { dim: 1, hidden: 0, classes: 2 };
        let mut d = Dataset::empty(1, 2);
        d.push(&[0.0], 0);
        let w = ModelVector::zeros(m.param_count());
        local_train(&m, &w, &d, 0, 0.1, 1, &mut ChaCha20Rng::seed_from_u64(0));
    }
}
