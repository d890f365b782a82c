//! Batched forward/backward passes of the sigmoid MLP with a softmax head.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::DenseLayer;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Activations of every layer: `acts[0]` is the input, the last entry holds
/// the pre-softmax output scores.
pub(crate) fn forward_batch(layers: &[DenseLayer], x: ArrayView2<f64>) -> Vec<Array2<f64>> {
    let mut acts = Vec::with_capacity(layers.len() + 1);
    acts.push(x.to_owned());
    for (l, layer) in layers.iter().enumerate() {
        let mut z = acts[l].dot(&layer.weights.t());
        z += &layer.biases;
        if l + 1 < layers.len() {
            z.mapv_inplace(sigmoid);
        }
        acts.push(z);
    }
    acts
}

/// Row-wise softmax of output scores.
pub(crate) fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut p = scores.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    p
}

/// Mean cross-entropy of output scores against labels.
pub(crate) fn cross_entropy(scores: &Array2<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &y) in scores.rows().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.mapv(|v| (v - max).exp()).sum().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

pub(crate) fn loss(layers: &[DenseLayer], x: ArrayView2<f64>, labels: &[usize]) -> f64 {
    let acts = forward_batch(layers, x);
    cross_entropy(acts.last().expect("at least one layer"), labels)
}

pub(crate) struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Loss and its gradient with respect to every weight and bias.
pub(crate) fn loss_and_gradients(layers: &[DenseLayer], x: ArrayView2<f64>, labels: &[usize]) -> (f64, Gradients) {
    let acts = forward_batch(layers, x);
    let scores = acts.last().expect("at least one layer");
    let loss = cross_entropy(scores, labels);
    let batch = labels.len() as f64;

    // d loss / d scores = (softmax - onehot) / B
    let mut delta = softmax_rows(scores);
    for (mut row, &y) in delta.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    delta /= batch;

    let mut weights = Vec::with_capacity(layers.len());
    let mut biases = Vec::with_capacity(layers.len());
    for l in (0..layers.len()).rev() {
        weights.push(delta.t().dot(&acts[l]));
        biases.push(delta.sum_axis(Axis(0)));
        if l > 0 {
            let mut back = delta.dot(&layers[l].weights);
            back.zip_mut_with(&acts[l], |d, &a| *d *= a * (1.0 - a));
            delta = back;
        }
    }
    weights.reverse();
    biases.reverse();
    (loss, Gradients { weights, biases })
}

/// Adam moment estimates for one network.
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m_w: Vec<Array2<f64>>,
    v_w: Vec<Array2<f64>>,
    m_b: Vec<Array1<f64>>,
    v_b: Vec<Array1<f64>>,
}

impl Adam {
    pub fn new(layers: &[DenseLayer], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m_w: layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            v_w: layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            m_b: layers.iter().map(|l| Array1::zeros(l.biases.len())).collect(),
            v_b: layers.iter().map(|l| Array1::zeros(l.biases.len())).collect(),
        }
    }

    pub fn update(&mut self, layers: &mut [DenseLayer], grads: &Gradients) {
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let lr = self.lr;
        let apply = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (l, layer) in layers.iter_mut().enumerate() {
            ndarray::Zip::from(&mut layer.weights)
                .and(&grads.weights[l])
                .and(&mut self.m_w[l])
                .and(&mut self.v_w[l])
                .for_each(|p, &g, m, v| apply(p, g, m, v));
            ndarray::Zip::from(&mut layer.biases)
                .and(&grads.biases[l])
                .and(&mut self.m_b[l])
                .and(&mut self.v_b[l])
                .for_each(|p, &g, m, v| apply(p, g, m, v));
        }
    }
}

pub(crate) fn sgd_update(layers: &mut [DenseLayer], grads: &Gradients, lr: f64) {
    for (l, layer) in layers.iter_mut().enumerate() {
        layer.weights.scaled_add(-lr, &grads.weights[l]);
        layer.biases.scaled_add(-lr, &grads.biases[l]);
    }
}
