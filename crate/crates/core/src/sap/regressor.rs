use rand::Rng;
use serde::{Deserialize, Serialize};

/// Two-layer regressor `W2 · relu(W1 · x + b1) + b2`.
///
/// Weights are kept in `f64` for training; [`Regressor::round_to_f32`]
/// snaps them to values a checkpoint can store exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Regressor {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// hidden x input
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// output x hidden
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Regressor {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
        }
    }

    /// He-style uniform initialisation, zero biases.
    pub fn random(input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Self {
        let mut r = Self::zeros(input, hidden, output);
        let a1 = (6.0 / input as f64).sqrt();
        let a2 = (3.0 / hidden as f64).sqrt();
        r.w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
        r.w2.iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        r
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters in checkpoint order: W1, b1, W2, b2.
    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.w1
            .iter_mut()
            .chain(&mut self.b1)
            .chain(&mut self.w2)
            .chain(&mut self.b2)
    }

    pub fn round_to_f32(&mut self) {
        self.params_mut().for_each(|w| *w = *w as f32 as f64);
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(|w| w.is_finite())
    }

    fn hidden_pre(&self, x: &[f64]) -> Vec<f64> {
        self.w1
            .chunks_exact(self.input)
            .zip(&self.b1)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn head(&self, h: &[f64]) -> Vec<f64> {
        self.w2
            .chunks_exact(self.hidden)
            .zip(&self.b2)
            .map(|(row, b)| row.iter().zip(h).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = self.hidden_pre(x).into_iter().map(|z| z.max(0.0)).collect();
        self.head(&h)
    }

    /// Mean squared error over every output of every sample.
    pub fn loss(&self, xs: &[&[f64]], ys: &[&[f64]]) -> f64 {
        let n = (xs.len() * self.output) as f64;
        xs.iter()
            .zip(ys)
            .map(|(x, y)| {
                self.forward(x)
                    .iter()
                    .zip(y.iter())
                    .map(|(p, t)| (p - t).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n
    }

    /// Loss and its gradient; the gradient reuses this type as a container.
    pub fn loss_and_gradient(&self, xs: &[&[f64]], ys: &[&[f64]]) -> (f64, Regressor) {
        let mut g = Self::zeros(self.input, self.hidden, self.output);
        let n = (xs.len() * self.output) as f64;
        let mut loss = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let z = self.hidden_pre(x);
            let h: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
            let p = self.head(&h);
            let mut dh = vec![0.0; self.hidden];
            for o in 0..self.output {
                let err = p[o] - y[o];
                loss += err * err;
                let dp = 2.0 * err / n;
                g.b2[o] += dp;
                let row = o * self.hidden;
                for j in 0..self.hidden {
                    g.w2[row + j] += dp * h[j];
                    dh[j] += dp * self.w2[row + j];
                }
            }
            for j in 0..self.hidden {
                if z[j] <= 0.0 {
                    continue;
                }
                g.b1[j] += dh[j];
                let row = j * self.input;
                for (i, v) in x.iter().enumerate() {
                    g.w1[row + i] += dh[j] * v;
                }
            }
        }
        (loss / n, g)
    }

    /// `self -= lr * grad`
    pub fn step(&mut self, grad: &Regressor, lr: f64) {
        for (w, g) in self.params_mut().zip(grad.params()) {
            *w -= lr * g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut r = Regressor::random(6, 5, 4, &mut rng);
        r.b1.iter_mut().for_each(|b| *b = rng.gen_range(-0.2..0.2));
        let xs: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let ys: Vec<Vec<f64>> = (0..5)
            .map(|_| (0..4).map(|_| rng.gen_range(0.0..1.0)).collect())
            .collect();
        let xr: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let yr: Vec<&[f64]> = ys.iter().map(Vec::as_slice).collect();
        let (_, g) = r.loss_and_gradient(&xr, &yr);
        let analytic: Vec<f64> = g.params().copied().collect();
        let h = 1e-6;
        for i in 0..r.num_params() {
            let orig = *r.params().nth(i).unwrap();
            *r.params_mut().nth(i).unwrap() = orig + h;
            let up = r.loss(&xr, &yr);
            *r.params_mut().nth(i).unwrap() = orig - h;
            let down = r.loss(&xr, &yr);
            *r.params_mut().nth(i).unwrap() = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (numeric - analytic[i]).abs() / denom < 1e-4,
                "param {i}: {numeric} vs {}",
                analytic[i]
            );
        }
    }
}
