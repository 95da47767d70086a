//! Order-blind reference classifier: logistic regression on token counts.

use std::collections::HashMap;

use eex::data::{tokenize, Example};

pub struct BowOracle {
    index: HashMap<String, usize>,
    weights: Vec<f64>,
    bias: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl BowOracle {
    fn features(&self, text: &str) -> Vec<f64> {
        let mut x = vec![0.0; self.weights.len()];
        for w in tokenize(text) {
            if let Some(&i) = self.index.get(&w) {
                x[i] += 1.0;
            }
        }
        x
    }

    fn score(&self, text: &str) -> f64 {
        let x = self.features(text);
        self.bias + x.iter().zip(&self.weights).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Full-batch gradient descent on the mean logistic loss of binary labels.
    pub fn fit(train: &[Example]) -> Self {
        let mut index = HashMap::new();
        for ex in train {
            for w in tokenize(&ex.text) {
                let next = index.len();
                index.entry(w).or_insert(next);
            }
        }
        let mut oracle = BowOracle {
            weights: vec![0.0; index.len()],
            index,
            bias: 0.0,
        };
        let data: Vec<(Vec<f64>, f64)> = train
            .iter()
            .map(|ex| (oracle.features(&ex.text), ex.label.expect("labeled") as f64))
            .collect();
        let n = data.len() as f64;
        for _ in 0..400 {
            let mut gw = vec![0.0; oracle.weights.len()];
            let mut gb = 0.0;
            for (x, y) in &data {
                let z = oracle.bias + x.iter().zip(&oracle.weights).map(|(a, b)| a * b).sum::<f64>();
                let r = sigmoid(z) - y;
                gb += r;
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += r * xi;
                }
            }
            oracle.bias -= 0.5 * gb / n;
            for (w, g) in oracle.weights.iter_mut().zip(&gw) {
                *w -= 0.5 * g / n;
            }
        }
        oracle
    }

    pub fn accuracy(&self, test: &[Example]) -> f64 {
        let hits = test
            .iter()
            .filter(|ex| usize::from(self.score(&ex.text) > 0.0) == ex.label.expect("labeled"))
            .count();
        hits as f64 / test.len() as f64
    }
}
