//! Downstream classification on frozen latent features.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, ParamSet, Tape};
use crate::error::{Error, Result};
use crate::layers::init_uniform;
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::train::{AdamW, AdamWConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Linear,
    /// One logistic hidden layer of the given width.
    Mlp(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierOptions {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a relative train-loss improvement
    /// of at least `min_rel_improvement`.
    pub patience: usize,
    pub min_rel_improvement: f64,
    pub seed: u64,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            batch_size: 128,
            max_epochs: 200,
            patience: 5,
            min_rel_improvement: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierResult {
    pub accuracy: f64,
    pub epochs: usize,
    pub final_train_loss: f64,
}

/// Column means and standard deviations of the training features.
fn standardizer(x: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let (n, j) = (x.rows(), x.row_len());
    let mean: Vec<f64> = (0..j)
        .map(|d| (0..n).map(|i| x.row(i)[d]).sum::<f64>() / n as f64)
        .collect();
    let sd = (0..j)
        .map(|d| {
            let v = (0..n).map(|i| (x.row(i)[d] - mean[d]).powi(2)).sum::<f64>() / n as f64;
            if v > 0.0 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    (mean, sd)
}

fn standardize(x: &Tensor<f64>, mean: &[f64], sd: &[f64]) -> Tensor<f64> {
    let j = mean.len();
    Tensor::from_fn(x.shape().to_vec(), |k| (x.data()[k] - mean[k % j]) / sd[k % j])
}

/// Trains a softmax head on `train` features and reports accuracy on `test`.
/// Features are standardized with the training statistics.
pub fn downstream_train_eval(
    train: (&Tensor<f64>, &[usize]),
    test: (&Tensor<f64>, &[usize]),
    head: Head,
    opts: ClassifierOptions,
) -> Result<ClassifierResult> {
    let (xtr, ytr) = train;
    let (xte, yte) = test;
    let (n, j) = xtr.dims2("classifier")?;
    let (_, j_te) = xte.dims2("classifier")?;
    if j != j_te || ytr.len() != n || yte.len() != xte.rows() || n == 0 {
        return Err(Error::shape("classifier", xtr.shape(), xte.shape()));
    }
    let classes = ytr.iter().chain(yte).copied().max().unwrap_or(0) + 1;
    let missing: Vec<usize> = (0..classes).filter(|c| !ytr.contains(c)).collect();
    if !missing.is_empty() {
        log::warn!("classifier: classes {missing:?} have no training examples");
    }

    let (mean, sd) = standardizer(xtr);
    let (xtr, xte) = (standardize(xtr, &mean, &sd), standardize(xte, &mean, &sd));

    let mut rng = RngState::new(opts.seed);
    let mut ps = ParamSet::new();
    let (layers, out_in) = match head {
        Head::Linear => (None, j),
        Head::Mlp(h) => {
            let w = ps.add("hidden.w", init_uniform(vec![h, j], j, h, &mut rng))?;
            let b = ps.add("hidden.b", Tensor::zeros(vec![h]))?;
            (Some((w, b)), h)
        }
    };
    let w_out = ps.add("out.w", init_uniform(vec![classes, out_in], out_in, classes, &mut rng))?;
    let b_out = ps.add("out.b", Tensor::zeros(vec![classes]))?;

    let logits_on = |tape: &mut Tape<f64>, b: &Binding, x: Tensor<f64>| -> Result<_> {
        let mut h = tape.constant(x);
        if let Some((w, bias)) = layers {
            h = tape.matmul(h, b[w], true)?;
            h = tape.add_bias(h, b[bias])?;
            h = tape.sigmoid(h)?;
        }
        let o = tape.matmul(h, b[w_out], true)?;
        tape.add_bias(o, b[b_out])
    };

    let mut sets = [ps];
    let mut opt = AdamW::new(AdamWConfig::default());
    let bs = opts.batch_size.max(1);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut epochs = 0;
    let mut last = f64::NAN;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..opts.max_epochs {
        epochs += 1;
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(bs) {
            let mut tape = Tape::new();
            let b = Binding::bind(&mut tape, &[&sets[0]]);
            let labels: Vec<usize> = chunk.iter().map(|&i| ytr[i]).collect();
            let logits = logits_on(&mut tape, &b, xtr.select_rows(chunk)?)?;
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            total += tape.value(loss).item()? * chunk.len() as f64;
            let g = tape.backward(loss)?;
            sets[0].zero_grad();
            sets[0].accumulate(&g)?;
            opt.step(&mut sets, opts.lr)?;
        }
        last = total / n as f64;
        if last < best * (1.0 - opts.min_rel_improvement) {
            best = last;
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                break;
            }
        }
    }

    let mut tape = Tape::new();
    let b = Binding::bind(&mut tape, &[&sets[0]]);
    let logits = logits_on(&mut tape, &b, xte)?;
    let lv = tape.value(logits);
    let correct = (0..lv.rows())
        .filter(|&i| {
            let row = lv.row(i);
            let arg = (0..row.len()).fold(0, |a, k| if row[k] > row[a] { k } else { a });
            arg == yte[i]
        })
        .count();
    Ok(ClassifierResult {
        accuracy: if yte.is_empty() {
            0.0
        } else {
            correct as f64 / yte.len() as f64
        },
        epochs,
        final_train_loss: last,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(n: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = RngState::new(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let s = if c == 0 { -3.0 } else { 3.0 };
            x.push(s + 0.5 * rng.normal());
            x.push(rng.normal());
            y.push(c);
        }
        (Tensor::new(vec![n, 2], x).unwrap(), y)
    }

    #[test]
    fn separable_data_is_classified_perfectly() {
        let (xtr, ytr) = blobs(200, 1);
        let (xte, yte) = blobs(100, 2);
        for head in [Head::Linear, Head::Mlp(8)] {
            let r = downstream_train_eval((&xtr, &ytr), (&xte, &yte), head, ClassifierOptions::default()).unwrap();
            assert_eq!(r.accuracy, 1.0, "{head:?}");
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (xtr, ytr) = blobs(100, 3);
        let (xte, yte) = blobs(50, 4);
        let run = || {
            downstream_train_eval((&xtr, &ytr), (&xte, &yte), Head::Mlp(4), ClassifierOptions::default())
                .unwrap()
                .final_train_loss
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }
}
