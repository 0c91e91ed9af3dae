//! Downstream accuracy: k-nearest-neighbour vote and a multinomial logistic probe.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{check_matrix, standardize_with, ColumnStats};

/// Mean per-class recall over the classes present in `truth`.
pub fn balanced_accuracy(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    if truth.len() != predicted.len() || truth.is_empty() {
        return Err(Error::shape(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
    }
    let c = truth.iter().max().map_or(0, |m| m + 1);
    let mut hits = vec![0usize; c];
    let mut total = vec![0usize; c];
    for (&t, &p) in truth.iter().zip(predicted) {
        total[t] += 1;
        hits[t] += usize::from(t == p);
    }
    let present: Vec<f64> =
        hits.iter().zip(&total).filter(|(_, &n)| n > 0).map(|(&h, &n)| h as f64 / n as f64).collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

fn argmax_lowest(scores: &[f64]) -> usize {
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = k;
        }
    }
    best
}

/// Majority vote among the `k` nearest training points (Euclidean); ties in
/// distance go to the lower training index, ties in votes to the lower class.
pub fn knn_predict(train: &Tensor, train_labels: &[usize], query: &Tensor, k: usize) -> Result<Vec<usize>> {
    let (n, d) = check_matrix(train, train_labels.len())?;
    if query.cols() != d {
        return Err(Error::shape(format!("query dim {} vs train dim {d}", query.cols())));
    }
    if k == 0 || k > n {
        return Err(Error::config(format!("k = {k} outside [1, {n}]")));
    }
    let c = train_labels.iter().max().map_or(0, |m| m + 1);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut votes = vec![0.0; c];
    let mut out = Vec::with_capacity(query.rows());
    for q in 0..query.rows() {
        let qr = query.row(q);
        dist.clear();
        dist.extend((0..n).map(|i| {
            let s: f64 = train.row(i).iter().zip(qr).map(|(a, b)| (a - b) * (a - b)).sum();
            (s, i)
        }));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < n {
            dist.select_nth_unstable_by(k - 1, cmp);
        }
        votes.iter_mut().for_each(|v| *v = 0.0);
        for &(_, i) in &dist[..k] {
            votes[train_labels[i]] += 1.0;
        }
        out.push(argmax_lowest(&votes));
    }
    Ok(out)
}

/// Balanced accuracy of the `k`-NN vote on `test`.
pub fn knn_accuracy(
    train: &Tensor,
    train_labels: &[usize],
    test: &Tensor,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    check_matrix(test, test_labels.len())?;
    balanced_accuracy(test_labels, &knn_predict(train, train_labels, test, k)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeOptions {
    /// Inverse regularization strength; the objective is
    /// `mean CE + ‖W‖² / (2·C·n)` with an unpenalized intercept.
    pub inverse_reg: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub memory: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { inverse_reg: 1.0, max_iter: 1000, grad_tol: 1e-6, memory: 10 }
    }
}

/// Fitted multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProbe {
    pub stats: ColumnStats,
    /// `[d × C]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub classes: usize,
    pub iterations: usize,
    pub grad_norm: f64,
}

struct Objective<'a> {
    x: &'a [f64],
    y: &'a [usize],
    n: usize,
    d: usize,
    c: usize,
    reg: f64,
}

impl Objective<'_> {
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let (n, d, c) = (self.n, self.d, self.c);
        let (w, b) = theta.split_at(d * c);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut logits = vec![0.0; c];
        for i in 0..n {
            let xi = &self.x[i * d..(i + 1) * d];
            logits.copy_from_slice(b);
            for (j, &xv) in xi.iter().enumerate() {
                for (k, l) in logits.iter_mut().enumerate() {
                    *l += xv * w[j * c + k];
                }
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            let lse = max + z.ln();
            loss += lse - logits[self.y[i]];
            for k in 0..c {
                let r = (logits[k] - lse).exp() - f64::from(u8::from(k == self.y[i]));
                for (j, &xv) in xi.iter().enumerate() {
                    grad[j * c + k] += r * xv;
                }
                grad[d * c + k] += r;
            }
        }
        let nf = n as f64;
        grad.iter_mut().for_each(|g| *g /= nf);
        let mut penalty = 0.0;
        for (g, &wv) in grad[..d * c].iter_mut().zip(w) {
            *g += self.reg * wv;
            penalty += wv * wv;
        }
        loss / nf + 0.5 * self.reg * penalty
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LogisticProbe {
    pub fn fit(train: &Tensor, labels: &[usize], opts: &ProbeOptions) -> Result<Self> {
        let (n, d) = check_matrix(train, labels.len())?;
        let c = labels.iter().max().map_or(0, |m| m + 1);
        let distinct = {
            let mut seen = vec![false; c];
            labels.iter().for_each(|&l| seen[l] = true);
            seen.iter().filter(|&&s| s).count()
        };
        if distinct < 2 {
            return Err(Error::config("linear probe needs at least 2 classes in the training set"));
        }
        if opts.inverse_reg.is_nan() || opts.inverse_reg <= 0.0 {
            return Err(Error::config("inverse_reg must be positive"));
        }
        let stats = ColumnStats::of(train);
        let x = standardize_with(train, &stats);
        let obj = Objective { x: x.data(), y: labels, n, d, c, reg: 1.0 / (opts.inverse_reg * n as f64) };

        let dim = d * c + c;
        let mut theta = vec![0.0; dim];
        let mut grad = vec![0.0; dim];
        let mut f = obj.eval(&theta, &mut grad);
        let mut hist_s: Vec<Vec<f64>> = Vec::new();
        let mut hist_y: Vec<Vec<f64>> = Vec::new();
        let mut trial = vec![0.0; dim];
        let mut trial_grad = vec![0.0; dim];
        let mut iterations = 0;
        while iterations < opts.max_iter && dot(&grad, &grad).sqrt() >= opts.grad_tol {
            // two-loop recursion for the search direction
            let mut q = grad.clone();
            let mut alpha = vec![0.0; hist_s.len()];
            for k in (0..hist_s.len()).rev() {
                alpha[k] = dot(&hist_s[k], &q) / dot(&hist_y[k], &hist_s[k]);
                q.iter_mut().zip(&hist_y[k]).for_each(|(qv, yv)| *qv -= alpha[k] * yv);
            }
            let gamma = match (hist_s.last(), hist_y.last()) {
                (Some(s), Some(y)) => dot(s, y) / dot(y, y),
                _ => 1.0 / dot(&grad, &grad).sqrt().max(1.0),
            };
            q.iter_mut().for_each(|v| *v *= gamma);
            for k in 0..hist_s.len() {
                let beta = dot(&hist_y[k], &q) / dot(&hist_y[k], &hist_s[k]);
                q.iter_mut().zip(&hist_s[k]).for_each(|(qv, sv)| *qv += (alpha[k] - beta) * sv);
            }
            let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
            let mut slope = dot(&grad, &dir);
            if slope >= 0.0 {
                dir = grad.iter().map(|g| -g).collect();
                slope = dot(&grad, &dir);
                hist_s.clear();
                hist_y.clear();
            }

            // Armijo backtracking
            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..60 {
                trial.iter_mut().zip(&theta).zip(&dir).for_each(|((t, &x), &p)| *t = x + step * p);
                let ft = obj.eval(&trial, &mut trial_grad);
                if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                    accepted = Some(ft);
                    break;
                }
                step *= 0.5;
            }
            iterations += 1;
            let Some(ft) = accepted else { break };
            let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
            if dot(&s, &y) > 0.0 {
                if hist_s.len() == opts.memory {
                    hist_s.remove(0);
                    hist_y.remove(0);
                }
                hist_s.push(s);
                hist_y.push(y);
            }
            std::mem::swap(&mut theta, &mut trial);
            std::mem::swap(&mut grad, &mut trial_grad);
            f = ft;
        }
        let grad_norm = dot(&grad, &grad).sqrt();
        let (w, b) = theta.split_at(d * c);
        Ok(Self { stats, weight: w.to_vec(), bias: b.to_vec(), classes: c, iterations, grad_norm })
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let d = self.stats.mean.len();
        if x.cols() != d || x.shape().len() != 2 {
            return Err(Error::shape(format!("probe expects {d} features, got {:?}", x.shape())));
        }
        let z = standardize_with(x, &self.stats);
        let c = self.classes;
        let mut scores = vec![0.0; c];
        Ok((0..z.rows())
            .map(|i| {
                scores.copy_from_slice(&self.bias);
                for (j, &xv) in z.row(i).iter().enumerate() {
                    for (k, s) in scores.iter_mut().enumerate() {
                        *s += xv * self.weight[j * c + k];
                    }
                }
                argmax_lowest(&scores)
            })
            .collect())
    }
}

/// Balanced test accuracy of a logistic probe fit on `train`.
pub fn linear_probe(train: &Tensor, train_labels: &[usize], test: &Tensor, test_labels: &[usize]) -> Result<f64> {
    check_matrix(test, test_labels.len())?;
    let probe = LogisticProbe::fit(train, train_labels, &ProbeOptions::default())?;
    balanced_accuracy(test_labels, &probe.predict(test)?)
}
