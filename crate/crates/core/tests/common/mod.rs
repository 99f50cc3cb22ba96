//! Oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use gebd_core::autograd::{Graph, Var};
use gebd_core::params::{GradBuffer, ParamStore};
use gebd_core::tensor::Matrix;

/// Minimum total cost over every injective assignment of the smaller side.
pub fn brute_force_assignment(cost: &Matrix<f64>) -> f64 {
    let (r, c) = cost.shape();
    if r == 0 || c == 0 {
        return 0.0;
    }
    if r > c {
        return brute_force_assignment(&cost.transpose());
    }
    fn go(cost: &Matrix<f64>, row: usize, used: &mut [bool], acc: f64, best: &mut f64) {
        if row == cost.rows() {
            *best = best.min(acc);
            return;
        }
        for j in 0..cost.cols() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[(row, j)], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; c], 0.0, &mut best);
    best
}

/// Size of a maximum one-to-one matching among pairs within `threshold`.
pub fn brute_force_max_matching(preds: &[f64], gts: &[f64], duration: f64, threshold: f64) -> usize {
    fn go(i: usize, preds: &[f64], gts: &[f64], ok: &dyn Fn(f64, f64) -> bool, used: &mut [bool]) -> usize {
        if i == preds.len() {
            return 0;
        }
        let mut best = go(i + 1, preds, gts, ok, used);
        for j in 0..gts.len() {
            if !used[j] && ok(preds[i], gts[j]) {
                used[j] = true;
                best = best.max(1 + go(i + 1, preds, gts, ok, used));
                used[j] = false;
            }
        }
        best
    }
    let ok = |p: f64, g: f64| (p - g).abs() / duration <= threshold;
    go(0, preds, gts, &ok, &mut vec![false; gts.len()])
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub struct GradReport {
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

/// Compares backprop against central differences for every scalar of every
/// parameter in `store`. `loss` builds a fresh graph and returns the scalar node.
pub fn gradcheck(
    store: &ParamStore<f64>,
    h: f64,
    floor: f64,
    loss: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var,
) -> GradReport {
    let mut g = Graph::new();
    let l = loss(&mut g, store);
    let grads = g.backward(l);
    let mut analytic = GradBuffer::zeros_like(store);
    g.accumulate_param_grads(&grads, 1.0, &mut analytic);

    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let l = loss(&mut g, s);
        g.item(l)
    };
    let mut work = store.clone();
    let mut report = GradReport {
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for (id, name, value) in store.iter() {
        for k in 0..value.len() {
            let orig = value.as_slice()[k];
            work.get_mut(id).as_mut_slice()[k] = orig + h;
            let up = eval(&work);
            work.get_mut(id).as_mut_slice()[k] = orig - h;
            let down = eval(&work);
            work.get_mut(id).as_mut_slice()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(id).as_slice()[k];
            let e = rel_err(a, numeric, floor);
            report.checked += 1;
            if e > report.max_rel {
                report.max_rel = e;
                report.worst = format!("{name}[{k}]: analytic {a:e}, numeric {numeric:e}");
            }
        }
    }
    report
}

/// Deterministic pseudo-random matrix in `[-scale, scale]`.
pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl rand::Rng) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-scale..=scale))
}
