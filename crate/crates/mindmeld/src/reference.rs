//! Independent reference implementations used only for verification.
//!
//! Everything here is written the slow, obvious way — scalar recurrences,
//! exhaustive path enumeration, straight matrix arithmetic — and shares no
//! code with the production paths it is used to check. Tests and the
//! `grad-check` command compare the two.

use crate::autodiff::{Activation, DenseParams, LstmDirection, LstmParams, ParamTensors};

/// Relative error with an absolute floor, as used by the gradient checks.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1.0);
    (a - b).abs() / denom
}

/// Compare backprop gradients against central finite differences.
///
/// `analytic[ti][ei]` is the backprop gradient for element `ei` of the
/// `ti`-th tensor in `params.param_tensors()` order. `eval` recomputes the
/// scalar loss from the current parameter values; it is called twice per
/// element with that element nudged by `±h`, then the element is restored.
/// Returns the worst relative error seen.
pub fn fd_max_relative_error<P: ParamTensors>(
    params: &mut P,
    analytic: &[Vec<f64>],
    h: f64,
    mut eval: impl FnMut(&P) -> f64,
) -> f64 {
    fn poke<P: ParamTensors>(p: &mut P, ti: usize, ei: usize, v: f64) {
        p.param_tensors_mut()[ti].data_mut()[ei] = v;
    }
    let counts: Vec<usize> = params.param_tensors().iter().map(|t| t.len()).collect();
    assert_eq!(counts.len(), analytic.len());
    let mut worst = 0.0f64;
    for (ti, &n) in counts.iter().enumerate() {
        assert_eq!(n, analytic[ti].len());
        for ei in 0..n {
            let x0 = params.param_tensors()[ti].data()[ei];
            poke(params, ti, ei, x0 + h);
            let up = eval(params);
            poke(params, ti, ei, x0 - h);
            let down = eval(params);
            poke(params, ti, ei, x0);
            let fd = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic[ti][ei], fd));
        }
    }
    worst
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scalar-recurrence LSTM over one direction, no tape.
///
/// Returns the final hidden state after consuming `inputs` in order.
pub fn lstm_direction_final_hidden(dir: &LstmDirection, hidden: usize, inputs: &[Vec<f64>]) -> Vec<f64> {
    let mut h = vec![0.0; hidden];
    let mut c = vec![0.0; hidden];
    for x in inputs {
        let gate = |gp: &crate::autodiff::GateParams, j: usize| {
            let mut s = gp.b.data()[j];
            for (k, &xv) in x.iter().enumerate() {
                s += xv * gp.w.data()[k * hidden + j];
            }
            for (k, &hv) in h.iter().enumerate() {
                s += hv * gp.u.data()[k * hidden + j];
            }
            s
        };
        let mut h_next = vec![0.0; hidden];
        let mut c_next = vec![0.0; hidden];
        for j in 0..hidden {
            let i_g = sigmoid(gate(&dir.input, j));
            let f_g = sigmoid(gate(&dir.forget, j));
            let cand = gate(&dir.cell, j).tanh();
            let o_g = sigmoid(gate(&dir.output, j));
            c_next[j] = f_g * c[j] + i_g * cand;
            h_next[j] = o_g * c_next[j].tanh();
        }
        h = h_next;
        c = c_next;
    }
    h
}

/// Bidirectional encoding by two independent scalar recurrences.
pub fn lstm_bidirectional_encoding(params: &LstmParams, inputs: &[Vec<f64>]) -> Vec<f64> {
    let mut rev: Vec<Vec<f64>> = inputs.to_vec();
    rev.reverse();
    let mut out = lstm_direction_final_hidden(&params.forward_dir, params.hidden_size, inputs);
    out.extend(lstm_direction_final_hidden(
        &params.backward_dir,
        params.hidden_size,
        &rev,
    ));
    out
}

/// Straight matrix evaluation of a dense stack on one input vector.
pub fn dense_eval(params: &DenseParams, x: &[f64]) -> Vec<f64> {
    let mut cur = x.to_vec();
    for layer in &params.layers {
        let (fan_in, fan_out) = (layer.weight.shape()[0], layer.weight.shape()[1]);
        assert_eq!(cur.len(), fan_in);
        let mut next = vec![0.0; fan_out];
        for j in 0..fan_out {
            let mut s = layer.bias.data()[j];
            for (k, &v) in cur.iter().enumerate() {
                s += v * layer.weight.data()[k * fan_out + j];
            }
            next[j] = match layer.activation {
                Activation::Linear => s,
                Activation::Relu => s.max(0.0),
                Activation::Tanh => s.tanh(),
            };
        }
        cur = next;
    }
    cur
}

/// Minimum DTW cost by exhaustive enumeration of every monotone path.
///
/// Paths start at `(0, 0)`, end at `(n-1, m-1)`, and move by one of
/// `(1,0)`, `(0,1)`, `(1,1)`. Exponential — keep sequences short.
pub fn dtw_brute_force(a: &[f64], o: &[f64]) -> f64 {
    assert!(!a.is_empty() && !o.is_empty());
    fn go(a: &[f64], o: &[f64], i: usize, j: usize) -> f64 {
        let here = (a[i] - o[j]).abs();
        if i + 1 == a.len() && j + 1 == o.len() {
            return here;
        }
        let mut best = f64::INFINITY;
        if i + 1 < a.len() {
            best = best.min(go(a, o, i + 1, j));
        }
        if j + 1 < o.len() {
            best = best.min(go(a, o, i, j + 1));
        }
        if i + 1 < a.len() && j + 1 < o.len() {
            best = best.min(go(a, o, i + 1, j + 1));
        }
        here + best
    }
    go(a, o, 0, 0)
}

/// One-variable Adam trace: parameter values after each step of the given
/// gradient sequence.
pub fn adam_scalar_trace(
    x0: f64,
    grads: &[f64],
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Vec<f64> {
    let (b1, b2) = betas;
    let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
    let mut out = Vec::with_capacity(grads.len());
    for (step, &g) in grads.iter().enumerate() {
        let t = (step + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        x -= lr * m_hat / (v_hat.sqrt() + eps);
        out.push(x);
    }
    out
}

/// Segment/axis-aligned-rectangle intersection by direct interval tests,
/// independent of the planner's collision routine.
pub fn segment_hits_rect(
    (x1, y1): (f64, f64),
    (x2, y2): (f64, f64),
    (rx0, ry0, rx1, ry1): (f64, f64, f64, f64),
) -> bool {
    let inside = |x: f64, y: f64| x >= rx0 && x <= rx1 && y >= ry0 && y <= ry1;
    if inside(x1, y1) || inside(x2, y2) {
        return true;
    }
    // Clip the segment against each slab and check the parameter interval.
    let (dx, dy) = (x2 - x1, y2 - y1);
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for (p, q) in [
        (-dx, x1 - rx0),
        (dx, rx1 - x1),
        (-dy, y1 - ry0),
        (dy, ry1 - y1),
    ] {
        if p == 0.0 {
            if q < 0.0 {
                return false;
            }
        } else {
            let r = q / p;
            if p < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    t0 <= t1
}

/// Pearson r by the raw-moment formula, independent of the centered-sum
/// production code.
pub fn pearson_direct(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let sx: f64 = x.iter().sum();
    let sy: f64 = y.iter().sum();
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let syy: f64 = y.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    (n * sxy - sx * sy) / ((n * sxx - sx * sx).sqrt() * (n * syy - sy * sy).sqrt())
}
