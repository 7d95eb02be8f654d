//! Independent reference evaluations used by the test suites.
//!
//! Everything here recomputes model outputs from first principles in f64,
//! sharing no code with the production paths it checks: the flow forward is
//! re-derived from the stored parameter tensors, and the quadrature/entropy
//! helpers integrate densities directly. Keep it that way — these functions
//! are the oracle side of the dual-route tests.

use crate::flow::{FlowModel, TransformKind};
use crate::tensor::Tensor;

const LN_2PI_64: f64 = 1.8378770664093453;

fn dense_f64(x: &[f64], w: &Tensor, b: &Tensor, relu: bool) -> Vec<f64> {
    let rows = w.shape()[0];
    let cols = w.shape()[1];
    assert_eq!(x.len(), rows);
    let mut out: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    for (i, &xi) in x.iter().enumerate() {
        let wrow = &w.data()[i * cols..(i + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xi * wv as f64;
        }
    }
    if relu {
        for o in out.iter_mut() {
            if *o < 0.0 {
                *o = 0.0;
            }
        }
    }
    out
}

fn softmax_f64(raw: &[f64]) -> Vec<f64> {
    let mx = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|&v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn softplus_f64(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// f64 re-implementation of the flow forward: normalization, alternating
/// coupling halves, spline (or affine) transform, triangular logdet.
pub fn flow_forward_f64(model: &FlowModel, x_raw: &[f32], cond: &[f32]) -> (Vec<f64>, f64) {
    let cfg = &model.cfg;
    let d = cfg.input_dim;
    assert_eq!(x_raw.len(), d);
    assert_eq!(cond.len(), cfg.cond_dim);

    let params: std::collections::HashMap<&str, &Tensor> =
        model.param_tensors().into_iter().collect();

    let mut z: Vec<f64> = x_raw
        .iter()
        .zip(model.norm.mean.iter().zip(&model.norm.std))
        .map(|(&v, (&m, &s))| (v as f64 - m as f64) / s as f64)
        .collect();
    let mut logdet = 0.0f64;

    for li in 0..cfg.layers {
        let (t_idx, p_idx): (Vec<usize>, Vec<usize>) = if li % 2 == 0 {
            ((0..d).step_by(2).collect(), (1..d).step_by(2).collect())
        } else {
            ((1..d).step_by(2).collect(), (0..d).step_by(2).collect())
        };
        if t_idx.is_empty() {
            continue;
        }
        let mut inp: Vec<f64> = p_idx.iter().map(|&j| z[j]).collect();
        inp.extend(cond.iter().map(|&v| v as f64));

        let get = |suffix: &str| params[format!("layer{li}.{suffix}").as_str()];
        let h1 = dense_f64(&inp, get("w1"), get("b1"), true);
        let h2 = dense_f64(&h1, get("w2"), get("b2"), true);

        match cfg.transform {
            TransformKind::RqSpline => {
                let k = cfg.bins;
                let b = cfg.bound as f64;
                let raw_w = dense_f64(&h2, get("head0.w"), get("head0.b"), false);
                let raw_h = dense_f64(&h2, get("head1.w"), get("head1.b"), false);
                let raw_d = dense_f64(&h2, get("head2.w"), get("head2.b"), false);
                for (dpos, &j) in t_idx.iter().enumerate() {
                    let (y, ld) = rq_forward_f64(
                        z[j],
                        &raw_w[dpos * k..(dpos + 1) * k],
                        &raw_h[dpos * k..(dpos + 1) * k],
                        &raw_d[dpos * (k - 1)..(dpos + 1) * (k - 1)],
                        b,
                    );
                    z[j] = y;
                    logdet += ld;
                }
            }
            TransformKind::Affine => {
                let raw_s = dense_f64(&h2, get("head0.w"), get("head0.b"), false);
                let raw_b = dense_f64(&h2, get("head1.w"), get("head1.b"), false);
                for (dpos, &j) in t_idx.iter().enumerate() {
                    let la = raw_s[dpos].clamp(-7.0, 7.0);
                    z[j] = z[j] * la.exp() + raw_b[dpos];
                    logdet += la;
                }
            }
        }
    }
    (z, logdet)
}

fn rq_forward_f64(x: f64, raw_w: &[f64], raw_h: &[f64], raw_d: &[f64], b: f64) -> (f64, f64) {
    if !(x > -b && x < b) {
        return (x, 0.0);
    }
    let k = raw_w.len();
    let min_bin = 1e-3f64;
    let scale = 2.0 * b - k as f64 * min_bin;
    let build = |raw: &[f64]| -> Vec<f64> {
        let p = softmax_f64(raw);
        let mut knots = vec![-b];
        let mut acc = -b;
        for &v in &p {
            acc += min_bin + scale * v;
            knots.push(acc);
        }
        knots
    };
    let xk = build(raw_w);
    let yk = build(raw_h);
    let offset = (std::f64::consts::E - 1.0).ln();
    let mut dk = vec![1.0f64];
    for &r in raw_d {
        dk.push(softplus_f64(r + offset).max(1e-3));
    }
    dk.push(1.0);

    let mut bin = 0usize;
    while bin + 1 < k && xk[bin + 1] <= x {
        bin += 1;
    }
    let w = xk[bin + 1] - xk[bin];
    let h = yk[bin + 1] - yk[bin];
    let s = h / w;
    let xi = (x - xk[bin]) / w;
    let q = xi * (1.0 - xi);
    let den = s + (dk[bin + 1] + dk[bin] - 2.0 * s) * q;
    let y = yk[bin] + h * (s * xi * xi + dk[bin] * q) / den;
    let numd = s * s * (dk[bin + 1] * xi * xi + 2.0 * s * q + dk[bin] * (1.0 - xi) * (1.0 - xi));
    (y, numd.ln() - 2.0 * den.ln())
}

/// log p(x | cond) in f64 via the shadow forward.
pub fn flow_logprob_f64(model: &FlowModel, x_raw: &[f32], cond: &[f32]) -> f64 {
    let (u, logdet) = flow_forward_f64(model, x_raw, cond);
    let q: f64 = u.iter().map(|v| v * v).sum();
    -0.5 * q - 0.5 * u.len() as f64 * LN_2PI_64 + logdet
}

/// log|det| of a dense matrix by LU with partial pivoting.
pub fn lu_log_abs_det(a: &mut [f64], n: usize) -> f64 {
    let mut log_det = 0.0f64;
    for k in 0..n {
        let mut p = k;
        for i in k + 1..n {
            if a[i * n + k].abs() > a[p * n + k].abs() {
                p = i;
            }
        }
        if p != k {
            for j in 0..n {
                a.swap(k * n + j, p * n + j);
            }
        }
        let piv = a[k * n + k];
        log_det += piv.abs().ln();
        for i in k + 1..n {
            let f = a[i * n + k] / piv;
            for j in k..n {
                a[i * n + j] -= f * a[k * n + j];
            }
        }
    }
    log_det
}

/// Differential entropy of a 1-D density by Simpson quadrature: -∫ p ln p.
/// `pdf` must integrate to 1 over [lo, hi] to good accuracy.
pub fn differential_entropy(pdf: &dyn Fn(f64) -> f64, lo: f64, hi: f64, steps: usize) -> f64 {
    let n = if steps % 2 == 0 { steps } else { steps + 1 };
    let h = (hi - lo) / n as f64;
    let f = |x: f64| -> f64 {
        let p = pdf(x);
        if p > 0.0 {
            -p * p.ln()
        } else {
            0.0
        }
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    acc * h / 3.0
}

/// Density of a two-component Gaussian mixture.
pub fn gaussian_mixture_pdf(x: f64, means: (f64, f64), std: f64, weight: f64) -> f64 {
    let comp = |m: f64| {
        let z = (x - m) / std;
        (-0.5 * z * z).exp() / (std * (2.0 * std::f64::consts::PI).sqrt())
    };
    weight * comp(means.0) + (1.0 - weight) * comp(means.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{FlowConfig, FlowModel};

    #[test]
    fn shadow_forward_agrees_with_f32_path() {
        let mut model = FlowModel::new(
            FlowConfig {
                hidden: 32,
                ..FlowConfig::new(6, 3)
            },
            5,
        );
        model.perturb_params(0.25, 9);
        let x = [0.3f32, -1.2, 0.7, 2.1, -0.4, 0.0];
        let c = [0.5f32, -0.5, 0.1];
        let xt = Tensor::from_rows(1, 6, x.to_vec());
        let ct = Tensor::from_rows(1, 3, c.to_vec());
        let (u32, ld32) = model.forward_batch(&xt, &ct).unwrap();
        let (u64v, ld64) = flow_forward_f64(&model, &x, &c);
        for (a, b) in u32.data().iter().zip(&u64v) {
            assert!((*a as f64 - b).abs() < 1e-4, "{a} vs {b}");
        }
        assert!((ld32[0] as f64 - ld64).abs() < 1e-3);
    }

    #[test]
    fn entropy_of_standard_normal() {
        let pdf = |x: f64| gaussian_mixture_pdf(x, (0.0, 0.0), 1.0, 0.5);
        let h = differential_entropy(&pdf, -10.0, 10.0, 4000);
        let expect = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E).ln();
        assert!((h - expect).abs() < 1e-6, "{h} vs {expect}");
    }

    #[test]
    fn lu_det_of_known_matrix() {
        // det [[2,1],[1,3]] = 5
        let mut a = vec![2.0, 1.0, 1.0, 3.0];
        assert!((lu_log_abs_det(&mut a, 2) - 5.0f64.ln()).abs() < 1e-12);
    }
}
