//! Conditional normalizing flow built from coupling layers.
//!
//! Each layer transforms one half of the flattened action window with an
//! element-wise monotone map (rational-quadratic spline or affine) whose
//! parameters come from a feed-forward conditioner reading the other half
//! and the observation window. Halves alternate between even and odd
//! indices across layers. The Jacobian of a layer is triangular, so the
//! log-determinant is the sum of per-dimension log-derivatives of the
//! transformed half, and the exact density is
//!
//!   log p(x | c) = log N(u; 0, I) + sum_layers logdet,  u = T(x | c).
//!
//! Two execution paths share the same kernels: a tape path used whenever
//! gradients are needed (training, score of log p w.r.t. x) and a direct
//! value path for sampling through the inverse, which also yields log p of
//! each sample for free (log N(u) minus the inverse log-derivatives).

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{clip_grad_norm, AdamState};
use crate::rng;
use crate::spline::{
    self, normalize_into, SplineKnots, IDENTITY_OFFSET, MIN_BIN, MIN_DERIV,
};
use crate::tape::{Tape, Var};
use crate::tensor::{self, Tensor};

pub const LN_2PI: f32 = 1.837_877_1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformKind {
    RqSpline,
    Affine,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowConfig {
    /// Flattened action-window dimension D.
    pub input_dim: usize,
    /// Flattened observation-window dimension C.
    pub cond_dim: usize,
    pub layers: usize,
    pub hidden: usize,
    pub bins: usize,
    pub bound: f32,
    pub transform: TransformKind,
    /// Normalization stats are computed per `d % norm_group` and tiled
    /// across the window, so every occurrence of an action coordinate
    /// shares one mean/std.
    pub norm_group: usize,
}

impl FlowConfig {
    pub fn new(input_dim: usize, cond_dim: usize) -> Self {
        FlowConfig {
            input_dim,
            cond_dim,
            layers: 10,
            hidden: 256,
            bins: 8,
            bound: 3.0,
            transform: TransformKind::RqSpline,
            norm_group: input_dim,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn normalize_row(&self, raw: &[f32], out: &mut [f32]) {
        for ((o, &r), (&m, &s)) in out
            .iter_mut()
            .zip(raw)
            .zip(self.mean.iter().zip(&self.std))
        {
            *o = (r - m) / s;
        }
    }

    pub fn denormalize_row(&self, z: &[f32], out: &mut [f32]) {
        for ((o, &v), (&m, &s)) in out.iter_mut().zip(z).zip(self.mean.iter().zip(&self.std)) {
            *o = v * s + m;
        }
    }

    /// Constant offset between normalized- and raw-space log densities.
    pub fn log_det_std(&self) -> f32 {
        self.std.iter().map(|s| s.ln()).sum()
    }
}

/// Indices of each parameter tensor of one layer inside the flat param vec.
#[derive(Debug, Clone)]
struct LayerParams {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    /// (weight, bias) per output head: 3 heads for splines
    /// (widths, heights, derivatives), 2 for affine (log-scale, shift).
    heads: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct CouplingLayer {
    transformed: Rc<Vec<usize>>,
    passthrough: Rc<Vec<usize>>,
    /// inverse permutation mapping full-vector position -> position in
    /// concat(transformed', passthrough)
    reassemble: Rc<Vec<usize>>,
    params: LayerParams,
}

pub struct FlowModel {
    pub cfg: FlowConfig,
    pub norm: Normalization,
    layers: Vec<CouplingLayer>,
    params: Vec<Rc<Tensor>>,
    names: Vec<String>,
}

/// Per-epoch staged training plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub stages: Vec<(usize, usize)>,
    pub lr: f32,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f32,
    pub seed: u64,
}

impl TrainSchedule {
    /// Reference schedule: 100 epochs each at batch 128, 256, 512, Adam
    /// lr 1e-4.
    pub fn reference(seed: u64) -> Self {
        TrainSchedule {
            stages: vec![(100, 128), (100, 256), (100, 512)],
            lr: 1e-4,
            grad_clip: 10.0,
            seed,
        }
    }

    /// Same staged shape scaled down to `epochs` total.
    pub fn scaled(epochs: usize, lr: f32, seed: u64) -> Self {
        let per = (epochs / 3).max(1);
        TrainSchedule {
            stages: vec![(per, 128), (per, 256), (epochs.saturating_sub(2 * per).max(1), 512)],
            lr,
            grad_clip: 10.0,
            seed,
        }
    }
}

impl FlowModel {
    pub fn new(cfg: FlowConfig, seed: u64) -> Self {
        assert!(cfg.layers >= 1 && cfg.input_dim >= 1);
        assert!(cfg.input_dim % cfg.norm_group == 0);
        let mut r = rng::derive(seed, 0xf10f);
        let mut params: Vec<Rc<Tensor>> = Vec::new();
        let mut names = Vec::new();
        let mut layers = Vec::new();
        let d = cfg.input_dim;

        let evens: Vec<usize> = (0..d).step_by(2).collect();
        let odds: Vec<usize> = (1..d).step_by(2).collect();

        for li in 0..cfg.layers {
            let (t_idx, p_idx) = if li % 2 == 0 {
                (evens.clone(), odds.clone())
            } else {
                (odds.clone(), evens.clone())
            };
            let t_len = t_idx.len();
            let in_dim = p_idx.len() + cfg.cond_dim;

            let mut reassemble = vec![0usize; d];
            for (pos, &j) in t_idx.iter().enumerate() {
                reassemble[j] = pos;
            }
            for (pos, &j) in p_idx.iter().enumerate() {
                reassemble[j] = t_len + pos;
            }

            let head_dims: Vec<usize> = match cfg.transform {
                TransformKind::RqSpline => vec![
                    t_len * cfg.bins,
                    t_len * cfg.bins,
                    t_len * (cfg.bins - 1),
                ],
                TransformKind::Affine => vec![t_len, t_len],
            };

            let mut push = |name: String, t: Tensor, params: &mut Vec<Rc<Tensor>>| {
                names.push(name);
                params.push(Rc::new(t));
                params.len() - 1
            };
            let he = |r: &mut ChaCha8Rng, rows: usize, cols: usize| {
                let s = (2.0 / rows.max(1) as f32).sqrt();
                let data = (0..rows * cols)
                    .map(|_| rng::standard_normal(r) * s)
                    .collect();
                Tensor::new(vec![rows, cols], data)
            };

            let w1 = push(format!("layer{li}.w1"), he(&mut r, in_dim, cfg.hidden), &mut params);
            let b1 = push(format!("layer{li}.b1"), Tensor::zeros(vec![cfg.hidden]), &mut params);
            let w2 = push(format!("layer{li}.w2"), he(&mut r, cfg.hidden, cfg.hidden), &mut params);
            let b2 = push(format!("layer{li}.b2"), Tensor::zeros(vec![cfg.hidden]), &mut params);
            let mut heads = Vec::new();
            for (hi, &hd) in head_dims.iter().enumerate() {
                // zero-initialized heads make every layer start as the
                // identity map
                let hw = push(
                    format!("layer{li}.head{hi}.w"),
                    Tensor::zeros(vec![cfg.hidden, hd]),
                    &mut params,
                );
                let hb = push(
                    format!("layer{li}.head{hi}.b"),
                    Tensor::zeros(vec![hd]),
                    &mut params,
                );
                heads.push((hw, hb));
            }

            layers.push(CouplingLayer {
                transformed: Rc::new(t_idx),
                passthrough: Rc::new(p_idx),
                reassemble: Rc::new(reassemble),
                params: LayerParams { w1, b1, w2, b2, heads },
            });
        }

        FlowModel {
            norm: Normalization::identity(cfg.input_dim),
            cfg,
            layers,
            params,
            names,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_tensors(&self) -> Vec<(&str, &Tensor)> {
        self.names
            .iter()
            .map(|n| n.as_str())
            .zip(self.params.iter().map(|p| p.as_ref()))
            .collect()
    }

    pub fn set_param(&mut self, name: &str, t: Tensor) -> Result<()> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Format(format!("unknown flow parameter {name}")))?;
        if t.shape() != self.params[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "set_param",
                lhs: self.params[i].shape().to_vec(),
                rhs: t.shape().to_vec(),
            });
        }
        self.params[i] = Rc::new(t);
        Ok(())
    }

    /// Add seeded Gaussian noise to every parameter, scaled by 1/sqrt(fan_in)
    /// for weight matrices so head outputs land at O(scale). Gives tests a
    /// reproducible non-identity transform without training.
    pub fn perturb_params(&mut self, scale: f32, seed: u64) {
        let mut r = rng::derive(seed, 0x9e27);
        for p in &mut self.params {
            let t = Rc::make_mut(p);
            let s = if t.shape().len() == 2 {
                scale / (t.shape()[0].max(1) as f32).sqrt()
            } else {
                scale * 0.1
            };
            for v in t.data_mut() {
                *v += s * rng::standard_normal(&mut r);
            }
        }
    }

    // ── tape path ────────────────────────────────────────────────────

    /// Register every parameter on a tape. Buffers are shared, not copied.
    pub fn param_leaves(&self, tape: &mut Tape, tracked: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf_rc(Rc::clone(p), tracked))
            .collect()
    }

    /// z-scores raw input then runs the coupling stack.
    /// Returns (u, per-row logdet over the layers only).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        x_raw: Var,
        cond: Var,
        pv: &[Var],
    ) -> Result<(Var, Var)> {
        let inv_std: Vec<f32> = self.norm.std.iter().map(|s| 1.0 / s).collect();
        let shift: Vec<f32> = self
            .norm
            .mean
            .iter()
            .zip(&self.norm.std)
            .map(|(m, s)| -m / s)
            .collect();
        let d = self.cfg.input_dim;
        let z = tape.affine_rows(
            x_raw,
            Rc::new(Tensor::new(vec![d], inv_std)),
            &Tensor::new(vec![d], shift),
        )?;
        self.forward_layers_tape(tape, z, cond, pv)
    }

    /// Coupling stack on an already-normalized input.
    pub fn forward_layers_tape(
        &self,
        tape: &mut Tape,
        z0: Var,
        cond: Var,
        pv: &[Var],
    ) -> Result<(Var, Var)> {
        let n = tape.value(z0).rows();
        let mut z = z0;
        let mut logdet = tape.constant(Tensor::zeros(vec![n]));
        for layer in &self.layers {
            let (znext, ld) = self.layer_forward_tape(tape, z, cond, layer, pv)?;
            z = znext;
            logdet = tape.add(logdet, ld)?;
        }
        Ok((z, logdet))
    }

    fn layer_forward_tape(
        &self,
        tape: &mut Tape,
        z: Var,
        cond: Var,
        layer: &CouplingLayer,
        pv: &[Var],
    ) -> Result<(Var, Var)> {
        if layer.transformed.is_empty() {
            // odd-D layers with an empty half pass everything through
            let n = tape.value(z).rows();
            let ld = tape.constant(Tensor::zeros(vec![n]));
            return Ok((z, ld));
        }
        let p = &layer.params;
        let x_t = tape.select_cols(z, Rc::clone(&layer.transformed))?;
        let x_p = tape.select_cols(z, Rc::clone(&layer.passthrough))?;
        let inp = tape.concat_cols(x_p, cond)?;

        let h1 = tape.matmul(inp, pv[p.w1])?;
        let h1 = tape.add_bias(h1, pv[p.b1])?;
        let h1 = tape.relu(h1);
        let h2 = tape.matmul(h1, pv[p.w2])?;
        let h2 = tape.add_bias(h2, pv[p.b2])?;
        let h2 = tape.relu(h2);

        let mut raws = Vec::with_capacity(p.heads.len());
        for &(hw, hb) in &p.heads {
            let o = tape.matmul(h2, pv[hw])?;
            raws.push(tape.add_bias(o, pv[hb])?);
        }

        let t_len = layer.transformed.len();
        let (y_t, ld) = match self.cfg.transform {
            TransformKind::RqSpline => {
                self.spline_tape(tape, x_t, raws[0], raws[1], raws[2], t_len)?
            }
            TransformKind::Affine => self.affine_tape(tape, x_t, raws[0], raws[1], t_len)?,
        };

        let joined = tape.concat_cols(y_t, x_p)?;
        let z_next = tape.select_cols(joined, Rc::clone(&layer.reassemble))?;
        Ok((z_next, ld))
    }

    fn spline_tape(
        &self,
        tape: &mut Tape,
        x_t: Var,
        raw_w: Var,
        raw_h: Var,
        raw_d: Var,
        t_len: usize,
    ) -> Result<(Var, Var)> {
        let n = tape.value(x_t).rows();
        let k = self.cfg.bins;
        let b = self.cfg.bound;
        let r_total = n * t_len;

        let xf = tape.reshape(x_t, vec![r_total])?;
        let xc = tape.clamp(xf, -b, b);

        let scale = 2.0 * b - k as f32 * MIN_BIN;
        let knots_from = |tape: &mut Tape, raw: Var| -> Result<Var> {
            let m = tape.reshape(raw, vec![r_total, k])?;
            let sm = tape.softmax_rows(m);
            let w = tape.scale_shift(sm, scale, MIN_BIN);
            let cw = tape.cumsum_rows(w);
            let inner = tape.scale_shift(cw, 1.0, -b);
            let left = tape.constant(Tensor::filled(vec![r_total, 1], -b));
            tape.concat_cols(left, inner)
        };
        let xk_full = knots_from(tape, raw_w)?;
        let yk_full = knots_from(tape, raw_h)?;

        let rd = tape.reshape(raw_d, vec![r_total, k - 1])?;
        let shifted = tape.scale_shift(rd, 1.0, IDENTITY_OFFSET);
        let sp = tape.softplus(shifted);
        let d_int = tape.clamp_min(sp, MIN_DERIV);
        let ones = tape.constant(Tensor::filled(vec![r_total, 1], 1.0));
        let d_left = tape.concat_cols(ones, d_int)?;
        let ones2 = tape.constant(Tensor::filled(vec![r_total, 1], 1.0));
        let dk_full = tape.concat_cols(d_left, ones2)?;

        // bin location and the inside/tail mask come from values only
        let (idx, idx1, mask) = {
            let xkv = tape.value(xk_full);
            let xv = tape.value(xf);
            let mut idx = Vec::with_capacity(r_total);
            let mut idx1 = Vec::with_capacity(r_total);
            let mut mask = Vec::with_capacity(r_total);
            for r in 0..r_total {
                let row = &xkv.data()[r * (k + 1)..(r + 1) * (k + 1)];
                let x = xv.data()[r];
                let inside = x > -b && x < b;
                mask.push(if inside { 1.0f32 } else { 0.0 });
                let j = spline_bin(row, x);
                idx.push(j);
                idx1.push(j + 1);
            }
            (Rc::new(idx), Rc::new(idx1), mask)
        };

        let xk = tape.gather_per_row(xk_full, Rc::clone(&idx))?;
        let xk1 = tape.gather_per_row(xk_full, Rc::clone(&idx1))?;
        let yk = tape.gather_per_row(yk_full, Rc::clone(&idx))?;
        let yk1 = tape.gather_per_row(yk_full, Rc::clone(&idx1))?;
        let d0 = tape.gather_per_row(dk_full, idx)?;
        let d1 = tape.gather_per_row(dk_full, idx1)?;

        let w = tape.sub(xk1, xk)?;
        let h = tape.sub(yk1, yk)?;
        let s = tape.div(h, w)?;
        let dx = tape.sub(xc, xk)?;
        let xi = tape.div(dx, w)?;
        let xi1 = tape.scale_shift(xi, -1.0, 1.0);
        let q = tape.mul(xi, xi1)?;
        let dsum = tape.add(d1, d0)?;
        let s2 = tape.scale_shift(s, 2.0, 0.0);
        let tcoef = tape.sub(dsum, s2)?;
        let tq = tape.mul(tcoef, q)?;
        let den = tape.add(s, tq)?;

        let xi_sq = tape.mul(xi, xi)?;
        let s_xi2 = tape.mul(s, xi_sq)?;
        let d0q = tape.mul(d0, q)?;
        let ynum_in = tape.add(s_xi2, d0q)?;
        let hnum = tape.mul(h, ynum_in)?;
        let yfrac = tape.div(hnum, den)?;
        let y_in = tape.add(yk, yfrac)?;

        let xi1_sq = tape.mul(xi1, xi1)?;
        let d1xi2 = tape.mul(d1, xi_sq)?;
        let sq2 = tape.mul(s2, q)?;
        let d0xi1 = tape.mul(d0, xi1_sq)?;
        let nsum = tape.add(d1xi2, sq2)?;
        let nsum = tape.add(nsum, d0xi1)?;
        let ssq = tape.mul(s, s)?;
        let numd = tape.mul(ssq, nsum)?;
        let log_numd = tape.log(numd);
        let log_den = tape.log(den);
        let log_den2 = tape.scale_shift(log_den, 2.0, 0.0);
        let logd_in = tape.sub(log_numd, log_den2)?;

        let m = tape.constant(Tensor::new(vec![r_total], mask.clone()));
        let m_inv = tape.constant(Tensor::new(
            vec![r_total],
            mask.iter().map(|v| 1.0 - v).collect(),
        ));
        let y_masked = tape.mul(y_in, m)?;
        let x_tail = tape.mul(xf, m_inv)?;
        let y = tape.add(y_masked, x_tail)?;
        let ld = tape.mul(logd_in, m)?;

        let y_t = tape.reshape(y, vec![n, t_len])?;
        let ld_rows = tape.reshape(ld, vec![n, t_len])?;
        let ld_vec = tape.row_sum(ld_rows);
        Ok((y_t, ld_vec))
    }

    fn affine_tape(
        &self,
        tape: &mut Tape,
        x_t: Var,
        raw_scale: Var,
        raw_shift: Var,
        t_len: usize,
    ) -> Result<(Var, Var)> {
        let n = tape.value(x_t).rows();
        // keep exp(raw) in a sane range during training
        let log_alpha = tape.clamp(raw_scale, -7.0, 7.0);
        let alpha = tape.exp(log_alpha);
        let scaled = tape.mul(x_t, alpha)?;
        let y = tape.add(scaled, raw_shift)?;
        let ld_rows = tape.reshape(log_alpha, vec![n, t_len])?;
        let ld = tape.row_sum(ld_rows);
        Ok((y, ld))
    }

    // ── public operations ────────────────────────────────────────────

    fn check_dims(&self, x: &Tensor, cond: &Tensor) -> Result<()> {
        if x.cols() != self.cfg.input_dim {
            return Err(Error::DimMismatch {
                context: "flow input".into(),
                expected: self.cfg.input_dim,
                actual: x.cols(),
            });
        }
        if cond.cols() != self.cfg.cond_dim {
            return Err(Error::DimMismatch {
                context: "flow condition".into(),
                expected: self.cfg.cond_dim,
                actual: cond.cols(),
            });
        }
        if !x.is_finite() || !cond.is_finite() {
            return Err(Error::NonFinite("flow input".into()));
        }
        Ok(())
    }

    /// u = T(x | cond) with the per-row layer logdet.
    pub fn forward_batch(&self, x: &Tensor, cond: &Tensor) -> Result<(Tensor, Vec<f32>)> {
        self.check_dims(x, cond)?;
        let mut tape = Tape::with_capacity(64 * self.cfg.layers);
        let pv = self.param_leaves(&mut tape, false);
        let xv = tape.leaf(x.clone(), false);
        let cv = tape.leaf(cond.clone(), false);
        let (u, ld) = self.forward_tape(&mut tape, xv, cv, &pv)?;
        Ok((tape.value(u).clone(), tape.value(ld).data().to_vec()))
    }

    /// Exact conditional log-density (normalized action space).
    pub fn log_prob_batch(&self, x: &Tensor, cond: &Tensor) -> Result<Vec<f32>> {
        let (u, ld) = self.forward_batch(x, cond)?;
        let d = self.cfg.input_dim;
        Ok(u.data()
            .chunks(d)
            .zip(&ld)
            .map(|(row, l)| gaussian_logpdf(row) + l)
            .collect())
    }

    pub fn log_prob(&self, x_row: &[f32], cond_row: &[f32]) -> Result<f32> {
        let x = Tensor::from_rows(1, x_row.len(), x_row.to_vec());
        let c = Tensor::from_rows(1, cond_row.len(), cond_row.to_vec());
        Ok(self.log_prob_batch(&x, &c)?[0])
    }

    /// d log p(x|cond) / dx, along with log p itself.
    pub fn grad_logprob_x(&self, x_row: &[f32], cond_row: &[f32]) -> Result<(Vec<f32>, f32)> {
        let x = Tensor::from_rows(1, x_row.len(), x_row.to_vec());
        let c = Tensor::from_rows(1, cond_row.len(), cond_row.to_vec());
        self.check_dims(&x, &c)?;
        let mut tape = Tape::with_capacity(64 * self.cfg.layers);
        let pv = self.param_leaves(&mut tape, false);
        let xv = tape.leaf(x, true);
        let cv = tape.leaf(c, false);
        let (logp, _, _) = self.logprob_var(&mut tape, xv, cv, &pv, true)?;
        let lp = tape.value(logp).data()[0];
        tape.backward(logp)?;
        Ok((tape.grad_or_zeros(xv).into_data(), lp))
    }

    /// Builds log p as a scalar tape node: mean over rows when `single` is
    /// false, the lone row's value otherwise.
    fn logprob_var(
        &self,
        tape: &mut Tape,
        x: Var,
        cond: Var,
        pv: &[Var],
        raw_input: bool,
    ) -> Result<(Var, Var, Var)> {
        let (u, ld) = if raw_input {
            self.forward_tape(tape, x, cond, pv)?
        } else {
            self.forward_layers_tape(tape, x, cond, pv)?
        };
        let d = self.cfg.input_dim;
        let sq = tape.mul(u, u)?;
        let rs = tape.row_sum(sq);
        let quad = tape.scale_shift(rs, -0.5, -0.5 * d as f32 * LN_2PI);
        let logp_rows = tape.add(quad, ld)?;
        let logp = tape.mean_all(logp_rows);
        Ok((logp, u, ld))
    }

    /// Inverse transform of latent rows, returning raw-space samples and
    /// the forward logdet at each recovered point.
    pub fn inverse_batch(&self, u: &Tensor, cond: &Tensor) -> Result<(Tensor, Vec<f32>)> {
        if u.cols() != self.cfg.input_dim || cond.cols() != self.cfg.cond_dim {
            return Err(Error::DimMismatch {
                context: "flow inverse input".into(),
                expected: self.cfg.input_dim,
                actual: u.cols(),
            });
        }
        let n = u.rows();
        let d = self.cfg.input_dim;
        let mut z = u.clone();
        let mut logdet = vec![0.0f32; n];

        for layer in self.layers.iter().rev() {
            self.layer_inverse_value(&mut z, cond, layer, &mut logdet)?;
        }

        let mut raw = Tensor::zeros(vec![n, d]);
        for (out, row) in raw.data_mut().chunks_mut(d).zip(z.data().chunks(d)) {
            self.norm.denormalize_row(row, out);
        }
        Ok((raw, logdet))
    }

    fn layer_inverse_value(
        &self,
        z: &mut Tensor,
        cond: &Tensor,
        layer: &CouplingLayer,
        logdet: &mut [f32],
    ) -> Result<()> {
        let n = z.rows();
        let d = self.cfg.input_dim;
        let t_idx = &layer.transformed;
        let p_idx = &layer.passthrough;
        let t_len = t_idx.len();
        if t_len == 0 {
            return Ok(());
        }
        let c_dim = self.cfg.cond_dim;
        let in_dim = p_idx.len() + c_dim;

        let mut inp = Tensor::zeros(vec![n, in_dim]);
        for i in 0..n {
            let zrow = z.row(i);
            let crow = cond.row(i);
            let orow = &mut inp.data_mut()[i * in_dim..(i + 1) * in_dim];
            for (pos, &j) in p_idx.iter().enumerate() {
                orow[pos] = zrow[j];
            }
            orow[p_idx.len()..].copy_from_slice(crow);
        }

        let p = &layer.params;
        let h1 = dense_value(&inp, &self.params[p.w1], &self.params[p.b1], true);
        let h2 = dense_value(&h1, &self.params[p.w2], &self.params[p.b2], true);
        let heads: Vec<Tensor> = p
            .heads
            .iter()
            .map(|&(w, b)| dense_value(&h2, &self.params[w], &self.params[b], false))
            .collect();

        match self.cfg.transform {
            TransformKind::RqSpline => {
                let k = self.cfg.bins;
                let b = self.cfg.bound;
                let t_idx: &[usize] = t_idx.as_slice();
                let invert_row = |i: usize, zrow: &mut [f32], ld: &mut f32| {
                    let mut knots = SplineKnots::default();
                    let rw = heads[0].row(i);
                    let rh = heads[1].row(i);
                    let rd = heads[2].row(i);
                    for (dpos, &j) in t_idx.iter().enumerate() {
                        normalize_into(
                            &rw[dpos * k..(dpos + 1) * k],
                            &rh[dpos * k..(dpos + 1) * k],
                            &rd[dpos * (k - 1)..(dpos + 1) * (k - 1)],
                            k,
                            b,
                            &mut knots,
                        );
                        let (x, l) = spline::rq_inverse(zrow[j], &knots);
                        zrow[j] = x;
                        *ld += l;
                    }
                };
                if n >= 32 && rayon::current_num_threads() > 1 {
                    use rayon::prelude::*;
                    z.data_mut()
                        .par_chunks_mut(d)
                        .zip(logdet.par_iter_mut())
                        .enumerate()
                        .for_each(|(i, (zrow, ld))| invert_row(i, zrow, ld));
                } else {
                    for (i, (zrow, ld)) in z
                        .data_mut()
                        .chunks_mut(d)
                        .zip(logdet.iter_mut())
                        .enumerate()
                    {
                        invert_row(i, zrow, ld);
                    }
                }
            }
            TransformKind::Affine => {
                for i in 0..n {
                    let zrow = &mut z.data_mut()[i * d..(i + 1) * d];
                    let rs = heads[0].row(i);
                    let rb = heads[1].row(i);
                    for (dpos, &j) in t_idx.iter().enumerate() {
                        let la = rs[dpos].clamp(-7.0, 7.0);
                        let alpha = la.exp();
                        zrow[j] = (zrow[j] - rb[dpos]) / alpha;
                        logdet[i] += la;
                    }
                }
            }
        }
        Ok(())
    }

    /// Draw `n` action windows from the sigma-scaled base distribution and
    /// map them through the inverse. Each sample's exact log p comes out of
    /// the same pass. sigma = 1 samples the model distribution; sigma = 0
    /// always returns T^-1(0 | cond).
    pub fn sample_with_logprob(
        &self,
        n: usize,
        sigma: f32,
        cond_row: &[f32],
        rng: &mut ChaCha8Rng,
    ) -> Result<(Tensor, Vec<f32>)> {
        assert!(sigma >= 0.0, "sigma must be non-negative");
        let d = self.cfg.input_dim;
        if sigma == 0.0 {
            // degenerate base: every sample is T^-1(0 | cond), computed once
            // so the outputs are bit-identical by construction
            let u = Tensor::zeros(vec![1, d]);
            let cond = Tensor::from_rows(1, cond_row.len(), cond_row.to_vec());
            let (x1, ld1) = self.inverse_batch(&u, &cond)?;
            let lp = gaussian_logpdf(&vec![0.0; d]) + ld1[0];
            let mut data = Vec::with_capacity(n * d);
            for _ in 0..n {
                data.extend_from_slice(x1.row(0));
            }
            return Ok((Tensor::from_rows(n, d, data), vec![lp; n]));
        }
        let mut u = Tensor::zeros(vec![n, d]);
        rng::fill_standard_normal(rng, u.data_mut());
        for v in u.data_mut() {
            *v *= sigma;
        }
        let cond = tile_rows(cond_row, n);
        let (x, logdet) = self.inverse_batch(&u, &cond)?;
        let logp = u
            .data()
            .chunks(d)
            .zip(&logdet)
            .map(|(row, l)| gaussian_logpdf(row) + l)
            .collect();
        Ok((x, logp))
    }

    pub fn sample(
        &self,
        n: usize,
        sigma: f32,
        cond_row: &[f32],
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        Ok(self.sample_with_logprob(n, sigma, cond_row, rng)?.0)
    }

    /// Adam ascent on log p(x|cond) over the action window, in normalized
    /// coordinates. Returns the final raw window and its log p.
    pub fn ascend_window(
        &self,
        x_raw: &[f32],
        cond_row: &[f32],
        steps: usize,
        lr: f32,
    ) -> Result<(Vec<f32>, f32)> {
        let d = self.cfg.input_dim;
        let mut z = vec![0.0f32; d];
        self.norm.normalize_row(x_raw, &mut z);
        let mut zs = vec![Rc::new(Tensor::from_rows(1, d, z))];
        let mut adam = AdamState::for_params(&zs, lr);
        let cond = Tensor::from_rows(1, cond_row.len(), cond_row.to_vec());

        let mut last_logp = f32::NAN;
        for step in 0..=steps {
            let mut tape = Tape::with_capacity(64 * self.cfg.layers);
            let pv = self.param_leaves(&mut tape, false);
            let zv = tape.leaf_rc(Rc::clone(&zs[0]), true);
            let cv = tape.leaf(cond.clone(), false);
            let (logp, _, _) = self.logprob_var(&mut tape, zv, cv, &pv, false)?;
            last_logp = tape.value(logp).data()[0];
            if step == steps {
                break;
            }
            tape.backward(logp)?;
            let mut g = tape.grad_or_zeros(zv);
            // ascent: negate for the minimizing optimizer
            for v in g.data_mut() {
                *v = -*v;
            }
            drop(tape);
            adam.step(&mut zs, &[g])?;
        }

        let mut out = vec![0.0f32; d];
        self.norm.denormalize_row(zs[0].data(), &mut out);
        Ok((out, last_logp))
    }

    /// Maximum-likelihood training on raw windows. Returns per-epoch mean
    /// NLL (normalized space, nats).
    pub fn train(
        &mut self,
        x: &Tensor,
        cond: &Tensor,
        sched: &TrainSchedule,
    ) -> Result<Vec<f32>> {
        let n = x.rows();
        if n == 0 {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        self.check_dims(x, cond)?;
        self.norm = compute_normalization(x, self.cfg.norm_group);

        let mut adam = AdamState::for_params(&self.params, sched.lr);
        let d = self.cfg.input_dim;
        let c_dim = self.cfg.cond_dim;
        let mut curve = Vec::new();
        let mut epoch_no = 0usize;

        for &(epochs, batch) in &sched.stages {
            for _ in 0..epochs {
                let mut order: Vec<usize> = (0..n).collect();
                shuffle(&mut order, &mut rng::derive(sched.seed, epoch_no as u64));
                let mut epoch_nll = 0.0f64;
                let mut seen = 0usize;

                for (bi, chunk) in order.chunks(batch).enumerate() {
                    let xb = gather_rows(x, chunk, d);
                    let cb = gather_rows(cond, chunk, c_dim);
                    let mut tape = Tape::with_capacity(64 * self.cfg.layers);
                    let pv = self.param_leaves(&mut tape, true);
                    let xv = tape.leaf(xb, false);
                    let cv = tape.leaf(cb, false);
                    let (logp, _, _) = self.logprob_var(&mut tape, xv, cv, &pv, true)?;
                    let nll = tape.scale_shift(logp, -1.0, 0.0);
                    let loss = tape.value(nll).data()[0];
                    if !loss.is_finite() {
                        return Err(Error::TrainDiverged {
                            epoch: epoch_no,
                            batch: bi,
                            lr: sched.lr,
                        });
                    }
                    tape.backward(nll)?;
                    let mut grads: Vec<Tensor> =
                        pv.iter().map(|&v| tape.grad_or_zeros(v)).collect();
                    drop(tape);
                    if sched.grad_clip > 0.0 {
                        clip_grad_norm(&mut grads, sched.grad_clip);
                    }
                    adam.step(&mut self.params, &grads)?;
                    epoch_nll += loss as f64 * chunk.len() as f64;
                    seen += chunk.len();
                }
                curve.push((epoch_nll / seen as f64) as f32);
                epoch_no += 1;
            }
        }
        Ok(curve)
    }

    /// Mean NLL of a held-out set, normalized space.
    pub fn mean_nll(&self, x: &Tensor, cond: &Tensor) -> Result<f32> {
        let lp = self.log_prob_batch(x, cond)?;
        Ok(-(lp.iter().map(|&v| v as f64).sum::<f64>() / lp.len() as f64) as f32)
    }
}

// ── helpers ──────────────────────────────────────────────────────────

pub(crate) fn gaussian_logpdf(row: &[f32]) -> f32 {
    let q: f32 = row.iter().map(|v| v * v).sum();
    -0.5 * q - 0.5 * row.len() as f32 * LN_2PI
}

fn spline_bin(knots: &[f32], v: f32) -> usize {
    let bins = knots.len() - 1;
    let j = knots.partition_point(|&k| k <= v);
    j.saturating_sub(1).min(bins - 1)
}

/// One dense layer on values only (no tape), with a fast single-row path.
fn dense_value(x: &Tensor, w: &Tensor, b: &Tensor, relu: bool) -> Tensor {
    let (n, k) = (x.rows(), x.cols());
    let out_dim = w.shape()[1];
    let mut out = Tensor::zeros(vec![n, out_dim]);
    if n == 1 {
        let ov = out.data_mut();
        ov.copy_from_slice(b.data());
        for (i, &xv) in x.data().iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w.data()[i * out_dim..(i + 1) * out_dim];
            for (o, &wv) in ov.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    } else {
        tensor::gemm(
            x.data(),
            n,
            k,
            false,
            w.data(),
            k,
            out_dim,
            false,
            out.data_mut(),
        );
        tensor::add_bias_into(out.data_mut(), b.data());
    }
    if relu {
        tensor::relu_into(out.data_mut());
    }
    out
}

pub(crate) fn tile_rows(row: &[f32], n: usize) -> Tensor {
    let mut data = Vec::with_capacity(row.len() * n);
    for _ in 0..n {
        data.extend_from_slice(row);
    }
    Tensor::from_rows(n, row.len(), data)
}

pub(crate) fn gather_rows(t: &Tensor, idx: &[usize], cols: usize) -> Tensor {
    let mut data = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
    }
    Tensor::from_rows(idx.len(), cols, data)
}

pub(crate) fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
}

pub fn compute_normalization(x: &Tensor, group: usize) -> Normalization {
    let d = x.cols();
    let n = x.rows();
    assert!(d % group == 0 && group >= 1);
    let mut mean_g = vec![0.0f64; group];
    let mut count = vec![0u64; group];
    for row in x.data().chunks(d) {
        for (j, &v) in row.iter().enumerate() {
            mean_g[j % group] += v as f64;
            count[j % group] += 1;
        }
    }
    for (m, &c) in mean_g.iter_mut().zip(&count) {
        *m /= c.max(1) as f64;
    }
    let mut var_g = vec![0.0f64; group];
    for row in x.data().chunks(d) {
        for (j, &v) in row.iter().enumerate() {
            let e = v as f64 - mean_g[j % group];
            var_g[j % group] += e * e;
        }
    }
    let mut mean = vec![0.0f32; d];
    let mut std = vec![0.0f32; d];
    for j in 0..d {
        mean[j] = mean_g[j % group] as f32;
        let v = var_g[j % group] / count[j % group].max(1) as f64;
        std[j] = (v.sqrt() as f32).max(1e-6);
    }
    let _ = n;
    Normalization { mean, std }
}
