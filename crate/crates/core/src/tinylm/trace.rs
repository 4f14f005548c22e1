//! Row-at-a-time forward pass with stored activations, and its exact reverse pass.
//!
//! A [`Trace`] is both the KV cache used for incremental decoding and the tape
//! consumed by [`Trace::backward`]. Every row is computed by the same code
//! whether it is appended one at a time or as part of a longer input, so a
//! prefix of a trace is bit-identical to the trace of that prefix.

use super::model::ModelParams;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

#[derive(Debug, Clone, Default)]
struct LayerTrace {
    x_in: Vec<f64>,
    ln1: Vec<f64>,
    ln1_mean: Vec<f64>,
    ln1_rstd: Vec<f64>,
    qkv: Vec<f64>,
    // Row t holds n_heads blocks of t + 1 attention weights.
    att: Vec<f64>,
    att_out: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: Vec<f64>,
    ln2_mean: Vec<f64>,
    ln2_rstd: Vec<f64>,
    fc: Vec<f64>,
    act: Vec<f64>,
    // tanh term of the GELU at each fc element, reused by the reverse pass.
    gelu_tanh: Vec<f64>,
}

impl LayerTrace {
    fn prefix(&self, rows: usize, d: usize, d_ff: usize, n_heads: usize) -> LayerTrace {
        LayerTrace {
            x_in: self.x_in[..rows * d].to_vec(),
            ln1: self.ln1[..rows * d].to_vec(),
            ln1_mean: self.ln1_mean[..rows].to_vec(),
            ln1_rstd: self.ln1_rstd[..rows].to_vec(),
            qkv: self.qkv[..rows * 3 * d].to_vec(),
            att: self.att[..n_heads * rows * (rows + 1) / 2].to_vec(),
            att_out: self.att_out[..rows * d].to_vec(),
            x_mid: self.x_mid[..rows * d].to_vec(),
            ln2: self.ln2[..rows * d].to_vec(),
            ln2_mean: self.ln2_mean[..rows].to_vec(),
            ln2_rstd: self.ln2_rstd[..rows].to_vec(),
            fc: self.fc[..rows * d_ff].to_vec(),
            act: self.act[..rows * d_ff].to_vec(),
            gelu_tanh: self.gelu_tanh[..rows * d_ff].to_vec(),
        }
    }

    fn truncate(&mut self, rows: usize, d: usize, d_ff: usize, n_heads: usize) {
        self.x_in.truncate(rows * d);
        self.ln1.truncate(rows * d);
        self.ln1_mean.truncate(rows);
        self.ln1_rstd.truncate(rows);
        self.qkv.truncate(rows * 3 * d);
        self.att.truncate(n_heads * rows * (rows + 1) / 2);
        self.att_out.truncate(rows * d);
        self.x_mid.truncate(rows * d);
        self.ln2.truncate(rows * d);
        self.ln2_mean.truncate(rows);
        self.ln2_rstd.truncate(rows);
        self.fc.truncate(rows * d_ff);
        self.act.truncate(rows * d_ff);
        self.gelu_tanh.truncate(rows * d_ff);
    }
}

/// Gradients flowing into a trace from a scalar loss.
#[derive(Debug, Clone, Default)]
pub struct Upstream {
    /// `(row, dloss/dlogits)` pairs; each vector has vocab length.
    pub logits: Vec<(usize, Vec<f64>)>,
    /// `(row, dloss/dhidden)` pairs on the final (post layer-norm) hidden state.
    pub hidden: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct Trace {
    d: usize,
    d_ff: usize,
    n_heads: usize,
    len: usize,
    input: Vec<f64>,
    layers: Vec<LayerTrace>,
    resid: Vec<f64>,
    lnf: Vec<f64>,
    lnf_mean: Vec<f64>,
    lnf_rstd: Vec<f64>,
}

impl Trace {
    pub fn new(params: &ModelParams) -> Self {
        let cfg = params.config();
        Trace {
            d: cfg.d_model,
            d_ff: cfg.d_ff,
            n_heads: cfg.n_heads,
            len: 0,
            input: Vec::new(),
            layers: vec![LayerTrace::default(); cfg.n_layers],
            resid: Vec::new(),
            lnf: Vec::new(),
            lnf_mean: Vec::new(),
            lnf_rstd: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Input embedding of `row` (before the position embedding is added).
    pub fn input(&self, row: usize) -> &[f64] {
        &self.input[row * self.d..(row + 1) * self.d]
    }

    /// Final hidden state (after the output layer norm) at `row`.
    pub fn hidden(&self, row: usize) -> &[f64] {
        &self.lnf[row * self.d..(row + 1) * self.d]
    }

    /// Residual stream leaving layer `layer` at every row, `[len × d]`.
    pub fn layer_output(&self, layer: usize) -> &[f64] {
        match self.layers.get(layer + 1) {
            Some(next) => &next.x_in,
            None => &self.resid,
        }
    }

    /// Copy of the first `rows` rows (all of them if `rows` exceeds the length).
    pub fn truncated(&self, rows: usize) -> Trace {
        let rows = rows.min(self.len);
        let d = self.d;
        Trace {
            d,
            d_ff: self.d_ff,
            n_heads: self.n_heads,
            len: rows,
            input: self.input[..rows * d].to_vec(),
            layers: self
                .layers
                .iter()
                .map(|l| l.prefix(rows, d, self.d_ff, self.n_heads))
                .collect(),
            resid: self.resid[..rows * d].to_vec(),
            lnf: self.lnf[..rows * d].to_vec(),
            lnf_mean: self.lnf_mean[..rows].to_vec(),
            lnf_rstd: self.lnf_rstd[..rows].to_vec(),
        }
    }

    pub fn truncate(&mut self, rows: usize) {
        if rows >= self.len {
            return;
        }
        let d = self.d;
        self.input.truncate(rows * d);
        for l in &mut self.layers {
            l.truncate(rows, d, self.d_ff, self.n_heads);
        }
        self.resid.truncate(rows * d);
        self.lnf.truncate(rows * d);
        self.lnf_mean.truncate(rows);
        self.lnf_rstd.truncate(rows);
        self.len = rows;
    }

    /// Next-token logits at `row`.
    pub fn logits(&self, params: &ModelParams, row: usize) -> Vec<f64> {
        let h = self.hidden(row);
        let d = self.d;
        params
            .output_table()
            .chunks_exact(d)
            .map(|w| dot(h, w))
            .collect()
    }

    /// Next-token logits for each row in `rows`, equal to [`Trace::logits`] per row.
    pub fn logits_rows(&self, params: &ModelParams, rows: std::ops::Range<usize>) -> Vec<Vec<f64>> {
        let vocab = params.vocab_size();
        let mut out = vec![Vec::with_capacity(vocab); rows.len()];
        for w in params.output_table().chunks_exact(self.d) {
            for (o, r) in out.iter_mut().zip(rows.clone()) {
                o.push(dot(self.hidden(r), w));
            }
        }
        out
    }

    /// Append one position. The caller checks the context limit.
    pub fn push(&mut self, params: &ModelParams, x: &[f64]) {
        self.push_rows(params, x);
    }

    /// Append `x.len() / d` positions. Each output element is accumulated in
    /// the same order as [`Trace::push`], so the result is bit-identical to
    /// pushing the rows one at a time; batching only keeps weights in cache.
    pub fn push_rows(&mut self, params: &ModelParams, x: &[f64]) {
        let cfg = params.config();
        let (d, d_ff, nh) = (self.d, self.d_ff, self.n_heads);
        let hd = d / nh;
        let scale = 1.0 / (hd as f64).sqrt();
        let layout = params.layout();
        let w = params.as_slice();
        let p0 = self.len;
        let rows = x.len() / d;
        debug_assert_eq!(x.len(), rows * d);
        debug_assert!(p0 + rows <= cfg.max_context);
        if rows == 0 {
            return;
        }

        self.input.extend_from_slice(x);
        let pos = &w[layout.position_embedding + p0 * d..layout.position_embedding + (p0 + rows) * d];
        let mut h: Vec<f64> = x.iter().zip(pos).map(|(a, b)| a + b).collect();

        let mut ln = vec![0.0; rows * d];
        let mut qkv = vec![0.0; rows * 3 * d];
        let mut att_out = vec![0.0; rows * d];
        let mut o = vec![0.0; rows * d];
        let mut fc = vec![0.0; rows * d_ff];
        let mut act = vec![0.0; rows * d_ff];
        let mut y = vec![0.0; rows * d];
        let mut scores = vec![0.0; p0 + rows];

        for (lt, lo) in self.layers.iter_mut().zip(&layout.layers) {
            lt.x_in.extend_from_slice(&h);
            for (hr, lr) in h.chunks_exact(d).zip(ln.chunks_exact_mut(d)) {
                let (m, r) = layer_norm(hr, &w[lo.ln1_gain..], &w[lo.ln1_bias..], lr);
                lt.ln1_mean.push(m);
                lt.ln1_rstd.push(r);
            }
            lt.ln1.extend_from_slice(&ln);

            fill_rows(&mut qkv, &w[lo.qkv_bias..lo.qkv_bias + 3 * d]);
            matmul_acc(&mut qkv, &ln, &w[lo.qkv..lo.qkv + d * 3 * d], d, 3 * d);
            lt.qkv.extend_from_slice(&qkv);

            att_out.fill(0.0);
            for t in 0..rows {
                let p = p0 + t;
                let scores = &mut scores[..=p];
                for head in 0..nh {
                    let q = &qkv[t * 3 * d + head * hd..t * 3 * d + (head + 1) * hd];
                    let mut max = f64::NEG_INFINITY;
                    for (s, sc) in scores.iter_mut().enumerate() {
                        let k = &lt.qkv[s * 3 * d + d + head * hd..s * 3 * d + d + (head + 1) * hd];
                        *sc = dot(q, k) * scale;
                        if *sc > max {
                            max = *sc;
                        }
                    }
                    let mut sum = 0.0;
                    for sc in scores.iter_mut() {
                        *sc = (*sc - max).exp();
                        sum += *sc;
                    }
                    let out = &mut att_out[t * d + head * hd..t * d + (head + 1) * hd];
                    for (s, sc) in scores.iter_mut().enumerate() {
                        *sc /= sum;
                        let v = &lt.qkv[s * 3 * d + 2 * d + head * hd..s * 3 * d + 2 * d + (head + 1) * hd];
                        axpy(out, *sc, v);
                    }
                    lt.att.extend_from_slice(scores);
                }
            }
            lt.att_out.extend_from_slice(&att_out);

            fill_rows(&mut o, &w[lo.attn_out_bias..lo.attn_out_bias + d]);
            matmul_acc(&mut o, &att_out, &w[lo.attn_out..lo.attn_out + d * d], d, d);
            add_into(&mut h, &o);
            lt.x_mid.extend_from_slice(&h);

            for (hr, lr) in h.chunks_exact(d).zip(ln.chunks_exact_mut(d)) {
                let (m, r) = layer_norm(hr, &w[lo.ln2_gain..], &w[lo.ln2_bias..], lr);
                lt.ln2_mean.push(m);
                lt.ln2_rstd.push(r);
            }
            lt.ln2.extend_from_slice(&ln);

            fill_rows(&mut fc, &w[lo.fc_bias..lo.fc_bias + d_ff]);
            matmul_acc(&mut fc, &ln, &w[lo.fc..lo.fc + d * d_ff], d, d_ff);
            for (a, &f) in act.iter_mut().zip(&fc) {
                let t = gelu_tanh(f);
                *a = 0.5 * f * (1.0 + t);
                lt.gelu_tanh.push(t);
            }
            lt.fc.extend_from_slice(&fc);
            lt.act.extend_from_slice(&act);

            fill_rows(&mut y, &w[lo.proj_bias..lo.proj_bias + d]);
            matmul_acc(&mut y, &act, &w[lo.proj..lo.proj + d_ff * d], d_ff, d);
            add_into(&mut h, &y);
        }

        self.resid.extend_from_slice(&h);
        for (hr, lr) in h.chunks_exact(d).zip(ln.chunks_exact_mut(d)) {
            let (m, r) = layer_norm(hr, &w[layout.lnf_gain..], &w[layout.lnf_bias..], lr);
            self.lnf_mean.push(m);
            self.lnf_rstd.push(r);
        }
        self.lnf.extend_from_slice(&ln);
        self.len += rows;
    }

    /// Reverse pass. Returns `dloss/dinput` for every row (`[len × d]`) and, when
    /// `param_grads` is given, accumulates weight gradients into it (same layout
    /// as the parameter vector; position-embedding rows included, token rows not).
    pub fn backward(
        &self,
        params: &ModelParams,
        upstream: &Upstream,
        mut param_grads: Option<&mut [f64]>,
    ) -> Vec<f64> {
        let (d, d_ff, nh) = (self.d, self.d_ff, self.n_heads);
        let hd = d / nh;
        let scale = 1.0 / (hd as f64).sqrt();
        let layout = params.layout();
        let w = params.as_slice();
        let mut dinput = vec![0.0; self.len * d];

        let active = upstream
            .logits
            .iter()
            .map(|(r, _)| r + 1)
            .chain(upstream.hidden.iter().map(|(r, _)| r + 1))
            .max()
            .unwrap_or(0);
        if active == 0 {
            return dinput;
        }
        assert!(active <= self.len, "upstream row outside the trace");

        // Output head.
        let mut dhf = vec![0.0; active * d];
        let out_off = layout.output_head.unwrap_or(layout.token_embedding);
        let out_table = params.output_table();
        for (row, dl) in &upstream.logits {
            gemv_t_skip(&mut dhf[row * d..(row + 1) * d], dl, out_table);
        }
        if let Some(pg) = param_grads.as_deref_mut() {
            let rows: Vec<(&[f64], &[f64])> = upstream
                .logits
                .iter()
                .map(|(row, dl)| (dl.as_slice(), &self.lnf[row * d..(row + 1) * d]))
                .collect();
            head_grad_acc(&mut pg[out_off..out_off + out_table.len()], &rows, d);
        }
        for (row, g) in &upstream.hidden {
            for (a, b) in dhf[row * d..(row + 1) * d].iter_mut().zip(g) {
                *a += b;
            }
        }

        // Final layer norm.
        let mut dx = vec![0.0; active * d];
        for t in 0..active {
            layer_norm_backward(
                &self.resid[t * d..(t + 1) * d],
                self.lnf_mean[t],
                self.lnf_rstd[t],
                &w[layout.lnf_gain..layout.lnf_gain + d],
                &dhf[t * d..(t + 1) * d],
                &mut dx[t * d..(t + 1) * d],
                param_grads
                    .as_deref_mut()
                    .map(|g| split_pair(g, layout.lnf_gain, layout.lnf_bias, d)),
            );
        }

        let mut dact = vec![0.0; active * d_ff];
        let mut dln = vec![0.0; active * d];
        let mut datt = vec![0.0; active * d];
        let mut dqkv = vec![0.0; active * 3 * d];
        let mut dprob = vec![0.0; active];

        for (lt, lo) in self.layers.iter().zip(&layout.layers).rev() {
            // MLP block: dx is the gradient on this layer's output.
            let mut dmid = dx.clone();
            dact.fill(0.0);
            matmul_t_acc(&mut dact, &dx, &w[lo.proj..lo.proj + d_ff * d], d_ff, d);
            // dact becomes dloss/dfc in place.
            for ((g, &f), &t) in dact.iter_mut().zip(&lt.fc[..active * d_ff]).zip(&lt.gelu_tanh) {
                *g *= gelu_grad(f, t);
            }
            dln.fill(0.0);
            matmul_t_acc(&mut dln, &dact, &w[lo.fc..lo.fc + d * d_ff], d, d_ff);
            if let Some(pg) = param_grads.as_deref_mut() {
                for dy in dx.chunks_exact(d) {
                    add_into(&mut pg[lo.proj_bias..lo.proj_bias + d], dy);
                }
                outer_rows_acc(
                    &mut pg[lo.proj..lo.proj + d_ff * d],
                    &lt.act[..active * d_ff],
                    &dx,
                    d_ff,
                    d,
                );
                for dfc in dact.chunks_exact(d_ff) {
                    add_into(&mut pg[lo.fc_bias..lo.fc_bias + d_ff], dfc);
                }
                outer_rows_acc(&mut pg[lo.fc..lo.fc + d * d_ff], &lt.ln2[..active * d], &dact, d, d_ff);
            }
            for t in 0..active {
                layer_norm_backward(
                    &lt.x_mid[t * d..(t + 1) * d],
                    lt.ln2_mean[t],
                    lt.ln2_rstd[t],
                    &w[lo.ln2_gain..lo.ln2_gain + d],
                    &dln[t * d..(t + 1) * d],
                    &mut dmid[t * d..(t + 1) * d],
                    param_grads
                        .as_deref_mut()
                        .map(|g| split_pair(g, lo.ln2_gain, lo.ln2_bias, d)),
                );
            }

            // Attention output projection.
            datt.fill(0.0);
            matmul_t_acc(&mut datt, &dmid, &w[lo.attn_out..lo.attn_out + d * d], d, d);
            if let Some(pg) = param_grads.as_deref_mut() {
                for dout in dmid.chunks_exact(d) {
                    add_into(&mut pg[lo.attn_out_bias..lo.attn_out_bias + d], dout);
                }
                outer_rows_acc(
                    &mut pg[lo.attn_out..lo.attn_out + d * d],
                    &lt.att_out[..active * d],
                    &dmid,
                    d,
                    d,
                );
            }

            // Causal softmax attention.
            dqkv.fill(0.0);
            for t in 0..active {
                let row_off = nh * t * (t + 1) / 2;
                for head in 0..nh {
                    let probs = &lt.att[row_off + head * (t + 1)..row_off + (head + 1) * (t + 1)];
                    let dout = &datt[t * d + head * hd..t * d + (head + 1) * hd];
                    let mut weighted = 0.0;
                    for s in 0..=t {
                        let vo = s * 3 * d + 2 * d + head * hd;
                        dprob[s] = dot(dout, &lt.qkv[vo..vo + hd]);
                        weighted += probs[s] * dprob[s];
                        axpy(&mut dqkv[vo..vo + hd], probs[s], dout);
                    }
                    let qo = t * 3 * d + head * hd;
                    for s in 0..=t {
                        let ds = probs[s] * (dprob[s] - weighted) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let ko = s * 3 * d + d + head * hd;
                        axpy(&mut dqkv[qo..qo + hd], ds, &lt.qkv[ko..ko + hd]);
                        axpy(&mut dqkv[ko..ko + hd], ds, &lt.qkv[qo..qo + hd]);
                    }
                }
            }

            // QKV projection and first layer norm.
            dx.copy_from_slice(&dmid);
            dln.fill(0.0);
            matmul_t_acc(&mut dln, &dqkv, &w[lo.qkv..lo.qkv + d * 3 * d], d, 3 * d);
            if let Some(pg) = param_grads.as_deref_mut() {
                for dq in dqkv.chunks_exact(3 * d) {
                    add_into(&mut pg[lo.qkv_bias..lo.qkv_bias + 3 * d], dq);
                }
                outer_rows_acc(&mut pg[lo.qkv..lo.qkv + d * 3 * d], &lt.ln1[..active * d], &dqkv, d, 3 * d);
            }
            for t in 0..active {
                layer_norm_backward(
                    &lt.x_in[t * d..(t + 1) * d],
                    lt.ln1_mean[t],
                    lt.ln1_rstd[t],
                    &w[lo.ln1_gain..lo.ln1_gain + d],
                    &dln[t * d..(t + 1) * d],
                    &mut dx[t * d..(t + 1) * d],
                    param_grads
                        .as_deref_mut()
                        .map(|g| split_pair(g, lo.ln1_gain, lo.ln1_bias, d)),
                );
            }
        }

        dinput[..active * d].copy_from_slice(&dx);
        if let Some(pg) = param_grads {
            let off = layout.position_embedding;
            add_into(&mut pg[off..off + active * d], &dx);
        }
        dinput
    }
}

/// Borrow the gain and bias gradient blocks of a layer norm at once.
fn split_pair(g: &mut [f64], gain: usize, bias: usize, d: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(bias, gain + d);
    let (a, b) = g[gain..bias + d].split_at_mut(d);
    (a, b)
}

fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> (f64, f64) {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let rstd = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..d {
        out[i] = (x[i] - mean) * rstd * gain[i] + bias[i];
    }
    (mean, rstd)
}

/// Accumulates `dloss/dx` into `dx`; gain/bias gradients into `pg` when present.
fn layer_norm_backward(
    x: &[f64],
    mean: f64,
    rstd: f64,
    gain: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    pg: Option<(&mut [f64], &mut [f64])>,
) {
    let d = x.len();
    let n = d as f64;
    let mut mean_dxhat = 0.0;
    let mut mean_dxhat_xhat = 0.0;
    for i in 0..d {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gain[i];
        mean_dxhat += dxhat;
        mean_dxhat_xhat += dxhat * xhat;
    }
    mean_dxhat /= n;
    mean_dxhat_xhat /= n;
    for i in 0..d {
        let xhat = (x[i] - mean) * rstd;
        let dxhat = dy[i] * gain[i];
        dx[i] += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
    }
    if let Some((dg, db)) = pg {
        for i in 0..d {
            let xhat = (x[i] - mean) * rstd;
            dg[i] += dy[i] * xhat;
            db[i] += dy[i];
        }
    }
}

fn gelu_tanh(x: f64) -> f64 {
    (GELU_C * (x + 0.044715 * x * x * x)).tanh()
}

/// Derivative of `0.5 x (1 + t)` with `t = gelu_tanh(x)`.
fn gelu_grad(x: f64, t: f64) -> f64 {
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Four independent partial sums so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn add_into(y: &mut [f64], x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

fn fill_rows(out: &mut [f64], row: &[f64]) {
    for r in out.chunks_exact_mut(row.len()) {
        r.copy_from_slice(row);
    }
}

/// Output columns kept in registers per pass of the blocked kernels.
const BLOCK: usize = 8;

/// `out[t, o] += Σ_i x[t, i] · w[i, o]` for `w` stored `[n_in × n_out]`,
/// accumulating over `i` in increasing order for every element.
fn matmul_acc(out: &mut [f64], x: &[f64], w: &[f64], n_in: usize, n_out: usize) {
    for (or, xr) in out.chunks_exact_mut(n_out).zip(x.chunks_exact(n_in)) {
        let mut o = 0;
        while o + BLOCK <= n_out {
            let mut acc = [0.0; BLOCK];
            acc.copy_from_slice(&or[o..o + BLOCK]);
            for (wi, &xi) in w.chunks_exact(n_out).zip(xr) {
                let wb: &[f64; BLOCK] = wi[o..o + BLOCK].try_into().expect("block width");
                for k in 0..BLOCK {
                    acc[k] += xi * wb[k];
                }
            }
            or[o..o + BLOCK].copy_from_slice(&acc);
            o += BLOCK;
        }
        for (c, oc) in or.iter_mut().enumerate().skip(o) {
            for (wi, &xi) in w.chunks_exact(n_out).zip(xr) {
                *oc += xi * wi[c];
            }
        }
    }
}

/// `out[t, i] += Σ_o w[i, o] · dy[t, o]`.
fn matmul_t_acc(out: &mut [f64], dy: &[f64], w: &[f64], n_in: usize, n_out: usize) {
    for (i, wi) in w.chunks_exact(n_out).take(n_in).enumerate() {
        for (or, dr) in out.chunks_exact_mut(n_in).zip(dy.chunks_exact(n_out)) {
            or[i] += dot(wi, dr);
        }
    }
}

/// `out[o] += Σ_v g[v] · w[v, o]` over `v` in increasing order, skipping zero `g[v]`.
fn gemv_t_skip(out: &mut [f64], g: &[f64], w: &[f64]) {
    let n_out = out.len();
    let mut o = 0;
    while o + BLOCK <= n_out {
        let mut acc = [0.0; BLOCK];
        acc.copy_from_slice(&out[o..o + BLOCK]);
        for (wv, &gv) in w.chunks_exact(n_out).zip(g) {
            if gv != 0.0 {
                let wb: &[f64; BLOCK] = wv[o..o + BLOCK].try_into().expect("block width");
                for k in 0..BLOCK {
                    acc[k] += gv * wb[k];
                }
            }
        }
        out[o..o + BLOCK].copy_from_slice(&acc);
        o += BLOCK;
    }
    for (c, oc) in out.iter_mut().enumerate().skip(o) {
        for (wv, &gv) in w.chunks_exact(n_out).zip(g) {
            if gv != 0.0 {
                *oc += gv * wv[c];
            }
        }
    }
}

/// `dw[v, k] += Σ_r g_r[v] · h_r[k]` over rows `r` in order, skipping zero `g_r[v]`.
fn head_grad_acc(dw: &mut [f64], rows: &[(&[f64], &[f64])], d: usize) {
    for (v, dwv) in dw.chunks_exact_mut(d).enumerate() {
        let mut o = 0;
        while o + BLOCK <= d {
            let mut acc = [0.0; BLOCK];
            acc.copy_from_slice(&dwv[o..o + BLOCK]);
            for (g, h) in rows {
                let gv = g[v];
                if gv != 0.0 {
                    let hb: &[f64; BLOCK] = h[o..o + BLOCK].try_into().expect("block width");
                    for k in 0..BLOCK {
                        acc[k] += gv * hb[k];
                    }
                }
            }
            dwv[o..o + BLOCK].copy_from_slice(&acc);
            o += BLOCK;
        }
        for (c, dc) in dwv.iter_mut().enumerate().skip(o) {
            for (g, h) in rows {
                if g[v] != 0.0 {
                    *dc += g[v] * h[c];
                }
            }
        }
    }
}

/// `dw[i, o] += Σ_t x[t, i] · dy[t, o]`, accumulating over `t` in increasing
/// order and skipping zero `x[t, i]`.
fn outer_rows_acc(dw: &mut [f64], x: &[f64], dy: &[f64], n_in: usize, n_out: usize) {
    for (i, dwi) in dw.chunks_exact_mut(n_out).take(n_in).enumerate() {
        let mut o = 0;
        while o + BLOCK <= n_out {
            let mut acc = [0.0; BLOCK];
            acc.copy_from_slice(&dwi[o..o + BLOCK]);
            for (xr, dr) in x.chunks_exact(n_in).zip(dy.chunks_exact(n_out)) {
                let xi = xr[i];
                if xi != 0.0 {
                    let db: &[f64; BLOCK] = dr[o..o + BLOCK].try_into().expect("block width");
                    for k in 0..BLOCK {
                        acc[k] += xi * db[k];
                    }
                }
            }
            dwi[o..o + BLOCK].copy_from_slice(&acc);
            o += BLOCK;
        }
        for (c, dc) in dwi.iter_mut().enumerate().skip(o) {
            for (xr, dr) in x.chunks_exact(n_in).zip(dy.chunks_exact(n_out)) {
                let xi = xr[i];
                if xi != 0.0 {
                    *dc += xi * dr[c];
                }
            }
        }
    }
}

