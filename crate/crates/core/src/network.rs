//! The shared coarse/fine MLP.
//!
//! A rectifier trunk (default 8 layers, 128 wide, 64-wide linear feature
//! output) re-injects the spatial encoding into the input of the layer after
//! `skip_at`. A softplus scalar head on the feature emits the volume density
//! σ; the feature concatenated with the directional encoding feeds a
//! two-layer head emitting the real and imaginary signal components.
//!
//! Gradients are computed by hand. All tensors are row-major `f64`; weights
//! are stored `[in][out]` so that a batch forward is `Y = X·W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::par::{self, Execution};
use crate::seed;
use crate::{Error, Result};

/// Rows per forward/backward work unit. Fixed so that gradient sums do not
/// depend on the thread count.
pub const CHUNK_ROWS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_width: usize,
    pub dir_width: usize,
    pub trunk_layers: usize,
    pub trunk_width: usize,
    pub feature_width: usize,
    pub head_width: usize,
    /// The spatial input is concatenated with the output of trunk layer
    /// `skip_at` (1-based) and fed to the next layer.
    pub skip_at: usize,
}

impl Architecture {
    pub fn new(input_width: usize, dir_width: usize) -> Self {
        Architecture {
            input_width,
            dir_width,
            trunk_layers: 8,
            trunk_width: 128,
            feature_width: 64,
            head_width: 128,
            skip_at: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk_layers < 2 || self.input_width == 0 || self.trunk_width == 0 {
            return Err(Error::Config("trunk needs >= 2 layers and non-zero widths".into()));
        }
        if self.skip_at >= self.trunk_layers {
            return Err(Error::Config(format!(
                "skip_at ({}) must be < trunk_layers ({})",
                self.skip_at, self.trunk_layers
            )));
        }
        if self.feature_width == 0 || self.head_width == 0 {
            return Err(Error::Config("feature and head widths must be non-zero".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Relu,
    Linear,
}

/// One dense layer's slice of the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Dense {
    fan_in: usize,
    fan_out: usize,
    w: usize,
    b: usize,
    act: Act,
}

impl Dense {
    fn len(&self) -> usize {
        self.fan_in * self.fan_out + self.fan_out
    }
}

/// Layer layout plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: Architecture,
    trunk: Vec<Dense>,
    sigma_head: Dense,
    head: [Dense; 2],
    params: Vec<f64>,
}

/// Per-row network outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetworkOutput {
    /// Volume density (1/m), softplus-activated.
    pub sigma: Vec<f64>,
    pub x_re: Vec<f64>,
    pub x_im: Vec<f64>,
}

impl NetworkOutput {
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    fn with_capacity(n: usize) -> Self {
        NetworkOutput {
            sigma: Vec::with_capacity(n),
            x_re: Vec::with_capacity(n),
            x_im: Vec::with_capacity(n),
        }
    }

    fn extend(&mut self, other: &NetworkOutput) {
        self.sigma.extend_from_slice(&other.sigma);
        self.x_re.extend_from_slice(&other.x_re);
        self.x_im.extend_from_slice(&other.x_im);
    }
}

/// Row-major batch of encoded inputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub spatial: Vec<f64>,
    pub directional: Vec<f64>,
    pub rows: usize,
}

impl Batch {
    pub fn new(spatial_width: usize, dir_width: usize, rows: usize) -> Self {
        Batch {
            spatial: vec![0.0; spatial_width * rows],
            directional: vec![0.0; dir_width * rows],
            rows,
        }
    }
}

/// Upstream gradients with respect to each output row.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OutputGrad {
    pub d_sigma: Vec<f64>,
    pub d_x_re: Vec<f64>,
    pub d_x_im: Vec<f64>,
}

impl OutputGrad {
    pub fn zeros(n: usize) -> Self {
        OutputGrad {
            d_sigma: vec![0.0; n],
            d_x_re: vec![0.0; n],
            d_x_im: vec![0.0; n],
        }
    }
}

/// Activations retained by a training forward pass, one entry per chunk.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    chunks: Vec<ChunkCache>,
}

#[derive(Debug, Clone)]
struct ChunkCache {
    start: usize,
    rows: usize,
    /// Post-activation output of every trunk layer.
    trunk: Vec<Vec<f64>>,
    sigma_pre: Vec<f64>,
    head_hidden: Vec<f64>,
}

/// Parameter gradient plus optional input gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub d_spatial: Option<Vec<f64>>,
    pub d_directional: Option<Vec<f64>>,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `C = alpha·op(A)·op(B) + beta·C` for row-major operands; `op(A)` is
/// `m×k`, `op(B)` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds checked above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn relu_inplace(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn column_sums_into(dz: &[f64], width: usize, out: &mut [f64]) {
    for row in dz.chunks_exact(width) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

impl Mlp {
    /// Lays out the parameters and initializes them deterministically from
    /// `seed`: fan-in scaled uniform weights (He bound for rectifier layers,
    /// LeCun bound for linear ones) and zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut offset = 0usize;
        let mut dense = |fan_in: usize, fan_out: usize, act: Act| {
            let d = Dense {
                fan_in,
                fan_out,
                w: offset,
                b: offset + fan_in * fan_out,
                act,
            };
            offset += d.len();
            d
        };
        let mut trunk = Vec::with_capacity(arch.trunk_layers);
        for i in 0..arch.trunk_layers {
            let fan_in = if i == 0 {
                arch.input_width
            } else if arch.skip_at > 0 && i == arch.skip_at {
                arch.trunk_width + arch.input_width
            } else {
                arch.trunk_width
            };
            let last = i + 1 == arch.trunk_layers;
            let (out, act) = if last {
                (arch.feature_width, Act::Linear)
            } else {
                (arch.trunk_width, Act::Relu)
            };
            trunk.push(dense(fan_in, out, act));
        }
        let sigma_head = dense(arch.feature_width, 1, Act::Linear);
        let head = [
            dense(arch.feature_width + arch.dir_width, arch.head_width, Act::Relu),
            dense(arch.head_width, 2, Act::Linear),
        ];
        let mut mlp = Mlp {
            arch,
            trunk,
            sigma_head,
            head,
            params: vec![0.0; offset],
        };
        mlp.reinitialize(seed);
        Ok(mlp)
    }

    pub fn reinitialize(&mut self, seed: u64) {
        let mut rng = seed::rng_from(&[seed, seed::stream::INIT]);
        let layers: Vec<Dense> = self.layers().collect();
        for d in layers {
            let gain = match d.act {
                Act::Relu => 6.0,
                Act::Linear => 3.0,
            };
            let bound = (gain / d.fan_in as f64).sqrt();
            for w in &mut self.params[d.w..d.w + d.fan_in * d.fan_out] {
                *w = rng.gen_range(-bound..bound);
            }
            for b in &mut self.params[d.b..d.b + d.fan_out] {
                *b = 0.0;
            }
        }
    }

    fn layers(&self) -> impl Iterator<Item = Dense> + '_ {
        self.trunk
            .iter()
            .copied()
            .chain(std::iter::once(self.sigma_head))
            .chain(self.head.iter().copied())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Parameter count implied by an architecture, without allocating.
    pub fn count_for(arch: &Architecture) -> usize {
        let mut n = 0;
        for i in 0..arch.trunk_layers {
            let fan_in = if i == 0 {
                arch.input_width
            } else if arch.skip_at > 0 && i == arch.skip_at {
                arch.trunk_width + arch.input_width
            } else {
                arch.trunk_width
            };
            let out = if i + 1 == arch.trunk_layers {
                arch.feature_width
            } else {
                arch.trunk_width
            };
            n += fan_in * out + out;
        }
        n += arch.feature_width + 1;
        n += (arch.feature_width + arch.dir_width) * arch.head_width + arch.head_width;
        n += arch.head_width * 2 + 2;
        n
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Shape {
                context: "parameter vector",
                expected: self.params.len(),
                found: values.len(),
            });
        }
        self.params.copy_from_slice(values);
        Ok(())
    }

    /// Post-activation outputs of each trunk layer for a batch; used for
    /// initialization diagnostics.
    pub fn trunk_activations(&self, batch: &Batch) -> Result<Vec<Vec<f64>>> {
        self.check_batch(batch)?;
        let cache = self.forward_chunk(batch, 0, batch.rows, &mut NetworkOutput::default());
        Ok(cache.trunk)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.spatial.len() != batch.rows * self.arch.input_width {
            return Err(Error::Shape {
                context: "spatial batch",
                expected: batch.rows * self.arch.input_width,
                found: batch.spatial.len(),
            });
        }
        if batch.directional.len() != batch.rows * self.arch.dir_width {
            return Err(Error::Shape {
                context: "directional batch",
                expected: batch.rows * self.arch.dir_width,
                found: batch.directional.len(),
            });
        }
        Ok(())
    }

    fn dense_forward(&self, d: &Dense, input: &[f64], rows: usize, out: &mut [f64]) {
        let p = &self.params;
        gemm(rows, d.fan_in, d.fan_out, input, false, &p[d.w..d.b], false, 0.0, out);
        add_bias(out, &p[d.b..d.b + d.fan_out]);
        if d.act == Act::Relu {
            relu_inplace(out);
        }
    }

    /// Forward pass over rows `start..start + rows`, appending outputs.
    fn forward_chunk(&self, batch: &Batch, start: usize, rows: usize, out: &mut NetworkOutput) -> ChunkCache {
        let a = &self.arch;
        let p = &self.params;
        let x = &batch.spatial[start * a.input_width..(start + rows) * a.input_width];
        let dir = &batch.directional[start * a.dir_width..(start + rows) * a.dir_width];

        let mut trunk: Vec<Vec<f64>> = Vec::with_capacity(self.trunk.len());
        for (i, d) in self.trunk.iter().enumerate() {
            let mut h = vec![0.0; rows * d.fan_out];
            if i == 0 {
                self.dense_forward(d, x, rows, &mut h);
            } else if a.skip_at > 0 && i == a.skip_at {
                // [h_prev, x] · W  split into two products over the row blocks of W.
                let w_prev = &p[d.w..d.w + a.trunk_width * d.fan_out];
                let w_skip = &p[d.w + a.trunk_width * d.fan_out..d.b];
                gemm(rows, a.trunk_width, d.fan_out, &trunk[i - 1], false, w_prev, false, 0.0, &mut h);
                gemm(rows, a.input_width, d.fan_out, x, false, w_skip, false, 1.0, &mut h);
                add_bias(&mut h, &p[d.b..d.b + d.fan_out]);
                relu_inplace(&mut h);
            } else {
                self.dense_forward(d, &trunk[i - 1], rows, &mut h);
            }
            trunk.push(h);
        }
        let feature = trunk.last().unwrap();

        let sh = &self.sigma_head;
        let mut sigma_pre = vec![0.0; rows];
        gemm(rows, a.feature_width, 1, feature, false, &p[sh.w..sh.b], false, 0.0, &mut sigma_pre);
        let sb = p[sh.b];
        for s in sigma_pre.iter_mut() {
            *s += sb;
        }

        let h0 = &self.head[0];
        let mut head_hidden = vec![0.0; rows * a.head_width];
        let w_feat = &p[h0.w..h0.w + a.feature_width * a.head_width];
        let w_dir = &p[h0.w + a.feature_width * a.head_width..h0.b];
        gemm(rows, a.feature_width, a.head_width, feature, false, w_feat, false, 0.0, &mut head_hidden);
        gemm(rows, a.dir_width, a.head_width, dir, false, w_dir, false, 1.0, &mut head_hidden);
        add_bias(&mut head_hidden, &p[h0.b..h0.b + a.head_width]);
        relu_inplace(&mut head_hidden);

        let mut xo = vec![0.0; rows * 2];
        self.dense_forward(&self.head[1], &head_hidden, rows, &mut xo);

        for r in 0..rows {
            out.sigma.push(softplus(sigma_pre[r]));
            out.x_re.push(xo[2 * r]);
            out.x_im.push(xo[2 * r + 1]);
        }
        ChunkCache {
            start,
            rows,
            trunk,
            sigma_pre,
            head_hidden,
        }
    }

    fn chunk_bounds(rows: usize) -> Vec<(usize, usize)> {
        (0..rows)
            .step_by(CHUNK_ROWS)
            .map(|s| (s, CHUNK_ROWS.min(rows - s)))
            .collect()
    }

    /// Inference forward pass.
    pub fn forward(&self, batch: &Batch, exec: Execution) -> Result<NetworkOutput> {
        self.check_batch(batch)?;
        let parts = par::map(exec, &Self::chunk_bounds(batch.rows), |_, &(s, n)| {
            let mut o = NetworkOutput::with_capacity(n);
            self.forward_chunk(batch, s, n, &mut o);
            o
        });
        let mut out = NetworkOutput::with_capacity(batch.rows);
        for p in &parts {
            out.extend(p);
        }
        Ok(out)
    }

    /// Forward pass retaining activations for [`Mlp::backward`].
    pub fn forward_train(&self, batch: &Batch, exec: Execution) -> Result<(NetworkOutput, ForwardCache)> {
        self.check_batch(batch)?;
        let parts = par::map(exec, &Self::chunk_bounds(batch.rows), |_, &(s, n)| {
            let mut o = NetworkOutput::with_capacity(n);
            let c = self.forward_chunk(batch, s, n, &mut o);
            (o, c)
        });
        let mut out = NetworkOutput::with_capacity(batch.rows);
        let mut chunks = Vec::with_capacity(parts.len());
        for (o, c) in parts {
            out.extend(&o);
            chunks.push(c);
        }
        Ok((out, ForwardCache { chunks }))
    }

    /// Reverse-mode gradients of `Σ_rows (dσ·σ + dx_re·x_re + dx_im·x_im)`
    /// with respect to every parameter (and optionally the inputs).
    pub fn backward(
        &self,
        batch: &Batch,
        cache: &ForwardCache,
        upstream: &OutputGrad,
        want_input_grads: bool,
        exec: Execution,
    ) -> Result<Gradients> {
        self.check_batch(batch)?;
        for (name, v) in [
            ("d_sigma", &upstream.d_sigma),
            ("d_x_re", &upstream.d_x_re),
            ("d_x_im", &upstream.d_x_im),
        ] {
            if v.len() != batch.rows {
                return Err(Error::Shape {
                    context: match name {
                        "d_sigma" => "upstream d_sigma",
                        "d_x_re" => "upstream d_x_re",
                        _ => "upstream d_x_im",
                    },
                    expected: batch.rows,
                    found: v.len(),
                });
            }
        }
        let parts = par::map(exec, &cache.chunks, |_, c| {
            self.backward_chunk(batch, c, upstream, want_input_grads)
        });
        let mut params = vec![0.0; self.params.len()];
        let mut d_spatial = want_input_grads.then(|| Vec::with_capacity(batch.spatial.len()));
        let mut d_directional = want_input_grads.then(|| Vec::with_capacity(batch.directional.len()));
        for (g, ds, dd) in parts {
            for (acc, v) in params.iter_mut().zip(&g) {
                *acc += v;
            }
            if let (Some(all), Some(part)) = (d_spatial.as_mut(), ds) {
                all.extend_from_slice(&part);
            }
            if let (Some(all), Some(part)) = (d_directional.as_mut(), dd) {
                all.extend_from_slice(&part);
            }
        }
        Ok(Gradients {
            params,
            d_spatial,
            d_directional,
        })
    }

    #[allow(clippy::type_complexity)]
    fn backward_chunk(
        &self,
        batch: &Batch,
        c: &ChunkCache,
        up: &OutputGrad,
        want_input: bool,
    ) -> (Vec<f64>, Option<Vec<f64>>, Option<Vec<f64>>) {
        let a = &self.arch;
        let p = &self.params;
        let rows = c.rows;
        let s0 = c.start;
        let x = &batch.spatial[s0 * a.input_width..(s0 + rows) * a.input_width];
        let dir = &batch.directional[s0 * a.dir_width..(s0 + rows) * a.dir_width];
        let mut g = vec![0.0; p.len()];

        // Radiance head output layer.
        let h1 = &self.head[1];
        let mut dz_out = vec![0.0; rows * 2];
        for r in 0..rows {
            dz_out[2 * r] = up.d_x_re[s0 + r];
            dz_out[2 * r + 1] = up.d_x_im[s0 + r];
        }
        gemm(a.head_width, rows, 2, &c.head_hidden, true, &dz_out, false, 1.0, &mut g[h1.w..h1.b]);
        column_sums_into(&dz_out, 2, &mut g[h1.b..h1.b + 2]);
        let mut dz_hidden = vec![0.0; rows * a.head_width];
        gemm(rows, 2, a.head_width, &dz_out, false, &p[h1.w..h1.b], true, 0.0, &mut dz_hidden);
        for (d, h) in dz_hidden.iter_mut().zip(&c.head_hidden) {
            if *h <= 0.0 {
                *d = 0.0;
            }
        }

        // Radiance head hidden layer: input [feature, dir].
        let h0 = &self.head[0];
        let feature = c.trunk.last().unwrap();
        let w_feat_end = h0.w + a.feature_width * a.head_width;
        gemm(a.feature_width, rows, a.head_width, feature, true, &dz_hidden, false, 1.0, &mut g[h0.w..w_feat_end]);
        gemm(a.dir_width, rows, a.head_width, dir, true, &dz_hidden, false, 1.0, &mut g[w_feat_end..h0.b]);
        column_sums_into(&dz_hidden, a.head_width, &mut g[h0.b..h0.b + a.head_width]);
        let mut d_feature = vec![0.0; rows * a.feature_width];
        gemm(rows, a.head_width, a.feature_width, &dz_hidden, false, &p[h0.w..w_feat_end], true, 0.0, &mut d_feature);
        let d_dir = want_input.then(|| {
            let mut d = vec![0.0; rows * a.dir_width];
            gemm(rows, a.head_width, a.dir_width, &dz_hidden, false, &p[w_feat_end..h0.b], true, 0.0, &mut d);
            d
        });

        // Density head: σ = softplus(f·w + b).
        let sh = &self.sigma_head;
        let ds: Vec<f64> = (0..rows)
            .map(|r| up.d_sigma[s0 + r] * sigmoid(c.sigma_pre[r]))
            .collect();
        gemm(a.feature_width, rows, 1, feature, true, &ds, false, 1.0, &mut g[sh.w..sh.b]);
        g[sh.b] += ds.iter().sum::<f64>();
        gemm(rows, 1, a.feature_width, &ds, false, &p[sh.w..sh.b], true, 1.0, &mut d_feature);

        // Trunk, last to first.
        let mut d_x = want_input.then(|| vec![0.0; rows * a.input_width]);
        let mut dz = d_feature;
        for i in (0..self.trunk.len()).rev() {
            let d = &self.trunk[i];
            if i == 0 {
                gemm(d.fan_in, rows, d.fan_out, x, true, &dz, false, 1.0, &mut g[d.w..d.b]);
                column_sums_into(&dz, d.fan_out, &mut g[d.b..d.b + d.fan_out]);
                if let Some(dx) = d_x.as_mut() {
                    gemm(rows, d.fan_out, d.fan_in, &dz, false, &p[d.w..d.b], true, 1.0, dx);
                }
                break;
            }
            let h_prev = &c.trunk[i - 1];
            let mut dh_prev = vec![0.0; rows * a.trunk_width];
            if a.skip_at > 0 && i == a.skip_at {
                let split = d.w + a.trunk_width * d.fan_out;
                gemm(a.trunk_width, rows, d.fan_out, h_prev, true, &dz, false, 1.0, &mut g[d.w..split]);
                gemm(a.input_width, rows, d.fan_out, x, true, &dz, false, 1.0, &mut g[split..d.b]);
                gemm(rows, d.fan_out, a.trunk_width, &dz, false, &p[d.w..split], true, 0.0, &mut dh_prev);
                if let Some(dx) = d_x.as_mut() {
                    gemm(rows, d.fan_out, a.input_width, &dz, false, &p[split..d.b], true, 1.0, dx);
                }
            } else {
                gemm(d.fan_in, rows, d.fan_out, h_prev, true, &dz, false, 1.0, &mut g[d.w..d.b]);
                gemm(rows, d.fan_out, d.fan_in, &dz, false, &p[d.w..d.b], true, 0.0, &mut dh_prev);
            }
            column_sums_into(&dz, d.fan_out, &mut g[d.b..d.b + d.fan_out]);
            // Layer i−1 is a rectifier layer.
            for (dv, h) in dh_prev.iter_mut().zip(h_prev) {
                if *h <= 0.0 {
                    *dv = 0.0;
                }
            }
            dz = dh_prev;
        }
        (g, d_x, d_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Architecture {
        Architecture {
            input_width: 7,
            dir_width: 4,
            trunk_layers: 4,
            trunk_width: 6,
            feature_width: 5,
            head_width: 6,
            skip_at: 2,
        }
    }

    fn random_batch(arch: &Architecture, rows: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Batch::new(arch.input_width, arch.dir_width, rows);
        b.spatial.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        b.directional.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        b
    }

    fn objective(mlp: &Mlp, batch: &Batch, up: &OutputGrad) -> f64 {
        let o = mlp.forward(batch, Execution::Sequential).unwrap();
        (0..batch.rows)
            .map(|r| up.d_sigma[r] * o.sigma[r] + up.d_x_re[r] * o.x_re[r] + up.d_x_im[r] * o.x_im[r])
            .sum()
    }

    #[test]
    fn param_count_matches_layout() {
        let arch = Architecture::new(119, 20);
        let mlp = Mlp::new(arch, 1).unwrap();
        assert_eq!(mlp.param_count(), Mlp::count_for(&arch));
        let small = Mlp::new(small_arch(), 1).unwrap();
        assert_eq!(small.param_count(), Mlp::count_for(&small_arch()));
    }

    #[test]
    fn init_is_deterministic() {
        let a = Mlp::new(small_arch(), 42).unwrap();
        let b = Mlp::new(small_arch(), 42).unwrap();
        let c = Mlp::new(small_arch(), 43).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn zero_input_is_finite_and_sigma_non_negative() {
        let arch = Architecture::new(119, 20);
        let mlp = Mlp::new(arch, 3).unwrap();
        let b = Batch::new(119, 20, 3);
        let o = mlp.forward(&b, Execution::Sequential).unwrap();
        assert!(o.sigma.iter().chain(&o.x_re).chain(&o.x_im).all(|v| v.is_finite()));
        let rb = random_batch(&arch, 300, 5);
        let o = mlp.forward(&rb, Execution::Parallel).unwrap();
        assert!(o.sigma.iter().all(|&s| s >= 0.0));
    }

    #[test]
    fn rows_are_independent() {
        let arch = small_arch();
        let mlp = Mlp::new(arch, 9).unwrap();
        let b = random_batch(&arch, 10, 1);
        let o = mlp.forward(&b, Execution::Sequential).unwrap();
        let perm: Vec<usize> = (0..10).rev().collect();
        let mut pb = Batch::new(arch.input_width, arch.dir_width, 10);
        for (dst, &src) in perm.iter().enumerate() {
            let w = arch.input_width;
            pb.spatial[dst * w..(dst + 1) * w].copy_from_slice(&b.spatial[src * w..(src + 1) * w]);
            let d = arch.dir_width;
            pb.directional[dst * d..(dst + 1) * d].copy_from_slice(&b.directional[src * d..(src + 1) * d]);
        }
        let po = mlp.forward(&pb, Execution::Sequential).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            assert_eq!(po.sigma[dst], o.sigma[src]);
            assert_eq!(po.x_re[dst], o.x_re[src]);
            assert_eq!(po.x_im[dst], o.x_im[src]);
        }
        let again = mlp.forward(&b, Execution::Parallel).unwrap();
        assert_eq!(again, o);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mlp = Mlp::new(small_arch(), 1).unwrap();
        let b = Batch::new(8, 4, 2);
        assert!(matches!(mlp.forward(&b, Execution::Sequential), Err(Error::Shape { .. })));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = small_arch();
        let mut mlp = Mlp::new(arch, 11).unwrap();
        // Non-zero biases so every code path is exercised.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in mlp.params_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let batch = random_batch(&arch, 300, 4);
        let mut up = OutputGrad::zeros(300);
        for r in 0..300 {
            up.d_sigma[r] = rng.gen_range(-1.0..1.0);
            up.d_x_re[r] = rng.gen_range(-1.0..1.0);
            up.d_x_im[r] = rng.gen_range(-1.0..1.0);
        }
        let (_, cache) = mlp.forward_train(&batch, Execution::Parallel).unwrap();
        let g = mlp.backward(&batch, &cache, &up, true, Execution::Parallel).unwrap();
        let h = 1e-6;
        for i in 0..mlp.param_count() {
            let orig = mlp.params()[i];
            mlp.params_mut()[i] = orig + h;
            let fp = objective(&mlp, &batch, &up);
            mlp.params_mut()[i] = orig - h;
            let fm = objective(&mlp, &batch, &up);
            mlp.params_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - g.params[i]).abs() / fd.abs().max(g.params[i].abs()).max(1e-6);
            assert!(err < 1e-5, "param {i}: fd {fd} vs analytic {}", g.params[i]);
        }
        // Input gradients on a few entries.
        let ds = g.d_spatial.unwrap();
        for idx in [0usize, 13, 777, 2099] {
            let mut b2 = batch.clone();
            b2.spatial[idx] += h;
            let fp = objective(&mlp, &b2, &up);
            b2.spatial[idx] -= 2.0 * h;
            let fm = objective(&mlp, &b2, &up);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - ds[idx]).abs() < 1e-6 * fd.abs().max(1.0), "input {idx}");
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient_and_linearity() {
        let arch = small_arch();
        let mlp = Mlp::new(arch, 5).unwrap();
        let batch = random_batch(&arch, 20, 8);
        let (_, cache) = mlp.forward_train(&batch, Execution::Sequential).unwrap();
        let g = mlp
            .backward(&batch, &cache, &OutputGrad::zeros(20), false, Execution::Sequential)
            .unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));

        let mut up = OutputGrad::zeros(20);
        up.d_sigma.iter_mut().for_each(|v| *v = 1.0);
        up.d_x_re.iter_mut().for_each(|v| *v = 0.5);
        let full = mlp.backward(&batch, &cache, &up, false, Execution::Sequential).unwrap();
        let mut sum = vec![0.0; mlp.param_count()];
        for r in 0..20 {
            let mut one = OutputGrad::zeros(20);
            one.d_sigma[r] = 1.0;
            one.d_x_re[r] = 0.5;
            let g = mlp.backward(&batch, &cache, &one, false, Execution::Sequential).unwrap();
            for (s, v) in sum.iter_mut().zip(&g.params) {
                *s += v;
            }
        }
        for (a, b) in full.params.iter().zip(&sum) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn init_preserves_activation_scale() {
        let arch = Architecture::new(119, 20);
        let mlp = Mlp::new(arch, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = 10_000;
        let mut b = Batch::new(119, 20, rows);
        b.spatial.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        let acts = mlp.trunk_activations(&b).unwrap();
        let ms = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        let mut prev = ms(&b.spatial);
        for (i, h) in acts.iter().enumerate().take(arch.trunk_layers - 1) {
            let cur = ms(h);
            let ratio = cur / prev;
            assert!((0.5..=2.0).contains(&ratio), "layer {i}: ratio {ratio}");
            prev = if i + 1 == arch.skip_at {
                // Next layer sees [h, x]; compare against the concatenation.
                (cur * arch.trunk_width as f64 + ms(&b.spatial) * arch.input_width as f64)
                    / (arch.trunk_width + arch.input_width) as f64
            } else {
                cur
            };
        }
    }
}
