//! Transformer noise predictor with temporal-concatenation conditioning.
//!
//! Every input becomes one token of width `hidden_dim`, laid out as
//!
//! ```text
//! [ time | init keypoints (M) | audio (N) | noisy frames (N) ]
//! ```
//!
//! for `2N + M + 1` tokens in total. The time token is a sinusoidal
//! embedding pushed through a two-layer GELU MLP; init and noisy frames and
//! audio vectors each have their own linear projection. Learned positional
//! embeddings are added, the sequence runs through pre-norm self-attention
//! blocks, and the last `N` tokens are read out linearly back to `2K`
//! coordinates. The null context swaps the init and audio tokens for two
//! learned embeddings broadcast over their positions.

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ConditioningContext, DenoiseModel, PredictionMode};
use crate::error::{Error, Result};
use crate::nn::{add_to, gelu, gelu_grad, row_vector, softmax_rows, Init, LayerNorm, LayerNormCache, Linear, ParamStore};

/// Architecture constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub hidden_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub num_keypoints: usize,
    pub audio_dim: usize,
    pub num_frames: usize,
    pub num_init: usize,
    pub ff_mult: usize,
    pub prediction_mode: PredictionMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 256,
            num_blocks: 8,
            num_heads: 8,
            num_keypoints: crate::types::DEFAULT_NUM_KEYPOINTS,
            audio_dim: crate::audio::NUM_MEL_BINS,
            num_frames: 34,
            num_init: 4,
            ff_mult: 4,
            prediction_mode: PredictionMode::Noise,
        }
    }
}

impl DenoiserConfig {
    pub fn frame_dim(&self) -> usize {
        2 * self.num_keypoints
    }

    pub fn num_tokens(&self) -> usize {
        1 + self.num_init + 2 * self.num_frames
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return bad(format!(
                "hidden_dim {} must be a positive multiple of num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.hidden_dim % 2 != 0 {
            return bad("hidden_dim must be even for the sinusoidal time embedding".into());
        }
        if self.num_keypoints == 0 || self.num_frames == 0 || self.num_init == 0 || self.audio_dim == 0 {
            return bad("num_keypoints, num_frames, num_init and audio_dim must be positive".into());
        }
        if self.num_init >= self.num_frames {
            return bad(format!(
                "num_init {} must be smaller than num_frames {}",
                self.num_init, self.num_frames
            ));
        }
        if self.ff_mult == 0 {
            return bad("ff_mult must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let d = self.hidden_dim;
        let f = self.frame_dim();
        let a = self.audio_dim;
        let ff = self.ff_mult;
        let time_mlp = 2 * (d * d + d);
        let projections = 2 * (f * d + d) + (a * d + d);
        let null_tokens = 2 * d;
        let positions = self.num_tokens() * d;
        let per_block = (4 + 2 * ff) * d * d + (9 + ff) * d;
        let head = 2 * d + d * f + f;
        time_mlp + projections + null_tokens + positions + self.num_blocks * per_block + head
    }
}

/// Fixed standardization applied to audio features before projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Per-column mean and (floored) population deviation.
    pub fn fit(rows: ArrayView2<f64>) -> Self {
        let mean = rows.mean_axis(Axis(0)).expect("non-empty feature matrix");
        let std = rows.std_axis(Axis(0), 0.0).mapv(|v| v.max(1e-6));
        Self {
            mean: mean.to_vec(),
            std: std.to_vec(),
        }
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let m = ndarray::ArrayView1::from(&self.mean[..]);
        let s = ndarray::ArrayView1::from(&self.std[..]);
        (&x - &m) / &s
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

#[derive(Debug, Clone)]
struct Layout {
    time1: Linear,
    time2: Linear,
    init_proj: Linear,
    audio_proj: Linear,
    frame_proj: Linear,
    null_init: usize,
    null_audio: usize,
    pos: usize,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    readout: Linear,
}

/// The transformer `eps_theta(x_t, c, t)` (or `x_theta` in sample mode).
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    params: ParamStore,
    layout: Layout,
    audio_norm: FeatureNorm,
}

struct BlockCache {
    ln1: LayerNormCache,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LayerNormCache,
    f: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

/// Activations kept from a forward pass for [`Denoiser::backward`].
pub struct ForwardCache {
    batch: usize,
    null: Vec<bool>,
    time_in: Array2<f64>,
    time_pre: Array2<f64>,
    time_act: Array2<f64>,
    init_in: Array2<f64>,
    audio_in: Array2<f64>,
    frames_in: Array2<f64>,
    blocks: Vec<BlockCache>,
    ln_f: LayerNormCache,
    head_in: Array2<f64>,
}

pub const POS_INIT_SCALE: f64 = 1.0;

/// Sinusoidal embedding with frequencies `10000^(-i / (dim / 2))`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * freq).sin();
        out[half + i] = (t * freq).cos();
    }
    out
}

impl Denoiser {
    /// Randomly initialized network.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.hidden_dim;
        let f = config.frame_dim();
        let a = config.audio_dim;
        let h = config.ff_mult * d;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let resid = inv(2 * config.num_blocks);
        let time1 = Linear::new(&mut p, "time_mlp.0", d, d, inv(d), &mut rng);
        let time2 = Linear::new(&mut p, "time_mlp.1", d, d, inv(d), &mut rng);
        let init_proj = Linear::new(&mut p, "init_proj", f, d, inv(f), &mut rng);
        let audio_proj = Linear::new(&mut p, "audio_proj", a, d, inv(a), &mut rng);
        let frame_proj = Linear::new(&mut p, "frame_proj", f, d, inv(f), &mut rng);
        let null_init = p.push("null_init", &[d], Init::Normal(0.02), &mut rng);
        let null_audio = p.push("null_audio", &[d], Init::Normal(0.02), &mut rng);
        let pos = p.push("pos_embedding", &[config.num_tokens(), d], Init::Normal(0.02), &mut rng);
        // tokens describing the same frame start from the same sinusoid
        let (m, n) = (config.num_init, config.num_frames);
        for tok in 1..config.num_tokens() {
            let frame = if tok <= m { tok - 1 } else { (tok - 1 - m) % n };
            let row = &mut p.values_mut()[pos + tok * d..pos + (tok + 1) * d];
            for (v, e) in row.iter_mut().zip(timestep_embedding(frame as f64, d)) {
                *v += POS_INIT_SCALE * e;
            }
        }
        let blocks = (0..config.num_blocks)
            .map(|i| Block {
                ln1: LayerNorm::new(&mut p, &format!("blocks.{i}.ln1"), d, &mut rng),
                qkv: Linear::new(&mut p, &format!("blocks.{i}.attn.qkv"), d, 3 * d, inv(d), &mut rng),
                proj: Linear::new(&mut p, &format!("blocks.{i}.attn.proj"), d, d, inv(d) * resid, &mut rng),
                ln2: LayerNorm::new(&mut p, &format!("blocks.{i}.ln2"), d, &mut rng),
                ff1: Linear::new(&mut p, &format!("blocks.{i}.ff.0"), d, h, inv(d), &mut rng),
                ff2: Linear::new(&mut p, &format!("blocks.{i}.ff.1"), h, d, inv(h) * resid, &mut rng),
            })
            .collect();
        let ln_f = LayerNorm::new(&mut p, "ln_f", d, &mut rng);
        let readout = Linear::new(&mut p, "readout", d, f, inv(d), &mut rng);
        debug_assert_eq!(p.len(), config.param_count());
        Ok(Self {
            config,
            params: p,
            layout: Layout {
                time1,
                time2,
                init_proj,
                audio_proj,
                frame_proj,
                null_init,
                null_audio,
                pos,
                blocks,
                ln_f,
                readout,
            },
            audio_norm: FeatureNorm::identity(config.audio_dim),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn audio_norm(&self) -> &FeatureNorm {
        &self.audio_norm
    }

    pub fn set_audio_norm(&mut self, norm: FeatureNorm) -> Result<()> {
        if norm.mean.len() != self.config.audio_dim || norm.std.len() != self.config.audio_dim {
            return Err(Error::Shape(format!(
                "audio norm has {} channels, model expects {}",
                norm.mean.len(),
                self.config.audio_dim
            )));
        }
        self.audio_norm = norm;
        Ok(())
    }

    fn check_inputs(&self, xs: &[ArrayView2<f64>], ts: &[usize], ctxs: &[&ConditioningContext]) -> Result<()> {
        let c = &self.config;
        if xs.is_empty() || xs.len() != ts.len() || xs.len() != ctxs.len() {
            return Err(Error::Shape(format!(
                "batch of {} inputs, {} timesteps, {} contexts",
                xs.len(),
                ts.len(),
                ctxs.len()
            )));
        }
        for (x, ctx) in xs.iter().zip(ctxs) {
            if x.dim() != (c.num_frames, c.frame_dim()) {
                return Err(Error::Shape(format!(
                    "noisy frames {:?}, expected {:?}",
                    x.dim(),
                    (c.num_frames, c.frame_dim())
                )));
            }
            if !ctx.is_null {
                if ctx.init_frames.dim() != (c.num_init, c.frame_dim()) {
                    return Err(Error::Shape(format!(
                        "init frames {:?}, expected {:?}",
                        ctx.init_frames.dim(),
                        (c.num_init, c.frame_dim())
                    )));
                }
                if ctx.audio.dim() != (c.num_frames, c.audio_dim) {
                    return Err(Error::Shape(format!(
                        "audio features {:?}, expected {:?}",
                        ctx.audio.dim(),
                        (c.num_frames, c.audio_dim)
                    )));
                }
            }
        }
        if ts.iter().any(|&t| t == 0) {
            return Err(Error::InvalidArgument("timesteps are 1-based".into()));
        }
        Ok(())
    }

    /// Forward pass for a batch; output is `(B * N) x 2K`, sample-major.
    pub fn forward(
        &self,
        xs: &[ArrayView2<f64>],
        ts: &[usize],
        ctxs: &[&ConditioningContext],
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_inputs(xs, ts, ctxs)?;
        let c = &self.config;
        let p = self.params.values();
        let ly = &self.layout;
        let (b, n, m, d) = (xs.len(), c.num_frames, c.num_init, c.hidden_dim);
        let l = c.num_tokens();
        let null: Vec<bool> = ctxs.iter().map(|c| c.is_null).collect();
        let n_cond = null.iter().filter(|z| !**z).count();

        let mut time_in = Array2::zeros((b, d));
        for (i, &t) in ts.iter().enumerate() {
            time_in.row_mut(i).assign(&ndarray::Array1::from(timestep_embedding(t as f64, d)));
        }
        let time_pre = ly.time1.forward(p, time_in.view());
        let time_act = time_pre.mapv(gelu);
        let time_tok = ly.time2.forward(p, time_act.view());

        let mut init_in = Array2::zeros((n_cond * m, c.frame_dim()));
        let mut audio_in = Array2::zeros((n_cond * n, c.audio_dim));
        let mut j = 0;
        for ctx in ctxs.iter().filter(|c| !c.is_null) {
            init_in.slice_mut(s![j * m..(j + 1) * m, ..]).assign(&ctx.init_frames);
            audio_in
                .slice_mut(s![j * n..(j + 1) * n, ..])
                .assign(&self.audio_norm.apply(ctx.audio.view()));
            j += 1;
        }
        let init_tok = ly.init_proj.forward(p, init_in.view());
        let audio_tok = ly.audio_proj.forward(p, audio_in.view());

        let mut frames_in = Array2::zeros((b * n, c.frame_dim()));
        for (i, x) in xs.iter().enumerate() {
            frames_in.slice_mut(s![i * n..(i + 1) * n, ..]).assign(x);
        }
        let frame_tok = ly.frame_proj.forward(p, frames_in.view());

        let pos = ArrayView2::from_shape((l, d), &p[ly.pos..ly.pos + l * d]).expect("layout");
        let null_init = row_vector(p, ly.null_init, d);
        let null_audio = row_vector(p, ly.null_audio, d);
        let mut h = Array2::zeros((b * l, d));
        let mut j = 0;
        for i in 0..b {
            let base = i * l;
            let mut tok = h.slice_mut(s![base..base + l, ..]);
            tok.assign(&pos);
            let mut row0 = tok.row_mut(0);
            row0 += &time_tok.row(i);
            if null[i] {
                for r in 1..1 + m {
                    let mut row = tok.row_mut(r);
                    row += &null_init;
                }
                for r in 1 + m..1 + m + n {
                    let mut row = tok.row_mut(r);
                    row += &null_audio;
                }
            } else {
                let mut it = tok.slice_mut(s![1..1 + m, ..]);
                it += &init_tok.slice(s![j * m..(j + 1) * m, ..]);
                let mut at = tok.slice_mut(s![1 + m..1 + m + n, ..]);
                at += &audio_tok.slice(s![j * n..(j + 1) * n, ..]);
                j += 1;
            }
            let mut ft = tok.slice_mut(s![1 + m + n..l, ..]);
            ft += &frame_tok.slice(s![i * n..(i + 1) * n, ..]);
        }

        let mut blocks = Vec::with_capacity(ly.blocks.len());
        for blk in &ly.blocks {
            let (out, cache) = self.block_forward(blk, h, b);
            h = out;
            blocks.push(cache);
        }

        let mut head_rows = Array2::zeros((b * n, d));
        for i in 0..b {
            head_rows
                .slice_mut(s![i * n..(i + 1) * n, ..])
                .assign(&h.slice(s![i * l + 1 + m + n..(i + 1) * l, ..]));
        }
        let (head_in, ln_f) = ly.ln_f.forward(p, head_rows.view());
        let out = ly.readout.forward(p, head_in.view());
        Ok((
            out,
            ForwardCache {
                batch: b,
                null,
                time_in,
                time_pre,
                time_act,
                init_in,
                audio_in,
                frames_in,
                blocks,
                ln_f,
                head_in,
            },
        ))
    }

    fn block_forward(&self, blk: &Block, x: Array2<f64>, b: usize) -> (Array2<f64>, BlockCache) {
        let p = self.params.values();
        let c = &self.config;
        let (l, d, nh) = (c.num_tokens(), c.hidden_dim, c.num_heads);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();
        let (a, ln1) = blk.ln1.forward(p, x.view());
        let qkv = blk.qkv.forward(p, a.view());
        let mut attn = Array2::zeros((b * l, d));
        let mut probs = Vec::with_capacity(b * nh);
        for i in 0..b {
            let rows = i * l..(i + 1) * l;
            for hd in 0..nh {
                let q = qkv.slice(s![rows.clone(), hd * dh..(hd + 1) * dh]);
                let k = qkv.slice(s![rows.clone(), d + hd * dh..d + (hd + 1) * dh]);
                let v = qkv.slice(s![rows.clone(), 2 * d + hd * dh..2 * d + (hd + 1) * dh]);
                let mut sc = q.dot(&k.t());
                sc *= scale;
                softmax_rows(&mut sc);
                attn.slice_mut(s![rows.clone(), hd * dh..(hd + 1) * dh])
                    .assign(&sc.dot(&v));
                probs.push(sc);
            }
        }
        let mut h1 = x;
        h1 += &blk.proj.forward(p, attn.view());
        let (f, ln2) = blk.ln2.forward(p, h1.view());
        let u = blk.ff1.forward(p, f.view());
        let g = u.mapv(gelu);
        let mut out = h1;
        out += &blk.ff2.forward(p, g.view());
        (
            out,
            BlockCache {
                ln1,
                a,
                qkv,
                probs,
                attn,
                ln2,
                f,
                u,
                g,
            },
        )
    }

    fn block_backward(&self, blk: &Block, cache: &BlockCache, dout: Array2<f64>, b: usize, g: &mut [f64]) -> Array2<f64> {
        let p = self.params.values();
        let c = &self.config;
        let (l, d, nh) = (c.num_tokens(), c.hidden_dim, c.num_heads);
        let dh = d / nh;
        let scale = 1.0 / (dh as f64).sqrt();

        let dgl = blk.ff2.backward(p, cache.g.view(), dout.view(), g);
        let du = dgl * &cache.u.mapv(gelu_grad);
        let df = blk.ff1.backward(p, cache.f.view(), du.view(), g);
        let mut dh1 = dout;
        dh1 += &blk.ln2.backward(p, &cache.ln2, df.view(), g);

        let dattn = blk.proj.backward(p, cache.attn.view(), dh1.view(), g);
        let mut dqkv = Array2::zeros((b * l, 3 * d));
        for i in 0..b {
            let rows = i * l..(i + 1) * l;
            for hd in 0..nh {
                let prob = &cache.probs[i * nh + hd];
                let q = cache.qkv.slice(s![rows.clone(), hd * dh..(hd + 1) * dh]);
                let k = cache.qkv.slice(s![rows.clone(), d + hd * dh..d + (hd + 1) * dh]);
                let v = cache.qkv.slice(s![rows.clone(), 2 * d + hd * dh..2 * d + (hd + 1) * dh]);
                let dout_h = dattn.slice(s![rows.clone(), hd * dh..(hd + 1) * dh]);
                let dp = dout_h.dot(&v.t());
                let dv = prob.t().dot(&dout_h);
                let mut ds = dp;
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(prob.rows()) {
                    let dot = drow.dot(&prow);
                    drow.zip_mut_with(&prow, |dv, &pv| *dv = pv * (*dv - dot) * scale);
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![rows.clone(), hd * dh..(hd + 1) * dh]).assign(&dq);
                dqkv.slice_mut(s![rows.clone(), d + hd * dh..d + (hd + 1) * dh]).assign(&dk);
                dqkv.slice_mut(s![rows.clone(), 2 * d + hd * dh..2 * d + (hd + 1) * dh])
                    .assign(&dv);
            }
        }
        let da = blk.qkv.backward(p, cache.a.view(), dqkv.view(), g);
        let mut dx = dh1;
        dx += &blk.ln1.backward(p, &cache.ln1, da.view(), g);
        dx
    }

    /// Accumulates `dL/dparams` into `grads` given `dL/doutput`.
    pub fn backward(&self, cache: &ForwardCache, d_out: ArrayView2<f64>, grads: &mut [f64]) {
        assert_eq!(grads.len(), self.params.len());
        let p = self.params.values();
        let ly = &self.layout;
        let c = &self.config;
        let (b, n, m, d) = (cache.batch, c.num_frames, c.num_init, c.hidden_dim);
        let l = c.num_tokens();

        let dhead = ly.readout.backward(p, cache.head_in.view(), d_out, grads);
        let dhead_rows = ly.ln_f.backward(p, &cache.ln_f, dhead.view(), grads);
        let mut dh = Array2::zeros((b * l, d));
        for i in 0..b {
            dh.slice_mut(s![i * l + 1 + m + n..(i + 1) * l, ..])
                .assign(&dhead_rows.slice(s![i * n..(i + 1) * n, ..]));
        }
        for (blk, bc) in ly.blocks.iter().zip(&cache.blocks).rev() {
            dh = self.block_backward(blk, bc, dh, b, grads);
        }

        let mut dpos = Array2::<f64>::zeros((l, d));
        let mut dtime = Array2::zeros((b, d));
        let n_cond = cache.null.iter().filter(|z| !**z).count();
        let mut dinit = Array2::zeros((n_cond * m, d));
        let mut daudio = Array2::zeros((n_cond * n, d));
        let mut dframes = Array2::zeros((b * n, d));
        let mut dnull_init = ndarray::Array1::<f64>::zeros(d);
        let mut dnull_audio = ndarray::Array1::<f64>::zeros(d);
        let mut j = 0;
        for i in 0..b {
            let tok = dh.slice(s![i * l..(i + 1) * l, ..]);
            dpos += &tok;
            dtime.row_mut(i).assign(&tok.row(0));
            let init_rows = tok.slice(s![1..1 + m, ..]);
            let audio_rows = tok.slice(s![1 + m..1 + m + n, ..]);
            if cache.null[i] {
                dnull_init += &init_rows.sum_axis(Axis(0));
                dnull_audio += &audio_rows.sum_axis(Axis(0));
            } else {
                dinit.slice_mut(s![j * m..(j + 1) * m, ..]).assign(&init_rows);
                daudio.slice_mut(s![j * n..(j + 1) * n, ..]).assign(&audio_rows);
                j += 1;
            }
            dframes
                .slice_mut(s![i * n..(i + 1) * n, ..])
                .assign(&tok.slice(s![1 + m + n..l, ..]));
        }
        for (dst, src) in grads[ly.pos..ly.pos + l * d].iter_mut().zip(dpos.iter()) {
            *dst += src;
        }
        add_to(grads, ly.null_init, dnull_init.view());
        add_to(grads, ly.null_audio, dnull_audio.view());
        ly.frame_proj.backward_params(cache.frames_in.view(), dframes.view(), grads);
        if n_cond > 0 {
            ly.init_proj.backward_params(cache.init_in.view(), dinit.view(), grads);
            ly.audio_proj.backward_params(cache.audio_in.view(), daudio.view(), grads);
        }
        let dact = ly.time2.backward(p, cache.time_act.view(), dtime.view(), grads);
        let dpre = dact * &cache.time_pre.mapv(gelu_grad);
        ly.time1.backward_params(cache.time_in.view(), dpre.view(), grads);
    }

    /// Predictions for a batch with per-sample timesteps.
    pub fn predict_batch(
        &self,
        xs: &[ArrayView2<f64>],
        ts: &[usize],
        ctxs: &[&ConditioningContext],
    ) -> Result<Vec<Array2<f64>>> {
        let (out, _) = self.forward(xs, ts, ctxs)?;
        let n = self.config.num_frames;
        Ok((0..xs.len())
            .map(|i| out.slice(s![i * n..(i + 1) * n, ..]).to_owned())
            .collect())
    }
}

impl DenoiseModel for Denoiser {
    fn prediction_mode(&self) -> PredictionMode {
        self.config.prediction_mode
    }

    fn predict(
        &self,
        x_t: &[ArrayView2<f64>],
        t: usize,
        contexts: &[&ConditioningContext],
    ) -> Result<Vec<Array2<f64>>> {
        let ts = vec![t; x_t.len()];
        self.predict_batch(x_t, &ts, contexts)
    }
}

/// Returns the context unchanged in shape but flagged as unconditional.
pub fn null_context() -> ConditioningContext {
    ConditioningContext::null()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            hidden_dim: 16,
            num_blocks: 2,
            num_heads: 4,
            num_keypoints: 3,
            audio_dim: 5,
            num_frames: 6,
            num_init: 2,
            ff_mult: 4,
            prediction_mode: PredictionMode::Noise,
        }
    }

    fn gauss(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || StandardNormal.sample(rng))
    }

    fn context(rng: &mut ChaCha8Rng, cfg: &DenoiserConfig) -> ConditioningContext {
        ConditioningContext::new(
            gauss(rng, cfg.num_init, cfg.frame_dim()),
            gauss(rng, cfg.num_frames, cfg.audio_dim),
        )
    }

    #[test]
    fn param_count_matches_closed_form() {
        for cfg in [tiny(), DenoiserConfig::default()] {
            let net = Denoiser::new(cfg, 0).unwrap();
            assert_eq!(net.num_params(), cfg.param_count());
        }
        // documented value for the full-size model with K = 50
        let d = 256;
        let f = 100;
        let expected = 2 * (d * d + d)
            + 2 * (f * d + d)
            + (32 * d + d)
            + 2 * d
            + 73 * d
            + 8 * (12 * d * d + 13 * d)
            + 2 * d
            + d * f
            + f;
        assert_eq!(DenoiserConfig::default().param_count(), expected);
        assert_eq!(expected, 6_555_236);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = tiny();
        c.num_heads = 3;
        assert!(Denoiser::new(c, 0).is_err());
        let mut c = tiny();
        c.num_init = c.num_frames;
        assert!(Denoiser::new(c, 0).is_err());
    }

    #[test]
    fn output_shape_and_determinism() {
        let cfg = tiny();
        let net = Denoiser::new(cfg, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = gauss(&mut rng, 6, 6);
        let ctx = context(&mut rng, &cfg);
        let a = net.predict(&[x.view()], 10, &[&ctx]).unwrap();
        assert_eq!(a[0].dim(), (6, 6));
        let b = net.predict(&[x.view()], 10, &[&ctx]).unwrap();
        assert_eq!(a, b);
        let wrong = gauss(&mut rng, 5, 6);
        assert!(net.predict(&[wrong.view()], 10, &[&ctx]).is_err());
        assert!(net.predict(&[x.view()], 0, &[&ctx]).is_err());
    }

    #[test]
    fn audio_perturbation_changes_output() {
        let cfg = tiny();
        let net = Denoiser::new(cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = gauss(&mut rng, 6, 6);
        let ctx = context(&mut rng, &cfg);
        let mut other = ctx.clone();
        other.audio[[3, 1]] += 0.5;
        let a = net.predict(&[x.view()], 40, &[&ctx]).unwrap();
        let b = net.predict(&[x.view()], 40, &[&other]).unwrap();
        let diff: f64 = (&a[0] - &b[0]).iter().map(|v| v * v).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn null_context_ignores_payload() {
        let cfg = tiny();
        let net = Denoiser::new(cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = gauss(&mut rng, 6, 6);
        let mut garbage = context(&mut rng, &cfg);
        garbage.is_null = true;
        garbage.audio.fill(f64::NAN);
        let a = net.predict(&[x.view()], 7, &[&null_context()]).unwrap();
        let b = net.predict(&[x.view()], 7, &[&garbage]).unwrap();
        assert_eq!(a, b);
        assert!(a[0].iter().all(|v| v.is_finite()));
    }

    #[test]
    fn batch_equals_individual() {
        let cfg = tiny();
        let net = Denoiser::new(cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<_> = (0..4).map(|_| gauss(&mut rng, 6, 6)).collect();
        let mut ctxs: Vec<_> = (0..4).map(|_| context(&mut rng, &cfg)).collect();
        ctxs[2] = null_context();
        let ts = [3usize, 50, 120, 499];
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let refs: Vec<_> = ctxs.iter().collect();
        let batch = net.predict_batch(&views, &ts, &refs).unwrap();
        for i in 0..4 {
            let one = net.predict_batch(&[views[i]], &[ts[i]], &[refs[i]]).unwrap();
            for (a, b) in batch[i].iter().zip(one[0].iter()) {
                assert!((a - b).abs() <= 1e-5 * b.abs().max(1e-8));
            }
        }
    }

    #[test]
    fn random_init_outputs_are_finite() {
        let cfg = tiny();
        for seed in 0..100 {
            let net = Denoiser::new(cfg, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let x = gauss(&mut rng, 6, 6);
            let ctx = context(&mut rng, &cfg);
            let t = rng.random_range(1..=500);
            let out = net.predict(&[x.view()], t, &[&ctx]).unwrap();
            assert!(out[0].iter().all(|v| v.is_finite() && v.abs() < 1e3));
        }
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let cfg = tiny();
        let mut net = Denoiser::new(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let xs: Vec<_> = (0..3).map(|_| gauss(&mut rng, 6, 6)).collect();
        let targets: Vec<_> = (0..3).map(|_| gauss(&mut rng, 6, 6)).collect();
        let ctxs = [context(&mut rng, &cfg), null_context(), context(&mut rng, &cfg)];
        let ts = [5usize, 77, 300];
        let views: Vec<_> = xs.iter().map(|x| x.view()).collect();
        let refs: Vec<_> = ctxs.iter().collect();
        let mut target = Array2::zeros((18, 6));
        for (i, t) in targets.iter().enumerate() {
            target.slice_mut(s![i * 6..(i + 1) * 6, ..]).assign(t);
        }
        let loss = |net: &Denoiser| {
            let (out, _) = net.forward(&views, &ts, &refs).unwrap();
            (&out - &target).mapv(|v| v * v).mean().unwrap()
        };
        let (out, cache) = net.forward(&views, &ts, &refs).unwrap();
        let d_out = (&out - &target) * (2.0 / out.len() as f64);
        let mut g = vec![0.0; net.num_params()];
        net.backward(&cache, d_out.view(), &mut g);
        // every tensor gets checked at a few entries
        let specs = net.params().specs().to_vec();
        for spec in &specs {
            for _ in 0..3 {
                let i = spec.offset + rng.random_range(0..spec.numel());
                let h = 1e-5;
                let orig = net.params().values()[i];
                net.params_mut().values_mut()[i] = orig + h;
                let a = loss(&net);
                net.params_mut().values_mut()[i] = orig - h;
                let b = loss(&net);
                net.params_mut().values_mut()[i] = orig;
                let num = (a - b) / (2.0 * h);
                let err = (num - g[i]).abs();
                assert!(
                    err <= 1e-6 + 1e-4 * num.abs().max(g[i].abs()),
                    "{} [{}]: fd {num} vs analytic {}",
                    spec.name,
                    i - spec.offset,
                    g[i]
                );
            }
        }
    }
}
