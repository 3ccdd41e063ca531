//! The hierarchical denoising network.
//!
//! Tokens are embedded per track, summarized by a stride-4 convolution, mixed by
//! a pre-norm bidirectional transformer, expanded back by a transposed
//! convolution and projected to per-track logits. Forward and backward passes are
//! written out by hand over one flat parameter buffer.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::{Denoiser, Logits};
use crate::scalar::{mat, Scalar};
use crate::tokens::{Layout, TokenSequence, TrackKind};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("input is {steps} steps of {kinds:?}, model expects {want_steps} steps of {want_kinds:?}")]
    Shape {
        steps: usize,
        kinds: Vec<TrackKind>,
        want_steps: usize,
        want_kinds: Vec<TrackKind>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub tracks: Vec<TrackKind>,
    pub seq_len: usize,
    pub token_embed_dim: usize,
    pub summary_dim: usize,
    /// Kernel size and stride of the summarizing convolution.
    pub conv_stride: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl DenoiserConfig {
    /// Full-size model: 1024 steps, 24 layers.
    pub fn full(layout: Layout) -> Self {
        Self {
            tracks: layout.kinds(),
            seq_len: 1024,
            token_embed_dim: 128,
            summary_dim: 512,
            conv_stride: 4,
            n_layers: 24,
            n_heads: 8,
            learning_rate: 5e-4,
            batch_size: 50,
        }
    }

    /// CPU-sized model over 16 bars.
    pub fn desk(layout: Layout) -> Self {
        Self {
            tracks: layout.kinds(),
            seq_len: 256,
            token_embed_dim: 64,
            summary_dim: 128,
            conv_stride: 4,
            n_layers: 2,
            n_heads: 4,
            learning_rate: 1e-3,
            batch_size: 16,
        }
    }

    pub fn summary_len(&self) -> usize {
        self.seq_len / self.conv_stride
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.tracks.iter().map(|k| k.vocab_size() as usize).collect()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.tracks.is_empty() {
            return bad("no tracks");
        }
        if self.conv_stride == 0 || self.seq_len == 0 || !self.seq_len.is_multiple_of(self.conv_stride) {
            return bad("seq_len must be a positive multiple of conv_stride");
        }
        if self.n_heads == 0 || !self.summary_dim.is_multiple_of(self.n_heads) {
            return bad("n_heads must divide summary_dim");
        }
        if self.token_embed_dim == 0 || self.summary_dim == 0 {
            return bad("zero width");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        Ok(())
    }

    /// Named parameter tensors in storage order.
    pub fn tensors(&self) -> Vec<TensorSpec> {
        let (de, ds, r) = (self.token_embed_dim, self.summary_dim, self.conv_stride);
        let mut out = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product::<usize>();
            out.push(TensorSpec {
                name,
                shape,
                offset,
            });
            offset += len;
        };
        for (k, v) in self.vocab_sizes().into_iter().enumerate() {
            push(format!("track{k}.embed"), vec![v + 1, de]);
            push(format!("track{k}.conv.weight"), vec![r * de, ds]);
            push(format!("track{k}.conv.bias"), vec![ds]);
        }
        push("pos".into(), vec![self.summary_len(), ds]);
        for l in 0..self.n_layers {
            push(format!("layer{l}.ln1.gain"), vec![ds]);
            push(format!("layer{l}.ln1.bias"), vec![ds]);
            push(format!("layer{l}.attn.qkv.weight"), vec![ds, 3 * ds]);
            push(format!("layer{l}.attn.qkv.bias"), vec![3 * ds]);
            push(format!("layer{l}.attn.out.weight"), vec![ds, ds]);
            push(format!("layer{l}.attn.out.bias"), vec![ds]);
            push(format!("layer{l}.ln2.gain"), vec![ds]);
            push(format!("layer{l}.ln2.bias"), vec![ds]);
            push(format!("layer{l}.mlp.fc1.weight"), vec![ds, 4 * ds]);
            push(format!("layer{l}.mlp.fc1.bias"), vec![4 * ds]);
            push(format!("layer{l}.mlp.fc2.weight"), vec![4 * ds, ds]);
            push(format!("layer{l}.mlp.fc2.bias"), vec![ds]);
        }
        push("final_ln.gain".into(), vec![ds]);
        push("final_ln.bias".into(), vec![ds]);
        for (k, v) in self.vocab_sizes().into_iter().enumerate() {
            push(format!("track{k}.deconv.weight"), vec![ds, r * de]);
            push(format!("track{k}.deconv.bias"), vec![de]);
            push(format!("track{k}.head.weight"), vec![de, v]);
            push(format!("track{k}.head.bias"), vec![v]);
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(TensorSpec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Element offset into the flat buffer.
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
struct TrackIdx {
    embed: Range<usize>,
    conv_w: Range<usize>,
    conv_b: Range<usize>,
    deconv_w: Range<usize>,
    deconv_b: Range<usize>,
    head_w: Range<usize>,
    head_b: Range<usize>,
}

#[derive(Debug, Clone)]
struct LayerIdx {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    qkv_w: Range<usize>,
    qkv_b: Range<usize>,
    out_w: Range<usize>,
    out_b: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    fc1_w: Range<usize>,
    fc1_b: Range<usize>,
    fc2_w: Range<usize>,
    fc2_b: Range<usize>,
}

#[derive(Debug, Clone)]
struct Index {
    tracks: Vec<TrackIdx>,
    pos: Range<usize>,
    layers: Vec<LayerIdx>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
}

impl Index {
    fn new(config: &DenoiserConfig) -> Self {
        let specs = config.tensors();
        let mut it = specs.iter().map(TensorSpec::range);
        let mut next = || it.next().expect("tensor list matches index");
        let mut front = Vec::new();
        for _ in &config.tracks {
            front.push((next(), next(), next()));
        }
        let pos = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerIdx {
                ln1_g: next(),
                ln1_b: next(),
                qkv_w: next(),
                qkv_b: next(),
                out_w: next(),
                out_b: next(),
                ln2_g: next(),
                ln2_b: next(),
                fc1_w: next(),
                fc1_b: next(),
                fc2_w: next(),
                fc2_b: next(),
            })
            .collect();
        let lnf_g = next();
        let lnf_b = next();
        let tracks = front
            .into_iter()
            .map(|(embed, conv_w, conv_b)| TrackIdx {
                embed,
                conv_w,
                conv_b,
                deconv_w: next(),
                deconv_b: next(),
                head_w: next(),
                head_b: next(),
            })
            .collect();
        Self {
            tracks,
            pos,
            layers,
            lnf_g,
            lnf_b,
        }
    }
}

/// Network weights and the layout used to address them.
#[derive(Debug, Clone)]
pub struct Model<F> {
    config: DenoiserConfig,
    index: Index,
    params: Vec<F>,
}

const LN_EPS: f64 = 1e-5;

impl<F: Scalar> Model<F> {
    /// Weights `N(0, 0.02)`, biases zero, norm gains one.
    pub fn init<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self, ModelError> {
        Self::init_with_std(config, 0.02, rng)
    }

    pub fn init_with_std<R: Rng + ?Sized>(
        config: DenoiserConfig,
        std: f64,
        rng: &mut R,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let normal = Normal::new(0.0, std).map_err(|e| ModelError::Config(e.to_string()))?;
        let specs = config.tensors();
        let mut params = vec![F::zero(); config.param_count()];
        for spec in &specs {
            let slice = &mut params[spec.range()];
            if spec.name.ends_with(".gain") {
                slice.fill(F::one());
            } else if !spec.name.ends_with(".bias") {
                for p in slice {
                    *p = F::of(normal.sample(rng));
                }
            }
        }
        let index = Index::new(&config);
        Ok(Self {
            config,
            index,
            params,
        })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<F>) -> Result<Self, ModelError> {
        config.validate()?;
        if params.len() != config.param_count() {
            return Err(ModelError::Config(format!(
                "{} parameters supplied, config needs {}",
                params.len(),
                config.param_count()
            )));
        }
        let index = Index::new(&config);
        Ok(Self {
            config,
            index,
            params,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &[F] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [F] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn check_input(&self, x: &TokenSequence) -> Result<(), ModelError> {
        if x.steps() != self.config.seq_len || x.kinds() != self.config.tracks.as_slice() {
            return Err(ModelError::Shape {
                steps: x.steps(),
                kinds: x.kinds().to_vec(),
                want_steps: self.config.seq_len,
                want_kinds: self.config.tracks.clone(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &TokenSequence) -> Result<Logits<F>, ModelError> {
        Ok(self.forward_cached(x)?.0)
    }

    fn p(&self, r: &Range<usize>) -> &[F] {
        &self.params[r.clone()]
    }

    /// Forward pass keeping the activations needed by [`Model::backward`].
    pub fn forward_cached(&self, x: &TokenSequence) -> Result<(Logits<F>, Cache<F>), ModelError> {
        self.check_input(x)?;
        let c = &self.config;
        let (l, s, de, ds, r) = (
            c.seq_len,
            c.summary_len(),
            c.token_embed_dim,
            c.summary_dim,
            c.conv_stride,
        );

        let mut tokens = Vec::with_capacity(c.tracks.len());
        let mut embeds = Vec::with_capacity(c.tracks.len());
        let mut h = vec![F::zero(); s * ds];
        for (k, ti) in self.index.tracks.iter().enumerate() {
            let tok: Vec<usize> = x.track(k).map(usize::from).collect();
            let table = self.p(&ti.embed);
            let mut e = vec![F::zero(); l * de];
            for (row, &t) in e.chunks_exact_mut(de).zip(&tok) {
                row.copy_from_slice(&table[t * de..(t + 1) * de]);
            }
            add_bias(&mut h, self.p(&ti.conv_b));
            mat::mm_acc(s, r * de, ds, &e, self.p(&ti.conv_w), &mut h);
            tokens.push(tok);
            embeds.push(e);
        }
        for (hv, pv) in h.iter_mut().zip(self.p(&self.index.pos)) {
            *hv += *pv;
        }

        let mut layers = Vec::with_capacity(c.n_layers);
        for li in &self.index.layers {
            let (cache, next) = self.layer_forward(li, h);
            layers.push(cache);
            h = next;
        }

        let (hf, lnf) = layer_norm(&h, ds, self.p(&self.index.lnf_g), self.p(&self.index.lnf_b));
        let mut decoded = Vec::with_capacity(c.tracks.len());
        let mut blocks = Vec::with_capacity(c.tracks.len());
        let vocabs = c.vocab_sizes();
        for (ti, &v) in self.index.tracks.iter().zip(&vocabs) {
            let mut d = vec![F::zero(); l * de];
            add_bias(&mut d, self.p(&ti.deconv_b));
            mat::mm_acc(s, ds, r * de, &hf, self.p(&ti.deconv_w), &mut d);
            let mut out = vec![F::zero(); l * v];
            add_bias(&mut out, self.p(&ti.head_b));
            mat::mm_acc(l, de, v, &d, self.p(&ti.head_w), &mut out);
            decoded.push(d);
            blocks.push(out);
        }
        let logits = Logits::from_blocks(l, vocabs, blocks);
        Ok((
            logits,
            Cache {
                tokens,
                embeds,
                layers,
                lnf,
                hf,
                decoded,
            },
        ))
    }

    fn layer_forward(&self, li: &LayerIdx, mut h: Vec<F>) -> (LayerCache<F>, Vec<F>) {
        let c = &self.config;
        let (s, ds, nh) = (c.summary_len(), c.summary_dim, c.n_heads);
        let dh = ds / nh;
        let scale = F::of(1.0 / (dh as f64).sqrt());

        let (a, ln1) = layer_norm(&h, ds, self.p(&li.ln1_g), self.p(&li.ln1_b));
        let mut qkv = vec![F::zero(); s * 3 * ds];
        add_bias(&mut qkv, self.p(&li.qkv_b));
        mat::mm_acc(s, ds, 3 * ds, &a, self.p(&li.qkv_w), &mut qkv);

        let mut probs = vec![F::zero(); nh * s * s];
        let mut ctx = vec![F::zero(); s * ds];
        let rs = (3 * ds) as isize;
        for head in 0..nh {
            let p = &mut probs[head * s * s..(head + 1) * s * s];
            F::gemm(
                s,
                dh,
                s,
                scale,
                &qkv[head * dh..],
                rs,
                1,
                &qkv[ds + head * dh..],
                1,
                rs,
                F::zero(),
                p,
                s as isize,
                1,
            );
            for row in p.chunks_exact_mut(s) {
                softmax_in_place(row);
            }
            F::gemm(
                s,
                s,
                dh,
                F::one(),
                p,
                s as isize,
                1,
                &qkv[2 * ds + head * dh..],
                rs,
                1,
                F::zero(),
                &mut ctx[head * dh..],
                ds as isize,
                1,
            );
        }
        add_bias(&mut h, self.p(&li.out_b));
        mat::mm_acc(s, ds, ds, &ctx, self.p(&li.out_w), &mut h);

        let (m, ln2) = layer_norm(&h, ds, self.p(&li.ln2_g), self.p(&li.ln2_b));
        let mut u = vec![F::zero(); s * 4 * ds];
        add_bias(&mut u, self.p(&li.fc1_b));
        mat::mm_acc(s, ds, 4 * ds, &m, self.p(&li.fc1_w), &mut u);
        let g: Vec<F> = u.iter().map(|&v| gelu(v)).collect();
        add_bias(&mut h, self.p(&li.fc2_b));
        mat::mm_acc(s, 4 * ds, ds, &g, self.p(&li.fc2_w), &mut h);

        (
            LayerCache {
                ln1,
                a,
                qkv,
                probs,
                ctx,
                ln2,
                m,
                u,
                g,
            },
            h,
        )
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
    pub fn backward(&self, cache: &Cache<F>, dlogits: &Logits<F>, grad: &mut [F]) {
        assert_eq!(grad.len(), self.params.len());
        let c = &self.config;
        let (l, s, de, ds, r) = (
            c.seq_len,
            c.summary_len(),
            c.token_embed_dim,
            c.summary_dim,
            c.conv_stride,
        );
        let vocabs = c.vocab_sizes();

        let mut dhf = vec![F::zero(); s * ds];
        for (k, (ti, &v)) in self.index.tracks.iter().zip(&vocabs).enumerate() {
            let dout = dlogits.block(k);
            let d = &cache.decoded[k];
            mat::mm_at_acc(de, l, v, d, dout, &mut grad[ti.head_w.clone()]);
            col_sum_acc(dout, v, &mut grad[ti.head_b.clone()]);
            let mut dd = vec![F::zero(); l * de];
            mat::mm_bt_acc(l, v, de, dout, self.p(&ti.head_w), &mut dd);

            mat::mm_at_acc(ds, s, r * de, &cache.hf, &dd, &mut grad[ti.deconv_w.clone()]);
            col_sum_acc(&dd, de, &mut grad[ti.deconv_b.clone()]);
            mat::mm_bt_acc(s, r * de, ds, &dd, self.p(&ti.deconv_w), &mut dhf);
        }

        let mut dh = layer_norm_backward(
            &dhf,
            ds,
            &cache.lnf,
            self.p(&self.index.lnf_g),
            grad,
            &self.index.lnf_g,
            &self.index.lnf_b,
        );

        for (li, lc) in self.index.layers.iter().zip(&cache.layers).rev() {
            self.layer_backward(li, lc, &mut dh, grad);
        }

        for (gv, dv) in grad[self.index.pos.clone()].iter_mut().zip(&dh) {
            *gv += *dv;
        }
        for (k, ti) in self.index.tracks.iter().enumerate() {
            let e = &cache.embeds[k];
            mat::mm_at_acc(r * de, s, ds, e, &dh, &mut grad[ti.conv_w.clone()]);
            col_sum_acc(&dh, ds, &mut grad[ti.conv_b.clone()]);
            let mut demb = vec![F::zero(); l * de];
            mat::mm_bt_acc(s, ds, r * de, &dh, self.p(&ti.conv_w), &mut demb);
            let table = &mut grad[ti.embed.clone()];
            for (row, &t) in demb.chunks_exact(de).zip(&cache.tokens[k]) {
                for (g, d) in table[t * de..(t + 1) * de].iter_mut().zip(row) {
                    *g += *d;
                }
            }
        }
    }

    fn layer_backward(&self, li: &LayerIdx, lc: &LayerCache<F>, dh: &mut [F], grad: &mut [F]) {
        let c = &self.config;
        let (s, ds, nh) = (c.summary_len(), c.summary_dim, c.n_heads);
        let dh_ = ds / nh;
        let scale = F::of(1.0 / (dh_ as f64).sqrt());

        mat::mm_at_acc(4 * ds, s, ds, &lc.g, dh, &mut grad[li.fc2_w.clone()]);
        col_sum_acc(dh, ds, &mut grad[li.fc2_b.clone()]);
        let mut dg = vec![F::zero(); s * 4 * ds];
        mat::mm_bt_acc(s, ds, 4 * ds, dh, self.p(&li.fc2_w), &mut dg);
        for (d, &u) in dg.iter_mut().zip(&lc.u) {
            *d *= gelu_grad(u);
        }
        mat::mm_at_acc(ds, s, 4 * ds, &lc.m, &dg, &mut grad[li.fc1_w.clone()]);
        col_sum_acc(&dg, 4 * ds, &mut grad[li.fc1_b.clone()]);
        let mut dm = vec![F::zero(); s * ds];
        mat::mm_bt_acc(s, 4 * ds, ds, &dg, self.p(&li.fc1_w), &mut dm);
        let dx = layer_norm_backward(
            &dm,
            ds,
            &lc.ln2,
            self.p(&li.ln2_g),
            grad,
            &li.ln2_g,
            &li.ln2_b,
        );
        add_into(dh, &dx);

        mat::mm_at_acc(ds, s, ds, &lc.ctx, dh, &mut grad[li.out_w.clone()]);
        col_sum_acc(dh, ds, &mut grad[li.out_b.clone()]);
        let mut dctx = vec![F::zero(); s * ds];
        mat::mm_bt_acc(s, ds, ds, dh, self.p(&li.out_w), &mut dctx);

        let mut dqkv = vec![F::zero(); s * 3 * ds];
        let mut dp = vec![F::zero(); s * s];
        let rs = (3 * ds) as isize;
        for head in 0..nh {
            let p = &lc.probs[head * s * s..(head + 1) * s * s];
            F::gemm(
                s,
                dh_,
                s,
                F::one(),
                &dctx[head * dh_..],
                ds as isize,
                1,
                &lc.qkv[2 * ds + head * dh_..],
                1,
                rs,
                F::zero(),
                &mut dp,
                s as isize,
                1,
            );
            F::gemm(
                s,
                s,
                dh_,
                F::one(),
                p,
                1,
                s as isize,
                &dctx[head * dh_..],
                ds as isize,
                1,
                F::zero(),
                &mut dqkv[2 * ds + head * dh_..],
                rs,
                1,
            );
            for (drow, prow) in dp.chunks_exact_mut(s).zip(p.chunks_exact(s)) {
                let dot: F = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            F::gemm(
                s,
                s,
                dh_,
                scale,
                &dp,
                s as isize,
                1,
                &lc.qkv[ds + head * dh_..],
                rs,
                1,
                F::zero(),
                &mut dqkv[head * dh_..],
                rs,
                1,
            );
            F::gemm(
                s,
                s,
                dh_,
                scale,
                &dp,
                1,
                s as isize,
                &lc.qkv[head * dh_..],
                rs,
                1,
                F::zero(),
                &mut dqkv[ds + head * dh_..],
                rs,
                1,
            );
        }
        mat::mm_at_acc(ds, s, 3 * ds, &lc.a, &dqkv, &mut grad[li.qkv_w.clone()]);
        col_sum_acc(&dqkv, 3 * ds, &mut grad[li.qkv_b.clone()]);
        let mut da = vec![F::zero(); s * ds];
        mat::mm_bt_acc(s, 3 * ds, ds, &dqkv, self.p(&li.qkv_w), &mut da);
        let dx = layer_norm_backward(
            &da,
            ds,
            &lc.ln1,
            self.p(&li.ln1_g),
            grad,
            &li.ln1_g,
            &li.ln1_b,
        );
        add_into(dh, &dx);
    }
}

impl Model<f32> {
    /// Lossless widening for gradient checks.
    pub fn to_f64(&self) -> Model<f64> {
        Model {
            config: self.config.clone(),
            index: self.index.clone(),
            params: self.params.iter().map(|&p| f64::from(p)).collect(),
        }
    }
}

impl Denoiser for Model<f32> {
    fn logits(&self, x_t: &TokenSequence) -> Logits<f32> {
        self.forward(x_t).expect("input validated by caller")
    }

    fn validate(&self, x_t: &TokenSequence) -> Result<(), String> {
        self.check_input(x_t).map_err(|e| e.to_string())
    }
}

/// Activations retained by [`Model::forward_cached`].
#[derive(Debug, Clone)]
pub struct Cache<F> {
    tokens: Vec<Vec<usize>>,
    embeds: Vec<Vec<F>>,
    layers: Vec<LayerCache<F>>,
    lnf: LnCache<F>,
    hf: Vec<F>,
    decoded: Vec<Vec<F>>,
}

#[derive(Debug, Clone)]
struct LayerCache<F> {
    ln1: LnCache<F>,
    a: Vec<F>,
    qkv: Vec<F>,
    probs: Vec<F>,
    ctx: Vec<F>,
    ln2: LnCache<F>,
    m: Vec<F>,
    u: Vec<F>,
    g: Vec<F>,
}

#[derive(Debug, Clone)]
struct LnCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

fn add_bias<F: Scalar>(x: &mut [F], b: &[F]) {
    for row in x.chunks_exact_mut(b.len()) {
        for (v, bv) in row.iter_mut().zip(b) {
            *v += *bv;
        }
    }
}

fn add_into<F: Scalar>(x: &mut [F], y: &[F]) {
    for (a, b) in x.iter_mut().zip(y) {
        *a += *b;
    }
}

/// `acc[j] += Σ_i x[i][j]` for `x` with rows of width `acc.len()`; `x` may span
/// several bias periods, as in the transposed convolution.
fn col_sum_acc<F: Scalar>(x: &[F], width: usize, acc: &mut [F]) {
    debug_assert_eq!(acc.len(), width);
    for row in x.chunks_exact(width) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v;
        }
    }
}

fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut z = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

fn layer_norm<F: Scalar>(x: &[F], d: usize, g: &[F], b: &[F]) -> (Vec<F>, LnCache<F>) {
    let n = x.len() / d;
    let mut y = vec![F::zero(); x.len()];
    let mut xhat = vec![F::zero(); x.len()];
    let mut rstd = vec![F::zero(); n];
    let inv_d = F::of(1.0 / d as f64);
    for i in 0..n {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().copied().sum::<F>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
        let rs = F::one() / (var + F::of(LN_EPS)).sqrt();
        rstd[i] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[i * d + j] = xh;
            y[i * d + j] = xh * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    d: usize,
    cache: &LnCache<F>,
    g: &[F],
    grad: &mut [F],
    g_range: &Range<usize>,
    b_range: &Range<usize>,
) -> Vec<F> {
    let n = dy.len() / d;
    let inv_d = F::of(1.0 / d as f64);
    let mut dx = vec![F::zero(); dy.len()];
    let mut dg = vec![F::zero(); d];
    let mut db = vec![F::zero(); d];
    for i in 0..n {
        let dyr = &dy[i * d..(i + 1) * d];
        let xh = &cache.xhat[i * d..(i + 1) * d];
        let mut mean_dxh = F::zero();
        let mut mean_dxh_xh = F::zero();
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        let rs = cache.rstd[i];
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[i * d + j] = rs * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
    add_into(&mut grad[g_range.clone()], &dg);
    add_into(&mut grad[b_range.clone()], &db);
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

#[inline]
fn gelu<F: Scalar>(u: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (u + F::of(GELU_A) * u * u * u);
    half * u * (F::one() + inner.tanh())
}

#[inline]
fn gelu_grad<F: Scalar>(u: F) -> F {
    let half = F::of(0.5);
    let inner = F::of(GELU_C) * (u + F::of(GELU_A) * u * u * u);
    let th = inner.tanh();
    let dinner = F::of(GELU_C) * (F::one() + F::of(3.0 * GELU_A) * u * u);
    half * (F::one() + th) + half * u * (F::one() - th * th) * dinner
}

/// Adam with `β = (0.9, 0.999)`, no warmup or decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    #[serde(skip)]
    pub m: Vec<f32>,
    #[serde(skip)]
    pub v: Vec<f32>,
}

impl Adam {
    pub fn new(lr: f64, params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; params],
            v: vec![0.0; params],
        }
    }

    pub fn update(&mut self, params: &mut [f32], grad: &[f32]) {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        if self.lr == 0.0 {
            return;
        }
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = (self.lr / bc1) as f32;
        let sqrt_bc2 = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step_size * *m / ((*v).sqrt() / sqrt_bc2 + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(tracks: Vec<TrackKind>) -> DenoiserConfig {
        DenoiserConfig {
            tracks,
            seq_len: 16,
            token_embed_dim: 4,
            summary_dim: 8,
            conv_stride: 4,
            n_layers: 2,
            n_heads: 2,
            learning_rate: 1e-3,
            batch_size: 2,
        }
    }

    #[test]
    fn full_melody_count() {
        assert_eq!(DenoiserConfig::full(Layout::Melody).param_count(), 76_337_498);
    }

    #[test]
    fn tensors_tile_buffer() {
        let c = DenoiserConfig::desk(Layout::Trio);
        let t = c.tensors();
        let mut end = 0;
        for spec in &t {
            assert_eq!(spec.offset, end);
            end += spec.len();
        }
        assert_eq!(end, c.param_count());
    }

    #[test]
    fn config_validation() {
        let mut c = DenoiserConfig::desk(Layout::Melody);
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = DenoiserConfig::desk(Layout::Melody);
        c.seq_len = 30;
        assert!(c.validate().is_err());
    }

    #[test]
    fn logits_shapes_and_rejections() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Model::<f32>::init(tiny(Layout::Trio.kinds()), &mut rng).unwrap();
        let x = TokenSequence::all_masked(Layout::Trio.kinds(), 16, 16);
        let l = m.forward(&x).unwrap();
        assert_eq!(l.vocabs(), &[90, 90, 512]);
        assert_eq!(l.steps(), 16);
        let wrong = TokenSequence::all_masked(Layout::Melody.kinds(), 16, 16);
        assert!(matches!(m.forward(&wrong), Err(ModelError::Shape { .. })));
        let short = TokenSequence::all_masked(Layout::Trio.kinds(), 8, 16);
        assert!(m.forward(&short).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Model::<f32>::init_with_std(tiny(Layout::Melody.kinds()), 0.5, &mut rng).unwrap();
        let vals: Vec<u16> = (0..16).map(|i| (i * 7 % 91) as u16).collect();
        let x = TokenSequence::from_values(Layout::Melody.kinds(), 16, 16, vals).unwrap();
        let l = m.forward(&x).unwrap();
        for s in 0..16 {
            let p = l.probs(s, 0);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert_eq!(m.forward(&x).unwrap(), l);
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::diffusion::{training_loss, training_loss_grad, DiffusionSchedule};
        use crate::mask::MaskPattern;
        use rand::Rng;

        let mut cfg = tiny(vec![TrackKind::Categorical(5), TrackKind::Categorical(3)]);
        cfg.seq_len = 8;
        cfg.n_layers = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut model = Model::<f64>::init_with_std(cfg, 0.4, &mut rng).unwrap();
        let vals: Vec<u16> = (0..16)
            .map(|i| rng.random_range(0..if i % 2 == 0 { 5 } else { 3 }))
            .collect();
        let x0 = TokenSequence::from_values(model.config().tracks.clone(), 8, 4, vals).unwrap();
        let mut mask = MaskPattern::none(8, 2);
        for i in 0..8 {
            mask.set(i, rng.random_range(0..2), true);
        }
        mask.set(3, 0, true);
        mask.set(3, 1, true);
        let xt = mask.apply(&x0).unwrap();
        let sched = DiffusionSchedule::new(16);

        let (logits, cache) = model.forward_cached(&xt).unwrap();
        let (_, dl) = training_loss_grad(&x0, &logits, &mask, 3, &sched, 1.0).unwrap();
        let mut grad = vec![0.0; model.param_count()];
        model.backward(&cache, &dl, &mut grad);

        let n = model.param_count();
        for _ in 0..150 {
            let i = rng.random_range(0..n);
            let orig = model.params()[i];
            let h = 1e-5;
            let mut eval = |v: f64| {
                model.params_mut()[i] = v;
                let l = model.forward(&xt).unwrap();
                training_loss(&x0, &l, &mask, 3, &sched).unwrap().loss
            };
            let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            model.params_mut()[i] = orig;
            let rel = (fd - grad[i]).abs() / (fd.abs() + grad[i].abs()).max(1e-7);
            assert!(rel < 1e-4, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn gelu_derivative() {
        for &u in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(u + h) - gelu(u - h)) / (2.0 * h);
            assert!((fd - gelu_grad(u)).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_zero_lr_is_identity() {
        let mut p = vec![0.3f32, -1.0, 2.0];
        let before = p.clone();
        let mut opt = Adam::new(0.0, 3);
        for _ in 0..5 {
            opt.update(&mut p, &[1.0, -2.0, 0.5]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = vec![1.0f32];
        let mut opt = Adam::new(0.1, 1);
        opt.update(&mut p, &[5.0]);
        assert!((p[0] - 0.9).abs() < 1e-6);
    }
}
