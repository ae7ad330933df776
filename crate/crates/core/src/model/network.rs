use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ClipPooling, EncoderKind, ModelConfig};
use crate::error::{Error, Result};
use crate::features::Spectrogram;
use crate::tensor::{mhsa, Bound, Graph, Init, MhsaParams, NdArray, ParamTree, Real, Var};

/// Parameter-path prefixes owned by the pretrained backbone.
pub const BACKBONE_PREFIXES: [&str; 3] = ["patch_embed.", "pos_embed", "pte."];

pub fn is_backbone_path(path: &str) -> bool {
    BACKBONE_PREFIXES.iter().any(|p| path.starts_with(p))
}

/// Whether the optimizer should apply weight decay to this leaf.
pub fn decays(path: &str) -> bool {
    let mut segments = path.rsplit('.');
    let leaf = segments.next().unwrap_or("");
    let owner = segments.next().unwrap_or("");
    !(leaf == "b" || leaf.starts_with("b_") || owner.starts_with("ln") || path == "pos_embed" || path == "fte.cls")
}

/// A token grid `[F, T, C]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub var: Var,
    pub freq: usize,
    pub time: usize,
    pub dim: usize,
}

/// A sequence `[L, C]` with its temporal resolution.
#[derive(Clone, Copy, Debug)]
pub struct FrameSequence {
    pub var: Var,
    pub len: usize,
    pub seconds_per_step: Real,
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[L, K]` frame probabilities.
    pub frame_probs: Var,
    /// `[K]` clip probabilities.
    pub clip_probs: Var,
    pub seconds_per_step: Real,
}

/// Frame-level and clip-level posteriors for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub frame_probs: NdArray,
    pub clip_probs: NdArray,
    pub seconds_per_step: Real,
}

/// How the encoder stage produces the frame sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameSource {
    /// Whatever `ModelConfig::encoder` says.
    Configured,
    /// A single frequency-patch row of the PTE output (band analysis).
    Row(usize),
}

/// Linear-softmax pooling of one probability column: `sum p^2 / sum p`, or 0.
pub fn linear_softmax_pool(column: &[Real]) -> Real {
    let den: Real = column.iter().sum();
    if den == 0.0 {
        0.0
    } else {
        column.iter().map(|p| p * p).sum::<Real>() / den
    }
}

struct Builder<'a, R: Rng> {
    tree: ParamTree,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn add(&mut self, path: String, shape: &[usize], init: Init) -> Result<()> {
        let v = init.sample(shape, self.rng);
        self.tree.insert(path, v)
    }

    fn linear(&mut self, prefix: &str, din: usize, dout: usize) -> Result<()> {
        self.add(format!("{prefix}.w"), &[din, dout], Init::TruncNormal(0.02))?;
        self.add(format!("{prefix}.b"), &[dout], Init::Zeros)
    }

    fn layer_norm(&mut self, prefix: &str, c: usize) -> Result<()> {
        self.add(format!("{prefix}.g"), &[c], Init::Ones)?;
        self.add(format!("{prefix}.b"), &[c], Init::Zeros)
    }

    fn block(&mut self, prefix: &str, c: usize, hidden: usize) -> Result<()> {
        self.layer_norm(&format!("{prefix}.ln1"), c)?;
        self.linear(&format!("{prefix}.attn.qkv"), c, 3 * c)?;
        self.linear(&format!("{prefix}.attn.out"), c, c)?;
        self.layer_norm(&format!("{prefix}.ln2"), c)?;
        self.linear(&format!("{prefix}.mlp.fc1"), c, hidden)?;
        self.linear(&format!("{prefix}.mlp.fc2"), hidden, c)
    }

    fn gru_direction(&mut self, prefix: &str, din: usize, h: usize) -> Result<()> {
        let bound = 1.0 / (h as Real).sqrt();
        for (name, shape) in [("w_ih", vec![din, 3 * h]), ("w_hh", vec![h, 3 * h]), ("b_ih", vec![3 * h]), ("b_hh", vec![3 * h])] {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
            self.tree.insert(format!("{prefix}.{name}"), NdArray::new(shape, data)?)?;
        }
        Ok(())
    }
}

/// The sound event detection network: patch embedding, patch-wise transformer,
/// frequency-wise encoder (or mean pooling), upsampling Bi-GRU decoder, heads.
#[derive(Clone, Debug)]
pub struct AstSed {
    cfg: ModelConfig,
}

impl AstSed {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AstSed { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Fresh parameters for this configuration.
    pub fn init_params(&self, seed: u64) -> Result<ParamTree> {
        let c = &self.cfg;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { tree: ParamTree::new(), rng: &mut rng };
        let dim = c.embed_dim;
        let hidden = dim * c.mlp_ratio;
        b.linear("patch_embed", c.patch_height * c.patch_width, dim)?;
        b.add("pos_embed".into(), &[c.freq_patches(), c.time_patches(), dim], Init::TruncNormal(0.02))?;
        for i in 0..c.pte_depth {
            b.block(&format!("pte.{i}"), dim, hidden)?;
        }
        if c.encoder == EncoderKind::Fte {
            b.add("fte.cls".into(), &[dim], Init::TruncNormal(0.02))?;
            for i in 0..c.fte_depth {
                b.block(&format!("fte.{i}"), dim, hidden)?;
            }
        }
        b.gru_direction("gru.fwd", dim, c.gru_hidden)?;
        b.gru_direction("gru.bwd", dim, c.gru_hidden)?;
        b.linear("head", 2 * c.gru_hidden, c.num_classes)?;
        Ok(b.tree)
    }

    /// Parameters for clip-level tagging pretraining: backbone plus a tagging head.
    pub fn init_tagging_params(&self, seed: u64) -> Result<ParamTree> {
        let full = self.init_params(seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a67);
        let mut b = Builder { tree: ParamTree::new(), rng: &mut rng };
        for (p, v) in full.iter().filter(|(p, _)| is_backbone_path(p)) {
            b.tree.insert(p, v.clone())?;
        }
        b.linear("tag_head", self.cfg.embed_dim, self.cfg.num_classes)?;
        Ok(b.tree)
    }

    /// Flattened patches `[F * T, ph * pw]` of a `[M, T_in]` spectrogram.
    pub fn extract_patches(&self, spec: &NdArray) -> Result<NdArray> {
        let c = &self.cfg;
        let (m, t_in) = (spec.shape()[0], spec.shape()[1]);
        if spec.ndim() != 2 || m < c.patch_height || t_in + 2 * c.time_pad < c.patch_width {
            return Err(Error::Input(format!(
                "spectrogram {:?} is smaller than one {}x{} patch",
                spec.shape(),
                c.patch_height,
                c.patch_width
            )));
        }
        if m != c.mel_bins || t_in != c.frames {
            return Err(Error::Input(format!(
                "spectrogram {:?} does not match the configured {}x{} input",
                spec.shape(),
                c.mel_bins,
                c.frames
            )));
        }
        let (f, t) = (c.freq_patches(), c.time_patches());
        let psize = c.patch_height * c.patch_width;
        let mut out = Vec::with_capacity(f * t * psize);
        for fi in 0..f {
            for ti in 0..t {
                for r in 0..c.patch_height {
                    let row = &spec.data()[(fi * c.stride_freq + r) * t_in..][..t_in];
                    let first = ti * c.stride_time;
                    for j in first..first + c.patch_width {
                        // Padded columns read as zero, the per-clip mean.
                        out.push(j.checked_sub(c.time_pad).and_then(|k| row.get(k)).copied().unwrap_or(0.0));
                    }
                }
            }
        }
        NdArray::new(vec![f * t, psize], out)
    }

    /// Patch tokens plus positional embeddings, `[F, T, C]`.
    pub fn patch_embed(&self, g: &mut Graph, p: &Bound, spec: &NdArray) -> Result<TokenGrid> {
        let c = &self.cfg;
        let patches = self.extract_patches(spec)?;
        let x = g.constant(patches);
        let tokens = g.linear(x, p.get("patch_embed.w")?, p.get("patch_embed.b")?)?;
        let (f, t) = (c.freq_patches(), c.time_patches());
        let tokens = g.reshape(tokens, &[f, t, c.embed_dim])?;
        let var = g.add(tokens, p.get("pos_embed")?)?;
        Ok(TokenGrid { var, freq: f, time: t, dim: c.embed_dim })
    }

    fn mlp(&self, g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let h = g.linear(x, p.get(&format!("{prefix}.mlp.fc1.w"))?, p.get(&format!("{prefix}.mlp.fc1.b"))?)?;
        let h = g.gelu(h);
        g.linear(h, p.get(&format!("{prefix}.mlp.fc2.w"))?, p.get(&format!("{prefix}.mlp.fc2.b"))?)
    }

    fn ln(&self, g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
        g.layer_norm(x, p.get(&format!("{prefix}.g"))?, p.get(&format!("{prefix}.b"))?, self.cfg.ln_eps)
    }

    fn attn(&self, g: &mut Graph, p: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
        let params = MhsaParams {
            qkv_w: p.get(&format!("{prefix}.attn.qkv.w"))?,
            qkv_b: p.get(&format!("{prefix}.attn.qkv.b"))?,
            out_w: p.get(&format!("{prefix}.attn.out.w"))?,
            out_b: p.get(&format!("{prefix}.attn.out.b"))?,
        };
        mhsa(g, x, heads, &params)
    }

    /// Pre-norm patch-wise transformer over all `F * T` tokens.
    pub fn pte_forward(&self, g: &mut Graph, p: &Bound, pi: TokenGrid) -> Result<TokenGrid> {
        let n = pi.freq * pi.time;
        let mut x = g.reshape(pi.var, &[n, pi.dim])?;
        for i in 0..self.cfg.pte_depth {
            let prefix = format!("pte.{i}");
            let h = self.ln(g, p, &format!("{prefix}.ln1"), x)?;
            let h = self.attn(g, p, &prefix, h, self.cfg.pte_heads)?;
            x = g.add(x, h)?;
            let h = self.ln(g, p, &format!("{prefix}.ln2"), x)?;
            let h = self.mlp(g, p, &prefix, h)?;
            x = g.add(x, h)?;
        }
        let var = g.reshape(x, &[pi.freq, pi.time, pi.dim])?;
        Ok(TokenGrid { var, ..pi })
    }

    fn sequence(&self, var: Var, len: usize) -> FrameSequence {
        FrameSequence { var, len, seconds_per_step: self.cfg.clip_duration / len as Real }
    }

    /// Average over frequency rows: `[F, T, C] -> [T, C]`.
    pub fn mean_pool_frequency(&self, g: &mut Graph, po: TokenGrid) -> FrameSequence {
        let var = g.mean_axis0(po.var);
        self.sequence(var, po.time)
    }

    /// One frequency row of the grid: `[F, T, C] -> [T, C]`.
    pub fn frequency_row(&self, g: &mut Graph, po: TokenGrid, row: usize) -> Result<FrameSequence> {
        if row >= po.freq {
            return Err(Error::Config(format!("frequency row {row} out of range for {} rows", po.freq)));
        }
        let r = g.slice_axis0(po.var, row, 1)?;
        let var = g.reshape(r, &[po.time, po.dim])?;
        Ok(self.sequence(var, po.time))
    }

    /// Frequency-wise transformer encoder.
    ///
    /// A CLS row is prepended along frequency, giving `[(F + 1), T, C]`;
    /// attention then runs inside each time column only, and the CLS row of
    /// the output is the frame sequence.
    pub fn fte_forward(&self, g: &mut Graph, p: &Bound, po: TokenGrid) -> Result<FrameSequence> {
        let (f, t, c) = (po.freq, po.time, po.dim);
        let cls = p.get("fte.cls")?;
        let cls = g.reshape(cls, &[1, c])?;
        let cls_row = g.gather_rows(cls, &vec![0; t])?;
        let cls_row = g.reshape(cls_row, &[1, t, c])?;
        let fi = g.concat0(&[cls_row, po.var])?;
        // [T, F + 1, C]: each time column becomes an independent sequence
        let mut x = g.permute(fi, &[1, 0, 2])?;
        for i in 0..self.cfg.fte_depth {
            let prefix = format!("fte.{i}");
            let h = self.attn(g, p, &prefix, x, self.cfg.fte_heads)?;
            let h = g.add(h, x)?;
            x = self.ln(g, p, &format!("{prefix}.ln1"), h)?;
            let h = self.mlp(g, p, &prefix, x)?;
            let h = g.add(h, x)?;
            x = self.ln(g, p, &format!("{prefix}.ln2"), h)?;
        }
        let flat = g.reshape(x, &[t * (f + 1), c])?;
        let rows: Vec<usize> = (0..t).map(|ti| ti * (f + 1)).collect();
        let var = g.gather_rows(flat, &rows)?;
        Ok(self.sequence(var, t))
    }

    /// Nearest-neighbour upsampling: every step repeated `n` times.
    pub fn nni(&self, g: &mut Graph, seq: FrameSequence, n: usize) -> Result<FrameSequence> {
        if n == 0 {
            return Err(Error::Config("upsampling ratio must be at least 1".into()));
        }
        if n == 1 {
            return Ok(seq);
        }
        let index: Vec<usize> = (0..seq.len * n).map(|i| i / n).collect();
        let var = g.gather_rows(seq.var, &index)?;
        Ok(FrameSequence { var, len: seq.len * n, seconds_per_step: seq.seconds_per_step / n as Real })
    }

    fn gru_direction(&self, g: &mut Graph, p: &Bound, prefix: &str, seq: Var, len: usize) -> Result<Var> {
        let h = self.cfg.gru_hidden;
        let w_hh = p.get(&format!("{prefix}.w_hh"))?;
        let b_hh = p.get(&format!("{prefix}.b_hh"))?;
        let gx = g.linear(seq, p.get(&format!("{prefix}.w_ih"))?, p.get(&format!("{prefix}.b_ih"))?)?;
        let mut state = g.constant(NdArray::zeros(&[1, h]));
        let mut outputs = Vec::with_capacity(len);
        for step in 0..len {
            let gx_t = g.slice_axis0(gx, step, 1)?;
            let gh = g.linear(state, w_hh, b_hh)?;
            let gx_rz = g.slice_last(gx_t, 0, 2 * h)?;
            let gh_rz = g.slice_last(gh, 0, 2 * h)?;
            let rz = g.add(gx_rz, gh_rz)?;
            let rz = g.sigmoid(rz);
            let r = g.slice_last(rz, 0, h)?;
            let z = g.slice_last(rz, h, h)?;
            let gx_n = g.slice_last(gx_t, 2 * h, h)?;
            let gh_n = g.slice_last(gh, 2 * h, h)?;
            let gated = g.mul(r, gh_n)?;
            let cand = g.add(gx_n, gated)?;
            let cand = g.tanh(cand);
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = g.sub(state, cand)?;
            let keep = g.mul(z, diff)?;
            state = g.add(cand, keep)?;
            outputs.push(state);
        }
        g.concat0(&outputs)
    }

    /// Bidirectional GRU, `[L, C] -> [L, 2H]` (forward half first).
    pub fn bigru_forward(&self, g: &mut Graph, p: &Bound, seq: FrameSequence) -> Result<FrameSequence> {
        let fwd = self.gru_direction(g, p, "gru.fwd", seq.var, seq.len)?;
        let reversed: Vec<usize> = (0..seq.len).rev().collect();
        let rev_in = g.gather_rows(seq.var, &reversed)?;
        let bwd = self.gru_direction(g, p, "gru.bwd", rev_in, seq.len)?;
        let bwd = g.gather_rows(bwd, &reversed)?;
        let var = g.concat_last(&[fwd, bwd])?;
        Ok(FrameSequence { var, ..seq })
    }

    /// Frame sigmoid classifier and pooled clip probabilities.
    pub fn heads(&self, g: &mut Graph, p: &Bound, o: FrameSequence) -> Result<ForwardOutput> {
        let logits = g.linear(o.var, p.get("head.w")?, p.get("head.b")?)?;
        let frame_probs = g.sigmoid(logits);
        let clip_probs = self.pool_clip(g, frame_probs)?;
        Ok(ForwardOutput { frame_probs, clip_probs, seconds_per_step: o.seconds_per_step })
    }

    fn pool_clip(&self, g: &mut Graph, frame_probs: Var) -> Result<Var> {
        Ok(match self.cfg.clip_pooling {
            ClipPooling::Max => g.max_axis0(frame_probs),
            ClipPooling::Mean => g.mean_axis0(frame_probs),
            ClipPooling::LinearSoftmax => {
                let sq = g.mul(frame_probs, frame_probs)?;
                let num = g.mean_axis0(sq);
                let den = g.mean_axis0(frame_probs);
                g.div(num, den)?
            }
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, spec: &NdArray) -> Result<ForwardOutput> {
        self.forward_with(g, p, spec, FrameSource::Configured)
    }

    pub fn forward_with(&self, g: &mut Graph, p: &Bound, spec: &NdArray, source: FrameSource) -> Result<ForwardOutput> {
        let pi = self.patch_embed(g, p, spec)?;
        let po = self.pte_forward(g, p, pi)?;
        let frames = match (source, self.cfg.encoder) {
            (FrameSource::Row(r), _) => self.frequency_row(g, po, r)?,
            (FrameSource::Configured, EncoderKind::MeanPool) => self.mean_pool_frequency(g, po),
            (FrameSource::Configured, EncoderKind::Fte) => self.fte_forward(g, p, po)?,
        };
        let up = self.nni(g, frames, self.cfg.upsample_ratio)?;
        let o = self.bigru_forward(g, p, up)?;
        self.heads(g, p, o)
    }

    /// Clip-level tagging used for backbone pretraining: frequency mean
    /// pooling, a per-frame sigmoid classifier, then clip pooling.
    pub fn tagging_forward(&self, g: &mut Graph, p: &Bound, spec: &NdArray) -> Result<Var> {
        let pi = self.patch_embed(g, p, spec)?;
        let po = self.pte_forward(g, p, pi)?;
        let frames = self.mean_pool_frequency(g, po);
        let logits = g.linear(frames.var, p.get("tag_head.w")?, p.get("tag_head.b")?)?;
        let probs = g.sigmoid(logits);
        self.pool_clip(g, probs)
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, params: &ParamTree, spec: &Spectrogram) -> Result<Predictions> {
        self.predict_with(params, &spec.values, FrameSource::Configured)
    }

    pub fn predict_with(&self, params: &ParamTree, spec: &NdArray, source: FrameSource) -> Result<Predictions> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let out = self.forward_with(&mut g, &bound, spec, source)?;
        Ok(Predictions {
            frame_probs: g.value(out.frame_probs).clone(),
            clip_probs: g.value(out.clip_probs).clone(),
            seconds_per_step: out.seconds_per_step,
        })
    }

    pub fn predict_tags(&self, params: &ParamTree, spec: &NdArray) -> Result<NdArray> {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let out = self.tagging_forward(&mut g, &bound, spec)?;
        Ok(g.value(out).clone())
    }
}
