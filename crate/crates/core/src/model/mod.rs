//! Miniature multimodal diffusion transformer over waveform tokens.
//!
//! Audio tokens, visual frames and a single text token share joint attention
//! blocks; audio then continues alone through fused blocks. Every block is
//! modulated by AdaLN: audio rows by `c_e`, visual and text rows by `c_g`.

mod checkpoint;
mod params;
mod rope;

pub use checkpoint::{
    checkpoint_digest, decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint,
    Checkpoint, CHECKPOINT_VERSION,
};
pub use params::ParamStore;
pub use rope::{rope_rate_ratio, rope_rotate, visual_rope_positions};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{assemble_conditions, ConditionBundle, ConditioningConfig};
use crate::error::{Error, Result};
use crate::flow::{FlowModel, Prediction};
use crate::numerics::{Tape, Tensor, Var};
use params::Init;

const LN_EPS: f64 = 1e-6;
const INPUT_KERNEL: usize = 3;
const OUTPUT_KERNEL: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredMode {
    XPred,
    VPred,
}

impl std::str::FromStr for PredMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x_pred" => Ok(Self::XPred),
            "v_pred" => Ok(Self::VPred),
            other => Err(Error::Config(format!("unknown prediction mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub l_joint: usize,
    pub l_fused: usize,
    /// Samples per token (`D`).
    pub patch: usize,
    pub pred_mode: PredMode,
    pub rope_base: f64,
    pub mlp_ratio: usize,
    /// Apply RoPE inside the audio-only blocks as well.
    pub fused_rope: bool,
    pub cond: ConditioningConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            heads: 4,
            l_joint: 1,
            l_fused: 2,
            patch: 8,
            pred_mode: PredMode::XPred,
            rope_base: 10000.0,
            mlp_ratio: 4,
            fused_rope: true,
            cond: ConditioningConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad(format!("d = {} must be a positive multiple of heads = {}", self.d, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return bad(format!("head dim {} must be even", self.head_dim()));
        }
        if self.l_joint == 0 || self.l_fused == 0 {
            return bad("need at least one joint and one fused block".into());
        }
        if self.patch == 0 || self.mlp_ratio == 0 {
            return bad("patch and mlp_ratio must be positive".into());
        }
        if !(self.rope_base > 1.0) {
            return bad(format!("rope_base {} must exceed 1", self.rope_base));
        }
        self.cond.validate()
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvInput {
    lin: Linear,
    conv_w: usize,
    conv_b: usize,
}

#[derive(Debug, Clone, Copy)]
struct PostAttention {
    out: Linear,
    mlp1: Linear,
    mlp2: Linear,
}

/// Per-stream weights of one transformer block. The visual and text streams of
/// the last joint block feed nothing downstream, so they stop after producing
/// keys and values and carry no post-attention weights.
#[derive(Debug, Clone, Copy)]
struct StreamBlock {
    adaln: Linear,
    qkv: Linear,
    post: Option<PostAttention>,
}

#[derive(Debug, Clone, Copy)]
struct JointBlock {
    audio: StreamBlock,
    visual: StreamBlock,
    text: StreamBlock,
}

#[derive(Debug, Clone)]
struct Layout {
    audio_in: ConvInput,
    visual_in: ConvInput,
    text_proj: Linear,
    sync_proj: Linear,
    sync_pos: usize,
    null_visual: usize,
    null_sync: usize,
    null_text: usize,
    t_mlp1: Linear,
    t_mlp2: Linear,
    joint: Vec<JointBlock>,
    fused: Vec<StreamBlock>,
    out_adaln: Linear,
    out_conv_w: usize,
    out_conv_b: usize,
}

// Modulation chunk order: shift, scale, gate for attention, then for the MLP.
const FULL_GATES: &[usize] = &[2, 5];

fn build_layout(cfg: &ModelConfig, alloc: &mut dyn FnMut(String, Vec<usize>, Init) -> Result<usize>) -> Result<Layout> {
    let d = cfg.d;
    let c = &cfg.cond;
    let glorot = |fan_in: usize| Init::Normal(1.0 / (fan_in as f64).sqrt());

    let mut linear = |name: &str, fan_in: usize, fan_out: usize, init: Init| -> Result<Linear> {
        Ok(Linear {
            w: alloc(format!("{name}.w"), vec![fan_in, fan_out], init)?,
            b: alloc(format!("{name}.b"), vec![fan_out], Init::Zeros)?,
        })
    };

    let audio_lin = linear("audio_in.lin", cfg.patch, d, glorot(cfg.patch))?;
    let visual_lin = linear("visual_in.lin", c.d_visual, d, glorot(c.d_visual))?;
    let text_proj = linear("text_proj", c.d_text, d, glorot(c.d_text))?;
    let sync_proj = linear("sync_proj", c.d_sync, d, glorot(c.d_sync))?;
    let t_mlp1 = linear("t_embed.mlp1", d, d, glorot(d))?;
    let t_mlp2 = linear("t_embed.mlp2", d, d, glorot(d))?;

    let mut stream = |prefix: String, post: bool| -> Result<StreamBlock> {
        let chunks = if post { 6 } else { 2 };
        let gates: &'static [usize] = if post { FULL_GATES } else { &[] };
        let adaln = linear(&format!("{prefix}.adaln"), d, chunks * d, Init::AdaLn { d, gates })?;
        let qkv = linear(&format!("{prefix}.qkv"), d, 3 * d, glorot(d))?;
        let post = if post {
            let hidden = cfg.mlp_ratio * d;
            Some(PostAttention {
                out: linear(&format!("{prefix}.out"), d, d, glorot(d))?,
                mlp1: linear(&format!("{prefix}.mlp1"), d, hidden, glorot(d))?,
                mlp2: linear(&format!("{prefix}.mlp2"), hidden, d, glorot(hidden))?,
            })
        } else {
            None
        };
        Ok(StreamBlock { adaln, qkv, post })
    };

    let mut joint = Vec::with_capacity(cfg.l_joint);
    for i in 0..cfg.l_joint {
        let last = i + 1 == cfg.l_joint;
        joint.push(JointBlock {
            audio: stream(format!("joint{i}.audio"), true)?,
            visual: stream(format!("joint{i}.visual"), !last)?,
            text: stream(format!("joint{i}.text"), !last)?,
        });
    }
    let fused = (0..cfg.l_fused)
        .map(|i| stream(format!("fused{i}"), true))
        .collect::<Result<Vec<_>>>()?;
    let out_adaln = linear("out.adaln", d, 2 * d, glorot(d))?;

    let conv_std = |cin: usize, k: usize| Init::Normal(1.0 / ((cin * k) as f64).sqrt());
    let audio_in = ConvInput {
        lin: audio_lin,
        conv_w: alloc("audio_in.conv.w".into(), vec![INPUT_KERNEL, d, d], conv_std(d, INPUT_KERNEL))?,
        conv_b: alloc("audio_in.conv.b".into(), vec![d], Init::Zeros)?,
    };
    let visual_in = ConvInput {
        lin: visual_lin,
        conv_w: alloc("visual_in.conv.w".into(), vec![INPUT_KERNEL, d, d], conv_std(d, INPUT_KERNEL))?,
        conv_b: alloc("visual_in.conv.b".into(), vec![d], Init::Zeros)?,
    };
    Ok(Layout {
        audio_in,
        visual_in,
        text_proj,
        sync_proj,
        sync_pos: alloc("sync_pos".into(), vec![c.n_sync, d], Init::Normal(0.02))?,
        null_visual: alloc("null.visual".into(), vec![1, c.d_visual], Init::Zeros)?,
        null_sync: alloc("null.sync".into(), vec![1, c.d_sync], Init::Zeros)?,
        null_text: alloc("null.text".into(), vec![1, c.d_text], Init::Zeros)?,
        t_mlp1,
        t_mlp2,
        joint,
        fused,
        out_adaln,
        out_conv_w: alloc(
            "out.conv.w".into(),
            vec![OUTPUT_KERNEL, d, cfg.patch],
            conv_std(d, OUTPUT_KERNEL),
        )?,
        out_conv_b: alloc("out.conv.b".into(), vec![cfg.patch], Init::Zeros)?,
    })
}

/// Sinusoidal timestep features of width `d` (cosines then sines).
pub fn timestep_features(t: f64, d: usize) -> Tensor {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
        let arg = 1000.0 * t * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    Tensor::new(&[1, d], out).expect("width matches")
}

#[derive(Debug, Clone)]
pub struct Mmdit {
    cfg: ModelConfig,
    layout: Layout,
    params: ParamStore,
}

/// Intermediate handles from a forward pass, exposed for tests and diagnostics.
#[derive(Debug, Clone, Copy)]
pub struct ForwardTrace {
    pub output: Var,
    pub audio_in: Var,
    pub c_g: Var,
    pub c_e: Var,
}

impl Mmdit {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let layout = build_layout(&cfg, &mut |name, shape, init| {
            names.push(name);
            tensors.push(init.fill(&shape, &mut rng));
            Ok(tensors.len() - 1)
        })?;
        Ok(Self {
            cfg,
            layout,
            params: ParamStore::from_parts(names, tensors),
        })
    }

    /// Rebuilds a model from stored tensors, which must match the config's layout exactly.
    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut next = 0;
        let layout = build_layout(&cfg, &mut |name, shape, _| {
            let (have_name, have) = params
                .iter()
                .nth(next)
                .ok_or_else(|| Error::Version(format!("missing parameter `{name}`")))?;
            if have_name != name || have.shape() != shape.as_slice() {
                return Err(Error::Version(format!(
                    "parameter {next}: expected `{name}` {shape:?}, found `{have_name}` {:?}",
                    have.shape()
                )));
            }
            next += 1;
            Ok(next - 1)
        })?;
        if next != params.len() {
            return Err(Error::Version(format!(
                "{} stored parameters, layout uses {next}",
                params.len()
            )));
        }
        params.check_finite()?;
        Ok(Self { cfg, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Registers every parameter as a leaf, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.tensors().iter().map(|t| tape.leaf(t.clone())).collect()
    }

    /// Prediction for a `C×D` noisy token grid.
    pub fn forward(&self, x_t: &Tensor, bundle: &ConditionBundle, t: f64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let x = tape.leaf(x_t.clone());
        let out = self.forward_on(&mut tape, &vars, x, bundle, t)?;
        Ok(tape.value(out.output).clone())
    }

    /// Builds the forward graph on `tape`, with parameters already bound to `vars`.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x_t: Var,
        bundle: &ConditionBundle,
        t: f64,
    ) -> Result<ForwardTrace> {
        let cfg = &self.cfg;
        let cc = &cfg.cond;
        let lay = &self.layout;
        let (tokens, patch) = tape.value(x_t).dims2();
        if tape.value(x_t).shape().len() != 2 || patch != cfg.patch || tokens == 0 {
            return Err(Error::shape(format!(
                "expected C×{} tokens, got {:?}",
                cfg.patch,
                tape.value(x_t).shape()
            )));
        }
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Range(format!("t = {t} outside [0, 1]")));
        }

        // Condition streams, with learned nulls in place of dropped features.
        let visual_raw = if bundle.visual_null {
            tape.gather_rows(vars[lay.null_visual], &vec![0; cc.n_clip])?
        } else {
            expect_shape(&bundle.visual, cc.n_clip, cc.d_visual, "visual features")?;
            tape.leaf(bundle.visual.clone())
        };
        let sync_raw = if bundle.visual_null {
            tape.gather_rows(vars[lay.null_sync], &vec![0; cc.n_sync])?
        } else {
            expect_shape(&bundle.sync, cc.n_sync, cc.d_sync, "sync features")?;
            tape.leaf(bundle.sync.clone())
        };
        let text_raw = if bundle.text_null {
            vars[lay.null_text]
        } else {
            expect_shape(&bundle.text, 1, cc.d_text, "text embedding")?;
            tape.leaf(bundle.text.clone())
        };

        let audio = conv_input(tape, vars, &lay.audio_in, x_t)?;
        let visual = conv_input(tape, vars, &lay.visual_in, visual_raw)?;
        let text = linear(tape, vars, lay.text_proj, text_raw)?;
        let sync = linear(tape, vars, lay.sync_proj, sync_raw)?;
        let sync = tape.add(sync, vars[lay.sync_pos])?;

        let feats = tape.leaf(timestep_features(t, cfg.d));
        let t_emb = linear(tape, vars, lay.t_mlp1, feats)?;
        let t_emb = tape.silu(t_emb);
        let t_emb = linear(tape, vars, lay.t_mlp2, t_emb)?;

        let conds = assemble_conditions(tape, visual, text, sync, t_emb, tokens)?;
        let cg_act = tape.silu(conds.c_g);
        let ce_act = tape.silu(conds.c_e);

        let audio_pos = rope::audio_positions(tokens);
        let visual_pos = rope::visual_positions(tokens, cc.n_clip);
        let ctx = BlockCtx {
            vars,
            d: cfg.d,
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
            base: cfg.rope_base,
        };

        let (mut h_a, mut h_v, mut h_t) = (audio, visual, text);
        for block in &lay.joint {
            let streams = [
                Stream { h: h_a, block: &block.audio, cond: ce_act, positions: Some(&audio_pos) },
                Stream { h: h_v, block: &block.visual, cond: cg_act, positions: Some(&visual_pos) },
                Stream { h: h_t, block: &block.text, cond: cg_act, positions: None },
            ];
            let out = ctx.run(tape, &streams)?;
            (h_a, h_v, h_t) = (out[0], out[1], out[2]);
        }
        let fused_pos = cfg.fused_rope.then_some(audio_pos.as_slice());
        for block in &lay.fused {
            let stream = Stream { h: h_a, block, cond: ce_act, positions: fused_pos };
            h_a = ctx.run(tape, &[stream])?[0];
        }

        let m = linear(tape, vars, lay.out_adaln, ce_act)?;
        let shift = tape.slice_cols(m, 0..cfg.d)?;
        let scale = tape.slice_cols(m, cfg.d..2 * cfg.d)?;
        let y = tape.layernorm(h_a, LN_EPS);
        let y = modulate(tape, y, shift, scale)?;
        let y = tape.conv1d(y, vars[lay.out_conv_w])?;
        let output = tape.add_bias(y, vars[lay.out_conv_b])?;

        if !tape.value(output).is_finite() {
            return Err(Error::Numeric("non-finite model output".into()));
        }
        Ok(ForwardTrace {
            output,
            audio_in: audio,
            c_g: conds.c_g,
            c_e: conds.c_e,
        })
    }

    /// Wraps a raw network output according to the prediction mode.
    pub fn as_prediction(&self, out: Tensor) -> Prediction {
        match self.cfg.pred_mode {
            PredMode::XPred => Prediction::Clean(out),
            PredMode::VPred => Prediction::Velocity(out),
        }
    }
}

impl FlowModel for Mmdit {
    type Cond = ConditionBundle;

    fn predict(&self, x_t: &Tensor, t: f64, cond: &ConditionBundle) -> Result<Prediction> {
        Ok(self.as_prediction(self.forward(x_t, cond, t)?))
    }
}

fn expect_shape(t: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
    if t.shape() != [rows, cols] {
        return Err(Error::shape(format!(
            "{what}: expected {rows}×{cols}, got {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn linear(tape: &mut Tape, vars: &[Var], l: Linear, x: Var) -> Result<Var> {
    let y = tape.matmul(x, vars[l.w])?;
    tape.add_bias(y, vars[l.b])
}

/// Linear lift, SiLU, then a kernel-3 convolution along the sequence.
fn conv_input(tape: &mut Tape, vars: &[Var], c: &ConvInput, x: Var) -> Result<Var> {
    let h = linear(tape, vars, c.lin, x)?;
    let h = tape.silu(h);
    let h = tape.conv1d(h, vars[c.conv_w])?;
    tape.add_bias(h, vars[c.conv_b])
}

/// `x ⊙ (1 + scale) + shift`
fn modulate(tape: &mut Tape, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s = tape.add_scalar(scale, 1.0);
    let y = tape.mul(x, s)?;
    tape.add(y, shift)
}

/// Shift, scale and gate rows for one modulated sub-block.
#[derive(Debug, Clone, Copy)]
pub struct Modulation {
    pub shift: Var,
    pub scale: Var,
    pub gate: Var,
}

/// `gate ⊙ (scale' ⊙ layernorm(h) + shift)` with `scale' = 1 + scale`; the caller
/// adds the result of the wrapped sub-block back onto `h`. Applied to `h`
/// directly when `branch` is `None`.
pub fn adaln_modulate(
    tape: &mut Tape,
    h: Var,
    m: Modulation,
    branch: Option<&mut dyn FnMut(&mut Tape, Var) -> Result<Var>>,
) -> Result<Var> {
    let rows = tape.value(h).rows();
    let broadcast = |tape: &mut Tape, v: Var| -> Result<Var> {
        match tape.value(v).rows() {
            r if r == rows => Ok(v),
            1 => tape.gather_rows(v, &vec![0; rows]),
            r => Err(Error::shape(format!("modulation with {r} rows for {rows} tokens"))),
        }
    };
    let shift = broadcast(tape, m.shift)?;
    let scale = broadcast(tape, m.scale)?;
    let gate = broadcast(tape, m.gate)?;
    let y = tape.layernorm(h, LN_EPS);
    let y = modulate(tape, y, shift, scale)?;
    let y = match branch {
        Some(f) => f(tape, y)?,
        None => y,
    };
    tape.mul(gate, y)
}

struct Stream<'a> {
    h: Var,
    block: &'a StreamBlock,
    cond: Var,
    positions: Option<&'a [f64]>,
}

struct BlockCtx<'a> {
    vars: &'a [Var],
    d: usize,
    heads: usize,
    head_dim: usize,
    base: f64,
}

impl BlockCtx<'_> {
    /// One transformer block over the concatenation of `streams`. Streams without
    /// post-attention weights only contribute keys and values; their input is
    /// returned unchanged.
    fn run(&self, tape: &mut Tape, streams: &[Stream]) -> Result<Vec<Var>> {
        let d = self.d;
        let mut mods = Vec::with_capacity(streams.len());
        let (mut qs, mut ks, mut vs, mut lens) = (vec![], vec![], vec![], vec![]);
        for s in streams {
            let rows = tape.value(s.h).rows();
            let m = linear(tape, self.vars, s.block.adaln, s.cond)?;
            let m = if tape.value(m).rows() == rows {
                m
            } else {
                tape.gather_rows(m, &vec![0; rows])?
            };
            let chunk = |tape: &mut Tape, i: usize| tape.slice_cols(m, i * d..(i + 1) * d);
            let pre = tape.layernorm(s.h, LN_EPS);
            let (shift, scale) = (chunk(tape, 0)?, chunk(tape, 1)?);
            let pre = modulate(tape, pre, shift, scale)?;
            let qkv = linear(tape, self.vars, s.block.qkv, pre)?;
            let mut q = tape.slice_cols(qkv, 0..d)?;
            let mut k = tape.slice_cols(qkv, d..2 * d)?;
            let v = tape.slice_cols(qkv, 2 * d..3 * d)?;
            if let Some(pos) = s.positions {
                q = tape.rope(q, pos, self.head_dim, self.base)?;
                k = tape.rope(k, pos, self.head_dim, self.base)?;
            }
            qs.push(q);
            ks.push(k);
            vs.push(v);
            lens.push(rows);
            mods.push(m);
        }
        let cat = |tape: &mut Tape, parts: &[Var]| {
            if parts.len() == 1 {
                Ok(parts[0])
            } else {
                tape.concat_rows(parts)
            }
        };
        let (q, k, v) = (cat(tape, &qs)?, cat(tape, &ks)?, cat(tape, &vs)?);
        let attn = tape.attention(q, k, v, self.heads)?;

        let mut out = Vec::with_capacity(streams.len());
        let mut start = 0;
        for ((s, &rows), &m) in streams.iter().zip(&lens).zip(&mods) {
            let range = start..start + rows;
            start += rows;
            let Some(post) = s.block.post else {
                out.push(s.h);
                continue;
            };
            let chunk = |tape: &mut Tape, i: usize| tape.slice_cols(m, i * d..(i + 1) * d);
            let a = if streams.len() == 1 { attn } else { tape.slice_rows(attn, range)? };
            let a = linear(tape, self.vars, post.out, a)?;
            let gate = chunk(tape, 2)?;
            let a = tape.mul(gate, a)?;
            let h = tape.add(s.h, a)?;

            let modn = Modulation {
                shift: chunk(tape, 3)?,
                scale: chunk(tape, 4)?,
                gate: chunk(tape, 5)?,
            };
            let vars = self.vars;
            let mut mlp = |tape: &mut Tape, x: Var| -> Result<Var> {
                let x = linear(tape, vars, post.mlp1, x)?;
                let x = tape.gelu(x);
                linear(tape, vars, post.mlp2, x)
            };
            let branch = adaln_modulate(tape, h, modn, Some(&mut mlp))?;
            out.push(tape.add(h, branch)?);
        }
        Ok(out)
    }
}
