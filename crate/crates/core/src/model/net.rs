//! The dual-stream denoiser.
//!
//! Per block `l`, for each stream: modulated self-attention with rotary
//! positions (3D for video, 1D for audio), then one bidirectional cross-modal
//! exchange (video queries read audio and vice versa, no positions), then a
//! modulated MLP. Modulation `(shift, scale, gate)` comes from a conditioning
//! vector built from the timestep and the text codes and starts at identity.
//!
//! The head emits `v̂` on target rows and returns
//! `ε̂ = √(1−ᾱ)·z_t + √ᾱ·v̂`, an ε prediction that stays well conditioned at
//! both ends of the schedule.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::config::{ModelConfig, NullReference, RefAttention};
use super::lora::{AdapterSet, LoraAdapter};
use super::sequence::{Conditioning, JointInput};
use crate::error::{Error, Result};
use crate::numerics::{random_orthogonal, AttnMask, Scalar, Tape, Tensor, Var};
use crate::positional::{PositionScheme, RopeTable};

/// Modulation chunks per block.
const MOD_CHUNKS: usize = 7;
const LN_EPS: f64 = 1e-5;
pub const STREAMS: [&str; 2] = ["video", "audio"];
const PROJ: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Video block whose self-attention is bypassed (residual only).
    pub skip_block: Option<usize>,
    /// `false` disables every cross-modal exchange.
    pub cross_modal: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            skip_block: None,
            cross_modal: true,
        }
    }
}

/// ε predictions for the target video and target audio tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub video: Tensor,
    pub audio: Tensor,
}

/// Anything that maps a noisy joint input to ε predictions.
pub trait Denoiser: Sync {
    /// Layout the inputs must follow (grid, lengths, positions, schedule).
    fn config(&self) -> &ModelConfig;
    fn denoise(&self, joint: &JointInput, cond: &Conditioning, opts: &ForwardOptions) -> Result<Prediction>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Frozen backbone weights.
    pub base: BTreeMap<String, Tensor>,
    /// Trainable conditioning pathway.
    pub cond: BTreeMap<String, Tensor>,
    pub adapters: AdapterSet,
}

fn lora_param(target: &str, part: &str) -> String {
    format!("lora.{target}.{part}")
}

impl Model {
    /// Random frozen backbone, identity-initialized modulation, zero-up adapters.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let h = config.mlp_hidden;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let mut base = BTreeMap::new();
        for s in STREAMS {
            for l in 0..config.blocks {
                // Self-attention: random query/key maps; value/output form a
                // scaled orthogonal pair so attention moves content between
                // tokens without scrambling it.
                base.insert(format!("{s}.{l}.attn.q"), Tensor::randn(&[d, d], inv(d), rng));
                base.insert(format!("{s}.{l}.attn.k"), Tensor::randn(&[d, d], inv(d), rng));
                let q = random_orthogonal(d, rng);
                base.insert(format!("{s}.{l}.attn.o"), q.transpose().scale(0.5));
                base.insert(format!("{s}.{l}.attn.v"), q);
                for p in PROJ {
                    let std = if p == "o" { 0.25 * inv(d) } else { inv(d) };
                    base.insert(format!("{s}.{l}.cross.{p}"), Tensor::randn(&[d, d], std, rng));
                }
                base.insert(format!("{s}.{l}.mlp.up"), Tensor::randn(&[d, h], inv(d), rng));
                base.insert(format!("{s}.{l}.mlp.down"), Tensor::randn(&[h, d], 0.25 * inv(h), rng));
            }
        }

        let te = config.time_embed_dim;
        let mut cond = BTreeMap::new();
        cond.insert("cond.time.w1".into(), Tensor::randn(&[te, d], inv(te), rng));
        cond.insert("cond.time.b1".into(), Tensor::zeros(&[1, d]));
        cond.insert("cond.time.w2".into(), Tensor::randn(&[d, d], inv(d), rng));
        cond.insert("cond.time.b2".into(), Tensor::zeros(&[1, d]));
        cond.insert("cond.env".into(), Tensor::randn(&[config.n_env + 1, d], 0.5, rng));
        cond.insert("cond.style".into(), Tensor::randn(&[config.n_style + 1, d], 0.5, rng));
        cond.insert("cond.scene".into(), Tensor::randn(&[config.n_scene + 1, d], 0.5, rng));
        cond.insert("cond.null_ref".into(), Tensor::randn(&[1, d], 0.5, rng));
        for s in STREAMS {
            for l in 0..config.blocks {
                cond.insert(format!("cond.{s}.{l}.mod.w"), Tensor::zeros(&[d, MOD_CHUNKS * d]));
                cond.insert(format!("cond.{s}.{l}.mod.b"), Tensor::zeros(&[1, MOD_CHUNKS * d]));
            }
            cond.insert(format!("cond.{s}.out.w"), Tensor::zeros(&[d, 2 * d]));
            cond.insert(format!("cond.{s}.out.b"), Tensor::zeros(&[1, 2 * d]));
        }

        let mut adapters = AdapterSet::default();
        for s in STREAMS {
            for l in 0..config.blocks {
                for kind in ["attn", "cross"] {
                    for p in PROJ {
                        adapters.insert(LoraAdapter::new(
                            &format!("{s}.{l}.{kind}.{p}"),
                            d,
                            d,
                            config.lora_rank,
                            config.lora_alpha,
                            rng,
                        ));
                    }
                }
            }
        }
        Ok(Self {
            config,
            base,
            cond,
            adapters,
        })
    }

    /// Names of every trainable tensor, in a fixed order.
    pub fn trainable_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.cond.keys().cloned().collect();
        for t in self.adapters.adapters.keys() {
            names.push(lora_param(t, "down"));
            names.push(lora_param(t, "up"));
        }
        names
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        if let Some(rest) = name.strip_prefix("lora.") {
            let (target, part) = rest.rsplit_once('.')?;
            let a = self.adapters.get(target)?;
            return match part {
                "down" => Some(&a.down),
                "up" => Some(&a.up),
                _ => None,
            };
        }
        self.cond.get(name).or_else(|| self.base.get(name))
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(rest) = name.strip_prefix("lora.") {
            let (target, part) = rest.rsplit_once('.')?;
            let a = self.adapters.adapters.get_mut(target)?;
            return match part {
                "down" => Some(&mut a.down),
                "up" => Some(&mut a.up),
                _ => None,
            };
        }
        if self.cond.contains_key(name) {
            return self.cond.get_mut(name);
        }
        self.base.get_mut(name)
    }

    /// Every parameter (frozen and trainable) under its canonical name.
    pub fn named_parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.base.iter().map(|(k, v)| (k.clone(), v)).collect();
        for name in self.trainable_names() {
            let t = self.param(&name).expect("trainable name resolves");
            out.push((name, t));
        }
        out
    }

    /// Replaces parameters by name; every model parameter must be present with
    /// the exact shape the config implies.
    pub fn load_parameters(&mut self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        let names: Vec<String> = self.named_parameters().into_iter().map(|(n, _)| n).collect();
        for name in &names {
            let src = params
                .get(name)
                .ok_or_else(|| Error::CheckpointShape(format!("missing parameter `{name}`")))?;
            let dst = self.param_mut(name).expect("name resolves");
            if src.shape() != dst.shape() {
                return Err(Error::CheckpointShape(format!(
                    "parameter `{name}` has shape {:?}, model expects {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
        }
        if let Some(extra) = params.keys().find(|k| !names.contains(k)) {
            return Err(Error::CheckpointShape(format!("unexpected parameter `{extra}`")));
        }
        for name in &names {
            *self.param_mut(name).expect("name resolves") = params[name].clone();
        }
        Ok(())
    }

    /// SHA-256 over the frozen backbone (names, shapes and raw bits).
    pub fn base_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in &self.base {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            h.update(&bytes);
        }
        h.finalize().into()
    }

    /// Audio positions for this model's configured scheme.
    pub fn assemble(
        &self,
        video: &super::LatentSequence,
        reference: &super::LatentSequence,
        target: &super::LatentSequence,
    ) -> Result<JointInput> {
        super::assemble_input_with(
            video,
            reference,
            target,
            self.config.video_grid,
            self.config.position_scheme,
            self.config.ref_gap,
        )
    }

    /// Places every parameter on `tape`. Trainable tensors become gradient
    /// leaves when `trainable`; `overrides` substitutes existing vars by name.
    pub fn bind<F: Scalar>(&self, tape: &mut Tape<F>, trainable: bool, overrides: &HashMap<String, Var>) -> Bound {
        self.bind_inner(tape, Some(&self.adapters), trainable, overrides)
    }

    fn bind_inner<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        adapters: Option<&AdapterSet>,
        trainable: bool,
        overrides: &HashMap<String, Var>,
    ) -> Bound {
        let mut vars = HashMap::new();
        for (name, t) in &self.base {
            vars.insert(name.clone(), tape.constant(t.cast()));
        }
        let mut place = |name: String, t: &Tensor| {
            let v = match overrides.get(&name) {
                Some(&v) => v,
                None => tape.leaf(t.cast(), trainable),
            };
            vars.insert(name, v);
        };
        for (name, t) in &self.cond {
            place(name.clone(), t);
        }
        let mut lora = HashMap::new();
        for (target, a) in adapters.map(|s| &s.adapters).into_iter().flatten() {
            place(lora_param(target, "down"), &a.down);
            place(lora_param(target, "up"), &a.up);
            lora.insert(target.clone(), a.scaling() as f64);
        }
        Bound { vars, lora }
    }

    /// Inference forward with an explicit adapter set (`None` = base only).
    pub fn forward(
        &self,
        joint: &JointInput,
        cond: &Conditioning,
        adapters: Option<&AdapterSet>,
        opts: &ForwardOptions,
    ) -> Result<Prediction> {
        let mut tape = Tape::<f32>::new();
        let bound = self.bind_inner(&mut tape, adapters, false, &HashMap::new());
        let (v, a) = self.forward_tape(&mut tape, &bound, joint, cond, opts)?;
        Ok(Prediction {
            video: tape.value(v).clone(),
            audio: tape.value(a).clone(),
        })
    }

    /// Builds the forward graph; returns `(ε̂_video, ε̂_audio)` on target rows.
    pub fn forward_tape<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        b: &Bound,
        joint: &JointInput,
        cond: &Conditioning,
        opts: &ForwardOptions,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let dh = cfg.head_dim();
        for (name, t) in [
            ("video", &joint.video),
            ("reference", &joint.audio_ref),
            ("audio", &joint.audio_target),
        ] {
            if t.cols() != d {
                return Err(Error::InvalidArgument(format!(
                    "{name} tokens have width {}, model d_model is {d}",
                    t.cols()
                )));
            }
        }
        if joint.video_positions.len() != joint.video.rows()
            || joint.audio_positions.len() != joint.audio_ref.rows() + joint.audio_target.rows()
        {
            return Err(Error::InvalidArgument(
                "joint input positions do not match token counts".into(),
            ));
        }
        if let Some(l) = opts.skip_block {
            if l >= cfg.blocks {
                return Err(Error::UnknownBlock {
                    block: l,
                    available: cfg.blocks,
                });
            }
        }
        if cond.reference_present && joint.audio_ref.rows() == 0 {
            return Err(Error::RoleMismatch(
                "reference marked present but the sequence is empty".into(),
            ));
        }
        if !(0.0..=1.0).contains(&cond.timestep) {
            return Err(Error::InvalidArgument(format!(
                "timestep {} outside [0, 1]",
                cond.timestep
            )));
        }

        let c = self.cond_vector(tape, b, cond)?;

        // Video stream: optional clean first frame at t = 0, then the target.
        let mut video_parts = Vec::new();
        let mut coords: Vec<[f64; 3]> = Vec::new();
        let mut ff_len = 0;
        if let Some(ff) = &cond.first_frame {
            if ff.cols() != d || ff.rows() != cfg.frame_len() {
                return Err(Error::ShapeMismatch {
                    op: "first_frame",
                    left: ff.shape().to_vec(),
                    right: vec![cfg.frame_len(), d],
                });
            }
            ff_len = ff.rows();
            video_parts.push(tape.constant(ff.cast()));
            for hh in 0..cfg.video_grid[1] {
                for ww in 0..cfg.video_grid[2] {
                    coords.push([0.0, hh as f64, ww as f64]);
                }
            }
        }
        let zv = tape.constant(joint.video.cast());
        video_parts.push(zv);
        coords.extend(
            joint
                .video_positions
                .iter()
                .map(|&(t, h, w)| [t as f64, h as f64, w as f64]),
        );
        let mut xv = if video_parts.len() == 1 {
            zv
        } else {
            tape.concat_rows(&video_parts)?
        };
        let rope_v = Arc::new(RopeTable::rotary_axial(
            &coords,
            dh,
            cfg.video_rotary_dim,
            cfg.heads,
            cfg.rope_base,
        ));

        // Audio stream: reference (or null token, or nothing), then target.
        let r = joint.audio_ref.rows();
        let target_pos = &joint.audio_positions[r..];
        let mut audio_parts = Vec::new();
        let mut apos: Vec<f64> = Vec::new();
        let mut n_ref = 0;
        if cond.reference_present {
            audio_parts.push(tape.constant(joint.audio_ref.cast()));
            apos.extend(joint.audio_positions[..r].iter().map(|&p| p as f64));
            n_ref = r;
        } else if cfg.null_reference == NullReference::NullToken {
            audio_parts.push(b.var("cond.null_ref")?);
            let first = target_pos.first().copied().unwrap_or(0);
            let p = match cfg.position_scheme {
                PositionScheme::Negative => first - 1 - cfg.ref_gap as i64,
                PositionScheme::Standard => first,
            };
            apos.push(p as f64);
            n_ref = 1;
        }
        let za = tape.constant(joint.audio_target.cast());
        audio_parts.push(za);
        apos.extend(target_pos.iter().map(|&p| p as f64));
        let mut xa = if audio_parts.len() == 1 {
            za
        } else {
            tape.concat_rows(&audio_parts)?
        };
        let rope_a = Arc::new(RopeTable::rotary_1d(&apos, dh, dh, cfg.heads, cfg.rope_base));
        let n_audio = apos.len();
        let audio_mask = (cfg.ref_attention == RefAttention::TargetToRef && n_ref > 0).then(|| AttnMask {
            n_q: n_audio,
            n_k: n_audio,
            allowed: (0..n_audio * n_audio)
                .map(|i| !(i / n_audio < n_ref && i % n_audio >= n_ref))
                .collect(),
        });

        let eps = F::of(LN_EPS);
        for l in 0..cfg.blocks {
            let mv = self.modulation(tape, b, c, "video", l)?;
            let ma = self.modulation(tape, b, c, "audio", l)?;

            if opts.skip_block != Some(l) {
                xv = self.self_attn_residual(tape, b, xv, &mv, &format!("video.{l}.attn"), &rope_v, None)?;
            }
            xa = self.self_attn_residual(
                tape,
                b,
                xa,
                &ma,
                &format!("audio.{l}.attn"),
                &rope_a,
                audio_mask.as_ref(),
            )?;

            if opts.cross_modal {
                let hv = tape.layer_norm(xv, eps)?;
                let ha = tape.layer_norm(xa, eps)?;
                let cv = self.attend(tape, b, hv, ha, &format!("video.{l}.cross"), None, None)?;
                let ca = self.attend(tape, b, ha, hv, &format!("audio.{l}.cross"), None, None)?;
                let gv = tape.mul_row(cv, mv.gate_cross)?;
                let ga = tape.mul_row(ca, ma.gate_cross)?;
                xv = tape.add(xv, gv)?;
                xa = tape.add(xa, ga)?;
            }

            xv = self.mlp_residual(tape, b, xv, &mv, &format!("video.{l}.mlp"))?;
            xa = self.mlp_residual(tape, b, xa, &ma, &format!("audio.{l}.mlp"))?;
        }

        let (ab_sqrt, one_minus_sqrt) = cfg.schedule.coefficients(cond.timestep as f64);
        let head = |tape: &mut Tape<F>, x: Var, start: usize, len: usize, z: Var, s: &str| -> Result<Var> {
            let w = b.var(&format!("cond.{s}.out.w"))?;
            let bias = b.var(&format!("cond.{s}.out.b"))?;
            let m = tape.matmul(c, w)?;
            let m = tape.add_row(m, bias)?;
            let shift = tape.slice_cols(m, 0, d)?;
            let scale = tape.slice_cols(m, d, d)?;
            let scale = tape.add_scalar(scale, F::one())?;
            let xt = tape.slice_rows(x, start, len)?;
            let v = tape.mul_row(xt, scale)?;
            let v = tape.add_row(v, shift)?;
            let zs = tape.scale(z, F::of(one_minus_sqrt))?;
            let vs = tape.scale(v, F::of(ab_sqrt))?;
            tape.add(zs, vs)
        };
        let ev = head(tape, xv, ff_len, joint.video.rows(), zv, "video")?;
        let ea = head(tape, xa, n_ref, joint.audio_target.rows(), za, "audio")?;
        Ok((ev, ea))
    }

    fn cond_vector<F: Scalar>(&self, tape: &mut Tape<F>, b: &Bound, cond: &Conditioning) -> Result<Var> {
        let cfg = &self.config;
        let temb = tape.constant(timestep_embedding::<F>(
            cond.timestep as f64 * 1000.0,
            cfg.time_embed_dim,
        ));
        let h = tape.matmul(temb, b.var("cond.time.w1")?)?;
        let h = tape.add_row(h, b.var("cond.time.b1")?)?;
        let h = tape.silu(h)?;
        let h = tape.matmul(h, b.var("cond.time.w2")?)?;
        let mut h = tape.add_row(h, b.var("cond.time.b2")?)?;
        let (env, style, scene) = match cond.text {
            Some(t) => {
                check_code("env", t.env, cfg.n_env)?;
                check_code("style", t.style, cfg.n_style)?;
                check_code("scene", t.scene, cfg.n_scene)?;
                (t.env, t.style, t.scene)
            }
            None => (cfg.n_env, cfg.n_style, cfg.n_scene),
        };
        for (table, idx) in [("cond.env", env), ("cond.style", style), ("cond.scene", scene)] {
            let row = tape.gather_row(b.var(table)?, idx)?;
            h = tape.add(h, row)?;
        }
        tape.silu(h)
    }

    fn modulation<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        b: &Bound,
        c: Var,
        stream: &str,
        l: usize,
    ) -> Result<Modulation> {
        let d = self.config.d_model;
        let m = tape.matmul(c, b.var(&format!("cond.{stream}.{l}.mod.w"))?)?;
        let m = tape.add_row(m, b.var(&format!("cond.{stream}.{l}.mod.b"))?)?;
        let mut chunks = [m; MOD_CHUNKS];
        for (i, ch) in chunks.iter_mut().enumerate() {
            *ch = tape.slice_cols(m, i * d, d)?;
        }
        let one = |tape: &mut Tape<F>, v: Var| tape.add_scalar(v, F::one());
        Ok(Modulation {
            shift1: chunks[0],
            scale1: one(tape, chunks[1])?,
            gate1: one(tape, chunks[2])?,
            shift2: chunks[3],
            scale2: one(tape, chunks[4])?,
            gate2: one(tape, chunks[5])?,
            gate_cross: one(tape, chunks[6])?,
        })
    }

    fn modulate<F: Scalar>(&self, tape: &mut Tape<F>, x: Var, shift: Var, scale: Var) -> Result<Var> {
        let h = tape.layer_norm(x, F::of(LN_EPS))?;
        let h = tape.mul_row(h, scale)?;
        tape.add_row(h, shift)
    }

    #[allow(clippy::too_many_arguments)]
    fn self_attn_residual<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        b: &Bound,
        x: Var,
        m: &Modulation,
        prefix: &str,
        rope: &Arc<RopeTable<F>>,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let h = self.modulate(tape, x, m.shift1, m.scale1)?;
        let a = self.attend(tape, b, h, h, prefix, Some(rope), mask)?;
        let a = tape.mul_row(a, m.gate1)?;
        tape.add(x, a)
    }

    /// Projected multi-head attention of `queries` over `keys`, with rotary
    /// positions when `rope` is given (self-attention only).
    #[allow(clippy::too_many_arguments)]
    fn attend<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        b: &Bound,
        queries: Var,
        keys: Var,
        prefix: &str,
        rope: Option<&Arc<RopeTable<F>>>,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let mut q = b.project(tape, queries, &format!("{prefix}.q"))?;
        let mut k = b.project(tape, keys, &format!("{prefix}.k"))?;
        let v = b.project(tape, keys, &format!("{prefix}.v"))?;
        if let Some(rope) = rope {
            q = tape.rope(q, rope.clone())?;
            k = tape.rope(k, rope.clone())?;
        }
        let a = tape.attention(q, k, v, self.config.heads, mask)?;
        b.project(tape, a, &format!("{prefix}.o"))
    }

    fn mlp_residual<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        b: &Bound,
        x: Var,
        m: &Modulation,
        prefix: &str,
    ) -> Result<Var> {
        let h = self.modulate(tape, x, m.shift2, m.scale2)?;
        let h = tape.matmul(h, b.var(&format!("{prefix}.up"))?)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, b.var(&format!("{prefix}.down"))?)?;
        let h = tape.mul_row(h, m.gate2)?;
        tape.add(x, h)
    }
}

impl Denoiser for Model {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn denoise(&self, joint: &JointInput, cond: &Conditioning, opts: &ForwardOptions) -> Result<Prediction> {
        self.forward(joint, cond, Some(&self.adapters), opts)
    }
}

fn check_code(vocab: &'static str, code: usize, size: usize) -> Result<()> {
    if code >= size {
        return Err(Error::UnknownCode { vocab, code, size });
    }
    Ok(())
}

/// `[sin(x·f₀), …, sin(x·f_{k−1}), cos(x·f₀), …]`, `f_i = 10000^(−i/k)`.
pub fn timestep_embedding<F: Scalar>(x: f64, dim: usize) -> Tensor<F> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    data.extend(freqs.iter().map(|f| F::of((x * f).sin())));
    data.extend(freqs.iter().map(|f| F::of((x * f).cos())));
    Tensor::new(vec![1, dim], data).expect("finite embedding")
}

struct Modulation {
    shift1: Var,
    scale1: Var,
    gate1: Var,
    shift2: Var,
    scale2: Var,
    gate2: Var,
    gate_cross: Var,
}

/// Parameters placed on a tape.
pub struct Bound {
    vars: HashMap<String, Var>,
    /// Adapter target → `α/r`; empty means adapters are ignored.
    lora: HashMap<String, f64>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    /// All bound vars by name.
    pub fn vars(&self) -> &HashMap<String, Var> {
        &self.vars
    }

    /// `x·W`, plus the low-rank path when an adapter targets `W`.
    fn project<F: Scalar>(&self, tape: &mut Tape<F>, x: Var, weight: &str) -> Result<Var> {
        let y = tape.matmul(x, self.var(weight)?)?;
        match self.lora.get(weight) {
            None => Ok(y),
            Some(&s) => {
                let down = self.var(&lora_param(weight, "down"))?;
                let up = self.var(&lora_param(weight, "up"))?;
                // Scale the r × d_out factor rather than the n × d_out product.
                let up = tape.scale(up, F::of(s))?;
                let low = tape.matmul(x, down)?;
                let low = tape.matmul(low, up)?;
                tape.add(y, low)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{assemble_input, LatentSequence, TextCode};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (Model, JointInput, Conditioning) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::init(ModelConfig::default(), &mut rng).unwrap();
        let v = LatentSequence::video_target(Tensor::randn(&[32, 64], 1.0, &mut rng)).unwrap();
        let r = LatentSequence::audio_reference(Tensor::randn(&[8, 64], 1.0, &mut rng)).unwrap();
        let a = LatentSequence::audio_target(Tensor::randn(&[16, 64], 1.0, &mut rng)).unwrap();
        let joint = assemble_input(&v, &r, &a, [2, 4, 4]).unwrap();
        let cond = Conditioning {
            text: Some(TextCode {
                env: 1,
                style: 2,
                scene: 3,
            }),
            timestep: 0.5,
            first_frame: Some(Tensor::randn(&[16, 64], 1.0, &mut rng)),
            reference_present: true,
        };
        (model, joint, cond)
    }

    fn bits(t: &Tensor) -> Vec<u32> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn zero_adapters_match_base_bit_exactly() {
        let (m, j, c) = setup(1);
        let opts = ForwardOptions::default();
        let with = m.forward(&j, &c, Some(&m.adapters), &opts).unwrap();
        let without = m.forward(&j, &c, None, &opts).unwrap();
        assert_eq!(bits(&with.video), bits(&without.video));
        assert_eq!(bits(&with.audio), bits(&without.audio));
        assert_eq!(with.video.shape(), &[32, 64]);
        assert_eq!(with.audio.shape(), &[16, 64]);
    }

    #[test]
    fn reference_tokens_influence_audio() {
        let (m, mut j, c) = setup(2);
        let opts = ForwardOptions::default();
        let before = m.denoise(&j, &c, &opts).unwrap();
        j.audio_ref.data_mut()[3 * 64 + 5] += 0.5;
        let after = m.denoise(&j, &c, &opts).unwrap();
        assert!(after.audio.max_abs_diff(&before.audio) > 0.0);
    }

    #[test]
    fn absent_reference_is_ignored() {
        let (m, j, mut c) = setup(3);
        c.reference_present = false;
        let opts = ForwardOptions::default();
        let a = m.denoise(&j, &c, &opts).unwrap();
        let mut permuted = j.clone();
        let rows: Vec<Tensor> = (0..8).rev().map(|i| j.audio_ref.slice_rows(i, 1).unwrap()).collect();
        permuted.audio_ref = Tensor::concat_rows(&rows.iter().collect::<Vec<_>>()).unwrap();
        let b = m.denoise(&permuted, &c, &opts).unwrap();
        assert_eq!(bits(&a.audio), bits(&b.audio));
        let empty = j.without_reference(m.config.position_scheme, 0).unwrap();
        let e = m.denoise(&empty, &c, &opts).unwrap();
        assert_eq!(bits(&a.audio), bits(&e.audio));
    }

    #[test]
    fn skipping_a_block_changes_the_output() {
        let (m, j, c) = setup(4);
        let base = m.denoise(&j, &c, &ForwardOptions::default()).unwrap();
        let skipped = m
            .denoise(
                &j,
                &c,
                &ForwardOptions {
                    skip_block: Some(3),
                    cross_modal: true,
                },
            )
            .unwrap();
        assert!(skipped.video.max_abs_diff(&base.video) > 1e-4);
        let err = m.denoise(
            &j,
            &c,
            &ForwardOptions {
                skip_block: Some(4),
                cross_modal: true,
            },
        );
        assert!(matches!(err, Err(Error::UnknownBlock { block: 4, available: 4 })));
    }

    #[test]
    fn without_cross_attention_audio_ignores_video() {
        let (mut m, j, c) = setup(5);
        for l in 0..m.config.blocks {
            for p in PROJ {
                let w = m.base.get_mut(&format!("audio.{l}.cross.{p}")).unwrap();
                *w = Tensor::zeros(w.shape());
            }
        }
        let opts = ForwardOptions::default();
        let a = m.denoise(&j, &c, &opts).unwrap();
        let mut j2 = j.clone();
        for v in j2.video.data_mut() {
            *v = -*v * 1.7 + 0.3;
        }
        let mut c2 = c.clone();
        c2.first_frame = None;
        let b = m.denoise(&j2, &c2, &opts).unwrap();
        assert!(a.audio.max_abs_diff(&b.audio) < 1e-6);
        assert!(a.video.max_abs_diff(&b.video) > 1e-3);
    }

    #[test]
    fn rejects_bad_codes_and_widths() {
        let (m, j, mut c) = setup(6);
        c.text = Some(TextCode {
            env: 8,
            style: 0,
            scene: 0,
        });
        assert!(matches!(
            m.denoise(&j, &c, &ForwardOptions::default()),
            Err(Error::UnknownCode { vocab: "env", .. })
        ));
        c.text = None;
        let mut j2 = j.clone();
        j2.audio_target = Tensor::zeros(&[16, 32]);
        assert!(m.denoise(&j2, &c, &ForwardOptions::default()).is_err());
    }
}
