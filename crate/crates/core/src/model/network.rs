use crate::diffcore::{NdArray, ParamRegistry, Tape, Var};

use super::{ModelConfig, ModelError};

#[derive(Clone, Copy, Debug)]
pub struct TextVars {
    /// `[T, d]` token features.
    pub tokens: Var,
    /// `[d]` mean of the token features.
    pub pooled: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FusedVars {
    /// `[R, d]`
    pub f_q: Var,
    /// `[d]`
    pub f_l: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct GroundingVars {
    pub regions: Var,
    pub text: TextVars,
    pub fused: FusedVars,
    /// `[R]`
    pub scores: Var,
    /// `[R, 4]` as `(cx, cy, w, h)` in `[0, 1]`.
    pub boxes: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundingOutput {
    pub s_cls: NdArray,
    pub boxes: NdArray,
}

impl GroundingVars {
    pub fn output(&self, tape: &Tape) -> GroundingOutput {
        GroundingOutput {
            s_cls: tape.value(self.scores).clone(),
            boxes: tape.value(self.boxes).clone(),
        }
    }
}

/// `[H, W, 3]` to `[3, H, W]`.
pub fn image_to_chw(image: &NdArray) -> Result<NdArray, ModelError> {
    let [h, w, 3] = image.shape() else {
        return Err(ModelError::Input(format!(
            "image must be [H, W, 3], got {:?}",
            image.shape()
        )));
    };
    let (h, w) = (*h, *w);
    let src = image.data();
    let mut out = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out[c * h * w + y * w + x] = src[(y * w + x) * 3 + c];
            }
        }
    }
    Ok(NdArray::new(vec![3, h, w], out)?)
}

/// Region features `O`, `[R, d]`.
pub fn encode_image(
    reg: &ParamRegistry,
    cfg: &ModelConfig,
    tape: &mut Tape,
    image: &NdArray,
) -> Result<Var, ModelError> {
    let s = cfg.image_size;
    if image.shape() != [s, s, 3] {
        return Err(ModelError::Input(format!(
            "image must be [{s}, {s}, 3], got {:?}",
            image.shape()
        )));
    }
    let mut x = tape.constant(image_to_chw(image)?);
    for i in 0..3 {
        let w = reg.bind(tape, &format!("image.conv{i}.w"))?;
        let b = reg.bind(tape, &format!("image.conv{i}.b"))?;
        x = tape.conv2d(x, w, 2, 1)?;
        x = tape.add(x, b)?;
        if i < 2 {
            x = tape.relu(x);
        }
    }
    let d = cfg.feature_dim;
    let x = tape.reshape(x, &[d, cfg.regions()])?;
    let x = tape.transpose(x)?;
    let pos = reg.bind(tape, "image.pos")?;
    Ok(tape.add(x, pos)?)
}

fn linear(reg: &ParamRegistry, tape: &mut Tape, x: Var, w: &str, b: Option<&str>) -> Result<Var, ModelError> {
    let wv = reg.bind(tape, w)?;
    let mut y = tape.matmul(x, wv)?;
    if let Some(b) = b {
        let bv = reg.bind(tape, b)?;
        y = tape.add(y, bv)?;
    }
    Ok(y)
}

/// Scaled dot-product attention split into `heads` column blocks.
fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, heads: usize) -> Result<Var, ModelError> {
    let width = tape.shape(q)[1];
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, 1, lo, hi)?,
                tape.slice(k, 1, lo, hi)?,
                tape.slice(v, 1, lo, hi)?,
            )
        };
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores);
        outs.push(tape.matmul(attn, vh)?);
    }
    Ok(if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? })
}

/// Token features and pooled prompt feature. PAD ids are dropped before
/// encoding; the remaining tokens keep their original positions.
pub fn encode_text(
    reg: &ParamRegistry,
    cfg: &ModelConfig,
    tape: &mut Tape,
    tokens: &[usize],
) -> Result<TextVars, ModelError> {
    if tokens.len() > cfg.max_seq_len {
        return Err(ModelError::Input(format!(
            "prompt has {} tokens, maximum is {}",
            tokens.len(),
            cfg.max_seq_len
        )));
    }
    let (positions, ids): (Vec<usize>, Vec<usize>) = tokens
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, t)| t != cfg.pad_id())
        .unzip();
    if ids.is_empty() {
        return Err(ModelError::Input("prompt has no tokens".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab.len()) {
        return Err(ModelError::Input(format!("token id {bad} outside vocabulary")));
    }
    let d = cfg.feature_dim;
    let embed = reg.bind(tape, "text.embed")?;
    let pos = reg.bind(tape, "text.pos")?;
    let e = tape.index_select(embed, &ids)?;
    let p = tape.index_select(pos, &positions)?;
    let mut x = tape.add(e, p)?;
    for l in 0..cfg.text_layers {
        let q = linear(reg, tape, x, &format!("text.{l}.wq"), None)?;
        let k = linear(reg, tape, x, &format!("text.{l}.wk"), None)?;
        let v = linear(reg, tape, x, &format!("text.{l}.wv"), None)?;
        let a = attention(tape, q, k, v, 1)?;
        let a = linear(reg, tape, a, &format!("text.{l}.wo"), None)?;
        x = tape.add(x, a)?;
        let h = linear(
            reg,
            tape,
            x,
            &format!("text.{l}.ff1.w"),
            Some(&format!("text.{l}.ff1.b")),
        )?;
        let h = tape.relu(h);
        let h = linear(
            reg,
            tape,
            h,
            &format!("text.{l}.ff2.w"),
            Some(&format!("text.{l}.ff2.b")),
        )?;
        x = tape.add(x, h)?;
    }
    debug_assert_eq!(tape.shape(x)[1], d);
    let pooled = tape.mean(x, Some(0))?;
    Ok(TextVars { tokens: x, pooled })
}

/// Bidirectional cross-attention with residual updates on both streams.
pub fn fuse(
    reg: &ParamRegistry,
    cfg: &ModelConfig,
    tape: &mut Tape,
    regions: Var,
    text: &TextVars,
) -> Result<FusedVars, ModelError> {
    let (so, sp) = (tape.shape(regions).to_vec(), tape.shape(text.tokens).to_vec());
    if so.len() != 2 || sp.len() != 2 || so[1] != cfg.feature_dim || sp[1] != cfg.feature_dim {
        return Err(ModelError::Input(format!(
            "fusion feature dims differ: regions {so:?}, tokens {sp:?}"
        )));
    }
    let (mut o, mut p) = (regions, text.tokens);
    for l in 0..cfg.fusion_layers {
        let name = |dir: &str, m: &str| format!("fusion.{l}.{dir}.w{m}");
        let q = linear(reg, tape, o, &name("r2t", "q"), None)?;
        let k = linear(reg, tape, p, &name("r2t", "k"), None)?;
        let v = linear(reg, tape, p, &name("r2t", "v"), None)?;
        let r2t = attention(tape, q, k, v, cfg.fusion_heads)?;
        let r2t = linear(reg, tape, r2t, &name("r2t", "o"), None)?;

        let q = linear(reg, tape, p, &name("t2r", "q"), None)?;
        let k = linear(reg, tape, o, &name("t2r", "k"), None)?;
        let v = linear(reg, tape, o, &name("t2r", "v"), None)?;
        let t2r = attention(tape, q, k, v, cfg.fusion_heads)?;
        let t2r = linear(reg, tape, t2r, &name("t2r", "o"), None)?;

        o = tape.add(o, r2t)?;
        p = tape.add(p, t2r)?;
    }
    let f_l = tape.mean(p, Some(0))?;
    Ok(FusedVars { f_q: o, f_l })
}

/// `S_cls[r] = f_l · f_q[r]`.
pub fn align(tape: &mut Tape, fused: &FusedVars) -> Result<Var, ModelError> {
    let d = tape.shape(fused.f_l)[0];
    let r = tape.shape(fused.f_q)[0];
    let col = tape.reshape(fused.f_l, &[d, 1])?;
    let s = tape.matmul(fused.f_q, col)?;
    Ok(tape.reshape(s, &[r])?)
}

/// Anchor-relative boxes: `sigmoid(logit(anchor) + mlp(f_q))`.
pub fn decode_boxes(reg: &ParamRegistry, cfg: &ModelConfig, tape: &mut Tape, f_q: Var) -> Result<Var, ModelError> {
    let h = linear(reg, tape, f_q, "decoder.fc1.w", Some("decoder.fc1.b"))?;
    let h = tape.relu(h);
    let delta = linear(reg, tape, h, "decoder.fc2.w", Some("decoder.fc2.b"))?;
    let logits = cfg.anchors().map(|a| (a / (1.0 - a)).ln());
    let base = tape.constant(logits);
    let z = tape.add(delta, base)?;
    Ok(tape.sigmoid(z))
}

/// Prompt-dependent part of the forward pass, given region features.
pub fn forward_with_regions(
    reg: &ParamRegistry,
    cfg: &ModelConfig,
    tape: &mut Tape,
    regions: Var,
    tokens: &[usize],
) -> Result<GroundingVars, ModelError> {
    let text = encode_text(reg, cfg, tape, tokens)?;
    let fused = fuse(reg, cfg, tape, regions, &text)?;
    let scores = align(tape, &fused)?;
    let boxes = decode_boxes(reg, cfg, tape, fused.f_q)?;
    Ok(GroundingVars {
        regions,
        text,
        fused,
        scores,
        boxes,
    })
}

pub fn forward(
    reg: &ParamRegistry,
    cfg: &ModelConfig,
    tape: &mut Tape,
    image: &NdArray,
    tokens: &[usize],
) -> Result<GroundingVars, ModelError> {
    let regions = encode_image(reg, cfg, tape, image)?;
    forward_with_regions(reg, cfg, tape, regions, tokens)
}
