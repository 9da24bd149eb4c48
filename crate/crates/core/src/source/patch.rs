use rand::Rng;

use super::PatchConfig;
use crate::autodiff::{ParamStore, Real, Tape, Var, PAD_INDEX};
use crate::dsp::{chunk_len, MelConfig, MEL_SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::nn;

/// Patches along one axis of length `n`. A trailing partial patch is
/// zero-padded and kept when it covers at least half a patch, the same rule
/// used for partial audio chunks; an axis shorter than one patch still yields
/// one padded patch.
fn patches_along(n: usize, patch: usize) -> usize {
    let (full, rem) = (n / patch, n % patch);
    full + usize::from(full == 0 || 2 * rem >= patch)
}

/// Patch rows and columns for a `[mel_bins, frames]` map.
pub fn patch_grid(mel_bins: usize, frames: usize, patch: usize) -> (usize, usize) {
    (patches_along(mel_bins, patch), patches_along(frames, patch))
}

/// Sequence length including the class token.
pub(super) fn sequence_len(c: &PatchConfig, mel: &MelConfig) -> Result<usize> {
    let frames = mel
        .frames(chunk_len(c.chunk_seconds, MEL_SAMPLE_RATE))
        .ok_or_else(|| Error::config("model.patch_transformer.chunk_seconds", "chunk shorter than one window"))?;
    let (r, cols) = patch_grid(mel.mel_bins, frames, c.patch);
    Ok(r * cols + 1)
}

pub(super) fn init<R: Rng>(c: &PatchConfig, mel: &MelConfig, rng: &mut R) -> Result<ParamStore> {
    if c.patch == 0 || c.dim == 0 || c.depth == 0 || c.mlp_hidden == 0 {
        return Err(Error::config("model.patch_transformer", "patch, dim, depth and mlp_hidden must be positive"));
    }
    let d = c.dim;
    let seq = sequence_len(c, mel)?;
    let mut s = ParamStore::new();
    nn::add_linear(&mut s, "source.patch_embed", c.patch * c.patch, d, rng)?;
    s.add_normal("source.cls", &[1, d], 0.1, rng)?;
    s.add_normal("source.pos", &[seq, d], 0.1, rng)?;
    for b in 0..c.depth {
        let p = format!("source.block{b}");
        nn::add_layer_norm(&mut s, &format!("{p}.ln1"), d)?;
        for w in ["wq", "wk", "wv", "wo"] {
            s.add_normal(&format!("{p}.attn.{w}"), &[d, d], (1.0 / d as f32).sqrt(), rng)?;
        }
        nn::add_layer_norm(&mut s, &format!("{p}.ln2"), d)?;
        nn::add_linear(&mut s, &format!("{p}.mlp.fc1"), d, c.mlp_hidden, rng)?;
        nn::add_linear(&mut s, &format!("{p}.mlp.fc2"), c.mlp_hidden, d, rng)?;
    }
    nn::add_layer_norm(&mut s, "source.final_norm", d)?;
    nn::add_linear(&mut s, "source.head", d, c.num_classes, rng)?;
    Ok(s)
}

fn patchify<F: Real>(t: &mut Tape<F>, x: Var, patch: usize) -> Result<Var> {
    let (mels, frames) = (t.shape(x)[0], t.shape(x)[1]);
    let (rows, cols) = patch_grid(mels, frames, patch);
    let mut index = Vec::with_capacity(rows * cols * patch * patch);
    for r in 0..rows {
        for c in 0..cols {
            for i in 0..patch {
                for j in 0..patch {
                    let (m, f) = (r * patch + i, c * patch + j);
                    index.push(if m < mels && f < frames { m * frames + f } else { PAD_INDEX });
                }
            }
        }
    }
    t.gather(x, index, &[rows * cols, patch * patch])
}

fn self_attention<F: Real>(t: &mut Tape<F>, s: &ParamStore, p: &str, h: Var, dim: usize) -> Result<Var> {
    let wq = t.param_named(s, &format!("{p}.attn.wq"))?;
    let wk = t.param_named(s, &format!("{p}.attn.wk"))?;
    let wv = t.param_named(s, &format!("{p}.attn.wv"))?;
    let wo = t.param_named(s, &format!("{p}.attn.wo"))?;
    let q = t.matmul(h, wq)?;
    let k = t.matmul(h, wk)?;
    let v = t.matmul(h, wv)?;
    let kt = t.transpose(k)?;
    let scores = t.matmul(q, kt)?;
    let scores = t.scale(scores, F::of(1.0 / (dim as f64).sqrt()));
    let a = t.softmax(scores)?;
    let o = t.matmul(a, v)?;
    t.matmul(o, wo)
}

/// Patch embedding, class token, positional embedding and the encoder
/// blocks; returns the class-token row `[1, dim]` before the final norm.
pub(super) fn encoder<F: Real>(c: &PatchConfig, s: &ParamStore, t: &mut Tape<F>, x: Var) -> Result<Var> {
    let x = nn::scale_features(t, x)?;
    let patches = patchify(t, x, c.patch)?;
    let emb = nn::linear(t, s, "source.patch_embed", patches)?;
    let cls = t.param_named(s, "source.cls")?;
    let seq = t.concat_rows(&[cls, emb])?;
    let pos = t.param_named(s, "source.pos")?;
    let mut h = t.add(seq, pos)?;
    for b in 0..c.depth {
        let p = format!("source.block{b}");
        let n = nn::layer_norm(t, s, &format!("{p}.ln1"), h)?;
        let a = self_attention(t, s, &p, n, c.dim)?;
        h = t.add(h, a)?;
        let n = nn::layer_norm(t, s, &format!("{p}.ln2"), h)?;
        let m = nn::linear(t, s, &format!("{p}.mlp.fc1"), n)?;
        let m = t.relu(m);
        let m = nn::linear(t, s, &format!("{p}.mlp.fc2"), m)?;
        h = t.add(h, m)?;
    }
    nn::row(t, h, 0)
}
