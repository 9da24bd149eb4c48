use rand::Rng;

use super::AttentionConfig;
use crate::autodiff::{ParamStore, Real, Tape, Var};
use crate::dsp::MelConfig;
use crate::error::Result;
use crate::nn;

/// Output length of a kernel-3, stride-2, padding-1 conv.
fn halve(n: usize) -> usize {
    (n - 1) / 2 + 1
}

pub(super) fn pooled_freq(mel_bins: usize) -> usize {
    halve(halve(mel_bins))
}

pub(super) fn init<R: Rng>(c: &AttentionConfig, mel: &MelConfig, rng: &mut R) -> Result<ParamStore> {
    let mut s = ParamStore::new();
    nn::add_conv(&mut s, "source.conv1", 1, c.conv1_channels, 3, rng)?;
    nn::add_conv(&mut s, "source.conv2", c.conv1_channels, c.conv2_channels, 3, rng)?;
    let flat = c.conv2_channels * pooled_freq(mel.mel_bins);
    nn::add_linear(&mut s, "source.proj", flat, c.hidden, rng)?;
    s.add_normal("source.attn.query", &[c.hidden, 1], (1.0 / c.hidden as f32).sqrt(), rng)?;
    nn::add_linear(&mut s, "source.head", c.hidden, c.num_classes, rng)?;
    Ok(s)
}

/// `[mel, T]` → conv/relu ×2 (stride 2) → per-frame projection `[T', hidden]`
/// → softmax attention weights over frames → pooled `[1, hidden]`.
pub(super) fn backbone<F: Real>(c: &AttentionConfig, s: &ParamStore, t: &mut Tape<F>, x: Var) -> Result<Var> {
    let (mels, frames) = (t.shape(x)[0], t.shape(x)[1]);
    let x = nn::scale_features(t, x)?;
    let x = t.reshape(x, &[1, 1, mels, frames])?;
    let h = nn::conv(t, s, "source.conv1", x, 2, 1)?;
    let h = t.relu(h);
    let h = nn::conv(t, s, "source.conv2", h, 2, 1)?;
    let h = t.relu(h);
    let [_, ch, fh, fw] = *t.shape(h) else { unreachable!("conv output is 4-d") };
    let seq = t.reshape(h, &[ch * fh, fw])?;
    let seq = t.transpose(seq)?;
    let seq = nn::linear(t, s, "source.proj", seq)?;
    let seq = t.relu(seq);
    let q = t.param_named(s, "source.attn.query")?;
    let scores = t.matmul(seq, q)?;
    let scores = t.reshape(scores, &[1, fw])?;
    let weights = t.softmax(scores)?;
    debug_assert_eq!(t.shape(seq)[1], c.hidden);
    t.matmul(weights, seq)
}
