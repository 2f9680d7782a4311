//! Video inputs: frames are encoded as independent images, concatenated
//! frame-major for cross-attention, and optionally reweighted by
//! parameter-free frame-aware attention (PFA): frame weights are a softmax
//! over frame-CLS · text-CLS dot products, and each frame's patch rows are
//! scaled by its weight while CLS rows pass through unscaled.

use uniadapter_tensor::{Real, Tensor, TensorError, Var};

use crate::error::{contract_err, Result};
use crate::model::{FeatureSet, Span};
use crate::store::Graph;

/// Encoded frames of a batch of videos, all with the same frame count.
/// Frame `i` of video `v` is sequence `v * n_frames + i` of `frames`.
#[derive(Clone, Debug)]
pub struct VideoFeatures {
    pub frames: FeatureSet,
    pub n_frames: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PfaOptions {
    /// L2-normalise both CLS vectors before the dot product.
    pub normalize: bool,
    /// Block gradients from the frame weights into the encoders.
    pub stop_grad: bool,
}

impl VideoFeatures {
    pub fn new(frames: FeatureSet, n_frames: usize) -> Result<Self> {
        if n_frames == 0 {
            return contract_err("video with no frames");
        }
        if frames.batch() % n_frames != 0 {
            return contract_err(format!(
                "{} frames do not split into videos of {n_frames}",
                frames.batch()
            ));
        }
        Ok(Self { frames, n_frames })
    }

    pub fn videos(&self) -> usize {
        self.frames.batch() / self.n_frames
    }

    /// Frame-major concatenation `[cls₁, tok₁₁…tok₁ₘ, cls₂, …]` of video
    /// `v`: frames are stored consecutively, so this is a single span.
    pub fn concat_span(&self, v: usize) -> Span {
        let first = self.frames.spans[v * self.n_frames];
        let last = self.frames.spans[(v + 1) * self.n_frames - 1];
        Span::new(first.start, last.start + last.len - first.start)
    }

    pub fn concat_spans(&self) -> Vec<Span> {
        (0..self.videos()).map(|v| self.concat_span(v)).collect()
    }

    /// Mean of each video's frame CLS rows, `[videos, d]`.
    pub fn mean_cls<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        let cls = self.frames.cls(g)?;
        let (v, n) = (self.videos(), self.n_frames);
        let mut avg = vec![T::zero(); v * v * n];
        let w = T::of(1.0 / n as f64);
        for i in 0..v {
            avg[i * v * n + i * n..i * v * n + (i + 1) * n].fill(w);
        }
        let avg = g.tape.constant(Tensor::from_vec(vec![v, v * n], avg)?);
        Ok(g.tape.matmul(avg, cls)?)
    }

    /// Frame weights `[pairs, n_frames]` for `(text row, video)` pairs:
    /// `softmax_i ⟨frame_cls(v, i), text_cls(t)⟩`.
    pub fn pfa_weights<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        text_cls: Var,
        pairs: &[(usize, usize)],
        opts: PfaOptions,
    ) -> Result<Var> {
        let n = self.n_frames;
        let mut f = self.frames.cls(g)?;
        let mut t = text_cls;
        if opts.stop_grad {
            f = g.tape.detach(f);
            t = g.tape.detach(t);
        }
        if opts.normalize {
            f = g.tape.l2_normalize(f)?;
            t = g.tape.l2_normalize(t)?;
        }
        frame_weights(g, f, t, pairs, n)
    }

    /// Visual rows for each pair: the video's frame-major concatenation
    /// with patch rows of frame `i` scaled by `weights[pair, i]`.
    pub fn pfa_apply<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        weights: Var,
        pairs: &[(usize, usize)],
    ) -> Result<(Var, Vec<Span>)> {
        let n = self.n_frames;
        if g.tape.shape(weights) != [pairs.len(), n] {
            return contract_err(format!(
                "frame weights {:?} do not match {} pairs of {n} frames",
                g.tape.shape(weights),
                pairs.len()
            ));
        }
        let d = g.tape.value(self.frames.tokens).cols();
        let mut rows = Vec::new();
        let mut widx = Vec::new();
        let mut lens = Vec::with_capacity(pairs.len());
        for (p, &(_, v)) in pairs.iter().enumerate() {
            let span = self.concat_span(v);
            lens.push(span.len);
            for i in 0..n {
                let fs = self.frames.spans[v * n + i];
                rows.extend(fs.rows());
                widx.push(0);
                widx.extend(std::iter::repeat_n(1 + p * n + i, fs.len - 1));
            }
        }
        let gathered = g.tape.embedding(self.frames.tokens, &rows)?;
        let one = g.tape.constant(Tensor::ones(&[1, 1]));
        let col = g.tape.reshape(weights, &[pairs.len() * n, 1])?;
        let table = g.tape.concat(&[one, col], 0)?;
        let wcol = g.tape.embedding(table, &widx)?;
        let ones = g.tape.constant(Tensor::ones(&[1, d]));
        let wide = g.tape.matmul(wcol, ones)?;
        let out = g.tape.mul(gathered, wide)?;
        Ok((out, crate::model::pack_spans(lens)))
    }
}

/// `softmax_i ⟨f[v·n + i], t[row]⟩` for every `(row, v)` pair.
fn frame_weights<T: Real>(
    g: &mut Graph<'_, T>,
    frame_cls: Var,
    text_cls: Var,
    pairs: &[(usize, usize)],
    n: usize,
) -> Result<Var> {
    let (fd, td) = (g.tape.value(frame_cls).cols(), g.tape.value(text_cls).cols());
    if fd != td {
        return Err(TensorError::Dimension {
            op: "pfa_weights",
            lhs: g.tape.shape(frame_cls).to_vec(),
            rhs: g.tape.shape(text_cls).to_vec(),
        }
        .into());
    }
    let mut fi = Vec::with_capacity(pairs.len() * n);
    let mut ti = Vec::with_capacity(pairs.len() * n);
    for &(t, v) in pairs {
        fi.extend(v * n..(v + 1) * n);
        ti.extend(std::iter::repeat_n(t, n));
    }
    let f = g.tape.embedding(frame_cls, &fi)?;
    let t = g.tape.embedding(text_cls, &ti)?;
    let prod = g.tape.mul(f, t)?;
    let ones = g.tape.constant(Tensor::ones(&[fd, 1]));
    let scores = g.tape.matmul(prod, ones)?;
    let scores = g.tape.reshape(scores, &[pairs.len(), n])?;
    Ok(g.tape.softmax(scores)?)
}

/// Plain-value frame weights: `softmax_i ⟨frame_cls[i], text_cls⟩`.
pub fn pfa_weights(frame_cls: &[Vec<f64>], text_cls: &[f64]) -> Result<Vec<f64>> {
    if frame_cls.is_empty() {
        return contract_err("pfa_weights needs at least one frame");
    }
    let scores = frame_cls
        .iter()
        .map(|f| {
            if f.len() != text_cls.len() {
                return Err(TensorError::Dimension {
                    op: "pfa_weights",
                    lhs: vec![f.len()],
                    rhs: vec![text_cls.len()],
                }
                .into());
            }
            Ok(f.iter().zip(text_cls).map(|(a, b)| a * b).sum::<f64>())
        })
        .collect::<Result<Vec<f64>>>()?;
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Plain-value frame-major concatenation of `[m + 1, d]` frame sequences.
pub fn frame_concat<T: Real>(frames: &[Tensor<T>]) -> Result<Tensor<T>> {
    let Some(first) = frames.first() else {
        return contract_err("frame_concat of an empty video");
    };
    let d = first.cols();
    let mut data = Vec::new();
    for f in frames {
        if f.cols() != d || f.shape() != first.shape() {
            return Err(TensorError::Dimension {
                op: "frame_concat",
                lhs: first.shape().to_vec(),
                rhs: f.shape().to_vec(),
            }
            .into());
        }
        data.extend_from_slice(f.data());
    }
    Ok(Tensor::from_vec(vec![data.len() / d, d], data)?)
}

/// Plain-value reweighting: patch rows of frame `i` scaled by `weights[i]`,
/// CLS rows untouched, frames concatenated frame-major.
pub fn pfa_apply<T: Real>(frames: &[Tensor<T>], weights: &[T]) -> Result<Tensor<T>> {
    if weights.len() != frames.len() {
        return contract_err(format!(
            "{} frame weights for {} frames",
            weights.len(),
            frames.len()
        ));
    }
    let mut out = frame_concat(frames)?;
    let (rows_per, d) = (frames[0].rows(), frames[0].cols());
    let data = out.data_mut();
    for (i, &w) in weights.iter().enumerate() {
        for r in 1..rows_per {
            let row = &mut data[(i * rows_per + r) * d..(i * rows_per + r + 1) * d];
            row.iter_mut().for_each(|x| *x *= w);
        }
    }
    Ok(out)
}
