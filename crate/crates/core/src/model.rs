//! The hybrid-stream backbone: visual and textual encoders, a multimodal
//! encoder that injects visual tokens through cross-attention, and a causal
//! answer decoder. Every block consults the store for adapter and low-rank
//! tensors, so the same code runs frozen, adapted and fully fine-tuned.
//!
//! Sequences of a batch are packed along rows; [`Span`]s mark where each
//! sequence lives. Position 0 of every span is its CLS row.

use std::collections::BTreeMap;

use uniadapter_tensor::{Real, Segment, Tensor, TensorError, Var};

use crate::adapter::AdapterUnit;
use crate::config::{AdaptationConfig, BackboneConfig, Encoder, Modality, QueryForm, Variant};
use crate::error::{contract_err, Result};
use crate::plan::{adapter_name, lora_name};
use crate::store::Graph;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const LN_EPS: f64 = uniadapter_tensor::LAYER_NORM_EPS;

/// Rows `start..start + len` of a packed matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    pub fn rows(self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// Consecutive spans of the given lengths.
pub fn pack_spans(lens: impl IntoIterator<Item = usize>) -> Vec<Span> {
    let mut start = 0;
    lens.into_iter()
        .map(|len| {
            let s = Span::new(start, len);
            start += len;
            s
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureKind {
    Visual,
    Text,
    Fused,
}

/// Encoder output for a batch: packed token rows and their spans.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub tokens: Var,
    pub spans: Vec<Span>,
    pub kind: FeatureKind,
}

impl FeatureSet {
    pub fn batch(&self) -> usize {
        self.spans.len()
    }

    pub fn cls_rows(&self) -> Vec<usize> {
        self.spans.iter().map(|s| s.start).collect()
    }

    /// CLS rows gathered into `[batch, d]`.
    pub fn cls<T: Real>(&self, g: &mut Graph<'_, T>) -> Result<Var> {
        Ok(g.tape.embedding(self.tokens, &self.cls_rows())?)
    }

    /// The sequences at `order`, packed afresh.
    pub fn select<T: Real>(&self, g: &mut Graph<'_, T>, order: &[usize]) -> Result<FeatureSet> {
        let rows: Vec<usize> = order.iter().flat_map(|&i| self.spans[i].rows()).collect();
        let tokens = g.tape.embedding(self.tokens, &rows)?;
        Ok(FeatureSet {
            tokens,
            spans: pack_spans(order.iter().map(|&i| self.spans[i].len)),
            kind: self.kind,
        })
    }
}

fn segments(q: &[Span], k: &[Span]) -> Vec<Segment> {
    q.iter()
        .zip(k)
        .map(|(q, k)| Segment {
            q_start: q.start,
            q_len: q.len,
            k_start: k.start,
            k_len: k.len,
        })
        .collect()
}

/// Cross-attention memory: packed rows plus the span each query sequence
/// attends to.
pub struct Memory<'a> {
    pub tokens: Var,
    pub spans: &'a [Span],
}

#[derive(Clone, Debug)]
pub struct Model {
    pub backbone: BackboneConfig,
    pub adaptation: AdaptationConfig,
}

impl Model {
    pub fn new(backbone: BackboneConfig, adaptation: AdaptationConfig) -> Self {
        Self {
            backbone,
            adaptation,
        }
    }

    fn linear<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = g.param(w)?;
        let b = g.param(b)?;
        let y = g.tape.matmul(x, w)?;
        Ok(g.tape.add_row(y, b)?)
    }

    fn layer_norm<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
        let gamma = g.param(&format!("{prefix}.g"))?;
        let beta = g.param(&format!("{prefix}.b"))?;
        Ok(g.tape.layer_norm(x, gamma, beta, T::of(LN_EPS))?)
    }

    /// Self-attention projection `proj` of a block, with its low-rank update
    /// when the store has one.
    fn attn_proj<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        enc: Encoder,
        layer: usize,
        proj: char,
    ) -> Result<Var> {
        let w = format!("{}.{layer}.attn.w{proj}", enc.name());
        let b = format!("{}.{layer}.attn.b{proj}", enc.name());
        let a_name = lora_name(enc, layer, proj, 'a');
        if g.store().contains(&a_name) {
            let (w, b) = (g.param(&w)?, g.param(&b)?);
            let a = g.param(&a_name)?;
            let bb = g.param(&lora_name(enc, layer, proj, 'b'))?;
            return crate::adapter::lora_linear(
                &mut g.tape,
                x,
                w,
                Some(b),
                a,
                bb,
                self.adaptation.lora_alpha,
            );
        }
        self.linear(g, x, &w, &b)
    }

    fn self_attention<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        enc: Encoder,
        layer: usize,
        spans: &[Span],
        causal: bool,
    ) -> Result<Var> {
        let pre = format!("{}.{layer}.attn", enc.name());
        let q = self.attn_proj(g, x, enc, layer, 'q')?;
        let k = self.linear(g, x, &format!("{pre}.wk"), &format!("{pre}.bk"))?;
        let v = self.attn_proj(g, x, enc, layer, 'v')?;
        let a = g
            .tape
            .attention_packed(q, k, v, &segments(spans, spans), self.backbone.heads, causal)?;
        self.linear(g, a, &format!("{pre}.wo"), &format!("{pre}.bo"))
    }

    fn cross_attention<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        spans: &[Span],
        mem: &Memory<'_>,
        prefix: &str,
    ) -> Result<Var> {
        let pre = format!("{prefix}.xattn");
        let q = self.linear(g, x, &format!("{pre}.wq"), &format!("{pre}.bq"))?;
        let k = self.linear(g, mem.tokens, &format!("{pre}.wk"), &format!("{pre}.bk"))?;
        let v = self.linear(g, mem.tokens, &format!("{pre}.wv"), &format!("{pre}.bv"))?;
        let a = g
            .tape
            .attention_packed(q, k, v, &segments(spans, mem.spans), self.backbone.heads, false)?;
        self.linear(g, a, &format!("{pre}.wo"), &format!("{pre}.bo"))
    }

    fn ffn<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, prefix: &str) -> Result<Var> {
        let h = self.layer_norm(g, x, &format!("{prefix}.ln2"))?;
        let h = self.linear(g, h, &format!("{prefix}.ffn.w1"), &format!("{prefix}.ffn.b1"))?;
        let h = g.tape.gelu(h)?;
        self.linear(g, h, &format!("{prefix}.ffn.w2"), &format!("{prefix}.ffn.b2"))
    }

    /// Adapter projections serving `enc` at `layer`, if the plan has any.
    /// Multimodal units also carry the textual up projection when the
    /// cross-modal form applies.
    pub fn unit<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        enc: Encoder,
        layer: usize,
    ) -> Result<Option<AdapterUnit>> {
        let down_name = adapter_name(enc, layer, "down");
        if !g.store().contains(&down_name) {
            return Ok(None);
        }
        let a = &self.adaptation;
        let mut ups = BTreeMap::new();
        ups.insert(enc.modality(), g.param(&adapter_name(enc, layer, "up"))?);
        let text_up = adapter_name(Encoder::Text, layer, "up");
        let crossmodal = a.variant == Variant::UniAdapter
            && g.store().contains(&text_up)
            && match enc {
                Encoder::Fusion => true,
                Encoder::Decoder => a.share_encoder_decoder,
                _ => false,
            };
        if crossmodal {
            ups.insert(Modality::Text, g.param(&text_up)?);
        }
        Ok(Some(AdapterUnit {
            down: g.param(&down_name)?,
            ups,
            scale: a.scale,
            activation: a.activation,
        }))
    }

    fn adapter_delta<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        unit: &AdapterUnit,
        enc: Encoder,
        x: Var,
    ) -> Result<Var> {
        if enc.modality() == Modality::Cross && unit.ups.contains_key(&Modality::Text) {
            unit.crossmodal_delta(&mut g.tape, x)
        } else {
            unit.unimodal_delta(&mut g.tape, x, enc.modality())
        }
    }

    /// One pre-norm block:
    /// `q = x + MSA(LN(x))`, `h = q + MCA(LN(q), mem)` (with memory),
    /// then `Adapter(h) + FFN(LN(h))` (parallel placement) or
    /// `h' + FFN(LN(h'))` with `h' = Adapter(h)` (sequential placement);
    /// multimodal blocks add the query-residual term on `q`.
    #[allow(clippy::too_many_arguments)]
    pub fn block<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        enc: Encoder,
        layer: usize,
        spans: &[Span],
        mem: Option<&Memory<'_>>,
        causal: bool,
    ) -> Result<Var> {
        let prefix = format!("{}.{layer}", enc.name());
        let x1 = self.layer_norm(g, x, &format!("{prefix}.ln1"))?;
        let sa = self.self_attention(g, x1, enc, layer, spans, causal)?;
        let q = g.tape.add(x, sa)?;
        let h = match mem {
            Some(mem) => {
                let xq = self.layer_norm(g, q, &format!("{prefix}.ln_x"))?;
                let ca = self.cross_attention(g, xq, spans, mem, &prefix)?;
                g.tape.add(q, ca)?
            }
            None => q,
        };
        let unit = self.unit(g, enc, layer)?;
        let mut out = match &unit {
            None => {
                let f = self.ffn(g, h, &prefix)?;
                g.tape.add(h, f)?
            }
            Some(u) if self.adaptation.variant == Variant::SequentialAdapter => {
                let delta = self.adapter_delta(g, u, enc, h)?;
                let h2 = g.tape.add(h, delta)?;
                let f = self.ffn(g, h2, &prefix)?;
                g.tape.add(h2, f)?
            }
            Some(u) => {
                let delta = self.adapter_delta(g, u, enc, h)?;
                let adapted = g.tape.add(h, delta)?;
                let f = self.ffn(g, h, &prefix)?;
                g.tape.add(adapted, f)?
            }
        };
        if enc == Encoder::Fusion && self.adaptation.query_residual {
            if let Some(tu) = self.unit(g, Encoder::Text, layer)? {
                let dq = tu.unimodal_delta(&mut g.tape, q, Modality::Text)?;
                let term = match self.adaptation.query_form {
                    QueryForm::Delta => dq,
                    QueryForm::Verbatim => g.tape.add(q, dq)?,
                };
                out = g.tape.add(out, term)?;
            }
        }
        Ok(out)
    }

    fn stack<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        mut x: Var,
        enc: Encoder,
        spans: &[Span],
        mem: Option<&Memory<'_>>,
        causal: bool,
    ) -> Result<Var> {
        for layer in 0..self.backbone.depth(enc) {
            x = self.block(g, x, enc, layer, spans, mem, causal)?;
        }
        self.layer_norm(g, x, &format!("{}.ln_f", enc.name()))
    }

    /// Encodes a batch of images, each `[patches, patch_dim]`, into
    /// sequences of `patches + 1` rows (CLS first).
    pub fn encode_visual<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        images: &[&Tensor<T>],
    ) -> Result<FeatureSet> {
        let b = &self.backbone;
        let p = b.patches;
        let mut data = Vec::with_capacity(images.len() * p * b.patch_dim);
        for img in images {
            if img.shape() != [p, b.patch_dim] {
                return Err(TensorError::Dimension {
                    op: "encode_visual",
                    lhs: img.shape().to_vec(),
                    rhs: vec![p, b.patch_dim],
                }
                .into());
            }
            data.extend_from_slice(img.data());
        }
        if images.is_empty() {
            return contract_err("encode_visual needs at least one image");
        }
        let n = images.len();
        let x = g
            .tape
            .constant(Tensor::from_vec(vec![n * p, b.patch_dim], data)?);
        let e = self.linear(g, x, "visual.patch_embed.w", "visual.patch_embed.b")?;
        let cls = g.param("visual.cls")?;
        let table = g.tape.concat(&[cls, e], 0)?;
        let mut idx = Vec::with_capacity(n * (p + 1));
        for i in 0..n {
            idx.push(0);
            idx.extend(1 + i * p..1 + (i + 1) * p);
        }
        let seq = g.tape.embedding(table, &idx)?;
        let pos_table = g.param("visual.pos")?;
        let pos_idx: Vec<usize> = (0..n).flat_map(|_| 0..=p).collect();
        let pos = g.tape.embedding(pos_table, &pos_idx)?;
        let x = g.tape.add(seq, pos)?;
        let spans = pack_spans(std::iter::repeat_n(p + 1, n));
        let tokens = self.stack(g, x, Encoder::Visual, &spans, None, false)?;
        Ok(FeatureSet {
            tokens,
            spans,
            kind: FeatureKind::Visual,
        })
    }

    /// Encodes a batch of token sequences into `len + 1` rows each.
    pub fn encode_text<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        texts: &[&[usize]],
    ) -> Result<FeatureSet> {
        let b = &self.backbone;
        if texts.is_empty() {
            return contract_err("encode_text needs at least one sequence");
        }
        let mut idx = Vec::new();
        let mut pos_idx = Vec::new();
        for t in texts {
            if t.len() > b.max_text_len {
                return contract_err(format!(
                    "text of {} tokens exceeds max length {}",
                    t.len(),
                    b.max_text_len
                ));
            }
            idx.push(0);
            for &tok in *t {
                if tok >= b.vocab {
                    return Err(TensorError::Index {
                        op: "encode_text",
                        index: tok,
                        extent: b.vocab,
                    }
                    .into());
                }
                idx.push(tok + 1);
            }
            pos_idx.extend(0..=t.len());
        }
        let cls = g.param("text.cls")?;
        let emb = g.param("text.tok_embed")?;
        let table = g.tape.concat(&[cls, emb], 0)?;
        let seq = g.tape.embedding(table, &idx)?;
        let pos_table = g.param("text.pos")?;
        let pos = g.tape.embedding(pos_table, &pos_idx)?;
        let x = g.tape.add(seq, pos)?;
        let spans = pack_spans(texts.iter().map(|t| t.len() + 1));
        let tokens = self.stack(g, x, Encoder::Text, &spans, None, false)?;
        Ok(FeatureSet {
            tokens,
            spans,
            kind: FeatureKind::Text,
        })
    }

    /// Runs the multimodal encoder on `text`; sequence `i` cross-attends to
    /// rows `visual_spans[i]` of `visual`.
    pub fn fuse<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        text: &FeatureSet,
        visual: Var,
        visual_spans: &[Span],
    ) -> Result<FeatureSet> {
        if visual_spans.len() != text.batch() {
            return contract_err(format!(
                "{} text sequences but {} visual spans",
                text.batch(),
                visual_spans.len()
            ));
        }
        if visual_spans.iter().any(|s| s.len == 0) {
            return contract_err("fuse needs a nonempty visual input for every sequence");
        }
        let mem = Memory {
            tokens: visual,
            spans: visual_spans,
        };
        let tokens = self.stack(g, text.tokens, Encoder::Fusion, &text.spans, Some(&mem), false)?;
        Ok(FeatureSet {
            tokens,
            spans: text.spans.clone(),
            kind: FeatureKind::Fused,
        })
    }

    /// Vocabulary logits `[Σ prompt lengths, vocab]` for each prompt under
    /// causal self-attention, cross-attending to the matching fused sequence.
    pub fn decode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        fused: &FeatureSet,
        prompts: &[Vec<usize>],
    ) -> Result<Var> {
        let b = &self.backbone;
        if prompts.len() != fused.batch() {
            return contract_err(format!(
                "{} prompts for {} fused sequences",
                prompts.len(),
                fused.batch()
            ));
        }
        let mut idx = Vec::new();
        let mut pos_idx = Vec::new();
        for p in prompts {
            if p.is_empty() {
                return contract_err("decoder prompt is empty");
            }
            if p.len() > b.max_text_len + 1 {
                return contract_err(format!(
                    "prompt of {} tokens exceeds decoder length {}",
                    p.len(),
                    b.max_text_len + 1
                ));
            }
            idx.extend_from_slice(p);
            pos_idx.extend(0..p.len());
        }
        let emb = g.param("decoder.tok_embed")?;
        let seq = g.tape.embedding(emb, &idx)?;
        let pos_table = g.param("decoder.pos")?;
        let pos = g.tape.embedding(pos_table, &pos_idx)?;
        let x = g.tape.add(seq, pos)?;
        let spans = pack_spans(prompts.iter().map(Vec::len));
        let mem = Memory {
            tokens: fused.tokens,
            spans: &fused.spans,
        };
        let h = self.stack(g, x, Encoder::Decoder, &spans, Some(&mem), true)?;
        self.linear(g, h, "head.lm.w", "head.lm.b")
    }

    /// Greedy decoding from `BOS` until `EOS` or the length limit. Returned
    /// answers exclude the markers.
    pub fn greedy_decode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        fused: &FeatureSet,
        max_len: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let n = fused.batch();
        let max_len = max_len.min(self.backbone.max_text_len);
        let mut prompts = vec![vec![BOS]; n];
        let mut done = vec![false; n];
        for _ in 0..max_len {
            if done.iter().all(|&d| d) {
                break;
            }
            let logits = self.decode(g, fused, &prompts)?;
            let vocab = self.backbone.vocab;
            let vals = g.tape.value(logits).data().to_vec();
            let mut row = 0;
            for (i, p) in prompts.iter_mut().enumerate() {
                row += p.len();
                if done[i] {
                    continue;
                }
                let last = &vals[(row - 1) * vocab..row * vocab];
                let tok = argmax(last);
                if tok == EOS {
                    done[i] = true;
                } else {
                    p.push(tok);
                }
            }
        }
        Ok(prompts.into_iter().map(|p| p[1..].to_vec()).collect())
    }

    /// L2-normalised contrastive embedding of CLS rows through `proj`
    /// (`head.vision_proj` or `head.text_proj`).
    pub fn embed<T: Real>(&self, g: &mut Graph<'_, T>, cls: Var, proj: &str) -> Result<Var> {
        let w = g.param(proj)?;
        let z = g.tape.matmul(cls, w)?;
        Ok(g.tape.l2_normalize(z)?)
    }

    /// Matching logits `[batch, 1]` from fused CLS rows.
    pub fn itm_logits<T: Real>(&self, g: &mut Graph<'_, T>, fused: &FeatureSet) -> Result<Var> {
        let cls = fused.cls(g)?;
        self.linear(g, cls, "head.itm.w", "head.itm.b")
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
