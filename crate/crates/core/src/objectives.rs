//! Training objectives: symmetric contrastive alignment of CLS embeddings,
//! binary matching with hardest in-batch negatives, and teacher-forced
//! answer generation.

use uniadapter_tensor::{Real, Tape, Var};

use crate::error::{contract_err, Result};
use crate::model::{BOS, EOS};

/// Symmetric cross-entropy over rows and columns of `t·vᵀ / τ`, where `t`
/// and `v` are `[B, d]` L2-normalised embeddings and `temp` is `[1]`.
/// Row `i` of `t` is matched with row `i` of `v`.
pub fn contrastive_loss<T: Real>(tape: &mut Tape<T>, t: Var, v: Var, temp: Var) -> Result<Var> {
    let b = tape.value(t).rows();
    if b < 2 {
        return contract_err(format!("contrastive loss needs a batch of at least 2, got {b}"));
    }
    if tape.value(v).rows() != b {
        return contract_err("contrastive loss needs equal text and visual batch sizes");
    }
    let sim = tape.matmul_nt(t, v)?;
    let inv = tape.recip(temp)?;
    let logits = tape.scale_by(sim, inv)?;
    let targets: Vec<usize> = (0..b).collect();
    let t2v = tape.cross_entropy(logits, &targets)?;
    let lt = tape.transpose(logits)?;
    let v2t = tape.cross_entropy(lt, &targets)?;
    let sum = tape.add(t2v, v2t)?;
    Ok(tape.scale(sum, T::of(0.5))?)
}

/// For each row of a square `[b, b]` similarity matrix, the off-diagonal
/// column with the highest score (lowest index on ties).
pub fn hardest_negatives<T: Real>(sim: &[T], b: usize) -> Result<Vec<usize>> {
    if b < 2 || sim.len() != b * b {
        return contract_err(format!("need a square similarity matrix with b >= 2 (b = {b})"));
    }
    Ok((0..b)
        .map(|i| {
            let row = &sim[i * b..(i + 1) * b];
            let mut best = if i == 0 { 1 } else { 0 };
            for j in 0..b {
                if j != i && row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Binary cross-entropy of matching logits against 0/1 labels. The batch
/// must contain both classes.
pub fn itm_loss<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[T]) -> Result<Var> {
    let pos = labels.iter().filter(|&&l| l > T::of(0.5)).count();
    if pos == 0 || pos == labels.len() {
        return contract_err("matching loss needs at least one positive and one negative");
    }
    Ok(tape.bce_with_logits(logits, labels)?)
}

/// Decoder input `[BOS, a₁ … aₙ]` and targets `[a₁ … aₙ, EOS]`.
pub fn teacher_forcing(answer: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    if answer.is_empty() {
        return contract_err("answer must have at least one token");
    }
    let mut input = vec![BOS];
    input.extend_from_slice(answer);
    let mut target = answer.to_vec();
    target.push(EOS);
    Ok((input, target))
}

/// Mean token cross-entropy of decoder logits `[Σ len, vocab]`.
pub fn lm_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    if targets.is_empty() {
        return contract_err("language-model loss over an empty answer");
    }
    Ok(tape.cross_entropy(logits, targets)?)
}
