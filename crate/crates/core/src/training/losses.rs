//! Loss terms as tape ops. Relative losses are mean-reduced; L_urn keeps the
//! unreduced Frobenius sums.

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, ArlError, Result};
use crate::tensor::{r, Real, Tensor};

fn constant_like<T: Real>(tape: &mut Tape<T>, like: Var, values: &[T], op: &'static str) -> Result<Var> {
    let shape = tape.shape(like).to_vec();
    if shape.iter().product::<usize>() != values.len() {
        return Err(dim_err(
            op,
            format!("{} predictions vs {} targets", shape.iter().product::<usize>(), values.len()),
        ));
    }
    Ok(tape.constant(Tensor::new(shape, values.to_vec())?))
}

fn mse<T: Real>(tape: &mut Tape<T>, pred: Var, target: &[T], op: &'static str) -> Result<Var> {
    let t = constant_like(tape, pred, target, op)?;
    let d = tape.sub(pred, t)?;
    let s = tape.square(d);
    Ok(tape.mean(s))
}

/// Mean of `(ĉ* - ĉ)^2` over pairs.
pub fn loss_relc<T: Real>(tape: &mut Tape<T>, pred: Var, target: &[T]) -> Result<Var> {
    mse(tape, pred, target, "loss_relc")
}

/// Mean of `(â* - â)^2`; a scalar target per pair is shared by all B bins.
pub fn loss_rels<T: Real>(tape: &mut Tape<T>, pred: Var, target: &[T]) -> Result<Var> {
    let s = tape.shape(pred).to_vec();
    let bins = if s.len() == 2 { s[1] } else { 1 };
    if s.is_empty() || s[0] != target.len() {
        return Err(dim_err(
            "loss_rels",
            format!("predictions {:?} vs {} pair targets", s, target.len()),
        ));
    }
    let wide: Vec<T> = target.iter().flat_map(|&t| std::iter::repeat(t).take(bins)).collect();
    mse(tape, pred, &wide, "loss_rels")
}

/// Mean cross-entropy of logits `[N, C]` against class indices.
pub fn loss_absc<T: Real>(tape: &mut Tape<T>, logits: Var, target: &[usize]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    if let Some(&bad) = target.iter().find(|&&t| s.len() == 2 && t >= s[1]) {
        return Err(ArlError::Contract(format!(
            "class target {} outside the {}-class vocabulary",
            bad, s[1]
        )));
    }
    let lsm = tape.log_softmax(logits, 1)?;
    let picked = tape.pick(lsm, target)?;
    let m = tape.mean(picked);
    Ok(tape.scale(m, r(-1.0)))
}

/// Mean over samples of `||a* - a||^2`.
pub fn loss_abss<T: Real>(tape: &mut Tape<T>, pred: Var, target: &[T]) -> Result<Var> {
    let t = constant_like(tape, pred, target, "loss_abss")?;
    let n = tape.shape(pred)[0];
    let d = tape.sub(pred, t)?;
    let s = tape.square(d);
    let s = tape.sum(s);
    Ok(tape.scale(s, r(1.0 / n as f64)))
}

/// Mean per-bit binary cross-entropy of key logits.
pub fn loss_key_bits<T: Real>(tape: &mut Tape<T>, logits: Var, bits: &[T]) -> Result<Var> {
    let b = tape.bce_with_logits(logits, bits)?;
    Ok(tape.mean(b))
}

/// `||ζ - 1||² + ||ζ* - 1||² + ||ζ'||²` for one source pair.
pub fn loss_urn<T: Real>(tape: &mut Tape<T>, zeta: Var, zeta_star: Var, zeta_prime: Var) -> Result<Var> {
    let s = tape.shape(zeta).to_vec();
    if s.len() != 2 || s[0] != s[1] || tape.shape(zeta_star) != s.as_slice() || tape.shape(zeta_prime) != s.as_slice() {
        return Err(dim_err(
            "loss_urn",
            format!(
                "expected three M x M matrices, got {:?}, {:?}, {:?}",
                s,
                tape.shape(zeta_star),
                tape.shape(zeta_prime)
            ),
        ));
    }
    let ones = tape.constant(Tensor::full(&s, T::one()));
    let mut terms = Vec::with_capacity(3);
    for (z, t) in [(zeta, Some(ones)), (zeta_star, Some(ones)), (zeta_prime, None)] {
        let d = match t {
            Some(t) => tape.sub(z, t)?,
            None => z,
        };
        let sq = tape.square(d);
        terms.push(tape.sum(sq));
    }
    let a = tape.add(terms[0], terms[1])?;
    tape.add(a, terms[2])
}

/// L_urn over a batch of source pairs laid out as in `unsup_pairs`:
/// the per-pair sums, averaged over pairs.
pub fn loss_urn_batch<T: Real>(tape: &mut Tape<T>, c_rel: Var, contrast: &[T], n_pairs: usize) -> Result<Var> {
    let t = constant_like(tape, c_rel, contrast, "loss_urn")?;
    let d = tape.sub(c_rel, t)?;
    let s = tape.square(d);
    let s = tape.sum(s);
    Ok(tape.scale(s, r(1.0 / n_pairs.max(1) as f64)))
}
